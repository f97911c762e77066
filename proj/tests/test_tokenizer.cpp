#include <doctest.h>

#include <cmath>
#include <complex>

#include "nft/tokenizer.hpp"

using namespace nft;

namespace {

// Single-path tone vector y_i = a * e^{-j 2 pi f_i tau}.
Eigen::VectorXcd synthetic_tones(const std::vector<double>& freqs, double tau,
                                 double amp = 1.0, double flat_phase = 0.0) {
  Eigen::VectorXcd y(static_cast<Eigen::Index>(freqs.size()));
  for (size_t i = 0; i < freqs.size(); ++i)
    y(static_cast<Eigen::Index>(i)) =
        std::polar(amp, -2.0 * M_PI * freqs[i] * tau + flat_phase);
  return y;
}

std::vector<double> comb_freqs(int n, double f0, double spacing) {
  std::vector<double> f(n);
  for (int i = 0; i < n; ++i) f[i] = f0 + i * spacing;
  return f;
}

}  // namespace

TEST_CASE("group partition") {
  auto parts = partition_groups(128, 4);
  REQUIRE(parts.size() == 4);
  for (const auto& [b, e] : parts) CHECK(e - b == 32);

  parts = partition_groups(10, 3);
  CHECK(parts[0] == std::pair<int, int>{0, 4});
  CHECK(parts[1] == std::pair<int, int>{4, 7});
  CHECK(parts[2] == std::pair<int, int>{7, 10});

  // Covering and disjoint for many shapes.
  for (int count : {5, 17, 64, 101})
    for (int g = 1; g <= count; g += 3) {
      const auto ps = partition_groups(count, g);
      int cursor = 0;
      for (const auto& [b, e] : ps) {
        CHECK(b == cursor);
        CHECK(e > b);
        cursor = e;
      }
      CHECK(cursor == count);
    }

  CHECK_THROWS_AS(partition_groups(4, 5), std::invalid_argument);
}

TEST_CASE("group statistics") {
  const std::vector<double> freqs{1e9, 1.1e9};
  Eigen::VectorXcd y(2);
  y << std::complex<double>(1.0, 0.0), std::complex<double>(0.0, -1.0);
  const auto [e, fbar, var] = group_stats(y, freqs, 0, 2);
  CHECK(e == doctest::Approx(2.0));
  CHECK(fbar == doctest::Approx(1.05e9));
  CHECK(var == doctest::Approx(0.05e9 * 0.05e9).epsilon(1e-9));

  // Single tone: zero spread.
  const auto [e1, f1, v1] = group_stats(y, freqs, 0, 1);
  CHECK(e1 == doctest::Approx(1.0));
  CHECK(f1 == doctest::Approx(1e9));
  CHECK(v1 == doctest::Approx(0.0));

  // Random inputs against a direct-sum oracle.
  Rng rng(3);
  const int n = 24;
  Eigen::VectorXcd yr(n);
  std::vector<double> fr(n);
  for (int i = 0; i < n; ++i) {
    yr(i) = std::complex<double>(rng.normal(), rng.normal());
    fr[i] = 2.9e11 + 1e7 * i;
  }
  const auto [er, fbr, vr] = group_stats(yr, fr, 3, 19);
  double ew = 0.0, ws = 0.0, mu = 0.0;
  for (int i = 3; i < 19; ++i) {
    ew += std::norm(yr(i));
    ws += std::norm(yr(i)) + kFeatureEps;
  }
  for (int i = 3; i < 19; ++i) mu += (std::norm(yr(i)) + kFeatureEps) / ws * fr[i];
  double s2 = 0.0;
  for (int i = 3; i < 19; ++i)
    s2 += (std::norm(yr(i)) + kFeatureEps) / ws * (fr[i] - mu) * (fr[i] - mu);
  CHECK(er == doctest::Approx(ew).epsilon(1e-12));
  CHECK(fbr == doctest::Approx(mu).epsilon(1e-12));
  CHECK(vr == doctest::Approx(s2).epsilon(1e-10));
}

TEST_CASE("circular slope of adjacent-tone products") {
  const double spacing = 31.25e6;
  const auto freqs = comb_freqs(32, 2.98e11, spacing);

  // Wrapped regime: per-step increment beyond pi.
  const double tau = 0.6 / spacing;  // 2 pi spacing tau = 1.2 pi
  const auto y = synthetic_tones(freqs, tau, 2.0, 0.7);
  const auto f = circular_slope(y, 0, 32);
  CHECK(f.kappa == doctest::Approx(1.0).epsilon(1e-9));
  const double want = std::remainder(2.0 * M_PI * spacing * tau, 2.0 * M_PI);
  CHECK(std::remainder(f.phi - want, 2.0 * M_PI) ==
        doctest::Approx(0.0).epsilon(1e-9));
  CHECK(std::hypot(f.q[0], f.q[1]) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(f.q[0] == doctest::Approx(std::cos(f.phi)).epsilon(1e-9));
  CHECK(f.q[1] == doctest::Approx(std::sin(f.phi)).epsilon(1e-9));

  // Antipodal products of equal magnitude cancel.
  Eigen::VectorXcd anti(3);
  anti << 1.0, 1.0, -1.0;  // products: +1, -1
  const auto fa = circular_slope(anti, 0, 3);
  CHECK(fa.kappa == doctest::Approx(0.0).epsilon(1e-12));

  // Degenerate slices fall back to the (0, (1,0)) convention.
  Eigen::VectorXcd zero = Eigen::VectorXcd::Zero(4);
  const auto fz = circular_slope(zero, 0, 4);
  CHECK(fz.kappa == 0.0);
  CHECK(fz.q[0] == 1.0);
  CHECK(fz.q[1] == 0.0);
  const auto f1 = circular_slope(zero, 0, 1);
  CHECK(f1.kappa == 0.0);
}

TEST_CASE("token descriptor layout") {
  GroupFeatures f;
  f.energy = 0.0;
  f.spread_hz2 = 0.0;
  auto t = build_descriptor(f);
  CHECK(t[0] == doctest::Approx(std::log(kFeatureEps)));
  CHECK(t[1] == doctest::Approx(std::log(kFeatureEps)));
  CHECK(t[2] == 1.0);
  CHECK(t[3] == 0.0);
  CHECK(t[4] == 0.0);

  f.energy = 5.0;
  const auto t2 = build_descriptor(f);
  CHECK(t2[0] > t[0]);
  static_assert(std::tuple_size_v<TokenDescriptor> == kTokenDim);
}

TEST_CASE("circular least-squares slope fit") {
  const double spacing = 31.25e6;
  const auto freqs = comb_freqs(64, 2.98e11, spacing);
  const double dtau_max = 200e-12;

  std::vector<double> w(freqs.size(), 1.0 / freqs.size());

  // Exact affine phase increments.
  const double dtau = 37e-12, zeta = 1.3;
  std::vector<double> dphi(freqs.size());
  for (size_t i = 0; i < freqs.size(); ++i)
    dphi[i] = std::remainder(2.0 * M_PI * freqs[i] * dtau - zeta, 2.0 * M_PI);
  auto [dt, z, kd] = circular_ls_fit(dphi, freqs, w, dtau_max);
  CHECK(std::abs(dt - dtau) < 1e-12);
  // The offset inherits the carrier-scale amplification of the tiny delay
  // uncertainty (2 pi f_c * dtau error), so its tolerance is looser.
  CHECK(std::abs(std::remainder(z - zeta, 2.0 * M_PI)) < 1e-5);
  CHECK(kd == doctest::Approx(1.0).epsilon(1e-9));

  // Zero slope, constant offset.
  for (auto& d : dphi) d = -0.4;
  auto [dt0, z0, kd0] = circular_ls_fit(dphi, freqs, w, dtau_max);
  CHECK(std::abs(dt0) < 1e-12);
  CHECK(z0 == doctest::Approx(0.4));
  CHECK(kd0 == doctest::Approx(1.0));

  // Noisy increments against a dense grid oracle.
  Rng rng(77);
  for (size_t i = 0; i < freqs.size(); ++i)
    dphi[i] = std::remainder(2.0 * M_PI * freqs[i] * 61e-12 - 0.8 +
                                 0.3 * rng.normal(),
                             2.0 * M_PI);
  auto [dtn, zn, kdn] = circular_ls_fit(dphi, freqs, w, dtau_max);
  double best = -1.0, best_tau = 0.0;
  const int grid = 100000;
  for (int i = 0; i <= grid; ++i) {
    const double t = -dtau_max + 2.0 * dtau_max * i / grid;
    std::complex<double> a = 0.0;
    for (size_t j = 0; j < freqs.size(); ++j)
      a += w[j] * std::polar(1.0, dphi[j] - 2.0 * M_PI * freqs[j] * t);
    if (std::abs(a) > best) {
      best = std::abs(a);
      best_tau = t;
    }
  }
  CHECK(std::abs(dtn - best_tau) <= 2.0 * dtau_max / grid);

  std::vector<double> zero_w(freqs.size(), 0.0);
  CHECK_THROWS_AS(circular_ls_fit(dphi, freqs, zero_w, dtau_max),
                  std::invalid_argument);
}

TEST_CASE("frame tokenization and invariances") {
  const double wl = kSpeedOfLight / 0.3e12;
  const auto g = ArrayGeometry::make(wl, 2, 2, 64.0, 4, 4, 2, 2);
  ChannelConfig cfg;
  cfg.carrier_hz = 0.3e12;
  cfg.bandwidth_hz = 1e9;
  cfg.subcarriers = 64;
  cfg.k_factor_infinite = true;
  cfg.model = ChannelModel::Hspm;
  cfg.random_cpe = false;
  const auto alloc =
      comb_allocate(cfg.subcarriers, g.subarrays(), cfg.subcarrier_spacing());
  const auto cb = make_dft_codebook(g);

  KinematicState state;
  state.p = Vec3(4.0, 52.0, -2.0);
  const auto paths = make_paths(state.p, {}, g, cfg);
  const auto setup = make_probing_setup(state.p, cb, g);
  auto ledger = make_ledger(g.subarrays());
  Rng rng(19);
  auto frame =
      observe_frame(state, paths, setup, alloc, ledger, g, cfg, 40.0, false, rng);

  const int G = 4;
  const auto feats = tokenize_frame(frame, alloc, cfg, G);
  REQUIRE(feats.groups.size() == size_t(g.subarrays()));
  for (const auto& gk : feats.groups) {
    REQUIRE(gk.size() == size_t(G));
    for (const auto& f : gk) {
      CHECK(f.kappa >= 0.0);
      CHECK(f.kappa <= 1.0 + 1e-12);
      CHECK(f.spread_hz2 >= 0.0);
      CHECK(std::hypot(f.q[0], f.q[1]) == doctest::Approx(1.0).epsilon(1e-9));
    }
  }

  // Global phase rotation changes nothing; real scaling only moves energy.
  PilotFrame rotated = frame;
  for (auto& y : rotated.y) y *= std::polar(1.0, 1.234);
  const auto fr = tokenize_frame(rotated, alloc, cfg, G);
  PilotFrame scaled = frame;
  for (auto& y : scaled.y) y *= 3.0;
  const auto fs = tokenize_frame(scaled, alloc, cfg, G);
  for (int k = 0; k < g.subarrays(); ++k)
    for (int gi = 0; gi < G; ++gi) {
      const auto& a = feats.groups[k][gi];
      const auto& b = fr.groups[k][gi];
      CHECK(b.energy == doctest::Approx(a.energy).epsilon(1e-12));
      CHECK(b.centroid_hz == doctest::Approx(a.centroid_hz).epsilon(1e-12));
      CHECK(b.kappa == doctest::Approx(a.kappa).epsilon(1e-12));
      CHECK(b.q[0] == doctest::Approx(a.q[0]).epsilon(1e-9));
      CHECK(b.q[1] == doctest::Approx(a.q[1]).epsilon(1e-9));
      // The additive floor in the weights makes real-scaling invariance only
      // approximate for the power-weighted moments.
      const auto& c = fs.groups[k][gi];
      CHECK(c.energy == doctest::Approx(9.0 * a.energy).epsilon(1e-12));
      CHECK(c.centroid_hz == doctest::Approx(a.centroid_hz).epsilon(1e-6));
      CHECK(c.kappa == doctest::Approx(a.kappa).epsilon(1e-9));
    }
}

TEST_CASE("increment features between frames") {
  const double wl = kSpeedOfLight / 0.3e12;
  const auto g = ArrayGeometry::make(wl, 2, 2, 64.0, 4, 4, 2, 2);
  ChannelConfig cfg;
  cfg.carrier_hz = 0.3e12;
  cfg.bandwidth_hz = 1e9;
  cfg.subcarriers = 64;
  cfg.k_factor_infinite = true;
  cfg.model = ChannelModel::Hspm;
  cfg.random_cpe = false;
  const auto alloc =
      comb_allocate(cfg.subcarriers, g.subarrays(), cfg.subcarrier_spacing());
  const auto cb = make_dft_codebook(g);
  const double t0 = 1e-3, dtau_max = 200e-12;

  KinematicState state;
  state.p = Vec3(4.0, 52.0, -2.0);
  const auto paths = make_paths(state.p, {}, g, cfg);
  const auto setup = make_probing_setup(state.p, cb, g);
  auto ledger = make_ledger(g.subarrays());
  Rng rng(23);
  const auto f0 =
      observe_frame(state, paths, setup, alloc, ledger, g, cfg, 300.0, false, rng);
  const auto f1 =
      observe_frame(state, paths, setup, alloc, ledger, g, cfg, 300.0, false, rng);

  // Identical noiseless frames: zero drift, unit consistency.
  const auto inc = increment_features(f1, f0, alloc, cfg, t0, dtau_max);
  REQUIRE(inc.size() == size_t(g.subarrays()));
  for (const auto& d : inc) {
    CHECK(std::abs(d.dtau_s) < 1e-13);
    CHECK(d.kappa_delta == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::abs(d.d[0]) < kSpeedOfLight / t0 * 1e-13);
    CHECK(d.d[1] == doctest::Approx(std::cos(d.zeta_rel)));
    CHECK(d.d[3] == doctest::Approx(d.kappa_delta));
  }
  CHECK(inc[0].zeta_rel == 0.0);

  // A real radial move shows up as the geometric delay increment.
  KinematicState moved;
  moved.p = state.p + Vec3(0.0, 0.012, 0.0);
  const auto paths2 = make_paths(moved.p, {}, g, cfg);
  auto ledger2 = make_ledger(g.subarrays());
  ledger2.theta = ledger.theta;
  const auto f2 = observe_frame(moved, paths2, setup, alloc, ledger2, g, cfg,
                                300.0, false, rng);
  const auto inc2 = increment_features(f2, f1, alloc, cfg, t0, dtau_max);
  for (int k = 0; k < g.subarrays(); ++k) {
    const double want =
        (paths2[0].length[k] - paths[0].length[k]) / kSpeedOfLight;
    CHECK(inc2[k].dtau_s == doctest::Approx(want).epsilon(1e-3));
    CHECK(inc2[k].kappa_delta > 0.99);
  }

  // Frequency-flat phase offsets are invisible to the increment features.
  PilotFrame rotated = f2;
  for (auto& y : rotated.y) y *= std::polar(1.0, -2.1);
  const auto inc3 = increment_features(rotated, f1, alloc, cfg, t0, dtau_max);
  for (int k = 0; k < g.subarrays(); ++k) {
    CHECK(inc3[k].dtau_s == doctest::Approx(inc2[k].dtau_s).epsilon(1e-9));
    CHECK(std::abs(std::remainder(inc3[k].zeta_rel - inc2[k].zeta_rel,
                                  2.0 * M_PI)) < 1e-4);
  }
}
