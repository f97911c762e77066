#include "nft/probing.hpp"

#include <cmath>
#include <stdexcept>

namespace nft {

CombAllocation comb_allocate(int tones, int subarrays, double df_hz) {
  if (subarrays < 1 || tones < 1 || tones % subarrays != 0)
    throw std::invalid_argument("comb_allocate: K must divide M");
  CombAllocation alloc;
  alloc.tones = tones;
  alloc.subarrays = subarrays;
  alloc.spacing_hz = subarrays * df_hz;
  alloc.ambiguity_s = 1.0 / alloc.spacing_hz;
  alloc.sets.resize(subarrays);
  for (int k = 0; k < subarrays; ++k)
    for (int m = k; m < tones; m += subarrays) alloc.sets[k].push_back(m);
  return alloc;
}

MatXcd make_dft_codebook(const ArrayGeometry& geom) {
  const int ns = geom.subarray_elements();
  MatXcd cb(ns, ns);
  for (int iz = 0; iz < geom.ns_z; ++iz) {
    for (int ix = 0; ix < geom.ns_x; ++ix) {
      const int col = iz * geom.ns_x + ix;
      for (int nz = 0; nz < geom.ns_z; ++nz)
        for (int nx = 0; nx < geom.ns_x; ++nx)
          cb(nz * geom.ns_x + nx, col) =
              std::polar(1.0 / std::sqrt(static_cast<double>(ns)),
                         2.0 * M_PI *
                             (static_cast<double>(nx) * ix / geom.ns_x +
                              static_cast<double>(nz) * iz / geom.ns_z));
    }
  }
  return cb;
}

int select_beam(const Vec3& u_pred, const MatXcd& codebook,
                const ArrayGeometry& geom) {
  if (codebook.cols() == 0) throw std::invalid_argument("select_beam: empty codebook");
  const Eigen::VectorXcd a =
      steering_vector(u_pred, geom.bs_offsets, geom.wavelength);
  int best = 0;
  double best_corr = -1.0;
  for (int i = 0; i < codebook.cols(); ++i) {
    const double corr = std::abs(a.dot(codebook.col(i)));  // a^H f
    if (corr > best_corr) {
      best_corr = corr;
      best = i;
    }
  }
  return best;
}

ProbingSetup make_probing_setup(const Vec3& p_pred, const MatXcd& codebook,
                                const ArrayGeometry& geom) {
  ProbingSetup setup;
  const double inv_sqrt_nr = 1.0 / std::sqrt(double(geom.ue_elements()));
  for (int k = 0; k < geom.subarrays(); ++k) {
    const auto [dist, u] = subarray_range_dir(geom, p_pred, k);
    // The subchannel applies the departure steering unconjugated (a_t^T f),
    // so the physically matched precoder is the conjugate of the selected
    // codeword; its realized gain |a^T conj(f)| equals the maximized
    // correlation |a^H f|, and the conjugate of a DFT column is itself a
    // codeword with the same per-element modulus.
    setup.beams.push_back(
        codebook.col(select_beam(u, codebook, geom)).conjugate());
    const Eigen::VectorXcd c =
        steering_vector(Vec3(-u), geom.ue_offsets, geom.wavelength);
    setup.combiners.push_back(inv_sqrt_nr * c);
  }
  return setup;
}

DopplerLedger make_ledger(int subarrays) {
  DopplerLedger ledger;
  ledger.theta.assign(subarrays, 0.0);
  return ledger;
}

namespace {

MatXcd subchannel(const Vec3& p, const std::vector<PropagationPath>& paths,
                  int m, const ArrayGeometry& geom, int k,
                  const ChannelConfig& cfg) {
  return cfg.model == ChannelModel::Swm
             ? swm_subchannel(p, paths, m, geom, k, cfg)
             : hspm_subchannel(paths, m, geom, k, cfg);
}

}  // namespace

PilotFrame observe_frame(const KinematicState& state,
                         const std::vector<PropagationPath>& paths,
                         const ProbingSetup& setup, const CombAllocation& alloc,
                         DopplerLedger& ledger, const ArrayGeometry& geom,
                         const ChannelConfig& cfg, double snr_db, bool bad,
                         Rng& rng) {
  const int K = alloc.subarrays;
  ledger.cpe = cfg.random_cpe ? rng.uniform(0.0, 2.0 * M_PI) : 0.0;

  std::vector<PropagationPath> los_only;
  for (const auto& path : paths)
    if (path.is_los) los_only.push_back(path);
  if (los_only.empty()) throw std::invalid_argument("observe_frame: no LoS path");

  PilotFrame frame;
  frame.q = ledger.q;
  frame.bad = bad;
  frame.snr_db = snr_db;
  frame.y.resize(K);

  // Noise floor from the clean LoS response, averaged over every tone.
  double los_power = 0.0;
  std::vector<Eigen::VectorXcd> signal(K);
  for (int k = 0; k < K; ++k) {
    const auto& tones = alloc.sets[k];
    signal[k].resize(static_cast<Eigen::Index>(tones.size()));
    // y ~ e^{-j Phi}, Phi = 2 pi f tau + cpe - theta_k; the range phase is
    // already inside the subchannel.
    const std::complex<double> flat =
        std::polar(1.0, ledger.theta[k] - ledger.cpe);
    for (size_t i = 0; i < tones.size(); ++i) {
      const MatXcd h = subchannel(state.p, paths, tones[i], geom, k, cfg);
      const std::complex<double> s =
          setup.combiners[k].dot(h * setup.beams[k]);  // w^H H f
      signal[k](static_cast<Eigen::Index>(i)) = s * flat;
      if (paths.size() == los_only.size()) {
        los_power += std::norm(s);
      } else {
        const MatXcd hl = subchannel(state.p, los_only, tones[i], geom, k, cfg);
        los_power += std::norm(setup.combiners[k].dot(hl * setup.beams[k]));
      }
    }
  }
  los_power /= alloc.tones;
  const double noise_var = los_power / std::pow(10.0, snr_db / 10.0);
  const double noise_amp = std::sqrt(noise_var / 2.0);
  const double atten = bad ? 0.1 : 1.0;

  for (int k = 0; k < K; ++k) {
    frame.y[k].resize(signal[k].size());
    for (Eigen::Index i = 0; i < signal[k].size(); ++i)
      frame.y[k](i) =
          atten * signal[k](i) +
          std::complex<double>(noise_amp * rng.normal(), noise_amp * rng.normal());
  }

  // Advance the Doppler ledger with the frame-start radial rates.
  for (int k = 0; k < K; ++k) {
    const auto [dist, u] = subarray_range_dir(geom, state.p, k);
    const double nu = (cfg.carrier_hz / kSpeedOfLight) * state.v.dot(u);
    ledger.theta[k] += 2.0 * M_PI * nu * ledger.t0_s;
  }
  ledger.q += 1;
  return frame;
}

PilotFrame inject_bad_frame(const PilotFrame& frame) {
  PilotFrame out = frame;
  for (auto& y : out.y) y *= 0.1;
  out.bad = true;
  return out;
}

KinematicState propagate_state(const KinematicState& state, double t0_s,
                               double accel_psd, Rng& rng) {
  KinematicState next;
  const double s = std::sqrt(accel_psd);
  for (int axis = 0; axis < 3; ++axis) {
    const double xi = rng.normal();
    next.p(axis) = state.p(axis) + t0_s * state.v(axis) +
                   s * xi * t0_s * t0_s / 2.0;
    next.v(axis) = state.v(axis) + s * xi * t0_s;
  }
  return next;
}

std::vector<TrajectoryStep> sample_trajectory(const TrajectoryConfig& tcfg,
                                              const ArrayGeometry& geom,
                                              const ChannelConfig& cfg,
                                              const MatXcd& codebook, Rng& rng) {
  if (tcfg.frames < 1) throw std::invalid_argument("sample_trajectory: empty trajectory");
  Rng init = rng.split("init");
  Rng env = rng.split("env");

  // Direction uniform over the forward cone (away from grazing and zenith).
  Vec3 u;
  do {
    const double az = init.uniform(0.0, 2.0 * M_PI);
    const double el = std::asin(init.uniform(-1.0, 1.0));
    u = direction_from_angles({az, el});
  } while (u.y() < 0.34 || std::abs(u.z()) > 0.94);
  const double range = init.uniform(tcfg.range_min, tcfg.range_max);

  KinematicState state;
  state.p = geom.subarray_ref[0] + range * u;
  const double speed = init.uniform(tcfg.speed_min, tcfg.speed_max);
  const double vaz = init.uniform(0.0, 2.0 * M_PI);
  const double vel = std::asin(init.uniform(-1.0, 1.0));
  state.v = speed * direction_from_angles({vaz, vel});

  const double los_phase = env.uniform(0.0, 2.0 * M_PI);
  const auto scatterers = sample_scatterers(state.p, geom, cfg, env);
  const auto alloc = comb_allocate(cfg.subcarriers, geom.subarrays(),
                                   cfg.subcarrier_spacing());
  DopplerLedger ledger = make_ledger(geom.subarrays());
  ledger.t0_s = tcfg.t0_s;

  std::vector<TrajectoryStep> out;
  Rng frames = rng.split("frames");
  for (int q = 0; q < tcfg.frames; ++q) {
    Rng frng = frames.split(static_cast<uint64_t>(q));
    const bool bad = frng.uniform() < tcfg.bad_prob;
    const auto paths = make_paths(state.p, scatterers, geom, cfg, los_phase);
    const auto setup = make_probing_setup(state.p, codebook, geom);
    TrajectoryStep step;
    step.state = state;
    step.frame = observe_frame(state, paths, setup, alloc, ledger, geom, cfg,
                               tcfg.snr_db, bad, frng);
    out.push_back(std::move(step));
    state = propagate_state(state, tcfg.t0_s, tcfg.accel_psd, frng);
  }
  return out;
}

}  // namespace nft
