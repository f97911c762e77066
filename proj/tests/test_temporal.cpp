#include <doctest.h>

#include <cmath>
#include <cstring>

#include "nft/temporal.hpp"

using namespace nft;

namespace {

struct Fixture {
  ArrayGeometry geom;
  PastConfig pcfg;
  TtConfig tcfg;
  double carrier = 0.3e12;
  double t0 = 1e-3;

  Fixture() {
    const double lambda = kSpeedOfLight / carrier;
    geom = ArrayGeometry::make(lambda, 2, 2, 64.0, 2, 2, 2, 1);
    pcfg.d_model = 16;
    tcfg.d_model = 8;
    tcfg.heads = 2;
    tcfg.layers = 1;
    tcfg.window = 3;
  }

  TtModel model() const { return TtModel(tcfg, pcfg, geom, carrier, t0); }

  FrameEvidence random_evidence(int q, Rng& rng) const {
    const int K = geom.subarrays();
    FrameEvidence ev;
    ev.q = q;
    ev.packet.h0 = Eigen::VectorXd(pcfg.d_model);
    for (int i = 0; i < pcfg.d_model; ++i)
      ev.packet.h0(i) = rng.uniform(-1.0, 1.0);
    ev.packet.p_hat =
        Vec3(rng.uniform(-5.0, 5.0), rng.uniform(40.0, 60.0), rng.uniform(-5.0, 5.0));
    ev.packet.r_hat = rng.uniform(0.1, 0.9);
    for (int k = 0; k < K; ++k) {
      Eigen::VectorXd z(pcfg.d_model);
      for (int i = 0; i < pcfg.d_model; ++i) z(i) = rng.uniform(-1.0, 1.0);
      ev.packet.view_tokens.push_back(z);
    }
    ev.increments.resize(K);
    for (int k = 0; k < K; ++k) {
      auto& inc = ev.increments[k];
      inc.dtau_s = rng.uniform(-1e-13, 1e-13);
      inc.zeta_rel = (k == 0) ? 0.0 : rng.uniform(-0.3, 0.3);
      inc.kappa_delta = rng.uniform(0.2, 1.0);
      inc.d = {inc.dtau_s * kSpeedOfLight / t0, std::cos(inc.zeta_rel),
               std::sin(inc.zeta_rel), inc.kappa_delta};
    }
    return ev;
  }
};

KinematicState random_truth(Rng& rng) {
  KinematicState st;
  st.p = Vec3(rng.uniform(-5.0, 5.0), rng.uniform(40.0, 60.0),
              rng.uniform(-5.0, 5.0));
  st.v = Vec3(rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0),
              rng.uniform(-20.0, 20.0));
  return st;
}

}  // namespace

TEST_CASE("constant-velocity prior matrices follow the closed forms") {
  const StatePrior prior = make_state_prior(1e-3, 4.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(prior.f(i, i) == 1.0);
    CHECK(prior.f(i + 3, i + 3) == 1.0);
    CHECK(prior.f(i, i + 3) == 1e-3);
    CHECK(prior.q(i, i) == doctest::Approx(4.0 * 1e-12 / 4.0));
    CHECK(prior.q(i, i + 3) == doctest::Approx(4.0 * 1e-9 / 2.0));
    CHECK(prior.q(i + 3, i + 3) == doctest::Approx(4.0 * 1e-6));
  }
  CHECK((prior.q - prior.q.transpose()).cwiseAbs().maxCoeff() == 0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(prior.q);
  CHECK(es.eigenvalues().minCoeff() >= -1e-18);
}

TEST_CASE("first-frame drift descriptors are exactly zero") {
  const auto inc = initial_increments(4);
  REQUIRE(inc.size() == 4);
  for (const auto& i : inc) {
    CHECK(i.dtau_s == 0.0);
    CHECK(i.zeta_rel == 0.0);
    CHECK(i.kappa_delta == 0.0);
    for (double v : i.d) CHECK(v == 0.0);
  }
}

TEST_CASE("window buffer keeps the newest frames in order") {
  Fixture fx;
  Rng rng(1);
  WindowBuffer buf(3);
  for (int q = 0; q < 5; ++q) buf.push(fx.random_evidence(q, rng));
  REQUIRE(buf.size() == 3);
  CHECK(buf.at(0).q == 2);
  CHECK(buf.at(2).q == 4);
  CHECK_THROWS_AS(buf.push(fx.random_evidence(4, rng)), std::invalid_argument);
}

TEST_CASE("causal mask matches the per-pair rule") {
  Fixture fx;
  fx.tcfg.window = 4;
  const TtModel model = fx.model();
  const int kp1 = fx.geom.subarrays() + 1;
  const int n = fx.tcfg.window * kp1;
  for (int padded = 0; padded < fx.tcfg.window; ++padded) {
    const ad::Mat m = model.causal_mask(padded);
    REQUIRE(m.rows() == n);
    for (int row = 0; row < n; ++row)
      for (int col = 0; col < n; ++col) {
        const bool sq = row / kp1 >= padded;
        const bool sk = col / kp1 >= padded;
        double want = -std::numeric_limits<double>::infinity();
        if (sk && !sq) want = 0.0;
        if (sk && sq && col / kp1 <= row / kp1) want = 0.0;
        CHECK(m(row, col) == want);
      }
  }
  // Fully valid window: a frame sees every frame up to itself and nothing
  // later; padded keys are excluded for every valid query.
  const ad::Mat full = model.causal_mask(0);
  CHECK(full(kp1, 2 * kp1) == -std::numeric_limits<double>::infinity());
  CHECK(full(2 * kp1, kp1) == 0.0);
}

TEST_CASE("zeroed gate parameters yield gates of one half") {
  Fixture fx;
  const TtModel model = fx.model();
  ad::ParamStore store;
  Rng rng(2);
  model.init_params(store, rng);
  store.params["tt.gate_a0"].setZero();
  store.params["tt.gate_ar"].setZero();
  store.params["tt.gate_ak"].setZero();
  store.params["tt.gate_wg"].setZero();

  Rng erng(3);
  WindowBuffer buf(fx.tcfg.window);
  buf.push(fx.random_evidence(0, erng));
  ad::Tape t;
  const auto out = model.forward(t, store, buf);
  const ad::Mat& g = t.value(out.gates);
  for (int k = 0; k < g.rows(); ++k) CHECK(g(k, 0) == 0.5);
}

TEST_CASE("single real frame with full padding stays finite and deterministic") {
  Fixture fx;
  const TtModel model = fx.model();
  ad::ParamStore store;
  Rng rng(4);
  model.init_params(store, rng);
  Rng erng(5);
  WindowBuffer buf(fx.tcfg.window);
  const TtState s1 = model.step(store, buf, fx.random_evidence(0, erng));
  CHECK(s1.mu_fil.allFinite());
  CHECK(s1.mu_pre.allFinite());

  Rng erng2(5);
  WindowBuffer buf2(fx.tcfg.window);
  const TtState s2 = model.step(store, buf2, fx.random_evidence(0, erng2));
  CHECK(std::memcmp(s1.mu_fil.data(), s2.mu_fil.data(), 6 * sizeof(double)) == 0);
}

TEST_CASE("rollout outputs before a perturbed frame are bit-identical") {
  Fixture fx;
  const TtModel model = fx.model();
  ad::ParamStore store;
  Rng rng(6);
  model.init_params(store, rng);

  const int n = 6;
  Rng erng(7);
  std::vector<FrameEvidence> evidence;
  for (int q = 0; q < n; ++q) evidence.push_back(fx.random_evidence(q, erng));

  auto rollout = [&](const std::vector<FrameEvidence>& evs) {
    WindowBuffer buf(fx.tcfg.window);
    std::vector<TtState> states;
    for (const auto& ev : evs) states.push_back(model.step(store, buf, ev));
    return states;
  };
  const auto base = rollout(evidence);

  const int hit = 4;
  auto perturbed = evidence;
  perturbed[hit].packet.h0(0) += 1.0;
  perturbed[hit].packet.p_hat.y() += 2.0;
  const auto alt = rollout(perturbed);
  for (int q = 0; q < hit; ++q)
    CHECK(std::memcmp(base[q].mu_fil.data(), alt[q].mu_fil.data(),
                      6 * sizeof(double)) == 0);
  CHECK((base[hit].mu_fil - alt[hit].mu_fil).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("encoder output matches a naive reference implementation") {
  Fixture fx;
  fx.tcfg.window = 2;
  const TtModel model = fx.model();
  ad::ParamStore store;
  Rng rng(8);
  model.init_params(store, rng);

  const int K = fx.geom.subarrays();
  const int kp1 = K + 1;
  const int d = fx.tcfg.d_model;
  const int dP = fx.pcfg.d_model;
  const int heads = fx.tcfg.heads;
  const int dh = d / heads;
  const double delta = fx.tcfg.delta_t;
  const double eps = fx.tcfg.eps;

  Rng erng(9);
  std::vector<FrameEvidence> evs{fx.random_evidence(0, erng),
                                 fx.random_evidence(1, erng)};
  WindowBuffer buf(fx.tcfg.window);
  for (const auto& ev : evs) buf.push(ev);
  ad::Tape tape;
  const auto out = model.forward(tape, store, buf);

  auto P = [&](const std::string& n) -> const ad::Mat& {
    return store.params.at(n);
  };
  auto layernorm = [](const Eigen::RowVectorXd& x) {
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    return Eigen::RowVectorXd(((x.array() - mu) / std::sqrt(var + 1e-6)).matrix());
  };
  auto encode_t = [&](int q) {
    Eigen::RowVectorXd e(d);
    for (int i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i / 2 * 2) / d);
      e(i) = (i % 2 == 0) ? std::sin(q * rate) : std::cos(q * rate);
    }
    return e;
  };
  const double rms = fx.geom.geo_arm_rms;

  const int n = fx.tcfg.window * kp1;
  ad::Mat x(n, d);
  Eigen::VectorXd rho(n);
  for (int f = 0; f < 2; ++f) {
    const FrameEvidence& ev = evs[f];
    Eigen::RowVectorXd glob(dP + 4);
    glob << ev.packet.h0.transpose(), ev.packet.p_hat.x() / fx.tcfg.pos_scale,
        ev.packet.p_hat.y() / fx.tcfg.pos_scale,
        ev.packet.p_hat.z() / fx.tcfg.pos_scale, ev.packet.r_hat;
    Eigen::RowVectorXd xi0 = glob * P("tt.w0") + P("tt.b0");
    x.row(f * kp1) = xi0 + P("tt.ety").row(0) + P("tt.es").row(0) + encode_t(ev.q);
    rho(f * kp1) = 1.0;
    for (int k = 0; k < K; ++k) {
      Eigen::RowVectorXd view(dP + 4);
      view << ev.packet.view_tokens[k].transpose(), ev.increments[k].d[0],
          ev.increments[k].d[1], ev.increments[k].d[2], ev.increments[k].d[3];
      Eigen::RowVectorXd xik = view * P("tt.w1") + P("tt.b1");
      const double gate =
          1.0 / (1.0 + std::exp(-(P("tt.gate_a0")(0, 0) +
                                  P("tt.gate_ar")(0, 0) * ev.packet.r_hat +
                                  P("tt.gate_ak")(0, 0) *
                                      ev.increments[k].kappa_delta +
                                  (xik * P("tt.gate_wg"))(0, 0))));
      Eigen::RowVectorXd arm = (fx.geom.geo_arm[k] / rms).transpose();
      Eigen::RowVectorXd hid =
          (arm * P("tt.geo_w1") + P("tt.geo_b1")).cwiseMax(0.0);
      Eigen::RowVectorXd geo = hid * P("tt.geo_w2") + P("tt.geo_b2");
      x.row(f * kp1 + 1 + k) = xik + P("tt.ety").row(1) +
                               P("tt.es").row(1 + k) + geo + encode_t(ev.q);
      rho(f * kp1 + 1 + k) = gate;
    }
  }

  const ad::Mat mask = model.causal_mask(0);
  ad::Mat h = x;
  {
    ad::Mat ln(n, d);
    for (int r = 0; r < n; ++r)
      ln.row(r) = layernorm(h.row(r)).cwiseProduct(P("tt.l0.ln1_g").row(0)) +
                  P("tt.l0.ln1_b").row(0);
    ad::Mat qm = ln * P("tt.l0.wq"), km = ln * P("tt.l0.wk"),
            vm = ln * P("tt.l0.wv");
    ad::Mat mix(n, d);
    for (int hh = 0; hh < heads; ++hh) {
      for (int r = 0; r < n; ++r) {
        Eigen::VectorXd logits(n);
        for (int c = 0; c < n; ++c)
          logits(c) = qm.row(r).segment(hh * dh, dh)
                              .dot(km.row(c).segment(hh * dh, dh)) /
                          std::sqrt(double(dh)) +
                      delta * std::log(rho(c) + eps) + mask(r, c);
        const double mx = logits.maxCoeff();
        Eigen::VectorXd w(n);
        double s = 0.0;
        for (int c = 0; c < n; ++c) {
          w(c) = std::isfinite(logits(c)) ? std::exp(logits(c) - mx) : 0.0;
          s += w(c);
        }
        Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(dh);
        for (int c = 0; c < n; ++c)
          acc += (w(c) / s) * std::pow(rho(c), 1.0 - delta) *
                 vm.row(c).segment(hh * dh, dh);
        mix.row(r).segment(hh * dh, dh) = acc;
      }
    }
    h += mix * P("tt.l0.wo");
    ad::Mat ln2(n, d);
    for (int r = 0; r < n; ++r)
      ln2.row(r) = layernorm(h.row(r)).cwiseProduct(P("tt.l0.ln2_g").row(0)) +
                   P("tt.l0.ln2_b").row(0);
    h += ((ln2 * P("tt.l0.ffn_w1") + P("tt.l0.ffn_b1").replicate(n, 1))
              .cwiseMax(0.0)) *
             P("tt.l0.ffn_w2") +
         P("tt.l0.ffn_b2").replicate(n, 1);
  }
  const Eigen::RowVectorXd summary = h.row((fx.tcfg.window - 1) * kp1);
  Eigen::RowVectorXd fil = summary * P("tt.fil_w") + P("tt.fil_b");
  Eigen::RowVectorXd pre = summary * P("tt.pre_w") + P("tt.pre_b");
  Eigen::RowVectorXd mu_fil = fil.leftCols(6);
  ad::Mat f_norm = ad::Mat::Identity(6, 6);
  f_norm.block(0, 3, 3, 3) = (fx.t0 * fx.tcfg.vel_scale / fx.tcfg.pos_scale) *
                             Eigen::Matrix3d::Identity();
  Eigen::RowVectorXd mu_pre = mu_fil * f_norm.transpose() + pre.leftCols(6);

  CHECK((tape.value(out.summary).row(0) - summary).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((tape.value(out.mu_fil).row(0) - mu_fil).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((tape.value(out.mu_pre).row(0) - mu_pre).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("zero residual head reduces prediction to the kinematic prior") {
  Fixture fx;
  const TtModel model = fx.model();
  ad::ParamStore store;
  Rng rng(10);
  model.init_params(store, rng);
  store.params["tt.pre_w"].setZero();
  store.params["tt.pre_b"].setZero();

  Rng erng(11);
  WindowBuffer buf(fx.tcfg.window);
  TtState st;
  for (int q = 0; q < 3; ++q)
    st = model.step(store, buf, fx.random_evidence(q, erng));
  for (int i = 0; i < 3; ++i) {
    CHECK(st.mu_pre(i) ==
          doctest::Approx(st.mu_fil(i) + fx.t0 * st.mu_fil(i + 3)).epsilon(1e-12));
    CHECK(st.mu_pre(i + 3) == doctest::Approx(st.mu_fil(i + 3)).epsilon(1e-12));
  }
}

TEST_CASE("a token whose gate collapses stops influencing the summary") {
  Fixture fx;
  const TtModel model = fx.model();
  ad::ParamStore store;
  Rng rng(12);
  model.init_params(store, rng);
  store.params["tt.gate_a0"].setConstant(-40.0);
  store.params["tt.gate_ar"].setZero();
  store.params["tt.gate_ak"].setZero();
  store.params["tt.gate_wg"].setZero();

  Rng erng(13);
  std::vector<FrameEvidence> evs{fx.random_evidence(0, erng),
                                 fx.random_evidence(1, erng)};
  WindowBuffer b1(fx.tcfg.window), b2(fx.tcfg.window);
  auto evs2 = evs;
  evs2[0].packet.view_tokens[1].array() += 3.0;  // only a gated view token
  for (const auto& e : evs) b1.push(e);
  for (const auto& e : evs2) b2.push(e);
  ad::Tape t1, t2;
  const ad::Mat s1 = t1.value(model.forward(t1, store, b1).summary);
  const ad::Mat s2 = t2.value(model.forward(t2, store, b2).summary);
  CHECK((s1 - s2).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("offline objective windows agree with online stepping") {
  Fixture fx;
  const TtModel model = fx.model();
  ad::ParamStore store;
  Rng rng(14);
  model.init_params(store, rng);

  const int n = 5;
  Rng erng(15);
  std::vector<FrameEvidence> evidence;
  std::vector<KinematicState> truth;
  Rng trng(16);
  for (int q = 0; q < n; ++q) {
    evidence.push_back(fx.random_evidence(q, erng));
    truth.push_back(random_truth(trng));
  }

  // Reference: per-frame window forwards, NLL recomputed by hand.
  double expect = 0.0;
  WindowBuffer buf(fx.tcfg.window);
  for (int q = 0; q < n; ++q) {
    const TtState st = model.step(store, buf, evidence[q]);
    ad::Tape t;
    const auto out = model.forward(t, store, buf);
    auto nll = [&](const ad::Mat& mu, const ad::Mat& s,
                   const KinematicState& tr) {
      Eigen::RowVectorXd target(6);
      target << tr.p.x() / fx.tcfg.pos_scale, tr.p.y() / fx.tcfg.pos_scale,
          tr.p.z() / fx.tcfg.pos_scale, tr.v.x() / fx.tcfg.vel_scale,
          tr.v.y() / fx.tcfg.vel_scale, tr.v.z() / fx.tcfg.vel_scale;
      double acc = 0.0;
      for (int i = 0; i < 6; ++i) {
        const double dfi = target(i) - mu(0, i);
        acc += dfi * dfi * std::exp(-s(0, i)) + s(0, i);
      }
      return acc;
    };
    expect += nll(t.value(out.mu_fil), t.value(out.s_fil), truth[q]);
    if (q + 1 < n)
      expect += 0.7 * nll(t.value(out.mu_pre), t.value(out.s_pre), truth[q + 1]);
    (void)st;
  }
  expect /= n;

  ad::Tape t;
  const double got =
      t.value(model.loss(t, store, evidence, truth, 0.7, 0.0))(0, 0);
  CHECK(got == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("temporal objective gradients match central differences") {
  Fixture fx;
  const TtModel model = fx.model();

  for (uint64_t seed : {21ULL, 22ULL, 23ULL}) {
    ad::ParamStore store;
    Rng rng(seed);
    model.init_params(store, rng);
    Rng jitter(seed + 7);
    for (auto& [name, m] : store.params)
      for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) m(r, c) += jitter.uniform(0.02, 0.05);

    const int n = 4;
    Rng erng(seed + 1);
    Rng trng(seed + 2);
    std::vector<FrameEvidence> evidence;
    std::vector<KinematicState> truth;
    for (int q = 0; q < n; ++q) {
      evidence.push_back(fx.random_evidence(q, erng));
      truth.push_back(random_truth(trng));
    }

    // The physics weights are gradient-stopped, so finite differences must
    // be taken against the matching frozen-weight loss; the tape gradient of
    // the stop-gradient loss must coincide with it exactly.
    std::vector<Eigen::VectorXd> frozen(n);
    {
      WindowBuffer buf(model.config().window);
      for (int q = 0; q < n; ++q) {
        buf.push(evidence[q]);
        ad::Tape tape;
        const auto out = model.forward(tape, store, buf);
        Eigen::VectorXd g = tape.value(out.gates).col(0);
        frozen[q] = g / g.mean();
      }
    }

    ad::GradMap sg_grads, frozen_grads;
    {
      ad::Tape tape;
      tape.backward(model.loss(tape, store, evidence, truth, 0.5, 0.1, 1));
      tape.param_grads(sg_grads);
    }
    {
      ad::Tape tape;
      tape.backward(
          model.loss(tape, store, evidence, truth, 0.5, 0.1, 1, &frozen));
      tape.param_grads(frozen_grads);
    }
    for (const auto& [name, g] : sg_grads) {
      INFO("seed ", seed, " param ", name);
      CHECK((g - frozen_grads.at(name)).cwiseAbs().maxCoeff() < 1e-12);
    }

    ad::LossFn fn = [&](ad::ParamStore& st, ad::GradMap* grads) {
      ad::Tape tape;
      ad::Var loss = model.loss(tape, st, evidence, truth, 0.5, 0.1, 1, &frozen);
      if (grads) {
        tape.backward(loss);
        tape.param_grads(*grads);
      }
      return tape.value(loss)(0, 0);
    };
    const auto errs = ad::grad_check(fn, store, 1e-5, 3);
    for (const auto& [name, err] : errs) {
      INFO("seed ", seed, " param ", name);
      CHECK(err < 1e-4);
    }
  }
}
