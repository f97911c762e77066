#include "nft/temporal.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace nft {

using ad::Mat;
using ad::Tape;
using ad::Var;

StatePrior make_state_prior(double t0_s, double accel_psd) {
  StatePrior prior;
  prior.t0_s = t0_s;
  prior.accel_psd = accel_psd;
  const Eigen::Matrix3d i3 = Eigen::Matrix3d::Identity();
  prior.f.setIdentity();
  prior.f.block<3, 3>(0, 3) = t0_s * i3;
  const double t2 = t0_s * t0_s;
  prior.q.block<3, 3>(0, 0) = accel_psd * t2 * t2 / 4.0 * i3;
  prior.q.block<3, 3>(0, 3) = accel_psd * t2 * t0_s / 2.0 * i3;
  prior.q.block<3, 3>(3, 0) = accel_psd * t2 * t0_s / 2.0 * i3;
  prior.q.block<3, 3>(3, 3) = accel_psd * t2 * i3;
  return prior;
}

std::vector<IncrementFeatures> initial_increments(int subarrays) {
  std::vector<IncrementFeatures> out(subarrays);
  for (auto& inc : out) {
    inc.dtau_s = 0.0;
    inc.zeta_rel = 0.0;
    inc.kappa_delta = 0.0;
    inc.d = {0.0, 0.0, 0.0, 0.0};
  }
  return out;
}

WindowBuffer::WindowBuffer(int window) : window_(window) {
  if (window < 1) throw std::invalid_argument("WindowBuffer: window < 1");
}

void WindowBuffer::push(const FrameEvidence& ev) {
  if (!buf_.empty() && ev.q <= buf_.back().q)
    throw std::invalid_argument("WindowBuffer: frame indices must increase");
  buf_.push_back(ev);
  while (static_cast<int>(buf_.size()) > window_) buf_.pop_front();
}

namespace {

// Standard sinusoidal positional encoding of the absolute frame index.
Eigen::RowVectorXd temporal_encoding(int q, int d) {
  Eigen::RowVectorXd e(d);
  for (int i = 0; i < d; ++i) {
    const double rate =
        std::pow(10000.0, -static_cast<double>(i / 2 * 2) / d);
    const double x = q * rate;
    e(i) = (i % 2 == 0) ? std::sin(x) : std::cos(x);
  }
  return e;
}

}  // namespace

TtModel::TtModel(const TtConfig& cfg, const PastConfig& past_cfg,
                 const ArrayGeometry& geom, double carrier_hz, double t0_s)
    : cfg_(cfg),
      k_(geom.subarrays()),
      past_d_(past_cfg.d_model),
      carrier_hz_(carrier_hz),
      t0_s_(t0_s),
      subarray_ref_(geom.subarray_ref) {
  if (cfg_.d_model % cfg_.heads != 0)
    throw std::invalid_argument("TtModel: d_model must be divisible by heads");
  if (cfg_.delta_t < 0.0 || cfg_.delta_t > 1.0)
    throw std::invalid_argument("TtModel: delta_t outside [0, 1]");
  const double rms = geom.geo_arm_rms > 0.0 ? geom.geo_arm_rms : 1.0;
  geo_arm_norm_ = Mat(k_, 3);
  for (int k = 0; k < k_; ++k)
    geo_arm_norm_.row(k) = (geom.geo_arm[k] / rms).transpose();
  f_norm_ = Mat::Identity(6, 6);
  // p' = p + T0 v in physical units, expressed on (p/ps, v/vs) coordinates.
  f_norm_.block(0, 3, 3, 3) =
      (t0_s * cfg_.vel_scale / cfg_.pos_scale) * Eigen::Matrix3d::Identity();
}

void TtModel::init_params(ad::ParamStore& store, Rng& rng) const {
  const int d = cfg_.d_model;
  const int in = past_d_ + 4;
  Rng r = rng.split("tt");
  store.add_uniform("tt.w0", in, d, r);
  store.add("tt.b0", 1, d);
  store.add_uniform("tt.w1", in, d, r);
  store.add("tt.b1", 1, d);
  store.add_uniform("tt.ety", 2, d, r);
  store.add_uniform("tt.es", k_ + 1, d, r);
  store.add_uniform("tt.pad", 1, d, r);
  const int h = d / 2;
  store.add_uniform("tt.geo_w1", 3, h, r);
  store.add("tt.geo_b1", 1, h);
  store.add_uniform("tt.geo_w2", h, d, r);
  store.add("tt.geo_b2", 1, d);
  store.add("tt.gate_a0", 1, 1);
  store.add("tt.gate_ar", 1, 1);
  store.add("tt.gate_ak", 1, 1);
  store.add_uniform("tt.gate_wg", d, 1, r);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "tt.l" + std::to_string(l);
    store.add_uniform(p + ".wq", d, d, r);
    store.add_uniform(p + ".wk", d, d, r);
    store.add_uniform(p + ".wv", d, d, r);
    store.add_uniform(p + ".wo", d, d, r);
    store.add_uniform(p + ".ffn_w1", d, 4 * d, r);
    store.add(p + ".ffn_b1", 1, 4 * d);
    store.add_uniform(p + ".ffn_w2", 4 * d, d, r);
    store.add(p + ".ffn_b2", 1, d);
    store.add(p + ".ln1_g", 1, d).setOnes();
    store.add(p + ".ln1_b", 1, d);
    store.add(p + ".ln2_g", 1, d).setOnes();
    store.add(p + ".ln2_b", 1, d);
  }
  store.add_uniform("tt.fil_w", d, 12, r);
  store.add("tt.fil_b", 1, 12);
  store.add_uniform("tt.pre_w", d, 12, r);
  store.add("tt.pre_b", 1, 12);
}

TtModel::FrameVars TtModel::embed_frame(Tape& t, ad::ParamStore& store,
                                        const FrameEvidence& ev) const {
  const int d = cfg_.d_model;
  const EvidencePacket& pk = ev.packet;
  if (static_cast<int>(pk.view_tokens.size()) != k_ ||
      static_cast<int>(ev.increments.size()) != k_)
    throw std::invalid_argument("TtModel: evidence shape mismatch");

  Mat glob(1, past_d_ + 4);
  glob.leftCols(past_d_) = pk.h0.transpose();
  glob(0, past_d_ + 0) = pk.p_hat.x() / cfg_.pos_scale;
  glob(0, past_d_ + 1) = pk.p_hat.y() / cfg_.pos_scale;
  glob(0, past_d_ + 2) = pk.p_hat.z() / cfg_.pos_scale;
  glob(0, past_d_ + 3) = pk.r_hat;

  Mat view(k_, past_d_ + 4);
  Mat kappa(k_, 1);
  for (int k = 0; k < k_; ++k) {
    view.row(k).leftCols(past_d_) = pk.view_tokens[k].transpose();
    for (int c = 0; c < 4; ++c)
      view(k, past_d_ + c) = ev.increments[k].d[c];
    kappa(k, 0) = ev.increments[k].kappa_delta;
  }

  Var xi0 = t.add_rowvec(t.matmul(t.leaf(glob), t.param(store, "tt.w0")),
                         t.param(store, "tt.b0"));
  Var xik = t.add_rowvec(t.matmul(t.leaf(view), t.param(store, "tt.w1")),
                         t.param(store, "tt.b1"));

  const Mat ones_k = Mat::Ones(k_, 1);
  Var lin = t.add(
      t.add(t.matmul(xik, t.param(store, "tt.gate_wg")),
            t.mul_scalar_var(t.leaf(Mat::Constant(k_, 1, pk.r_hat)),
                             t.param(store, "tt.gate_ar"))),
      t.add(t.mul_scalar_var(t.leaf(kappa), t.param(store, "tt.gate_ak")),
            t.mul_scalar_var(t.leaf(ones_k), t.param(store, "tt.gate_a0"))));
  Var gates = t.sigmoid(lin);

  Mat ety_sel = Mat::Zero(k_ + 1, 2);
  ety_sel(0, 0) = 1.0;
  for (int k = 1; k <= k_; ++k) ety_sel(k, 1) = 1.0;
  Var geo = t.add_rowvec(
      t.matmul(t.relu(t.add_rowvec(
                   t.matmul(t.leaf(geo_arm_norm_), t.param(store, "tt.geo_w1")),
                   t.param(store, "tt.geo_b1"))),
               t.param(store, "tt.geo_w2")),
      t.param(store, "tt.geo_b2"));
  Var geo_full = t.vcat({t.leaf(Mat::Zero(1, d)), geo});

  Var tokens = t.add(
      t.add(t.vcat({xi0, xik}),
            t.matmul(t.leaf(ety_sel), t.param(store, "tt.ety"))),
      t.add(t.param(store, "tt.es"), geo_full));
  tokens = t.add_rowvec(tokens, t.leaf(temporal_encoding(ev.q, d)));
  return {tokens, gates};
}

Mat TtModel::causal_mask(int padded_frames) const {
  const int kp1 = k_ + 1;
  const int n = cfg_.window * kp1;
  const double ninf = -std::numeric_limits<double>::infinity();
  Mat m(n, n);
  for (int row = 0; row < n; ++row) {
    const int fq = row / kp1;
    const bool valid_q = fq >= padded_frames;
    for (int col = 0; col < n; ++col) {
      const int fk = col / kp1;
      const bool valid_k = fk >= padded_frames;
      double v = ninf;
      if (valid_k && !valid_q) v = 0.0;
      if (valid_k && valid_q && fk <= fq) v = 0.0;
      m(row, col) = v;
    }
  }
  return m;
}

Var TtModel::encode(Tape& t, ad::ParamStore& store,
                    const std::vector<FrameVars>& window_frames,
                    int padded_frames) const {
  const int d = cfg_.d_model;
  const int dh = d / cfg_.heads;
  const int kp1 = k_ + 1;
  const int n = cfg_.window * kp1;
  if (static_cast<int>(window_frames.size()) + padded_frames != cfg_.window)
    throw std::invalid_argument("TtModel::encode: window size mismatch");

  std::vector<Var> blocks, rho_parts;
  if (padded_frames > 0) {
    Var pad = t.matmul(t.leaf(Mat::Ones(padded_frames * kp1, 1)),
                       t.param(store, "tt.pad"));
    blocks.push_back(pad);
    rho_parts.push_back(t.leaf(Mat::Ones(padded_frames * kp1, 1)));
  }
  for (const auto& fv : window_frames) {
    blocks.push_back(fv.tokens);
    rho_parts.push_back(t.vcat({t.leaf(Mat::Ones(1, 1)), fv.gates}));
  }
  Var h = t.vcat(blocks);
  Var rho = t.vcat(rho_parts);

  const Mat mask = causal_mask(padded_frames);
  const Mat ones_n = Mat::Ones(n, 1);
  Var log_rho = t.log(t.add_scalar(rho, cfg_.eps));
  Var logit_prior = t.transpose(t.scale(log_rho, cfg_.delta_t));  // 1 x n
  // Gates are strictly positive, so the power is safe in log space.
  Var rho_pow = t.exp(t.scale(t.log(rho), 1.0 - cfg_.delta_t));
  Var v_scale = t.matmul(rho_pow, t.leaf(Mat::Ones(1, dh)));

  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "tt.l" + std::to_string(l);
    auto affine_ln = [&](Var x, const std::string& g, const std::string& b) {
      Var scaled = t.mul(t.layernorm_rows(x),
                         t.matmul(t.leaf(ones_n), t.param(store, g)));
      return t.add_rowvec(scaled, t.param(store, b));
    };
    Var x = affine_ln(h, p + ".ln1_g", p + ".ln1_b");
    Var q = t.matmul(x, t.param(store, p + ".wq"));
    Var k = t.matmul(x, t.param(store, p + ".wk"));
    Var v = t.matmul(x, t.param(store, p + ".wv"));
    std::vector<Var> heads_out;
    for (int hh = 0; hh < cfg_.heads; ++hh) {
      Var qh = t.slice_cols(q, hh * dh, dh);
      Var kh = t.slice_cols(k, hh * dh, dh);
      Var vh = t.slice_cols(v, hh * dh, dh);
      Var logits = t.add_rowvec(
          t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(double(dh))),
          logit_prior);
      Var attn = t.softmax_rows(logits, &mask);
      heads_out.push_back(t.matmul(attn, t.mul(vh, v_scale)));
    }
    h = t.add(h, t.matmul(t.hcat(heads_out), t.param(store, p + ".wo")));
    Var y = affine_ln(h, p + ".ln2_g", p + ".ln2_b");
    Var ffn = t.add_rowvec(
        t.matmul(t.relu(t.add_rowvec(t.matmul(y, t.param(store, p + ".ffn_w1")),
                                     t.param(store, p + ".ffn_b1"))),
                 t.param(store, p + ".ffn_w2")),
        t.param(store, p + ".ffn_b2"));
    h = t.add(h, ffn);
  }
  return h;
}

TtModel::Output TtModel::heads(Tape& t, ad::ParamStore& store, Var summary,
                               Var gates) const {
  Var fil = t.add_rowvec(t.matmul(summary, t.param(store, "tt.fil_w")),
                         t.param(store, "tt.fil_b"));
  Var pre = t.add_rowvec(t.matmul(summary, t.param(store, "tt.pre_w")),
                         t.param(store, "tt.pre_b"));
  Output out;
  out.mu_fil = t.slice_cols(fil, 0, 6);
  out.s_fil = t.clamp(t.slice_cols(fil, 6, 6), cfg_.s_min, cfg_.s_max);
  Var dx = t.slice_cols(pre, 0, 6);
  out.s_pre = t.clamp(t.slice_cols(pre, 6, 6), cfg_.s_min, cfg_.s_max);
  out.mu_pre = t.add(t.matmul(out.mu_fil, t.leaf(f_norm_.transpose())), dx);
  out.gates = gates;
  out.summary = summary;
  return out;
}

TtModel::Output TtModel::forward(Tape& t, ad::ParamStore& store,
                                 const WindowBuffer& buffer) const {
  if (buffer.size() == 0)
    throw std::invalid_argument("TtModel::forward: empty buffer");
  const int real = std::min(buffer.size(), cfg_.window);
  std::vector<FrameVars> frames;
  for (int i = buffer.size() - real; i < buffer.size(); ++i)
    frames.push_back(embed_frame(t, store, buffer.at(i)));
  Var h = encode(t, store, frames, cfg_.window - real);
  Var summary = t.slice_rows(h, (cfg_.window - 1) * (k_ + 1), 1);
  return heads(t, store, summary, frames.back().gates);
}

Var TtModel::loss(Tape& t, ad::ParamStore& store,
                  const std::vector<FrameEvidence>& evidence,
                  const std::vector<KinematicState>& truth, double lambda_pre,
                  double lambda_phy, int start,
                  const std::vector<Eigen::VectorXd>* frozen_weights) const {
  const int n = static_cast<int>(evidence.size());
  if (n == 0 || truth.size() != evidence.size() || start < 0 || start >= n)
    throw std::invalid_argument("TtModel::loss: inconsistent rollout");

  const int q_min = std::max(0, start - 1);
  const int lo = std::max(0, q_min - cfg_.window + 1);
  std::vector<FrameVars> frame_vars;
  for (int i = lo; i < n; ++i)
    frame_vars.push_back(embed_frame(t, store, evidence[i]));

  std::vector<Output> outputs(n);
  for (int q = q_min; q < n; ++q) {
    const int first = std::max(lo, q - cfg_.window + 1);
    std::vector<FrameVars> window(frame_vars.begin() + (first - lo),
                                  frame_vars.begin() + (q - lo + 1));
    Var h = encode(t, store, window, cfg_.window - static_cast<int>(window.size()));
    Var summary = t.slice_rows(h, (cfg_.window - 1) * (k_ + 1), 1);
    outputs[q] = heads(t, store, summary, window.back().gates);
  }

  auto norm_state = [&](const KinematicState& st) {
    Mat x(1, 6);
    x << st.p.x() / cfg_.pos_scale, st.p.y() / cfg_.pos_scale,
        st.p.z() / cfg_.pos_scale, st.v.x() / cfg_.vel_scale,
        st.v.y() / cfg_.vel_scale, st.v.z() / cfg_.vel_scale;
    return x;
  };
  auto nll = [&](Var mu, Var s, const Mat& target) {
    Var diff = t.sub(t.leaf(target), mu);
    return t.add(t.sum(t.mul(t.square(diff), t.exp(t.neg(s)))), t.sum(s));
  };
  auto charbonnier = [&](Var x) {
    const double dc = cfg_.charbonnier_delta;
    return t.add_scalar(t.sqrt(t.add_scalar(x, dc * dc)), -dc);
  };
  Mat refs(k_, 3);
  for (int k = 0; k < k_; ++k) refs.row(k) = subarray_ref_[k].transpose();
  const Mat ones_k = Mat::Ones(k_, 1);
  auto ranges = [&](Var p_real) {  // p_real 1x3 -> (tau Kx1, unit dirs Kx3)
    Var diff = t.sub(t.matmul(t.leaf(ones_k), p_real), t.leaf(refs));
    Var dist = t.sqrt(t.sum_cols(t.square(diff)));
    Var u = t.div(diff, t.matmul(dist, t.leaf(Mat::Ones(1, 3))));
    return std::pair<Var, Var>(t.scale(dist, 1.0 / kSpeedOfLight), u);
  };

  std::vector<Var> per_frame;
  for (int q = start; q < n; ++q) {
    const Output& out = outputs[q];
    Var total = nll(out.mu_fil, out.s_fil, norm_state(truth[q]));
    if (q + 1 < n && lambda_pre != 0.0)
      total = t.add(total, t.scale(nll(out.mu_pre, out.s_pre,
                                       norm_state(truth[q + 1])),
                                   lambda_pre));
    if (q >= 1 && lambda_phy != 0.0) {
      Var p_cur = t.scale(t.slice_cols(out.mu_fil, 0, 3), cfg_.pos_scale);
      Var p_prev =
          t.scale(t.slice_cols(outputs[q - 1].mu_fil, 0, 3), cfg_.pos_scale);
      Var v_cur = t.scale(t.slice_cols(out.mu_fil, 3, 3), cfg_.vel_scale);
      auto [tau_cur, u_cur] = ranges(p_cur);
      auto [tau_prev, u_prev] = ranges(p_prev);
      (void)u_prev;

      Mat dtau_hat(k_, 1), zeta_hat(k_, 1);
      for (int k = 0; k < k_; ++k) {
        dtau_hat(k, 0) = evidence[q].increments[k].dtau_s;
        zeta_hat(k, 0) = evidence[q].increments[k].zeta_rel;
      }
      Var r = t.scale(t.sub(t.leaf(dtau_hat), t.sub(tau_cur, tau_prev)),
                      1.0 / cfg_.dtau_max);
      Var delay_pen = charbonnier(t.square(r));

      Var nu = t.scale(t.sum_cols(t.mul(u_cur, t.matmul(t.leaf(ones_k), v_cur))),
                       carrier_hz_ / kSpeedOfLight);
      Var nu_rel = t.sub(nu, t.matmul(t.leaf(ones_k), t.slice_rows(nu, 0, 1)));
      Var mism = t.sub(t.leaf(zeta_hat),
                       t.scale(nu_rel, 2.0 * M_PI * t0_s_));
      Var d_zeta = t.add_scalar(t.neg(t.cos(mism)), 1.0);
      Var doppler_pen = charbonnier(t.scale(d_zeta, 2.0));

      Var w;
      if (frozen_weights) {
        w = t.leaf(frozen_weights->at(q));
      } else {
        Var sg = t.stop_grad(out.gates);
        w = t.mul_scalar_var(sg, t.div(t.constant(1.0), t.mean(sg)));
      }
      Var phys =
          t.add(t.mean(t.mul(w, delay_pen)), t.mean(t.mul(w, doppler_pen)));
      total = t.add(total, t.scale(phys, lambda_phy));
    }
    per_frame.push_back(total);
  }
  return t.mean(t.vcat(per_frame));
}

Eigen::Matrix<double, 6, 1> TtModel::denormalize(
    const Eigen::RowVectorXd& mu) const {
  Eigen::Matrix<double, 6, 1> x;
  for (int i = 0; i < 3; ++i) x(i) = mu(i) * cfg_.pos_scale;
  for (int i = 3; i < 6; ++i) x(i) = mu(i) * cfg_.vel_scale;
  return x;
}

TtState TtModel::step(ad::ParamStore& store, WindowBuffer& buffer,
                      const FrameEvidence& ev) const {
  buffer.push(ev);
  Tape t;
  Output out = forward(t, store, buffer);
  TtState st;
  st.mu_fil = denormalize(t.value(out.mu_fil).row(0));
  st.mu_pre = denormalize(t.value(out.mu_pre).row(0));
  st.s_fil = t.value(out.s_fil).row(0).transpose();
  st.s_pre = t.value(out.s_pre).row(0).transpose();
  return st;
}

}  // namespace nft
