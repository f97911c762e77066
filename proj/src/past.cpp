#include "nft/past.hpp"

#include <cmath>
#include <stdexcept>

namespace nft {

using ad::Mat;
using ad::Tape;
using ad::Var;

namespace {

// Fixed sinusoidal encoding of a normalized geo-arm, width d.
Eigen::RowVectorXd arm_encoding(const Vec3& arm, double scale, int d) {
  Eigen::RowVectorXd e(d);
  for (int i = 0; i < d; ++i) {
    const int comp = (i / 2) % 3;
    const double freq = std::pow(2.0, static_cast<double>(i / 6));
    const double x = freq * arm(comp) / scale;
    e(i) = (i % 2 == 0) ? std::sin(x) : std::cos(x);
  }
  return e;
}

// Pairwise features ordered column-major (row index = i + j*n for the
// (i, j) pair) so a reshape recovers the n x n bias matrix directly.
Mat pair_features(const std::vector<Vec3>& arms, double scale,
                  const std::vector<double>& group_of) {
  const int n = static_cast<int>(arms.size());
  Mat f(n * n, 4);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const Vec3 b = arms[i] - arms[j];
      f.row(i + j * n) << b.x() / scale, b.y() / scale, b.z() / scale,
          group_of[i] - group_of[j];
    }
  return f;
}

}  // namespace

PastModel::PastModel(const PastConfig& cfg, const ArrayGeometry& geom,
                     const CombAllocation& alloc)
    : cfg_(cfg),
      k_(geom.subarrays()),
      g_(cfg.tone_groups),
      spacing_hz_(alloc.spacing_hz),
      subarray_ref_(geom.subarray_ref),
      geo_arm_(geom.geo_arm),
      arm_rms_(geom.geo_arm_rms > 0.0 ? geom.geo_arm_rms : 1.0) {
  if (cfg_.d_model % cfg_.heads != 0)
    throw std::invalid_argument("PastModel: d_model must be divisible by heads");
  if (g_ < 1 || g_ > static_cast<int>(alloc.sets.empty() ? 0 : alloc.sets[0].size()))
    throw std::invalid_argument("PastModel: tone_groups out of range");
  e_b_ = Mat(k_, cfg_.d_model);
  for (int k = 0; k < k_; ++k)
    e_b_.row(k) = arm_encoding(geo_arm_[k], arm_rms_, cfg_.d_model);
  std::vector<double> gidx(g_);
  for (int g = 0; g < g_; ++g) gidx[g] = g;
  intra_pairs_ =
      pair_features(std::vector<Vec3>(g_, Vec3::Zero()), arm_rms_, gidx);
}

void PastModel::init_params(ad::ParamStore& store, Rng& rng) const {
  const int d = cfg_.d_model;
  Rng r = rng.split("past");
  // Input conditioning: fixed-point affine map applied to the raw token
  // descriptors; training seeds it from train-split statistics so the large
  // constant offsets of the log features do not swamp their variation.
  store.add("past.feat_shift", 1, kTokenDim);
  store.add("past.feat_gain", 1, kTokenDim).setOnes();
  store.add_uniform("past.w_emb", kTokenDim, d, r);
  store.add_uniform("past.e_k", k_, d, r);
  store.add_uniform("past.e_gr", g_, d, r);
  store.add_uniform("past.z0", 1, d, r);
  store.add("past.gate_g0", 1, 1);
  store.add("past.gate_g1t", 1, 1);
  store.add("past.gate_g2t", 1, 1);
  store.add("past.delta_t", 1, 1);  // sigmoid(0) = 0.5

  auto add_layer = [&](const std::string& prefix) {
    store.add_uniform(prefix + ".wq", d, d, r);
    store.add_uniform(prefix + ".wk", d, d, r);
    store.add_uniform(prefix + ".wv", d, d, r);
    store.add_uniform(prefix + ".wo", d, d, r);
    store.add_uniform(prefix + ".geo_w1", 4, cfg_.geo_hidden, r);
    store.add(prefix + ".geo_b1", 1, cfg_.geo_hidden);
    store.add_uniform(prefix + ".geo_w2", cfg_.geo_hidden, cfg_.heads, r);
    store.add(prefix + ".geo_b2", 1, cfg_.heads);
    store.add_uniform(prefix + ".ffn_w1", d, 4 * d, r);
    store.add(prefix + ".ffn_b1", 1, 4 * d);
    store.add_uniform(prefix + ".ffn_w2", 4 * d, d, r);
    store.add(prefix + ".ffn_b2", 1, d);
    store.add(prefix + ".ln1_g", 1, d).setOnes();
    store.add(prefix + ".ln1_b", 1, d);
    store.add(prefix + ".ln2_g", 1, d).setOnes();
    store.add(prefix + ".ln2_b", 1, d);
  };
  for (int l = 0; l < cfg_.intra_layers; ++l)
    add_layer("past.intra.l" + std::to_string(l));
  for (int l = 0; l < cfg_.inter_layers; ++l)
    add_layer("past.inter.l" + std::to_string(l));

  store.add_uniform("past.w_pool", d, 1, r);
  store.add_uniform("past.w_p", d, 3, r);
  store.add("past.b_p", 1, 3);
  store.add_uniform("past.w_r", d, 1, r);
  store.add("past.b_r", 1, 1);
}

Var PastModel::gate(Tape& t, ad::ParamStore& store,
                    const FrameFeatures& feats) const {
  const int G = static_cast<int>(feats.groups[0].size());
  const int n = k_ * G;
  Mat kappa(n, 1), log_e(n, 1), log_s(n, 1);
  for (int k = 0; k < k_; ++k)
    for (int g = 0; g < G; ++g) {
      const auto& f = feats.groups[k][g];
      kappa(k * G + g, 0) = f.kappa;
      log_e(k * G + g, 0) = std::log(f.energy + cfg_.eps);
      log_s(k * G + g, 0) = std::log(f.spread_hz2 + cfg_.eps);
    }
  Var g1 = t.softplus(t.param(store, "past.gate_g1t"));
  Var g2 = t.softplus(t.param(store, "past.gate_g2t"));
  Var shift = t.param(store, "past.feat_shift");
  Var fgain = t.param(store, "past.feat_gain");
  const Var ones_n = t.leaf(Mat::Ones(n, 1));
  Var e_n = t.mul_scalar_var(
      t.sub(t.leaf(log_e), t.matmul(ones_n, t.slice_cols(shift, 0, 1))),
      t.slice_cols(fgain, 0, 1));
  Var s_n = t.mul_scalar_var(
      t.sub(t.leaf(log_s), t.matmul(ones_n, t.slice_cols(shift, 1, 1))),
      t.slice_cols(fgain, 1, 1));
  Var lin = t.add(t.add(t.mul_scalar_var(e_n, g1), t.mul_scalar_var(s_n, g2)),
                  t.mul_scalar_var(ones_n, t.param(store, "past.gate_g0")));
  return t.mul(t.leaf(kappa), t.sigmoid(lin));
}

Var PastModel::attention_layer(Tape& t, ad::ParamStore& store,
                               const std::string& prefix, Var tokens, Var conf,
                               const Mat& pair_feats, Var delta) const {
  const int n = static_cast<int>(t.value(tokens).rows());
  const int d = cfg_.d_model;
  const int dh = d / cfg_.heads;
  const Var ones_n = t.leaf(Mat::Ones(n, 1));

  auto affine_ln = [&](Var x, const std::string& g, const std::string& b) {
    Var scaled = t.mul(t.layernorm_rows(x),
                       t.matmul(ones_n, t.param(store, g)));
    return t.add_rowvec(scaled, t.param(store, b));
  };

  // Attention sublayer (pre-norm).
  Var x = affine_ln(tokens, prefix + ".ln1_g", prefix + ".ln1_b");
  Var q = t.matmul(x, t.param(store, prefix + ".wq"));
  Var k = t.matmul(x, t.param(store, prefix + ".wk"));
  Var v = t.matmul(x, t.param(store, prefix + ".wv"));

  Var bias_all = t.add_rowvec(
      t.matmul(t.relu(t.add_rowvec(
                   t.matmul(t.leaf(pair_feats),
                            t.param(store, prefix + ".geo_w1")),
                   t.param(store, prefix + ".geo_b1"))),
               t.param(store, prefix + ".geo_w2")),
      t.param(store, prefix + ".geo_b2"));  // (n*n) x heads

  Var log_c = t.log(t.add_scalar(conf, cfg_.eps));
  Var conf_rows = t.matmul(ones_n, t.transpose(log_c));  // broadcast over rows
  Var gate_bias = t.mul_scalar_var(conf_rows, delta);
  Var one_minus_delta = t.sub(t.constant(1.0), delta);
  Var cpow = t.exp(t.mul_scalar_var(log_c, one_minus_delta));  // c^(1-delta)
  Var v_scale = t.matmul(cpow, t.leaf(Mat::Ones(1, dh)));

  std::vector<Var> heads;
  for (int h = 0; h < cfg_.heads; ++h) {
    Var qh = t.slice_cols(q, h * dh, dh);
    Var kh = t.slice_cols(k, h * dh, dh);
    Var vh = t.slice_cols(v, h * dh, dh);
    Var logits = t.add(
        t.add(t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(double(dh))),
              t.reshape(t.slice_cols(bias_all, h, 1), n, n)),
        gate_bias);
    Var attn = t.softmax_rows(logits);
    heads.push_back(t.matmul(attn, t.mul(vh, v_scale)));
  }
  Var mixed = t.matmul(t.hcat(heads), t.param(store, prefix + ".wo"));
  Var after_attn = t.add(tokens, mixed);

  Var y = affine_ln(after_attn, prefix + ".ln2_g", prefix + ".ln2_b");
  Var ffn = t.add_rowvec(
      t.matmul(t.relu(t.add_rowvec(t.matmul(y, t.param(store, prefix + ".ffn_w1")),
                                   t.param(store, prefix + ".ffn_b1"))),
               t.param(store, prefix + ".ffn_w2")),
      t.param(store, prefix + ".ffn_b2"));
  return t.add(after_attn, ffn);
}

PastModel::Output PastModel::forward(Tape& t, ad::ParamStore& store,
                                     const FrameFeatures& feats,
                                     const std::vector<int>& perm) const {
  if (static_cast<int>(feats.groups.size()) != k_ ||
      static_cast<int>(feats.groups[0].size()) != g_)
    throw std::invalid_argument("PastModel::forward: feature shape mismatch");
  const int G = g_;
  const int n = k_ * G;
  const int d = cfg_.d_model;
  std::vector<int> id(k_);
  for (int k = 0; k < k_; ++k) id[k] = perm.empty() ? k : perm.at(k);

  // Token descriptors and index selectors.
  Mat desc(n, kTokenDim);
  Mat sel_k = Mat::Zero(n, k_);
  Mat sel_g = Mat::Zero(n, G);
  Mat eb_rows(n, d);
  for (int k = 0; k < k_; ++k)
    for (int g = 0; g < G; ++g) {
      const int i = k * G + g;
      for (int c = 0; c < kTokenDim; ++c) desc(i, c) = feats.tokens[k][g][c];
      sel_k(i, id[k]) = 1.0;
      sel_g(i, g) = 1.0;
      eb_rows.row(i) = e_b_.row(id[k]);
    }

  const Var ones_col = t.leaf(Mat::Ones(n, 1));
  Var desc_n = t.mul(
      t.sub(t.leaf(desc), t.matmul(ones_col, t.param(store, "past.feat_shift"))),
      t.matmul(ones_col, t.param(store, "past.feat_gain")));
  Var z = t.add(
      t.add(t.matmul(desc_n, t.param(store, "past.w_emb")),
            t.matmul(t.leaf(sel_k), t.param(store, "past.e_k"))),
      t.add(t.matmul(t.leaf(sel_g), t.param(store, "past.e_gr")),
            t.leaf(eb_rows)));

  Var conf = gate(t, store, feats);
  Var delta = t.sigmoid(t.param(store, "past.delta_t"));

  // Intra stage: shared parameters, per subarray, geo-arm difference zero.
  std::vector<Var> zbar_rows, cbar_rows, pool_rows;
  for (int k = 0; k < k_; ++k) {
    Var zk = t.slice_rows(z, k * G, G);
    Var ck = t.slice_rows(conf, k * G, G);
    for (int l = 0; l < cfg_.intra_layers; ++l)
      zk = attention_layer(t, store, "past.intra.l" + std::to_string(l), zk,
                           ck, intra_pairs_, delta);
    // Reliability-aware pooling over groups.
    Var scores = t.add(t.matmul(zk, t.param(store, "past.w_pool")),
                       t.log(t.add_scalar(ck, cfg_.eps)));
    Var pi = t.transpose(t.softmax_rows(t.transpose(scores)));  // Gx1
    zbar_rows.push_back(t.matmul(t.transpose(pi), zk));
    cbar_rows.push_back(t.matmul(t.transpose(pi), ck));
    pool_rows.push_back(t.transpose(pi));
  }

  std::vector<Var> seq{t.param(store, "past.z0")};
  for (auto& r : zbar_rows) seq.push_back(r);
  Var s = t.vcat(seq);
  std::vector<Var> confs{t.leaf(Mat::Ones(1, 1))};
  for (auto& c : cbar_rows) confs.push_back(c);
  Var sconf = t.vcat(confs);

  std::vector<Vec3> arms(k_ + 1, Vec3::Zero());
  for (int k = 0; k < k_; ++k) arms[k + 1] = geo_arm_[id[k]];
  const Mat inter_pairs =
      pair_features(arms, arm_rms_, std::vector<double>(k_ + 1, 0.0));
  for (int l = 0; l < cfg_.inter_layers; ++l)
    s = attention_layer(t, store, "past.inter.l" + std::to_string(l), s, sconf,
                        inter_pairs, delta);

  Output out;
  out.h0 = t.slice_rows(s, 0, 1);
  out.zbar = t.slice_rows(s, 1, k_);
  out.p_hat = t.scale(t.add_rowvec(t.matmul(out.h0, t.param(store, "past.w_p")),
                                   t.param(store, "past.b_p")),
                      cfg_.pos_scale);
  out.r_hat = t.sigmoid(t.add_rowvec(t.matmul(out.h0, t.param(store, "past.w_r")),
                                     t.param(store, "past.b_r")));
  out.conf = conf;
  out.pool = t.vcat(pool_rows);
  return out;
}

Var PastModel::forward_operator(Tape& t, Var p_hat) const {
  std::vector<Var> rows;
  for (int k = 0; k < k_; ++k) {
    Mat sk(1, 3);
    sk << subarray_ref_[k].x(), subarray_ref_[k].y(), subarray_ref_[k].z();
    Var diff = t.sub(p_hat, t.leaf(sk));
    Var dist2 = t.sum(t.square(diff));
    if (t.value(dist2)(0, 0) < 1e-18)
      throw std::domain_error("forward_operator: position at a subarray reference");
    Var theta = t.scale(t.sqrt(dist2),
                        2.0 * M_PI * spacing_hz_ / kSpeedOfLight);
    // Uniform comb: the groupwise circular mean collapses to a single phasor.
    rows.push_back(t.scale(t.hcat({t.cos(theta), t.sin(theta)}),
                           1.0 / (1.0 + cfg_.eps)));
  }
  return t.vcat(rows);
}

Var PastModel::loss(Tape& t, ad::ParamStore& store,
                    const std::vector<const FrameFeatures*>& batch,
                    const std::vector<Vec3>& truth, double lambda_phy,
                    const std::vector<Eigen::VectorXd>* frozen_weights) const {
  if (batch.empty() || batch.size() != truth.size())
    throw std::invalid_argument("PastModel::loss: inconsistent batch");
  std::vector<Var> losses;
  for (size_t i = 0; i < batch.size(); ++i) {
    const FrameFeatures& feats = *batch[i];
    const int G = static_cast<int>(feats.groups[0].size());
    Output out = forward(t, store, feats);

    Mat pt(1, 3);
    pt << truth[i].x(), truth[i].y(), truth[i].z();
    // Squared error in normalized position units so the learned log variance
    // stays inside its clip range; e^s is a variance in units of pos_scale^2.
    Var err2 = t.scale(t.sum(t.square(t.sub(out.p_hat, t.leaf(pt)))),
                       1.0 / (cfg_.pos_scale * cfg_.pos_scale));
    Var s = t.clamp(
        t.log(t.div(t.add_scalar(t.neg(out.r_hat), 1.0 + cfg_.eps),
                    t.add_scalar(out.r_hat, cfg_.eps))),
        cfg_.s_min, cfg_.s_max);
    Var l_sup = t.add(t.mul(t.exp(t.neg(s)), err2), s);

    Var total = l_sup;
    if (lambda_phy != 0.0) {
      Var qhat = forward_operator(t, out.p_hat);  // Kx2
      Mat qmeas(k_ * G, 2), expand = Mat::Zero(k_ * G, k_);
      for (int k = 0; k < k_; ++k)
        for (int g = 0; g < G; ++g) {
          qmeas(k * G + g, 0) = feats.groups[k][g].q[0];
          qmeas(k * G + g, 1) = feats.groups[k][g].q[1];
          expand(k * G + g, k) = 1.0;
        }
      Var dots = t.sum_cols(t.mul(t.leaf(qmeas), t.matmul(t.leaf(expand), qhat)));
      Var d = t.add_scalar(t.neg(dots), 1.0);
      const double dc = cfg_.charbonnier_delta;
      Var pen = t.add_scalar(t.sqrt(t.add_scalar(d, dc * dc)), -dc);
      Var w;
      if (frozen_weights) {
        w = t.leaf(frozen_weights->at(i));
      } else {
        Var sgc = t.stop_grad(out.conf);
        w = t.mul_scalar_var(sgc, t.div(t.constant(1.0), t.mean(sgc)));
      }
      total = t.add(total, t.scale(t.mean(t.mul(w, pen)), lambda_phy));
    }
    losses.push_back(total);
  }
  Var stacked = t.vcat(losses);
  return t.mean(stacked);
}

EvidencePacket PastModel::evidence(ad::ParamStore& store,
                                   const FrameFeatures& feats,
                                   const std::vector<int>& perm) const {
  Tape t;
  Output out = forward(t, store, feats, perm);
  EvidencePacket e;
  const Mat& p = t.value(out.p_hat);
  e.p_hat = Vec3(p(0, 0), p(0, 1), p(0, 2));
  e.h0 = t.value(out.h0).row(0);
  for (int k = 0; k < k_; ++k)
    e.view_tokens.push_back(t.value(out.zbar).row(k));
  e.r_hat = t.value(out.r_hat)(0, 0);
  const int G = static_cast<int>(feats.groups[0].size());
  e.gates = Eigen::Map<const Mat>(t.value(out.conf).data(), G, k_).transpose();
  e.pool = t.value(out.pool);
  return e;
}

std::vector<int> shuffled_subarray_permutation(int subarrays, Rng& rng) {
  std::vector<int> perm(subarrays);
  for (int i = 0; i < subarrays; ++i) perm[i] = i;
  if (subarrays < 2) return perm;
  bool identity = true;
  while (identity) {
    for (int i = subarrays - 1; i > 0; --i)
      std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
    for (int i = 0; i < subarrays; ++i)
      if (perm[i] != i) {
        identity = false;
        break;
      }
  }
  return perm;
}

}  // namespace nft
