#pragma once

#include <string>
#include <vector>

#include "nft/autodiff.hpp"
#include "nft/tokenizer.hpp"

namespace nft {

struct PastConfig {
  int d_model = 32;       // latent width, divisible by heads
  int intra_layers = 2;
  int inter_layers = 2;
  int heads = 4;
  int geo_hidden = 16;    // hidden width of the pairwise-geometry bias MLP
  int tone_groups = 4;    // G, tone groups per subarray
  double eps = kFeatureEps;
  double s_min = -6.0;
  double s_max = 6.0;
  double lambda_phy = 0.2;     // physics-consistency target weight
  double anneal_frac = 0.15;   // fraction of steps to ramp lambda_phy from 0
  double charbonnier_delta = 1e-3;
  double pos_scale = 50.0;     // head output scaling, meters
};

// Per-frame interface handed to the temporal stage.
struct EvidencePacket {
  Vec3 p_hat = Vec3::Zero();
  Eigen::VectorXd h0;                    // d_model
  std::vector<Eigen::VectorXd> view_tokens;  // K entries, d_model each
  double r_hat = 0.5;
  Eigen::MatrixXd gates;  // K x G confidence diagnostics
  Eigen::MatrixXd pool;   // K x G pooling weights
};

// Spatial encoder: physics tokens -> geometry-biased factorized attention ->
// position/quality heads, plus the closed-form forward operator and the
// training objective.
class PastModel {
 public:
  PastModel(const PastConfig& cfg, const ArrayGeometry& geom,
            const CombAllocation& alloc);

  void init_params(ad::ParamStore& store, Rng& rng) const;

  struct Output {
    ad::Var p_hat;   // 1x3, meters
    ad::Var r_hat;   // 1x1 in (0,1)
    ad::Var h0;      // 1xd
    ad::Var zbar;    // Kxd view tokens
    ad::Var conf;    // (K*G)x1 gates
    ad::Var pool;    // KxG pooling weights
  };

  // Evaluation-time ablation: permutes subarray identity embeddings and
  // geo-arm features (empty = identity).
  Output forward(ad::Tape& tape, ad::ParamStore& store,
                 const FrameFeatures& feats,
                 const std::vector<int>& subarray_perm = {}) const;

  // Wrapped-slope embedding predicted from a candidate position, one row
  // (cos, sin) per subarray; groups share it on a uniform comb.
  ad::Var forward_operator(ad::Tape& tape, ad::Var p_hat) const;

  // Mean over the batch of NLL + lambda * confidence-weighted consistency.
  // The consistency weights are gradient-stopped; passing frozen_weights
  // (one normalized K*G vector per batch item) replaces them with constants,
  // which yields the same gradients and a finite-difference-checkable loss.
  ad::Var loss(ad::Tape& tape, ad::ParamStore& store,
               const std::vector<const FrameFeatures*>& batch,
               const std::vector<Vec3>& truth, double lambda_phy,
               const std::vector<Eigen::VectorXd>* frozen_weights =
                   nullptr) const;

  EvidencePacket evidence(ad::ParamStore& store, const FrameFeatures& feats,
                          const std::vector<int>& subarray_perm = {}) const;

  const PastConfig& config() const { return cfg_; }
  int subarrays() const { return k_; }
  int groups() const { return g_; }

 private:
  ad::Var gate(ad::Tape& tape, ad::ParamStore& store,
               const FrameFeatures& feats) const;
  ad::Var attention_layer(ad::Tape& tape, ad::ParamStore& store,
                          const std::string& prefix, ad::Var tokens,
                          ad::Var conf, const ad::Mat& pair_feats,
                          ad::Var delta) const;

  PastConfig cfg_;
  int k_ = 0;  // subarrays
  int g_ = 0;  // tone groups per subarray
  double spacing_hz_ = 0.0;
  std::vector<Vec3> subarray_ref_;
  std::vector<Vec3> geo_arm_;
  double arm_rms_ = 0.0;
  ad::Mat e_b_;          // K x d fixed sinusoidal geometry encoding
  ad::Mat intra_pairs_;  // (G*G) x 4 pairwise features for the intra stage
};

std::vector<int> shuffled_subarray_permutation(int subarrays, Rng& rng);

}  // namespace nft
