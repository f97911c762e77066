#pragma once

#include <deque>
#include <string>
#include <vector>

#include "nft/past.hpp"

namespace nft {

struct TtConfig {
  int d_model = 32;   // divisible by heads
  int layers = 2;
  int heads = 4;
  int window = 16;    // frames per sliding window
  double delta_t = 0.5;       // reliability injection split in [0, 1]
  double lambda_pre = 1.0;
  double lambda_phy = 0.2;    // physics-consistency target weight
  double anneal_frac = 0.15;  // fraction of steps to ramp lambda_phy from 0
  double rho_theta = 0.25;    // angular drift margin
  double rho_tau = 0.25;      // delay drift margin
  double dtau_max = 2.5e-10;  // rho_tau / bandwidth, seconds
  double eps_p = 0.1;         // intra-pilot phase rotation budget, radians
  double eps = kFeatureEps;
  double s_min = -6.0;        // log-variance clip
  double s_max = 6.0;
  double charbonnier_delta = 1e-3;
  double pos_scale = 50.0;    // meters per normalized position unit
  double vel_scale = 25.0;    // m/s per normalized velocity unit
};

// Constant-velocity transition and integrated-acceleration process noise.
struct StatePrior {
  Eigen::Matrix<double, 6, 6> f = Eigen::Matrix<double, 6, 6>::Identity();
  Eigen::Matrix<double, 6, 6> q = Eigen::Matrix<double, 6, 6>::Zero();
  double t0_s = 1e-3;
  double accel_psd = 0.0;
};

StatePrior make_state_prior(double t0_s, double accel_psd);

// Numeric per-frame input to the temporal stage: spatial evidence plus the
// inter-frame drift descriptors.
struct FrameEvidence {
  EvidencePacket packet;
  std::vector<IncrementFeatures> increments;  // K entries
  int q = 0;
};

// All-zero drift descriptors for the first frame of a trajectory.
std::vector<IncrementFeatures> initial_increments(int subarrays);

// Ring of the most recent frames, oldest first; shorter-than-window content
// is padded inside the model.
class WindowBuffer {
 public:
  explicit WindowBuffer(int window);
  void push(const FrameEvidence& ev);  // frame indices must strictly increase
  int size() const { return static_cast<int>(buf_.size()); }
  int window() const { return window_; }
  const FrameEvidence& at(int i) const { return buf_.at(i); }

 private:
  int window_;
  std::deque<FrameEvidence> buf_;
};

// Filtered and one-step-predicted kinematic states in physical units.
struct TtState {
  Eigen::Matrix<double, 6, 1> mu_fil = Eigen::Matrix<double, 6, 1>::Zero();
  Eigen::Matrix<double, 6, 1> s_fil = Eigen::Matrix<double, 6, 1>::Zero();
  Eigen::Matrix<double, 6, 1> mu_pre = Eigen::Matrix<double, 6, 1>::Zero();
  Eigen::Matrix<double, 6, 1> s_pre = Eigen::Matrix<double, 6, 1>::Zero();
};

// Causal temporal transformer: structured frame tokens, validity-aware
// masking, reliability-injected Pre-LN encoder, and dual filtering /
// prediction heads with a drift-consistency regularizer.
class TtModel {
 public:
  TtModel(const TtConfig& cfg, const PastConfig& past_cfg,
          const ArrayGeometry& geom, double carrier_hz, double t0_s);

  void init_params(ad::ParamStore& store, Rng& rng) const;

  struct Output {
    ad::Var mu_fil;   // 1x6, normalized units
    ad::Var s_fil;    // 1x6 clipped log variances
    ad::Var mu_pre;   // 1x6, normalized units
    ad::Var s_pre;    // 1x6
    ad::Var gates;    // Kx1 gates of the newest frame
    ad::Var summary;  // 1xd
  };

  // Window forward over the newest min(size, window) frames of the buffer.
  Output forward(ad::Tape& tape, ad::ParamStore& store,
                 const WindowBuffer& buffer) const;

  // Mean per-frame objective over evidence[start..], with targets aligned to
  // the evidence frames.  Window context reaches back before `start`.
  // The physics weights are gradient-stopped; frozen_weights (one normalized
  // K-vector per evidence frame) substitutes constants with identical
  // gradients, making the loss finite-difference-checkable.
  ad::Var loss(ad::Tape& tape, ad::ParamStore& store,
               const std::vector<FrameEvidence>& evidence,
               const std::vector<KinematicState>& truth, double lambda_pre,
               double lambda_phy, int start = 0,
               const std::vector<Eigen::VectorXd>* frozen_weights =
                   nullptr) const;

  // Online update: pushes the new frame and evaluates the window.
  TtState step(ad::ParamStore& store, WindowBuffer& buffer,
               const FrameEvidence& ev) const;

  // Additive {0, -inf} attention mask for a window with the given number of
  // leading padded frames.
  ad::Mat causal_mask(int padded_frames) const;

  const TtConfig& config() const { return cfg_; }
  int subarrays() const { return k_; }

  Eigen::Matrix<double, 6, 1> denormalize(const Eigen::RowVectorXd& mu) const;

 private:
  struct FrameVars {
    ad::Var tokens;  // (K+1) x d
    ad::Var gates;   // K x 1
  };
  FrameVars embed_frame(ad::Tape& t, ad::ParamStore& store,
                        const FrameEvidence& ev) const;
  ad::Var encode(ad::Tape& t, ad::ParamStore& store,
                 const std::vector<FrameVars>& window_frames,
                 int padded_frames) const;
  Output heads(ad::Tape& t, ad::ParamStore& store, ad::Var summary,
               ad::Var gates) const;

  TtConfig cfg_;
  int k_ = 0;
  int past_d_ = 0;
  double carrier_hz_ = 0.0;
  double t0_s_ = 0.0;
  std::vector<Vec3> subarray_ref_;
  ad::Mat geo_arm_norm_;  // K x 3, geo-arms over their RMS length
  ad::Mat f_norm_;        // 6x6 transition in normalized units
};

}  // namespace nft
