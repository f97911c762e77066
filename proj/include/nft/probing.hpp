#pragma once

#include <vector>

#include "nft/channel.hpp"
#include "nft/geometry.hpp"
#include "nft/rng.hpp"

namespace nft {

// Comb-type pilot allocation: subarray k owns tones {k, k+K, k+2K, ...},
// so its effective tone spacing is K*df and the unambiguous delay window
// is 1/(K*df).
struct CombAllocation {
  int tones = 0;      // M
  int subarrays = 0;  // K
  double spacing_hz = 0.0;    // K * df
  double ambiguity_s = 0.0;   // 1 / (K * df)
  std::vector<std::vector<int>> sets;  // M_k, each sorted ascending
};

struct PilotFrame {
  int q = 0;
  std::vector<Eigen::VectorXcd> y;  // per subarray, |M_k| tones each
  bool bad = false;                 // ground truth only; never model-facing
  double snr_db = 0.0;
};

struct KinematicState {
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
};

// Running phase state of one trajectory: accumulated Doppler phase per
// subarray plus the common phase error drawn for the current frame.
struct DopplerLedger {
  std::vector<double> theta;  // radians, theta_k(0) = 0
  double cpe = 0.0;           // radians
  double t0_s = 1e-3;         // frame period
  int q = 0;                  // next frame index
};

// Per-subarray analog beams and matched UE combiners for one probing frame.
struct ProbingSetup {
  std::vector<Eigen::VectorXcd> beams;      // N_s each, |f|_n = 1/sqrt(N_s)
  std::vector<Eigen::VectorXcd> combiners;  // N_r each, unit norm
};

struct TrajectoryConfig {
  int frames = 64;
  double t0_s = 1e-3;
  double accel_psd = 4.0;  // q_a
  double snr_db = 15.0;
  double bad_prob = 0.0;
  double range_min = 35.0;
  double range_max = 120.0;
  double speed_min = 10.0;
  double speed_max = 30.0;
};

struct TrajectoryStep {
  KinematicState state;
  PilotFrame frame;
};

CombAllocation comb_allocate(int tones, int subarrays, double df_hz);

// Far-field DFT codebook over the subarray lattice; columns have per-element
// modulus 1/sqrt(N_s).
MatXcd make_dft_codebook(const ArrayGeometry& geom);

// Index of the codeword maximizing |a(u)^H f|; ties go to the lower index.
int select_beam(const Vec3& u_pred, const MatXcd& codebook,
                const ArrayGeometry& geom);

// Beams toward the predicted position per subarray and UE combiners matched
// to the corresponding arrival directions.
ProbingSetup make_probing_setup(const Vec3& p_pred, const MatXcd& codebook,
                                const ArrayGeometry& geom);

DopplerLedger make_ledger(int subarrays);

// One pilot frame: y_k[m] = w_k^H H_k[m] f_k * e^{j(cpe - theta_k)} + n.
// Noise power is calibrated so the LoS-only per-tone power averaged over all
// tones divided by sigma_n^2 equals the requested SNR.  If bad, the signal
// (not the noise) is attenuated by 20 dB.  Advances the ledger by one frame
// using the frame-start velocity.
PilotFrame observe_frame(const KinematicState& state,
                         const std::vector<PropagationPath>& paths,
                         const ProbingSetup& setup, const CombAllocation& alloc,
                         DopplerLedger& ledger, const ArrayGeometry& geom,
                         const ChannelConfig& cfg, double snr_db, bool bad,
                         Rng& rng);

PilotFrame inject_bad_frame(const PilotFrame& frame);

// Constant-velocity step with integrated-acceleration process noise of
// spectral density q_a (exact sampling, per axis).
KinematicState propagate_state(const KinematicState& state, double t0_s,
                               double accel_psd, Rng& rng);

// Open-loop trajectory: beams are steered from the true position each frame.
std::vector<TrajectoryStep> sample_trajectory(const TrajectoryConfig& tcfg,
                                              const ArrayGeometry& geom,
                                              const ChannelConfig& cfg,
                                              const MatXcd& codebook, Rng& rng);

}  // namespace nft
