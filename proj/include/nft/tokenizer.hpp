#pragma once

#include <array>
#include <utility>
#include <vector>

#include "nft/probing.hpp"

namespace nft {

inline constexpr double kFeatureEps = 1e-12;

// Per (subarray, tone-group) statistics of one pilot frame.
struct GroupFeatures {
  double energy = 0.0;       // E, watts
  double centroid_hz = 0.0;  // power-weighted mean tone frequency
  double spread_hz2 = 0.0;   // power-weighted frequency variance
  double kappa = 0.0;        // circular consistency of adjacent-tone products
  std::array<double, 2> q{1.0, 0.0};  // (cos phi, sin phi)
  double phi = 0.0;          // wrapped slope, radians
};

// t = [log(E+eps), log(sigma^2+eps), q_x, q_y, kappa]
using TokenDescriptor = std::array<double, 5>;
inline constexpr int kTokenDim = 5;

struct IncrementFeatures {
  double dtau_s = 0.0;       // inter-frame delay drift estimate
  double zeta_rel = 0.0;     // offset relative to subarray 1, radians
  double kappa_delta = 1.0;  // residual-consistency score
  std::array<double, 4> d{0.0, 1.0, 0.0, 1.0};
};

struct FrameFeatures {
  std::vector<std::vector<GroupFeatures>> groups;     // [K][G]
  std::vector<std::vector<TokenDescriptor>> tokens;   // [K][G]
};

// Contiguous index ranges [begin, end) covering 0..count-1; sizes differ by
// at most one, with the remainder going to the earliest groups.
std::vector<std::pair<int, int>> partition_groups(int count, int groups);

// (E, fbar, sigma^2) with weights proportional to |y_i|^2 + eps.
std::array<double, 3> group_stats(const Eigen::VectorXcd& y,
                                  const std::vector<double>& freqs, int begin,
                                  int end, double eps = kFeatureEps);

// Magnitude-weighted circular mean of adjacent-tone products over
// [begin, end).  Fewer than two tones or an all-zero slice yields the
// (kappa = 0, phi = 0, q = (1, 0)) convention.
GroupFeatures circular_slope(const Eigen::VectorXcd& y, int begin, int end,
                             double eps = kFeatureEps);

TokenDescriptor build_descriptor(const GroupFeatures& f,
                                 double eps = kFeatureEps);

// Fits dphi_i ~ 2 pi f_i dtau - zeta on the unit circle by maximizing
// |sum_i w_i e^{j(dphi_i - 2 pi f_i dtau)}| over [-dtau_max, dtau_max]
// (coarse scan + golden-section refinement); zeta is closed-form given dtau.
// Returns (dtau, zeta, |A|) where |A| is the residual-consistency score.
std::array<double, 3> circular_ls_fit(const std::vector<double>& dphi,
                                      const std::vector<double>& freqs,
                                      const std::vector<double>& weights,
                                      double dtau_max);

// Per-subarray increment descriptors between consecutive frames.
// Phase increments use conj(y(q)) * y(q-1); weights follow the product
// magnitudes.  Entry d = [c/T0 * dtau, cos zeta_rel, sin zeta_rel, kappa].
std::vector<IncrementFeatures> increment_features(
    const PilotFrame& cur, const PilotFrame& prev, const CombAllocation& alloc,
    const ChannelConfig& cfg, double t0_s, double dtau_max,
    double eps = kFeatureEps);

FrameFeatures tokenize_frame(const PilotFrame& frame,
                             const CombAllocation& alloc,
                             const ChannelConfig& cfg, int groups,
                             double eps = kFeatureEps);

}  // namespace nft
