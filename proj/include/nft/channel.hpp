#pragma once

#include <complex>
#include <vector>

#include "nft/geometry.hpp"
#include "nft/rng.hpp"

namespace nft {

using MatXcd = Eigen::MatrixXcd;

struct PropagationPath {
  std::complex<double> gain;            // alpha
  std::vector<double> length;           // D_k per subarray, m
  std::vector<LocalAngles> departure;   // at subarray k
  std::vector<LocalAngles> arrival;     // at the UE, toward subarray k
  bool is_los = false;
};

// Scatterer realization for the simplified stochastic multipath substitute;
// fixed over a trajectory so path geometry evolves consistently with the UE.
struct Scatterer {
  Vec3 position;
  double amplitude_factor;  // Rayleigh factor, E[factor^2] = 1
  double phase;             // radians
};

enum class ChannelModel { Swm, Hspm };

struct ChannelConfig {
  double carrier_hz = 0.0;
  double bandwidth_hz = 0.0;
  int subcarriers = 0;
  double noise_var = 0.0;           // sigma_n^2, set by the probing layer
  double k_factor_db = 13.0;        // LoS/NLoS power ratio
  bool k_factor_infinite = false;   // forces NLoS powers to zero
  int nlos_paths = 2;
  double max_excess_delay_s = 30e-9;
  ChannelModel model = ChannelModel::Swm;
  bool random_cpe = true;  // common phase error redrawn each frame

  double subcarrier_spacing() const { return bandwidth_hz / subcarriers; }
};

// Baseband-centered grid with half-bin offset:
// f_m = f_c - B/2 + (m + 1/2) * df.
double subcarrier_frequency(const ChannelConfig& cfg, int m);

// Hybrid spherical/planar subchannel H_k[m] (N_r x N_s): planar steering
// within panels, spherical range phase between subarrays.
MatXcd hspm_subchannel(const std::vector<PropagationPath>& paths, int m,
                       const ArrayGeometry& geom, int k,
                       const ChannelConfig& cfg);

// Element-wise spherical model for the LoS entry (exact per-element
// distances); NLoS paths keep the HSPM form.  Amplitude uses the
// subarray-reference range so SWM vs HSPM differences are pure phase
// curvature.
MatXcd swm_subchannel(const Vec3& p, const std::vector<PropagationPath>& paths,
                      int m, const ArrayGeometry& geom, int k,
                      const ChannelConfig& cfg);

std::vector<Scatterer> sample_scatterers(const Vec3& p,
                                         const ArrayGeometry& geom,
                                         const ChannelConfig& cfg, Rng& rng);

// LoS + NLoS path list for position p given a fixed scatterer realization.
// los_phase is the frequency-flat phase of the LoS gain.
std::vector<PropagationPath> make_paths(const Vec3& p,
                                        const std::vector<Scatterer>& scatterers,
                                        const ArrayGeometry& geom,
                                        const ChannelConfig& cfg,
                                        double los_phase = 0.0);

std::vector<PropagationPath> sample_paths(const Vec3& p,
                                          const ArrayGeometry& geom,
                                          const ChannelConfig& cfg, Rng& rng);

}  // namespace nft
