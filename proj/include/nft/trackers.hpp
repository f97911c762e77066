#pragma once

#include "nft/temporal.hpp"

namespace nft {

// Kalman belief over the constant-velocity state [position; velocity].
struct EkfBelief {
  Eigen::Matrix<double, 6, 1> mean = Eigen::Matrix<double, 6, 1>::Zero();
  Eigen::Matrix<double, 6, 6> cov = Eigen::Matrix<double, 6, 6>::Identity();
};

// Predict-only companion of an updated belief.
struct EkfResult {
  EkfBelief belief;                    // post-update
  Eigen::Matrix<double, 6, 1> mu_pre;  // transition applied to the update
  Eigen::Matrix<double, 6, 6> p_pre;
};

// Isotropic position-measurement variance derived from the quality scalar by
// the same logit-to-log-variance mapping the spatial head is trained with;
// e^s is a variance in normalized units, so callers convert to m^2 through
// scale2 = pos_scale^2.
double measurement_variance(double r_hat, double eps = kFeatureEps,
                            double s_min = -6.0, double s_max = 6.0,
                            double scale2 = 1.0);

// Stateless baseline: the current position estimate serves as both the
// filtered and the one-step-predicted state; velocity is zero.
TtState hold_track(const EvidencePacket& packet, double pos_scale2 = 1.0);

// Belief centered on a first measurement with uninformative velocity.
EkfBelief ekf_init(const Vec3& measurement, double meas_var,
                   double vel_var = 1e4);

// One predict/update cycle of the linear Kalman filter with position-only
// observation.  The covariance is symmetrized every step; a non-PSD result
// is repaired by eigenvalue clamping with a warning on stderr.
EkfResult ekf_step(const EkfBelief& belief, const Vec3& measurement,
                   double meas_var, const StatePrior& prior);

// Convenience wrapper producing the shared tracker-state record.
TtState ekf_track(EkfBelief& belief, const EvidencePacket& packet,
                  const StatePrior& prior, double pos_scale2 = 1.0);

}  // namespace nft
