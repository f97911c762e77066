#include "nft/trackers.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include <Eigen/Eigenvalues>

namespace nft {

namespace {

using Mat6 = Eigen::Matrix<double, 6, 6>;
using Vec6 = Eigen::Matrix<double, 6, 1>;

Mat6 symmetrize(const Mat6& m) { return 0.5 * (m + m.transpose()); }

// Clamps negative eigenvalues to zero if symmetrization alone left the
// matrix indefinite.
Mat6 repair_psd(const Mat6& m) {
  Eigen::SelfAdjointEigenSolver<Mat6> es(m);
  if (es.eigenvalues().minCoeff() >= 0.0) return m;
  std::cerr << "warning: tracker covariance lost positive semidefiniteness "
               "(min eigenvalue "
            << es.eigenvalues().minCoeff() << "); repaired by clamping\n";
  Vec6 ev = es.eigenvalues().cwiseMax(0.0);
  return symmetrize(es.eigenvectors() * ev.asDiagonal() *
                    es.eigenvectors().transpose());
}

}  // namespace

double measurement_variance(double r_hat, double eps, double s_min,
                            double s_max, double scale2) {
  const double s = std::clamp(
      std::log((1.0 - r_hat + eps) / (r_hat + eps)), s_min, s_max);
  return scale2 * std::exp(s);
}

TtState hold_track(const EvidencePacket& packet, double pos_scale2) {
  TtState st;
  st.mu_fil.head<3>() = packet.p_hat;
  st.mu_pre.head<3>() = packet.p_hat;
  const double log_var = std::log(
      measurement_variance(packet.r_hat, kFeatureEps, -6.0, 6.0, pos_scale2));
  st.s_fil.head<3>().setConstant(log_var);
  st.s_pre.head<3>().setConstant(log_var);
  return st;
}

EkfBelief ekf_init(const Vec3& measurement, double meas_var, double vel_var) {
  EkfBelief b;
  b.mean.head<3>() = measurement;
  b.cov.setZero();
  b.cov.topLeftCorner<3, 3>() = meas_var * Eigen::Matrix3d::Identity();
  b.cov.bottomRightCorner<3, 3>() = vel_var * Eigen::Matrix3d::Identity();
  return b;
}

EkfResult ekf_step(const EkfBelief& belief, const Vec3& measurement,
                   double meas_var, const StatePrior& prior) {
  const Mat6& f = prior.f;
  const Vec6 mu_minus = f * belief.mean;
  const Mat6 p_minus = symmetrize(f * belief.cov * f.transpose() + prior.q);

  // Position-only observation: H = [I3 0].
  const Eigen::Matrix3d r = meas_var * Eigen::Matrix3d::Identity();
  const Eigen::Matrix3d s = p_minus.topLeftCorner<3, 3>() + r;
  const Eigen::Matrix<double, 6, 3> k =
      p_minus.leftCols<3>() * s.inverse();

  EkfResult out;
  out.belief.mean = mu_minus + k * (measurement - mu_minus.head<3>());
  // Joseph form keeps the update PSD under roundoff.
  Mat6 i_kh = Mat6::Identity();
  i_kh.leftCols<3>() -= k;
  out.belief.cov = repair_psd(symmetrize(
      i_kh * p_minus * i_kh.transpose() + k * r * k.transpose()));

  out.mu_pre = f * out.belief.mean;
  out.p_pre =
      repair_psd(symmetrize(f * out.belief.cov * f.transpose() + prior.q));
  return out;
}

TtState ekf_track(EkfBelief& belief, const EvidencePacket& packet,
                  const StatePrior& prior, double pos_scale2) {
  const double var =
      measurement_variance(packet.r_hat, kFeatureEps, -6.0, 6.0, pos_scale2);
  const EkfResult res = ekf_step(belief, packet.p_hat, var, prior);
  belief = res.belief;
  TtState st;
  st.mu_fil = res.belief.mean;
  st.mu_pre = res.mu_pre;
  st.s_fil = res.belief.cov.diagonal().cwiseMax(1e-300).array().log();
  st.s_pre = res.p_pre.diagonal().cwiseMax(1e-300).array().log();
  return st;
}

}  // namespace nft
