#include "nft/geometry.hpp"

#include <cmath>
#include <stdexcept>

namespace nft {

double ArrayGeometry::bs_aperture() const {
  const double sub_x = (subarrays_x - 1) * subarray_spacing;
  const double sub_z = (subarrays_z - 1) * subarray_spacing;
  double ex = 0.0, ez = 0.0;
  for (const auto& o : bs_offsets) {
    ex = std::max(ex, o[0]);
    ez = std::max(ez, o[1]);
  }
  return std::hypot(sub_x + ex, sub_z + ez);
}

double ArrayGeometry::ue_aperture() const {
  double ex = 0.0, ez = 0.0;
  for (const auto& o : ue_offsets) {
    ex = std::max(ex, o[0]);
    ez = std::max(ez, o[1]);
  }
  return std::hypot(ex, ez);
}

ArrayGeometry ArrayGeometry::make(double wavelength, int subarrays_x,
                                  int subarrays_z,
                                  double subarray_spacing_wavelengths, int ns_x,
                                  int ns_z, int nr_x, int nr_z) {
  if (wavelength <= 0.0 || subarrays_x < 1 || subarrays_z < 1 || ns_x < 1 ||
      ns_z < 1 || nr_x < 1 || nr_z < 1 || subarray_spacing_wavelengths <= 0.0)
    throw std::invalid_argument("ArrayGeometry::make: invalid configuration");

  ArrayGeometry g;
  g.wavelength = wavelength;
  g.element_spacing = wavelength / 2.0;
  g.subarrays_x = subarrays_x;
  g.subarrays_z = subarrays_z;
  g.subarray_spacing = subarray_spacing_wavelengths * wavelength;
  g.ns_x = ns_x;
  g.ns_z = ns_z;
  g.nr_x = nr_x;
  g.nr_z = nr_z;

  // Subarray references centered on the origin, x-fastest ordering.
  const double cx = 0.5 * (subarrays_x - 1);
  const double cz = 0.5 * (subarrays_z - 1);
  for (int kz = 0; kz < subarrays_z; ++kz)
    for (int kx = 0; kx < subarrays_x; ++kx)
      g.subarray_ref.emplace_back((kx - cx) * g.subarray_spacing, 0.0,
                                  (kz - cz) * g.subarray_spacing);
  for (const auto& s : g.subarray_ref) g.geo_arm.push_back(s - g.subarray_ref[0]);

  // Lambda: RMS over all pairwise geo-arm norms, cached once (bias encodings
  // must stay bit-stable).
  const int K = g.subarrays();
  if (K >= 2) {
    double acc = 0.0;
    for (int k = 0; k < K; ++k)
      for (int kp = k + 1; kp < K; ++kp)
        acc += (g.subarray_ref[k] - g.subarray_ref[kp]).squaredNorm();
    g.geo_arm_rms = std::sqrt(2.0 * acc / (static_cast<double>(K) * (K - 1)));
  }

  const double d = g.element_spacing;
  for (int nz = 0; nz < ns_z; ++nz)
    for (int nx = 0; nx < ns_x; ++nx)
      g.bs_offsets.push_back({nx * d, nz * d});
  for (int nz = 0; nz < nr_z; ++nz)
    for (int nx = 0; nx < nr_x; ++nx)
      g.ue_offsets.push_back({nx * d, nz * d});
  return g;
}

double rayleigh_distance(double bs_aperture, double ue_aperture,
                         double wavelength) {
  if (bs_aperture <= 0.0 || ue_aperture <= 0.0 || wavelength <= 0.0)
    throw std::domain_error("rayleigh_distance: non-positive input");
  const double s = bs_aperture + ue_aperture;
  return 2.0 * s * s / wavelength;
}

std::pair<double, Vec3> subarray_range_dir(const ArrayGeometry& geom,
                                           const Vec3& p, int k) {
  const Vec3 diff = p - geom.subarray_ref.at(k);
  const double dist = diff.norm();
  if (dist == 0.0)
    throw std::domain_error("subarray_range_dir: position coincides with subarray reference");
  return {dist, diff / dist};
}

std::pair<double, Vec3> parallax_transfer(double d1, const Vec3& u1,
                                          const Vec3& arm) {
  if (d1 <= 0.0) throw std::domain_error("parallax_transfer: non-positive range");
  const double radicand =
      d1 * d1 + arm.squaredNorm() - 2.0 * d1 * u1.dot(arm);
  if (radicand < 0.0)
    throw std::runtime_error("parallax_transfer: negative radicand (inconsistent geometry)");
  const double dk = std::sqrt(radicand);
  if (dk == 0.0)
    throw std::domain_error("parallax_transfer: degenerate target range");
  return {dk, (d1 * u1 - arm) / dk};
}

LocalAngles local_angles(const ArrayGeometry& geom, const Vec3& p, int k) {
  const auto [dist, u] = subarray_range_dir(geom, p, k);
  return angles_from_direction(u);
}

LocalAngles angles_from_direction(const Vec3& u) {
  const double se = std::clamp(u.z(), -1.0, 1.0);
  const double el = std::asin(se);
  const double ce = std::cos(el);
  if (ce < 1e-12)
    throw std::domain_error("local_angles: position on the zenith axis (cos(el) = 0)");
  return {std::atan2(u.y() / ce, u.x() / ce), el};
}

Vec3 direction_from_angles(const LocalAngles& a) {
  const double ce = std::cos(a.elevation);
  return {std::cos(a.azimuth) * ce, std::sin(a.azimuth) * ce,
          std::sin(a.elevation)};
}

Eigen::VectorXcd steering_vector(const Vec3& u,
                                 std::span<const std::array<double, 2>> offsets,
                                 double wavelength) {
  Eigen::VectorXcd a(static_cast<Eigen::Index>(offsets.size()));
  const double k0 = 2.0 * M_PI / wavelength;
  for (size_t n = 0; n < offsets.size(); ++n) {
    const double phase = k0 * (offsets[n][0] * u.x() + offsets[n][1] * u.z());
    a(static_cast<Eigen::Index>(n)) = std::polar(1.0, phase);
  }
  return a;
}

Eigen::VectorXcd steering_vector(const LocalAngles& a,
                                 std::span<const std::array<double, 2>> offsets,
                                 double wavelength) {
  return steering_vector(direction_from_angles(a), offsets, wavelength);
}

}  // namespace nft
