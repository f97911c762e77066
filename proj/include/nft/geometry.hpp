#pragma once

#include <Eigen/Dense>
#include <array>
#include <complex>
#include <span>
#include <utility>
#include <vector>

namespace nft {

using Vec3 = Eigen::Vector3d;

inline constexpr double kSpeedOfLight = 299792458.0;  // m/s

// Azimuth measured from the +x axis in the x-y plane, elevation from the x-y
// plane toward +z.  Direction reconstruction:
//   u = (cos(az) cos(el), sin(az) cos(el), sin(el)).
struct LocalAngles {
  double azimuth;    // radians
  double elevation;  // radians, in [-pi/2, pi/2]
};

// BS subarrays and the UE panel both lie on x-z planes (UE panel parallel to
// the BS array, facing it across the y axis).  The phase reference of every
// panel is its corner element at lattice offset (0, 0).
struct ArrayGeometry {
  double wavelength = 0.0;       // m
  double element_spacing = 0.0;  // d = wavelength / 2
  int subarrays_x = 0;
  int subarrays_z = 0;
  double subarray_spacing = 0.0;  // m, between adjacent subarray references
  int ns_x = 0, ns_z = 0;  // subarray lattice dims
  int nr_x = 0, nr_z = 0;  // UE lattice dims

  std::vector<Vec3> subarray_ref;                   // s_k, y = 0, length K
  std::vector<Vec3> geo_arm;                        // b_{k,1} = s_k - s_1
  double geo_arm_rms = 0.0;                         // Lambda, cached
  std::vector<std::array<double, 2>> bs_offsets;    // (d_nx, d_nz) per element
  std::vector<std::array<double, 2>> ue_offsets;

  int subarrays() const { return subarrays_x * subarrays_z; }
  int subarray_elements() const { return static_cast<int>(bs_offsets.size()); }
  int ue_elements() const { return static_cast<int>(ue_offsets.size()); }

  // Aperture across the full widely-spaced layout (diagonal extent).
  double bs_aperture() const;
  double ue_aperture() const;

  static ArrayGeometry make(double wavelength, int subarrays_x, int subarrays_z,
                            double subarray_spacing_wavelengths, int ns_x,
                            int ns_z, int nr_x, int nr_z);
};

double rayleigh_distance(double bs_aperture, double ue_aperture,
                         double wavelength);

// Range and unit direction from subarray k's reference to p.
std::pair<double, Vec3> subarray_range_dir(const ArrayGeometry& geom,
                                           const Vec3& p, int k);

// Transfers the reference subarray's (D_1, u_1) to subarray k through the
// geo-arm, without touching p itself.
std::pair<double, Vec3> parallax_transfer(double d1, const Vec3& u1,
                                          const Vec3& arm);

LocalAngles local_angles(const ArrayGeometry& geom, const Vec3& p, int k);
Vec3 direction_from_angles(const LocalAngles& a);
LocalAngles angles_from_direction(const Vec3& u);

// UPA steering vector over the given lattice offsets; entry n has phase
// (2*pi/wavelength) * (d_nx * u_x + d_nz * u_z) for unit direction u, so the
// reference element (0,0) is exactly 1.
Eigen::VectorXcd steering_vector(const Vec3& u,
                                 std::span<const std::array<double, 2>> offsets,
                                 double wavelength);
Eigen::VectorXcd steering_vector(const LocalAngles& a,
                                 std::span<const std::array<double, 2>> offsets,
                                 double wavelength);

}  // namespace nft
