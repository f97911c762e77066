#include <doctest.h>

#include <cmath>

#include "nft/geometry.hpp"
#include "nft/rng.hpp"

using namespace nft;

namespace {

ArrayGeometry paper_scale_geometry() {
  const double wl = kSpeedOfLight / 0.3e12;
  return ArrayGeometry::make(wl, 4, 2, 128.0, 16, 16, 4, 4);
}

Vec3 random_position(Rng& rng) {
  return {rng.uniform(-60.0, 60.0), rng.uniform(30.0, 120.0),
          rng.uniform(-40.0, 40.0)};
}

}  // namespace

TEST_CASE("rayleigh distance closed form") {
  CHECK(rayleigh_distance(0.5, 0.5, 1.0) == doctest::Approx(2.0));

  const double base = rayleigh_distance(1.0, 2.0, 0.01);
  CHECK(rayleigh_distance(2.0, 4.0, 0.01) == doctest::Approx(4.0 * base));

  const double wl = kSpeedOfLight / 0.3e12;
  const double sb = 128.0 * std::sqrt(10.0) * wl;
  const double su = 1.5 * std::sqrt(2.0) * wl;
  CHECK(rayleigh_distance(sb, su, wl) == doctest::Approx(331.0).epsilon(0.005));

  CHECK_THROWS_AS(rayleigh_distance(0.0, 1.0, 1.0), std::domain_error);
}

TEST_CASE("array construction invariants") {
  const auto g = paper_scale_geometry();
  CHECK(g.subarrays() == 8);
  CHECK(g.element_spacing == doctest::Approx(g.wavelength / 2.0));
  for (const auto& s : g.subarray_ref) CHECK(s.y() == 0.0);
  CHECK(g.geo_arm[0].norm() == 0.0);
  CHECK(g.geo_arm_rms > 0.0);

  // RMS of all pairwise arm norms, brute force.
  double acc = 0.0;
  int pairs = 0;
  for (int k = 0; k < g.subarrays(); ++k)
    for (int kp = k + 1; kp < g.subarrays(); ++kp) {
      acc += (g.subarray_ref[k] - g.subarray_ref[kp]).squaredNorm();
      ++pairs;
    }
  CHECK(g.geo_arm_rms == doctest::Approx(std::sqrt(acc / pairs)).epsilon(1e-12));

  const auto two = ArrayGeometry::make(1.0, 2, 1, 3.0, 1, 1, 1, 1);
  CHECK(two.geo_arm_rms == doctest::Approx(3.0));
}

TEST_CASE("range and direction to a subarray") {
  const auto g = paper_scale_geometry();
  const Vec3 s0 = g.subarray_ref[0];

  auto [d, u] = subarray_range_dir(g, s0 + Vec3(3.0, 4.0, 0.0), 0);
  CHECK(d == doctest::Approx(5.0));
  CHECK(u.x() == doctest::Approx(0.6));
  CHECK(u.y() == doctest::Approx(0.8));
  CHECK(u.z() == doctest::Approx(0.0));

  auto [dr, ur] = subarray_range_dir(g, s0 + Vec3(0.0, 7.5, 0.0), 0);
  CHECK(dr == doctest::Approx(7.5));
  CHECK((ur - Vec3(0.0, 1.0, 0.0)).norm() < 1e-12);

  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const Vec3 p = random_position(rng);
    for (int k = 0; k < g.subarrays(); ++k) {
      auto [dk, uk] = subarray_range_dir(g, p, k);
      CHECK(dk == doctest::Approx((p - g.subarray_ref[k]).norm()).epsilon(1e-12));
      CHECK(std::abs(uk.norm() - 1.0) < 1e-12);
    }
  }

  CHECK_THROWS_AS(subarray_range_dir(g, s0, 0), std::domain_error);
}

TEST_CASE("parallax transfer reproduces direct geometry") {
  const auto g = paper_scale_geometry();

  auto [d_same, u_same] = parallax_transfer(42.0, Vec3(0.0, 1.0, 0.0), Vec3::Zero());
  CHECK(d_same == doctest::Approx(42.0));
  CHECK((u_same - Vec3(0.0, 1.0, 0.0)).norm() < 1e-12);

  auto [d_perp, u_perp] =
      parallax_transfer(100.0, Vec3(0.0, 1.0, 0.0), Vec3(10.0, 0.0, 0.0));
  CHECK(d_perp == doctest::Approx(std::sqrt(10100.0)));
  CHECK(std::abs(u_perp.norm() - 1.0) < 1e-12);

  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 p = random_position(rng);
    auto [d1, u1] = subarray_range_dir(g, p, 0);
    for (int k = 0; k < g.subarrays(); ++k) {
      auto [dk, uk] = parallax_transfer(d1, u1, g.geo_arm[k]);
      auto [dd, ud] = subarray_range_dir(g, p, k);
      CHECK(std::abs(dk - dd) / dd < 1e-10);
      CHECK((uk - ud).norm() < 1e-10);
    }
  }

  CHECK_THROWS_AS(parallax_transfer(-1.0, Vec3(0, 1, 0), Vec3::Zero()),
                  std::domain_error);
}

TEST_CASE("local angles and direction round trip") {
  const auto g = paper_scale_geometry();
  const Vec3 s0 = g.subarray_ref[0];

  const auto broadside = local_angles(g, s0 + Vec3(0.0, 50.0, 0.0), 0);
  CHECK(broadside.azimuth == doctest::Approx(M_PI / 2.0));
  CHECK(broadside.elevation == doctest::Approx(0.0));

  CHECK_THROWS_AS(local_angles(g, s0 + Vec3(0.0, 0.0, 50.0), 0),
                  std::domain_error);

  Rng rng(13);
  for (int i = 0; i < 500; ++i) {
    const Vec3 p = random_position(rng);
    for (int k = 0; k < g.subarrays(); ++k) {
      const auto a = local_angles(g, p, k);
      auto [d, u] = subarray_range_dir(g, p, k);
      CHECK((direction_from_angles(a) - u).norm() < 1e-10);
      // Stated angle relations.
      const Vec3 rel = p - g.subarray_ref[k];
      CHECK(std::sin(a.elevation) == doctest::Approx(rel.z() / d).epsilon(1e-10));
      CHECK(std::cos(a.azimuth) ==
            doctest::Approx(rel.x() / (d * std::cos(a.elevation))).epsilon(1e-9));
    }
  }
}

TEST_CASE("steering vector phases") {
  const auto g = paper_scale_geometry();

  // Broadside: zero lattice-axis components, all-ones vector.
  const auto bs = steering_vector(Vec3(0.0, 1.0, 0.0), g.bs_offsets, g.wavelength);
  for (int n = 0; n < bs.size(); ++n)
    CHECK(std::abs(bs(n) - std::complex<double>(1.0, 0.0)) < 1e-12);

  // Two-element half-wavelength array at endfire: second entry is -1.
  const auto line = ArrayGeometry::make(1.0, 1, 1, 1.0, 2, 1, 1, 1);
  const auto ef = steering_vector(Vec3(1.0, 0.0, 0.0), line.bs_offsets, 1.0);
  CHECK(std::abs(ef(0) - std::complex<double>(1.0, 0.0)) < 1e-12);
  CHECK(std::abs(ef(1) - std::complex<double>(-1.0, 0.0)) < 1e-12);

  Rng rng(17);
  for (int i = 0; i < 50; ++i) {
    const Vec3 p = random_position(rng);
    auto [d, u] = subarray_range_dir(g, p, 0);
    const auto a = steering_vector(u, g.bs_offsets, g.wavelength);
    CHECK(std::abs(a(0) - std::complex<double>(1.0, 0.0)) < 1e-12);
    for (int n = 0; n < a.size(); ++n)
      CHECK(std::abs(std::abs(a(n)) - 1.0) < 1e-12);
    // Mirror direction conjugates every phase.
    const auto b = steering_vector(Vec3(-u.x(), u.y(), -u.z()), g.bs_offsets,
                                   g.wavelength);
    for (int n = 0; n < a.size(); ++n)
      CHECK(std::abs(b(n) - std::conj(a(n))) < 1e-12);
  }
}
