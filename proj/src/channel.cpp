#include "nft/channel.hpp"

#include <cmath>
#include <stdexcept>

namespace nft {

namespace {

// LoS amplitude follows the free-space law per subarray; NLoS gains are
// calibrated against the reference subarray and held constant across k.
double los_amplitude(const ArrayGeometry& geom, double range) {
  return geom.wavelength / (4.0 * M_PI * range);
}

std::complex<double> path_gain_at(const PropagationPath& path, int k) {
  if (!path.is_los) return path.gain;
  return path.gain * (path.length[0] / path.length[k]);
}

}  // namespace

double subcarrier_frequency(const ChannelConfig& cfg, int m) {
  if (m < 0 || m >= cfg.subcarriers)
    throw std::out_of_range("subcarrier_frequency: index out of range");
  return cfg.carrier_hz - 0.5 * cfg.bandwidth_hz +
         (m + 0.5) * cfg.subcarrier_spacing();
}

MatXcd hspm_subchannel(const std::vector<PropagationPath>& paths, int m,
                       const ArrayGeometry& geom, int k,
                       const ChannelConfig& cfg) {
  if (paths.empty()) throw std::invalid_argument("hspm_subchannel: empty path list");
  const double fm = subcarrier_frequency(cfg, m);
  MatXcd h = MatXcd::Zero(geom.ue_elements(), geom.subarray_elements());
  for (const auto& path : paths) {
    const Eigen::VectorXcd ar =
        steering_vector(path.arrival[k], geom.ue_offsets, geom.wavelength);
    const Eigen::VectorXcd at =
        steering_vector(path.departure[k], geom.bs_offsets, geom.wavelength);
    const std::complex<double> range_phase =
        std::polar(1.0, -2.0 * M_PI * fm * path.length[k] / kSpeedOfLight);
    h.noalias() +=
        (path_gain_at(path, k) * range_phase) * (ar * at.transpose());
  }
  return h;
}

MatXcd swm_subchannel(const Vec3& p, const std::vector<PropagationPath>& paths,
                      int m, const ArrayGeometry& geom, int k,
                      const ChannelConfig& cfg) {
  if (paths.empty()) throw std::invalid_argument("swm_subchannel: empty path list");
  const double fm = subcarrier_frequency(cfg, m);
  MatXcd h = MatXcd::Zero(geom.ue_elements(), geom.subarray_elements());
  const Vec3& sk = geom.subarray_ref.at(k);
  for (const auto& path : paths) {
    if (!path.is_los) {
      const Eigen::VectorXcd ar =
          steering_vector(path.arrival[k], geom.ue_offsets, geom.wavelength);
      const Eigen::VectorXcd at =
          steering_vector(path.departure[k], geom.bs_offsets, geom.wavelength);
      const std::complex<double> range_phase =
          std::polar(1.0, -2.0 * M_PI * fm * path.length[k] / kSpeedOfLight);
      h.noalias() += (path.gain * range_phase) * (ar * at.transpose());
      continue;
    }
    const std::complex<double> gain = path_gain_at(path, k);
    for (int nr = 0; nr < geom.ue_elements(); ++nr) {
      const Vec3 rx = p + Vec3(geom.ue_offsets[nr][0], 0.0, geom.ue_offsets[nr][1]);
      for (int ns = 0; ns < geom.subarray_elements(); ++ns) {
        const Vec3 tx =
            sk + Vec3(geom.bs_offsets[ns][0], 0.0, geom.bs_offsets[ns][1]);
        const double dist = (rx - tx).norm();
        if (dist == 0.0)
          throw std::domain_error("swm_subchannel: coincident element positions");
        h(nr, ns) +=
            gain * std::polar(1.0, -2.0 * M_PI * fm * dist / kSpeedOfLight);
      }
    }
  }
  return h;
}

std::vector<Scatterer> sample_scatterers(const Vec3& p,
                                         const ArrayGeometry& geom,
                                         const ChannelConfig& cfg, Rng& rng) {
  std::vector<Scatterer> out;
  if (cfg.k_factor_infinite) return out;
  // Radius bound keeps every excess path length below c * max_excess_delay
  // (excess <= 2 r by the triangle inequality).
  const double r_max = 0.5 * kSpeedOfLight * cfg.max_excess_delay_s;
  for (int i = 0; i < cfg.nlos_paths; ++i) {
    const double az = rng.uniform(0.0, 2.0 * M_PI);
    const double el = std::asin(rng.uniform(-1.0, 1.0));
    const double radius = r_max * rng.uniform(0.2, 1.0);
    const Vec3 offset = radius * direction_from_angles({az, el});
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    out.push_back({p + offset, std::sqrt(-std::log(u)),
                   rng.uniform(0.0, 2.0 * M_PI)});
  }
  return out;
}

std::vector<PropagationPath> make_paths(const Vec3& p,
                                        const std::vector<Scatterer>& scatterers,
                                        const ArrayGeometry& geom,
                                        const ChannelConfig& cfg,
                                        double los_phase) {
  const int K = geom.subarrays();
  std::vector<PropagationPath> paths;

  PropagationPath los;
  los.is_los = true;
  for (int k = 0; k < K; ++k) {
    const auto [dist, u] = subarray_range_dir(geom, p, k);
    los.length.push_back(dist);
    los.departure.push_back(angles_from_direction(u));
    los.arrival.push_back(angles_from_direction(Vec3(-u)));
  }
  los.gain = std::polar(los_amplitude(geom, los.length[0]), los_phase);
  paths.push_back(los);

  const double k_lin = std::pow(10.0, cfg.k_factor_db / 10.0);
  const double nlos_ref =
      scatterers.empty()
          ? 0.0
          : std::abs(los.gain) /
                std::sqrt(k_lin * static_cast<double>(scatterers.size()));
  for (const auto& sc : scatterers) {
    PropagationPath path;
    path.is_los = false;
    path.gain = std::polar(nlos_ref * sc.amplitude_factor, sc.phase);
    const Vec3 to_sc_from_ue = sc.position - p;
    for (int k = 0; k < K; ++k) {
      const Vec3 leg1 = sc.position - geom.subarray_ref[k];
      path.length.push_back(leg1.norm() + to_sc_from_ue.norm());
      path.departure.push_back(angles_from_direction(Vec3(leg1.normalized())));
      path.arrival.push_back(
          angles_from_direction(Vec3(to_sc_from_ue.normalized())));
    }
    paths.push_back(path);
  }
  return paths;
}

std::vector<PropagationPath> sample_paths(const Vec3& p,
                                          const ArrayGeometry& geom,
                                          const ChannelConfig& cfg, Rng& rng) {
  const double los_phase = rng.uniform(0.0, 2.0 * M_PI);
  const auto scatterers = sample_scatterers(p, geom, cfg, rng);
  return make_paths(p, scatterers, geom, cfg, los_phase);
}

}  // namespace nft
