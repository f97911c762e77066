#include "nft/tokenizer.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>

namespace nft {

std::vector<std::pair<int, int>> partition_groups(int count, int groups) {
  if (groups < 1 || groups > count)
    throw std::invalid_argument("partition_groups: need 1 <= G <= tone count");
  std::vector<std::pair<int, int>> out;
  const int base = count / groups;
  const int extra = count % groups;
  int begin = 0;
  for (int g = 0; g < groups; ++g) {
    const int size = base + (g < extra ? 1 : 0);
    out.emplace_back(begin, begin + size);
    begin += size;
  }
  return out;
}

std::array<double, 3> group_stats(const Eigen::VectorXcd& y,
                                  const std::vector<double>& freqs, int begin,
                                  int end, double eps) {
  if (begin >= end) throw std::invalid_argument("group_stats: empty group");
  double energy = 0.0, wsum = 0.0, fbar = 0.0;
  for (int i = begin; i < end; ++i) {
    const double p = std::norm(y(i));
    energy += p;
    wsum += p + eps;
    fbar += (p + eps) * freqs[i];
  }
  fbar /= wsum;
  double var = 0.0;
  for (int i = begin; i < end; ++i)
    var += (std::norm(y(i)) + eps) / wsum * (freqs[i] - fbar) * (freqs[i] - fbar);
  return {energy, fbar, var};
}

GroupFeatures circular_slope(const Eigen::VectorXcd& y, int begin, int end,
                             double eps) {
  GroupFeatures f;
  std::complex<double> acc = 0.0;
  double mag_sum = 0.0;
  for (int i = begin; i + 1 < end; ++i) {
    const std::complex<double> r = y(i + 1) * std::conj(y(i));
    acc += r;  // |r| * (r/|r|)
    mag_sum += std::abs(r);
  }
  if (mag_sum == 0.0) return f;  // kappa = 0, q = (1, 0) convention
  const std::complex<double> ubar = acc / mag_sum;
  f.kappa = std::abs(ubar);
  f.phi = -std::arg(ubar);
  const double scale = 1.0 / (std::abs(ubar) + eps);
  f.q = {scale * ubar.real(), -scale * ubar.imag()};
  return f;
}

TokenDescriptor build_descriptor(const GroupFeatures& f, double eps) {
  return {std::log(f.energy + eps), std::log(f.spread_hz2 + eps), f.q[0],
          f.q[1], f.kappa};
}

namespace {

double abs_aligned_mean(const std::vector<double>& dphi,
                        const std::vector<double>& freqs,
                        const std::vector<double>& weights, double dtau) {
  std::complex<double> a = 0.0;
  for (size_t i = 0; i < dphi.size(); ++i)
    a += weights[i] * std::polar(1.0, dphi[i] - 2.0 * M_PI * freqs[i] * dtau);
  return std::abs(a);
}

}  // namespace

std::array<double, 3> circular_ls_fit(const std::vector<double>& dphi,
                                      const std::vector<double>& freqs,
                                      const std::vector<double>& weights,
                                      double dtau_max) {
  if (dphi.empty() || dphi.size() != freqs.size() ||
      dphi.size() != weights.size())
    throw std::invalid_argument("circular_ls_fit: inconsistent inputs");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (wsum <= 0.0)
    throw std::invalid_argument("circular_ls_fit: degenerate weights");

  // Coarse scan dense enough to land inside the main correlation lobe
  // (lobe width ~ 1 / frequency span), then golden-section refinement.
  const int coarse = 1024;
  double best = 0.0, best_val = -1.0;
  for (int i = 0; i <= coarse; ++i) {
    const double dtau = -dtau_max + 2.0 * dtau_max * i / coarse;
    const double val = abs_aligned_mean(dphi, freqs, weights, dtau);
    if (val > best_val) {
      best_val = val;
      best = dtau;
    }
  }
  const double step = 2.0 * dtau_max / coarse;
  double lo = std::max(-dtau_max, best - step);
  double hi = std::min(dtau_max, best + step);
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = hi - gr * (hi - lo);
  double x2 = lo + gr * (hi - lo);
  double f1 = abs_aligned_mean(dphi, freqs, weights, x1);
  double f2 = abs_aligned_mean(dphi, freqs, weights, x2);
  for (int it = 0; it < 120 && hi - lo > 0.0; ++it) {
    if (f1 < f2) {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + gr * (hi - lo);
      f2 = abs_aligned_mean(dphi, freqs, weights, x2);
    } else {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - gr * (hi - lo);
      f1 = abs_aligned_mean(dphi, freqs, weights, x1);
    }
  }
  const double dtau = 0.5 * (lo + hi);
  std::complex<double> a = 0.0;
  for (size_t i = 0; i < dphi.size(); ++i)
    a += (weights[i] / wsum) *
         std::polar(1.0, dphi[i] - 2.0 * M_PI * freqs[i] * dtau);
  return {dtau, -std::arg(a), std::abs(a)};
}

std::vector<IncrementFeatures> increment_features(
    const PilotFrame& cur, const PilotFrame& prev, const CombAllocation& alloc,
    const ChannelConfig& cfg, double t0_s, double dtau_max, double eps) {
  const int K = alloc.subarrays;
  std::vector<IncrementFeatures> out(K);
  std::vector<double> zeta(K, 0.0);
  for (int k = 0; k < K; ++k) {
    const auto& tones = alloc.sets[k];
    std::vector<double> dphi(tones.size()), freqs(tones.size()),
        weights(tones.size());
    double wsum = 0.0;
    for (size_t i = 0; i < tones.size(); ++i) {
      const std::complex<double> prod =
          std::conj(cur.y[k](static_cast<Eigen::Index>(i))) *
          prev.y[k](static_cast<Eigen::Index>(i));
      dphi[i] = std::arg(prod);
      freqs[i] = subcarrier_frequency(cfg, tones[i]);
      weights[i] = std::abs(prod) + eps;
      wsum += weights[i];
    }
    for (auto& w : weights) w /= wsum;
    const auto [dtau, z, kd] = circular_ls_fit(dphi, freqs, weights, dtau_max);
    out[k].dtau_s = dtau;
    out[k].kappa_delta = kd;
    zeta[k] = z;
  }
  for (int k = 0; k < K; ++k) {
    double rel = zeta[k] - zeta[0];
    rel = std::remainder(rel, 2.0 * M_PI);
    out[k].zeta_rel = (k == 0) ? 0.0 : rel;
    out[k].d = {kSpeedOfLight / t0_s * out[k].dtau_s, std::cos(out[k].zeta_rel),
                std::sin(out[k].zeta_rel), out[k].kappa_delta};
  }
  return out;
}

FrameFeatures tokenize_frame(const PilotFrame& frame,
                             const CombAllocation& alloc,
                             const ChannelConfig& cfg, int groups, double eps) {
  FrameFeatures out;
  const int K = alloc.subarrays;
  out.groups.resize(K);
  out.tokens.resize(K);
  for (int k = 0; k < K; ++k) {
    const auto& tones = alloc.sets[k];
    std::vector<double> freqs(tones.size());
    for (size_t i = 0; i < tones.size(); ++i)
      freqs[i] = subcarrier_frequency(cfg, tones[i]);
    for (const auto& [begin, end] :
         partition_groups(static_cast<int>(tones.size()), groups)) {
      GroupFeatures f = circular_slope(frame.y[k], begin, end, eps);
      const auto [e, fbar, var] = group_stats(frame.y[k], freqs, begin, end, eps);
      f.energy = e;
      f.centroid_hz = fbar;
      f.spread_hz2 = var;
      out.groups[k].push_back(f);
      out.tokens[k].push_back(build_descriptor(f, eps));
    }
  }
  return out;
}

}  // namespace nft
