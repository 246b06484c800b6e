#include "fbn/stats.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fbn {

namespace {

Moments plain_moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= double(v.size());
  for (double x : v) {
    double d = x - m.mean;
    m.variance += d * d;
  }
  m.variance /= double(v.size());
  return m;
}

size_t trim_count(size_t n, double k_percent) {
  if (k_percent < 0 || k_percent >= 50)
    throw std::invalid_argument("robust moments: k_percent must be in [0, 50)");
  return size_t(std::floor(double(n) * k_percent / 100.0));
}

}  // namespace

Moments trimmed_moments(const Tensor& x, double k_percent) {
  std::vector<double> v(x.vec());
  size_t k = trim_count(v.size(), k_percent);
  if (v.size() < 2 * k + 1)
    throw std::invalid_argument("trimmed_moments: trimming leaves no elements");
  if (k == 0) return plain_moments(v);
  std::sort(v.begin(), v.end());
  std::vector<double> kept(v.begin() + k, v.end() - k);
  return plain_moments(kept);
}

Moments winsorized_moments(const Tensor& x, double k_percent) {
  std::vector<double> v(x.vec());
  size_t k = trim_count(v.size(), k_percent);
  if (v.size() < 2 * k + 1)
    throw std::invalid_argument("winsorized_moments: clamping leaves no interior");
  if (k == 0) return plain_moments(v);
  std::sort(v.begin(), v.end());
  double lo = v[k], hi = v[v.size() - 1 - k];
  for (double& e : v) e = std::clamp(e, lo, hi);
  return plain_moments(v);
}

double gaussian_tail_probability(double z) {
  if (z < 0) throw std::invalid_argument("gaussian_tail_probability: z must be >= 0");
  return std::erfc(z / std::sqrt(2.0));
}

double expected_outlier_rate(double z, double elements_per_image) {
  if (elements_per_image <= 0)
    throw std::invalid_argument("expected_outlier_rate: element count must be positive");
  return 1.0 / (elements_per_image * gaussian_tail_probability(z));
}

void ActivationProfiler::observe(const std::string& layer, const Tensor& x_hat) {
  size_t idx = 0;
  for (; idx < order_.size(); ++idx)
    if (order_[idx] == layer) break;
  if (idx == order_.size()) {
    order_.push_back(layer);
    values_.emplace_back();
  }
  auto& v = values_[idx];
  v.insert(v.end(), x_hat.vec().begin(), x_hat.vec().end());
}

std::vector<PercentileBands> ActivationProfiler::finalize() const {
  if (order_.empty()) throw std::invalid_argument("profiler: no hooked layers observed");
  std::vector<PercentileBands> out;
  for (size_t i = 0; i < order_.size(); ++i) {
    std::vector<double> v = values_[i];
    std::sort(v.begin(), v.end());
    PercentileBands b;
    b.layer = order_[i];
    b.samples = v.size();
    auto pct = [&](double p) {
      // nearest-rank on the sorted sample
      double r = p / 100.0 * double(v.size() - 1);
      size_t lo = size_t(r);
      size_t hi = std::min(lo + 1, v.size() - 1);
      double w = r - double(lo);
      return v[lo] * (1.0 - w) + v[hi] * w;
    };
    b.min = v.front();
    b.max = v.back();
    b.p1 = pct(1);
    b.p25 = pct(25);
    b.p50 = pct(50);
    b.p75 = pct(75);
    b.p99 = pct(99);
    for (size_t t = 0; t < PercentileBands::kThresholds.size(); ++t) {
      double thr = PercentileBands::kThresholds[t];
      for (double x : v)
        if (std::abs(x) > thr) ++b.exceedance[t];
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace fbn
