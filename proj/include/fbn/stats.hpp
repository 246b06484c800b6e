#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "fbn/tensor.hpp"

namespace fbn {

struct Moments {
  double mean = 0.0;
  double variance = 0.0;  // biased
};

// Symmetric k-percent trimming: sort, drop the k% smallest and k% largest,
// then plain moments. O(n log n) by construction.
Moments trimmed_moments(const Tensor& x, double k_percent);

// Clamp the top/bottom k% to the boundary order statistics, then plain moments.
Moments winsorized_moments(const Tensor& x, double k_percent);

// P(|N(0,1)| > z) via the complementary error function.
double gaussian_tail_probability(double z);

// Expected number of input images between exceedances of the z-sigma band
// for a layer with `elements_per_image` activations.
double expected_outlier_rate(double z, double elements_per_image);

// Percentile bands of normalized activations for one hooked layer, plus
// sigma-band exceedance counts.
struct PercentileBands {
  std::string layer;
  size_t samples = 0;
  double min = 0, p1 = 0, p25 = 0, p50 = 0, p75 = 0, p99 = 0, max = 0;
  static constexpr std::array<double, 4> kThresholds{2.0, 4.0, 7.0, 14.0};
  std::array<size_t, 4> exceedance{0, 0, 0, 0};  // count of |v| > threshold
};

// Accumulates pre-affine normalized activations per layer. Exact
// percentiles (all values are kept and sorted at finalize); accumulation
// order does not affect results.
class ActivationProfiler {
 public:
  // Returns the hook to install as NormLayer::on_normalized.
  void observe(const std::string& layer, const Tensor& x_hat);
  std::vector<PercentileBands> finalize() const;

 private:
  std::vector<std::string> order_;
  std::vector<std::vector<double>> values_;
};

}  // namespace fbn
