#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fbn/tensor.hpp"

namespace fbn {

struct Dataset {
  Tensor images;            // [N, C, H, W], scaled to [0,1]
  std::vector<int> labels;  // in [0, num_classes)
  std::string split;
  int num_classes = 10;

  size_t size() const { return labels.size(); }
};

// IDX format: big-endian magic 0x00000803 (images) / 0x00000801 (labels).
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);
void save_mnist_idx(const Dataset& ds, const std::string& images_path,
                    const std::string& labels_path);

// Thrown with the offending byte offset for malformed IDX files.
struct IdxFormatError : std::runtime_error {
  size_t offset;
  IdxFormatError(const std::string& msg, size_t off)
      : std::runtime_error(msg + " (offset " + std::to_string(off) + ")"), offset(off) {}
};

struct SyntheticSpec {
  double base_mean = 0.0;
  double base_sigma = 1.0;
  double outlier_rate = 0.0;        // in [0,1)
  double outlier_min_sigma = 15.0;  // magnitude range in base-sigma units
  double outlier_max_sigma = 20.0;
  size_t count = 0;
  uint64_t seed = 0;
};

struct SyntheticSample {
  Tensor values;  // flat [count]
  double inlier_mean = 0.0;
  double inlier_variance = 0.0;  // biased, over the inliers actually drawn
  std::vector<size_t> outlier_indices;
};

// Deterministic given the seed; exactly round(rate*count) outliers at seeded
// positions, magnitudes uniform in [min,max]*sigma with random signs.
SyntheticSample synth_gaussian_with_outliers(const SyntheticSpec& spec);

// Deterministic batch order derived from (seed, epoch). In training mode the
// final partial batch is dropped; in eval mode it is kept.
class Batcher {
 public:
  Batcher(const Dataset& ds, size_t batch_size, uint64_t seed, size_t epoch, bool train);

  size_t batch_count() const { return batches_; }
  // Fills x [B,C,H,W] and labels for batch `b`.
  void get(size_t b, Tensor& x, std::vector<int>& labels) const;
  // New deterministic order for the next epoch.
  void reshuffle(uint64_t seed, size_t epoch);

 private:
  const Dataset* ds_;
  size_t batch_size_;
  size_t batches_;
  std::vector<size_t> perm_;
};

// Deterministically rendered digit-classification dataset in MNIST layout
// (28x28 grayscale, 10 classes): stroke-based glyphs with random affine
// jitter, thickness, pixel noise, and a small rate of corrupted images.
Dataset make_synthetic_digits(size_t n, uint64_t seed, double anomaly_rate = 0.01,
                              const std::string& split = "train");

}  // namespace fbn
