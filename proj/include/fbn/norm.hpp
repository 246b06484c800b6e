#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fbn/param.hpp"
#include "fbn/tensor.hpp"

namespace fbn {

enum class NormKind { BN, FBN, GN, FGN };
enum class GradMode { Masked, Exact };

const char* norm_kind_name(NormKind k);
NormKind norm_kind_from_name(const std::string& name);

struct NormConfig {
  NormKind kind = NormKind::BN;
  double t_sigma = 2.0;       // filtering threshold in sigma units (FBN/FGN)
  double epsilon = 1e-5;      // inside the square root, Eq-style
  double momentum_alpha = 0.1;
  size_t num_groups = 1;      // GN/FGN
  GradMode grad_mode = GradMode::Exact;

  bool filtered() const { return kind == NormKind::FBN || kind == NormKind::FGN; }
  bool grouped() const { return kind == NormKind::GN || kind == NormKind::FGN; }
  void validate(size_t channels) const;
};

// Per-channel EMA of the (filtered) batch moments, used as constants at
// inference. Initialized to mean 0 / variance 1.
struct RunningStats {
  Tensor mean;
  Tensor var;  // biased
  long update_count = 0;

  void init(size_t channels) {
    mean = Tensor::zeros({channels});
    var = Tensor::ones({channels});
    update_count = 0;
  }
  void update(const std::vector<double>& m, const std::vector<double>& v, double alpha);
};

struct AffineParams {
  Parameter gamma;  // init 1
  Parameter beta;   // init 0

  void init(size_t channels) {
    gamma = Parameter(Tensor::ones({channels}));
    beta = Parameter(Tensor::zeros({channels}));
  }
  size_t channels() const { return gamma.value.size(); }
};

// Maps flat element indices of a [N,C,...] tensor onto normalization
// slices: per channel (over batch and positions) for BN/FBN, per
// instance-group for GN/FGN.
struct SliceMap {
  size_t batch = 0, channels = 0, spatial = 0;
  size_t groups = 1, group_channels = 0;
  size_t slice_count = 0, slice_size = 0, total = 0;
  bool grouped = false;

  static SliceMap make(const std::vector<size_t>& shape, const NormConfig& cfg);

  size_t channel_of(size_t flat) const { return (flat / spatial) % channels; }
  size_t slice_of(size_t flat) const {
    if (!grouped) return channel_of(flat);
    return (flat / (channels * spatial)) * groups + channel_of(flat) / group_channels;
  }
};

// Saved forward state consumed by the analytic backward pass.
struct NormCache {
  std::vector<size_t> in_shape;
  SliceMap map;
  std::vector<double> candidate_mu;     // per slice, Eq-2 moments of the full slice
  std::vector<double> candidate_sigma;  // epsilon-floored
  Tensor mask;                          // per element, {0,1}; all ones when unfiltered
  std::vector<double> filtered_mu;      // per slice
  std::vector<double> filtered_var;     // per slice, biased, without epsilon
  std::vector<double> sigma_prime;      // sqrt(filtered_var + epsilon)
  std::vector<double> mask_count;       // per slice, >= 1
  Tensor x_hat;                         // (x - mu') / sigma', pre-affine
  long degenerate_slices = 0;           // slices that fell back to unfiltered moments
};

// Forward pass in training mode. Handles all four kinds; for BN/FBN the
// per-channel running stats are EMA-updated with the (filtered) moments,
// GN/FGN ignore `stats` (pass nullptr).
void norm_forward_train(const Tensor& x, const AffineParams& params, const NormConfig& cfg,
                        RunningStats* stats, Tensor& y, NormCache& cache);

// Inference: BN/FBN use running stats as constants (no mask, no moment
// computation); GN/FGN recompute per-instance statistics as in training.
// `used_initial_stats`, when given, is set if the stats were never updated.
Tensor norm_forward_infer(const Tensor& x, const AffineParams& params, const NormConfig& cfg,
                          const RunningStats* stats, bool* used_initial_stats = nullptr);

// Analytic backward. In GradMode::Masked the reduction sums run over the
// filtered subset only; in GradMode::Exact the gradients are those of the
// implemented forward map with the mask held constant (FD verified).
// Both modes agree bit-for-bit when the mask is identically one.
void norm_backward(const Tensor& dLdy, const NormCache& cache, const AffineParams& params,
                   const NormConfig& cfg, Tensor& dLdx, Tensor& dLdgamma, Tensor& dLdbeta);

// A full normalization layer: config, affine parameters, running stats.
struct NormLayer {
  NormConfig cfg;
  AffineParams affine;
  RunningStats stats;
  long degenerate_total = 0;

  // When set, receives the pre-affine normalized activations of every
  // training-mode forward (activation profiling hook).
  std::function<void(const Tensor& x_hat)> on_normalized;
  // When set, receives the raw layer input of every training-mode forward
  // (moment-consistency experiments re-measure these under other configs).
  std::function<void(const Tensor& x)> on_input;

  void init(size_t channels, const NormConfig& c) {
    cfg = c;
    cfg.validate(channels);
    affine.init(channels);
    stats.init(channels);
  }

  Tensor forward_train(const Tensor& x, NormCache& cache);
  Tensor forward_infer(const Tensor& x) const;
};

}  // namespace fbn
