#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fbn/data.hpp"
#include "fbn/models.hpp"

namespace fbn {

struct OptimizerConfig {
  std::string kind = "sgd_momentum";  // or "adam"
  double lr = 0.01;
  double momentum = 0.9;  // SGD
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // Adam
  size_t decay_every = 0;   // 0 disables step decay
  double decay_factor = 0.1;

  void validate() const;
  double rate_at(size_t iter) const;
};

class Optimizer {
 public:
  Optimizer(std::vector<Parameter*> params, OptimizerConfig cfg);

  // Applies one update from the accumulated gradients. `iter` starts at 0.
  void step(size_t iter);

  const OptimizerConfig& config() const { return cfg_; }
  // Per-parameter state slots, exposed for checkpointing.
  std::vector<Tensor>& slot_a() { return a_; }  // velocity (SGD) or first moment
  std::vector<Tensor>& slot_b() { return b_; }  // second moment (Adam only)
  size_t steps_taken() const { return t_; }
  void set_steps_taken(size_t t) { t_ = t; }

 private:
  std::vector<Parameter*> params_;
  OptimizerConfig cfg_;
  std::vector<Tensor> a_, b_;
  size_t t_ = 0;
};

// Loss and gradient response to steps along the negative gradient.
struct LandscapeProbe {
  size_t iteration = 0;
  std::vector<double> step_sizes;
  std::vector<double> losses;        // loss at theta - eta*g, per step size
  std::vector<double> grad_changes;  // ||g(theta - eta*g) - g(theta)||_2
  double base_loss = 0;
  double base_grad_norm = 0;
  double loss_variance = 0, loss_min = 0, loss_max = 0;
  double grad_variance = 0, grad_min = 0, grad_max = 0;
};

struct RunRecord {
  uint64_t seed = 0;
  std::vector<double> train_loss;  // one entry per iteration
  std::vector<size_t> eval_iterations;
  std::vector<double> test_accuracy;  // parallel to eval_iterations
  std::vector<LandscapeProbe> probes;
  double final_accuracy = 0;
  double wall_time_sec = 0;
  long degenerate_slices = 0;
};

struct TrainConfig {
  size_t iterations = 1000;
  size_t batch_size = 256;
  size_t eval_every = 0;  // 0 evaluates only at the end
  size_t eval_batch_size = 512;
  uint64_t seed = 0;
  size_t probe_every = 0;  // 0 disables landscape probes
  std::vector<double> probe_steps{0.02, 0.01, 0.005, 0.001};
};

struct DivergenceError : std::runtime_error {
  size_t iteration;
  double loss;
  DivergenceError(size_t it, double l)
      : std::runtime_error("training diverged at iteration " + std::to_string(it) +
                           " (loss=" + std::to_string(l) + ")"),
        iteration(it), loss(l) {}
};

double evaluate(Model& model, const Dataset& ds, size_t batch_size);

// Deterministic given (model seed, tc.seed). Evaluation always runs in
// inference mode with frozen running stats. Non-finite loss aborts.
RunRecord train(Model& model, const Dataset& train_ds, const Dataset& test_ds,
                const OptimizerConfig& opt, const TrainConfig& tc);

// Evaluates loss and gradient at theta - eta*g for each step size, restoring
// the parameters bit-exactly afterwards. Uses frozen-stats forwards so the
// probe never touches running statistics.
LandscapeProbe probe_landscape(Model& model, const Tensor& x,
                               const std::vector<int>& labels,
                               const std::vector<double>& step_sizes);

// Generic version over any loss. `loss_with_grads` must zero and then fill
// the parameters' gradients and return the loss value.
LandscapeProbe probe_landscape_fn(const std::vector<Parameter*>& params,
                                  const std::function<double()>& loss_with_grads,
                                  const std::vector<double>& step_sizes);

// Per-channel moment deviations of a small batch from a large reference
// batch, measured on the same activations: plain moments vs filtered ones.
struct MomentDeviation {
  double bn_mean = 0, fbn_mean = 0;  // mean over channels of |mu_small - mu_large|
  double bn_var = 0, fbn_var = 0;
};
MomentDeviation moment_deviation(const Tensor& x_large, const Tensor& x_small,
                                 double t_sigma, double epsilon = 1e-5);

struct MomentConsistencyConfig {
  size_t steps = 200;
  size_t large_batch = 128;
  size_t small_batch = 16;
  double t_sigma = 2.0;
  uint64_t seed = 0;
  std::string slot;  // empty picks the first normalized slot
};

struct MomentConsistencyResult {
  std::string slot;
  std::vector<double> bn_mean_dev, fbn_mean_dev;  // per step
  std::vector<double> bn_var_dev, fbn_var_dev;
};

// Trains `model` (which must carry a BN layer at the chosen slot) on large
// batches; before every update, re-measures the slot input on a random
// small-batch subset with plain and filtered moments and records absolute
// deviations from the large-batch reference.
MomentConsistencyResult moment_consistency_experiment(Model& model, const Dataset& ds,
                                                      const OptimizerConfig& opt,
                                                      const MomentConsistencyConfig& mc);

struct AblationResult {
  std::string placement;  // "none", "all", or a slot name
  std::vector<double> accuracy;  // one per repetition, paired seeds
  double mean_acc = 0, std_acc = 0;
};

// One training run per (placement, repetition); seeds are paired across
// placements so differences are attributable to the slot alone.
std::vector<AblationResult> layer_placement_ablation(
    const ModelSpec& base, const Dataset& train_ds, const Dataset& test_ds,
    const std::vector<std::string>& placements, size_t repetitions,
    const OptimizerConfig& opt, const TrainConfig& tc);

// Versioned binary checkpoint: manifest of named, shaped entries followed by
// raw little-endian doubles. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, Model& model, Optimizer* opt = nullptr);
void load_checkpoint(const std::string& path, Model& model, Optimizer* opt = nullptr);

}  // namespace fbn
