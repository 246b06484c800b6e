#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "fbn/norm.hpp"
#include "fbn/param.hpp"
#include "fbn/tensor.hpp"

namespace fbn {

enum class ForwardMode { Train, TrainFrozenStats, Infer };

// Reverse-mode autodiff over a recorded operation tape. One tape per
// training thread; nodes are visited exactly once in reverse order.
class Tape {
 public:
  // Leaves. `needs_grad` requests d loss / d input for the leaf itself.
  int input(Tensor t, bool needs_grad = false);
  int param(Parameter& p);

  // y = x W^T + b, x:[N,I], W:[O,I], b:[O]
  int linear(int x, Parameter& W, Parameter& b);
  // x:[N,C,H,W], K:[F,C,kh,kw], b:[F], zero padding
  int conv2d(int x, Parameter& K, Parameter& b, size_t stride, size_t pad);
  int relu(int x);
  // Ties broken toward the lowest flat index.
  int max_pool2d(int x, size_t k, size_t stride);
  int flatten(int x);
  // Log-sum-exp stabilized, mean loss over the batch. Scalar output.
  int softmax_cross_entropy(int logits, const std::vector<int>& labels);
  int norm(int x, NormLayer& layer, ForwardMode mode);

  // Small ops used by tests and probes.
  int sum(int x);
  int square_op(int x);
  int add_op(int a, int b);

  const Tensor& value(int id) const { return nodes_[id].out; }
  const Tensor& grad(int id) const;
  const NormCache& norm_cache(int norm_node) const;

  // Populates gradients of all visited parameters (accumulating) and of
  // needs_grad leaves. `loss` must be scalar.
  void backward(int loss);

  void clear();
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor out;
    Tensor grad;  // allocated during backward
    bool needs_grad = false;
    bool grad_ready = false;
    std::function<void(Tape&, const Tensor& g)> back;  // null for leaves
    std::shared_ptr<NormCache> cache;                  // norm nodes only
  };

  int push(Tensor out, bool needs_grad,
           std::function<void(Tape&, const Tensor& g)> back);
  void accumulate(int id, const Tensor& g);

  std::vector<Node> nodes_;
};

struct FdReport {
  double max_rel_err = 0.0;
  size_t worst_index = 0;
  size_t checked = 0;
  size_t excluded = 0;
  bool passed = true;
};

// Central finite differences of a scalar function against a supplied
// analytic gradient. Elements where `exclude` returns true (boundary /
// non-differentiable points) are reported as excluded, not checked.
FdReport finite_difference_check(
    const std::function<double(const Tensor&)>& f, const Tensor& analytic_grad,
    const Tensor& x, double step, double tolerance,
    const std::function<bool(size_t)>& exclude = nullptr);

}  // namespace fbn
