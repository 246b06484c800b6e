#pragma once

#include <map>
#include <string>
#include <vector>

#include "fbn/autodiff.hpp"
#include "fbn/norm.hpp"
#include "fbn/param.hpp"

namespace fbn {

// Which normalization, if any, sits in each named insertion slot. Slots are
// placed between the affine op and its nonlinearity; the logit layer never
// carries one.
struct ModelSpec {
  std::string architecture = "lenet5";  // "lenet5" or "mlp"
  std::map<std::string, std::string> slot_norms;  // slot -> none|bn|fbn|gn|fgn
  NormConfig norm;                                // shared settings (t_sigma, eps, ...)
  uint64_t seed = 0;

  static const std::vector<std::string>& slot_names(const std::string& architecture);
  void set_all_slots(const std::string& kind);
  void validate() const;
};

// lenet5: conv 6@5x5 pad 2 -> pool -> conv 16@5x5 -> pool -> fc120 -> fc84 -> fc10,
// ReLU activations, 2x2 max pooling. Slots: conv1, conv2, fc120, fc84.
// mlp: 784 -> 256 -> 128 -> 10. Slots: fc1, fc2.
class Model {
 public:
  explicit Model(const ModelSpec& spec);

  // Records the graph on `tape`, returns the logits node id.
  int forward(Tape& tape, const Tensor& x, ForwardMode mode);

  // Trainable parameters (weights, biases, gamma, beta) in a fixed order.
  std::vector<Parameter*> parameters();
  // Core weights/biases only, with their names (norm affines live in
  // norm_layers()). Used by checkpointing.
  std::vector<std::pair<std::string, Parameter*>> named_parameters();
  std::vector<std::pair<std::string, NormLayer*>> norm_layers();
  size_t parameter_count() const;
  void zero_grad();

  const ModelSpec& spec() const { return spec_; }

 private:
  void init_params();
  int norm_slot(Tape& tape, int x, const std::string& slot, ForwardMode mode);

  ModelSpec spec_;
  std::vector<std::string> param_names_;
  std::vector<Parameter> params_;          // index parallel to param_names_
  std::map<std::string, NormLayer> norms_;

  Parameter& p(const std::string& name);
};

}  // namespace fbn
