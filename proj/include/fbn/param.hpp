#pragma once

#include "fbn/tensor.hpp"

namespace fbn {

// Trainable value plus its gradient accumulator.
struct Parameter {
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Tensor v, bool train = true)
      : value(std::move(v)), grad(Tensor::zeros(value.shape())), trainable(train) {}

  void zero_grad() { grad.fill(0.0); }
};

}  // namespace fbn
