#pragma once

#include <string>
#include <vector>

#include "cfdr/tensor.hpp"

namespace cfdr {

// A named trainable tensor plus its optimizer moment buffers. Names are
// dotted paths ("encoder.conv1.weight") and unique within a model.
struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<float> m;  // first moment (adam)
  std::vector<float> v;  // second moment (adam)
  int64_t step_count = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor t) : name(std::move(n)), tensor(std::move(t)) {}
};

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// In-place update of all parameters from their gradients. Gradients are left
// untouched; clearing them is the caller's explicit zero_grad. Throws if any
// parameter is missing its gradient.
void optimizer_step(const std::vector<Parameter*>& params, const OptimizerConfig& cfg);

void zero_grad(const std::vector<Parameter*>& params);

}  // namespace cfdr
