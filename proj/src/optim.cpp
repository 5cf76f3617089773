#include "cfdr/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace cfdr {

void optimizer_step(const std::vector<Parameter*>& params, const OptimizerConfig& cfg) {
  for (Parameter* p : params) {
    if (!p->tensor.has_grad())
      throw std::runtime_error("optimizer_step: missing grad on parameter '" + p->name + "'");
  }
  for (Parameter* p : params) {
    auto& w = p->tensor.data();
    const auto& g = p->tensor.grad();
    if (cfg.kind == OptimizerKind::sgd) {
      for (size_t i = 0; i < w.size(); ++i) w[i] -= cfg.lr * g[i];
    } else {
      if (p->m.size() != w.size()) p->m.assign(w.size(), 0.0f);
      if (p->v.size() != w.size()) p->v.assign(w.size(), 0.0f);
      p->step_count += 1;
      double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(p->step_count));
      double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(p->step_count));
      for (size_t i = 0; i < w.size(); ++i) {
        p->m[i] = cfg.beta1 * p->m[i] + (1.0f - cfg.beta1) * g[i];
        p->v[i] = cfg.beta2 * p->v[i] + (1.0f - cfg.beta2) * g[i] * g[i];
        float mhat = static_cast<float>(p->m[i] / bc1);
        float vhat = static_cast<float>(p->v[i] / bc2);
        w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    }
  }
}

void zero_grad(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->tensor.zero_grad();
}

}  // namespace cfdr
