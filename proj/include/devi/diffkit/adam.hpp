#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "devi/diffkit/tape.hpp"

namespace devi::diff {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;
  long skipped = 0;
};

/// One bias-corrected ADAM update. Returns false, leaving parameters and
/// moments untouched, when any gradient entry is non-finite.
inline bool adam_step(ParameterSet& params, const Gradients& grads, AdamState& state, const AdamConfig& cfg = {}) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient count does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].shape() != params[i].shape())
      throw std::invalid_argument("adam_step: gradient shape mismatch for " + params.name(i));
  for (const auto& g : grads)
    if (!g.all_finite()) {
      ++state.skipped;
      return false;
    }
  if (state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m.emplace_back(params[i].shape(), 0.0);
      state.v.emplace_back(params[i].shape(), 0.0);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      p[k] -= cfg.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.epsilon);
    }
  }
  return true;
}

}  // namespace devi::diff
