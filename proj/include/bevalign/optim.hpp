#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevalign/params.hpp"
#include "bevalign/tensor.hpp"

namespace bevalign {

// Linear warmup to peak, cosine decay to floor_ratio * peak. Continuous
// at the junction; steps past the end clamp to the floor.
struct LrSchedule {
  double peak_lr = 4e-4;
  std::size_t warmup_epochs = 5;
  std::size_t total_epochs = 50;
  double floor_ratio = 0.01;
  std::size_t steps_per_epoch = 1;

  std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  std::size_t total_steps() const { return total_epochs * steps_per_epoch; }
};

inline void validate_schedule(const LrSchedule& s) {
  if (s.warmup_epochs >= s.total_epochs) {
    throw std::invalid_argument("lr schedule: warmup must end before the schedule does");
  }
  if (!(s.floor_ratio > 0.0 && s.floor_ratio <= 1.0)) {
    throw std::invalid_argument("lr schedule: floor_ratio must be in (0, 1]");
  }
  if (!(s.peak_lr > 0.0) || s.steps_per_epoch == 0) {
    throw std::invalid_argument("lr schedule: peak_lr and steps_per_epoch must be positive");
  }
}

inline double lr_at(const LrSchedule& s, std::size_t global_step) {
  const std::size_t warm = s.warmup_steps();
  const double floor = s.floor_ratio * s.peak_lr;
  if (warm > 0 && global_step <= warm) {
    return s.peak_lr * static_cast<double>(global_step) / static_cast<double>(warm);
  }
  const std::size_t total = s.total_steps();
  if (global_step >= total) return floor;
  const double progress = static_cast<double>(global_step - warm) /
                          static_cast<double>(total - warm);
  return floor + 0.5 * (s.peak_lr - floor) * (1.0 + std::cos(M_PI * progress));
}

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimState {
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

// Decoupled weight decay, then the bias-corrected adaptive step. Every
// parameter in the store is visited exactly once; the return value is
// that count for auditing. Gradients are read, not cleared.
inline std::size_t optimizer_step(ParameterStore& store, OptimState& state,
                                  const OptimConfig& cfg, double lr) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  std::size_t updated = 0;
  for (const auto& name : store.names()) {
    Tensor p = store.get(name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(p.size(), 0.0);
    if (v.empty()) v.assign(p.size(), 0.0);
    if (m.size() != p.size() || v.size() != p.size()) {
      throw std::invalid_argument("optimizer: moment shape drift for " + name);
    }
    auto& vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double g = p.grad_at(i);
      if (!std::isfinite(g)) throw NumericError("optimizer: non-finite gradient in " + name);
      vals[i] *= 1.0 - lr * cfg.weight_decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      vals[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
    }
    ++updated;
  }
  return updated;
}

}  // namespace bevalign
