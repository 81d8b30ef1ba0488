#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "lnwarm/autograd.hpp"
#include "lnwarm/layers.hpp"

namespace lnwarm {

enum class ScheduleKind { WarmupInvSqrt, WarmupLinearDecay, NoWarmupInvSqrtAfterDrop, LinearDecay, Fixed };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::WarmupInvSqrt: return "warmup-invsqrt";
    case ScheduleKind::WarmupLinearDecay: return "warmup-linear";
    case ScheduleKind::NoWarmupInvSqrtAfterDrop: return "drop-invsqrt";
    case ScheduleKind::LinearDecay: return "linear";
    case ScheduleKind::Fixed: return "fixed";
  }
  return "?";
}

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  for (auto k : {ScheduleKind::WarmupInvSqrt, ScheduleKind::WarmupLinearDecay,
                 ScheduleKind::NoWarmupInvSqrtAfterDrop, ScheduleKind::LinearDecay, ScheduleKind::Fixed})
    if (to_string(k) == s) return k;
  throw ArgumentError("unknown schedule kind: " + s);
}

struct Schedule {
  ScheduleKind kind = ScheduleKind::WarmupInvSqrt;
  double lr_max = 1e-3;
  std::size_t warmup_steps = 4000;  // 1 means no warm-up
  std::size_t total_steps = 100000;
  std::size_t drop_step = 1;
  double drop_factor = 0.1;

  void validate() const {
    if (!(lr_max >= 0.0) || !std::isfinite(lr_max)) throw ArgumentError("Schedule: lr_max must be >= 0");
    if (warmup_steps < 1) throw ArgumentError("Schedule: warmup_steps must be >= 1");
    if (total_steps < 1) throw ArgumentError("Schedule: total_steps must be >= 1");
    if (drop_step < 1) throw ArgumentError("Schedule: drop_step must be >= 1");
    if (!(drop_factor >= 0.0 && drop_factor <= 1.0))
      throw ArgumentError("Schedule: drop_factor must be in [0, 1]");
  }
};

// Learning rate at step t (1-based).
//
// Warm-up:  lr(t) = lr_max * t / T_warmup             for t <= T_warmup
// then      lr(t) = lr_max * sqrt(T_warmup / t)        (inverse square root)
//      or   lr(t) = lr_max * (T - t) / (T - T_warmup)  (linear, floored at 0)
inline double lr_at(const Schedule& s, std::size_t t) {
  if (t < 1) throw ArgumentError("lr_at: t must be >= 1");
  const double tt = static_cast<double>(t);
  const double tw = static_cast<double>(s.warmup_steps);
  const double total = static_cast<double>(s.total_steps);
  switch (s.kind) {
    case ScheduleKind::WarmupInvSqrt:
      if (t <= s.warmup_steps) return s.lr_max * tt / tw;
      return s.lr_max * std::sqrt(tw / tt);
    case ScheduleKind::WarmupLinearDecay:
      if (t <= s.warmup_steps) return s.lr_max * tt / tw;
      if (s.total_steps <= s.warmup_steps) return 0.0;
      return std::max(0.0, s.lr_max * (total - tt) / (total - tw));
    case ScheduleKind::NoWarmupInvSqrtAfterDrop:
      if (t <= s.drop_step) return s.lr_max;
      return s.lr_max * s.drop_factor * std::sqrt(static_cast<double>(s.drop_step) / tt);
    case ScheduleKind::LinearDecay:
      return std::max(0.0, s.lr_max * (1.0 - tt / total));
    case ScheduleKind::Fixed:
      return s.lr_max;
  }
  return 0.0;
}

// Thrown when an update would write non-finite values into the parameters.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void sgd_step(ModelParams& params, const GradBundle& grads, double lr) {
  if (!all_finite(grads)) throw DivergenceError("sgd_step: non-finite gradient");
  for_each_param_pair(params, grads, [lr](ParamId, Matrix& w, const Matrix& g) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
  });
}

enum class OptimizerKind { SGD, Adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::SGD ? "sgd" : "adam"; }

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  Schedule schedule;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::size_t step = 0;
  GradBundle m, v;  // first / second moments, zero at start

  static OptimizerState make(OptimizerKind kind, const Schedule& schedule,
                             const ModelParams& params) {
    OptimizerState s;
    s.kind = kind;
    s.schedule = schedule;
    if (kind == OptimizerKind::Adam) {
      s.m = zeros_like(params);
      s.v = zeros_like(params);
    }
    return s;
  }
};

// Bias-corrected Adam; increments state.step.
inline void adam_step(OptimizerState& state, ModelParams& params, const GradBundle& grads,
                      double lr) {
  if (!all_finite(grads)) throw DivergenceError("adam_step: non-finite gradient");
  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  std::vector<Matrix*> ms, vs;
  for_each_param(state.m, [&](ParamId, Matrix& x) { ms.push_back(&x); });
  for_each_param(state.v, [&](ParamId, Matrix& x) { vs.push_back(&x); });
  std::size_t idx = 0;
  for_each_param_pair(params, grads, [&](ParamId, Matrix& w, const Matrix& g) {
    Matrix& m = *ms.at(idx);
    Matrix& v = *vs.at(idx);
    ++idx;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  });
}

// One update using the schedule's rate for the next step; returns that rate.
inline double optimizer_step(OptimizerState& state, ModelParams& params, const GradBundle& grads) {
  const double lr = lr_at(state.schedule, state.step + 1);
  if (state.kind == OptimizerKind::Adam) {
    adam_step(state, params, grads, lr);
  } else {
    sgd_step(params, grads, lr);
    ++state.step;
  }
  return lr;
}

}  // namespace lnwarm
