#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lnwarm/autograd.hpp"
#include "lnwarm/layers.hpp"
#include "lnwarm/numerics.hpp"
#include "lnwarm/parallel.hpp"
#include "lnwarm/schedopt.hpp"

namespace lnwarm {

enum class TaskKind { CopyMemory, MarkovNextToken };

inline std::string to_string(TaskKind k) {
  return k == TaskKind::CopyMemory ? "copy" : "markov";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "copy") return TaskKind::CopyMemory;
  if (s == "markov") return TaskKind::MarkovNextToken;
  throw ArgumentError("unknown task kind: " + s);
}

struct TaskSpec {
  TaskKind kind = TaskKind::CopyMemory;
  std::size_t vocab = 32;
  std::size_t n = 16;
  std::size_t dataset_size = 4096;  // training pool; batches are drawn from it
  std::size_t eval_size = 64;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab < 4) throw ArgumentError("TaskSpec: vocab must be >= 4");
    if (n < 4) throw ArgumentError("TaskSpec: n must be >= 4");
    if (dataset_size < 1 || eval_size < 1)
      throw ArgumentError("TaskSpec: dataset_size and eval_size must be >= 1");
  }
};

struct TaskData {
  std::vector<Sequence> train, eval;
  Matrix transition;          // Markov only: row-stochastic vocab x vocab
  double optimal_loss = 0.0;  // best achievable expected loss per position
};

namespace detail {

// Position i predicts the token at i + 1 (wrapping). The model sees the
// whole sequence, so the target is always recoverable and the best loss is 0.
inline Sequence copy_sequence(std::size_t vocab, std::size_t n, Rng& rng) {
  Sequence s;
  s.tokens.resize(n);
  s.targets.resize(n);
  for (auto& t : s.tokens) t = rng.uniform_index(vocab);
  for (std::size_t i = 0; i < n; ++i) s.targets[i] = s.tokens[(i + 1) % n];
  return s;
}

inline std::size_t sample_row(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    acc += probs[j];
    if (u < acc) return j;
  }
  return probs.size() - 1;
}

// Stationary distribution by power iteration; the chain is strictly
// positive, so it converges geometrically.
inline std::vector<double> stationary(const Matrix& p) {
  const std::size_t v = p.rows();
  std::vector<double> pi(v, 1.0 / static_cast<double>(v)), next(v);
  for (int it = 0; it < 100000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < v; ++i)
      for (std::size_t j = 0; j < v; ++j) next[j] += pi[i] * p(i, j);
    double diff = 0.0;
    for (std::size_t j = 0; j < v; ++j) diff = std::max(diff, std::abs(next[j] - pi[j]));
    pi.swap(next);
    if (diff < 1e-15) break;
  }
  return pi;
}

inline Sequence markov_sequence(const Matrix& p, std::span<const double> pi, std::size_t n,
                                Rng& rng) {
  Sequence s;
  std::size_t cur = sample_row(pi, rng);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t next = sample_row(p.row(cur), rng);
    s.tokens.push_back(cur);
    s.targets.push_back(next);
    cur = next;
  }
  return s;
}

}  // namespace detail

// Entropy rate sum_i pi_i H(P_i) of a row-stochastic matrix, in nats.
inline double markov_entropy_rate(const Matrix& p) {
  const std::vector<double> pi = detail::stationary(p);
  double h = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double hi = 0.0;
    for (double q : p.row(i))
      if (q > 0.0) hi -= q * std::log(q);
    h += pi[i] * hi;
  }
  return h;
}

// The Markov chain draws each transition row as softmax(2 z), z ~ N(0, I):
// peaked enough to be learnable, never deterministic.
inline TaskData make_task(const TaskSpec& spec) {
  spec.validate();
  Rng root(spec.seed);
  Rng chain_rng = root.fork(0), train_rng = root.fork(1), eval_rng = root.fork(2);
  TaskData data;
  if (spec.kind == TaskKind::CopyMemory) {
    for (std::size_t i = 0; i < spec.dataset_size; ++i)
      data.train.push_back(detail::copy_sequence(spec.vocab, spec.n, train_rng));
    for (std::size_t i = 0; i < spec.eval_size; ++i)
      data.eval.push_back(detail::copy_sequence(spec.vocab, spec.n, eval_rng));
    return data;
  }
  data.transition = Matrix(spec.vocab, spec.vocab);
  for (std::size_t i = 0; i < spec.vocab; ++i) {
    auto r = data.transition.row(i);
    double z = 0.0;
    for (double& x : r) {
      x = std::exp(2.0 * chain_rng.normal());
      z += x;
    }
    for (double& x : r) x /= z;
  }
  const std::vector<double> pi = detail::stationary(data.transition);
  for (std::size_t i = 0; i < spec.dataset_size; ++i)
    data.train.push_back(detail::markov_sequence(data.transition, pi, spec.n, train_rng));
  for (std::size_t i = 0; i < spec.eval_size; ++i)
    data.eval.push_back(detail::markov_sequence(data.transition, pi, spec.n, eval_rng));
  data.optimal_loss = markov_entropy_rate(data.transition);
  return data;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------
enum class RunStatus { Running, Converged, Diverged, Stalled };

inline std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::Running: return "Running";
    case RunStatus::Converged: return "Converged";
    case RunStatus::Diverged: return "Diverged";
    case RunStatus::Stalled: return "Stalled";
  }
  return "?";
}

struct RunRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // batch loss before the update
  double eval_loss = 0.0;   // latest evaluation at or before this step
  double grad_global_norm = 0.0;
  RunStatus status = RunStatus::Running;
};

inline constexpr double kDivergenceFactor = 3.0;
inline constexpr std::size_t kDivergencePatience = 50;
inline constexpr double kConvergenceFraction = 0.1;  // of ln(vocab)

// Training setup frozen by the calibrate-lr sweep; see README.
inline constexpr double kCalibratedLr = 3e-3;
inline constexpr std::size_t kCalibratedDff = 128;
inline constexpr std::size_t kCalibratedBatch = 16;
inline constexpr std::size_t kCalibratedHorizon = 1000;
inline constexpr std::size_t kCalibratedWarmup = 300;

struct TrainOptions {
  std::size_t batch_size = 32;
  std::size_t eval_interval = 25;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  bool stop_on_converged = true;
  // Negative: kConvergenceFraction * ln(vocab).
  double convergence_threshold = -1.0;
};

// Flags a run once the loss has stayed above factor * initial for `patience`
// consecutive steps, or immediately on a non-finite loss.
class DivergenceDetector {
 public:
  explicit DivergenceDetector(double initial_loss, double factor = kDivergenceFactor,
                              std::size_t patience = kDivergencePatience)
      : limit_(factor * initial_loss), patience_(patience) {}

  bool update(double loss) {
    if (!std::isfinite(loss)) return true;
    run_ = loss > limit_ ? run_ + 1 : 0;
    return run_ >= patience_;
  }

 private:
  double limit_;
  std::size_t patience_;
  std::size_t run_ = 0;
};

inline double convergence_threshold(const ModelConfig& c, const TrainOptions& o) {
  return o.convergence_threshold >= 0.0
             ? o.convergence_threshold
             : kConvergenceFraction * std::log(static_cast<double>(c.vocab));
}

inline double eval_loss(std::span<const Sequence> eval, const ModelParams& p,
                        const ModelConfig& c) {
  return batch_loss(eval, p, c);
}

// Initialization draws from Rng(seed).fork(0) and batch sampling from
// Rng(seed).fork(1), so a run is a pure function of its arguments.
inline std::vector<RunRecord> train(const ModelConfig& c, const TaskData& data,
                                    const Schedule& schedule, OptimizerKind opt,
                                    std::size_t steps, std::uint64_t seed,
                                    const TrainOptions& o = {}, ModelParams* final_params = nullptr) {
  c.validate();
  schedule.validate();
  if (c.theory_mode || c.attention_mode != AttentionMode::FullSoftmax)
    throw ArgumentError("train: needs a trainable (softmax attention) config");
  if (c.L < 1) throw ArgumentError("train: L must be >= 1");
  if (steps < 1) throw ArgumentError("train: steps must be >= 1");
  if (o.batch_size < 1 || o.eval_interval < 1)
    throw ArgumentError("train: batch_size and eval_interval must be >= 1");
  if (data.train.empty() || data.eval.empty()) throw ArgumentError("train: empty task data");
  if (data.train.front().tokens.size() != c.n) throw ArgumentError("train: task n != config n");
  if (data.transition.rows() > 1 && !c.causal)
    throw ArgumentError("train: the Markov task needs causal attention");

  Rng root(seed);
  Rng init_rng = root.fork(0), batch_rng = root.fork(1);
  ModelParams params = init_model(c, init_rng);
  OptimizerState state = OptimizerState::make(opt, schedule, params);
  state.beta1 = o.beta1;
  state.beta2 = o.beta2;
  state.eps = o.adam_eps;
  const double threshold = convergence_threshold(c, o);

  std::vector<RunRecord> out;
  out.reserve(steps);
  std::vector<Sequence> batch(o.batch_size);
  double current_eval = eval_loss(data.eval, params, c);
  DivergenceDetector detector(std::numeric_limits<double>::infinity());
  for (std::size_t t = 1; t <= steps; ++t) {
    for (auto& s : batch) s = data.train[batch_rng.uniform_index(data.train.size())];
    RunRecord r;
    r.step = t;
    r.lr = lr_at(schedule, t);
    LossGrad lg = loss_and_grad(batch, params, c);
    r.train_loss = lg.loss;
    r.grad_global_norm = global_norm(lg.grads);
    if (t == 1 && std::isfinite(lg.loss)) detector = DivergenceDetector(lg.loss);
    bool diverged = detector.update(lg.loss) || !std::isfinite(r.grad_global_norm);
    if (!diverged) {
      optimizer_step(state, params, lg.grads);
      if (t % o.eval_interval == 0 || t == steps) current_eval = eval_loss(data.eval, params, c);
      if (!std::isfinite(current_eval)) diverged = true;
    }
    r.eval_loss = current_eval;
    if (diverged) {
      r.status = RunStatus::Diverged;
    } else if (current_eval < threshold && (t % o.eval_interval == 0 || t == steps)) {
      r.status = RunStatus::Converged;
    } else if (t == steps) {
      r.status = RunStatus::Stalled;
    }
    out.push_back(r);
    if (r.status == RunStatus::Diverged) break;
    if (r.status == RunStatus::Converged && o.stop_on_converged) break;
  }
  if (final_params) *final_params = std::move(params);
  return out;
}

// Final outcome of a run: the status of its last record.
inline RunStatus final_status(std::span<const RunRecord> records) {
  return records.empty() ? RunStatus::Running : records.back().status;
}

inline double final_eval_loss(std::span<const RunRecord> records) {
  return records.empty() ? std::numeric_limits<double>::quiet_NaN() : records.back().eval_loss;
}

// Post-LN, no warm-up, constant small rate.
inline std::vector<RunRecord> small_lr_probe(const ModelConfig& c, const TaskData& data,
                                             std::size_t steps, std::uint64_t seed,
                                             double lr = 1e-4, TrainOptions o = {}) {
  if (c.variant != Variant::PostLN) throw ArgumentError("small_lr_probe: needs Post-LN");
  Schedule s;
  s.kind = ScheduleKind::Fixed;
  s.lr_max = lr;
  s.warmup_steps = 1;
  s.total_steps = steps;
  return train(c, data, s, OptimizerKind::Adam, steps, seed, o);
}

// True when the moving average of train loss over `window` steps, sampled
// every `window` steps, never rises by more than `tolerance` (relative).
inline bool smoothed_nonincreasing(std::span<const RunRecord> records, std::size_t window,
                                   double tolerance = 0.0) {
  if (window < 1) throw ArgumentError("smoothed_nonincreasing: window must be >= 1");
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t start = 0; start + window <= records.size(); start += window) {
    double sum = 0.0;
    for (std::size_t i = start; i < start + window; ++i) sum += records[i].train_loss;
    const double mean = sum / static_cast<double>(window);
    if (mean > prev * (1.0 + tolerance)) return false;
    prev = mean;
  }
  return true;
}

// One schedule and optimizer run over several seeds.
struct ArmSpec {
  std::string name;
  ModelConfig config;
  Schedule schedule;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::size_t steps = 0;
  std::vector<std::uint64_t> seeds;
  TrainOptions options;
};

struct ArmResult {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<RunRecord>> runs;  // one per seed, same order

  std::size_t count(RunStatus s) const {
    std::size_t k = 0;
    for (const auto& r : runs) k += final_status(r) == s;
    return k;
  }
  bool majority(RunStatus s) const { return 2 * count(s) > runs.size(); }
  double mean_final_eval() const {
    double acc = 0.0;
    for (const auto& r : runs) acc += final_eval_loss(r);
    return acc / static_cast<double>(runs.size());
  }
};

inline ArmResult run_arm(const ArmSpec& arm, const TaskData& data,
                         std::size_t threads = default_threads()) {
  if (arm.seeds.empty()) throw ArgumentError("run_arm: no seeds");
  ArmResult out{arm.name, arm.seeds, std::vector<std::vector<RunRecord>>(arm.seeds.size())};
  parallel_for(
      arm.seeds.size(),
      [&](std::size_t i) {
        out.runs[i] = train(arm.config, data, arm.schedule, arm.optimizer, arm.steps, arm.seeds[i],
                            arm.options);
      },
      threads);
  return out;
}

}  // namespace lnwarm
