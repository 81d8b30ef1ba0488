#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lnwarm/autograd.hpp"
#include "lnwarm/layers.hpp"
#include "lnwarm/numerics.hpp"
#include "lnwarm/parallel.hpp"

namespace lnwarm {

// ---------------------------------------------------------------------------
// E ||ReLU(X)||^2 = sigma^2 d / 2 for X ~ N(0, sigma^2 I_d)
// ---------------------------------------------------------------------------
inline constexpr double kLemma1RelTol = 0.02;

struct Lemma1Result {
  double estimate = 0.0;
  double target = 0.0;
  double rel_err = 0.0;
};

inline Lemma1Result check_lemma1(std::size_t d, double sigma, std::size_t samples, Rng& rng) {
  if (samples < 1000) throw ArgumentError("check_lemma1: samples must be >= 1000");
  if (d < 1 || !(sigma >= 0.0)) throw ArgumentError("check_lemma1: need d >= 1, sigma >= 0");
  std::vector<double> values(samples);
  for (double& v : values) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double x = sigma * rng.normal();
      if (x > 0.0) s += x * x;
    }
    v = s;
  }
  Lemma1Result r;
  r.estimate = pairwise_sum(values) / static_cast<double>(samples);
  r.target = 0.5 * sigma * sigma * static_cast<double>(d);
  r.rel_err = r.target > 0.0 ? std::abs(r.estimate - r.target) / r.target : std::abs(r.estimate);
  return r;
}

// ---------------------------------------------------------------------------
// Hidden-state norms at initialization.
// ---------------------------------------------------------------------------
struct Lemma2Row {
  std::size_t layer = 0;  // Post-LN: 1-based layer of x^{post,5}; Pre-LN: l of x^{pre}_l
  double mean_sq_norm = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  bool passed = false;
};

struct Lemma2Report {
  Variant variant = Variant::PostLN;
  std::vector<Lemma2Row> rows;
  bool passed = false;
};

inline constexpr double kLemma2RelTol = 0.05;

// Draws `samples` independent (initialization, input) pairs. The input rows
// are i.i.d. N(0, I_d), so E||x_0||^2 = d.
inline Lemma2Report check_lemma2(const ModelConfig& c, std::size_t samples, Rng& rng,
                                 std::size_t threads = default_threads()) {
  c.validate();
  if (!c.theory_mode) throw ArgumentError("check_lemma2: theory_mode required");
  if (c.L < 1) throw ArgumentError("check_lemma2: L must be >= 1");
  if (samples < 100) throw ArgumentError("check_lemma2: samples must be >= 100");
  const std::size_t slots = c.variant == Variant::PostLN ? c.L : c.L + 1;
  std::vector<std::vector<double>> per_draw(samples, std::vector<double>(slots, 0.0));
  parallel_for(
      samples,
      [&](std::size_t s) {
        Rng local = rng.fork(s);
        const ModelParams p = init_model(c, local);
        const Matrix x0 = gaussian_matrix(c.n, c.d, 1.0, local);
        const ForwardTrace tr = forward_stack(x0, p, c);
        const double inv_n = 1.0 / static_cast<double>(c.n);
        for (std::size_t l = 0; l < slots; ++l) {
          const Matrix* m;
          if (c.variant == Variant::PostLN) {
            m = &tr.layers[l].x5;
          } else {
            m = l < c.L ? &tr.layers[l].x_in : &*tr.final_pre_ln;
          }
          double acc = 0.0;
          for (std::size_t i = 0; i < c.n; ++i) acc += squared_norm(m->row(i));
          per_draw[s][l] = acc * inv_n;
        }
      },
      threads);

  Lemma2Report rep;
  rep.variant = c.variant;
  rep.passed = true;
  const double d = static_cast<double>(c.d);
  for (std::size_t l = 0; l < slots; ++l) {
    std::vector<double> col(samples);
    for (std::size_t s = 0; s < samples; ++s) col[s] = per_draw[s][l];
    Lemma2Row row;
    row.mean_sq_norm = pairwise_sum(col) / static_cast<double>(samples);
    if (c.variant == Variant::PostLN) {
      row.layer = l + 1;
      row.lower = 1.5 * d * (1.0 - kLemma2RelTol);
      row.upper = 1.5 * d * (1.0 + kLemma2RelTol);
    } else {
      row.layer = l;
      const double dl = static_cast<double>(l);
      if (l == 0) {
        row.lower = d * (1.0 - kLemma2RelTol);
        row.upper = d * (1.0 + kLemma2RelTol);
      } else {
        row.lower = (1.0 + dl / 2.0) * d;
        row.upper = (1.0 + 3.0 * dl / 2.0) * d;
      }
    }
    row.passed = row.mean_sq_norm >= row.lower && row.mean_sq_norm <= row.upper;
    rep.passed = rep.passed && row.passed;
    rep.rows.push_back(row);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// ||J_LN(x)||_2 * ||y||_2 / sqrt(d) <= 1, y the centred x.
// ---------------------------------------------------------------------------
inline double ln_jacobian_ratio(std::span<const double> x) {
  const double d = static_cast<double>(x.size());
  const double mu = std::accumulate(x.begin(), x.end(), 0.0) / d;
  double y2 = 0.0;
  for (double v : x) y2 += (v - mu) * (v - mu);
  return spectral_norm(ln_jacobian(x)) * std::sqrt(y2) / std::sqrt(d);
}

inline constexpr double kLemma3Slack = 1e-9;
inline constexpr double kJacobianFdTol = 1e-6;

// Largest entrywise gap between ln_jacobian and central differences of
// layer_norm, over `points` draws x ~ N(0, I_d). Entry (i, j) is d out_i / d x_j.
inline double ln_jacobian_fd_error(std::size_t d, std::size_t points, double h, Rng& rng) {
  if (d < 2) throw ArgumentError("ln_jacobian_fd_error: d must be >= 2");
  if (points < 1) throw ArgumentError("ln_jacobian_fd_error: points must be >= 1");
  if (!(h > 0.0)) throw ArgumentError("ln_jacobian_fd_error: step must be > 0");
  double worst = 0.0;
  std::vector<double> x(d), xp(d), xm(d);
  for (std::size_t p = 0; p < points; ++p) {
    for (double& v : x) v = rng.normal();
    const Matrix j = ln_jacobian(x);
    for (std::size_t k = 0; k < d; ++k) {
      xp = x;
      xm = x;
      xp[k] += h;
      xm[k] -= h;
      const auto up = layer_norm(xp).out, down = layer_norm(xm).out;
      for (std::size_t i = 0; i < d; ++i)
        worst = std::max(worst, std::abs(j(i, k) - (up[i] - down[i]) / (2.0 * h)));
    }
  }
  return worst;
}

inline double check_lemma3(std::size_t d, std::size_t trials, Rng& rng) {
  if (trials < 100) throw ArgumentError("check_lemma3: trials must be >= 100");
  if (d < 2) throw ArgumentError("check_lemma3: d must be >= 2");
  double worst = 0.0;
  std::vector<double> x(d);
  for (std::size_t t = 0; t < trials; ++t) {
    for (;;) {
      for (double& v : x) v = rng.normal();
      try {
        worst = std::max(worst, ln_jacobian_ratio(x));
        break;
      } catch (const DegenerateInputError&) {
        // constant draw: resample
      }
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// (epsilon, delta)-boundedness
// ---------------------------------------------------------------------------
struct BoundedCheck {
  double epsilon = 0.0;
  double delta_bound = 0.0;
  std::size_t trials = 0;
  double empirical_mean = 0.0;
  double empirical_exceed_fraction = 0.0;
  double threshold = 0.0;  // delta_bound + 2 sqrt(delta_bound / trials)
  bool passed = false;
};

inline double binomial_slack(double delta, std::size_t trials) {
  return 2.0 * std::sqrt(delta / static_cast<double>(trials));
}

// Fraction of draws with (Z - mean) / mean > epsilon, the mean estimated from
// the same draws.
inline BoundedCheck check_concentration(const std::function<double()>& sampler, double epsilon,
                                        double delta_bound, std::size_t trials) {
  if (trials < 1000) throw ArgumentError("check_concentration: trials must be >= 1000");
  if (!(epsilon > 0.0)) throw ArgumentError("check_concentration: epsilon must be > 0");
  if (!(delta_bound > 0.0 && delta_bound < 1.0))
    throw ArgumentError("check_concentration: delta must be in (0, 1)");
  std::vector<double> z(trials);
  for (double& v : z) {
    v = sampler();
    if (!(v >= 0.0)) throw ArgumentError("check_concentration: sampler must yield Z >= 0");
  }
  BoundedCheck b;
  b.epsilon = epsilon;
  b.delta_bound = delta_bound;
  b.trials = trials;
  b.empirical_mean = pairwise_sum(z) / static_cast<double>(trials);
  if (!(b.empirical_mean > 0.0)) throw ArgumentError("check_concentration: zero empirical mean");
  std::size_t exceed = 0;
  for (double v : z) exceed += (v - b.empirical_mean) / b.empirical_mean > epsilon;
  b.empirical_exceed_fraction = static_cast<double>(exceed) / static_cast<double>(trials);
  b.threshold = delta_bound + binomial_slack(delta_bound, trials);
  b.passed = b.empirical_exceed_fraction <= b.threshold;
  return b;
}

// delta = exp(-d eps^2 / 8) for ||N(0, I_d)||^2.
inline double chi_square_delta(std::size_t d, double epsilon) {
  return std::exp(-static_cast<double>(d) * epsilon * epsilon / 8.0);
}

inline std::function<double()> chi_square_sampler(std::size_t d, Rng& rng) {
  return [d, &rng] {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double x = rng.normal();
      s += x * x;
    }
    return s;
  };
}

// Squared norm of one top-of-stack hidden state (x^{post,5}_L or x^{pre}_{L+1})
// of a freshly initialized theory-mode model, one model per draw.
inline std::function<double()> hidden_state_sampler(const ModelConfig& c, Rng& rng) {
  return [c, &rng] {
    const ModelParams p = init_model(c, rng);
    const ForwardTrace tr = forward_stack(gaussian_matrix(c.n, c.d, 1.0, rng), p, c);
    const Matrix& top = c.variant == Variant::PostLN ? tr.layers.back().x5 : *tr.final_pre_ln;
    return squared_norm(top.row(0));
  };
}

// ---------------------------------------------------------------------------
// Gradient statistics at initialization
// ---------------------------------------------------------------------------
// How targets are drawn for the random token batches: independent uniform
// tokens, or the cyclic next input token (a fixed function of the input).
enum class TargetRule { Uniform, NextToken };

inline std::string to_string(TargetRule r) { return r == TargetRule::Uniform ? "uniform" : "next"; }

struct GradStatsProtocol {
  TargetRule targets = TargetRule::NextToken;
  std::size_t seeds = 20;
  std::size_t batches = 5;
  std::size_t batch_size = 8;
  std::uint64_t base_seed = 1;
  std::size_t threads = default_threads();
};

inline std::vector<Sequence> random_token_batch(std::size_t batch_size, const ModelConfig& c,
                                                Rng& rng, TargetRule rule = TargetRule::Uniform) {
  std::vector<Sequence> out(batch_size);
  for (auto& s : out) {
    s.tokens.resize(c.n);
    s.targets.resize(c.n);
    for (auto& t : s.tokens) t = rng.uniform_index(c.vocab);
    if (rule == TargetRule::Uniform) {
      for (auto& t : s.targets) t = rng.uniform_index(c.vocab);
    } else {
      for (std::size_t i = 0; i < c.n; ++i) s.targets[i] = s.tokens[(i + 1) % c.n];
    }
  }
  return out;
}

// Expected gradient for one seed: fresh initialization, gradients averaged
// element-wise over `batches` random token batches. Initialization and data
// use separate streams, so every depth and variant sees the same tokens.
// If head_grad_norm is given it receives the batch mean of ||dL/dx||_F, x the
// stack output fed to the head.
inline GradBundle expected_gradient(const ModelConfig& c, const GradStatsProtocol& proto,
                                    std::size_t seed_index, double* head_grad_norm = nullptr) {
  const Rng root(proto.base_seed);
  Rng init_rng = root.fork(2 * seed_index);
  Rng data_rng = root.fork(2 * seed_index + 1);
  const ModelParams p = init_model(c, init_rng);
  GradBundle mean = zeros_like(p);
  double head = 0.0;
  for (std::size_t b = 0; b < proto.batches; ++b) {
    const auto batch = random_token_batch(proto.batch_size, c, data_rng, proto.targets);
    const LossGrad lg = loss_and_grad(batch, p, c);
    accumulate(mean, lg.grads);
    head += frobenius_norm(lg.d_head_input);
  }
  scale(mean, 1.0 / static_cast<double>(proto.batches));
  if (head_grad_norm) *head_grad_norm = head / static_cast<double>(proto.batches);
  return mean;
}

struct DepthSweepRow {
  std::size_t L = 0;
  Variant variant = Variant::PostLN;
  std::size_t d = 0;
  double mean_grad_norm = 0.0;
  double std = 0.0;
  std::size_t seeds = 0;
  double mean_head_grad_norm = 0.0;  // reported next to the bound, not tested
};

// ||dL/dW2|| of the last layer's FFN, per depth.
inline std::vector<DepthSweepRow> depth_sweep(std::span<const std::size_t> depths,
                                              const ModelConfig& tmpl,
                                              const GradStatsProtocol& proto) {
  if (depths.empty()) throw ArgumentError("depth_sweep: no depths");
  if (proto.seeds < 1 || proto.batches < 1 || proto.batch_size < 1)
    throw ArgumentError("depth_sweep: seeds, batches, batch_size must be >= 1");
  std::vector<DepthSweepRow> rows;
  for (std::size_t L : depths) {
    if (L < 1) throw ArgumentError("depth_sweep: depth must be >= 1");
    ModelConfig c = tmpl;
    c.L = L;
    c.validate();
    std::vector<double> norms(proto.seeds), head(proto.seeds);
    parallel_for(
        proto.seeds,
        [&](std::size_t s) {
          norms[s] = frobenius_norm(expected_gradient(c, proto, s, &head[s]).layers.back().w_2);
        },
        proto.threads);
    const SummaryStats st = summarize(norms);
    rows.push_back({L, c.variant, c.d, st.mean, st.stddev(), proto.seeds, summarize(head).mean});
  }
  return rows;
}

struct LayerProfileRow {
  std::size_t layer = 0;  // 1-based
  std::string matrix;     // "W1" or "W2"
  double mean_grad_norm = 0.0;
  double std = 0.0;
};

inline std::vector<LayerProfileRow> layer_profile(const ModelConfig& c,
                                                  const GradStatsProtocol& proto) {
  c.validate();
  if (c.L < 1) throw ArgumentError("layer_profile: L must be >= 1");
  std::vector<std::vector<double>> w1(c.L, std::vector<double>(proto.seeds)),
      w2(c.L, std::vector<double>(proto.seeds));
  parallel_for(
      proto.seeds,
      [&](std::size_t s) {
        const GradBundle g = expected_gradient(c, proto, s);
        for (std::size_t l = 0; l < c.L; ++l) {
          w1[l][s] = frobenius_norm(g.layers[l].w_1);
          w2[l][s] = frobenius_norm(g.layers[l].w_2);
        }
      },
      proto.threads);
  std::vector<LayerProfileRow> rows;
  for (std::size_t l = 0; l < c.L; ++l) {
    const SummaryStats s1 = summarize(w1[l]), s2 = summarize(w2[l]);
    rows.push_back({l + 1, "W1", s1.mean, s1.stddev()});
    rows.push_back({l + 1, "W2", s2.mean, s2.stddev()});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Trend statistics over per-layer / per-depth values
// ---------------------------------------------------------------------------

// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> ranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
  std::vector<double> r(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ArgumentError("pearson: need >= 2 paired values");
  const SummaryStats sa = summarize(a), sb = summarize(b);
  if (sa.variance == 0.0 || sb.variance == 0.0) return 0.0;
  double cov = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) cov += (a[i] - sa.mean) * (b[i] - sb.mean);
  cov /= static_cast<double>(a.size());
  return cov / std::sqrt(sa.variance * sb.variance);
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = ranks(a), rb = ranks(b);
  return pearson(ra, rb);
}

// Least-squares slope of y against x.
inline double ls_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ArgumentError("ls_slope: need >= 2 points");
  const SummaryStats sx = summarize(x), sy = summarize(y);
  if (sx.variance == 0.0) throw ArgumentError("ls_slope: constant x");
  double cov = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) cov += (x[i] - sx.mean) * (y[i] - sy.mean);
  return cov / static_cast<double>(x.size()) / sx.variance;
}

inline double coefficient_of_variation(std::span<const double> xs) {
  const SummaryStats s = summarize(xs);
  if (s.mean == 0.0) throw ArgumentError("coefficient_of_variation: zero mean");
  return s.stddev() / std::abs(s.mean);
}

// ---------------------------------------------------------------------------
// Verdicts
// ---------------------------------------------------------------------------
struct Verdict {
  std::string name;
  double value = 0.0;
  std::string comparison;  // e.g. "<", ">=", "in"
  double lower = 0.0;
  double upper = 0.0;
  bool passed = false;
};

inline constexpr double kPostLnDepthRatioMax = 1.3;
inline constexpr double kPreLnSqrtLTolerance = 0.25;
inline constexpr double kPostLnSpearmanMin = 0.8;
inline constexpr double kPreLnFlatnessCvMax = 0.25;

// max/min of mean_grad_norm across depths.
inline Verdict post_ln_constancy(std::span<const DepthSweepRow> rows) {
  double lo = rows.front().mean_grad_norm, hi = lo;
  for (const auto& r : rows) {
    lo = std::min(lo, r.mean_grad_norm);
    hi = std::max(hi, r.mean_grad_norm);
  }
  Verdict v{"postln_depth_max_over_min", hi / lo, "<", 0.0, kPostLnDepthRatioMax, false};
  v.passed = v.value < v.upper;
  return v;
}

// Largest relative deviation of mean_grad_norm * sqrt(L) from its depth average.
inline Verdict pre_ln_sqrt_scaling(std::span<const DepthSweepRow> rows) {
  std::vector<double> scaled;
  for (const auto& r : rows) scaled.push_back(r.mean_grad_norm * std::sqrt(static_cast<double>(r.L)));
  const double avg = summarize(scaled).mean;
  double worst = 0.0;
  for (double s : scaled) worst = std::max(worst, std::abs(s - avg) / avg);
  Verdict v{"preln_sqrtL_max_rel_dev", worst, "<=", 0.0, kPreLnSqrtLTolerance, false};
  v.passed = v.value <= v.upper;
  return v;
}

inline std::vector<double> profile_series(std::span<const LayerProfileRow> rows,
                                          const std::string& matrix) {
  std::vector<double> out;
  for (const auto& r : rows)
    if (r.matrix == matrix) out.push_back(r.mean_grad_norm);
  return out;
}

inline Verdict post_ln_increasing(std::span<const LayerProfileRow> rows) {
  const auto y = profile_series(rows, "W2");
  std::vector<double> x(y.size());
  std::iota(x.begin(), x.end(), 1.0);
  Verdict v{"postln_w2_spearman", spearman(x, y), ">=", kPostLnSpearmanMin, 1.0, false};
  v.passed = v.value >= v.lower;
  return v;
}

// Slope of ln(norm) against layer; mean-field prediction is ln(3/2)/2.
inline Verdict post_ln_log_slope(std::span<const LayerProfileRow> rows) {
  const auto y = profile_series(rows, "W2");
  std::vector<double> x(y.size()), ly(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    x[i] = static_cast<double>(i + 1);
    ly[i] = std::log(y[i]);
  }
  const double kappa = 0.5 * std::log(1.5);
  Verdict v{"postln_w2_log_slope", ls_slope(x, ly), "in", 0.5 * kappa, 2.0 * kappa, false};
  v.passed = v.value >= v.lower && v.value <= v.upper;
  return v;
}

inline Verdict pre_ln_flat(std::span<const LayerProfileRow> rows) {
  Verdict v{"preln_w2_cv", coefficient_of_variation(profile_series(rows, "W2")), "<", 0.0,
            kPreLnFlatnessCvMax, false};
  v.passed = v.value < v.upper;
  return v;
}

}  // namespace lnwarm
