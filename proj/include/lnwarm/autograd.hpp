#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lnwarm/layers.hpp"
#include "lnwarm/numerics.hpp"

namespace lnwarm {

// One training example: targets[i] is the token to predict at position i.
struct Sequence {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> targets;
};

inline GradBundle zeros_like(const ModelParams& p) {
  GradBundle g = p;
  for_each_param(g, [](ParamId, Matrix& m) { m.fill(0.0); });
  return g;
}

inline void accumulate(GradBundle& into, const GradBundle& from) {
  for_each_param_pair(into, from, [](ParamId, Matrix& a, const Matrix& b) { a += b; });
}

inline void scale(GradBundle& g, double s) {
  for_each_param(g, [s](ParamId, Matrix& m) { m *= s; });
}

inline bool all_finite(const GradBundle& g) {
  bool ok = true;
  for_each_param(g, [&](ParamId, const Matrix& m) { ok = ok && m.all_finite(); });
  return ok;
}

// Frobenius norm of the concatenation of every gradient tensor.
inline double global_norm(const GradBundle& g) {
  std::vector<double> parts;
  for_each_param(g, [&](ParamId, const Matrix& m) { parts.push_back(squared_norm(m.values())); });
  return std::sqrt(pairwise_sum(parts));
}

// ---------------------------------------------------------------------------
// Backward pieces
// ---------------------------------------------------------------------------
namespace detail {

inline void add_column_sums(Matrix& bias_grad, const Matrix& g) {
  for (std::size_t i = 0; i < g.rows(); ++i) {
    const auto r = g.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) bias_grad[j] += r[j];
  }
}

// Backward through out = gamma * z + beta, z = LN(x). Each row applies the
// transposed layer-norm Jacobian (1/sigma) (I - z z^T/d)(I - 1 1^T/d); it is
// symmetric and the two projections commute because z is centred.
inline Matrix layer_norm_backward(const Matrix& d_out, const LnCache& cache, const Matrix& gamma,
                                  Matrix& d_gamma, Matrix& d_beta) {
  const std::size_t d = d_out.cols();
  const double inv_d = 1.0 / static_cast<double>(d);
  Matrix dx(d_out.rows(), d);
  std::vector<double> g(d);
  for (std::size_t i = 0; i < d_out.rows(); ++i) {
    const auto z = cache.normalized.row(i);
    const auto dy = d_out.row(i);
    for (std::size_t k = 0; k < d; ++k) {
      d_gamma[k] += dy[k] * z[k];
      d_beta[k] += dy[k];
      g[k] = dy[k] * gamma[k];
    }
    double g_mean = 0.0, gz_mean = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      g_mean += g[k];
      gz_mean += g[k] * z[k];
    }
    g_mean *= inv_d;
    gz_mean *= inv_d;
    const double inv_sigma = 1.0 / cache.sigma[i];
    auto out = dx.row(i);
    for (std::size_t k = 0; k < d; ++k) out[k] = inv_sigma * (g[k] - g_mean - z[k] * gz_mean);
  }
  return dx;
}

// Returns d(loss)/d(input of the FFN); fills W1, b1, W2, b2 gradients.
inline Matrix ffn_backward(const Matrix& d_out, const Matrix& x, const LayerTrace& t,
                           const LayerParams& p, LayerParams& g) {
  g.w_2 += matmul_tn(t.ffn_act, d_out);
  add_column_sums(g.b_2, d_out);
  Matrix d_pre = matmul_nt(d_out, p.w_2);
  for (std::size_t i = 0; i < d_pre.size(); ++i)
    if (!(t.ffn_pre[i] > 0.0)) d_pre[i] = 0.0;  // ReLU'(0) := 0
  g.w_1 += matmul_tn(x, d_pre);
  add_column_sums(g.b_1, d_pre);
  return matmul_nt(d_pre, p.w_1);
}

inline Matrix attention_simplified_backward(const Matrix& d_out, const Matrix& x,
                                            const LayerParams& p, std::size_t seq_len,
                                            LayerParams& g) {
  const std::size_t n = seq_len;
  const std::size_t blocks = x.rows() / n;
  // Per block the output row is r = mean * W_V (* W_O); collect the block
  // means and the column sums of the upstream gradient.
  Matrix means(blocks, x.cols());
  Matrix d_rows(blocks, d_out.cols());
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const auto xr = x.row(b * n + i);
      const auto gr = d_out.row(b * n + i);
      for (std::size_t k = 0; k < xr.size(); ++k) means(b, k) += xr[k];
      for (std::size_t k = 0; k < gr.size(); ++k) d_rows(b, k) += gr[k];
    }
  means *= 1.0 / static_cast<double>(n);
  if (p.w_o) {
    const Matrix pre = matmul(means, p.w_v);
    *g.w_o += matmul_tn(pre, d_rows);
    d_rows = matmul_nt(d_rows, *p.w_o);
  }
  g.w_v += matmul_tn(means, d_rows);
  Matrix d_mean = matmul_nt(d_rows, p.w_v);
  d_mean *= 1.0 / static_cast<double>(n);
  Matrix dx(x.rows(), x.cols());
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const auto src = d_mean.row(b);
      std::copy(src.begin(), src.end(), dx.row(b * n + i).begin());
    }
  return dx;
}

inline Matrix attention_full_backward(const Matrix& d_out, const Matrix& x,
                                      const AttentionCache& ac, const LayerParams& p,
                                      const ModelConfig& c, std::size_t seq_len, LayerParams& g) {
  const std::size_t n = seq_len;
  const std::size_t blocks = x.rows() / n;
  Matrix d_concat = d_out;
  if (p.w_o) {
    *g.w_o += matmul_tn(ac.concat, d_out);
    d_concat = matmul_nt(d_out, *p.w_o);
  }
  Matrix dq(x.rows(), c.H * c.d_k), dk(x.rows(), c.H * c.d_k), dv(x.rows(), c.H * c.d_v);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_k));
  const auto q = view(ac.q);
  const auto k = view(ac.k);
  const auto v = view(ac.v);
  const auto gc = view(std::as_const(d_concat));
  auto vdq = view(dq);
  auto vdk = view(dk);
  auto vdv = view(dv);
  Matrix ds(n, n);
  const auto nn = static_cast<Eigen::Index>(n);
  const auto dkw = static_cast<Eigen::Index>(c.d_k), dvw = static_cast<Eigen::Index>(c.d_v);
  for (std::size_t b = 0; b < blocks; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b * n);
    for (std::size_t h = 0; h < c.H; ++h) {
      const Matrix& prob = ac.probs[b * c.H + h];
      const auto pv = view(prob);
      const auto ko = static_cast<Eigen::Index>(h * c.d_k), vo = static_cast<Eigen::Index>(h * c.d_v);
      const auto g_blk = gc.block(r0, vo, nn, dvw);
      view(ds).noalias() = g_blk * v.block(r0, vo, nn, dvw).transpose();  // dP
      vdv.block(r0, vo, nn, dvw).noalias() += pv.transpose() * g_blk;
      // Softmax backward, then the 1/sqrt(d_k) scale.
      for (std::size_t i = 0; i < n; ++i) {
        const auto pr = prob.row(i);
        auto dr = ds.row(i);
        double rowdot = 0.0;
        for (std::size_t j = 0; j < n; ++j) rowdot += dr[j] * pr[j];
        for (std::size_t j = 0; j < n; ++j) dr[j] = pr[j] * (dr[j] - rowdot) * scale;
      }
      const auto dsv = view(std::as_const(ds));
      vdq.block(r0, ko, nn, dkw).noalias() += dsv * k.block(r0, ko, nn, dkw);
      vdk.block(r0, ko, nn, dkw).noalias() += dsv.transpose() * q.block(r0, ko, nn, dkw);
    }
  }
  g.w_q += matmul_tn(x, dq);
  g.w_k += matmul_tn(x, dk);
  g.w_v += matmul_tn(x, dv);
  Matrix dx = matmul_nt(dq, p.w_q);
  dx += matmul_nt(dk, p.w_k);
  dx += matmul_nt(dv, p.w_v);
  return dx;
}

inline Matrix attention_backward(const Matrix& d_out, const Matrix& x, const LayerTrace& t,
                                 const LayerParams& p, const ModelConfig& c, LayerParams& g) {
  const std::size_t n = t.seq_len == 0 ? x.rows() : t.seq_len;
  if (c.attention_mode == AttentionMode::FullSoftmax)
    return attention_full_backward(d_out, x, t.attn, p, c, n, g);
  return attention_simplified_backward(d_out, x, p, n, g);
}

}  // namespace detail

// Backward through one layer given d(loss)/d(out). Accumulates parameter
// gradients into g and returns d(loss)/d(x_in).
inline Matrix backward_layer(const Matrix& d_out, const LayerTrace& t, const LayerParams& p,
                             const ModelConfig& c, LayerParams& g) {
  if (c.variant == Variant::PostLN) {
    const Matrix d5 = detail::layer_norm_backward(d_out, t.ln2, p.ln2_gamma, g.ln2_gamma, g.ln2_beta);
    Matrix d3 = d5;
    d3 += detail::ffn_backward(d5, t.x3, t, p, g);
    const Matrix d2 = detail::layer_norm_backward(d3, t.ln1, p.ln1_gamma, g.ln1_gamma, g.ln1_beta);
    Matrix dx = d2;
    dx += detail::attention_backward(d2, t.x_in, t, p, c, g);
    return dx;
  }
  Matrix d3 = d_out;
  const Matrix d4 = detail::ffn_backward(d_out, t.x4, t, p, g);
  d3 += detail::layer_norm_backward(d4, t.ln2, p.ln2_gamma, g.ln2_gamma, g.ln2_beta);
  const Matrix d1 = detail::attention_backward(d3, t.x1, t, p, c, g);
  Matrix dx = d3;
  dx += detail::layer_norm_backward(d1, t.ln1, p.ln1_gamma, g.ln1_gamma, g.ln1_beta);
  return dx;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean next-token cross entropy over positions, and d(loss)/d(logits).
inline double cross_entropy(const Matrix& logits, std::span<const std::size_t> targets,
                            Matrix* d_logits = nullptr) {
  if (targets.size() != logits.rows()) throw ArgumentError("cross_entropy: targets length != n");
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  if (d_logits) *d_logits = Matrix(logits.rows(), logits.cols());
  std::vector<double> terms(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (targets[i] >= logits.cols()) throw ArgumentError("cross_entropy: target out of range");
    const auto r = logits.row(i);
    double mx = r[0];
    for (double x : r) mx = std::max(mx, x);
    double z = 0.0;
    for (double x : r) z += std::exp(x - mx);
    const double log_z = mx + std::log(z);
    terms[i] = log_z - r[targets[i]];
    if (d_logits) {
      auto dr = d_logits->row(i);
      for (std::size_t j = 0; j < r.size(); ++j) dr[j] = std::exp(r[j] - log_z) * inv_n;
      dr[targets[i]] -= inv_n;
    }
  }
  return pairwise_sum(terms) * inv_n;
}

struct SequenceGrad {
  double loss = 0.0;
  GradBundle grads;
  Matrix d_x0;  // d(loss)/d(embedding output)
};

inline SequenceGrad sequence_loss_and_grad(const Sequence& s, const ModelParams& p,
                                           const ModelConfig& c) {
  if (s.tokens.size() != s.targets.size()) throw ArgumentError("sequence: tokens/targets length");
  const ModelForward f = forward_model(s.tokens, p, c);
  SequenceGrad out;
  Matrix d_logits;
  out.loss = cross_entropy(f.logits, s.targets, &d_logits);
  out.grads = zeros_like(p);
  GradBundle& g = out.grads;

  // logits = top * W_emb^T
  g.w_emb += matmul_tn(d_logits, f.trace.top());
  Matrix d_top = matmul(d_logits, p.w_emb);

  if (c.variant == Variant::PreLN)
    d_top = detail::layer_norm_backward(d_top, f.trace.final_ln, *p.final_gamma, *g.final_gamma,
                                        *g.final_beta);
  for (std::size_t l = c.L; l-- > 0;)
    d_top = backward_layer(d_top, f.trace.layers[l], p.layers[l], c, g.layers[l]);

  for (std::size_t i = 0; i < s.tokens.size(); ++i)
    for (std::size_t k = 0; k < c.d; ++k) {
      g.w_emb(s.tokens[i], k) += c.embed_scale * d_top(i, k);
      g.pos_emb(i, k) += c.embed_scale * d_top(i, k);
    }
  out.d_x0 = std::move(d_top);
  return out;
}

struct LossGrad {
  double loss = 0.0;
  GradBundle grads;
  Matrix d_head_input;  // d(loss)/d(stack output fed to the tied head), rows stacked
};

namespace detail {

inline void check_batch(std::span<const Sequence> batch, const char* who) {
  if (batch.empty()) throw ArgumentError(std::string(who) + ": empty batch");
  const std::size_t n = batch.front().tokens.size();
  for (const Sequence& s : batch) {
    if (s.tokens.size() != s.targets.size())
      throw ArgumentError(std::string(who) + ": tokens/targets length");
    if (s.tokens.size() != n)
      throw ArgumentError(std::string(who) + ": sequences in a batch must share one length");
  }
}

// Embeds every sequence and stacks them into one (B*n) x d matrix.
inline Matrix embed_stacked(std::span<const Sequence> batch, const ModelParams& p,
                            const ModelConfig& c) {
  const std::size_t n = batch.front().tokens.size();
  Matrix x(batch.size() * n, c.d);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Matrix e = embed(batch[b].tokens, p, c);
    std::copy(e.values().begin(), e.values().end(), x.row(b * n).begin());
  }
  return x;
}

inline std::vector<std::size_t> stacked_targets(std::span<const Sequence> batch) {
  std::vector<std::size_t> t;
  for (const Sequence& s : batch) t.insert(t.end(), s.targets.begin(), s.targets.end());
  return t;
}

}  // namespace detail

// Mean loss over the batch and its exact gradient. All sequences share one
// length, so the mean over (sequence, position) equals the mean over
// sequences of per-sequence means; the batch runs as one stacked matrix and
// parameter gradients are summed inside the matmuls in a fixed row order.
inline LossGrad loss_and_grad(std::span<const Sequence> batch, const ModelParams& p,
                              const ModelConfig& c) {
  detail::check_batch(batch, "loss_and_grad");
  const std::size_t n = batch.front().tokens.size();
  const ForwardTrace tr = forward_stack(detail::embed_stacked(batch, p, c), p, c, n);
  const Matrix logits = matmul_nt(tr.top(), p.w_emb);
  Matrix d_logits;
  LossGrad out;
  out.loss = cross_entropy(logits, detail::stacked_targets(batch), &d_logits);
  out.grads = zeros_like(p);
  GradBundle& g = out.grads;

  // logits = top * W_emb^T
  g.w_emb += matmul_tn(d_logits, tr.top());
  Matrix d_top = matmul(d_logits, p.w_emb);
  out.d_head_input = d_top;
  if (c.variant == Variant::PreLN)
    d_top = detail::layer_norm_backward(d_top, tr.final_ln, *p.final_gamma, *g.final_gamma,
                                        *g.final_beta);
  for (std::size_t l = c.L; l-- > 0;)
    d_top = backward_layer(d_top, tr.layers[l], p.layers[l], c, g.layers[l]);

  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const auto dr = d_top.row(b * n + i);
      auto we = g.w_emb.row(batch[b].tokens[i]);
      auto pe = g.pos_emb.row(i);
      for (std::size_t k = 0; k < c.d; ++k) {
        we[k] += c.embed_scale * dr[k];
        pe[k] += c.embed_scale * dr[k];
      }
    }
  return out;
}

inline double batch_loss(std::span<const Sequence> batch, const ModelParams& p,
                         const ModelConfig& c) {
  detail::check_batch(batch, "batch_loss");
  const std::size_t n = batch.front().tokens.size();
  const ForwardTrace tr = forward_stack(detail::embed_stacked(batch, p, c), p, c, n);
  return cross_entropy(matmul_nt(tr.top(), p.w_emb), detail::stacked_targets(batch));
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

// (f(x + h) - f(x - h)) / 2h
template <class F>
double central_difference(F&& f, double x, double h) {
  if (!(h > 0.0)) throw ArgumentError("central_difference: step must be > 0");
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

struct ParamAddress {
  ParamId id;
  std::size_t index = 0;  // flat row-major index into the tensor
};

inline std::vector<ParamAddress> all_addresses(const ModelParams& p) {
  std::vector<ParamAddress> out;
  for_each_param(p, [&](ParamId id, const Matrix& m) {
    for (std::size_t i = 0; i < m.size(); ++i) out.push_back({id, i});
  });
  return out;
}

inline double& at(ModelParams& p, const ParamAddress& a) {
  Matrix* m = find_param(p, a.id);
  if (!m || a.index >= m->size()) throw ArgumentError("parameter address out of range");
  return (*m)[a.index];
}

inline double at(const GradBundle& g, const ParamAddress& a) {
  const Matrix* m = find_param(g, a.id);
  if (!m || a.index >= m->size()) throw ArgumentError("parameter address out of range");
  return (*m)[a.index];
}

inline double finite_diff_grad(std::span<const Sequence> batch, ModelParams params,
                               const ModelConfig& c, const ParamAddress& addr, double step) {
  double& w = at(params, addr);
  return central_difference(
      [&](double v) {
        w = v;
        return batch_loss(batch, params, c);
      },
      w, step);
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------
struct GradNormRow {
  int layer = -1;
  std::string matrix;
  double frobenius = 0.0;
};

inline std::vector<GradNormRow> grad_fro_norms(const GradBundle& g) {
  std::vector<GradNormRow> rows;
  for_each_param(g, [&](ParamId id, const Matrix& m) {
    rows.push_back({id.layer, to_string(id.kind), frobenius_norm(m)});
  });
  return rows;
}

}  // namespace lnwarm

namespace lnwarm {

// ---------------------------------------------------------------------------
// Gradient check against central differences on sampled coordinates.
// ---------------------------------------------------------------------------
struct GradCheckRow {
  ParamAddress address;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

// |a - f| / max(|a|, |f|, floor); the floor keeps near-zero coordinates from
// turning rounding noise into a relative blow-up.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline std::vector<GradCheckRow> gradient_check(std::span<const Sequence> batch,
                                                const ModelParams& params, const ModelConfig& c,
                                                std::size_t coordinates, Rng& rng) {
  const GradBundle g = loss_and_grad(batch, params, c).grads;
  const auto addresses = all_addresses(params);
  std::vector<GradCheckRow> rows;
  rows.reserve(coordinates);
  ModelParams probe = params;
  for (std::size_t k = 0; k < coordinates; ++k) {
    const ParamAddress a = addresses[rng.uniform_index(addresses.size())];
    const double w = at(probe, a);
    const double step = 1e-5 * std::max(1.0, std::abs(w));
    double& slot = at(probe, a);
    const double numeric = central_difference(
        [&](double v) {
          slot = v;
          return batch_loss(batch, probe, c);
        },
        w, step);
    slot = w;
    const double analytic = at(g, a);
    rows.push_back({a, analytic, numeric, relative_error(analytic, numeric)});
  }
  return rows;
}

}  // namespace lnwarm
