#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lnwarm/numerics.hpp"

namespace lnwarm {

enum class Variant { PostLN, PreLN };
enum class AttentionMode { SimplifiedMean, FullSoftmax };

inline std::string to_string(Variant v) { return v == Variant::PostLN ? "post" : "pre"; }
inline std::string to_string(AttentionMode m) {
  return m == AttentionMode::SimplifiedMean ? "simplified" : "full";
}

// Raised when layer normalization sees a (numerically) constant vector.
// layer is 0-based (-1 for the final LN), step is the Table-1 step number.
class DegenerateInputError : public std::runtime_error {
 public:
  DegenerateInputError(int layer, int step, const std::string& what)
      : std::runtime_error(what), layer_(layer), step_(step) {}
  int layer() const { return layer_; }
  int step() const { return step_; }

 private:
  int layer_;
  int step_;
};

inline constexpr double kDegenerateSigma = 1e-12;

struct ModelConfig {
  std::size_t d = 64;
  std::size_t d_ff = 64;
  std::size_t L = 6;
  std::size_t n = 16;
  std::size_t H = 1;
  std::size_t d_k = 64;
  std::size_t d_v = 64;
  std::size_t vocab = 32;
  Variant variant = Variant::PostLN;
  AttentionMode attention_mode = AttentionMode::SimplifiedMean;
  bool theory_mode = true;
  // Softmax attention only looks at positions j <= i.
  bool causal = false;
  // Added under the square root of the LN variance; 0 makes constant input a hard error.
  double ln_epsilon = 0.0;
  // Per-entry variance of the word and the positional embedding tables.
  double embed_variance = 1.0 / 64.0;
  // x_0 = embed_scale * (word row + position row).
  double embed_scale = 4.0;
  std::uint64_t seed = 0;

  // Single head, d x d matrices, zero W_Q / W_K, simplified attention.
  // Tables are N(0, 1/d); embed_scale = sqrt(d/2) makes E||x_0||^2 = d.
  static ModelConfig theory(std::size_t d, std::size_t L, std::size_t n, std::size_t vocab,
                            Variant variant) {
    ModelConfig c;
    c.d = c.d_ff = c.d_k = c.d_v = d;
    c.L = L;
    c.n = n;
    c.vocab = vocab;
    c.H = 1;
    c.variant = variant;
    c.attention_mode = AttentionMode::SimplifiedMean;
    c.theory_mode = true;
    c.embed_variance = 1.0 / static_cast<double>(d);
    c.embed_scale = std::sqrt(static_cast<double>(d) / 2.0);
    return c;
  }

  // Multi-head softmax attention model used for training. Tied tables are
  // N(0, 1/(4d)), so initial logits have variance 1/4 and the loss starts near ln(vocab).
  static ModelConfig trainable(std::size_t d, std::size_t d_ff, std::size_t L, std::size_t n,
                               std::size_t H, std::size_t vocab, Variant variant) {
    ModelConfig c;
    c.d = d;
    c.d_ff = d_ff;
    c.L = L;
    c.n = n;
    c.H = H;
    c.d_k = c.d_v = d / H;
    c.vocab = vocab;
    c.variant = variant;
    c.attention_mode = AttentionMode::FullSoftmax;
    c.theory_mode = false;
    c.ln_epsilon = 1e-5;
    c.embed_variance = 1.0 / (4.0 * static_cast<double>(d));
    c.embed_scale = 1.0;
    return c;
  }

  // L = 0 is accepted here (an empty stack is a valid model); commands that
  // need layers check that themselves.
  void validate() const {
    if (d < 1 || n < 1 || vocab < 1 || H < 1 || d_ff < 1 || d_k < 1 || d_v < 1)
      throw ArgumentError("ModelConfig: d, d_ff, n, H, d_k, d_v, vocab must be >= 1");
    if (H > 1 && H * d_v != d) throw ArgumentError("ModelConfig: H * d_v must equal d");
    if (theory_mode && (H != 1 || d_ff != d || d_k != d || d_v != d ||
                        attention_mode != AttentionMode::SimplifiedMean))
      throw ArgumentError(
          "ModelConfig: theory_mode requires H=1, d_ff=d_k=d_v=d and simplified attention");
    if (causal && attention_mode != AttentionMode::FullSoftmax)
      throw ArgumentError("ModelConfig: causal masking needs softmax attention");
    if (!(ln_epsilon >= 0.0)) throw ArgumentError("ModelConfig: ln_epsilon must be >= 0");
    if (!(embed_variance > 0.0)) throw ArgumentError("ModelConfig: embed_variance must be > 0");
    if (!(embed_scale > 0.0)) throw ArgumentError("ModelConfig: embed_scale must be > 0");
  }
};

struct LayerParams {
  Matrix w_q, w_k, w_v;
  std::optional<Matrix> w_o;  // absent in theory mode (identity)
  Matrix w_1, b_1, w_2, b_2;
  Matrix ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

struct ModelParams {
  std::vector<LayerParams> layers;
  std::optional<Matrix> final_gamma, final_beta;  // Pre-LN only
  Matrix w_emb;    // vocab x d, tied with the output projection
  Matrix pos_emb;  // n x d
};

// Gradients share the parameter layout; every slot is the derivative of the
// scalar loss with respect to the same-named parameter.
using GradBundle = ModelParams;

enum class ParamKind {
  WQ, WK, WV, WO, W1, B1, W2, B2, Ln1Gamma, Ln1Beta, Ln2Gamma, Ln2Beta,
  FinalGamma, FinalBeta, WEmb, PosEmb
};

inline std::string to_string(ParamKind k) {
  switch (k) {
    case ParamKind::WQ: return "W_Q";
    case ParamKind::WK: return "W_K";
    case ParamKind::WV: return "W_V";
    case ParamKind::WO: return "W_O";
    case ParamKind::W1: return "W1";
    case ParamKind::B1: return "b1";
    case ParamKind::W2: return "W2";
    case ParamKind::B2: return "b2";
    case ParamKind::Ln1Gamma: return "ln1_gamma";
    case ParamKind::Ln1Beta: return "ln1_beta";
    case ParamKind::Ln2Gamma: return "ln2_gamma";
    case ParamKind::Ln2Beta: return "ln2_beta";
    case ParamKind::FinalGamma: return "final_ln_gamma";
    case ParamKind::FinalBeta: return "final_ln_beta";
    case ParamKind::WEmb: return "W_emb";
    case ParamKind::PosEmb: return "pos_emb";
  }
  return "?";
}

// Identifies one parameter tensor; layer is -1 for model-level tensors.
struct ParamId {
  int layer = -1;
  ParamKind kind = ParamKind::WEmb;
  bool operator==(const ParamId&) const = default;
};

// Visits every present parameter tensor in a fixed order.
template <class Params, class F>
void for_each_param(Params& p, F&& f) {
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& lp = p.layers[l];
    const int li = static_cast<int>(l);
    f(ParamId{li, ParamKind::WQ}, lp.w_q);
    f(ParamId{li, ParamKind::WK}, lp.w_k);
    f(ParamId{li, ParamKind::WV}, lp.w_v);
    if (lp.w_o) f(ParamId{li, ParamKind::WO}, *lp.w_o);
    f(ParamId{li, ParamKind::W1}, lp.w_1);
    f(ParamId{li, ParamKind::B1}, lp.b_1);
    f(ParamId{li, ParamKind::W2}, lp.w_2);
    f(ParamId{li, ParamKind::B2}, lp.b_2);
    f(ParamId{li, ParamKind::Ln1Gamma}, lp.ln1_gamma);
    f(ParamId{li, ParamKind::Ln1Beta}, lp.ln1_beta);
    f(ParamId{li, ParamKind::Ln2Gamma}, lp.ln2_gamma);
    f(ParamId{li, ParamKind::Ln2Beta}, lp.ln2_beta);
  }
  if (p.final_gamma) f(ParamId{-1, ParamKind::FinalGamma}, *p.final_gamma);
  if (p.final_beta) f(ParamId{-1, ParamKind::FinalBeta}, *p.final_beta);
  f(ParamId{-1, ParamKind::WEmb}, p.w_emb);
  f(ParamId{-1, ParamKind::PosEmb}, p.pos_emb);
}

// Two bundles with the same layout, visited in lockstep.
template <class A, class B, class F>
void for_each_param_pair(A& a, B& b, F&& f) {
  std::vector<decltype(&b.w_emb)> bs;
  for_each_param(b, [&](ParamId, auto& m) { bs.push_back(&m); });
  std::size_t i = 0;
  for_each_param(a, [&](ParamId id, auto& m) {
    if (i >= bs.size() || !bs[i]->same_shape(m)) throw ShapeError("parameter layouts differ");
    f(id, m, *bs[i++]);
  });
  if (i != bs.size()) throw ShapeError("parameter layouts differ");
}

template <class Params>
auto* find_param(Params& p, ParamId id) {
  decltype(&p.w_emb) out = nullptr;
  for_each_param(p, [&](ParamId pid, auto& m) {
    if (pid == id) out = &m;
  });
  return out;
}

inline LayerParams init_layer(const ModelConfig& c, Rng& rng) {
  LayerParams p;
  const std::size_t qk = c.H * c.d_k;
  const std::size_t v = c.H * c.d_v;
  if (c.theory_mode) {
    p.w_q = Matrix(c.d, qk);
    p.w_k = Matrix(c.d, qk);
  } else {
    p.w_q = xavier_init(c.d, qk, rng);
    p.w_k = xavier_init(c.d, qk, rng);
  }
  p.w_v = xavier_init(c.d, v, rng);
  if (!c.theory_mode) p.w_o = xavier_init(v, c.d, rng);
  p.w_1 = xavier_init(c.d, c.d_ff, rng);
  p.b_1 = Matrix(1, c.d_ff);
  p.w_2 = xavier_init(c.d_ff, c.d, rng);
  p.b_2 = Matrix(1, c.d);
  p.ln1_gamma = Matrix(1, c.d, 1.0);
  p.ln1_beta = Matrix(1, c.d);
  p.ln2_gamma = Matrix(1, c.d, 1.0);
  p.ln2_beta = Matrix(1, c.d);
  return p;
}

inline ModelParams init_model(const ModelConfig& c, Rng& rng) {
  c.validate();
  ModelParams p;
  p.w_emb = gaussian_matrix(c.vocab, c.d, c.embed_variance, rng);
  p.pos_emb = gaussian_matrix(c.n, c.d, c.embed_variance, rng);
  p.layers.reserve(c.L);
  for (std::size_t l = 0; l < c.L; ++l) p.layers.push_back(init_layer(c, rng));
  if (c.variant == Variant::PreLN) {
    p.final_gamma = Matrix(1, c.d, 1.0);
    p.final_beta = Matrix(1, c.d);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------
struct LayerNormResult {
  std::vector<double> out;
  double mu = 0.0;
  double sigma = 0.0;
};

inline LayerNormResult layer_norm(std::span<const double> v, std::span<const double> gamma,
                                  std::span<const double> beta, double epsilon = 0.0) {
  const std::size_t d = v.size();
  if (d < 2) throw ArgumentError("layer_norm: d must be >= 2");
  if (gamma.size() != d || beta.size() != d) throw ShapeError("layer_norm: gamma/beta length");
  LayerNormResult r;
  for (double x : v) r.mu += x;
  r.mu /= static_cast<double>(d);
  double var = 0.0;
  for (double x : v) var += (x - r.mu) * (x - r.mu);
  var /= static_cast<double>(d);
  r.sigma = std::sqrt(var + epsilon);
  if (epsilon == 0.0 && r.sigma < kDegenerateSigma)
    throw DegenerateInputError(-1, 0, "layer_norm: constant input");
  r.out.resize(d);
  for (std::size_t k = 0; k < d; ++k) r.out[k] = gamma[k] * (v[k] - r.mu) / r.sigma + beta[k];
  return r;
}

// gamma = 1, beta = 0 convenience overload.
inline LayerNormResult layer_norm(std::span<const double> v) {
  const std::vector<double> ones(v.size(), 1.0), zeros(v.size(), 0.0);
  return layer_norm(v, ones, zeros);
}

// Jacobian of the gamma=1, beta=0 layer norm at v:
//   sqrt(d)/||y|| * (I - y^T y/||y||^2) * (I - 1^T 1/d),  y = v - mean(v).
inline Matrix ln_jacobian(std::span<const double> v) {
  const std::size_t d = v.size();
  if (d < 2) throw ArgumentError("ln_jacobian: d must be >= 2");
  double mu = 0.0;
  for (double x : v) mu += x;
  mu /= static_cast<double>(d);
  std::vector<double> y(d);
  for (std::size_t k = 0; k < d; ++k) y[k] = v[k] - mu;
  const double ynorm2 = squared_norm(y);
  const double ynorm = std::sqrt(ynorm2);
  if (ynorm / std::sqrt(static_cast<double>(d)) < kDegenerateSigma)
    throw DegenerateInputError(-1, 0, "ln_jacobian: constant input");

  Matrix radial = Matrix::identity(d);
  Matrix centering = Matrix::identity(d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      radial(i, j) -= y[i] * y[j] / ynorm2;
      centering(i, j) -= 1.0 / static_cast<double>(d);
    }
  return matmul(radial, centering) * (std::sqrt(static_cast<double>(d)) / ynorm);
}

// Row-wise layer norm over a matrix, with everything backprop needs.
struct LnCache {
  Matrix normalized;           // (x - mu) / sigma, before gamma / beta
  std::vector<double> mean;    // per row
  std::vector<double> sigma;   // per row
};

inline Matrix layer_norm_rows(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                              double epsilon, LnCache& cache, int layer, int step) {
  const std::size_t d = x.cols();
  if (gamma.size() != d || beta.size() != d) throw ShapeError("layer_norm_rows: gamma/beta");
  if (d < 2) throw ArgumentError("layer_norm_rows: d must be >= 2");
  cache.normalized = Matrix(x.rows(), d);
  cache.mean.assign(x.rows(), 0.0);
  cache.sigma.assign(x.rows(), 0.0);
  Matrix out(x.rows(), d);
  const double inv_d = 1.0 / static_cast<double>(d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu *= inv_d;
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var *= inv_d;
    const double sigma = std::sqrt(var + epsilon);
    if (epsilon == 0.0 && sigma < kDegenerateSigma)
      throw DegenerateInputError(layer, step,
                                 "layer norm input is constant (layer " + std::to_string(layer) +
                                     ", step " + std::to_string(step) + ")");
    cache.mean[i] = mu;
    cache.sigma[i] = sigma;
    for (std::size_t k = 0; k < d; ++k) {
      const double z = (row[k] - mu) / sigma;
      cache.normalized(i, k) = z;
      out(i, k) = gamma[k] * z + beta[k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feed-forward sub-layer
// ---------------------------------------------------------------------------
inline void add_row_bias(Matrix& m, const Matrix& bias) {
  if (bias.size() != m.cols()) throw ShapeError("bias length mismatch");
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

inline Matrix relu(Matrix m) {
  for (double& x : m.values()) x = x > 0.0 ? x : 0.0;
  return m;
}

// ReLU(h W1 + b1) W2 + b2, applied to every row of h.
inline Matrix ffn(const Matrix& h, const Matrix& w_1, const Matrix& b_1, const Matrix& w_2,
                  const Matrix& b_2) {
  Matrix pre = matmul(h, w_1);
  add_row_bias(pre, b_1);
  Matrix out = matmul(relu(std::move(pre)), w_2);
  add_row_bias(out, b_2);
  return out;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------
struct AttentionCache {
  Matrix q, k, v;              // rows x H*d_k (q, k) and rows x H*d_v (v)
  std::vector<Matrix> probs;   // per (block, head), seq_len x seq_len
  Matrix concat;               // rows x H*d_v, before W_O
};

inline void softmax_rows(Matrix& s) {
  for (std::size_t i = 0; i < s.rows(); ++i) {
    auto r = s.row(i);
    double mx = r[0];
    for (double x : r) mx = std::max(mx, x);
    double z = 0.0;
    for (double& x : r) {
      x = std::exp(x - mx);
      z += x;
    }
    for (double& x : r) x /= z;
  }
}

// Rows of X may hold several sequences stacked in blocks of seq_len rows;
// attention never crosses a block. seq_len = 0 means one block.
inline std::size_t block_length(const Matrix& x, std::size_t seq_len) {
  if (seq_len == 0) return x.rows();
  if (x.rows() % seq_len != 0) throw ShapeError("rows are not a whole number of sequences");
  return seq_len;
}

inline Matrix attention_full(const Matrix& x, const LayerParams& p, const ModelConfig& c,
                             AttentionCache* cache = nullptr, std::size_t seq_len = 0) {
  if (x.cols() != c.d) throw ShapeError("attention_full: X must have d columns");
  if (p.w_q.rows() != c.d || p.w_q.cols() != c.H * c.d_k || !p.w_k.same_shape(p.w_q) ||
      p.w_v.rows() != c.d || p.w_v.cols() != c.H * c.d_v)
    throw ShapeError("attention_full: projection shapes");
  const std::size_t n = block_length(x, seq_len);
  const std::size_t blocks = x.rows() / n;
  AttentionCache local;
  AttentionCache& ac = cache ? *cache : local;
  ac.q = matmul(x, p.w_q);
  ac.k = matmul(x, p.w_k);
  ac.v = matmul(x, p.w_v);
  ac.probs.assign(blocks * c.H, Matrix(n, n));
  ac.concat = Matrix(x.rows(), c.H * c.d_v);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_k));
  const auto q = detail::view(std::as_const(ac.q));
  const auto k = detail::view(std::as_const(ac.k));
  const auto v = detail::view(std::as_const(ac.v));
  auto out = detail::view(ac.concat);
  for (std::size_t b = 0; b < blocks; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b * n);
    const auto nn = static_cast<Eigen::Index>(n);
    for (std::size_t h = 0; h < c.H; ++h) {
      Matrix& s = ac.probs[b * c.H + h];
      const auto ko = static_cast<Eigen::Index>(h * c.d_k), vo = static_cast<Eigen::Index>(h * c.d_v);
      const auto dk = static_cast<Eigen::Index>(c.d_k), dv = static_cast<Eigen::Index>(c.d_v);
      detail::view(s).noalias() = q.block(r0, ko, nn, dk) * k.block(r0, ko, nn, dk).transpose();
      s *= scale;
      if (c.causal)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = i + 1; j < n; ++j) s(i, j) = -std::numeric_limits<double>::infinity();
      softmax_rows(s);
      out.block(r0, vo, nn, dv).noalias() = detail::view(std::as_const(s)) * v.block(r0, vo, nn, dv);
    }
  }
  if (p.w_o) {
    if (p.w_o->rows() != c.H * c.d_v || p.w_o->cols() != c.d)
      throw ShapeError("attention_full: W_O shape");
    return matmul(ac.concat, *p.w_o);
  }
  if (c.H * c.d_v != c.d) throw ShapeError("attention_full: W_O required when H*d_v != d");
  return ac.concat;
}

// Uniform attention: every output row is mean(X) * W_V, the mean taken over
// the row's own sequence block.
inline Matrix attention_simplified(const Matrix& x, const Matrix& w_v, std::size_t seq_len = 0) {
  if (x.cols() != w_v.rows()) throw ShapeError("attention_simplified: X / W_V shapes");
  const std::size_t n = block_length(x, seq_len);
  Matrix out(x.rows(), w_v.cols());
  for (std::size_t r0 = 0; r0 < x.rows(); r0 += n) {
    Matrix mean(1, x.cols());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < x.cols(); ++k) mean[k] += x(r0 + i, k);
    mean *= 1.0 / static_cast<double>(n);
    const Matrix row = matmul(mean, w_v);
    for (std::size_t i = 0; i < n; ++i)
      std::copy(row.values().begin(), row.values().end(), out.row(r0 + i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer composition
// ---------------------------------------------------------------------------

// Post-LN:  x1 = Att(x)   x2 = x + x1   x3 = LN(x2)   x4 = FFN(x3)   x5 = x3 + x4   out = LN(x5)
// Pre-LN:   x1 = LN(x)    x2 = Att(x1)  x3 = x + x2   x4 = LN(x3)    x5 = FFN(x4)   out = x3 + x5
struct LayerTrace {
  std::size_t seq_len = 0;  // rows per sequence block
  Matrix x_in, x1, x2, x3, x4, x5, out;
  LnCache ln1, ln2;
  AttentionCache attn;
  Matrix ffn_pre;  // pre-activation of the inner FFN layer
  Matrix ffn_act;  // ReLU of ffn_pre
};

namespace detail {

inline Matrix run_attention(const Matrix& x, const LayerParams& p, const ModelConfig& c,
                            AttentionCache& cache, std::size_t seq_len) {
  if (c.attention_mode == AttentionMode::FullSoftmax)
    return attention_full(x, p, c, &cache, seq_len);
  if (p.w_o) return matmul(attention_simplified(x, p.w_v, seq_len), *p.w_o);
  return attention_simplified(x, p.w_v, seq_len);
}

inline Matrix run_ffn(const Matrix& x, const LayerParams& p, LayerTrace& t) {
  t.ffn_pre = matmul(x, p.w_1);
  add_row_bias(t.ffn_pre, p.b_1);
  t.ffn_act = relu(t.ffn_pre);
  Matrix out = matmul(t.ffn_act, p.w_2);
  add_row_bias(out, p.b_2);
  return out;
}

}  // namespace detail

inline LayerTrace forward_layer(const Matrix& x, const LayerParams& p, const ModelConfig& c,
                                int layer_index = 0, std::size_t seq_len = 0) {
  if (x.cols() != c.d) throw ShapeError("forward_layer: X must have d columns");
  LayerTrace t;
  t.seq_len = block_length(x, seq_len);
  t.x_in = x;
  if (c.variant == Variant::PostLN) {
    t.x1 = detail::run_attention(x, p, c, t.attn, t.seq_len);
    t.x2 = x + t.x1;
    t.x3 = layer_norm_rows(t.x2, p.ln1_gamma, p.ln1_beta, c.ln_epsilon, t.ln1, layer_index, 3);
    t.x4 = detail::run_ffn(t.x3, p, t);
    t.x5 = t.x3 + t.x4;
    t.out = layer_norm_rows(t.x5, p.ln2_gamma, p.ln2_beta, c.ln_epsilon, t.ln2, layer_index, 6);
  } else {
    t.x1 = layer_norm_rows(x, p.ln1_gamma, p.ln1_beta, c.ln_epsilon, t.ln1, layer_index, 1);
    t.x2 = detail::run_attention(t.x1, p, c, t.attn, t.seq_len);
    t.x3 = x + t.x2;
    t.x4 = layer_norm_rows(t.x3, p.ln2_gamma, p.ln2_beta, c.ln_epsilon, t.ln2, layer_index, 4);
    t.x5 = detail::run_ffn(t.x4, p, t);
    t.out = t.x3 + t.x5;
  }
  return t;
}

struct ForwardTrace {
  Matrix x0;                       // embedding (word + position)
  std::vector<LayerTrace> layers;
  std::optional<Matrix> final_pre_ln, final_out;  // Pre-LN only
  LnCache final_ln;

  // Input of the head: the last layer output, or the final LN output.
  const Matrix& top() const {
    if (final_out) return *final_out;
    return layers.empty() ? x0 : layers.back().out;
  }
};

// Runs the layer stack on an already-embedded input.
inline ForwardTrace forward_stack(const Matrix& x0, const ModelParams& p, const ModelConfig& c,
                                  std::size_t seq_len = 0) {
  if (p.layers.size() != c.L) throw ShapeError("forward_stack: layer count != L");
  ForwardTrace tr;
  tr.x0 = x0;
  tr.layers.reserve(c.L);
  const Matrix* cur = &tr.x0;
  for (std::size_t l = 0; l < c.L; ++l) {
    tr.layers.push_back(forward_layer(*cur, p.layers[l], c, static_cast<int>(l), seq_len));
    cur = &tr.layers.back().out;
  }
  if (c.variant == Variant::PreLN) {
    if (!p.final_gamma || !p.final_beta) throw ShapeError("forward_stack: Pre-LN needs final LN");
    tr.final_pre_ln = *cur;
    tr.final_out = layer_norm_rows(*tr.final_pre_ln, *p.final_gamma, *p.final_beta, c.ln_epsilon,
                                   tr.final_ln, -1, 7);
  }
  return tr;
}

inline Matrix embed(std::span<const std::size_t> tokens, const ModelParams& p,
                    const ModelConfig& c) {
  if (tokens.empty()) throw ArgumentError("embed: empty token sequence");
  if (tokens.size() > p.pos_emb.rows()) throw ArgumentError("embed: sequence longer than n");
  Matrix x(tokens.size(), c.d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= c.vocab) throw ArgumentError("embed: token index out of range");
    for (std::size_t k = 0; k < c.d; ++k) x(i, k) = c.embed_scale * (p.w_emb(tokens[i], k) + p.pos_emb(i, k));
  }
  return x;
}

struct ModelForward {
  Matrix logits;  // n x vocab
  ForwardTrace trace;
};

inline ModelForward forward_model(std::span<const std::size_t> tokens, const ModelParams& p,
                                  const ModelConfig& c) {
  ModelForward f;
  f.trace = forward_stack(embed(tokens, p, c), p, c);
  f.logits = matmul_nt(f.trace.top(), p.w_emb);
  return f;
}

}  // namespace lnwarm
