#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace lnwarm {

// Error kinds shared by every module.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace detail {

// Aligned storage whose resize() leaves doubles uninitialized; only product
// outputs, which are fully overwritten, rely on that.
template <class T>
struct StorageAllocator : Eigen::aligned_allocator<T> {
  template <class U>
  struct rebind {
    using other = StorageAllocator<U>;
  };
  StorageAllocator() = default;
  template <class U>
  StorageAllocator(const StorageAllocator<U>&) {}

  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix: row-major, 64-bit, always at least 1x1.
// ---------------------------------------------------------------------------
class Matrix {
 public:
  Matrix() : Matrix(1, 1) {}

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) {
      throw ShapeError("Matrix: rows and cols must be >= 1");
    }
  }

  Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    if (rows_ == 0 || cols_ == 0) throw ShapeError("Matrix: empty initializer");
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw ShapeError("Matrix: ragged initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  // Contents unspecified; the caller overwrites every entry.
  static Matrix uninitialized(std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) throw ShapeError("Matrix: rows and cols must be >= 1");
    Matrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_.resize(rows * cols);
    return m;
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix row_vector(std::span<const double> v) {
    Matrix m(1, v.size());
    std::copy(v.begin(), v.end(), m.data_.begin());
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  Matrix& operator+=(const Matrix& o) {
    require_same(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Matrix& operator-=(const Matrix& o) {
    require_same(o, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }

  Matrix& operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }

  bool operator==(const Matrix&) const = default;

 private:
  void require_same(const Matrix& o, const char* what) const {
    if (!same_shape(o)) throw ShapeError(std::string("Matrix::") + what + ": shape mismatch");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  // Fixed alignment keeps Eigen's vectorized paths (and so the rounding) identical
  // from one allocation to the next.
  std::vector<double, detail::StorageAllocator<double>> data_;
};

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// a * b
namespace detail {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const EigenRowMajor> view(const Matrix& m) {
  return {m.values().data(), static_cast<Eigen::Index>(m.rows()),
          static_cast<Eigen::Index>(m.cols())};
}

inline Eigen::Map<EigenRowMajor> view(Matrix& m) {
  return {m.values().data(), static_cast<Eigen::Index>(m.rows()),
          static_cast<Eigen::Index>(m.cols())};
}

}  // namespace detail

// Products go through Eigen's single-threaded GEMM. Its blocking depends only
// on the shapes, so results are bit-stable for a given build.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: a.cols != b.rows");
  Matrix c = Matrix::uninitialized(a.rows(), b.cols());
  detail::view(c).noalias() = detail::view(a) * detail::view(b);
  return c;
}

// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_tn: a.rows != b.rows");
  Matrix c = Matrix::uninitialized(a.cols(), b.cols());
  detail::view(c).noalias() = detail::view(a).transpose() * detail::view(b);
  return c;
}

// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: a.cols != b.cols");
  Matrix c = Matrix::uninitialized(a.rows(), b.rows());
  detail::view(c).noalias() = detail::view(a) * detail::view(b).transpose();
  return c;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> v) { return dot(v, v); }

inline double frobenius_norm(const Matrix& m) { return std::sqrt(squared_norm(m.values())); }

// Largest singular value by power iteration on m^T m. The start vector is
// deterministic so repeated calls agree bit for bit.
inline double spectral_norm(const Matrix& m, std::size_t iters = 1000, double tol = 1e-10) {
  if (iters < 1) throw ArgumentError("spectral_norm: iters must be >= 1");
  const std::size_t n = m.cols();
  std::vector<double> v(n), mv(m.rows()), w(n);
  for (std::size_t j = 0; j < n; ++j) v[j] = 1.0 + 0.1 * std::sin(1.0 + static_cast<double>(j));
  double vn = std::sqrt(squared_norm(v));
  for (double& x : v) x /= vn;

  double sigma2 = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < m.rows(); ++i) mv[i] = dot(m.row(i), v);
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      const auto ri = m.row(i);
      for (std::size_t j = 0; j < n; ++j) w[j] += ri[j] * mv[i];
    }
    const double next = dot(v, w);  // Rayleigh quotient of m^T m
    const double wn = std::sqrt(squared_norm(w));
    if (wn == 0.0) return 0.0;
    for (std::size_t j = 0; j < n; ++j) v[j] = w[j] / wn;
    const bool done = it > 0 && std::abs(next - sigma2) <= tol * std::abs(next);
    sigma2 = next;
    if (done) break;
  }
  // Final Rayleigh quotient on the converged vector.
  for (std::size_t i = 0; i < m.rows(); ++i) mv[i] = dot(m.row(i), v);
  return std::sqrt(squared_norm(mv));
}

// ---------------------------------------------------------------------------
// Summary statistics (population variance, Welford update).
// ---------------------------------------------------------------------------
struct SummaryStats {
  std::size_t count = 0;
  double mean = 0.0;
  double variance = 0.0;
  double min = 0.0;
  double max = 0.0;

  double stddev() const { return std::sqrt(variance); }
};

inline SummaryStats summarize(std::span<const double> samples) {
  if (samples.empty()) throw ArgumentError("summarize: empty sequence");
  SummaryStats s;
  s.min = s.max = samples.front();
  double m2 = 0.0;
  for (double x : samples) {
    ++s.count;
    const double delta = x - s.mean;
    s.mean += delta / static_cast<double>(s.count);
    m2 += delta * (x - s.mean);
    s.min = std::min(s.min, x);
    s.max = std::max(s.max, x);
  }
  s.variance = std::max(0.0, m2 / static_cast<double>(s.count));
  s.mean = std::clamp(s.mean, s.min, s.max);
  return s;
}

// Pairwise summation; result depends only on the order of the input.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

// ---------------------------------------------------------------------------
// Random numbers.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. Gaussians come from the Box-Muller transform written out here
// because std::normal_distribution is implementation-defined.
// ---------------------------------------------------------------------------
inline constexpr const char* kRngAlgorithm = "mt19937_64+box-muller/v1";

class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    engine_.seed(seq);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  static std::string algorithm() { return kRngAlgorithm; }

  // Independent child stream, e.g. one per seed-cell of an experiment.
  Rng fork(std::uint64_t stream) const { return Rng(seed_, stream_ * 1000003ULL + stream + 1); }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on (0, 1): 53 random bits, never exactly zero.
  double uniform() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }

  // Uniform integer in [0, n) by rejection, so it is exactly unbiased.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw ArgumentError("uniform_index: n must be >= 1");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double variance, Rng& rng) {
  Matrix m(rows, cols);
  const double sd = std::sqrt(variance);
  for (double& x : m.values()) x = sd * rng.normal();
  return m;
}

// Xavier (Glorot) normal initialization: N(0, 2 / (n_in + n_out)).
inline Matrix xavier_init(std::size_t n_in, std::size_t n_out, Rng& rng) {
  if (n_in < 1 || n_out < 1) throw ArgumentError("xavier_init: n_in, n_out must be >= 1");
  return gaussian_matrix(n_in, n_out, 2.0 / static_cast<double>(n_in + n_out), rng);
}

}  // namespace lnwarm
