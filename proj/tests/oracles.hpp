#pragma once

// Independent reference computations used only by the test suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "lnwarm/numerics.hpp"

namespace lnwarm::oracle {

// Singular values by one-sided Jacobi rotations (Hestenes), sorted descending.
inline std::vector<double> singular_values(Matrix a) {
  const std::size_t m = a.rows(), n = a.cols();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += a(i, p) * a(i, p);
          beta += a(i, q) * a(i, q);
          gamma += a(i, p) * a(i, q);
        }
        if (gamma == 0.0) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
      }
    if (off < 1e-15) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += a(i, j) * a(i, j);
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

// Central-difference Jacobian of f: R^d -> R^m, J(i, j) = d f_i / d x_j.
inline Matrix fd_jacobian(const std::function<std::vector<double>(const std::vector<double>&)>& f,
                          std::vector<double> x, double h) {
  const std::size_t d = x.size();
  const std::size_t m = f(x).size();
  Matrix j(m, d);
  for (std::size_t c = 0; c < d; ++c) {
    const double x0 = x[c];
    x[c] = x0 + h;
    const auto fp = f(x);
    x[c] = x0 - h;
    const auto fm = f(x);
    x[c] = x0;
    for (std::size_t r = 0; r < m; ++r) j(r, c) = (fp[r] - fm[r]) / (2.0 * h);
  }
  return j;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace lnwarm::oracle
