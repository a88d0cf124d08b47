#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "spectune/error.hpp"
#include "spectune/matrix.hpp"

namespace spectune {

/// Eigendecomposition of a symmetric matrix: A = V diag(values) V^T with
/// orthonormal columns and ascending eigenvalues.
struct EigenResult {
  Matrix vectors;
  std::vector<double> values;
};

namespace detail {

inline double off_diagonal_norm(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j) s += 2.0 * a(i, j) * a(i, j);
  return std::sqrt(s);
}

}  // namespace detail

/// Cyclic Jacobi rotations. Converges when the off-diagonal Frobenius norm
/// drops below 1e-12 * ||A||_F; hard cap of 100 sweeps. Adequate for the
/// dense n <= 128 systems this project produces.
inline EigenResult jacobi_eigendecompose(const Matrix& input, double symmetry_tol = 1e-12) {
  const std::size_t n = input.rows();
  if (n == 0 || input.cols() != n) throw SizeError("jacobi: matrix must be square");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(input(i, j) - input(j, i)) > symmetry_tol)
        throw ContractError("jacobi: input is not symmetric");

  Matrix a = input;
  Matrix v = Matrix::identity(n);
  const double norm = frobenius_norm(a);
  const double threshold = 1e-12 * norm;

  bool converged = norm == 0.0;
  for (int sweep = 0; sweep < 100 && !converged; ++sweep) {
    if (detail::off_diagonal_norm(a) <= threshold) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        double t = 1.0 / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        if (theta < 0.0) t = -t;
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        const double tau = s / (1.0 + c);

        const double app = a(p, p), aqq = a(q, q);
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (i != p && i != q) {
            const double aip = a(i, p), aiq = a(i, q);
            a(i, p) = aip - s * (aiq + tau * aip);
            a(p, i) = a(i, p);
            a(i, q) = aiq + s * (aip - tau * aiq);
            a(q, i) = a(i, q);
          }
          const double vip = v(i, p), viq = v(i, q);
          v(i, p) = vip - s * (viq + tau * vip);
          v(i, q) = viq + s * (vip - tau * viq);
        }
      }
    }
  }
  if (!converged && detail::off_diagonal_norm(a) > threshold)
    throw NumericError("jacobi: no convergence within 100 sweeps");

  // Ascending eigenvalues; ties keep the pre-sort column order.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });

  EigenResult result;
  result.values.resize(n);
  result.vectors = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    result.values[j] = a(src, src);
    // Sign convention: largest-magnitude component positive; magnitude ties
    // resolved toward the lowest row index.
    std::size_t peak = 0;
    double peak_abs = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double mag = std::abs(v(i, src));
      if (mag > peak_abs) {
        peak_abs = mag;
        peak = i;
      }
    }
    const double flip = v(peak, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) result.vectors(i, j) = flip * v(i, src);
  }
  return result;
}

}  // namespace spectune
