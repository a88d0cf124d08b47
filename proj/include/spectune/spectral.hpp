#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "spectune/error.hpp"
#include "spectune/graph.hpp"
#include "spectune/matrix.hpp"

namespace spectune {

/// Spectral coefficients of a graph signal, tagged with the basis used.
struct SpectralTokens {
  Matrix coefficients;  // n x r
  std::string basis_tag;
};

/// Graph Fourier Transform: coefficients = U^T signal. Columns of the
/// signal are treated as independent graph signals.
inline SpectralTokens gft(const Matrix& signal, const SpectralBasis& basis) {
  if (signal.rows() != basis.n()) throw SizeError("gft: signal rows do not match basis size");
  return {matmul_tn(basis.vectors, signal), basis.scope.tag()};
}

/// Inverse transform: signal = U coefficients.
inline Matrix igft(const SpectralTokens& coeffs, const SpectralBasis& basis) {
  if (coeffs.coefficients.rows() != basis.n())
    throw SizeError("igft: coefficient rows do not match basis size");
  return matmul(basis.vectors, coeffs.coefficients);
}

/// Both sides of the total-variation identity x^T L x = sum_i lambda_i xhat_i^2
/// for a single-column signal; callers assert the two agree.
inline std::pair<double, double> total_variation(const Matrix& signal, const Matrix& lap,
                                                 const SpectralBasis& basis) {
  if (signal.cols() != 1) throw SizeError("total_variation: expected an n x 1 signal");
  if (signal.rows() != lap.rows() || lap.rows() != lap.cols() || signal.rows() != basis.n())
    throw SizeError("total_variation: inconsistent shapes");

  double spatial = 0.0;
  for (std::size_t i = 0; i < lap.rows(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < lap.cols(); ++j) row += lap(i, j) * signal(j, 0);
    spatial += signal(i, 0) * row;
  }

  const SpectralTokens hat = gft(signal, basis);
  double spectral = 0.0;
  for (std::size_t i = 0; i < basis.n(); ++i)
    spectral += basis.values[i] * hat.coefficients(i, 0) * hat.coefficients(i, 0);
  return {spatial, spectral};
}

/// Orthonormal DCT-II basis as a drop-in substitute for a graph basis. The
/// eigenvalue slots carry the frequency index, which is all the adapter
/// needs (ordering, not magnitudes).
inline SpectralBasis dct_basis(std::size_t n) {
  if (n == 0) throw SizeError("dct_basis: n must be at least 1");
  SpectralBasis basis;
  basis.scope = GraphScope::make_global();
  basis.vectors = Matrix(n, n);
  basis.values.resize(n);
  const double base = std::sqrt(1.0 / static_cast<double>(n));
  const double rest = std::sqrt(2.0 / static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    basis.values[i] = static_cast<double>(i);
    const double scale = i == 0 ? base : rest;
    for (std::size_t j = 0; j < n; ++j)
      basis.vectors(j, i) =
          scale * std::cos(std::numbers::pi * (2.0 * j + 1.0) * i / (2.0 * static_cast<double>(n)));
  }
  return basis;
}

}  // namespace spectune
