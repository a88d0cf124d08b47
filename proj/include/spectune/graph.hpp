#pragma once

#include <limits>
#include <string>
#include <vector>

#include "spectune/eigensolver.hpp"
#include "spectune/error.hpp"
#include "spectune/matrix.hpp"
#include "spectune/ordering.hpp"

namespace spectune {

/// Which graph a matrix or basis belongs to.
struct GraphScope {
  bool global = true;
  std::size_t local_index = 0;

  static GraphScope make_global() { return {true, 0}; }
  static GraphScope make_local(std::size_t i) { return {false, i}; }

  std::string tag() const {
    return global ? std::string("global") : "local" + std::to_string(local_index);
  }
};

/// Symmetric nonnegative adjacency over n key points.
struct WeightedGraph {
  Matrix adjacency;
  GraphScope scope;
};

/// Orthonormal Laplacian eigenvectors with ascending eigenvalues; the
/// eigenvalues act as graph frequencies.
struct SpectralBasis {
  Matrix vectors;               // n x n, columns are the basis
  std::vector<double> values;   // ascending
  GraphScope scope;

  std::size_t n() const { return vectors.rows(); }
};

/// Euclidean pairwise distance matrix.
inline Matrix pairwise_distances(const Matrix& keypoints) {
  if (keypoints.rows() < 2 || keypoints.cols() != 3)
    throw SizeError("pairwise_distances: need at least 2 points with 3 coordinates");
  if (!all_finite(keypoints)) throw NumericError("pairwise_distances: non-finite coordinates");
  const std::size_t n = keypoints.rows();
  Matrix d(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t a = 0; a < 3; ++a) {
        const double diff = keypoints(i, a) - keypoints(j, a);
        s += diff * diff;
      }
      d(i, j) = d(j, i) = std::sqrt(s);
    }
  return d;
}

/// Data-dependent scaled adjacency: w_ij = 1 / (delta_ij / min(Delta) + I_ij)
/// where min(Delta) is the smallest strictly positive off-diagonal distance.
/// Degenerate inputs: if every off-diagonal distance is zero, min(Delta)
/// falls back to 1e-9; coincident pairs are clamped to min(Delta) * 1e-6 so
/// the weight stays finite.
inline WeightedGraph build_adjacency(const Matrix& distances,
                                     GraphScope scope = GraphScope::make_global()) {
  const std::size_t n = distances.rows();
  if (n < 2 || distances.cols() != n)
    throw SizeError("build_adjacency: need a square distance matrix with n >= 2");

  double min_pos = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && distances(i, j) > 0.0) min_pos = std::min(min_pos, distances(i, j));
  if (!std::isfinite(min_pos)) min_pos = 1e-9;

  const double clamp = min_pos * 1e-6;
  WeightedGraph graph;
  graph.scope = scope;
  graph.adjacency = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double identity = i == j ? 1.0 : 0.0;
      const double delta = i != j ? std::max(distances(i, j), clamp) : 0.0;
      graph.adjacency(i, j) = 1.0 / (delta / min_pos + identity);
    }
  return graph;
}

/// Unnormalized Laplacian L = D - W; the degree d_ii sums the full row of W
/// including its diagonal weight, which cancels so rows of L sum to zero.
inline Matrix laplacian(const WeightedGraph& graph) {
  const Matrix& w = graph.adjacency;
  const std::size_t n = w.rows();
  Matrix l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double degree = 0.0;
    for (std::size_t j = 0; j < n; ++j) degree += w(i, j);
    for (std::size_t j = 0; j < n; ++j) l(i, j) = (i == j ? degree : 0.0) - w(i, j);
  }
  return l;
}

/// Full dense eigendecomposition of a Laplacian into a spectral basis.
/// Checks the residual ||L U - U Lambda||_inf < 1e-8 ||L||_inf.
inline SpectralBasis eigendecompose(const Matrix& lap,
                                    GraphScope scope = GraphScope::make_global()) {
  EigenResult eig = jacobi_eigendecompose(lap);
  SpectralBasis basis;
  basis.vectors = std::move(eig.vectors);
  basis.values = std::move(eig.values);
  basis.scope = scope;

  const std::size_t n = lap.rows();
  Matrix lu = matmul(lap, basis.vectors);
  Matrix ul(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) ul(i, j) = basis.vectors(i, j) * basis.values[j];
  if (max_abs_diff(lu, ul) > 1e-8 * std::max(max_abs(lap), 1e-300))
    throw NumericError("eigendecompose: residual check failed");
  return basis;
}

/// Global plus local spectral bases for one sample. The global basis spans
/// all keypoints in their original order; local basis i spans the m points
/// of sorted group i. Built once per sample and shared by every layer.
struct MultiscaleBases {
  SpectralBasis global;
  std::vector<SpectralBasis> locals;
};

inline SpectralBasis basis_from_keypoints(const Matrix& keypoints,
                                          GraphScope scope = GraphScope::make_global()) {
  return eigendecompose(laplacian(build_adjacency(pairwise_distances(keypoints), scope)), scope);
}

inline MultiscaleBases build_multiscale_bases(const Matrix& keypoints,
                                              const OrderingResult& ordering) {
  if (keypoints.rows() != ordering.n())
    throw SizeError("build_multiscale_bases: ordering size does not match keypoints");
  MultiscaleBases bases;
  bases.global = basis_from_keypoints(keypoints, GraphScope::make_global());

  const std::size_t m = ordering.m;
  bases.locals.reserve(ordering.k);
  for (std::size_t gi = 0; gi < ordering.k; ++gi) {
    Matrix group(m, 3);
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t src = ordering.permutation[gi * m + j];
      for (std::size_t a = 0; a < 3; ++a) group(j, a) = keypoints(src, a);
    }
    bases.locals.push_back(basis_from_keypoints(group, GraphScope::make_local(gi)));
  }
  return bases;
}

}  // namespace spectune
