#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "spectune/graph.hpp"

using namespace spectune;

namespace {

Matrix colinear_013() {
  Matrix pts(3, 3);
  pts(1, 0) = 1.0;
  pts(2, 0) = 3.0;
  return pts;
}

Matrix random_points(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Matrix m(n, 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < 3; ++a) m(i, a) = d(rng);
  return m;
}

}  // namespace

TEST_CASE("pairwise distances hand oracle") {
  Matrix d = pairwise_distances(colinear_013());
  const double expect[3][3] = {{0, 1, 3}, {1, 0, 2}, {3, 2, 0}};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) REQUIRE(d(i, j) == Catch::Approx(expect[i][j]).margin(1e-15));
}

TEST_CASE("pairwise distances properties and errors") {
  Matrix two(2, 3, 0.25);  // identical points
  Matrix d = pairwise_distances(two);
  REQUIRE(max_abs(d) == 0.0);

  Matrix pts = random_points(9, 31);
  Matrix dd = pairwise_distances(pts);
  for (std::size_t i = 0; i < 9; ++i) {
    REQUIRE(dd(i, i) == 0.0);
    for (std::size_t j = 0; j < 9; ++j) REQUIRE(dd(i, j) == dd(j, i));
  }

  REQUIRE_THROWS_AS(pairwise_distances(Matrix(1, 3)), SizeError);
  REQUIRE_THROWS_AS(pairwise_distances(Matrix(4, 2)), SizeError);
  pts(0, 0) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(pairwise_distances(pts), NumericError);
}

TEST_CASE("adjacency analytic case x=0,1,3") {
  WeightedGraph g = build_adjacency(pairwise_distances(colinear_013()));
  const double expect[3][3] = {{1, 1, 1.0 / 3.0}, {1, 1, 0.5}, {1.0 / 3.0, 0.5, 1}};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      REQUIRE(g.adjacency(i, j) == Catch::Approx(expect[i][j]).margin(1e-12));
}

TEST_CASE("adjacency diagonal and closest pair") {
  Matrix pts = random_points(10, 41);
  WeightedGraph g = build_adjacency(pairwise_distances(pts));
  double best = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    REQUIRE(g.adjacency(i, i) == 1.0);
    for (std::size_t j = 0; j < 10; ++j) {
      REQUIRE(g.adjacency(i, j) > 0.0);
      if (i != j) {
        REQUIRE(g.adjacency(i, j) <= 1.0);
        best = std::max(best, g.adjacency(i, j));
      }
      REQUIRE(g.adjacency(i, j) == g.adjacency(j, i));
    }
  }
  // the closest pair has delta == min(Delta), so weight exactly 1
  REQUIRE(best == 1.0);
}

TEST_CASE("adjacency is invariant to uniform scaling") {
  Matrix pts = random_points(12, 47);
  Matrix w0 = build_adjacency(pairwise_distances(pts)).adjacency;
  for (double c : {0.5, 3.0, 1000.0}) {
    Matrix scaled = pts * c;
    Matrix wc = build_adjacency(pairwise_distances(scaled)).adjacency;
    REQUIRE(max_abs_diff(wc, w0) < 1e-12);
  }
}

TEST_CASE("adjacency degenerate inputs stay finite") {
  // all points coincident: min(Delta) falls back to epsilon
  Matrix same(3, 3, 0.7);
  WeightedGraph g = build_adjacency(pairwise_distances(same));
  REQUIRE(all_finite(g.adjacency));
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(g.adjacency(i, i) == 1.0);

  // one coincident pair among distinct points: clamped, finite, symmetric
  Matrix mixed(3, 3);
  mixed(2, 0) = 1.0;  // points: p0 = p1 = origin, p2 = (1,0,0)
  WeightedGraph h = build_adjacency(pairwise_distances(mixed));
  REQUIRE(all_finite(h.adjacency));
  REQUIRE(h.adjacency(0, 1) == h.adjacency(1, 0));
  REQUIRE(h.adjacency(0, 1) > 1.0);  // closer than min(Delta) after clamping

  REQUIRE_THROWS_AS(build_adjacency(Matrix(1, 1)), SizeError);
  REQUIRE_THROWS_AS(build_adjacency(Matrix(3, 2)), SizeError);
}

TEST_CASE("laplacian two-node oracle") {
  Matrix pts(2, 3);
  pts(1, 0) = 0.37;  // any distance: the 2-node adjacency is all ones
  WeightedGraph g = build_adjacency(pairwise_distances(pts));
  REQUIRE(g.adjacency(0, 1) == 1.0);
  Matrix l = laplacian(g);
  REQUIRE(l(0, 0) == Catch::Approx(1.0).margin(1e-15));
  REQUIRE(l(0, 1) == Catch::Approx(-1.0).margin(1e-15));
  REQUIRE(l(1, 0) == Catch::Approx(-1.0).margin(1e-15));
  REQUIRE(l(1, 1) == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("laplacian degree includes the diagonal weight") {
  // for x=0,1,3: d_00 = 1 + 1 + 1/3, so L_00 = d_00 - w_00 = 4/3
  Matrix l = laplacian(build_adjacency(pairwise_distances(colinear_013())));
  REQUIRE(l(0, 0) == Catch::Approx(4.0 / 3.0).margin(1e-12));
  REQUIRE(l(1, 1) == Catch::Approx(1.5).margin(1e-12));
  REQUIRE(l(2, 2) == Catch::Approx(5.0 / 6.0).margin(1e-12));
}

TEST_CASE("laplacian row sums and PSD") {
  std::mt19937_64 rng(53);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Matrix pts = random_points(8, 60 + seed);
    Matrix l = laplacian(build_adjacency(pairwise_distances(pts)));
    for (std::size_t i = 0; i < 8; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < 8; ++j) {
        row += l(i, j);
        REQUIRE(l(i, j) == l(j, i));
      }
      REQUIRE(std::abs(row) < 1e-12);
    }
    for (int rep = 0; rep < 5; ++rep) {
      Matrix x(8, 1);
      for (std::size_t i = 0; i < 8; ++i) x(i, 0) = d(rng);
      double q = 0.0;
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) q += x(i, 0) * l(i, j) * x(j, 0);
      REQUIRE(q >= -1e-10);
    }
  }
}

TEST_CASE("eigendecompose two-node analytic basis") {
  Matrix l(2, 2);
  l(0, 0) = 1.0;
  l(0, 1) = -1.0;
  l(1, 0) = -1.0;
  l(1, 1) = 1.0;
  SpectralBasis b = eigendecompose(l);
  const double s2 = 1.0 / std::sqrt(2.0);
  REQUIRE(b.values[0] == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(b.values[1] == Catch::Approx(2.0).margin(1e-12));
  REQUIRE(b.vectors(0, 0) == Catch::Approx(s2).margin(1e-12));
  REQUIRE(b.vectors(1, 0) == Catch::Approx(s2).margin(1e-12));
  // sign convention: magnitude tie resolved to make the lowest index positive
  REQUIRE(b.vectors(0, 1) == Catch::Approx(s2).margin(1e-12));
  REQUIRE(b.vectors(1, 1) == Catch::Approx(-s2).margin(1e-12));
}

TEST_CASE("jacobi on a block diagonal with known spectrum") {
  // [[2,1,0],[1,2,0],[0,0,5]] has eigenpairs (1,(1,-1,0)/sqrt2), (3,(1,1,0)/sqrt2), (5,e3)
  Matrix a(3, 3);
  a(0, 0) = 2; a(0, 1) = 1;
  a(1, 0) = 1; a(1, 1) = 2;
  a(2, 2) = 5;
  EigenResult e = jacobi_eigendecompose(a);
  REQUIRE(e.values[0] == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(e.values[1] == Catch::Approx(3.0).margin(1e-12));
  REQUIRE(e.values[2] == Catch::Approx(5.0).margin(1e-12));
  const double s2 = 1.0 / std::sqrt(2.0);
  REQUIRE(e.vectors(0, 0) == Catch::Approx(s2).margin(1e-12));
  REQUIRE(e.vectors(1, 0) == Catch::Approx(-s2).margin(1e-12));
  REQUIRE(e.vectors(2, 0) == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(e.vectors(0, 1) == Catch::Approx(s2).margin(1e-12));
  REQUIRE(e.vectors(1, 1) == Catch::Approx(s2).margin(1e-12));
  REQUIRE(e.vectors(2, 2) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("eigendecompose rejects non-symmetric input") {
  Matrix a(2, 2);
  a(0, 1) = 1e-3;
  REQUIRE_THROWS_AS(eigendecompose(a), ContractError);
}

TEST_CASE("random Laplacian spectra behave") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const std::size_t n = 6 + 2 * (seed % 3);
    Matrix pts = random_points(n, 70 + seed);
    Matrix l = laplacian(build_adjacency(pairwise_distances(pts)));
    SpectralBasis b = eigendecompose(l);

    // ascending, nonnegative, exactly one near-zero eigenvalue (complete graph)
    REQUIRE(b.values[0] == Catch::Approx(0.0).margin(1e-8));
    REQUIRE(b.values[1] > 1e-6);
    for (std::size_t i = 1; i < n; ++i) {
      REQUIRE(b.values[i] >= b.values[i - 1]);
      REQUIRE(b.values[i] >= -1e-10);
    }

    // orthonormality
    Matrix gram = matmul_tn(b.vectors, b.vectors);
    REQUIRE(max_abs_diff(gram, Matrix::identity(n)) < 1e-10);

    // residual L u_i = lambda_i u_i
    Matrix lu = matmul(l, b.vectors);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        REQUIRE(std::abs(lu(i, j) - b.values[j] * b.vectors(i, j)) < 1e-8 * max_abs(l));

    // kernel eigenvector is constant 1/sqrt(n)
    const double c = 1.0 / std::sqrt(double(n));
    for (std::size_t i = 0; i < n; ++i) REQUIRE(std::abs(b.vectors(i, 0) - c) < 1e-8);
  }
}

TEST_CASE("multiscale bases on colinear points with k=4") {
  // 8 points on a line, pairs of sorted neighbors per group: each local
  // basis is the analytic 2-node system
  Matrix pts(8, 3);
  for (std::size_t i = 0; i < 8; ++i) pts(i, 0) = double(i);
  OrderingResult ordering = sort_keypoints(pts, OrderingMethod::ZOrder, 4);
  MultiscaleBases bases = build_multiscale_bases(pts, ordering);

  REQUIRE(bases.global.n() == 8);
  REQUIRE(bases.locals.size() == 4);
  const double s2 = 1.0 / std::sqrt(2.0);
  for (std::size_t gi = 0; gi < 4; ++gi) {
    const SpectralBasis& b = bases.locals[gi];
    REQUIRE(b.n() == 2);
    REQUIRE(b.scope.tag() == "local" + std::to_string(gi));
    REQUIRE(b.values[0] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(b.values[1] == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(b.vectors(0, 0) == Catch::Approx(s2).margin(1e-12));
    REQUIRE(b.vectors(0, 1) == Catch::Approx(s2).margin(1e-12));
    REQUIRE(b.vectors(1, 1) == Catch::Approx(-s2).margin(1e-12));
  }

  // deterministic: rebuilding gives bit-identical results
  MultiscaleBases again = build_multiscale_bases(pts, ordering);
  REQUIRE(max_abs_diff(again.global.vectors, bases.global.vectors) == 0.0);
  for (std::size_t gi = 0; gi < 4; ++gi)
    REQUIRE(max_abs_diff(again.locals[gi].vectors, bases.locals[gi].vectors) == 0.0);

  REQUIRE_THROWS_AS(build_multiscale_bases(Matrix(6, 3), ordering), SizeError);
}
