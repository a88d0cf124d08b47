#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "spectune/adapter.hpp"

using namespace spectune;

namespace {

Matrix random_points(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Matrix m(n, 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < 3; ++a) m(i, a) = d(rng);
  return m;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double span = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-span, span);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = d(rng);
  return m;
}

AdapterContext context_for(const Matrix& pts, std::size_t k) {
  OrderingResult ordering = sort_keypoints(pts, OrderingMethod::TransZOrder, k);
  return make_adapter_context(pts, ordering, BasisKind::Gft);
}

AdapterParams random_params(std::size_t r, std::size_t c, double scale, std::uint64_t seed) {
  AdapterParams p = init_adapter(r, c, scale, seed);
  std::mt19937_64 rng(seed ^ 0x5bd1e995ull);
  std::uniform_real_distribution<double> d(-0.8, 0.8);
  Matrix* fields[] = {&p.lin_w, &p.lin_b, &p.wu};
  for (Matrix* m : fields)
    for (std::size_t i = 0; i < m->rows(); ++i)
      for (std::size_t j = 0; j < m->cols(); ++j) (*m)(i, j) = d(rng);
  return p;
}

double weighted_sum(const Matrix& out, const Matrix& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) s += out(i, j) * weights(i, j);
  return s;
}

}  // namespace

TEST_CASE("init_adapter zeroes the right tensors") {
  AdapterParams p = init_adapter(3, 8, 2.5, 99);
  REQUIRE(p.rank() == 3);
  REQUIRE(p.channels() == 8);
  REQUIRE(p.scale == 2.5);
  REQUIRE(max_abs(p.lin_w) == 0.0);
  REQUIRE(max_abs(p.lin_b) == 0.0);
  REQUIRE(max_abs(p.wu) == 0.0);

  const double bound = 1.0 / std::sqrt(8.0);
  REQUIRE(max_abs(p.wd) > 0.0);
  REQUIRE(max_abs(p.wd) <= bound);

  // deterministic in the seed
  AdapterParams q = init_adapter(3, 8, 2.5, 99);
  REQUIRE(max_abs_diff(p.wd, q.wd) == 0.0);
  AdapterParams other = init_adapter(3, 8, 2.5, 100);
  REQUIRE(max_abs_diff(p.wd, other.wd) > 0.0);

  REQUIRE_THROWS_AS(init_adapter(0, 8, 1.0, 1), ConfigError);
  REQUIRE_THROWS_AS(init_adapter(8, 8, 1.0, 1), ConfigError);
  REQUIRE_THROWS_AS(init_adapter(9, 8, 1.0, 1), ConfigError);
}

TEST_CASE("fresh adapter outputs exactly zero") {
  Matrix pts = random_points(8, 7);
  AdapterContext ctx = context_for(pts, 2);
  AdapterParams p = init_adapter(4, 16, 1.0, 3);
  Matrix t_in = random_matrix(8, 16, 11);
  Matrix out = pcsa_forward(t_in, p, ctx);
  REQUIRE(max_abs(out) <= 1e-12);
}

TEST_CASE("identity-acting linear makes both branches round trips") {
  // with the shared linear at zero, tune(coeff) == coeff, so each branch is
  // iGFT(GFT(T_s)) == T_s; k=1 makes the two branches literally the same system
  Matrix pts = random_points(6, 17);
  AdapterContext ctx = context_for(pts, 1);
  AdapterParams p = init_adapter(3, 10, 1.25, 5);
  p.wu = random_matrix(10, 3, 21);  // nonzero so the output is observable

  Matrix t_in = random_matrix(6, 10, 23);
  AdapterCache cache;
  Matrix out = pcsa_forward(t_in, p, ctx, &cache);

  Matrix t_s = matmul_nt(t_in, p.wd);
  REQUIRE(max_abs_diff(cache.t_s, t_s) < 1e-14);

  // tuned == coeff, so the cached coefficients reconstruct each branch
  Matrix global_hat = matmul(ctx.global.vectors, cache.global_coeff);
  REQUIRE(max_abs_diff(global_hat, t_s) < 1e-10);

  Matrix local_hat = cache.bracket - map_swish(t_s) - global_hat;
  REQUIRE(max_abs_diff(local_hat, t_s) < 1e-10);

  Matrix expect = (map_swish(t_s) + t_s * 2.0);
  REQUIRE(max_abs_diff(cache.bracket, expect) < 1e-10);
  REQUIRE(max_abs_diff(out, matmul_nt(expect, p.wu) * 1.25) < 1e-9);
}

TEST_CASE("hand-computed chain on the two-node basis") {
  Matrix pts(2, 3);
  pts(1, 0) = 1.0;
  AdapterContext ctx = context_for(pts, 1);

  const double s2 = 1.0 / std::sqrt(2.0);
  // pin the analytic basis (and the identity ordering) before relying on them
  REQUIRE(ctx.ordering.permutation[0] == 0);
  REQUIRE(ctx.ordering.permutation[1] == 1);
  REQUIRE(ctx.global.vectors(0, 0) == Catch::Approx(s2).margin(1e-12));
  REQUIRE(ctx.global.vectors(1, 1) == Catch::Approx(-s2).margin(1e-12));
  REQUIRE(ctx.locals.size() == 1);
  REQUIRE(max_abs_diff(ctx.locals[0].vectors, ctx.global.vectors) < 1e-12);

  AdapterParams p = init_adapter(1, 2, 0.5, 1);
  p.wd(0, 0) = 0.5;
  p.wd(0, 1) = -0.25;
  p.lin_w(0, 0) = 0.7;
  p.lin_b(0, 0) = 0.2;
  p.wu(0, 0) = 1.5;
  p.wu(1, 0) = -2.0;

  Matrix t_in(2, 2);
  t_in(0, 0) = 1.0;
  t_in(0, 1) = 2.0;
  t_in(1, 0) = -1.0;
  t_in(1, 1) = 0.5;

  // scalar re-derivation of the whole chain
  auto swish_ref = [](double x) { return x / (1.0 + std::exp(-x)); };
  const double ts0 = 1.0 * 0.5 + 2.0 * -0.25;    // 0
  const double ts1 = -1.0 * 0.5 + 0.5 * -0.25;   // -0.625
  const double u[2][2] = {{s2, s2}, {s2, -s2}};
  const double coeff0 = u[0][0] * ts0 + u[1][0] * ts1;
  const double coeff1 = u[0][1] * ts0 + u[1][1] * ts1;
  const double tuned0 = coeff0 + swish_ref(coeff0 * 0.7 + 0.2);
  const double tuned1 = coeff1 + swish_ref(coeff1 * 0.7 + 0.2);
  const double hat0 = u[0][0] * tuned0 + u[0][1] * tuned1;
  const double hat1 = u[1][0] * tuned0 + u[1][1] * tuned1;
  // identity ordering and k=1: the local branch repeats the same numbers
  const double bracket0 = swish_ref(ts0) + 2.0 * hat0;
  const double bracket1 = swish_ref(ts1) + 2.0 * hat1;
  const double expect[2][2] = {{0.5 * bracket0 * 1.5, 0.5 * bracket0 * -2.0},
                               {0.5 * bracket1 * 1.5, 0.5 * bracket1 * -2.0}};

  Matrix out = pcsa_forward(t_in, p, ctx);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      REQUIRE(out(i, j) == Catch::Approx(expect[i][j]).margin(1e-12));
}

TEST_CASE("output is linear in wu") {
  Matrix pts = random_points(8, 31);
  AdapterContext ctx = context_for(pts, 4);
  AdapterParams p = random_params(4, 12, 0.7, 33);
  Matrix t_in = random_matrix(8, 12, 35);
  Matrix out1 = pcsa_forward(t_in, p, ctx);
  p.wu *= 2.0;
  Matrix out2 = pcsa_forward(t_in, p, ctx);
  REQUIRE(max_abs_diff(out2, out1 * 2.0) < 1e-12);
}

TEST_CASE("permuting tokens with their keypoints permutes the output") {
  const std::size_t n = 8, c = 6;
  Matrix pts = random_points(n, 41);
  Matrix t_in = random_matrix(n, c, 43);
  AdapterParams p = random_params(3, c, 1.0, 45);

  Matrix out1 = pcsa_forward(t_in, p, context_for(pts, 2));

  const std::size_t sigma[n] = {5, 2, 7, 0, 3, 6, 1, 4};
  Matrix pts2(n, 3), t2(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < 3; ++a) pts2(i, a) = pts(sigma[i], a);
    for (std::size_t j = 0; j < c; ++j) t2(i, j) = t_in(sigma[i], j);
  }
  Matrix out2 = pcsa_forward(t2, p, context_for(pts2, 2));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      REQUIRE(out2(i, j) == Catch::Approx(out1(sigma[i], j)).margin(1e-8));
}

TEST_CASE("dct context structure") {
  Matrix pts = random_points(8, 47);
  OrderingResult ordering = sort_keypoints(pts, OrderingMethod::TransZOrder, 2);
  AdapterContext ctx = make_adapter_context(pts, ordering, BasisKind::Dct);
  SpectralBasis expect_g = dct_basis(8);
  SpectralBasis expect_l = dct_basis(4);
  REQUIRE(max_abs_diff(ctx.global.vectors, expect_g.vectors) == 0.0);
  REQUIRE(ctx.locals.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    REQUIRE(max_abs_diff(ctx.locals[i].vectors, expect_l.vectors) == 0.0);
    REQUIRE(ctx.locals[i].scope.tag() == "local" + std::to_string(i));
  }

  // a dct context produces a different output stream than the graph context
  AdapterParams p = random_params(3, 6, 1.0, 49);
  Matrix t_in = random_matrix(8, 6, 51);
  Matrix out_dct = pcsa_forward(t_in, p, ctx);
  Matrix out_gft = pcsa_forward(t_in, p, make_adapter_context(pts, ordering, BasisKind::Gft));
  REQUIRE(max_abs_diff(out_dct, out_gft) > 1e-6);

  REQUIRE(parse_basis_kind("gft") == BasisKind::Gft);
  REQUIRE(parse_basis_kind("dct") == BasisKind::Dct);
  REQUIRE(to_string(BasisKind::Dct) == "dct");
  REQUIRE_THROWS_AS(parse_basis_kind("fft"), ConfigError);
}

TEST_CASE("backward with zero upstream and zero-init structure") {
  Matrix pts = random_points(6, 53);
  AdapterContext ctx = context_for(pts, 3);
  Matrix t_in = random_matrix(6, 8, 55);

  AdapterParams p = random_params(2, 8, 1.0, 57);
  AdapterCache cache;
  pcsa_forward(t_in, p, ctx, &cache);
  AdapterGrads g = AdapterGrads::zeros_like(p);
  Matrix d_in = pcsa_backward(t_in, p, ctx, cache, Matrix(6, 8), g);
  REQUIRE(max_abs(d_in) == 0.0);
  REQUIRE(max_abs(g.wd) == 0.0);
  REQUIRE(max_abs(g.lin_w) == 0.0);
  REQUIRE(max_abs(g.lin_b) == 0.0);
  REQUIRE(max_abs(g.wu) == 0.0);

  // at zero init the only live gradient is wu's
  AdapterParams fresh = init_adapter(2, 8, 1.0, 59);
  AdapterCache cache2;
  pcsa_forward(t_in, fresh, ctx, &cache2);
  AdapterGrads g2 = AdapterGrads::zeros_like(fresh);
  Matrix upstream = random_matrix(6, 8, 61);
  pcsa_backward(t_in, fresh, ctx, cache2, upstream, g2);
  REQUIRE(max_abs(g2.wu) > 1e-6);
  REQUIRE(max_abs(g2.lin_w) == 0.0);
  REQUIRE(max_abs(g2.lin_b) == 0.0);
  REQUIRE(max_abs(g2.wd) == 0.0);
}

TEST_CASE("parameter and input gradients match finite differences") {
  const std::size_t n = 4, c = 3, r = 2;
  Matrix pts = random_points(n, 63);
  AdapterContext ctx = context_for(pts, 2);
  Matrix t_in = random_matrix(n, c, 65);
  Matrix weights = random_matrix(n, c, 67);
  AdapterParams p = random_params(r, c, 0.9, 69);

  AdapterCache cache;
  pcsa_forward(t_in, p, ctx, &cache);
  AdapterGrads g = AdapterGrads::zeros_like(p);
  Matrix d_in = pcsa_backward(t_in, p, ctx, cache, weights, g);

  const double h = 1e-5;
  auto loss_at = [&](const AdapterParams& q) { return weighted_sum(pcsa_forward(t_in, q, ctx), weights); };
  auto check = [&](Matrix AdapterParams::*field, const Matrix& analytic) {
    AdapterParams q = p;
    Matrix& target = q.*field;
    for (std::size_t i = 0; i < target.rows(); ++i)
      for (std::size_t j = 0; j < target.cols(); ++j) {
        const double keep = target(i, j);
        target(i, j) = keep + h;
        const double up = loss_at(q);
        target(i, j) = keep - h;
        const double down = loss_at(q);
        target(i, j) = keep;
        const double fd = (up - down) / (2.0 * h);
        const double an = analytic(i, j);
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
        REQUIRE(std::abs(fd - an) / denom < 1e-4);
      }
  };
  check(&AdapterParams::wd, g.wd);
  check(&AdapterParams::lin_w, g.lin_w);
  check(&AdapterParams::lin_b, g.lin_b);
  check(&AdapterParams::wu, g.wu);

  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      Matrix shifted = t_in;
      shifted(i, j) += h;
      const double up = weighted_sum(pcsa_forward(shifted, p, ctx), weights);
      shifted(i, j) = t_in(i, j) - h;
      const double down = weighted_sum(pcsa_forward(shifted, p, ctx), weights);
      const double fd = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(d_in(i, j)), 1e-6});
      REQUIRE(std::abs(fd - d_in(i, j)) / denom < 1e-4);
    }
}

TEST_CASE("count_trainable formula") {
  REQUIRE(count_trainable(36, 384, 12) == 347760);
  REQUIRE(count_trainable(8, 32, 2) == 1168);
  REQUIRE(count_trainable(0, 32, 2) == 0);
  REQUIRE(count_trainable(8, 32, 2, 100) == 1268);
}

TEST_CASE("shape errors") {
  Matrix pts = random_points(6, 71);
  AdapterContext ctx = context_for(pts, 2);
  AdapterParams p = random_params(2, 8, 1.0, 73);

  REQUIRE_THROWS_AS(pcsa_forward(Matrix(6, 9), p, ctx), SizeError);   // C mismatch
  REQUIRE_THROWS_AS(pcsa_forward(Matrix(5, 8), p, ctx), SizeError);   // ctx n mismatch

  AdapterContext broken = ctx;
  broken.locals.pop_back();
  REQUIRE_THROWS_AS(pcsa_forward(Matrix(6, 8), p, broken), SizeError);

  Matrix t_in = random_matrix(6, 8, 75);
  AdapterCache cache;
  pcsa_forward(t_in, p, ctx, &cache);
  AdapterGrads g = AdapterGrads::zeros_like(p);
  REQUIRE_THROWS_AS(pcsa_backward(t_in, p, ctx, cache, Matrix(6, 7), g), SizeError);
}
