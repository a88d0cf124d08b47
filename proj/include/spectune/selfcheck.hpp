#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "spectune/adapter.hpp"
#include "spectune/backbone.hpp"
#include "spectune/config.hpp"
#include "spectune/dataset.hpp"
#include "spectune/graph.hpp"
#include "spectune/matrix.hpp"
#include "spectune/ordering.hpp"
#include "spectune/spectral.hpp"

namespace spectune {

struct CheckResult {
  std::string name;
  bool pass = false;
  double value = 0.0;      // measured error
  double tolerance = 0.0;
  std::string detail;
};

// --- individual measurements (pure; reusable against corrupted inputs) ----

inline double orthonormality_error(const SpectralBasis& b) {
  const Matrix gram = matmul_tn(b.vectors, b.vectors);
  return max_abs_diff(gram, Matrix::identity(b.n()));
}

inline double roundtrip_error(const SpectralBasis& b, const Matrix& signal) {
  const SpectralTokens hat = gft(signal, b);
  const Matrix back = igft(hat, b);
  return max_abs_diff(back, signal);
}

/// Energy preservation per column: | ||x||^2 - ||x_hat||^2 |.
inline double parseval_error(const SpectralBasis& b, const Matrix& signal) {
  const SpectralTokens hat = gft(signal, b);
  double worst = 0.0;
  for (std::size_t j = 0; j < signal.cols(); ++j) {
    double spatial = 0.0, spectral = 0.0;
    for (std::size_t i = 0; i < signal.rows(); ++i) {
      spatial += signal(i, j) * signal(i, j);
      spectral += hat.coefficients(i, j) * hat.coefficients(i, j);
    }
    worst = std::max(worst, std::abs(spatial - spectral));
  }
  return worst;
}

/// Total-variation identity: x^T L x vs sum_i lambda_i x_hat_i^2, relative.
inline double tv_identity_rel_error(const Matrix& lap, const SpectralBasis& b,
                                    const Matrix& signal_col) {
  const auto [spatial, spectral] = total_variation(signal_col, lap, b);
  const double denom = std::max({std::abs(spatial), std::abs(spectral), 1e-30});
  return std::abs(spatial - spectral) / denom;
}

inline double lambda0_error(const SpectralBasis& b) { return std::abs(b.values.front()); }

/// First eigenvector of a connected graph Laplacian is the constant vector.
inline double constant_eigvec_error(const SpectralBasis& b) {
  const double expect = 1.0 / std::sqrt(static_cast<double>(b.n()));
  double worst = 0.0;
  for (std::size_t i = 0; i < b.n(); ++i)
    worst = std::max(worst, std::abs(b.vectors(i, 0) - expect));
  return worst;
}

/// Max output difference between a frozen backbone and the same backbone
/// with freshly (zero-) initialized adapters attached. Should be exactly 0.
inline double zero_init_equivalence_error(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  BackboneConfig cfg;
  cfg.dim = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.embed_hidden = 16;
  cfg.classes = 3;
  const std::size_t n = 8;

  ModelParams base = init_model(cfg, rng());
  ModelParams adapted = base;
  attach_adapters(adapted, 4, 1.0, rng());

  Matrix keypoints(n, 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 3; ++j) keypoints(i, j) = unit(rng);
  const OrderingResult ordering =
      sort_keypoints(keypoints, OrderingMethod::TransZOrder, 2, rng());
  const AdapterContext ctx = make_adapter_context(keypoints, ordering, BasisKind::Gft);

  Matrix tokens(n, cfg.dim);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < cfg.dim; ++j) tokens(i, j) = unit(rng);
  const Matrix t0 = with_cls(tokens, base.cls);

  const EncoderResult plain = encoder_forward(t0, base, nullptr);
  const EncoderResult with_adapters = encoder_forward(t0, adapted, &ctx);
  return std::max(max_abs_diff(plain.tokens, with_adapters.tokens),
                  max_abs_diff(plain.pooled, with_adapters.pooled));
}

/// Central finite differences against pcsa_backward on a small instance
/// with every parameter tensor nonzero. Returns the worst relative error.
inline double adapter_gradient_max_rel_error(std::uint64_t seed, double h = 1e-5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const std::size_t n = 4, c = 3, r = 2, k = 2;

  Matrix keypoints(n, 3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 3; ++j) keypoints(i, j) = unit(rng);
  const OrderingResult ordering = sort_keypoints(keypoints, OrderingMethod::ZOrder, k, 0);
  const AdapterContext ctx = make_adapter_context(keypoints, ordering, BasisKind::Gft);

  AdapterParams params = init_adapter(r, c, 1.3, rng());
  for (std::size_t i = 0; i < r; ++i) {
    params.lin_b(0, i) = 0.3 * unit(rng);
    for (std::size_t j = 0; j < r; ++j) params.lin_w(i, j) = 0.5 * unit(rng);
    for (std::size_t j = 0; j < c; ++j) params.wu(j, i) = 0.5 * unit(rng);
  }
  Matrix t_in(n, c), upstream(n, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      t_in(i, j) = unit(rng);
      upstream(i, j) = unit(rng);
    }

  // loss = <upstream, forward(t_in)>, so d loss / d params uses exactly
  // `upstream` as the output gradient.
  const auto loss = [&](const AdapterParams& q) {
    const Matrix out = pcsa_forward(t_in, q, ctx);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) s += upstream(i, j) * out(i, j);
    return s;
  };

  AdapterCache cache;
  pcsa_forward(t_in, params, ctx, &cache);
  AdapterGrads grads = AdapterGrads::zeros_like(params);
  pcsa_backward(t_in, params, ctx, cache, upstream, grads);

  double worst = 0.0;
  auto check_tensor = [&](Matrix& tensor, const Matrix& analytic) {
    for (std::size_t i = 0; i < tensor.rows(); ++i)
      for (std::size_t j = 0; j < tensor.cols(); ++j) {
        const double saved = tensor(i, j);
        tensor(i, j) = saved + h;
        const double up = loss(params);
        tensor(i, j) = saved - h;
        const double down = loss(params);
        tensor(i, j) = saved;
        const double fd = (up - down) / (2.0 * h);
        const double an = analytic(i, j);
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
        worst = std::max(worst, rel);
      }
  };
  check_tensor(params.wd, grads.wd);
  check_tensor(params.lin_w, grads.lin_w);
  check_tensor(params.lin_b, grads.lin_b);
  check_tensor(params.wu, grads.wu);
  return worst;
}

// --- the suite -------------------------------------------------------------

/// Runs every invariant on freshly sampled instances. Failures are report
/// content, not exceptions; the CLI exits 1 if any entry fails.
inline std::vector<CheckResult> spectral_selfcheck(const ExperimentConfig& cfg,
                                                   std::size_t clouds = 20) {
  std::vector<CheckResult> out;
  const std::size_t sizes[3] = {8, 16, 32};

  double worst_orth = 0.0, worst_round = 0.0, worst_parseval = 0.0, worst_tv = 0.0;
  double worst_l0 = 0.0, worst_const = 0.0;
  for (std::size_t ci = 0; ci < clouds; ++ci) {
    std::mt19937_64 rng(splitmix64(cfg.seed ^ (0x5eedull + ci)));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const std::size_t n = sizes[ci % 3];
    Matrix keypoints(n, 3);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 3; ++j) keypoints(i, j) = unit(rng);
    const Matrix lap = laplacian(build_adjacency(pairwise_distances(keypoints)));
    const SpectralBasis basis = eigendecompose(lap);
    Matrix signal(n, 2);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 2; ++j) signal(i, j) = unit(rng);
    Matrix col(n, 1);
    for (std::size_t i = 0; i < n; ++i) col(i, 0) = signal(i, 0);

    worst_orth = std::max(worst_orth, orthonormality_error(basis));
    worst_round = std::max(worst_round, roundtrip_error(basis, signal));
    worst_parseval = std::max(worst_parseval, parseval_error(basis, signal));
    worst_tv = std::max(worst_tv, tv_identity_rel_error(lap, basis, col));
    worst_l0 = std::max(worst_l0, lambda0_error(basis));
    worst_const = std::max(worst_const, constant_eigvec_error(basis));
  }
  auto push = [&out](const std::string& name, double value, double tol, std::string detail = "") {
    out.push_back({name, value < tol, value, tol, std::move(detail)});
  };
  push("orthonormality", worst_orth, 1e-8, std::to_string(clouds) + " random clouds");
  push("gft_roundtrip", worst_round, 1e-10);
  push("parseval", worst_parseval, 1e-10);
  push("tv_identity", worst_tv, 1e-8);
  push("lambda0", worst_l0, 1e-8);
  push("constant_eigenvector", worst_const, 1e-8);

  // the analytic two-node case: L = [[1,-1],[-1,1]], eigenvalues 0 and 2
  {
    Matrix two(2, 3);
    two(0, 0) = 0.0;
    two(1, 0) = 1.0;
    const SpectralBasis b = basis_from_keypoints(two);
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    double err = std::abs(b.values[0]) + std::abs(b.values[1] - 2.0);
    err = std::max(err, std::abs(b.vectors(0, 0) - inv_sqrt2));
    err = std::max(err, std::abs(b.vectors(1, 0) - inv_sqrt2));
    err = std::max(err, std::abs(b.vectors(0, 1) - inv_sqrt2));
    err = std::max(err, std::abs(b.vectors(1, 1) + inv_sqrt2));
    push("analytic_two_node", err, 1e-12);
  }

  // multiscale context under the configured ordering / grouping / basis
  {
    std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x900dull));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    Matrix keypoints(cfg.n, 3);
    for (std::size_t i = 0; i < cfg.n; ++i)
      for (std::size_t j = 0; j < 3; ++j) keypoints(i, j) = unit(rng);
    const OrderingResult ordering = sort_keypoints(keypoints, cfg.ordering, cfg.groups_k, rng());
    const AdapterContext ctx = make_adapter_context(keypoints, ordering, cfg.basis);
    double err = orthonormality_error(ctx.global);
    for (const SpectralBasis& b : ctx.locals) err = std::max(err, orthonormality_error(b));
    push("multiscale_orthonormality", err, 1e-8,
         "ordering=" + to_string(cfg.ordering) + " k=" + std::to_string(cfg.groups_k) +
             " basis=" + to_string(cfg.basis));
  }

  {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s)
      worst = std::max(worst, zero_init_equivalence_error(cfg.seed + s));
    push("zero_init_equivalence", worst, 1e-12, "5 random backbones");
  }
  {
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 3; ++s)
      worst = std::max(worst, adapter_gradient_max_rel_error(cfg.seed + 0x40ull + s));
    push("adapter_gradients_fd", worst, 1e-4, "3 random instances, h=1e-5");
  }
  return out;
}

}  // namespace spectune
