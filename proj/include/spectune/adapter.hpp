#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "spectune/activations.hpp"
#include "spectune/error.hpp"
#include "spectune/graph.hpp"
#include "spectune/matrix.hpp"
#include "spectune/ordering.hpp"
#include "spectune/spectral.hpp"

namespace spectune {

/// Trainable spectral-adapter parameters for one layer. The shared linear
/// layer and the up-projection start at exactly zero, so a freshly built
/// adapter contributes nothing to the backbone.
struct AdapterParams {
  Matrix wd;     // r x C down-projection
  Matrix lin_w;  // r x r shared linear weight
  Matrix lin_b;  // 1 x r shared linear bias
  Matrix wu;     // C x r up-projection
  double scale = 1.0;

  std::size_t rank() const { return wd.rows(); }
  std::size_t channels() const { return wd.cols(); }
};

/// The down-projection gets a small random init; zero there would kill the
/// first gradient step through wu as well.
inline AdapterParams init_adapter(std::size_t r, std::size_t channels, double scale,
                                  std::uint64_t seed) {
  if (r == 0 || r >= channels) throw ConfigError("init_adapter: require 0 < r < C");
  AdapterParams p;
  p.scale = scale;
  p.wd = Matrix(r, channels);
  p.lin_w = Matrix(r, r);
  p.lin_b = Matrix(1, r);
  p.wu = Matrix(channels, r);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < channels; ++j) p.wd(i, j) = bound * dist(rng);
  return p;
}

enum class BasisKind { Gft, Dct };

inline std::string to_string(BasisKind k) { return k == BasisKind::Gft ? "gft" : "dct"; }

inline BasisKind parse_basis_kind(const std::string& s) {
  if (s == "gft") return BasisKind::Gft;
  if (s == "dct") return BasisKind::Dct;
  throw ConfigError("unknown basis kind: " + s);
}

/// Per-sample spectral context: one global basis, k local bases, and the
/// ordering that maps token rows to sorted group positions. Built once per
/// sample and shared by every transformer layer.
struct AdapterContext {
  SpectralBasis global;
  std::vector<SpectralBasis> locals;
  OrderingResult ordering;

  std::size_t n() const { return global.n(); }
};

inline AdapterContext make_adapter_context(const Matrix& keypoints, const OrderingResult& ordering,
                                           BasisKind kind) {
  AdapterContext ctx;
  ctx.ordering = ordering;
  if (kind == BasisKind::Gft) {
    MultiscaleBases bases = build_multiscale_bases(keypoints, ordering);
    ctx.global = std::move(bases.global);
    ctx.locals = std::move(bases.locals);
  } else {
    ctx.global = dct_basis(keypoints.rows());
    ctx.locals.assign(ordering.k, dct_basis(ordering.m));
    for (std::size_t i = 0; i < ordering.k; ++i) ctx.locals[i].scope = GraphScope::make_local(i);
  }
  return ctx;
}

/// Forward intermediates needed by the backward pass.
struct AdapterCache {
  Matrix t_s;                      // n x r compressed tokens
  Matrix global_coeff;             // U_G^T T_s
  Matrix global_pre;               // linear pre-activation in the global branch
  std::vector<Matrix> local_coeff; // per block
  std::vector<Matrix> local_pre;
  Matrix bracket;                  // swish(T_s) + global hat + local hat
};

namespace detail {

inline void check_adapter_shapes(const Matrix& t_in, const AdapterParams& params,
                                 const AdapterContext& ctx) {
  const std::size_t n = t_in.rows(), c = t_in.cols(), r = params.rank();
  if (params.wd.cols() != c || params.wu.rows() != c || params.wu.cols() != r ||
      params.lin_w.rows() != r || params.lin_w.cols() != r || params.lin_b.cols() != r)
    throw SizeError("pcsa: parameter shapes inconsistent with input");
  if (ctx.global.n() != n || ctx.ordering.n() != n)
    throw SizeError("pcsa: context does not match token count");
  if (ctx.locals.size() != ctx.ordering.k) throw SizeError("pcsa: local basis count mismatch");
  for (const SpectralBasis& b : ctx.locals)
    if (b.n() != ctx.ordering.m) throw SizeError("pcsa: local basis size mismatch");
}

/// spectral-domain tune: X + swish(X W^T + b), shared across branches.
inline Matrix tune_coefficients(const Matrix& coeff, const AdapterParams& params, Matrix& pre_out) {
  pre_out = add_row(matmul_nt(coeff, params.lin_w), params.lin_b);
  Matrix out = coeff;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += swish(pre_out(i, j));
  return out;
}

}  // namespace detail

/// The spectral adapter: down-project, transform to the spectral domain on
/// the global graph and on each sorted local sub-graph, adapt with the
/// shared linear layer, transform back, reorder, and up-project with scale.
/// Class-token rows never enter here; callers strip them first.
inline Matrix pcsa_forward(const Matrix& t_in, const AdapterParams& params,
                           const AdapterContext& ctx, AdapterCache* cache = nullptr) {
  detail::check_adapter_shapes(t_in, params, ctx);
  const std::size_t n = t_in.rows(), r = params.rank();
  const std::size_t k = ctx.ordering.k, m = ctx.ordering.m;

  const Matrix t_s = matmul_nt(t_in, params.wd);  // n x r

  // Global branch.
  Matrix global_coeff = matmul_tn(ctx.global.vectors, t_s);
  Matrix global_pre;
  Matrix global_hat = matmul(ctx.global.vectors, detail::tune_coefficients(global_coeff, params, global_pre));

  // Local branch: sorted order, per-group transform, back to original order.
  const Matrix sorted = sort_rows(t_s, ctx.ordering);
  Matrix local_sorted(n, r);
  std::vector<Matrix> local_coeffs(k), local_pres(k);
  for (std::size_t gi = 0; gi < k; ++gi) {
    Matrix block(m, r);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t col = 0; col < r; ++col) block(j, col) = sorted(gi * m + j, col);
    local_coeffs[gi] = matmul_tn(ctx.locals[gi].vectors, block);
    Matrix tuned = detail::tune_coefficients(local_coeffs[gi], params, local_pres[gi]);
    Matrix back = matmul(ctx.locals[gi].vectors, tuned);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t col = 0; col < r; ++col) local_sorted(gi * m + j, col) = back(j, col);
  }
  Matrix local_hat(n, r);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t col = 0; col < r; ++col)
      local_hat(ctx.ordering.permutation[j], col) = local_sorted(j, col);

  Matrix bracket = map_swish(t_s);
  bracket += global_hat;
  bracket += local_hat;

  if (cache) {
    cache->t_s = t_s;
    cache->global_coeff = std::move(global_coeff);
    cache->global_pre = std::move(global_pre);
    cache->local_coeff = std::move(local_coeffs);
    cache->local_pre = std::move(local_pres);
    cache->bracket = bracket;
  }
  return matmul_nt(bracket, params.wu) * params.scale;
}

struct AdapterGrads {
  Matrix wd, lin_w, lin_b, wu;

  static AdapterGrads zeros_like(const AdapterParams& p) {
    return {Matrix(p.wd.rows(), p.wd.cols()), Matrix(p.lin_w.rows(), p.lin_w.cols()),
            Matrix(p.lin_b.rows(), p.lin_b.cols()), Matrix(p.wu.rows(), p.wu.cols())};
  }
};

/// Exact reverse-mode gradients of pcsa_forward. Accumulates parameter
/// gradients into `grads` and returns the gradient w.r.t. t_in. The GFT and
/// iGFT differentiate as the fixed linear maps U^T and U.
inline Matrix pcsa_backward(const Matrix& t_in, const AdapterParams& params,
                            const AdapterContext& ctx, const AdapterCache& cache,
                            const Matrix& upstream, AdapterGrads& grads) {
  detail::check_adapter_shapes(t_in, params, ctx);
  if (upstream.rows() != t_in.rows() || upstream.cols() != t_in.cols())
    throw SizeError("pcsa_backward: upstream shape mismatch");
  const std::size_t n = t_in.rows(), r = params.rank();
  const std::size_t k = ctx.ordering.k, m = ctx.ordering.m;

  grads.wu += matmul_tn(upstream, cache.bracket) * params.scale;
  const Matrix d_bracket = matmul(upstream, params.wu) * params.scale;  // n x r

  // Path 1: swish(T_s) term.
  Matrix d_ts = hadamard(d_bracket, map_swish_prime(cache.t_s));

  // Path 2: global branch.
  {
    Matrix d_tuned = matmul_tn(ctx.global.vectors, d_bracket);
    Matrix d_pre = hadamard(d_tuned, map_swish_prime(cache.global_pre));
    grads.lin_w += matmul_tn(d_pre, cache.global_coeff);
    grads.lin_b += col_sums(d_pre);
    Matrix d_coeff = d_tuned + matmul(d_pre, params.lin_w);
    d_ts += matmul(ctx.global.vectors, d_coeff);
  }

  // Path 3: local branch, scattered back through the permutation.
  Matrix d_local_sorted(n, r);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t col = 0; col < r; ++col)
      d_local_sorted(j, col) = d_bracket(ctx.ordering.permutation[j], col);
  for (std::size_t gi = 0; gi < k; ++gi) {
    Matrix d_back(m, r);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t col = 0; col < r; ++col) d_back(j, col) = d_local_sorted(gi * m + j, col);
    Matrix d_tuned = matmul_tn(ctx.locals[gi].vectors, d_back);
    Matrix d_pre = hadamard(d_tuned, map_swish_prime(cache.local_pre[gi]));
    grads.lin_w += matmul_tn(d_pre, cache.local_coeff[gi]);
    grads.lin_b += col_sums(d_pre);
    Matrix d_coeff = d_tuned + matmul(d_pre, params.lin_w);
    Matrix d_block = matmul(ctx.locals[gi].vectors, d_coeff);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t col = 0; col < r; ++col)
        d_ts(ctx.ordering.permutation[gi * m + j], col) += d_block(j, col);
  }

  grads.wd += matmul_tn(d_ts, t_in);
  return matmul(d_ts, params.wd);
}

/// Trainable-parameter count for the adapter stack plus an optional head:
/// layers * (2 r C + r^2 + r) + head.
inline long long count_trainable(std::size_t r, std::size_t channels, std::size_t layers,
                                 long long head = 0) {
  const long long rr = static_cast<long long>(r);
  const long long cc = static_cast<long long>(channels);
  return static_cast<long long>(layers) * (2 * rr * cc + rr * rr + rr) + head;
}

}  // namespace spectune
