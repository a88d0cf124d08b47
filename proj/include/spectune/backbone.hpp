#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "spectune/activations.hpp"
#include "spectune/adapter.hpp"
#include "spectune/error.hpp"
#include "spectune/matrix.hpp"
#include "spectune/pointcloud.hpp"

namespace spectune {

enum class Mode { Full, LinearProbe, Pcsa };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::Full: return "full";
    case Mode::LinearProbe: return "linear_probe";
    case Mode::Pcsa: return "pcsa";
  }
  throw ConfigError("bad mode enum");
}

inline Mode parse_mode(const std::string& s) {
  if (s == "full") return Mode::Full;
  if (s == "linear_probe") return Mode::LinearProbe;
  if (s == "pcsa") return Mode::Pcsa;
  throw ConfigError("unknown mode: " + s);
}

struct BackboneConfig {
  std::size_t dim = 32;          // token width C
  std::size_t layers = 2;
  std::size_t heads = 1;
  std::size_t embed_hidden = 64;
  std::size_t classes = 3;
  double ln_eps = 1e-5;
};

struct LayerParams {
  Matrix ln1_g, ln1_b;             // 1 x d
  Matrix wq, bq, wk, bk, wv, bv;   // d x d weights, 1 x d biases
  Matrix wo, bo;
  Matrix ln2_g, ln2_b;
  Matrix fw1, fb1;                 // 4d x d, 1 x 4d
  Matrix fw2, fb2;                 // d x 4d, 1 x d
};

/// The whole model: embedder, class token, encoder stack, head, and the
/// optional adapter stack. `trainable` holds tensor names the current mode
/// allows to move; everything else is frozen.
struct ModelParams {
  BackboneConfig cfg;
  EmbedParams embed;
  Matrix cls;                      // 1 x d
  std::vector<LayerParams> layers;
  Matrix head_w, head_b;           // classes x 2d, 1 x classes
  std::vector<AdapterParams> adapters;  // one per layer in pcsa mode, else empty
  std::set<std::string> trainable;

  bool has_adapters() const { return !adapters.empty(); }
};

/// Enumerate every tensor with its stable checkpoint name.
template <class P, class F>
void for_each_tensor(P& p, F&& fn) {
  fn("embed.w1", p.embed.w1);
  fn("embed.b1", p.embed.b1);
  fn("embed.w2", p.embed.w2);
  fn("embed.b2", p.embed.b2);
  fn("cls", p.cls);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layer" + std::to_string(i) + ".";
    fn(pre + "ln1.g", l.ln1_g);
    fn(pre + "ln1.b", l.ln1_b);
    fn(pre + "attn.wq", l.wq);
    fn(pre + "attn.bq", l.bq);
    fn(pre + "attn.wk", l.wk);
    fn(pre + "attn.bk", l.bk);
    fn(pre + "attn.wv", l.wv);
    fn(pre + "attn.bv", l.bv);
    fn(pre + "attn.wo", l.wo);
    fn(pre + "attn.bo", l.bo);
    fn(pre + "ln2.g", l.ln2_g);
    fn(pre + "ln2.b", l.ln2_b);
    fn(pre + "ffn.w1", l.fw1);
    fn(pre + "ffn.b1", l.fb1);
    fn(pre + "ffn.w2", l.fw2);
    fn(pre + "ffn.b2", l.fb2);
  }
  fn("head.w", p.head_w);
  fn("head.b", p.head_b);
  for (std::size_t i = 0; i < p.adapters.size(); ++i) {
    auto& a = p.adapters[i];
    const std::string pre = "adapter" + std::to_string(i) + ".";
    fn(pre + "wd", a.wd);
    fn(pre + "lin_w", a.lin_w);
    fn(pre + "lin_b", a.lin_b);
    fn(pre + "wu", a.wu);
  }
}

inline Matrix* find_tensor(ModelParams& p, const std::string& name) {
  Matrix* found = nullptr;
  for_each_tensor(p, [&](const std::string& n, Matrix& m) {
    if (n == name) found = &m;
  });
  return found;
}

/// Set the trainable flags for a mode. Full mode trains everything present,
/// linear probing only the head, pcsa the adapters plus the head.
inline void apply_mode(ModelParams& p, Mode mode) {
  if (mode == Mode::Full && p.has_adapters())
    throw ConfigError("full mode does not use adapters");
  if (mode == Mode::Pcsa && !p.has_adapters())
    throw ConfigError("pcsa mode requires adapters");
  p.trainable.clear();
  for_each_tensor(p, [&](const std::string& n, Matrix&) {
    const bool head = n.rfind("head.", 0) == 0;
    const bool adapter = n.rfind("adapter", 0) == 0;
    switch (mode) {
      case Mode::Full: p.trainable.insert(n); break;
      case Mode::LinearProbe:
        if (head) p.trainable.insert(n);
        break;
      case Mode::Pcsa:
        if (head || adapter) p.trainable.insert(n);
        break;
    }
  });
}

namespace detail {

inline double uniform_fan_in(std::mt19937_64& rng, std::size_t fan_in) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  return dist(rng) / std::sqrt(static_cast<double>(fan_in));
}

inline void fill_fan_in(Matrix& m, std::size_t fan_in, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = uniform_fan_in(rng, fan_in);
}

}  // namespace detail

/// Fresh backbone. Weights get fan-in scaled uniform noise, LN gains one,
/// biases and the head zero. No adapters; attach them for pcsa tuning.
inline ModelParams init_model(const BackboneConfig& cfg, std::uint64_t seed) {
  if (cfg.dim == 0 || cfg.layers == 0 || cfg.heads == 0 || cfg.classes == 0 ||
      cfg.embed_hidden == 0)
    throw ConfigError("init_model: all sizes must be positive");
  if (cfg.dim % cfg.heads != 0) throw ConfigError("init_model: heads must divide dim");
  const std::size_t d = cfg.dim, h = cfg.embed_hidden, f = 4 * cfg.dim;
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.cfg = cfg;
  p.embed.w1 = Matrix(h, 3);
  p.embed.b1 = Matrix(1, h);
  p.embed.w2 = Matrix(d, h);
  p.embed.b2 = Matrix(1, d);
  detail::fill_fan_in(p.embed.w1, 3, rng);
  detail::fill_fan_in(p.embed.w2, h, rng);
  p.cls = Matrix(1, d);
  detail::fill_fan_in(p.cls, d, rng);
  p.layers.resize(cfg.layers);
  for (LayerParams& l : p.layers) {
    l.ln1_g = Matrix(1, d, 1.0);
    l.ln1_b = Matrix(1, d);
    l.wq = Matrix(d, d);
    l.wk = Matrix(d, d);
    l.wv = Matrix(d, d);
    l.wo = Matrix(d, d);
    detail::fill_fan_in(l.wq, d, rng);
    detail::fill_fan_in(l.wk, d, rng);
    detail::fill_fan_in(l.wv, d, rng);
    detail::fill_fan_in(l.wo, d, rng);
    l.bq = Matrix(1, d);
    l.bk = Matrix(1, d);
    l.bv = Matrix(1, d);
    l.bo = Matrix(1, d);
    l.ln2_g = Matrix(1, d, 1.0);
    l.ln2_b = Matrix(1, d);
    l.fw1 = Matrix(f, d);
    l.fb1 = Matrix(1, f);
    l.fw2 = Matrix(d, f);
    l.fb2 = Matrix(1, d);
    detail::fill_fan_in(l.fw1, d, rng);
    detail::fill_fan_in(l.fw2, f, rng);
  }
  p.head_w = Matrix(cfg.classes, 2 * d);
  p.head_b = Matrix(1, cfg.classes);
  apply_mode(p, Mode::Full);
  return p;
}

inline void attach_adapters(ModelParams& p, std::size_t r, double scale, std::uint64_t seed) {
  p.adapters.clear();
  for (std::size_t i = 0; i < p.cfg.layers; ++i)
    p.adapters.push_back(init_adapter(r, p.cfg.dim, scale, seed + i));
}

/// Replace the head with a zero one sized for a new class count (downstream
/// tasks have their own label space).
inline void reset_head(ModelParams& p, std::size_t classes) {
  if (classes == 0) throw ConfigError("reset_head: classes must be positive");
  p.cfg.classes = classes;
  p.head_w = Matrix(classes, 2 * p.cfg.dim);
  p.head_b = Matrix(1, classes);
}

// ---------------------------------------------------------------------------
// layer pieces with caches for the backward pass

struct LnCache {
  Matrix x_hat;              // n x d
  std::vector<double> rstd;  // per row
};

inline Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, double eps,
                         LnCache* cache = nullptr) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.cols() != d || beta.cols() != d) throw SizeError("layer_norm: gain/bias shape");
  Matrix y(n, d);
  if (cache) {
    cache->x_hat = Matrix(n, d);
    cache->rstd.assign(n, 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (x(i, j) - mean) * rstd;
      y(i, j) = gamma(0, j) * xh + beta(0, j);
      if (cache) cache->x_hat(i, j) = xh;
    }
    if (cache) cache->rstd[i] = rstd;
  }
  return y;
}

/// Returns dx; accumulates d_gamma / d_beta.
inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& gamma, const LnCache& cache,
                                  Matrix& d_gamma, Matrix& d_beta) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix dx(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double g = dy(i, j) * gamma(0, j);
      sum_g += g;
      sum_gx += g * cache.x_hat(i, j);
      d_gamma(0, j) += dy(i, j) * cache.x_hat(i, j);
      d_beta(0, j) += dy(i, j);
    }
    const double mean_g = sum_g / static_cast<double>(d);
    const double mean_gx = sum_gx / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double g = dy(i, j) * gamma(0, j);
      dx(i, j) = cache.rstd[i] * (g - mean_g - cache.x_hat(i, j) * mean_gx);
    }
  }
  return dx;
}

struct AttnCache {
  Matrix x;                   // attention input (post-LN tokens)
  Matrix q, k, v;             // n x d
  std::vector<Matrix> probs;  // per head, n x n softmax rows
  Matrix concat;              // n x d pre-output-projection
};

inline Matrix attention(const Matrix& x, const LayerParams& l, std::size_t heads,
                        AttnCache* cache = nullptr) {
  const std::size_t n = x.rows(), d = x.cols();
  const std::size_t dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix q = add_row(matmul_nt(x, l.wq), l.bq);
  Matrix k = add_row(matmul_nt(x, l.wk), l.bk);
  Matrix v = add_row(matmul_nt(x, l.wv), l.bv);
  Matrix concat(n, d);
  std::vector<Matrix> probs(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    Matrix scores(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q(i, off + c) * k(j, off + c);
        scores(i, j) = s * inv_scale;
      }
    Matrix& p = probs[h];
    p = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = scores(i, 0);
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, scores(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        p(i, j) = std::exp(scores(i, j) - mx);
        z += p(i, j);
      }
      for (std::size_t j = 0; j < n; ++j) p(i, j) /= z;
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dh; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += p(i, j) * v(j, off + c);
        concat(i, off + c) = s;
      }
  }
  Matrix out = add_row(matmul_nt(concat, l.wo), l.bo);
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->concat = std::move(concat);
  }
  return out;
}

struct LayerGrads;  // forward declaration for the backward helpers below

struct FfnCache {
  Matrix x;       // FFN input
  Matrix pre;     // n x 4d pre-activation
  Matrix hidden;  // gelu(pre)
};

inline Matrix ffn(const Matrix& x, const LayerParams& l, FfnCache* cache = nullptr) {
  Matrix pre = add_row(matmul_nt(x, l.fw1), l.fb1);
  Matrix hidden(pre.rows(), pre.cols());
  for (std::size_t i = 0; i < pre.rows(); ++i)
    for (std::size_t j = 0; j < pre.cols(); ++j) hidden(i, j) = gelu(pre(i, j));
  Matrix out = add_row(matmul_nt(hidden, l.fw2), l.fb2);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return out;
}

/// Per-layer gradient bundle, same field names as LayerParams.
struct LayerGrads {
  Matrix ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, fw1, fb1, fw2, fb2;

  static LayerGrads zeros_like(const LayerParams& l) {
    LayerGrads g;
    g.ln1_g = Matrix(l.ln1_g.rows(), l.ln1_g.cols());
    g.ln1_b = Matrix(l.ln1_b.rows(), l.ln1_b.cols());
    g.wq = Matrix(l.wq.rows(), l.wq.cols());
    g.bq = Matrix(l.bq.rows(), l.bq.cols());
    g.wk = Matrix(l.wk.rows(), l.wk.cols());
    g.bk = Matrix(l.bk.rows(), l.bk.cols());
    g.wv = Matrix(l.wv.rows(), l.wv.cols());
    g.bv = Matrix(l.bv.rows(), l.bv.cols());
    g.wo = Matrix(l.wo.rows(), l.wo.cols());
    g.bo = Matrix(l.bo.rows(), l.bo.cols());
    g.ln2_g = Matrix(l.ln2_g.rows(), l.ln2_g.cols());
    g.ln2_b = Matrix(l.ln2_b.rows(), l.ln2_b.cols());
    g.fw1 = Matrix(l.fw1.rows(), l.fw1.cols());
    g.fb1 = Matrix(l.fb1.rows(), l.fb1.cols());
    g.fw2 = Matrix(l.fw2.rows(), l.fw2.cols());
    g.fb2 = Matrix(l.fb2.rows(), l.fb2.cols());
    return g;
  }
};

/// `param_grads=false` skips the weight-gradient accumulation (the chain to
/// dx is still exact); used when the backbone is frozen.
inline Matrix attention_backward(const Matrix& dout, const LayerParams& l, std::size_t heads,
                                 const AttnCache& c, LayerGrads& g, bool param_grads = true) {
  const std::size_t n = dout.rows(), d = dout.cols();
  const std::size_t dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (param_grads) {
    g.wo += matmul_tn(dout, c.concat);
    g.bo += col_sums(dout);
  }
  Matrix d_concat = matmul(dout, l.wo);
  Matrix dq(n, d), dk(n, d), dv(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    const Matrix& p = c.probs[h];
    // dP = dOh Vh^T, dVh = P^T dOh
    Matrix dp(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t cc = 0; cc < dh; ++cc) s += d_concat(i, off + cc) * c.v(j, off + cc);
        dp(i, j) = s;
      }
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t cc = 0; cc < dh; ++cc) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += p(i, j) * d_concat(i, off + cc);
        dv(j, off + cc) = s;
      }
    // softmax backward: dS = P (dP - rowdot(dP, P))
    Matrix ds(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dp(i, j) * p(i, j);
      for (std::size_t j = 0; j < n; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * inv_scale;
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t cc = 0; cc < dh; ++cc) {
        double sq = 0.0, sk = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          sq += ds(i, j) * c.k(j, off + cc);
          sk += ds(j, i) * c.q(j, off + cc);
        }
        dq(i, off + cc) = sq;
        dk(i, off + cc) = sk;
      }
  }
  if (param_grads) {
    g.wq += matmul_tn(dq, c.x);
    g.bq += col_sums(dq);
    g.wk += matmul_tn(dk, c.x);
    g.bk += col_sums(dk);
    g.wv += matmul_tn(dv, c.x);
    g.bv += col_sums(dv);
  }
  Matrix dx = matmul(dq, l.wq);
  dx += matmul(dk, l.wk);
  dx += matmul(dv, l.wv);
  return dx;
}

inline Matrix ffn_backward(const Matrix& dout, const LayerParams& l, const FfnCache& c,
                           LayerGrads& g, bool param_grads = true) {
  if (param_grads) {
    g.fw2 += matmul_tn(dout, c.hidden);
    g.fb2 += col_sums(dout);
  }
  Matrix d_hidden = matmul(dout, l.fw2);
  Matrix d_pre(d_hidden.rows(), d_hidden.cols());
  for (std::size_t i = 0; i < d_pre.rows(); ++i)
    for (std::size_t j = 0; j < d_pre.cols(); ++j)
      d_pre(i, j) = d_hidden(i, j) * gelu_prime(c.pre(i, j));
  if (param_grads) {
    g.fw1 += matmul_tn(d_pre, c.x);
    g.fb1 += col_sums(d_pre);
  }
  return matmul(d_pre, l.fw1);
}

// ---------------------------------------------------------------------------
// encoder

/// Per-layer token snapshots for tests and debugging.
struct LayerTrace {
  Matrix before_attn;  // layer input T
  Matrix after_attn;   // T' = Attn(LN(T)) + T
  Matrix before_ffn;   // LN(T')
  Matrix after_ffn;    // layer output
};

struct LayerCache {
  Matrix input;
  LnCache ln1;
  AttnCache attn;
  Matrix t1;  // T'
  LnCache ln2;
  Matrix f_in;
  FfnCache ffn;
  AdapterCache adapter;
};

struct EncoderCache {
  std::vector<LayerCache> layers;
  Matrix tokens;  // final (n+1) x d
  Matrix pooled;  // 1 x 2d
};

struct EncoderResult {
  Matrix tokens;
  Matrix pooled;
};

/// Eq.-5 style stack. t0 is (n+1) x d with the class token in row 0. When
/// adapters are attached, each layer adds pad(pcsa(strip_cls(LN(T'))))
/// alongside the FFN output; the class-token row bypasses the adapter.
inline EncoderResult encoder_forward(const Matrix& t0, const ModelParams& p,
                                     const AdapterContext* ctx, EncoderCache* cache = nullptr,
                                     std::vector<LayerTrace>* trace = nullptr) {
  const std::size_t d = p.cfg.dim;
  if (t0.cols() != d || t0.rows() < 2) throw SizeError("encoder_forward: bad token shape");
  if (p.has_adapters()) {
    if (p.adapters.size() != p.layers.size())
      throw SizeError("encoder_forward: adapter count != layer count");
    if (ctx == nullptr) throw SizeError("encoder_forward: adapters need a context");
    if (ctx->n() != t0.rows() - 1)
      throw SizeError("encoder_forward: context size != point token count");
  }
  const std::size_t n = t0.rows() - 1;
  if (cache) cache->layers.resize(p.layers.size());
  if (trace) trace->resize(p.layers.size());

  Matrix t = t0;
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const LayerParams& l = p.layers[li];
    LayerCache* lc = cache ? &cache->layers[li] : nullptr;
    if (lc) lc->input = t;

    LnCache ln1;
    Matrix a_in = layer_norm(t, l.ln1_g, l.ln1_b, p.cfg.ln_eps, &ln1);
    Matrix t1 = attention(a_in, l, p.cfg.heads, lc ? &lc->attn : nullptr);
    t1 += t;

    LnCache ln2;
    Matrix f_in = layer_norm(t1, l.ln2_g, l.ln2_b, p.cfg.ln_eps, &ln2);
    Matrix t2 = ffn(f_in, l, lc ? &lc->ffn : nullptr);
    t2 += t1;

    if (p.has_adapters()) {
      Matrix stripped(n, d);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) stripped(i, j) = f_in(i + 1, j);
      Matrix ad = pcsa_forward(stripped, p.adapters[li], *ctx, lc ? &lc->adapter : nullptr);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) t2(i + 1, j) += ad(i, j);
    }

    if (trace) {
      (*trace)[li].before_attn = lc ? lc->input : t;
      (*trace)[li].after_attn = t1;
      (*trace)[li].before_ffn = f_in;
      (*trace)[li].after_ffn = t2;
    }
    if (lc) {
      lc->ln1 = std::move(ln1);
      lc->t1 = t1;
      lc->ln2 = std::move(ln2);
      lc->f_in = std::move(f_in);
    }
    t = std::move(t2);
  }

  EncoderResult res;
  res.pooled = Matrix(1, 2 * d);
  for (std::size_t j = 0; j < d; ++j) {
    res.pooled(0, j) = t(0, j);
    double mean = 0.0;
    for (std::size_t i = 1; i < t.rows(); ++i) mean += t(i, j);
    res.pooled(0, d + j) = mean / static_cast<double>(n);
  }
  res.tokens = std::move(t);
  if (cache) {
    cache->tokens = res.tokens;
    cache->pooled = res.pooled;
  }
  return res;
}

inline Matrix classify(const Matrix& pooled, const ModelParams& p) {
  if (pooled.rows() != 1 || pooled.cols() != p.head_w.cols())
    throw SizeError("classify: pooled feature shape mismatch");
  return add_row(matmul_nt(pooled, p.head_w), p.head_b);
}

/// Mean-subtracted softmax cross entropy on a 1 x K logit row.
inline double cross_entropy(const Matrix& logits, int label, Matrix* d_logits = nullptr) {
  const std::size_t k = logits.cols();
  if (label < 0 || static_cast<std::size_t>(label) >= k)
    throw DataError("cross_entropy: label out of range");
  double mx = logits(0, 0);
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits(0, j));
  double z = 0.0;
  for (std::size_t j = 0; j < k; ++j) z += std::exp(logits(0, j) - mx);
  const double lse = mx + std::log(z);
  if (d_logits) {
    *d_logits = Matrix(1, k);
    for (std::size_t j = 0; j < k; ++j)
      (*d_logits)(0, j) = std::exp(logits(0, j) - lse) - (static_cast<int>(j) == label ? 1.0 : 0.0);
  }
  return lse - logits(0, static_cast<std::size_t>(label));
}

// ---------------------------------------------------------------------------
// full-model forward / backward

/// One sample prepared for the model: geometry, label, and (for adapter
/// runs) the cached spectral context. Tokens are cached when the embedder
/// is frozen so tuning skips the embed pass.
struct PreparedSample {
  PatchSet patches;
  int label = 0;
  AdapterContext ctx;
  bool has_ctx = false;
  Matrix tokens;  // n x d, only when cached
  bool tokens_cached = false;
  Matrix pooled;  // 1 x 2d frozen-backbone feature; linear probing only
  bool pooled_cached = false;
};

inline Matrix with_cls(const Matrix& tokens, const Matrix& cls) {
  Matrix t0(tokens.rows() + 1, tokens.cols());
  for (std::size_t j = 0; j < tokens.cols(); ++j) t0(0, j) = cls(0, j);
  for (std::size_t i = 0; i < tokens.rows(); ++i)
    for (std::size_t j = 0; j < tokens.cols(); ++j) t0(i + 1, j) = tokens(i, j);
  return t0;
}

struct SampleCache {
  EmbedCache embed;
  bool embed_cached = false;
  Matrix t0;
  EncoderCache encoder;
  Matrix logits;
};

/// Loss of one sample. Uses cached tokens when present and the embedder is
/// frozen; otherwise embeds from patches.
inline double sample_loss(const PreparedSample& s, const ModelParams& p, Mode mode,
                          SampleCache* cache = nullptr, Matrix* d_logits = nullptr) {
  if (mode == Mode::LinearProbe && s.pooled_cached) {
    // backbone frozen and adapter-free: the pooled feature cannot change
    Matrix logits = classify(s.pooled, p);
    if (cache) {
      cache->encoder.pooled = s.pooled;
      cache->logits = logits;
    }
    return cross_entropy(logits, s.label, d_logits);
  }
  Matrix tokens;
  if (mode != Mode::Full && s.tokens_cached) {
    tokens = s.tokens;
  } else {
    EmbedCache ec;
    tokens = embed_patches(s.patches, p.embed, cache ? &ec : nullptr).values;
    if (cache) {
      cache->embed = std::move(ec);
      cache->embed_cached = true;
    }
  }
  Matrix t0 = with_cls(tokens, p.cls);
  const AdapterContext* ctx = (p.has_adapters() && s.has_ctx) ? &s.ctx : nullptr;
  if (p.has_adapters() && !s.has_ctx)
    throw ConfigError("sample_loss: adapters attached but sample has no spectral context");
  EncoderResult enc = encoder_forward(t0, p, ctx, cache ? &cache->encoder : nullptr);
  Matrix logits = classify(enc.pooled, p);
  if (cache) {
    cache->t0 = std::move(t0);
    cache->logits = logits;
  }
  return cross_entropy(logits, s.label, d_logits);
}

/// Gradient container keyed by checkpoint tensor name; holds exactly the
/// trainable set of the mode that produced it.
using GradMap = std::map<std::string, Matrix>;

inline void grad_add(GradMap& grads, const std::string& name, const Matrix& g) {
  auto it = grads.find(name);
  if (it == grads.end())
    grads.emplace(name, g);
  else
    it->second += g;
}

namespace detail {

inline void accumulate_layer_grads(GradMap& out, const LayerGrads& g, std::size_t li) {
  const std::string pre = "layer" + std::to_string(li) + ".";
  grad_add(out, pre + "ln1.g", g.ln1_g);
  grad_add(out, pre + "ln1.b", g.ln1_b);
  grad_add(out, pre + "attn.wq", g.wq);
  grad_add(out, pre + "attn.bq", g.bq);
  grad_add(out, pre + "attn.wk", g.wk);
  grad_add(out, pre + "attn.bk", g.bk);
  grad_add(out, pre + "attn.wv", g.wv);
  grad_add(out, pre + "attn.bv", g.bv);
  grad_add(out, pre + "attn.wo", g.wo);
  grad_add(out, pre + "attn.bo", g.bo);
  grad_add(out, pre + "ln2.g", g.ln2_g);
  grad_add(out, pre + "ln2.b", g.ln2_b);
  grad_add(out, pre + "ffn.w1", g.fw1);
  grad_add(out, pre + "ffn.b1", g.fb1);
  grad_add(out, pre + "ffn.w2", g.fw2);
  grad_add(out, pre + "ffn.b2", g.fb2);
}

}  // namespace detail

/// Loss plus exact gradients for the trainable set of `mode`, accumulated
/// into `grads` (caller owns averaging over a batch). Frozen tensors get no
/// entry. Linear probing needs no chain at all: the head gradient comes
/// straight from the pooled feature.
inline double loss_and_grads(const PreparedSample& s, const ModelParams& p, Mode mode,
                             GradMap& grads, int* predicted = nullptr) {
  SampleCache cache;
  Matrix d_logits;
  const double loss = sample_loss(s, p, mode, &cache, &d_logits);
  if (predicted) {
    int best = 0;
    for (std::size_t j = 1; j < cache.logits.cols(); ++j)
      if (cache.logits(0, j) > cache.logits(0, best)) best = static_cast<int>(j);
    *predicted = best;
  }

  grad_add(grads, "head.w", matmul_tn(d_logits, cache.encoder.pooled));
  grad_add(grads, "head.b", d_logits);
  if (mode == Mode::LinearProbe) return loss;

  const std::size_t d = p.cfg.dim;
  const std::size_t rows = cache.encoder.tokens.rows();
  const std::size_t n = rows - 1;

  Matrix d_pooled = matmul(d_logits, p.head_w);  // 1 x 2d
  Matrix dt(rows, d);
  for (std::size_t j = 0; j < d; ++j) {
    dt(0, j) = d_pooled(0, j);
    const double per_point = d_pooled(0, d + j) / static_cast<double>(n);
    for (std::size_t i = 1; i < rows; ++i) dt(i, j) = per_point;
  }

  const bool backbone_grads = (mode == Mode::Full);
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const LayerParams& l = p.layers[li];
    const LayerCache& lc = cache.encoder.layers[li];
    LayerGrads lg = LayerGrads::zeros_like(l);

    // t2 = ffn(f_in) + t1 + pad(adapter(strip(f_in)))
    Matrix d_f_in = ffn_backward(dt, l, lc.ffn, lg, backbone_grads);
    if (p.has_adapters()) {
      Matrix d_strip(n, d);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) d_strip(i, j) = dt(i + 1, j);
      Matrix stripped(n, d);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) stripped(i, j) = lc.f_in(i + 1, j);
      AdapterGrads ag = AdapterGrads::zeros_like(p.adapters[li]);
      Matrix d_ad_in = pcsa_backward(stripped, p.adapters[li], s.ctx, lc.adapter, d_strip, ag);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) d_f_in(i + 1, j) += d_ad_in(i, j);
      const std::string pre = "adapter" + std::to_string(li) + ".";
      grad_add(grads, pre + "wd", ag.wd);
      grad_add(grads, pre + "lin_w", ag.lin_w);
      grad_add(grads, pre + "lin_b", ag.lin_b);
      grad_add(grads, pre + "wu", ag.wu);
    }
    // t1 receives: residual dt, plus LN2 chain
    Matrix dt1 = layer_norm_backward(d_f_in, l.ln2_g, lc.ln2, lg.ln2_g, lg.ln2_b);
    dt1 += dt;
    // t1 = attention(ln1(t)) + t
    Matrix d_a_in = attention_backward(dt1, l, p.cfg.heads, lc.attn, lg, backbone_grads);
    Matrix dt0 = layer_norm_backward(d_a_in, l.ln1_g, lc.ln1, lg.ln1_g, lg.ln1_b);
    dt0 += dt1;
    dt = std::move(dt0);
    if (backbone_grads) detail::accumulate_layer_grads(grads, lg, li);
  }

  if (backbone_grads) {
    Matrix d_cls(1, d);
    for (std::size_t j = 0; j < d; ++j) d_cls(0, j) = dt(0, j);
    grad_add(grads, "cls", d_cls);
    Matrix d_tokens(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) d_tokens(i, j) = dt(i + 1, j);
    if (!cache.embed_cached) throw ContractError("loss_and_grads: embed cache missing");
    EmbedGrads eg = embed_patches_backward(s.patches, p.embed, cache.embed, d_tokens);
    grad_add(grads, "embed.w1", eg.w1);
    grad_add(grads, "embed.b1", eg.b1);
    grad_add(grads, "embed.w2", eg.w2);
    grad_add(grads, "embed.b2", eg.b2);
  }
  return loss;
}

/// Predicted class: argmax logits, ties to the lowest index.
inline int predict(const PreparedSample& s, const ModelParams& p) {
  SampleCache cache;
  sample_loss(s, p, p.has_adapters() ? Mode::Pcsa : Mode::LinearProbe, &cache, nullptr);
  int best = 0;
  for (std::size_t j = 1; j < cache.logits.cols(); ++j)
    if (cache.logits(0, j) > cache.logits(0, best)) best = static_cast<int>(j);
  return best;
}

}  // namespace spectune
