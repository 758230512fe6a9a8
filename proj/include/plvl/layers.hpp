#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "plvl/numerics.hpp"

namespace plvl {

// Deterministic parameter initializer.
class ParamInit {
 public:
  explicit ParamInit(std::uint64_t seed) : rng_(seed) {}

  // Normal(0, std) resampled outside +-2 std.
  template <typename T>
  Tensor<T> trunc_normal(Shape shape, double std = 0.02) {
    std::normal_distribution<double> dist(0.0, std);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) {
      double s;
      do s = dist(rng_);
      while (std::abs(s) > 2.0 * std);
      x = static_cast<T>(s);
    }
    return Tensor<T>::parameter(std::move(shape), std::move(v));
  }

  template <typename T>
  Tensor<T> uniform(Shape shape, double bound = 0.02) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    return Tensor<T>::parameter(std::move(shape), std::move(v));
  }

  template <typename T>
  static Tensor<T> constant(Shape shape, T value) {
    Tensor<T> t(std::move(shape), value);
    t.set_requires_grad(true);
    return t;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

enum class InitKind { trunc_normal, uniform };

template <typename T>
Tensor<T> init_weight(ParamInit& init, InitKind kind, Shape shape) {
  return kind == InitKind::uniform ? init.uniform<T>(std::move(shape)) : init.trunc_normal<T>(std::move(shape));
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;

  static LayerNormParams create(std::size_t dim) {
    return {ParamInit::constant<T>({dim}, T(1)), ParamInit::constant<T>({dim}, T(0))};
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  return layer_norm(x, p.gamma, p.beta);
}

enum class AttentionScale {
  per_head,   // 1/sqrt(D/h)
  model_dim,  // 1/sqrt(D)
};

// Query/value/output projections carry biases; the key projection does not,
// since a key bias only shifts every logit of a query by the same amount.
template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, wv, bv, wo, bo;
  std::size_t heads = 1;
  AttentionScale scale = AttentionScale::per_head;
  bool out_proj = true;

  std::size_t dim() const { return wq.dim(0); }
  std::size_t head_dim() const { return dim() / heads; }

  static AttentionParams create(ParamInit& init, std::size_t dim, std::size_t heads, InitKind kind) {
    if (heads == 0 || dim % heads)
      throw ConfigError("attention: D=" + std::to_string(dim) + " not divisible by heads=" + std::to_string(heads));
    AttentionParams p;
    p.heads = heads;
    p.wq = init_weight<T>(init, kind, {dim, dim});
    p.bq = ParamInit::constant<T>({dim}, T(0));
    p.wk = init_weight<T>(init, kind, {dim, dim});
    p.wv = init_weight<T>(init, kind, {dim, dim});
    p.bv = ParamInit::constant<T>({dim}, T(0));
    p.wo = init_weight<T>(init, kind, {dim, dim});
    p.bo = ParamInit::constant<T>({dim}, T(0));
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq);
    f(prefix + ".bq", bq);
    f(prefix + ".wk", wk);
    f(prefix + ".wv", wv);
    f(prefix + ".bv", bv);
    if (out_proj) {
      f(prefix + ".wo", wo);
      f(prefix + ".bo", bo);
    }
  }
};

template <typename T>
struct FfnParams {
  Tensor<T> w1, b1, w2, b2;

  static FfnParams create(ParamInit& init, std::size_t dim, std::size_t ratio) {
    if (ratio < 1) throw ConfigError("ffn: ratio must be >= 1");
    return {init.trunc_normal<T>({dim, dim * ratio}), ParamInit::constant<T>({dim * ratio}, T(0)),
            init.trunc_normal<T>({dim * ratio, dim}), ParamInit::constant<T>({dim}, T(0))};
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }
};

template <typename T>
struct PatchEmbedParams {
  Tensor<T> proj;  // [C*P*P, D], bias-free
  Tensor<T> pos;   // [H/P, W/P, D]
  std::size_t patch = 8;

  static PatchEmbedParams create(ParamInit& init, std::size_t channels, std::size_t image_h, std::size_t image_w,
                                 std::size_t patch, std::size_t dim) {
    check_patch_geometry(image_h, image_w, patch);
    PatchEmbedParams p;
    p.patch = patch;
    p.proj = init.trunc_normal<T>({channels * patch * patch, dim});
    p.pos = init.trunc_normal<T>({image_h / patch, image_w / patch, dim});
    return p;
  }

  static void check_patch_geometry(std::size_t h, std::size_t w, std::size_t p) {
    if (p == 0 || h % p || w % p || (h / p) % 2 || (w / p) % 2)
      throw ConfigError("patch_embed: H=" + std::to_string(h) + ", W=" + std::to_string(w) + ", P=" +
                        std::to_string(p) + " must give an even token grid");
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".proj", proj);
    f(prefix + ".pos", pos);
  }
};

namespace detail {

// [lead, n, D] -> [lead, heads, n, dh]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t lead = x.dim(0), n = x.dim(1), d = x.dim(2);
  Tensor<T> r = reshape(x, {lead, n, heads, d / heads});
  if (heads == 1) return reshape(r, {lead, 1, n, d});
  return permute(r, {0, 2, 1, 3});
}

// [lead, heads, n, dh] -> [lead, n, D]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& y) {
  const std::size_t lead = y.dim(0), heads = y.dim(1), n = y.dim(2), dh = y.dim(3);
  if (heads == 1) return reshape(y, {lead, n, dh});
  return reshape(permute(y, {0, 2, 1, 3}), {lead, n, heads * dh});
}

template <typename T>
T attention_scale(const AttentionParams<T>& p) {
  const auto d = static_cast<T>(p.scale == AttentionScale::per_head ? p.head_dim() : p.dim());
  return T(1) / std::sqrt(d);
}

template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionParams<T>& p,
                 const Tensor<T>* additive_mask) {
  Tensor<T> scores = scale(matmul(q, k, false, true), attention_scale(p));
  if (additive_mask) scores = add_constant(scores, *additive_mask);
  return matmul(softmax(scores, scores.rank() - 1), v);
}

template <typename T>
Tensor<T> project_out(const Tensor<T>& y, const AttentionParams<T>& p) {
  return p.out_proj ? linear(y, p.wo, p.bo) : y;
}

}  // namespace detail

// Multi-head self-attention over x[.., n, D]; leading axes are independent
// token sets sharing the parameters. `additive_mask`, when given, is an
// [n, n] constant added to every head's logits. Residual is the caller's job.
template <typename T>
Tensor<T> mhsa(const Tensor<T>& x, const AttentionParams<T>& p, const Tensor<T>* additive_mask = nullptr) {
  if (x.rank() < 2) throw DimensionError("mhsa: expected [.., n, D], got " + shape_str(x.shape()));
  const std::size_t d = x.shape().back(), n = x.shape()[x.rank() - 2];
  if (p.heads == 0 || d % p.heads)
    throw ConfigError("mhsa: D=" + std::to_string(d) + " not divisible by heads=" + std::to_string(p.heads));
  if (d != p.dim()) throw DimensionError("mhsa: input " + shape_str(x.shape()) + " vs D=" + std::to_string(p.dim()));
  const std::size_t lead = x.numel() / (n * d);
  const Tensor<T> x3 = reshape(x, {lead, n, d});
  const Tensor<T> q = detail::split_heads(linear(x3, p.wq, p.bq), p.heads);
  const Tensor<T> k = detail::split_heads(matmul(x3, p.wk), p.heads);
  const Tensor<T> v = detail::split_heads(linear(x3, p.wv, p.bv), p.heads);
  const Tensor<T> y = detail::merge_heads(detail::attend(q, k, v, p, additive_mask));
  return reshape(detail::project_out(y, p), x.shape());
}

// Key mask for cross-attention: true marks a real (attendable) token.
inline void require_some_key(const std::vector<bool>& key_mask) {
  for (bool b : key_mask)
    if (b) return;
  throw ContractError("empty expression: every language token is masked");
}

template <typename T>
Tensor<T> key_mask_logits(const std::vector<bool>& key_mask) {
  Tensor<T> m({key_mask.size()});
  for (std::size_t i = 0; i < key_mask.size(); ++i) m[i] = key_mask[i] ? T(0) : masked_logit<T>();
  return m;
}

// Multi-head cross-attention: queries from visual tokens x[n, D], keys and
// values from language tokens lang[N_l, D]. Padding keys never contribute.
template <typename T>
Tensor<T> mhca(const Tensor<T>& x, const Tensor<T>& lang, const AttentionParams<T>& p,
               const std::vector<bool>& key_mask) {
  if (x.rank() != 2 || lang.rank() != 2 || x.dim(1) != lang.dim(1))
    throw DimensionError("mhca: expected x[n,D], lang[N,D]; got " + shape_str(x.shape()) + ", " +
                         shape_str(lang.shape()));
  if (key_mask.size() != lang.dim(0)) throw DimensionError("mhca: key mask length does not match language tokens");
  require_some_key(key_mask);
  const std::size_t d = x.dim(1);
  if (p.heads == 0 || d % p.heads)
    throw ConfigError("mhca: D=" + std::to_string(d) + " not divisible by heads=" + std::to_string(p.heads));
  const Tensor<T> x3 = reshape(x, {1, x.dim(0), d});
  const Tensor<T> l3 = reshape(lang, {1, lang.dim(0), d});
  const Tensor<T> q = detail::split_heads(linear(x3, p.wq, p.bq), p.heads);
  const Tensor<T> k = detail::split_heads(matmul(l3, p.wk), p.heads);
  const Tensor<T> v = detail::split_heads(linear(l3, p.wv, p.bv), p.heads);
  const Tensor<T> mask = key_mask_logits<T>(key_mask);
  const Tensor<T> y = detail::merge_heads(detail::attend(q, k, v, p, &mask));
  return reshape(detail::project_out(y, p), x.shape());
}

template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const FfnParams<T>& p) {
  return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

// image[C, H, W] -> token grid [H/P, W/P, D].
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& image, const PatchEmbedParams<T>& p) {
  if (image.rank() != 3) throw DimensionError("patch_embed: expected [C,H,W], got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2), P = p.patch;
  PatchEmbedParams<T>::check_patch_geometry(h, w, P);
  if (p.pos.dim(0) != h / P || p.pos.dim(1) != w / P)
    throw DimensionError("patch_embed: positional grid " + shape_str(p.pos.shape()) + " does not match image " +
                         shape_str(image.shape()));
  const std::size_t d = p.proj.dim(1);
  const Tensor<T> tokens = matmul(extract_patches(image, P), p.proj);
  return reshape(add(tokens, reshape(p.pos, {(h / P) * (w / P), d})), {h / P, w / P, d});
}

}  // namespace plvl
