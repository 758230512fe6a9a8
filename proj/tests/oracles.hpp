#pragma once

// Straightforward reference computations the library is checked against.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "plvl/model.hpp"

namespace plvl::testing {

// Scalar loops over [n, D] rows: per-head softmax(q k^T * s) v, keys limited
// to allowed(i, j).
template <typename Allowed>
std::vector<double> naive_attention(const std::vector<double>& xq, const std::vector<double>& xkv, std::size_t nq,
                                    std::size_t nk, const AttentionParams<double>& p, Allowed allowed) {
  const std::size_t d = p.dim(), h = p.heads, dh = d / h;
  auto proj = [&](const std::vector<double>& x, std::size_t n, const Tensor<double>& w, const Tensor<double>* b) {
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < d; ++o) {
        double s = b ? (*b)[o] : 0.0;
        for (std::size_t k = 0; k < d; ++k) s += x[i * d + k] * w[k * d + o];
        out[i * d + o] = s;
      }
    return out;
  };
  const auto q = proj(xq, nq, p.wq, &p.bq), k = proj(xkv, nk, p.wk, nullptr), v = proj(xkv, nk, p.wv, &p.bv);
  const double sc = 1.0 / std::sqrt(static_cast<double>(p.scale == AttentionScale::per_head ? dh : d));
  std::vector<double> y(nq * d, 0.0);
  for (std::size_t head = 0; head < h; ++head)
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> logits(nk, -std::numeric_limits<double>::infinity());
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < nk; ++j) {
        if (!allowed(i, j)) continue;
        double s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i * d + head * dh + c] * k[j * d + head * dh + c];
        logits[j] = s * sc;
        mx = std::max(mx, logits[j]);
      }
      double z = 0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t j = 0; j < nk; ++j)
        for (std::size_t c = 0; c < dh; ++c) y[i * d + head * dh + c] += logits[j] / z * v[j * d + head * dh + c];
    }
  if (!p.out_proj) return y;
  return proj(y, nq, p.wo, &p.bo);
}

// Local block computed on the whole grid at once: attention restricted to
// same-quadrant pairs by an additive block-diagonal mask.
template <typename T>
Tensor<T> masked_full_grid_block(const Tensor<T>& grid, const BlockParams<T>& p) {
  const std::size_t h = grid.dim(0), w = grid.dim(1), d = grid.dim(2), n = h * w;
  Tensor<T> mask({n, n});
  auto quadrant = [&](std::size_t t) { return (t / w >= h / 2 ? 2 : 0) + (t % w >= w / 2 ? 1 : 0); };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) mask[i * n + j] = quadrant(i) == quadrant(j) ? T(0) : masked_logit<T>();
  Tensor<T> x = reshape(grid, {n, d});
  x = add(x, mhsa(layer_norm(x, p.ln_attn), p.attn, &mask));
  x = add(x, ffn(layer_norm(x, p.ln_ffn), p.ffn));
  return reshape(x, {h, w, d});
}

// Exhaustive argmax scan; the first maximum in row-major order wins.
inline std::pair<std::size_t, std::size_t> scan_argmax(const std::vector<double>& center, std::size_t hg,
                                                       std::size_t wg) {
  double best = -std::numeric_limits<double>::infinity();
  std::size_t br = 0, bc = 0;
  for (std::size_t r = 0; r < hg; ++r)
    for (std::size_t c = 0; c < wg; ++c)
      if (center[r * wg + c] > best) {
        best = center[r * wg + c];
        br = r;
        bc = c;
      }
  return {br, bc};
}

}  // namespace plvl::testing
