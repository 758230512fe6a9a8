#pragma once

#include <cmath>
#include <string>

#include "plvl/geometry.hpp"
#include "plvl/layers.hpp"

namespace plvl {

template <typename T>
struct ConvParams {
  Tensor<T> w, b;  // w[Cout, Cin, k, k], b[Cout]

  static ConvParams create(ParamInit& init, std::size_t cin, std::size_t cout, std::size_t k, T bias = T(0)) {
    return {init.uniform<T>({cout, cin, k, k}), ParamInit::constant<T>({cout}, bias)};
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }
};

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  return conv2d(x, p.w, p.b);
}

// Logit prior for the center map so the initial foreground probability is
// about 0.1 per cell.
inline constexpr double kCenterPriorBias = -2.19;

// Two channel groups of D/2: {mask, center} and {offset, size}. Each group
// has a shared 3x3 stem; each task then has its own 3x3 conv and a reducer.
template <typename T>
struct HeadParams {
  std::size_t patch = 8;
  ConvParams<T> stem_seg_ctr, stem_off_size;
  ConvParams<T> seg, ctr, off, size;
  ConvParams<T> seg_out;   // 5x5, half -> P*P
  ConvParams<T> ctr_out;   // 1x1, half -> 1
  ConvParams<T> off_out;   // 1x1, half -> 2
  ConvParams<T> size_out;  // 1x1, half -> 2

  static HeadParams create(ParamInit& init, std::size_t dim, std::size_t patch) {
    if (dim % 2) throw ConfigError("head: D=" + std::to_string(dim) + " must be even");
    const std::size_t half = dim / 2;
    HeadParams p;
    p.patch = patch;
    p.stem_seg_ctr = ConvParams<T>::create(init, half, half, 3);
    p.stem_off_size = ConvParams<T>::create(init, half, half, 3);
    p.seg = ConvParams<T>::create(init, half, half, 3);
    p.ctr = ConvParams<T>::create(init, half, half, 3);
    p.off = ConvParams<T>::create(init, half, half, 3);
    p.size = ConvParams<T>::create(init, half, half, 3);
    p.seg_out = ConvParams<T>::create(init, half, patch * patch, 5);
    p.ctr_out = ConvParams<T>::create(init, half, 1, 1, static_cast<T>(kCenterPriorBias));
    p.off_out = ConvParams<T>::create(init, half, 2, 1);
    p.size_out = ConvParams<T>::create(init, half, 2, 1);
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    stem_seg_ctr.visit(prefix + ".stem_seg_ctr", f);
    stem_off_size.visit(prefix + ".stem_off_size", f);
    seg.visit(prefix + ".seg", f);
    ctr.visit(prefix + ".ctr", f);
    off.visit(prefix + ".off", f);
    size.visit(prefix + ".size", f);
    seg_out.visit(prefix + ".seg_out", f);
    ctr_out.visit(prefix + ".ctr_out", f);
    off_out.visit(prefix + ".off_out", f);
    size_out.visit(prefix + ".size_out", f);
  }
};

template <typename T>
struct HeadOutputs {
  Tensor<T> center;       // [Hg, Wg] logits
  Tensor<T> offset;       // [Hg, Wg, 2] (dx, dy), grid units
  Tensor<T> size;         // [Hg, Wg, 2] (w, h), grid units
  Tensor<T> mask_logits;  // [H, W]
};

// Expands per-token P*P channels [P*P, Hg, Wg] into pixel logits [Hg*P, Wg*P]:
// pixel (i, j) comes from token (i/P, j/P), channel (i mod P)*P + (j mod P).
template <typename T>
Tensor<T> assemble_mask(const Tensor<T>& token_channels, std::size_t patch) {
  const Tensor<T> m = depth_to_space(token_channels, patch);
  return reshape(m, {m.dim(1), m.dim(2)});
}

template <typename T>
HeadOutputs<T> head_forward(const Tensor<T>& tokens, const HeadParams<T>& p) {
  if (tokens.rank() != 3) throw DimensionError("head: expected [Hg,Wg,D], got " + shape_str(tokens.shape()));
  const std::size_t hg = tokens.dim(0), wg = tokens.dim(1), d = tokens.dim(2);
  if (d % 2) throw ConfigError("head: D=" + std::to_string(d) + " must be even");
  const std::size_t half = d / 2;
  const Tensor<T> g1 = permute(slice_last(tokens, 0, half), {2, 0, 1});
  const Tensor<T> g2 = permute(slice_last(tokens, half, d), {2, 0, 1});
  const Tensor<T> s1 = gelu(conv2d(g1, p.stem_seg_ctr));
  const Tensor<T> s2 = gelu(conv2d(g2, p.stem_off_size));
  const Tensor<T> t_seg = gelu(conv2d(s1, p.seg));
  const Tensor<T> t_ctr = gelu(conv2d(s1, p.ctr));
  const Tensor<T> t_off = gelu(conv2d(s2, p.off));
  const Tensor<T> t_size = gelu(conv2d(s2, p.size));
  HeadOutputs<T> out;
  out.center = reshape(conv2d(t_ctr, p.ctr_out), {hg, wg});
  out.offset = permute(conv2d(t_off, p.off_out), {1, 2, 0});
  out.size = permute(conv2d(t_size, p.size_out), {1, 2, 0});
  out.mask_logits = assemble_mask(conv2d(t_seg, p.seg_out), p.patch);
  return out;
}

// Decoded box in grid units plus the selected center cell.
struct DecodedBox {
  std::size_t cell_x = 0, cell_y = 0;  // column, row of the center-map argmax
  Box grid;                            // (x, y, w, h) in grid units

  Box normalized(std::size_t grid_w, std::size_t grid_h) const {
    const auto gw = static_cast<double>(grid_w), gh = static_cast<double>(grid_h);
    return {grid.cx / gw, grid.cy / gh, grid.w / gw, grid.h / gh};
  }
};

// Row-major-first argmax of the center map; x = col + dx, y = row + dy,
// sizes clamped at 0.
template <typename T>
DecodedBox decode_box(const Tensor<T>& center, const Tensor<T>& offset, const Tensor<T>& size) {
  if (center.rank() != 2 || offset.rank() != 3 || size.rank() != 3 || offset.dim(0) != center.dim(0) ||
      offset.dim(1) != center.dim(1) || size.dim(0) != center.dim(0) || size.dim(1) != center.dim(1) ||
      offset.dim(2) != 2 || size.dim(2) != 2)
    throw DimensionError("decode_box: map shapes disagree: " + shape_str(center.shape()) + ", " +
                         shape_str(offset.shape()) + ", " + shape_str(size.shape()));
  const std::size_t wg = center.dim(1);
  std::size_t best = 0;
  for (std::size_t i = 1; i < center.numel(); ++i)
    if (center[i] > center[best]) best = i;
  DecodedBox d;
  d.cell_y = best / wg;
  d.cell_x = best % wg;
  d.grid.cx = static_cast<double>(d.cell_x) + static_cast<double>(offset[best * 2]);
  d.grid.cy = static_cast<double>(d.cell_y) + static_cast<double>(offset[best * 2 + 1]);
  d.grid.w = std::max(static_cast<double>(size[best * 2]), 0.0);
  d.grid.h = std::max(static_cast<double>(size[best * 2 + 1]), 0.0);
  return d;
}

// sigmoid(logit) >= 0.5 is foreground.
template <typename T>
Mask binarize_mask(const Tensor<T>& mask_logits) {
  if (mask_logits.rank() != 2) throw DimensionError("binarize_mask: expected [H,W]");
  Mask m(mask_logits.dim(0), mask_logits.dim(1));
  for (std::size_t i = 0; i < m.pixels.size(); ++i)
    m.pixels[i] = T(1) / (T(1) + std::exp(-mask_logits[i])) >= T(0.5) ? 1 : 0;
  return m;
}

}  // namespace plvl
