#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "plvl/layers.hpp"
#include "plvl/text_encoder.hpp"

namespace plvl {

// Which 1-based block positions are global (language-reading) blocks.
struct BlockSchedule {
  std::size_t total = 0;
  std::vector<std::size_t> global_indexes;  // sorted, 1-based

  std::size_t num_global() const { return global_indexes.size(); }
  std::size_t num_local() const { return total - global_indexes.size(); }
  bool is_global(std::size_t index1) const {
    return std::binary_search(global_indexes.begin(), global_indexes.end(), index1);
  }
};

// Without explicit indexes, up to three global blocks go to the tail and the
// rest each close a group of two local blocks from the front: (8, 7) gives
// {3,6,9,12,13,14,15}, (12, 3) gives {13,14,15}.
inline BlockSchedule make_schedule(std::size_t num_local, std::size_t num_global,
                                   std::optional<std::vector<std::size_t>> indexes = std::nullopt) {
  BlockSchedule s;
  s.total = num_local + num_global;
  if (s.total == 0) throw ConfigError("schedule: no blocks");
  if (indexes) {
    std::set<std::size_t> uniq(indexes->begin(), indexes->end());
    if (uniq.size() != indexes->size()) throw ConfigError("schedule: duplicate global indexes");
    if (uniq.size() != num_global)
      throw ConfigError("schedule: " + std::to_string(uniq.size()) + " indexes given for M=" +
                        std::to_string(num_global));
    if (!uniq.empty() && (*uniq.begin() == 0 || *uniq.rbegin() > s.total))
      throw ConfigError("schedule: indexes must lie in [1, " + std::to_string(s.total) + "]");
    s.global_indexes.assign(uniq.begin(), uniq.end());
    return s;
  }
  const std::size_t tail = std::min<std::size_t>(num_global, 3);
  const std::size_t grouped = num_global - tail;
  if (2 * grouped > num_local)
    throw ConfigError("schedule: N=" + std::to_string(num_local) + " local blocks cannot host " +
                      std::to_string(grouped) + " local-global groups; pass indexes explicitly");
  for (std::size_t g = 1; g <= grouped; ++g) s.global_indexes.push_back(3 * g);
  for (std::size_t t = tail; t > 0; --t) s.global_indexes.push_back(s.total - t + 1);
  return s;
}

// Parameters of one backbone block. Global blocks additionally own the
// cross-attention sublayer.
template <typename T>
struct BlockParams {
  bool global = false;
  LayerNormParams<T> ln_attn, ln_cross, ln_ffn;
  AttentionParams<T> attn, cross;
  FfnParams<T> ffn;

  static BlockParams create(ParamInit& init, bool global, std::size_t dim, std::size_t heads, std::size_t ffn_ratio) {
    BlockParams b;
    b.global = global;
    b.ln_attn = LayerNormParams<T>::create(dim);
    b.attn = AttentionParams<T>::create(init, dim, heads, InitKind::trunc_normal);
    if (global) {
      b.ln_cross = LayerNormParams<T>::create(dim);
      b.cross = AttentionParams<T>::create(init, dim, heads, InitKind::uniform);
    }
    b.ln_ffn = LayerNormParams<T>::create(dim);
    b.ffn = FfnParams<T>::create(init, dim, ffn_ratio);
    return b;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    ln_attn.visit(prefix + ".ln_attn", f);
    attn.visit(prefix + ".attn", f);
    if (global) {
      ln_cross.visit(prefix + ".ln_cross", f);
      cross.visit(prefix + ".cross", f);
    }
    ln_ffn.visit(prefix + ".ln_ffn", f);
    ffn.visit(prefix + ".ffn", f);
  }
};

// Quadrant-split block: the four quadrants run the same pre-norm attention
// and FFN sublayers independently, then are stitched back in place.
template <typename T>
Tensor<T> local_block(const Tensor<T>& grid, const BlockParams<T>& p) {
  if (grid.rank() != 3) throw DimensionError("local_block: expected [H,W,D], got " + shape_str(grid.shape()));
  const std::size_t h = grid.dim(0), w = grid.dim(1);
  if (h % 2 || w % 2)
    throw ConfigError("local_block: grid " + std::to_string(h) + "x" + std::to_string(w) + " is not even");
  Tensor<T> x = quadrant_split(grid);
  x = add(x, mhsa(layer_norm(x, p.ln_attn), p.attn));
  x = add(x, ffn(layer_norm(x, p.ln_ffn), p.ffn));
  return quadrant_merge(x, h, w);
}

// Full self-attention, then cross-attention into the language tokens, then
// FFN, each as a pre-norm residual sublayer.
template <typename T>
Tensor<T> global_block(const Tensor<T>& grid, const LanguageTokens<T>& lang, const BlockParams<T>& p) {
  if (grid.rank() != 3) throw DimensionError("global_block: expected [H,W,D], got " + shape_str(grid.shape()));
  if (!p.global) throw ConfigError("global_block: parameters lack a cross-attention sublayer");
  const std::size_t d = grid.dim(2);
  Tensor<T> x = reshape(grid, {grid.dim(0) * grid.dim(1), d});
  x = add(x, mhsa(layer_norm(x, p.ln_attn), p.attn));
  x = add(x, mhca(layer_norm(x, p.ln_cross), lang.embeddings, p.cross, lang.mask));
  x = add(x, ffn(layer_norm(x, p.ln_ffn), p.ffn));
  return reshape(x, grid.shape());
}

struct BackboneConfig {
  std::size_t image_size = 64;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t dim = 64;
  std::size_t heads = 2;
  std::size_t ffn_ratio = 4;
  BlockSchedule schedule = make_schedule(8, 7);
};

template <typename T>
struct BackboneParams {
  PatchEmbedParams<T> embed;
  std::vector<BlockParams<T>> blocks;
  LayerNormParams<T> final_ln;

  static BackboneParams create(ParamInit& init, const BackboneConfig& c) {
    BackboneParams p;
    p.embed = PatchEmbedParams<T>::create(init, c.channels, c.image_size, c.image_size, c.patch, c.dim);
    for (std::size_t i = 1; i <= c.schedule.total; ++i)
      p.blocks.push_back(BlockParams<T>::create(init, c.schedule.is_global(i), c.dim, c.heads, c.ffn_ratio));
    p.final_ln = LayerNormParams<T>::create(c.dim);
    return p;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    embed.visit(prefix + ".embed", f);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + ".block" + std::to_string(i + 1), f);
    final_ln.visit(prefix + ".final_ln", f);
  }
};

// Per-forward instrumentation.
struct BackboneStats {
  std::size_t local_blocks = 0;
  std::size_t global_blocks = 0;
  std::size_t language_reads = 0;
};

template <typename T>
Tensor<T> backbone_forward(const Tensor<T>& image, const LanguageTokens<T>& lang, const BackboneParams<T>& p,
                           BackboneStats* stats = nullptr) {
  Tensor<T> x = patch_embed(image, p.embed);
  for (const auto& block : p.blocks) {
    if (block.global) {
      x = global_block(x, lang, block);
      if (stats) {
        ++stats->global_blocks;
        ++stats->language_reads;
      }
    } else {
      x = local_block(x, block);
      if (stats) ++stats->local_blocks;
    }
  }
  return layer_norm(x, p.final_ln);
}

}  // namespace plvl
