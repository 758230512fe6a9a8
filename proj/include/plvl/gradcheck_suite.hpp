#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plvl/model.hpp"

namespace plvl {

namespace gcs {

using Td = Tensor<double>;
using Params = std::vector<NamedTensor<double>>;

// Random inputs. `away` keeps |x| >= 0.2 to stay clear of kinks at zero.
inline Td rand_param(std::mt19937_64& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = d(rng);
  return Td::parameter(std::move(s), std::move(v));
}

inline Td away(std::mt19937_64& rng, Shape s) {
  Td t = rand_param(rng, std::move(s), 0.2, 1.0);
  std::bernoulli_distribution flip(0.5);
  for (auto& x : t.values())
    if (flip(rng)) x = -x;
  return t;
}

// Contracts an output against fixed random weights so every element's
// gradient is exercised independently.
inline Td probe(const Td& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  Td w(out.shape());
  for (auto& x : w.values()) x = d(rng);
  return sum(mul(out, w));
}

using Check = std::function<GradcheckReport(std::uint64_t seed, const GradcheckOptions&)>;

// Builds a case from an input factory and a forward returning the output
// to be probed.
inline Check unary_case(std::function<Params(std::mt19937_64&)> make,
                        std::function<Td(const Params&)> fwd, bool probe_output = true) {
  return [make, fwd, probe_output](std::uint64_t seed, const GradcheckOptions& o) {
    std::mt19937_64 rng(seed);
    Params ps = make(rng);
    auto loss = [&] { return probe_output ? probe(fwd(ps), seed) : fwd(ps); };
    return check_gradients(loss, ps, o);
  };
}

// Moves initialized parameters to a generic point: small-init weights give
// near-constant attention and tiny LayerNorm variance, where finite
// differences lose their accuracy. Projections are drawn to roughly
// preserve activation variance so a deep residual stack stays well scaled.
inline void generic_point(Params& ps, std::mt19937_64& rng, double gain = 1.0) {
  auto ends_with = [](const std::string& s, const char* suffix) {
    const std::string t(suffix);
    return s.size() >= t.size() && s.compare(s.size() - t.size(), t.size(), t) == 0;
  };
  for (auto& p : ps) {
    const Shape& s = p.tensor.shape();
    double lo = -0.5, hi = 0.5;
    if (ends_with(p.name, "gamma")) {
      lo = 0.5;
      hi = 1.5;
    } else if (ends_with(p.name, ".embed") || ends_with(p.name, ".pos")) {
      lo = -1.0;
      hi = 1.0;
    } else if (s.size() >= 2) {
      const std::size_t fan_in = s.size() == 4 ? s[1] * s[2] * s[3] : s[0];
      hi = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
      lo = -hi;
    }
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : p.tensor.values()) v = d(rng);
  }
}

// Scale of the generic point, picked on seeds disjoint from the suite's.
inline constexpr double kGenericPointGain = 0.7;

inline ModelConfig toy_model_config() {
  ModelConfig c;
  c.image_size = 8;
  c.patch = 4;  // 2x2 token grid
  c.dim = 8;
  c.heads = 2;
  c.ffn_ratio = 2;
  c.text_layers = 1;
  c.max_tokens = 6;
  c.vocab_size = synthetic_vocabulary().size();
  c.schedule = make_schedule(8, 7);
  return c;
}

inline Mask toy_mask(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> r0(0, h / 2), c0(0, w / 2), ext(2, h / 2);
  const std::size_t top = r0(rng), left = c0(rng), hh = ext(rng), ww = ext(rng);
  Mask m(h, w);
  for (std::size_t r = top; r < std::min(h, top + hh); ++r)
    for (std::size_t c = left; c < std::min(w, left + ww); ++c) m.pixels[r * w + c] = 1;
  return m;
}

}  // namespace gcs

struct GradcheckCase {
  std::string name;
  gcs::Check run;
};

inline std::vector<GradcheckCase> gradcheck_cases(double gain = gcs::kGenericPointGain) {
  using namespace gcs;
  std::vector<GradcheckCase> cases;
  auto add_case = [&](std::string name, Check c) { cases.push_back({std::move(name), std::move(c)}); };

  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb)
      add_case("matmul_t" + std::to_string(ta) + std::to_string(tb),
               unary_case(
                   [ta, tb](std::mt19937_64& r) {
                     return Params{{"a", rand_param(r, ta ? Shape{2, 4, 3} : Shape{2, 3, 4})},
                                   {"b", rand_param(r, tb ? Shape{5, 4} : Shape{4, 5})}};
                   },
                   [ta, tb](const Params& p) { return matmul(p[0].tensor, p[1].tensor, ta, tb); }));
  add_case("matmul_batched", unary_case(
                                 [](std::mt19937_64& r) {
                                   return Params{{"a", rand_param(r, {3, 2, 4})}, {"b", rand_param(r, {3, 5, 4})}};
                                 },
                                 [](const Params& p) { return matmul(p[0].tensor, p[1].tensor, false, true); }));
  add_case("linear", unary_case(
                         [](std::mt19937_64& r) {
                           return Params{{"x", rand_param(r, {3, 4})},
                                         {"w", rand_param(r, {4, 5})},
                                         {"b", rand_param(r, {5})}};
                         },
                         [](const Params& p) { return linear(p[0].tensor, p[1].tensor, p[2].tensor); }));

  auto pair = [](std::mt19937_64& r) {
    return Params{{"a", rand_param(r, {2, 3})}, {"b", rand_param(r, {2, 3})}};
  };
  add_case("add", unary_case(pair, [](const Params& p) { return add(p[0].tensor, p[1].tensor); }));
  add_case("sub", unary_case(pair, [](const Params& p) { return sub(p[0].tensor, p[1].tensor); }));
  add_case("mul", unary_case(pair, [](const Params& p) { return mul(p[0].tensor, p[1].tensor); }));
  add_case("div", unary_case(
                      [](std::mt19937_64& r) { return Params{{"a", rand_param(r, {2, 3})}, {"b", away(r, {2, 3})}}; },
                      [](const Params& p) { return div(p[0].tensor, p[1].tensor); }));
  // Operands kept at least 0.2 apart.
  auto separated = [](std::mt19937_64& r) {
    Td a = rand_param(r, {2, 3});
    Td b = away(r, {2, 3});
    for (std::size_t i = 0; i < b.numel(); ++i) b[i] += a[i];
    return Params{{"a", a}, {"b", b}};
  };
  add_case("minimum", unary_case(separated, [](const Params& p) { return minimum(p[0].tensor, p[1].tensor); }));
  add_case("maximum", unary_case(separated, [](const Params& p) { return maximum(p[0].tensor, p[1].tensor); }));

  auto one = [](std::mt19937_64& r) { return Params{{"x", rand_param(r, {2, 3})}}; };
  auto one_away = [](std::mt19937_64& r) { return Params{{"x", away(r, {2, 3})}}; };
  add_case("scale", unary_case(one, [](const Params& p) { return scale(p[0].tensor, -1.7); }));
  add_case("add_scalar", unary_case(one, [](const Params& p) { return add_scalar(p[0].tensor, 0.3); }));
  add_case("sigmoid", unary_case(one, [](const Params& p) { return sigmoid(p[0].tensor); }));
  add_case("log", unary_case([](std::mt19937_64& r) { return Params{{"x", rand_param(r, {2, 3}, 0.2, 2.0)}}; },
                             [](const Params& p) { return log(p[0].tensor); }));
  add_case("exp", unary_case(one, [](const Params& p) { return exp(p[0].tensor); }));
  add_case("relu", unary_case(one_away, [](const Params& p) { return relu(p[0].tensor); }));
  add_case("abs", unary_case(one_away, [](const Params& p) { return abs(p[0].tensor); }));
  add_case("square", unary_case(one, [](const Params& p) { return square(p[0].tensor); }));
  add_case("gelu", unary_case([](std::mt19937_64& r) { return Params{{"x", rand_param(r, {2, 3}, -3.0, 3.0)}}; },
                              [](const Params& p) { return gelu(p[0].tensor); }));
  add_case("sum", unary_case(one, [](const Params& p) { return scale(sum(p[0].tensor), 0.7); }, false));
  add_case("mean", unary_case(one, [](const Params& p) { return scale(mean(p[0].tensor), 0.7); }, false));
  add_case("add_bias", unary_case(
                           [](std::mt19937_64& r) {
                             return Params{{"x", rand_param(r, {2, 3, 4})}, {"b", rand_param(r, {4})}};
                           },
                           [](const Params& p) { return add_bias(p[0].tensor, p[1].tensor); }));
  add_case("add_constant", unary_case(
                               [](std::mt19937_64& r) { return Params{{"x", rand_param(r, {2, 3, 4})}}; },
                               [](const Params& p) {
                                 Td m({3, 4});
                                 for (std::size_t i = 0; i < m.numel(); ++i) m[i] = 0.1 * static_cast<double>(i);
                                 return add_constant(p[0].tensor, m);
                               }));
  add_case("softmax_last", unary_case([](std::mt19937_64& r) { return Params{{"x", rand_param(r, {2, 3, 4}, -2, 2)}}; },
                                      [](const Params& p) { return softmax(p[0].tensor, 2); }));
  add_case("softmax_mid", unary_case([](std::mt19937_64& r) { return Params{{"x", rand_param(r, {2, 3, 4}, -2, 2)}}; },
                                     [](const Params& p) { return softmax(p[0].tensor, 1); }));
  add_case("layer_norm", unary_case(
                             [](std::mt19937_64& r) {
                               return Params{{"x", rand_param(r, {3, 5}, -2, 2)},
                                             {"gamma", rand_param(r, {5}, 0.5, 1.5)},
                                             {"beta", rand_param(r, {5})}};
                             },
                             [](const Params& p) { return layer_norm(p[0].tensor, p[1].tensor, p[2].tensor); }));

  auto grid = [](std::mt19937_64& r) { return Params{{"x", rand_param(r, {4, 6, 3})}}; };
  add_case("reshape", unary_case(grid, [](const Params& p) { return reshape(p[0].tensor, {6, 12}); }));
  add_case("permute", unary_case(grid, [](const Params& p) { return permute(p[0].tensor, {2, 0, 1}); }));
  add_case("transpose", unary_case(one, [](const Params& p) { return transpose(p[0].tensor); }));
  add_case("take", unary_case(one, [](const Params& p) { return take(p[0].tensor, {5, 0, 5, 2}); }));
  add_case("take_rows", unary_case([](std::mt19937_64& r) { return Params{{"table", rand_param(r, {5, 3})}}; },
                                   [](const Params& p) { return take_rows(p[0].tensor, {4, 1, 4, 0}); }));
  add_case("slice_last", unary_case(grid, [](const Params& p) { return slice_last(p[0].tensor, 1, 3); }));
  add_case("quadrant_split_merge", unary_case(grid, [](const Params& p) {
             const Td parts = quadrant_split(p[0].tensor);
             return add(quadrant_merge(mul(parts, parts), 4, 6), p[0].tensor);
           }));
  add_case("depth_to_space", unary_case([](std::mt19937_64& r) { return Params{{"x", rand_param(r, {8, 2, 3})}}; },
                                        [](const Params& p) { return depth_to_space(p[0].tensor, 2); }));
  add_case("space_to_depth", unary_case([](std::mt19937_64& r) { return Params{{"x", rand_param(r, {2, 4, 6})}}; },
                                        [](const Params& p) { return space_to_depth(p[0].tensor, 2); }));
  add_case("extract_patches", unary_case([](std::mt19937_64& r) { return Params{{"img", rand_param(r, {2, 4, 8})}}; },
                                         [](const Params& p) { return extract_patches(p[0].tensor, 2); }));
  add_case("concat_last", unary_case(
                              [](std::mt19937_64& r) {
                                return Params{{"a", rand_param(r, {3, 2})}, {"b", rand_param(r, {3, 4})}};
                              },
                              [](const Params& p) { return concat_last(p[0].tensor, p[1].tensor); }));
  for (std::size_t k : {1, 3, 5})
    add_case("conv2d_k" + std::to_string(k), unary_case(
                                                  [k](std::mt19937_64& r) {
                                                    return Params{{"x", rand_param(r, {2, 4, 5})},
                                                                  {"w", rand_param(r, {3, 2, k, k})},
                                                                  {"b", rand_param(r, {3})}};
                                                  },
                                                  [](const Params& p) {
                                                    return conv2d(p[0].tensor, p[1].tensor, p[2].tensor);
                                                  }));

  // Layers
  auto attn_case = [&](std::string name, AttentionScale sc, bool out_proj, bool masked) {
    add_case(std::move(name), [sc, out_proj, masked](std::uint64_t seed, const GradcheckOptions& o) {
      std::mt19937_64 rng(seed);
      ParamInit init(seed);
      auto a = AttentionParams<double>::create(init, 8, 2, InitKind::trunc_normal);
      a.scale = sc;
      a.out_proj = out_proj;
      for (Td* t : {&a.wq, &a.wk, &a.wv, &a.wo}) *t = rand_param(rng, {8, 8}, -0.5, 0.5);
      for (Td* t : {&a.bq, &a.bv, &a.bo}) *t = rand_param(rng, {8}, -0.5, 0.5);
      Params ps{{"x", rand_param(rng, {2, 5, 8})}};
      a.visit("attn", [&](const std::string& n, Td& t) { ps.push_back({n, t}); });
      Td mask({5, 5});
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) mask[i * 5 + j] = (masked && (i + j) % 3 == 1) ? masked_logit<double>() : 0;
      return check_gradients([&] { return probe(mhsa(ps[0].tensor, a, masked ? &mask : nullptr), seed); }, ps, o);
    });
  };
  attn_case("mhsa", AttentionScale::per_head, true, false);
  attn_case("mhsa_masked", AttentionScale::per_head, true, true);
  attn_case("mhsa_model_dim_scale_no_out_proj", AttentionScale::model_dim, false, false);

  add_case("mhca", [](std::uint64_t seed, const GradcheckOptions& o) {
    std::mt19937_64 rng(seed);
    ParamInit init(seed);
    auto a = AttentionParams<double>::create(init, 8, 2, InitKind::uniform);
    for (Td* t : {&a.wq, &a.wk, &a.wv, &a.wo}) *t = rand_param(rng, {8, 8}, -0.5, 0.5);
    Params ps{{"x", rand_param(rng, {4, 8})}, {"lang", rand_param(rng, {5, 8})}};
    a.visit("cross", [&](const std::string& n, Td& t) { ps.push_back({n, t}); });
    const std::vector<bool> keys{true, true, false, true, false};
    return check_gradients([&] { return probe(mhca(ps[0].tensor, ps[1].tensor, a, keys), seed); }, ps, o);
  });

  add_case("ffn", [](std::uint64_t seed, const GradcheckOptions& o) {
    std::mt19937_64 rng(seed);
    ParamInit init(seed);
    auto f = FfnParams<double>::create(init, 4, 2);
    f.w1 = rand_param(rng, {4, 8});
    f.b1 = rand_param(rng, {8});
    f.w2 = rand_param(rng, {8, 4});
    Params ps{{"x", rand_param(rng, {3, 4})}};
    f.visit("ffn", [&](const std::string& n, Td& t) { ps.push_back({n, t}); });
    return check_gradients([&] { return probe(ffn(ps[0].tensor, f), seed); }, ps, o);
  });

  add_case("patch_embed", [](std::uint64_t seed, const GradcheckOptions& o) {
    std::mt19937_64 rng(seed);
    ParamInit init(seed);
    auto pe = PatchEmbedParams<double>::create(init, 3, 8, 8, 4, 8);
    Params ps{{"image", rand_param(rng, {3, 8, 8}, 0, 1)}};
    pe.visit("patch", [&](const std::string& n, Td& t) { ps.push_back({n, t}); });
    return check_gradients([&] { return probe(patch_embed(ps[0].tensor, pe), seed); }, ps, o);
  });

  add_case("text_encoder", [gain](std::uint64_t seed, const GradcheckOptions& o) {
    ParamInit init(seed);
    auto te = TextEncoderParams<double>::create(init, {7, 5, 8, 2, 1, 2});
    Params ps;
    te.visit("text", [&](const std::string& n, Td& t) { ps.push_back({n, t}); });
    std::mt19937_64 rng(seed);
    generic_point(ps, rng, gain);
    TokenIds tok{{3, 5, 3, 0, 0}, {true, true, true, false, false}, 0};
    return check_gradients([&] { return probe(encode(tok, te).embeddings, seed); }, ps, o);
  });

  auto block_case = [&](std::string name, bool global) {
    add_case(std::move(name), [global, gain](std::uint64_t seed, const GradcheckOptions& o) {
      std::mt19937_64 rng(seed);
      ParamInit init(seed);
      auto b = BlockParams<double>::create(init, global, 8, 2, 2);
      Params ps{{"grid", rand_param(rng, {4, 4, 8})}};
      const Td lang = rand_param(rng, {3, 8});
      if (global) ps.push_back({"lang", lang});
      b.visit("block", [&](const std::string& n, Td& t) { ps.push_back({n, t}); });
      Params weights(ps.begin() + 1 + (global ? 1 : 0), ps.end());
      generic_point(weights, rng, gain);
      const std::vector<bool> keys{true, false, true};
      return check_gradients(
          [&] {
            const Td out = global ? global_block(ps[0].tensor, LanguageTokens<double>{lang, keys}, b)
                                  : local_block(ps[0].tensor, b);
            return probe(out, seed);
          },
          ps, o);
    });
  };
  block_case("local_block", false);
  block_case("global_block", true);

  add_case("head", [gain](std::uint64_t seed, const GradcheckOptions& o) {
    std::mt19937_64 rng(seed);
    ParamInit init(seed);
    auto h = HeadParams<double>::create(init, 8, 2);
    Params ps{{"tokens", rand_param(rng, {2, 2, 8})}};
    h.visit("head", [&](const std::string& n, Td& t) { ps.push_back({n, t}); });
    Params weights(ps.begin() + 1, ps.end());
    generic_point(weights, rng, gain);
    return check_gradients(
        [&] {
          const auto out = head_forward(ps[0].tensor, h);
          return add(add(probe(out.center, seed), probe(out.offset, seed + 1)),
                     add(probe(out.size, seed + 2), probe(out.mask_logits, seed + 3)));
        },
        ps, o);
  });

  // Objectives
  add_case("focal_loss", [](std::uint64_t seed, const GradcheckOptions& o) {
    std::mt19937_64 rng(seed);
    Params ps{{"logits", rand_param(rng, {4, 5}, -3, 3)}};
    std::uniform_real_distribution<double> u(0.2, 0.8);
    const Td label = make_center_label<double>({u(rng), u(rng), 0.4, 0.5}, 4, 5, 1.0 / 6.0);
    return check_gradients([&] { return focal_loss(ps[0].tensor, label); }, ps, o);
  });
  add_case("binary_focal_loss", [](std::uint64_t seed, const GradcheckOptions& o) {
    std::mt19937_64 rng(seed);
    Params ps{{"logits", rand_param(rng, {4, 5}, -3, 3)}};
    Td target({4, 5});
    std::bernoulli_distribution b(0.4);
    for (auto& v : target.values()) v = b(rng) ? 1.0 : 0.0;
    return check_gradients([&] { return binary_focal_loss(ps[0].tensor, target); }, ps, o);
  });
  add_case("dice_loss", [](std::uint64_t seed, const GradcheckOptions& o) {
    std::mt19937_64 rng(seed);
    Params ps{{"logits", rand_param(rng, {4, 5}, -3, 3)}};
    Td target({4, 5});
    std::bernoulli_distribution b(0.4);
    for (auto& v : target.values()) v = b(rng) ? 1.0 : 0.0;
    return check_gradients([&] { return dice_loss(sigmoid(ps[0].tensor), target); }, ps, o);
  });
  add_case("giou", [](std::uint64_t seed, const GradcheckOptions& o) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> c(0.25, 0.75), s(0.1, 0.5);
    Params ps{{"pred", Td::parameter({4}, {c(rng), c(rng), s(rng), s(rng)})}};
    const Box gt{c(rng), c(rng), s(rng), s(rng)};
    return check_gradients([&] { return giou(ps[0].tensor, gt); }, ps, o);
  });
  add_case("grounding_loss", [](std::uint64_t seed, const GradcheckOptions& o) {
    std::mt19937_64 rng(seed);
    const Mask gt = toy_mask(8, 8, rng);
    const Box box = mask_bounding_box(gt);
    Params ps{{"center", rand_param(rng, {2, 2}, -3, 3)},
              {"offset", rand_param(rng, {2, 2, 2}, 0, 1)},
              {"size", rand_param(rng, {2, 2, 2}, 0.3, 1.5)},
              {"mask_logits", rand_param(rng, {8, 8}, -3, 3)}};
    return check_gradients(
        [&] {
          HeadOutputs<double> out{ps[0].tensor, ps[1].tensor, ps[2].tensor, ps[3].tensor};
          return grounding_loss(out, box, gt, LossWeights{}, 1.0 / 6.0).total;
        },
        ps, o);
  });

  // Whole model on a 2x2 token grid.
  add_case("composed_model", [gain](std::uint64_t seed, const GradcheckOptions& o) {
    std::mt19937_64 rng(seed);
    auto model = Model<double>::create(gcs::toy_model_config(), seed);
    const Vocabulary vocab = synthetic_vocabulary();
    const TokenIds tok = tokenize("the red circle above", vocab, model.config().max_tokens);
    const Mask gt = toy_mask(8, 8, rng);
    const Box box = mask_bounding_box(gt);
    Params ps{{"image", rand_param(rng, {3, 8, 8}, 0, 1)}};
    Params weights = model.parameters();
    generic_point(weights, rng, gain);
    // Pixel-aligned targets sit on multiples of 1/8 cell; offsets and sizes
    // start on odd multiples of 1/16 so no L1 or GIoU kink is within reach.
    for (auto& v : model.head().off_out.b.values()) v = 5.0 / 16.0;
    for (auto& v : model.head().size_out.b.values()) v = 17.0 / 16.0;
    ps.insert(ps.end(), weights.begin(), weights.end());
    return check_gradients(
        [&] {
          const auto out = model.forward(ps[0].tensor, tok);
          return grounding_loss(out, box, gt, LossWeights{}, model.config().sigma_scale).total;
        },
        ps, o);
  });
  return cases;
}

struct GradcheckSuiteResult {
  struct Entry {
    std::string name;
    std::size_t seeds = 0;
    std::size_t checked = 0;
    double max_rel_err = 0;
    std::string worst;
    std::string failure;
    bool pass = true;
  };
  std::vector<Entry> entries;
  bool pass = true;
  double max_rel_err = 0;
  double seconds = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["pass"] = pass;
    j["max_rel_err"] = max_rel_err;
    j["seconds"] = seconds;
    j["cases"] = nlohmann::ordered_json::array();
    for (const auto& e : entries)
      j["cases"].push_back({{"name", e.name},
                            {"pass", e.pass},
                            {"seeds", e.seeds},
                            {"checked", e.checked},
                            {"max_rel_err", e.max_rel_err},
                            {"worst", e.worst},
                            {"failure", e.failure}});
    return j;
  }
};

// Runs every case for seeds first_seed .. first_seed+seeds-1.
inline GradcheckSuiteResult run_gradcheck_suite(std::size_t seeds, std::uint64_t first_seed = 0,
                                                GradcheckOptions opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckSuiteResult res;
  for (const auto& c : gradcheck_cases()) {
    GradcheckSuiteResult::Entry e;
    e.name = c.name;
    for (std::size_t s = 0; s < seeds; ++s) {
      const GradcheckReport r = c.run(first_seed + s, opt);
      ++e.seeds;
      e.checked += r.checked;
      if (r.max_rel_err > e.max_rel_err || e.worst.empty()) {
        e.max_rel_err = std::max(e.max_rel_err, r.max_rel_err);
        char vals[96];
        std::snprintf(vals, sizeof vals, " analytic %.6e numeric %.6e", r.worst_analytic, r.worst_numeric);
        e.worst = "seed " + std::to_string(first_seed + s) + " " + r.worst + vals;
      }
      if (!r.failure.empty()) e.failure = r.failure;
      e.pass = e.pass && r.pass;
    }
    res.pass = res.pass && e.pass;
    res.max_rel_err = std::max(res.max_rel_err, e.max_rel_err);
    res.entries.push_back(std::move(e));
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace plvl
