#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace plvl;
using plvl::testing::max_abs_diff;
using plvl::testing::random_tensor;

namespace {

// Attention weights large enough that the softmax is far from uniform.
AttentionParams<double> random_attention(std::mt19937_64& rng, std::size_t d, std::size_t heads) {
  ParamInit init(rng());
  auto p = AttentionParams<double>::create(init, d, heads, InitKind::uniform);
  for (Tensor<double>* t : {&p.wq, &p.bq, &p.wk, &p.wv, &p.bv, &p.wo, &p.bo})
    *t = random_tensor(rng, t->shape(), -0.6, 0.6);
  return p;
}

}  // namespace

TEST(Attention, SelfAttentionMatchesScalarReference) {
  std::mt19937_64 rng(11);
  for (std::size_t heads : {1, 2, 4}) {
    auto p = random_attention(rng, 8, heads);
    const auto x = random_tensor(rng, {6, 8}, -2, 2);
    const auto got = mhsa(x, p);
    const auto want = plvl::testing::naive_attention(x.values(), x.values(), 6, 6, p, [](auto, auto) { return true; });
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12) << "heads=" << heads;
  }
}

TEST(Attention, ScaleAndOutputProjectionFlags) {
  std::mt19937_64 rng(12);
  auto p = random_attention(rng, 8, 2);
  p.scale = AttentionScale::model_dim;
  p.out_proj = false;
  const auto x = random_tensor(rng, {5, 8}, -2, 2);
  const auto got = mhsa(x, p);
  const auto want = plvl::testing::naive_attention(x.values(), x.values(), 5, 5, p, [](auto, auto) { return true; });
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Attention, LeadingAxesAreIndependentSets) {
  std::mt19937_64 rng(13);
  auto p = random_attention(rng, 4, 2);
  const auto x = random_tensor(rng, {3, 5, 4});
  const auto y = mhsa(x, p);
  for (std::size_t s = 0; s < 3; ++s) {
    Tensor<double> xs({5, 4}, std::vector<double>(x.values().begin() + s * 20, x.values().begin() + (s + 1) * 20));
    const auto ys = mhsa(xs, p);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(y[s * 20 + i], ys[i], 1e-13);
  }
}

TEST(Attention, CrossAttentionIgnoresPaddingKeys) {
  std::mt19937_64 rng(14);
  auto p = random_attention(rng, 8, 2);
  const auto x = random_tensor(rng, {4, 8});
  auto lang = random_tensor(rng, {5, 8});
  const std::vector<bool> mask{true, false, true, true, false};
  const auto got = mhca(x, lang, p, mask);
  const auto want =
      plvl::testing::naive_attention(x.values(), lang.values(), 4, 5, p, [&](auto, std::size_t j) { return mask[j]; });
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);

  // Arbitrary (even huge) padding contents leave the output bit-identical.
  for (std::size_t k = 0; k < 8; ++k) {
    lang.at({1, k}) = 1e6;
    lang.at({4, k}) = -3e5;
  }
  EXPECT_EQ(mhca(x, lang, p, mask).values(), got.values());
  EXPECT_THROW(mhca(x, lang, p, std::vector<bool>(5, false)), ContractError);
  EXPECT_THROW(mhca(x, lang, p, std::vector<bool>(4, true)), DimensionError);
}

TEST(Attention, RejectsIndivisibleHeads) {
  ParamInit init(1);
  EXPECT_THROW(AttentionParams<double>::create(init, 6, 4, InitKind::uniform), ConfigError);
}

TEST(Ffn, MatchesScalarReference) {
  std::mt19937_64 rng(15);
  ParamInit init(2);
  auto p = FfnParams<double>::create(init, 3, 2);
  for (Tensor<double>* t : {&p.w1, &p.b1, &p.w2, &p.b2}) *t = random_tensor(rng, t->shape());
  const auto x = random_tensor(rng, {2, 3}, -2, 2);
  const auto y = ffn(x, p);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t o = 0; o < 3; ++o) {
      double s = p.b2[o];
      for (std::size_t hdn = 0; hdn < 6; ++hdn) {
        double a = p.b1[hdn];
        for (std::size_t k = 0; k < 3; ++k) a += x.at({r, k}) * p.w1.at({k, hdn});
        s += 0.5 * a * (1 + std::erf(a / std::sqrt(2.0))) * p.w2.at({hdn, o});
      }
      EXPECT_NEAR(y.at({r, o}), s, 1e-12);
    }
  EXPECT_THROW(FfnParams<double>::create(init, 3, 0), ConfigError);
}

TEST(PatchEmbed, ProjectsPatchesAndAddsPositions) {
  std::mt19937_64 rng(16);
  ParamInit init(3);
  auto p = PatchEmbedParams<double>::create(init, 2, 8, 8, 4, 5);
  const auto img = random_tensor(rng, {2, 8, 8}, 0, 1);
  const auto y = patch_embed(img, p);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 5}));
  // Token (1, 0): rows 4..7, cols 0..3.
  for (std::size_t o = 0; o < 5; ++o) {
    double s = p.pos.at({1, 0, o});
    std::size_t f = 0;
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) s += img.at({c, 4 + i, j}) * p.proj.at({f++, o});
    EXPECT_NEAR(y.at({1, 0, o}), s, 1e-12);
  }
  EXPECT_THROW(PatchEmbedParams<double>::create(init, 3, 12, 12, 4, 8), ConfigError);  // 3x3 grid
  EXPECT_THROW(patch_embed(random_tensor(rng, {2, 16, 16}), p), DimensionError);
}

TEST(TextEncoder, TokenizeNormalizesAndPads) {
  const Vocabulary v({"red", "circle"});
  const auto t = tokenize("The RED, circle!", v, 5);
  EXPECT_EQ(t.ids, (std::vector<std::size_t>{Vocabulary::kUnk, 2, 3, Vocabulary::kPad, Vocabulary::kPad}));
  EXPECT_EQ(t.mask, (std::vector<bool>{true, true, true, false, false}));
  EXPECT_EQ(t.unknown, 1u);
  EXPECT_TRUE(tokenize("  ,. ", v, 5).empty());
  EXPECT_EQ(tokenize("a b c d e f", v, 3).ids.size(), 3u);
}

TEST(TextEncoder, VocabularyFileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "plvl_vocab_test.txt").string();
  const Vocabulary v({"alpha", "beta"});
  v.save(path);
  const auto w = Vocabulary::load(path);
  EXPECT_EQ(w.size(), 4u);
  EXPECT_EQ(w.id("beta"), 3u);
  EXPECT_EQ(w.id("gamma"), Vocabulary::kUnk);
  std::ofstream(path) << "a\na\n";
  EXPECT_THROW(Vocabulary::load(path), FormatError);
  std::filesystem::remove(path);
}

TEST(TextEncoder, RealTokensIgnorePaddingRows) {
  ParamInit init(4);
  auto p = TextEncoderParams<double>::create(init, {6, 5, 8, 2, 2, 2});
  const Vocabulary v({"a", "b", "c", "d"});
  const auto tok = tokenize("a c d", v, 5);
  const auto base = encode(tok, p);
  ASSERT_EQ(base.embeddings.shape(), (Shape{5, 8}));
  // Perturb the PAD embedding: the three real rows must not move.
  for (std::size_t k = 0; k < 8; ++k) p.embed.at({Vocabulary::kPad, k}) += 3.0;
  const auto moved = encode(tok, p);
  for (std::size_t i = 0; i < 3 * 8; ++i) EXPECT_EQ(base.embeddings[i], moved.embeddings[i]);
  EXPECT_THROW(encode(tokenize("", v, 5), p), ContractError);
}
