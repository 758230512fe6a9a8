#include <set>

#include <gtest/gtest.h>

#include "plvl/config.hpp"
#include "plvl/predict.hpp"
#include "plvl/train.hpp"

using namespace plvl;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch = 4;
  c.dim = 8;
  c.heads = 2;
  c.ffn_ratio = 2;
  c.text_layers = 1;
  c.max_tokens = 8;
  c.vocab_size = synthetic_vocabulary().size();
  c.schedule = make_schedule(2, 2);
  return c;
}

}  // namespace

TEST(Schedule, WarmupThenCosine) {
  TrainOptions o;
  o.steps = 110;
  o.lr = 1.0;
  o.warmup = 10;
  o.schedule = "cosine";
  EXPECT_DOUBLE_EQ(o.lr_at(0), 0.1);
  EXPECT_DOUBLE_EQ(o.lr_at(9), 1.0);
  EXPECT_DOUBLE_EQ(o.lr_at(10), 1.0);
  EXPECT_NEAR(o.lr_at(60), 0.5, 1e-12);
  EXPECT_LT(o.lr_at(109), 1e-3);
  o.schedule = "constant";
  EXPECT_DOUBLE_EQ(o.lr_at(100), 1.0);
  o.schedule = "linear";
  EXPECT_THROW(o.validate(), ConfigError);
}

TEST(Train, RepeatedBatchLossDecreases) {
  const auto vocab = synthetic_vocabulary();
  auto model = Model<float>::create(tiny_config(), 0);
  AdamW<float> optim(AdamWConfig{3e-3});
  TrainOptions o;
  o.steps = 10;
  o.batch_size = 4;
  o.lr = 3e-3;
  const auto data = SampleStream::dataset(gen_synthetic(5, 4, 16, 16), 0);
  std::vector<double> losses;
  train(model, optim, data, vocab, o, 0, [&](std::size_t, const LossReport& r) { losses.push_back(r.total); });
  ASSERT_EQ(losses.size(), 10u);
  EXPECT_LT(losses.back(), losses.front());
  EXPECT_EQ(optim.steps(), 10u);
}

TEST(Train, NonFiniteLossRaisesWithStep) {
  const auto vocab = synthetic_vocabulary();
  auto model = Model<float>::create(tiny_config(), 0);
  AdamW<float> optim;
  TrainOptions o;
  o.steps = 5;
  o.batch_size = 2;
  o.lr = 1e30;
  const auto data = SampleStream::synthetic(0, SynthOptions{16, 16});
  try {
    train(model, optim, data, vocab, o, 0);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_GE(e.step(), 2u);
  }
}

TEST(Train, DatasetStreamVisitsEveryItemPerEpoch) {
  auto samples = gen_synthetic(1, 5, 16, 16);
  for (std::size_t i = 0; i < 5; ++i) samples[i].expression = std::to_string(i);
  const auto s = SampleStream::dataset(samples, 3);
  for (std::size_t epoch = 0; epoch < 3; ++epoch) {
    std::set<std::string> seen;
    for (std::size_t i = 0; i < 5; ++i) seen.insert(s(epoch * 5 + i).expression);
    EXPECT_EQ(seen.size(), 5u);
  }
  EXPECT_THROW(SampleStream::dataset({}, 0), ContractError);
}

TEST(Evaluate, DeterministicAndRejectsEmpty) {
  const auto vocab = synthetic_vocabulary();
  const auto model = Model<float>::create(tiny_config(), 4);
  const auto val = gen_synthetic(0, 6, 16, 16, Split::val);
  const auto a = evaluate(model, val, vocab), b = evaluate(model, val, vocab);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_EQ(a.n, 6u);
  EXPECT_THROW(evaluate(model, {}, vocab), ContractError);
}

TEST(Scoremap, BrightestPixelInDecodedCellEvenOnTies) {
  Tensor<float> logits({2, 2}, std::vector<float>{1.f, 3.f, 3.f, -1.f});
  const auto img = scoremap_image(logits, 4, 1, 0);
  ASSERT_EQ(img.width, 8u);
  std::size_t best = 0;
  for (std::size_t i = 1; i < img.bytes.size(); ++i)
    if (img.bytes[i] > img.bytes[best]) best = i;
  EXPECT_EQ((best / img.width) / 4, 0u);
  EXPECT_EQ((best % img.width) / 4, 1u);
  EXPECT_EQ(img.bytes[4 * 8 + 0], 254);  // the tied cell is capped below the winner
}

TEST(Overlay, DrawsBoxAndMaskEdge) {
  Image img(3, 8, 8, 0.5f);
  Mask m(8, 8);
  for (std::size_t r = 2; r < 5; ++r)
    for (std::size_t c = 2; c < 5; ++c) m.at(r, c) = 1;
  const auto o = overlay_image(img, Box::from_corners(0.0, 0.0, 0.25, 0.25), m);
  auto px = [&](std::size_t r, std::size_t c) { return &o.bytes[(r * 8 + c) * 3]; };
  EXPECT_EQ(px(0, 0)[0], 255);  // box corner
  EXPECT_EQ(px(3, 3)[1], 128);  // mask interior keeps the image
  EXPECT_EQ(px(4, 4)[1], 255);  // mask edge
}

TEST(Config, OverridesAndValidation) {
  RunConfig cfg;
  cfg.set_from_text("optim.lr", "0.01");
  EXPECT_DOUBLE_EQ(cfg.get<double>("optim.lr"), 0.01);
  cfg.set_from_text("output.dir", "some/where");
  EXPECT_EQ(cfg.get<std::string>("output.dir"), "some/where");
  EXPECT_THROW(cfg.set_from_text("optim.lr_typo", "1"), ConfigError);
  EXPECT_THROW(cfg.set_from_text("optim.lr", "fast"), ConfigError);
  cfg.set_from_text("optim.steps", "-3");
  EXPECT_THROW(cfg.count("optim.steps"), ConfigError);
  cfg.set_from_text("optim.batch_size", "2.5");
  EXPECT_THROW(cfg.count("optim.batch_size"), ConfigError);

  const auto m = RunConfig().model(15);
  EXPECT_EQ(m.schedule.global_indexes, (std::vector<std::size_t>{3, 6, 9, 12, 13, 14, 15}));
  RunConfig bad;
  bad.set_from_text("blocks.global_indexes", "[3, 20]");
  EXPECT_THROW(bad.model(15), ConfigError);
  RunConfig scale;
  scale.set_from_text("model.attention_scale", "none");
  EXPECT_THROW(scale.model(15), ConfigError);
}
