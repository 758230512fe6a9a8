#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "plvl/data_io.hpp"

using namespace plvl;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("plvl_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Caption parsed word by word, independent of the generator's bookkeeping.
struct ParsedCaption {
  std::string color, shape;
  std::string relation;  // empty, "left", "right", "above", "below"
  std::string lm_color, lm_shape;
};

ParsedCaption parse_caption(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> w{std::istream_iterator<std::string>(is), {}};
  std::size_t i = 0;
  if (i < w.size() && w[i] == "the") ++i;
  ParsedCaption c;
  c.color = w.at(i++);
  c.shape = w.at(i++);
  if (i < w.size()) {
    c.relation = w.at(i++);
    if (c.relation == "left" || c.relation == "right") EXPECT_EQ(w.at(i++), "of");
    EXPECT_EQ(w.at(i++), "the");
    c.lm_color = w.at(i++);
    c.lm_shape = w.at(i++);
  }
  EXPECT_EQ(i, w.size()) << text;
  return c;
}

}  // namespace

TEST(Rle, KnownEncoding) {
  Mask m(4, 4);
  for (std::size_t r = 0; r < 4; ++r) m.at(r, 1) = 1;  // second column
  EXPECT_EQ(rle_to_string(rle_encode(m)), "4 4 8");
  Mask corner(2, 2);
  corner.at(0, 0) = 1;
  EXPECT_EQ(rle_to_string(rle_encode(corner)), "0 1 3");
  EXPECT_EQ(rle_to_string(rle_encode(Mask(3, 3))), "9");
}

TEST(Rle, RoundTripRandomMasks) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t h = 1 + rng() % 9, w = 1 + rng() % 9;
    Mask m(h, w);
    std::bernoulli_distribution on(trial % 3 == 0 ? 0.9 : 0.3);
    for (auto& p : m.pixels) p = on(rng) ? 1 : 0;
    const auto counts = rle_encode(m);
    std::size_t total = 0;
    for (auto c : counts) total += c;
    ASSERT_EQ(total, h * w);
    for (std::size_t i = 1; i < counts.size(); ++i) ASSERT_GT(counts[i], 0u);
    ASSERT_EQ(rle_decode(rle_from_string(rle_to_string(counts)), h, w), m);
  }
}

TEST(Rle, RejectsBadCounts) {
  EXPECT_THROW(rle_decode({3, 3}, 2, 2), FormatError);
  EXPECT_THROW(rle_decode({1, 1}, 2, 2), FormatError);
  EXPECT_THROW(rle_from_string("1 x 2"), FormatError);
}

TEST(Pnm, ExactPgmBytesAndReadBack) {
  const auto dir = scratch_dir("pnm");
  const Image8 img{1, 2, 3, {0, 10, 20, 255, 128, 7}};
  write_image_pgm((dir / "a.pgm").string(), img);
  const std::string want = std::string("P5\n3 2\n255\n") + std::string("\x00\x0a\x14\xff\x80\x07", 6);
  EXPECT_EQ(file_bytes(dir / "a.pgm"), want);
  EXPECT_EQ(read_image((dir / "a.pgm").string()), img);

  std::ofstream(dir / "c.ppm", std::ios::binary) << "P6\n# comment\n1 1\n255\n" << std::string("\x01\x02\x03", 3);
  const auto rgb = read_image((dir / "c.ppm").string());
  EXPECT_EQ(rgb.channels, 3u);
  EXPECT_EQ(rgb.bytes, (std::vector<std::uint8_t>{1, 2, 3}));

  std::ofstream(dir / "t.pgm", std::ios::binary) << "P5\n4 4\n255\nab";
  EXPECT_THROW(read_image((dir / "t.pgm").string()), FormatError);
  std::ofstream(dir / "x.pgm", std::ios::binary) << "P2\n1 1\n255\n0";
  EXPECT_THROW(read_image((dir / "x.pgm").string()), FormatError);
  EXPECT_THROW(write_image_pgm((dir / "bad.pgm").string(), Image8{3, 1, 1, {1, 2, 3}}), FormatError);
}

TEST(Images, ScaledGrayAndResize) {
  const auto g = scaled_gray({1.0, 2.0, 3.0}, 1, 3);
  EXPECT_EQ(g.bytes, (std::vector<std::uint8_t>{0, 128, 255}));
  EXPECT_EQ(scaled_gray({4.0, 4.0}, 1, 2).bytes, (std::vector<std::uint8_t>{0, 0}));
  Image img(1, 2, 2);
  img.data = {0.f, 1.f, 0.f, 1.f};
  const Image up = resize_bilinear(img, 2, 4);
  EXPECT_FLOAT_EQ(up.at(0, 0, 0), 0.f);
  EXPECT_FLOAT_EQ(up.at(0, 0, 1), 0.25f);
  EXPECT_FLOAT_EQ(up.at(0, 0, 3), 1.f);
  Mask m(2, 2);
  m.at(1, 0) = 1;
  const Mask big = resize_nearest(m, 4, 4);
  EXPECT_EQ(big.area(), 4u);
  EXPECT_EQ(big.at(3, 1), 1);
}

TEST(Synthetic, DeterministicAndSplitSeparated) {
  SynthOptions o;
  const auto a = gen_synthetic_items(7, 20, o);
  const auto b = gen_synthetic_items(7, 20, o);
  const auto v = gen_synthetic_items(7, 20, o, Split::val);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(a[i].scene, b[i].scene);
    EXPECT_EQ(a[i].sample.image, b[i].sample.image);
    EXPECT_NE(a[i].sample.image, v[i].sample.image);
  }
  // Item i does not depend on how many items were requested.
  EXPECT_EQ(gen_synthetic_items(7, 1, o, Split::train, 13)[0].scene, a[13].scene);
  EXPECT_THROW(gen_synthetic(7, 0, 64, 64), ContractError);
}

TEST(Synthetic, CaptionsResolveToExactlyTheTarget) {
  SynthOptions o;
  const auto items = gen_synthetic_items(0, 1000, o);
  std::set<std::string> kinds;
  std::size_t relational = 0, max_objects = 0;
  for (const auto& it : items) {
    const auto& s = it.scene;
    const auto& g = it.sample;
    max_objects = std::max(max_objects, s.objects.size());
    const ParsedCaption c = parse_caption(g.expression);
    auto name_of = [](const SceneObject& ob) {
      return std::pair<std::string, std::string>(kColorNames[static_cast<std::size_t>(ob.color)],
                                                 kShapeNames[static_cast<std::size_t>(ob.shape)]);
    };
    auto holds = [&](const std::string& rel, const SceneObject& a, const SceneObject& b) {
      const double m = 4.0;
      if (rel == "left") return a.cx + m < b.cx;
      if (rel == "right") return a.cx > b.cx + m;
      if (rel == "above") return a.cy + m < b.cy;
      return a.cy > b.cy + m;
    };
    std::vector<std::size_t> matches;
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      if (name_of(s.objects[i]) != std::pair(c.color, c.shape)) continue;
      bool ok = c.relation.empty();
      for (std::size_t j = 0; j < s.objects.size() && !ok; ++j)
        ok = j != i && name_of(s.objects[j]) == std::pair(c.lm_color, c.lm_shape) &&
             holds(c.relation, s.objects[i], s.objects[j]);
      if (ok) matches.push_back(i);
    }
    ASSERT_EQ(matches.size(), 1u) << g.expression;
    const auto& target = s.objects[matches[0]];
    kinds.insert(c.color + " " + c.shape);
    relational += c.relation.empty() ? 0 : 1;

    // The mask covers the referent: its centroid sits at the object's center
    // and its pixels carry the object's color.
    ASSERT_GT(g.gt_mask.area(), 0u);
    double sr = 0, sc = 0;
    const auto rgb = color_rgb(target.color);
    for (std::size_t r = 0; r < g.gt_mask.height; ++r)
      for (std::size_t col = 0; col < g.gt_mask.width; ++col)
        if (g.gt_mask.at(r, col)) {
          sr += static_cast<double>(r) + 0.5;
          sc += static_cast<double>(col) + 0.5;
          for (std::size_t ch = 0; ch < 3; ++ch) ASSERT_NEAR(g.image.at(ch, r, col), rgb[ch], 0.035);
        }
    const double area = static_cast<double>(g.gt_mask.area());
    EXPECT_NEAR(sc / area, target.cx, target.shape == ShapeKind::triangle ? 1.5 : 0.75);
    EXPECT_NEAR(sr / area, target.cy, target.shape == ShapeKind::triangle ? 4.0 : 0.75);
    EXPECT_EQ(g.gt_box, mask_bounding_box(g.gt_mask));
  }
  EXPECT_EQ(kinds.size(), 12u);
  EXPECT_LE(max_objects, 3u);
  EXPECT_EQ(max_objects, 3u);
  EXPECT_GT(relational, 100u);
  EXPECT_LT(relational, 900u);
}

TEST(Jsonl, SaveLoadRoundTrip) {
  const auto dir = scratch_dir("jsonl");
  const auto samples = gen_synthetic(3, 5, 64, 64);
  save_jsonl((dir / "d.jsonl").string(), samples);
  const auto back = load_jsonl((dir / "d.jsonl").string(), 64, 64);
  ASSERT_EQ(back.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(back[i].expression, samples[i].expression);
    EXPECT_EQ(back[i].gt_mask, samples[i].gt_mask);
    EXPECT_EQ(back[i].gt_box, samples[i].gt_box);
    EXPECT_EQ(back[i].image, samples[i].image);
  }
  // Loading at a different resolution resizes image and mask together.
  const auto small = load_jsonl((dir / "d.jsonl").string(), 32, 32);
  EXPECT_EQ(small[0].image.height, 32u);
  EXPECT_EQ(small[0].gt_mask.width, 32u);
}

TEST(Jsonl, MalformedInputsFail) {
  const auto dir = scratch_dir("jsonl_bad");
  std::ofstream(dir / "a.jsonl") << "{\"image\": \"nope.ppm\", \"expression\": \"x\", \"box\": [0.5,0.5,0.1,0.1], "
                                    "\"mask_rle\": \"4\", \"mask_size\": [2,2]}\n";
  EXPECT_THROW(load_jsonl((dir / "a.jsonl").string(), 8, 8), FormatError);
  std::ofstream(dir / "b.jsonl") << "{not json\n";
  EXPECT_THROW(load_jsonl((dir / "b.jsonl").string(), 8, 8), FormatError);
  std::ofstream(dir / "c.jsonl") << "{\"image\": 3}\n";
  EXPECT_THROW(load_jsonl((dir / "c.jsonl").string(), 8, 8), FormatError);
  EXPECT_THROW(load_jsonl((dir / "missing.jsonl").string(), 8, 8), FormatError);
}
