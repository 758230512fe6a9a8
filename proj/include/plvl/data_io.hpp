#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plvl/geometry.hpp"
#include "plvl/numerics/tensor.hpp"
#include "plvl/text_encoder.hpp"

namespace plvl {

// Planar float image [C, H, W] with values in [0, 1].
struct Image {
  std::size_t channels = 3, height = 0, width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.f)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t r, std::size_t col) { return data[(c * height + r) * width + col]; }
  float at(std::size_t c, std::size_t r, std::size_t col) const { return data[(c * height + r) * width + col]; }
  bool operator==(const Image&) const = default;
};

template <typename T>
Tensor<T> image_tensor(const Image& img) {
  return Tensor<T>({img.channels, img.height, img.width}, std::vector<T>(img.data.begin(), img.data.end()));
}

struct GroundingSample {
  Image image;
  std::string expression;
  Box gt_box;  // normalized (cx, cy, w, h)
  Mask gt_mask;
};

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class ShapeKind { circle, square, triangle };
enum class ColorKind { red, green, blue, yellow };
enum class Relation { left_of, right_of, above, below };

inline constexpr std::array<const char*, 3> kShapeNames{"circle", "square", "triangle"};
inline constexpr std::array<const char*, 4> kColorNames{"red", "green", "blue", "yellow"};
inline constexpr std::array<const char*, 4> kRelationNames{"left of", "right of", "above", "below"};

struct SceneObject {
  ShapeKind shape;
  ColorKind color;
  double cx, cy;  // pixels
  double radius;  // pixels; squares and triangles span 2*radius

  bool same_kind(const SceneObject& o) const { return shape == o.shape && color == o.color; }
  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  std::size_t target = 0;
  std::size_t distractors = 0;
  bool with_article = true;
  std::optional<Relation> relation;
  std::size_t landmark = 0;  // meaningful only with a relation

  bool operator==(const SceneSpec&) const = default;
};

struct SynthOptions {
  std::size_t height = 64, width = 64;
  std::size_t max_distractors = 2;
  double duplicate_prob = 0.25;        // distractor repeats the target's kind
  double spontaneous_relation = 0.25;  // relational caption even when not needed
};

// Spatial relation with a margin of 4 px at 64 px scale.
inline bool relation_holds(Relation r, const SceneObject& a, const SceneObject& b, double margin) {
  switch (r) {
    case Relation::left_of: return a.cx + margin < b.cx;
    case Relation::right_of: return a.cx > b.cx + margin;
    case Relation::above: return a.cy + margin < b.cy;
    case Relation::below: return a.cy > b.cy + margin;
  }
  return false;
}

inline double relation_margin(const SynthOptions& o) { return 4.0 * static_cast<double>(o.width) / 64.0; }

inline std::string caption_for(const SceneSpec& s) {
  const auto& t = s.objects[s.target];
  std::string c = s.with_article ? "the " : "";
  c += std::string(kColorNames[static_cast<std::size_t>(t.color)]) + " " + kShapeNames[static_cast<std::size_t>(t.shape)];
  if (s.relation) {
    const auto& l = s.objects[s.landmark];
    c += std::string(" ") + kRelationNames[static_cast<std::size_t>(*s.relation)] + " the " +
         kColorNames[static_cast<std::size_t>(l.color)] + " " + kShapeNames[static_cast<std::size_t>(l.shape)];
  }
  return c;
}

// Objects the caption of `s` could denote.
inline std::vector<std::size_t> resolve_referents(const SceneSpec& s, double margin) {
  const auto& t = s.objects[s.target];
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    if (!s.objects[i].same_kind(t)) continue;
    if (!s.relation) {
      out.push_back(i);
      continue;
    }
    const auto& lm = s.objects[s.landmark];
    for (std::size_t j = 0; j < s.objects.size(); ++j) {
      if (j == i || !s.objects[j].same_kind(lm)) continue;
      if (relation_holds(*s.relation, s.objects[i], s.objects[j], margin)) {
        out.push_back(i);
        break;
      }
    }
  }
  return out;
}

inline std::vector<std::string> synthetic_vocabulary_words() {
  return {"the", "red", "green", "blue", "yellow", "circle", "square", "triangle",
          "left", "right", "of", "above", "below"};
}

inline Vocabulary synthetic_vocabulary() { return Vocabulary(synthetic_vocabulary_words()); }

inline bool inside_shape(const SceneObject& o, double x, double y) {
  const double dx = x - o.cx, dy = y - o.cy, r = o.radius;
  switch (o.shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return std::abs(dx) <= r && std::abs(dy) <= r;
    case ShapeKind::triangle: {
      // Apex at top, base at the bottom edge of the 2r x 2r cell.
      if (dy < -r || dy > r) return false;
      const double half = r * (dy + r) / (2 * r);
      return std::abs(dx) <= half;
    }
  }
  return false;
}

inline Mask rasterize(const SceneObject& o, std::size_t h, std::size_t w) {
  Mask m(h, w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      m.at(r, c) = inside_shape(o, static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5) ? 1 : 0;
  return m;
}

inline std::array<float, 3> color_rgb(ColorKind c) {
  switch (c) {
    case ColorKind::red: return {0.90f, 0.15f, 0.15f};
    case ColorKind::green: return {0.15f, 0.80f, 0.20f};
    case ColorKind::blue: return {0.20f, 0.30f, 0.95f};
    case ColorKind::yellow: return {0.95f, 0.90f, 0.15f};
  }
  return {};
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum class Split : std::uint64_t { train = 0, val = 1, test = 2 };

// Per-sample seed. Splits draw from disjoint streams of the same base seed.
inline std::uint64_t sample_seed(std::uint64_t base, Split split, std::uint64_t index) {
  return splitmix64(splitmix64(base ^ (static_cast<std::uint64_t>(split) << 62)) + index);
}

struct SyntheticItem {
  SceneSpec scene;
  GroundingSample sample;
};

namespace detail {

inline bool boxes_clear(const SceneObject& a, const SceneObject& b, double gap) {
  return std::abs(a.cx - b.cx) > a.radius + b.radius + gap || std::abs(a.cy - b.cy) > a.radius + b.radius + gap;
}

inline std::optional<SceneSpec> try_scene(std::mt19937_64& rng, const SynthOptions& o) {
  const double scale = static_cast<double>(o.width) / 64.0;
  std::uniform_int_distribution<int> shape_d(0, 2), color_d(0, 3), count_d(0, static_cast<int>(o.max_distractors));
  std::uniform_real_distribution<double> radius_d(5.0 * scale, 11.0 * scale), unit(0.0, 1.0);

  SceneSpec s;
  s.distractors = static_cast<std::size_t>(count_d(rng));
  SceneObject target{static_cast<ShapeKind>(shape_d(rng)), static_cast<ColorKind>(color_d(rng)), 0, 0, 0};
  std::vector<std::pair<ShapeKind, ColorKind>> kinds{{target.shape, target.color}};
  for (std::size_t i = 0; i < s.distractors; ++i) {
    const double u = unit(rng);
    auto sh = static_cast<ShapeKind>(shape_d(rng));
    auto co = static_cast<ColorKind>(color_d(rng));
    if (u < o.duplicate_prob) {
      sh = target.shape;
      co = target.color;
    } else if (u < o.duplicate_prob + 0.3) {
      sh = target.shape;  // same shape, usually another color
    } else if (u < o.duplicate_prob + 0.6) {
      co = target.color;  // same color, usually another shape
    }
    kinds.emplace_back(sh, co);
  }

  for (const auto& [sh, co] : kinds) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const double r = radius_d(rng);
      std::uniform_real_distribution<double> px(r + 1, static_cast<double>(o.width) - r - 1);
      std::uniform_real_distribution<double> py(r + 1, static_cast<double>(o.height) - r - 1);
      SceneObject cand{sh, co, px(rng), py(rng), r};
      placed = std::all_of(s.objects.begin(), s.objects.end(),
                           [&](const SceneObject& other) { return boxes_clear(cand, other, 2.0 * scale); });
      if (placed) s.objects.push_back(cand);
    }
    if (!placed) return std::nullopt;
  }
  s.target = 0;
  s.with_article = unit(rng) < 0.8;

  const double margin = relation_margin(o);
  const bool needs_relation = resolve_referents(s, margin).size() != 1;
  if (!needs_relation && unit(rng) >= o.spontaneous_relation) return s;

  // Try (relation, landmark) pairs in a random order until the caption
  // resolves to the target alone.
  std::vector<std::pair<Relation, std::size_t>> options;
  for (int r = 0; r < 4; ++r)
    for (std::size_t j = 1; j < s.objects.size(); ++j) options.emplace_back(static_cast<Relation>(r), j);
  std::shuffle(options.begin(), options.end(), rng);
  for (const auto& [rel, lm] : options) {
    if (s.objects[lm].same_kind(s.objects[0])) continue;
    SceneSpec cand = s;
    cand.relation = rel;
    cand.landmark = lm;
    const auto refs = resolve_referents(cand, margin);
    if (refs.size() == 1 && refs[0] == cand.target) return cand;
  }
  if (needs_relation) return std::nullopt;
  return s;
}

inline float quantize8(float v) { return std::round(std::clamp(v, 0.f, 1.f) * 255.f) / 255.f; }

}  // namespace detail

inline GroundingSample render_scene(const SceneSpec& s, std::mt19937_64& rng, const SynthOptions& o) {
  GroundingSample g;
  g.image = Image(3, o.height, o.width);
  std::uniform_real_distribution<float> bg_d(0.05f, 0.35f), noise(-0.03f, 0.03f);
  const float bg = bg_d(rng);
  for (auto& v : g.image.data) v = bg + noise(rng);
  for (std::size_t k = 0; k < s.objects.size(); ++k) {
    const Mask m = rasterize(s.objects[k], o.height, o.width);
    const auto rgb = color_rgb(s.objects[k].color);
    for (std::size_t r = 0; r < o.height; ++r)
      for (std::size_t c = 0; c < o.width; ++c)
        if (m.at(r, c))
          for (std::size_t ch = 0; ch < 3; ++ch) g.image.at(ch, r, c) = rgb[ch] + noise(rng);
    if (k == s.target) g.gt_mask = m;
  }
  for (auto& v : g.image.data) v = detail::quantize8(v);
  g.gt_box = mask_bounding_box(g.gt_mask);
  g.expression = caption_for(s);
  return g;
}

inline SyntheticItem synthesize(std::uint64_t seed, const SynthOptions& o) {
  std::mt19937_64 rng(seed);
  for (;;) {
    if (auto s = detail::try_scene(rng, o)) {
      GroundingSample g = render_scene(*s, rng, o);
      return {std::move(*s), std::move(g)};
    }
  }
}

inline std::vector<SyntheticItem> gen_synthetic_items(std::uint64_t seed, std::size_t n, const SynthOptions& o,
                                                      Split split = Split::train, std::size_t first = 0) {
  std::vector<SyntheticItem> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synthesize(sample_seed(seed, split, first + i), o));
  return out;
}

inline std::vector<GroundingSample> gen_synthetic(std::uint64_t seed, std::size_t n, std::size_t h, std::size_t w,
                                                  Split split = Split::train) {
  if (n == 0) throw ContractError("gen_synthetic: n must be >= 1");
  SynthOptions o;
  o.height = h;
  o.width = w;
  std::vector<GroundingSample> out;
  out.reserve(n);
  for (auto& item : gen_synthetic_items(seed, n, o, split)) out.push_back(std::move(item.sample));
  return out;
}

// ---------------------------------------------------------------------------
// Run-length masks: uncompressed counts, column-major, background first.

inline std::vector<std::size_t> rle_encode(const Mask& m) {
  std::vector<std::size_t> counts;
  std::uint8_t cur = 0;
  std::size_t run = 0;
  for (std::size_t c = 0; c < m.width; ++c)
    for (std::size_t r = 0; r < m.height; ++r) {
      const std::uint8_t v = m.at(r, c) ? 1 : 0;
      if (v != cur) {
        counts.push_back(run);
        run = 0;
        cur = v;
      }
      ++run;
    }
  counts.push_back(run);
  return counts;
}

inline Mask rle_decode(const std::vector<std::size_t>& counts, std::size_t h, std::size_t w) {
  Mask m(h, w);
  std::size_t pos = 0;
  std::uint8_t v = 0;
  for (std::size_t run : counts) {
    if (pos + run > h * w) throw FormatError("RLE counts exceed mask size " + std::to_string(h) + "x" + std::to_string(w));
    for (std::size_t k = 0; k < run; ++k, ++pos) m.at(pos % h, pos / h) = v;
    v ^= 1;
  }
  if (pos != h * w)
    throw FormatError("RLE counts cover " + std::to_string(pos) + " of " + std::to_string(h * w) + " pixels");
  return m;
}

inline std::string rle_to_string(const std::vector<std::size_t>& counts) {
  std::string s;
  for (std::size_t i = 0; i < counts.size(); ++i) s += (i ? " " : "") + std::to_string(counts[i]);
  return s;
}

inline std::vector<std::size_t> rle_from_string(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::size_t> counts;
  std::string tok;
  while (is >> tok) {
    if (tok.find_first_not_of("0123456789") != std::string::npos) throw FormatError("bad RLE count '" + tok + "'");
    counts.push_back(std::stoull(tok));
  }
  return counts;
}

// ---------------------------------------------------------------------------
// PNM images

// 8-bit image with interleaved channels (1 = gray, 3 = RGB).
struct Image8 {
  std::size_t channels = 1, height = 0, width = 0;
  std::vector<std::uint8_t> bytes;
  bool operator==(const Image8&) const = default;
};

inline void write_pnm(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw FormatError("PNM supports 1 or 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path);
  os << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()));
  if (!os) throw FormatError("write failed for " + path);
}

inline void write_image_pgm(const std::string& path, const Image8& img) {
  if (img.channels != 1) throw FormatError("PGM needs a single channel");
  write_pnm(path, img);
}

inline void write_image_ppm(const std::string& path, const Image8& img) {
  if (img.channels != 3) throw FormatError("PPM needs three channels");
  write_pnm(path, img);
}

inline Image8 read_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open image " + path);
  auto token = [&]() {
    std::string t;
    char ch;
    while (is.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  const std::string magic = token();
  Image8 img;
  if (magic == "P5")
    img.channels = 1;
  else if (magic == "P6")
    img.channels = 3;
  else
    throw FormatError("unsupported image magic '" + magic + "' in " + path);
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw FormatError("only 8-bit PNM supported: " + path);
  } catch (const std::logic_error&) {
    throw FormatError("malformed PNM header in " + path);
  }
  img.bytes.resize(img.channels * img.height * img.width);
  if (!is.read(reinterpret_cast<char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size())))
    throw FormatError("truncated PNM payload in " + path);
  return img;
}

inline Image8 to_image8(const Image& img) {
  Image8 out{img.channels, img.height, img.width, std::vector<std::uint8_t>(img.data.size())};
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t c = 0; c < img.width; ++c)
      for (std::size_t ch = 0; ch < img.channels; ++ch)
        out.bytes[(r * img.width + c) * img.channels + ch] =
            static_cast<std::uint8_t>(std::lround(std::clamp(img.at(ch, r, c), 0.f, 1.f) * 255.f));
  return out;
}

inline Image from_image8(const Image8& img) {
  Image out(img.channels, img.height, img.width);
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t c = 0; c < img.width; ++c)
      for (std::size_t ch = 0; ch < img.channels; ++ch)
        out.at(ch, r, c) = static_cast<float>(img.bytes[(r * img.width + c) * img.channels + ch]) / 255.f;
  return out;
}

// Min-max scaled single-channel map; a constant map becomes all zeros.
inline Image8 scaled_gray(const std::vector<double>& values, std::size_t h, std::size_t w) {
  Image8 img{1, h, w, std::vector<std::uint8_t>(h * w, 0)};
  if (values.empty()) return img;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (range <= 0) return img;
  for (std::size_t i = 0; i < values.size(); ++i)
    img.bytes[i] = static_cast<std::uint8_t>(std::lround((values[i] - *lo) / range * 255.0));
  return img;
}

inline Image8 mask_image(const Mask& m) {
  Image8 img{1, m.height, m.width, std::vector<std::uint8_t>(m.pixels.size())};
  for (std::size_t i = 0; i < m.pixels.size(); ++i) img.bytes[i] = m.pixels[i] ? 255 : 0;
  return img;
}

// Bilinear resize with half-pixel centers.
inline Image resize_bilinear(const Image& src, std::size_t h, std::size_t w) {
  if (src.height == h && src.width == w) return src;
  Image out(src.channels, h, w);
  const double sy = static_cast<double>(src.height) / static_cast<double>(h);
  const double sx = static_cast<double>(src.width) / static_cast<double>(w);
  for (std::size_t r = 0; r < h; ++r) {
    const double fy = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t c = 0; c < w; ++c) {
      const double fx = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < src.channels; ++ch) {
        const double v = (1 - wy) * ((1 - wx) * src.at(ch, y0, x0) + wx * src.at(ch, y0, x1)) +
                         wy * ((1 - wx) * src.at(ch, y1, x0) + wx * src.at(ch, y1, x1));
        out.at(ch, r, c) = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline Mask resize_nearest(const Mask& src, std::size_t h, std::size_t w) {
  if (src.height == h && src.width == w) return src;
  Mask out(h, w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const auto sr = std::min(src.height - 1, r * src.height / h);
      const auto sc = std::min(src.width - 1, c * src.width / w);
      out.at(r, c) = src.at(sr, sc);
    }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL datasets: one object per line,
//   {"image": path, "expression": str, "box": [cx,cy,w,h], "mask_rle": "counts",
//    "mask_size": [H, W]}
// Image paths are relative to the JSONL file's directory.

inline std::vector<GroundingSample> load_jsonl(const std::string& path, std::size_t height, std::size_t width) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open dataset " + path);
  const auto dir = std::filesystem::path(path).parent_path();
  std::vector<GroundingSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    nlohmann::json j;
    GroundingSample s;
    std::string image_path;
    std::vector<std::size_t> mask_size, counts;
    std::vector<double> box;
    try {
      j = nlohmann::json::parse(line);
      image_path = j.at("image").get<std::string>();
      s.expression = j.at("expression").get<std::string>();
      box = j.at("box").get<std::vector<double>>();
      mask_size = j.at("mask_size").get<std::vector<std::size_t>>();
      counts = rle_from_string(j.at("mask_rle").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed dataset line " + where + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("malformed dataset line " + where + ": " + e.what());
    }
    if (box.size() != 4 || mask_size.size() != 2) throw FormatError("malformed dataset line " + where);
    const auto full = dir / image_path;
    if (!std::filesystem::exists(full)) throw FormatError("missing image " + full.string() + " (" + where + ")");
    s.image = resize_bilinear(from_image8(read_image(full.string())), height, width);
    if (s.image.channels != 3) throw FormatError("expected an RGB image at " + full.string());
    try {
      s.gt_mask = resize_nearest(rle_decode(counts, mask_size[0], mask_size[1]), height, width);
    } catch (const FormatError& e) {
      throw FormatError(std::string(e.what()) + " (" + where + ")");
    }
    s.gt_box = {box[0], box[1], box[2], box[3]};
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_jsonl(const std::string& path, const std::vector<GroundingSample>& samples,
                       const std::string& image_subdir = "images") {
  const auto dir = std::filesystem::path(path).parent_path();
  std::filesystem::create_directories(dir / image_subdir);
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write dataset " + path);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.ppm", i);
    const std::string rel = (std::filesystem::path(image_subdir) / name).string();
    write_image_ppm((dir / rel).string(), to_image8(s.image));
    nlohmann::ordered_json j;
    j["image"] = rel;
    j["expression"] = s.expression;
    j["box"] = {s.gt_box.cx, s.gt_box.cy, s.gt_box.w, s.gt_box.h};
    j["mask_rle"] = rle_to_string(rle_encode(s.gt_mask));
    j["mask_size"] = {s.gt_mask.height, s.gt_mask.width};
    out << j.dump() << '\n';
  }
}

}  // namespace plvl
