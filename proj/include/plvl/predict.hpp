#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "plvl/model.hpp"

namespace plvl {

// Center-map probabilities min-max scaled to [0, 255] and blown up to image
// resolution, one P x P block per cell. Only the decoded cell may reach 255,
// so the brightest pixel always lies in it even when probabilities tie.
template <typename T>
Image8 scoremap_image(const Tensor<T>& center_logits, std::size_t patch, std::size_t best_x, std::size_t best_y) {
  const std::size_t hg = center_logits.dim(0), wg = center_logits.dim(1);
  std::vector<double> probs(hg * wg);
  for (std::size_t i = 0; i < probs.size(); ++i)
    probs[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(center_logits[i])));
  Image8 cells = scaled_gray(probs, hg, wg);
  const std::size_t best = best_y * wg + best_x;
  for (std::size_t i = 0; i < cells.bytes.size(); ++i)
    cells.bytes[i] = i == best ? std::uint8_t{255} : std::min<std::uint8_t>(cells.bytes[i], 254);
  Image8 out{1, hg * patch, wg * patch, std::vector<std::uint8_t>(hg * wg * patch * patch)};
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c) out.bytes[r * out.width + c] = cells.bytes[(r / patch) * wg + c / patch];
  return out;
}

// Input image with the mask boundary in green and the decoded box in red.
inline Image8 overlay_image(const Image& image, const Box& box, const Mask& mask) {
  Image8 out = to_image8(image);
  if (out.channels == 1) {
    Image8 rgb{3, out.height, out.width, std::vector<std::uint8_t>(out.bytes.size() * 3)};
    for (std::size_t i = 0; i < out.bytes.size(); ++i)
      for (std::size_t ch = 0; ch < 3; ++ch) rgb.bytes[i * 3 + ch] = out.bytes[i];
    out = std::move(rgb);
  }
  auto paint = [&](long r, long c, std::uint8_t red, std::uint8_t green, std::uint8_t blue) {
    if (r < 0 || c < 0 || r >= static_cast<long>(out.height) || c >= static_cast<long>(out.width)) return;
    auto* px = &out.bytes[(static_cast<std::size_t>(r) * out.width + static_cast<std::size_t>(c)) * 3];
    px[0] = red;
    px[1] = green;
    px[2] = blue;
  };
  const long h = static_cast<long>(mask.height), w = static_cast<long>(mask.width);
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      if (!mask.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c))) continue;
      const bool edge = r == 0 || c == 0 || r == h - 1 || c == w - 1 ||
                        !mask.at(static_cast<std::size_t>(r - 1), static_cast<std::size_t>(c)) ||
                        !mask.at(static_cast<std::size_t>(r + 1), static_cast<std::size_t>(c)) ||
                        !mask.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c - 1)) ||
                        !mask.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c + 1));
      if (edge) paint(r, c, 0, 255, 0);
    }
  const double W = static_cast<double>(out.width), H = static_cast<double>(out.height);
  const long x1 = std::lround(box.x1() * W), x2 = std::lround(box.x2() * W) - 1;
  const long y1 = std::lround(box.y1() * H), y2 = std::lround(box.y2() * H) - 1;
  for (long c = x1; c <= x2; ++c) {
    paint(y1, c, 255, 0, 0);
    paint(y2, c, 255, 0, 0);
  }
  for (long r = y1; r <= y2; ++r) {
    paint(r, x1, 255, 0, 0);
    paint(r, x2, 255, 0, 0);
  }
  return out;
}

template <typename T>
nlohmann::ordered_json prediction_json(const Prediction<T>& p, const std::string& expression, std::size_t unknown) {
  return {{"expression", expression},
          {"box", {p.box.cx, p.box.cy, p.box.w, p.box.h}},
          {"box_xyxy", {p.box.x1(), p.box.y1(), p.box.x2(), p.box.y2()}},
          {"center_cell", {p.decoded.cell_x, p.decoded.cell_y}},
          {"mask_area", p.mask.area()},
          {"unknown_tokens", unknown}};
}

// Writes box.json, mask.pgm, scoremap.pgm and overlay.ppm into dir.
template <typename T>
Prediction<T> write_prediction(const std::string& dir, const Model<T>& model, const Image& image,
                               const std::string& expression, const Vocabulary& vocab) {
  const TokenIds tokens = tokenize(expression, vocab, model.config().max_tokens);
  const Prediction<T> p = model.predict(image, tokens);
  const std::filesystem::path out(dir);
  std::filesystem::create_directories(out);
  {
    std::ofstream os(out / "box.json");
    if (!os) throw FormatError("cannot write " + (out / "box.json").string());
    os << prediction_json(p, expression, tokens.unknown).dump(2) << '\n';
  }
  write_image_pgm((out / "mask.pgm").string(), mask_image(p.mask));
  write_image_pgm((out / "scoremap.pgm").string(),
                  scoremap_image(p.raw.center, model.config().patch, p.decoded.cell_x, p.decoded.cell_y));
  write_image_ppm((out / "overlay.ppm").string(), overlay_image(image, p.box, p.mask));
  return p;
}

}  // namespace plvl
