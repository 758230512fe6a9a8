#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace plvl {

// Center-form box (cx, cy, w, h). Normalized to [0,1] unless stated.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x1() const { return cx - w / 2; }
  double y1() const { return cy - h / 2; }
  double x2() const { return cx + w / 2; }
  double y2() const { return cy + h / 2; }
  double area() const { return std::max(w, 0.0) * std::max(h, 0.0); }

  static Box from_corners(double x1, double y1, double x2, double y2) {
    return {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
  }

  bool operator==(const Box&) const = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  return iw * ih;
}

// IoU with 0 for an empty union.
inline double box_iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Generalized IoU in (-1, 1]; two zero-area boxes give 0.
inline double box_giou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double ew = std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1());
  const double eh = std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1());
  const double enclosing = std::max(ew, 0.0) * std::max(eh, 0.0);
  if (enclosing <= 0) return 0.0;
  const double iou = uni > 0 ? inter / uni : 0.0;
  return iou - (enclosing - uni) / enclosing;
}

// Row-major binary mask.
struct Mask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w, 0) {}

  std::uint8_t& at(std::size_t row, std::size_t col) { return pixels[row * width + col]; }
  std::uint8_t at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  std::size_t area() const {
    return static_cast<std::size_t>(std::count_if(pixels.begin(), pixels.end(), [](auto p) { return p != 0; }));
  }
  bool operator==(const Mask&) const = default;
};

// |A & B| / |A | B| with empty-vs-empty = 1.
inline double mask_iou(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) throw std::invalid_argument("mask_iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const bool pa = a.pixels[i] != 0, pb = b.pixels[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Tight normalized bounding box of the foreground; pixel (r, c) spans
// [c, c+1) x [r, r+1).
inline Box mask_bounding_box(const Mask& m) {
  std::size_t r0 = m.height, r1 = 0, c0 = m.width, c1 = 0;
  for (std::size_t r = 0; r < m.height; ++r)
    for (std::size_t c = 0; c < m.width; ++c)
      if (m.at(r, c)) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  if (r0 > r1) return {};
  const auto W = static_cast<double>(m.width), H = static_cast<double>(m.height);
  return Box::from_corners(static_cast<double>(c0) / W, static_cast<double>(r0) / H, static_cast<double>(c1 + 1) / W,
                           static_cast<double>(r1 + 1) / H);
}

}  // namespace plvl
