#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "plvl/geometry.hpp"
#include "plvl/head.hpp"
#include "plvl/numerics.hpp"

namespace plvl {

namespace detail {

// log(sigmoid(z)) without overflow.
template <typename T>
T log_sigmoid(T z) {
  return -(std::max(-z, T(0)) + std::log1p(std::exp(-std::abs(z))));
}

template <typename T>
T sigmoid_scalar(T z) {
  return z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

template <typename T>
T ipow(T x, int n) {
  T r = T(1);
  for (int i = 0; i < n; ++i) r *= x;
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Center supervision

struct CenterCell {
  std::size_t x = 0, y = 0;  // column, row
};

inline CenterCell center_cell(const Box& gt, std::size_t grid_h, std::size_t grid_w) {
  auto cell = [](double v, std::size_t n) {
    const double s = std::floor(v * static_cast<double>(n));
    return static_cast<std::size_t>(std::clamp(s, 0.0, static_cast<double>(n - 1)));
  };
  return {cell(gt.cx, grid_w), cell(gt.cy, grid_h)};
}

// Gaussian splat peaking at exactly 1 on the cell holding the box center.
// sigma = sigma_scale * min(w, h) in grid units, floored at 0.5.
template <typename T>
Tensor<T> make_center_label(const Box& gt, std::size_t grid_h, std::size_t grid_w, double sigma_scale) {
  if (gt.cx < 0 || gt.cx > 1 || gt.cy < 0 || gt.cy > 1)
    throw ContractError("make_center_label: box center outside the unit square");
  const CenterCell c = center_cell(gt, grid_h, grid_w);
  const double sigma = std::max(0.5, sigma_scale * std::min(gt.w * static_cast<double>(grid_w),
                                                            gt.h * static_cast<double>(grid_h)));
  Tensor<T> label({grid_h, grid_w});
  for (std::size_t r = 0; r < grid_h; ++r)
    for (std::size_t col = 0; col < grid_w; ++col) {
      const double dx = static_cast<double>(col) - static_cast<double>(c.x);
      const double dy = static_cast<double>(r) - static_cast<double>(c.y);
      const double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      label[r * grid_w + col] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
  label[c.y * grid_w + c.x] = T(1);
  return label;
}

// ---------------------------------------------------------------------------
// Focal losses (fused, analytic backward)

// Penalty-reduced point focal loss. p = sigmoid(logits); cells with target 1
// contribute -(1-p)^alpha log p, the rest -(1-t)^beta p^alpha log(1-p);
// normalized by max(1, #positives).
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& logits, const Tensor<T>& target, int alpha = 2, int beta = 4) {
  detail::require_same_shape(logits.shape(), target.shape(), "focal_loss");
  const std::size_t n = logits.numel();
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) positives += target[i] == T(1);
  const T norm = T(1) / static_cast<T>(std::max<std::size_t>(positives, 1));

  auto* tape = recording_tape<T>({&logits});
  Tensor<T> out = detail::make_output<T>(Shape{1}, tape);
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits[i];
    const T p = detail::sigmoid_scalar(z);
    if (target[i] == T(1)) {
      acc -= detail::ipow(T(1) - p, alpha) * detail::log_sigmoid(z);
    } else {
      acc -= detail::ipow(T(1) - target[i], beta) * detail::ipow(p, alpha) * detail::log_sigmoid(-z);
    }
  }
  out[0] = acc * norm;
  if (tape) {
    tape->record([ln = logits.node(), tn = target.node(), on = out.node(), alpha, beta, norm] {
      if (on->grad.empty() || !ln->requires_grad) return;
      ln->ensure_grad();
      const T g = on->grad[0] * norm;
      for (std::size_t i = 0; i < ln->value.size(); ++i) {
        const T z = ln->value[i];
        const T p = detail::sigmoid_scalar(z);
        const T q = T(1) - p;
        const T t = tn->value[i];
        T d;
        if (t == T(1)) {
          d = T(alpha) * p * detail::ipow(q, alpha) * detail::log_sigmoid(z) - detail::ipow(q, alpha + 1);
        } else {
          d = -detail::ipow(T(1) - t, beta) *
              (T(alpha) * detail::ipow(p, alpha) * q * detail::log_sigmoid(-z) - detail::ipow(p, alpha + 1));
        }
        ln->grad[i] += g * d;
      }
    });
  }
  return out;
}

// Dense binary focal loss, mean over elements: -a_t (1-p_t)^gamma log p_t
// with a_t = alpha for foreground and 1-alpha for background.
template <typename T>
Tensor<T> binary_focal_loss(const Tensor<T>& logits, const Tensor<T>& target, int gamma = 2, T alpha = T(0.25)) {
  detail::require_same_shape(logits.shape(), target.shape(), "binary_focal_loss");
  const std::size_t n = logits.numel();
  const T norm = T(1) / static_cast<T>(n);
  auto* tape = recording_tape<T>({&logits});
  Tensor<T> out = detail::make_output<T>(Shape{1}, tape);
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits[i];
    const T p = detail::sigmoid_scalar(z);
    if (target[i] > T(0.5))
      acc -= alpha * detail::ipow(T(1) - p, gamma) * detail::log_sigmoid(z);
    else
      acc -= (T(1) - alpha) * detail::ipow(p, gamma) * detail::log_sigmoid(-z);
  }
  out[0] = acc * norm;
  if (tape) {
    tape->record([ln = logits.node(), tn = target.node(), on = out.node(), gamma, alpha, norm] {
      if (on->grad.empty() || !ln->requires_grad) return;
      ln->ensure_grad();
      const T g = on->grad[0] * norm;
      for (std::size_t i = 0; i < ln->value.size(); ++i) {
        const T z = ln->value[i];
        const T p = detail::sigmoid_scalar(z);
        const T q = T(1) - p;
        T d;
        if (tn->value[i] > T(0.5))
          d = alpha * (T(gamma) * p * detail::ipow(q, gamma) * detail::log_sigmoid(z) - detail::ipow(q, gamma + 1));
        else
          d = -(T(1) - alpha) *
              (T(gamma) * detail::ipow(p, gamma) * q * detail::log_sigmoid(-z) - detail::ipow(p, gamma + 1));
        ln->grad[i] += g * d;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Overlap losses

// 1 - (2 sum(p g) + smooth) / (sum p + sum g + smooth)
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& gt, T smooth = T(1)) {
  detail::require_same_shape(probs.shape(), gt.shape(), "dice_loss");
  T gt_sum = T(0);
  for (T v : gt.data()) gt_sum += v;
  const Tensor<T> num = add_scalar(scale(sum(mul(probs, gt)), T(2)), smooth);
  const Tensor<T> den = add_scalar(sum(probs), gt_sum + smooth);
  return add_scalar(scale(div(num, den), T(-1)), T(1));
}

template <typename T>
constexpr T giou_eps() {
  return T(1e-9);
}

// GIoU between a predicted center-form box pred[4] = (cx, cy, w, h) and a
// fixed box. Negative predicted sizes are clamped to 0.
template <typename T>
Tensor<T> giou(const Tensor<T>& pred, const Box& gt) {
  if (pred.numel() != 4) throw DimensionError("giou: prediction must hold 4 values");
  auto c = [](double v) { return Tensor<T>::scalar(static_cast<T>(v)); };
  const Tensor<T> cx = take(pred, {0}), cy = take(pred, {1});
  const Tensor<T> w = relu(take(pred, {2})), h = relu(take(pred, {3}));
  const Tensor<T> hw = scale(w, T(0.5)), hh = scale(h, T(0.5));
  const Tensor<T> x1 = sub(cx, hw), x2 = add(cx, hw), y1 = sub(cy, hh), y2 = add(cy, hh);
  const Tensor<T> gx1 = c(gt.x1()), gx2 = c(gt.x2()), gy1 = c(gt.y1()), gy2 = c(gt.y2());

  const Tensor<T> iw = relu(sub(minimum(x2, gx2), maximum(x1, gx1)));
  const Tensor<T> ih = relu(sub(minimum(y2, gy2), maximum(y1, gy1)));
  const Tensor<T> inter = mul(iw, ih);
  const Tensor<T> uni = sub(add_scalar(mul(w, h), static_cast<T>(gt.area())), inter);
  const Tensor<T> ew = relu(sub(maximum(x2, gx2), minimum(x1, gx1)));
  const Tensor<T> eh = relu(sub(maximum(y2, gy2), minimum(y1, gy1)));
  const Tensor<T> enclosing = mul(ew, eh);
  // Denominators floored at eps so identical boxes give exactly 1.
  const Tensor<T> eps = c(giou_eps<T>());
  const Tensor<T> iou = div(inter, maximum(uni, eps));
  return sub(iou, div(sub(enclosing, uni), maximum(enclosing, eps)));
}

// ---------------------------------------------------------------------------
// Task losses

struct LossWeights {
  double det = 0.1;
  double seg = 1.0;

  void validate() const {
    if (det < 0 || seg < 0) throw ConfigError("loss weights must be non-negative");
  }
};

template <typename T>
struct DetLoss {
  Tensor<T> focal, l1, giou, total;
};

template <typename T>
struct SegLoss {
  Tensor<T> focal, dice, total;
};

// Regression targets at the ground-truth center cell, in grid units.
struct BoxTargets {
  CenterCell cell;
  double dx = 0, dy = 0, w = 0, h = 0;
};

inline BoxTargets box_targets(const Box& gt, std::size_t grid_h, std::size_t grid_w) {
  BoxTargets t;
  t.cell = center_cell(gt, grid_h, grid_w);
  t.dx = gt.cx * static_cast<double>(grid_w) - static_cast<double>(t.cell.x);
  t.dy = gt.cy * static_cast<double>(grid_h) - static_cast<double>(t.cell.y);
  t.w = gt.w * static_cast<double>(grid_w);
  t.h = gt.h * static_cast<double>(grid_h);
  return t;
}

// Focal on the center map, plus L1 and GIoU on the box read at the
// ground-truth center cell. L1 = mean |offset error| + mean |size error|.
template <typename T>
DetLoss<T> loss_det(const HeadOutputs<T>& out, const Box& gt, const Tensor<T>& center_label) {
  const std::size_t hg = out.center.dim(0), wg = out.center.dim(1);
  const BoxTargets t = box_targets(gt, hg, wg);
  const std::size_t idx = t.cell.y * wg + t.cell.x;
  const Tensor<T> off = take(out.offset, {idx * 2, idx * 2 + 1});
  const Tensor<T> sz = take(out.size, {idx * 2, idx * 2 + 1});

  DetLoss<T> l;
  l.focal = focal_loss(out.center, center_label);
  const Tensor<T> off_t({2}, std::vector<T>{static_cast<T>(t.dx), static_cast<T>(t.dy)});
  const Tensor<T> sz_t({2}, std::vector<T>{static_cast<T>(t.w), static_cast<T>(t.h)});
  l.l1 = add(mean(abs(sub(off, off_t))), mean(abs(sub(sz, sz_t))));

  // Predicted box in normalized coordinates.
  const Tensor<T> inv({4}, std::vector<T>{T(1) / static_cast<T>(wg), T(1) / static_cast<T>(hg),
                                          T(1) / static_cast<T>(wg), T(1) / static_cast<T>(hg)});
  const Tensor<T> base({4}, std::vector<T>{static_cast<T>(t.cell.x), static_cast<T>(t.cell.y), T(0), T(0)});
  const Tensor<T> pred = mul(add(concat_last(off, sz), base), inv);
  l.giou = add_scalar(scale(giou(pred, gt), T(-1)), T(1));
  l.total = add(add(l.focal, l.l1), l.giou);
  return l;
}

template <typename T>
Tensor<T> mask_tensor(const Mask& m) {
  Tensor<T> t({m.height, m.width});
  for (std::size_t i = 0; i < m.pixels.size(); ++i) t[i] = m.pixels[i] ? T(1) : T(0);
  return t;
}

template <typename T>
SegLoss<T> loss_seg(const Tensor<T>& mask_logits, const Mask& gt) {
  const Tensor<T> target = mask_tensor<T>(gt);
  detail::require_same_shape(mask_logits.shape(), target.shape(), "loss_seg");
  SegLoss<T> l;
  l.focal = binary_focal_loss(mask_logits, target);
  l.dice = dice_loss(sigmoid(mask_logits), target);
  l.total = add(l.focal, l.dice);
  return l;
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& l_det, const Tensor<T>& l_seg, const LossWeights& w) {
  w.validate();
  return add(scale(l_det, static_cast<T>(w.det)), scale(l_seg, static_cast<T>(w.seg)));
}

inline double total_loss(double l_det, double l_seg, const LossWeights& w) {
  w.validate();
  return w.det * l_det + w.seg * l_seg;
}

struct LossReport {
  double l_focal_center = 0, l_l1_box = 0, l_giou_box = 0;
  double l_focal_mask = 0, l_dice_mask = 0;
  double l_det = 0, l_seg = 0, total = 0;

  LossReport& operator+=(const LossReport& o) {
    l_focal_center += o.l_focal_center;
    l_l1_box += o.l_l1_box;
    l_giou_box += o.l_giou_box;
    l_focal_mask += o.l_focal_mask;
    l_dice_mask += o.l_dice_mask;
    l_det += o.l_det;
    l_seg += o.l_seg;
    total += o.total;
    return *this;
  }

  LossReport scaled(double s) const {
    LossReport r = *this;
    for (double* v : {&r.l_focal_center, &r.l_l1_box, &r.l_giou_box, &r.l_focal_mask, &r.l_dice_mask, &r.l_det,
                      &r.l_seg, &r.total})
      *v *= s;
    return r;
  }

  nlohmann::ordered_json to_json() const {
    return {{"l_focal_center", l_focal_center}, {"l_l1_box", l_l1_box}, {"l_giou_box", l_giou_box},
            {"l_focal_mask", l_focal_mask},     {"l_dice_mask", l_dice_mask}, {"l_det", l_det},
            {"l_seg", l_seg},                   {"total", total}};
  }
};

template <typename T>
struct GroundingLoss {
  DetLoss<T> det;
  SegLoss<T> seg;
  Tensor<T> total;

  LossReport report() const {
    LossReport r;
    r.l_focal_center = static_cast<double>(det.focal.item());
    r.l_l1_box = static_cast<double>(det.l1.item());
    r.l_giou_box = static_cast<double>(det.giou.item());
    r.l_focal_mask = static_cast<double>(seg.focal.item());
    r.l_dice_mask = static_cast<double>(seg.dice.item());
    r.l_det = static_cast<double>(det.total.item());
    r.l_seg = static_cast<double>(seg.total.item());
    r.total = static_cast<double>(total.item());
    return r;
  }
};

template <typename T>
GroundingLoss<T> grounding_loss(const HeadOutputs<T>& out, const Box& gt_box, const Mask& gt_mask,
                                const LossWeights& w, double sigma_scale) {
  GroundingLoss<T> g;
  const Tensor<T> label = make_center_label<T>(gt_box, out.center.dim(0), out.center.dim(1), sigma_scale);
  g.det = loss_det(out, gt_box, label);
  g.seg = loss_seg(out.mask_logits, gt_mask);
  g.total = total_loss(g.det.total, g.seg.total, w);
  return g;
}

// ---------------------------------------------------------------------------
// Metrics

struct RecMetric {
  double iou = 0;
  bool hit = false;
};

inline constexpr double kRecIouThreshold = 0.5;

inline RecMetric metric_rec(const Box& pred, const Box& gt) {
  const double iou = box_iou(pred, gt);
  return {iou, iou >= kRecIouThreshold};
}

inline double metric_res(const Mask& pred, const Mask& gt) { return mask_iou(pred, gt); }

inline double mean_iou(const std::vector<double>& ious) {
  if (ious.empty()) return 0.0;
  double s = 0;
  for (double v : ious) s += v;
  return s / static_cast<double>(ious.size());
}

}  // namespace plvl
