#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "plvl/model.hpp"
#include "test_util.hpp"

using namespace plvl;
using plvl::testing::random_tensor;

namespace {

double giou_value(const Box& pred, const Box& gt) {
  const Tensor<double> p({4}, std::vector<double>{pred.cx, pred.cy, pred.w, pred.h});
  return giou(p, gt).item();
}

HeadOutputs<double> constant_outputs(std::size_t g, double off, double size) {
  HeadOutputs<double> o;
  o.center = Tensor<double>({g, g}, 0.0);
  o.offset = Tensor<double>({g, g, 2}, off);
  o.size = Tensor<double>({g, g, 2}, size);
  o.mask_logits = Tensor<double>({4 * g, 4 * g}, 0.0);
  return o;
}

}  // namespace

TEST(Giou, ClosedForms) {
  EXPECT_NEAR(giou_value(Box::from_corners(0, 0, 1, 1), Box::from_corners(2, 2, 3, 3)), -7.0 / 9.0, 1e-9);
  EXPECT_NEAR(giou_value(Box::from_corners(0, 0, 2, 2), Box::from_corners(1, 1, 3, 3)), -5.0 / 63.0, 1e-9);
  EXPECT_NEAR(giou_value(Box{0.3, 0.4, 0.2, 0.1}, Box{0.3, 0.4, 0.2, 0.1}), 1.0, 1e-9);
}

TEST(Giou, NegativePredictedSizesClampToZero) {
  const double g = giou_value(Box{0.5, 0.5, -0.2, 0.3}, Box{0.5, 0.5, 0.2, 0.2});
  EXPECT_TRUE(std::isfinite(g));
  EXPECT_LE(g, 0.0);
}

TEST(Geometry, IouAndMaskIouEdgeCases) {
  EXPECT_DOUBLE_EQ(box_iou(Box::from_corners(0, 0, 2, 1), Box::from_corners(1, 0, 3, 1)), 1.0 / 3.0);
  EXPECT_EQ(box_iou(Box{}, Box{}), 0.0);
  Mask a(2, 2), b(2, 2);
  EXPECT_EQ(mask_iou(a, b), 1.0);
  a.at(0, 0) = b.at(0, 0) = b.at(1, 1) = 1;
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 0.5);
  EXPECT_THROW(mask_iou(a, Mask(3, 2)), std::invalid_argument);
  const Box bb = mask_bounding_box(b);
  EXPECT_DOUBLE_EQ(bb.x1(), 0.0);
  EXPECT_DOUBLE_EQ(bb.x2(), 1.0);
}

TEST(Dice, ClosedForms) {
  Tensor<double> p({4}, std::vector<double>{1, 1, 1, 0});
  Tensor<double> g({4}, std::vector<double>{1, 1, 0, 1});
  EXPECT_NEAR(dice_loss(p, g).item(), 2.0 / 7.0, 1e-12);
  EXPECT_NEAR(dice_loss(g, g).item(), 0.0, 1e-15);
  Tensor<double> z({4}, 0.0);
  EXPECT_NEAR(dice_loss(z, z).item(), 0.0, 1e-15);  // smoothing keeps empty-vs-empty at 0
}

TEST(Focal, SinglePositiveAtHalf) {
  Tensor<double> logit({1}, 0.0), target({1}, 1.0);
  EXPECT_NEAR(focal_loss(logit, target).item(), 0.25 * std::log(2.0), 1e-12);
  EXPECT_NEAR(binary_focal_loss(logit, target).item(), 0.25 * 0.25 * std::log(2.0), 1e-12);
}

TEST(Focal, PenaltyReducedNegativesAndNormalization) {
  // Two positives, one near-positive (t = 0.5), one plain negative.
  Tensor<double> z({4}, std::vector<double>{1.0, -0.5, 0.3, -2.0});
  Tensor<double> t({4}, std::vector<double>{1.0, 1.0, 0.5, 0.0});
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  double want = 0;
  for (int i : {0, 1}) want -= std::pow(1 - sig(z[i]), 2) * std::log(sig(z[i]));
  want -= std::pow(1 - 0.5, 4) * std::pow(sig(0.3), 2) * std::log(1 - sig(0.3));
  want -= std::pow(sig(-2.0), 2) * std::log(1 - sig(-2.0));
  EXPECT_NEAR(focal_loss(z, t).item(), want / 2.0, 1e-12);
}

TEST(Focal, StableForExtremeLogits) {
  Tensor<double> z({2}, std::vector<double>{800.0, -800.0});
  Tensor<double> t({2}, std::vector<double>{0.0, 1.0});
  const double l = focal_loss(z, t).item();
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_GT(l, 1e3);
  EXPECT_TRUE(std::isfinite(binary_focal_loss(z, t).item()));
}

TEST(CenterLabel, GaussianProfile) {
  // 8x8 grid, box 6 cells wide: sigma = 1 cell.
  const Box gt{0.5, 0.5, 0.75, 0.75};
  const auto lab = make_center_label<double>(gt, 8, 8, 1.0 / 6.0);
  EXPECT_EQ(lab.at({4, 4}), 1.0);
  EXPECT_NEAR(lab.at({4, 5}), std::exp(-0.5), 1e-12);
  EXPECT_NEAR(lab.at({3, 3}), std::exp(-1.0), 1e-12);
  // Small boxes floor sigma at half a cell.
  const auto tiny = make_center_label<double>(Box{0.5, 0.5, 0.01, 0.01}, 8, 8, 1.0 / 6.0);
  EXPECT_NEAR(tiny.at({4, 5}), std::exp(-2.0), 1e-12);
  EXPECT_THROW(make_center_label<double>(Box{1.5, 0.5, 0.1, 0.1}, 8, 8, 0.2), ContractError);
}

TEST(LossDet, L1AtGroundTruthCell) {
  // 2x2 grid; center (0.75, 0.25) -> cell (1, 0), offsets (0.5, 0.5), size (2, 2).
  const auto out = constant_outputs(2, 0.0, 6.0);
  const Box gt{0.75, 0.25, 1.0, 1.0};
  const auto l = loss_det(out, gt, make_center_label<double>(gt, 2, 2, 1.0 / 6.0));
  EXPECT_NEAR(l.l1.item(), 0.5 + 4.0, 1e-12);
  // Predicted box (1/2, 0, 3, 3) in normalized units.
  const double g = box_giou(Box{0.5, 0.0, 3.0, 3.0}, gt);
  EXPECT_NEAR(l.giou.item(), 1.0 - g, 1e-8);
  EXPECT_NEAR(l.total.item(), l.focal.item() + l.l1.item() + l.giou.item(), 1e-12);
}

TEST(LossTotal, DefaultWeights) {
  EXPECT_EQ(total_loss(2.0, 3.0, LossWeights{}), 3.2);
  const auto t = total_loss(Tensor<double>::scalar(2.0), Tensor<double>::scalar(3.0), LossWeights{});
  EXPECT_EQ(t.item(), 3.2);
  EXPECT_THROW(total_loss(1.0, 1.0, LossWeights{-1, 1}), ConfigError);
}

TEST(LossSeg, PerfectLogitsGiveSmallLoss) {
  Mask gt(8, 8);
  for (std::size_t r = 2; r < 6; ++r)
    for (std::size_t c = 1; c < 4; ++c) gt.at(r, c) = 1;
  Tensor<double> logits({8, 8});
  for (std::size_t i = 0; i < 64; ++i) logits[i] = gt.pixels[i] ? 20.0 : -20.0;
  const auto l = loss_seg(logits, gt);
  EXPECT_LT(l.total.item(), 1e-6);
  EXPECT_THROW(loss_seg(Tensor<double>({4, 4}), gt), DimensionError);
}

TEST(Metrics, RecThresholdIsInclusive) {
  const Box gt = Box::from_corners(0, 0, 1, 1);
  EXPECT_TRUE(metric_rec(Box::from_corners(0, 0, 0.5, 1), gt).hit);  // IoU exactly 0.5
  EXPECT_FALSE(metric_rec(Box::from_corners(0, 0, 0.49, 1), gt).hit);
  EXPECT_DOUBLE_EQ(mean_iou({0.2, 0.4, 0.9}), 0.5);
}

TEST(GroundingLoss, ReportMatchesTensors) {
  std::mt19937_64 rng(31);
  HeadOutputs<double> out;
  out.center = random_tensor(rng, {4, 4});
  out.offset = random_tensor(rng, {4, 4, 2}, 0, 1);
  out.size = random_tensor(rng, {4, 4, 2}, 0.5, 2);
  out.mask_logits = random_tensor(rng, {16, 16});
  Mask gt(16, 16);
  for (std::size_t r = 3; r < 9; ++r)
    for (std::size_t c = 5; c < 12; ++c) gt.at(r, c) = 1;
  const auto g = grounding_loss(out, mask_bounding_box(gt), gt, LossWeights{}, 1.0 / 6.0);
  const auto r = g.report();
  EXPECT_DOUBLE_EQ(r.l_det, r.l_focal_center + r.l_l1_box + r.l_giou_box);
  EXPECT_NEAR(r.l_seg, r.l_focal_mask + r.l_dice_mask, 1e-15);
  EXPECT_NEAR(r.total, 0.1 * r.l_det + r.l_seg, 1e-12);
  const auto j = r.to_json();
  EXPECT_TRUE(j.contains("l_giou_box"));
}
