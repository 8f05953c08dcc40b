#pragma once

#include <array>
#include <map>
#include <utility>

#include "selfsup/geometry.hpp"
#include "selfsup/ops.hpp"

namespace selfsup {

// Weights for (photometric, ssim, semantic consistency, smoothness,
// outlier-mask regularization, depth prior, semantic prior), in that order.
struct LossWeights {
  double w_pho = 1.0;
  double w_ssim = 0.15;
  double w_sc = 0.8;
  double w_sm = 0.025;
  double w_om = 0.08;
  double w_D = 0.08;
  double w_S = 1.5;

  void validate() const {
    check(w_pho >= 0 && w_ssim >= 0 && w_sc >= 0 && w_sm >= 0 && w_om >= 0 && w_D >= 0 &&
              w_S >= 0,
          "loss weights must be non-negative");
  }
};

struct LossReport {
  double pho = 0, ssim = 0, sc = 0, sm = 0, om = 0, d_prior = 0, s_prior = 0;
  double total = 0;
  int valid_pixel_count = 0;
  bool warning = false;       // e.g. all ground truth pixels masked out
  TensorPtr total_tensor;     // scalar on the tape, drives backward
};

namespace detail {

inline TensorPtr mask_tensor(const std::vector<uint8_t>& valid, int h, int w) {
  auto m = make_tensor({h, w});
  for (int i = 0; i < h * w; ++i) m->data[i] = valid[i] ? 1.0 : 0.0;
  return m;
}

// (1/|V|) sum over valid pixels of weight(p) * value(p); 0 when |V| is empty.
inline TensorPtr masked_weighted_mean(Tape& tape, const TensorPtr& value,
                                      const TensorPtr& weight,
                                      const std::vector<uint8_t>& valid, int* count_out = nullptr) {
  const int h = value->shape[value->shape.size() - 2];
  const int w = value->shape[value->shape.size() - 1];
  int count = 0;
  for (uint8_t v : valid) count += v;
  if (count_out) *count_out = count;
  if (count == 0) return make_scalar(0.0);
  auto m = mask_tensor(valid, h, w);
  return scale(tape, sum(tape, mul(tape, mul(tape, value, weight), m)), 1.0 / count);
}

}  // namespace detail

// L_pho: mean over valid pixels of O(p) * |I_t'(p') - I_t(p)|, channel-averaged.
inline TensorPtr photometric_loss(Tape& tape, const TensorPtr& img_t, const TensorPtr& img_tp,
                                  const WarpField& warp, const TensorPtr& outlier_mask,
                                  int* valid_count_out = nullptr) {
  auto warped = bilinear_sample(tape, img_tp, warp);
  auto diff = mean_channels(tape, abs(tape, sub(tape, warped, img_t)));
  return detail::masked_weighted_mean(tape, diff, outlier_mask, warp.valid, valid_count_out);
}

// L_ssim: mean over valid pixels of O(p) * [1 - SSIM(p', p)], SSIM over 3x3
// patches with c1 = 0.01^2, c2 = 0.03^2. Statistics are computed on the image
// warped to frame t's grid; a pixel contributes only when its full 3x3 patch
// is inside the image and every patch pixel is valid.
inline TensorPtr ssim_loss(Tape& tape, const TensorPtr& img_t, const TensorPtr& img_tp,
                           const WarpField& warp, const TensorPtr& outlier_mask) {
  const int h = warp.height, w = warp.width;
  if (h < 3 || w < 3) return make_scalar(0.0);
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto warped = bilinear_sample(tape, img_tp, warp);

  auto mu1 = box3(tape, img_t);
  auto mu2 = box3(tape, warped);
  auto var1 = sub(tape, box3(tape, mul(tape, img_t, img_t)), mul(tape, mu1, mu1));
  auto var2 = sub(tape, box3(tape, mul(tape, warped, warped)), mul(tape, mu2, mu2));
  auto cov = sub(tape, box3(tape, mul(tape, img_t, warped)), mul(tape, mu1, mu2));

  auto num = mul(tape, affine(tape, mul(tape, mu1, mu2), 2.0, c1),
                 affine(tape, cov, 2.0, c2));
  auto den = mul(tape, affine(tape, add(tape, mul(tape, mu1, mu1), mul(tape, mu2, mu2)), 1.0, c1),
                 affine(tape, add(tape, var1, var2), 1.0, c2));
  auto ssim_map = mean_channels(tape, div(tape, num, den));          // [H-2, W-2]
  auto loss_map = affine(tape, ssim_map, -1.0, 1.0);                 // 1 - SSIM

  // erode validity: interior pixels whose whole 3x3 patch is valid
  std::vector<uint8_t> eroded((h - 2) * (w - 2), 0);
  for (int y = 1; y < h - 1; ++y)
    for (int x = 1; x < w - 1; ++x) {
      bool ok = true;
      for (int dy = -1; dy <= 1 && ok; ++dy)
        for (int dx = -1; dx <= 1 && ok; ++dx) ok = warp.valid[(y + dy) * w + x + dx];
      eroded[(y - 1) * (w - 2) + (x - 1)] = ok;
    }
  auto mask_interior = crop2d(tape, outlier_mask, 1, 1, h - 2, w - 2);
  return detail::masked_weighted_mean(tape, loss_map, mask_interior, eroded);
}

// L_sc: mean over valid pixels of O(p) * ||S_t'(p') - S_t(p)||_1 (channel sum).
// Warp coordinates and the outlier mask enter as constants, so depth,
// ego-motion and outlier-mask parameters receive no gradient from this loss.
inline TensorPtr semantic_consistency_loss(Tape& tape, const TensorPtr& seg_t,
                                           const TensorPtr& seg_tp, const WarpField& warp,
                                           const TensorPtr& outlier_mask) {
  WarpField frozen_warp = warp;
  frozen_warp.coords = detach(warp.coords);
  auto warped = bilinear_sample(tape, seg_tp, frozen_warp);
  auto diff = sum_channels(tape, abs(tape, sub(tape, warped, seg_t)));
  return detail::masked_weighted_mean(tape, diff, detach(outlier_mask), warp.valid);
}

// L_sm: edge-preserving smoothness of depth normalized by its mean,
// forward differences, last column/row excluded per axis.
inline TensorPtr smoothness_loss(Tape& tape, const TensorPtr& depth, const TensorPtr& image) {
  check(depth->shape.size() == 2, "smoothness_loss expects [H,W] depth");
  for (double d : depth->data)
    check(d > 0, "smoothness_loss: depth must be positive everywhere");
  auto dn = div(tape, depth, mean(tape, depth));
  auto gx = abs(tape, diff_x(tape, dn));
  auto gy = abs(tape, diff_y(tape, dn));
  auto wx = exp(tape, neg(tape, mean_channels(tape, abs(tape, diff_x(tape, image)))));
  auto wy = exp(tape, neg(tape, mean_channels(tape, abs(tape, diff_y(tape, image)))));
  return add(tape, sum(tape, mul(tape, gx, wx)), sum(tape, mul(tape, gy, wy)));
}

// L_om: -sum_p log O(p), with O floored at 1e-7 so a saturated mask stays finite.
inline TensorPtr outlier_mask_reg(Tape& tape, const TensorPtr& outlier_mask) {
  return neg(tape, sum(tape, log(tape, clamp_min(tape, outlier_mask, 1e-7))));
}

// L_D / L_S: L1 anchors to the frozen supervised predictions (Eqs. of the
// bootstrapping priors). The frozen side is detached unconditionally.
inline TensorPtr depth_prior_loss(Tape& tape, const TensorPtr& depth, const TensorPtr& depth_pre) {
  check(depth->shape == depth_pre->shape, "depth_prior_loss: shape mismatch");
  return sum(tape, abs(tape, sub(tape, depth, detach(depth_pre))));
}

inline TensorPtr semantic_prior_loss(Tape& tape, const TensorPtr& seg, const TensorPtr& seg_pre) {
  check(seg->shape == seg_pre->shape, "semantic_prior_loss: shape mismatch");
  return sum(tape, abs(tape, sub(tape, seg, detach(seg_pre))));
}

// Supervised stage losses.
inline TensorPtr supervised_seg_loss(Tape& tape, const TensorPtr& logits,
                                     const std::vector<int>& labels, int void_id,
                                     int* valid_count_out = nullptr) {
  return cross_entropy_channels(tape, logits, labels, void_id, valid_count_out);
}

inline TensorPtr supervised_depth_loss(Tape& tape, const TensorPtr& depth,
                                       const TensorPtr& depth_gt,
                                       const std::vector<uint8_t>& valid_mask,
                                       int* valid_count_out = nullptr) {
  check(depth->shape == depth_gt->shape, "supervised_depth_loss: shape mismatch");
  auto diff = abs(tape, sub(tape, depth, detach(depth_gt)));
  auto one = make_tensor(diff->shape, 1.0);
  return detail::masked_weighted_mean(tape, diff, one, valid_mask, valid_count_out);
}

// ---------------------------------------------------------------------------
// Snippet total loss
// ---------------------------------------------------------------------------

inline constexpr int kDepthScales = 4;
inline constexpr int kSegScales = 3;

// Everything the total loss needs for one 3-frame snippet. Images are
// constants (index = [frame][scale], average-pooled pyramid); predictions
// live on the tape; frozen predictions, when present, are constants.
struct SnippetTensors {
  std::array<std::vector<TensorPtr>, 3> images;
  std::array<std::vector<TensorPtr>, 3> depth;
  std::array<std::vector<TensorPtr>, 3> outlier;
  std::array<std::vector<TensorPtr>, 3> seg;
  std::array<std::vector<TensorPtr>, 3> depth_pre;  // empty => no depth prior
  std::array<std::vector<TensorPtr>, 3> seg_pre;    // empty => no semantic prior
  std::map<std::pair<int, int>, PoseExpr> poses;    // directed, consecutive frames
  Intrinsics intrinsics;                            // finest level
};

// Total snippet loss: per scale and per frame, the weighted prior terms plus
// the weighted pairwise consistency terms for both directions of each
// consecutive pair. Per-pixel sums (smoothness, mask regularization, priors)
// are normalized by their map's pixel count before weighting so term balance
// is resolution-independent. Photometric/SSIM run on the depth network's 4
// scales, semantic consistency on the segmentation network's 3 scales.
inline LossReport total_loss(Tape& tape, const SnippetTensors& s, const LossWeights& w) {
  w.validate();
  for (int f = 0; f < 3; ++f) {
    check(static_cast<int>(s.images[f].size()) >= kDepthScales &&
              static_cast<int>(s.depth[f].size()) == kDepthScales &&
              static_cast<int>(s.outlier[f].size()) == kDepthScales,
          "total_loss: missing depth scale level");
    check(static_cast<int>(s.seg[f].size()) == kSegScales,
          "total_loss: missing segmentation scale level");
  }
  static const std::array<std::pair<int, int>, 4> kPairs = {
      std::pair{0, 1}, std::pair{1, 0}, std::pair{1, 2}, std::pair{2, 1}};
  for (const auto& pr : kPairs)
    check(s.poses.count(pr) == 1, "total_loss: missing pose for a frame pair");

  LossReport report;
  auto t_pho = make_scalar(0.0), t_ssim = make_scalar(0.0), t_sc = make_scalar(0.0);
  auto t_sm = make_scalar(0.0), t_om = make_scalar(0.0);
  auto t_dp = make_scalar(0.0), t_sp = make_scalar(0.0);

  for (int level = 0; level < kDepthScales; ++level) {
    const Intrinsics K = s.intrinsics.at_level(level);
    const double inv_px = 1.0 / (K.width * K.height);
    // temporal-consistency terms compare warped images, and at coarse levels
    // the inter-frame parallax shrinks below a pixel, so those levels carry
    // noise rather than signal; attenuate them geometrically
    const double lvl_w = 1.0 / (1 << (2 * level));

    // warps are shared between the consistency losses of this level
    std::map<std::pair<int, int>, WarpField> warps;
    for (const auto& [t, tp] : kPairs)
      warps.emplace(std::pair{t, tp}, project(tape, s.depth[t][level], s.poses.at({t, tp}), K));

    for (int f = 0; f < 3; ++f) {
      // prior terms for frame f at this level
      t_sm = add(tape, t_sm,
                 scale(tape, smoothness_loss(tape, s.depth[f][level], s.images[f][level]), inv_px));
      t_om = add(tape, t_om, scale(tape, outlier_mask_reg(tape, s.outlier[f][level]), inv_px));
      if (!s.depth_pre[f].empty())
        t_dp = add(tape, t_dp,
                   scale(tape, depth_prior_loss(tape, s.depth[f][level], s.depth_pre[f][level]),
                         inv_px));
      if (level < kSegScales && !s.seg_pre[f].empty())
        t_sp = add(tape, t_sp,
                   scale(tape, semantic_prior_loss(tape, s.seg[f][level], s.seg_pre[f][level]),
                         inv_px / s.seg[f][level]->shape[0]));
    }

    for (const auto& [t, tp] : kPairs) {
      const WarpField& warp = warps.at({t, tp});
      int count = 0;
      t_pho = add(tape, t_pho,
                  scale(tape,
                        photometric_loss(tape, s.images[t][level], s.images[tp][level], warp,
                                         s.outlier[t][level], &count),
                        lvl_w));
      report.valid_pixel_count += count;
      t_ssim = add(tape, t_ssim,
                   scale(tape,
                         ssim_loss(tape, s.images[t][level], s.images[tp][level], warp,
                                   s.outlier[t][level]),
                         lvl_w));
      if (level < kSegScales)
        t_sc = add(tape, t_sc,
                   scale(tape,
                         semantic_consistency_loss(tape, s.seg[t][level], s.seg[tp][level], warp,
                                                   s.outlier[t][level]),
                         lvl_w));
    }
  }

  auto total = make_scalar(0.0);
  auto acc = [&](const TensorPtr& term, double weight) {
    if (weight != 0.0) total = add(tape, total, scale(tape, term, weight));
  };
  acc(t_pho, w.w_pho);
  acc(t_ssim, w.w_ssim);
  acc(t_sc, w.w_sc);
  acc(t_sm, w.w_sm);
  acc(t_om, w.w_om);
  acc(t_dp, w.w_D);
  acc(t_sp, w.w_S);

  report.pho = t_pho->data[0];
  report.ssim = t_ssim->data[0];
  report.sc = t_sc->data[0];
  report.sm = t_sm->data[0];
  report.om = t_om->data[0];
  report.d_prior = t_dp->data[0];
  report.s_prior = t_sp->data[0];
  report.total = total->data[0];
  report.total_tensor = total;
  return report;
}

}  // namespace selfsup
