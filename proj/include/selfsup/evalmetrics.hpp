#pragma once

// Depth, segmentation, and trajectory evaluation. Pure functions over plain
// buffers; no autodiff involvement.

#include <algorithm>
#include <cmath>
#include <vector>

#include "selfsup/common.hpp"
#include "selfsup/geometry.hpp"

namespace selfsup {

struct DepthEvalReport {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;
  double scale = 1;  // median(gt/pred); applied in median mode, reported in both
};

enum class ScaleMode { kMedian, kNone };

// Predictions are clamped to [0.1, 100] before evaluation, mirroring the
// depth network's output range.
inline DepthEvalReport depth_metrics(const std::vector<double>& pred, const std::vector<double>& gt,
                                     const std::vector<uint8_t>& valid, ScaleMode mode) {
  check(pred.size() == gt.size() && pred.size() == valid.size(), "depth_metrics: size mismatch");
  std::vector<double> ratios;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (!valid[i]) continue;
    check(gt[i] > 0, "depth_metrics: ground truth must be positive on valid pixels");
    ratios.push_back(gt[i] / std::clamp(pred[i], 0.1, 100.0));
  }
  if (ratios.empty()) throw domain_error("depth_metrics: no valid pixels");
  std::nth_element(ratios.begin(), ratios.begin() + ratios.size() / 2, ratios.end());
  double median = ratios[ratios.size() / 2];
  if (ratios.size() % 2 == 0) {
    const double lower = *std::max_element(ratios.begin(), ratios.begin() + ratios.size() / 2);
    median = (median + lower) / 2;
  }

  DepthEvalReport rep;
  rep.scale = median;
  const double s = mode == ScaleMode::kMedian ? median : 1.0;
  double n = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (!valid[i]) continue;
    const double p = s * std::clamp(pred[i], 0.1, 100.0);
    const double g = gt[i];
    const double d = p - g;
    rep.abs_rel += std::fabs(d) / g;
    rep.sq_rel += d * d / g;
    rep.rmse += d * d;
    rep.rmse_log += std::pow(std::log(p) - std::log(g), 2);
    const double r = std::max(p / g, g / p);
    rep.delta1 += r < 1.25;
    rep.delta2 += r < 1.25 * 1.25;
    rep.delta3 += r < 1.25 * 1.25 * 1.25;
    ++n;
  }
  rep.abs_rel /= n;
  rep.sq_rel /= n;
  rep.rmse = std::sqrt(rep.rmse / n);
  rep.rmse_log = std::sqrt(rep.rmse_log / n);
  rep.delta1 /= n;
  rep.delta2 /= n;
  rep.delta3 /= n;
  return rep;
}

struct SegEvalReport {
  std::vector<double> class_iou;    // -1 marks a class absent from both maps
  std::vector<bool> class_present;  // present in gt or prediction
  double mean_iou = 0;              // over present classes only
};

// Per-class intersection over union. Pixels labeled with the void id in the
// ground truth are excluded entirely; classes absent from both maps are
// excluded from the mean (reported as -1).
inline SegEvalReport iou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                         int num_classes, int void_id = -1) {
  check(pred.size() == gt.size(), "iou: size mismatch");
  std::vector<long> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    if (void_id >= 0 && gt[i] == void_id) continue;
    check(gt[i] < num_classes, "iou: ground-truth label out of range");
    check(pred[i] < num_classes, "iou: predicted label out of range");
    if (pred[i] == gt[i])
      ++tp[gt[i]];
    else {
      ++fp[pred[i]];
      ++fn[gt[i]];
    }
  }
  SegEvalReport rep;
  rep.class_iou.assign(num_classes, -1.0);
  rep.class_present.assign(num_classes, false);
  double sum = 0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    const long denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;  // n/a: absent from both maps
    rep.class_present[c] = true;
    rep.class_iou[c] = double(tp[c]) / denom;
    sum += rep.class_iou[c];
    ++present;
  }
  if (present) rep.mean_iou = sum / present;
  return rep;
}

// Absolute trajectory error over one snippet: both trajectories are anchored
// at their first pose; predicted translations are aligned to the ground truth
// with a single least-squares scalar, then the mean translation error is
// returned. Full SE(3) alignment is deliberately out of scope.
inline double ate(const std::vector<PoseSE3>& pred, const std::vector<PoseSE3>& gt) {
  check(pred.size() == gt.size(), "ate: trajectory length mismatch");
  check(pred.size() >= 2, "ate: need at least 2 poses");

  // camera positions relative to the first frame
  auto positions = [](const std::vector<PoseSE3>& traj) {
    std::vector<std::array<double, 3>> pos;
    const auto anchor = pose_invert(traj[0]);
    for (const auto& p : traj) {
      const auto rel = pose_compose(p, anchor);  // first frame -> frame i
      const auto inv = pose_invert(rel);         // camera center in first-frame coords
      pos.push_back(inv.translation);
    }
    return pos;
  };
  const auto pp = positions(pred);
  const auto gp = positions(gt);

  double dot = 0, norm = 0;
  for (size_t i = 0; i < pp.size(); ++i)
    for (int a = 0; a < 3; ++a) {
      dot += pp[i][a] * gp[i][a];
      norm += pp[i][a] * pp[i][a];
    }
  const double s = norm > 1e-12 ? dot / norm : 1.0;

  double err = 0;
  for (size_t i = 0; i < pp.size(); ++i) {
    double e2 = 0;
    for (int a = 0; a < 3; ++a) e2 += std::pow(s * pp[i][a] - gp[i][a], 2);
    err += std::sqrt(e2);
  }
  return err / double(pp.size());
}

}  // namespace selfsup
