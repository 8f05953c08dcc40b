#pragma once

// Two-stage training protocol: a supervised bootstrap on the labeled subset
// of frames, then purely self-supervised refinement on snippets of unlabeled
// video anchored by frozen copies of the supervised networks.

#include <chrono>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "selfsup/checkpoint.hpp"
#include "selfsup/evalmetrics.hpp"
#include "selfsup/losses.hpp"
#include "selfsup/networks.hpp"
#include "selfsup/synthdata.hpp"

namespace selfsup {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<TensorPtr> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  // Applies one update. If any gradient entry is non-finite the whole step is
  // skipped (parameters and moments untouched) and false is returned.
  bool step() {
    for (const auto& p : params_)
      for (double g : p->grad)
        if (!std::isfinite(g)) return false;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (p.grad.empty()) continue;  // parameter unused this step
      for (int j = 0; j < p.numel(); ++j) {
        const double g = p.grad[j];
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1 - cfg_.beta2) * g * g;
        p.data[j] -= cfg_.lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + cfg_.eps);
      }
    }
    return true;
  }

  int64_t timestep() const { return t_; }

 private:
  std::vector<TensorPtr> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::string stage;  // "supervised" or "selfsup"
  std::string data_dir;
  std::string ckpt_in, ckpt_out;
  std::string log_path;  // train_log.jsonl location; empty disables logging
  LossWeights weights;
  AdamConfig adam;
  int steps = 400;
  int batch = 4;
  uint64_t seed = 0;
  ArchConfig arch;
  bool augment = true;
  double aug_scale_lo = 0.85, aug_scale_hi = 1.15;
  int crop_w = 48, crop_h = 48;
  int snippet_stride = 1, snippet_skip = 1;
  // selfsup steps during which only the pose net is updated; the pose net
  // enters this stage untrained, and letting it settle against the frozen
  // bootstrap depth avoids baking early pose errors into the depth head
  int pose_warmup = 0;

  void validate() const {
    check(stage == "supervised" || stage == "selfsup", "stage must be supervised or selfsup");
    check(steps >= 0 && batch >= 1, "steps must be >= 0 and batch >= 1");
    check(crop_w % 8 == 0 && crop_h % 8 == 0, "crop dimensions must be divisible by 8");
    check(aug_scale_lo > 0 && aug_scale_lo <= aug_scale_hi, "bad augmentation scale range");
    weights.validate();
    arch.validate();
  }
};

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.stage = j.value("stage", cfg.stage);
  cfg.data_dir = j.value("data", cfg.data_dir);
  cfg.ckpt_in = j.value("ckpt_in", cfg.ckpt_in);
  cfg.ckpt_out = j.value("ckpt_out", cfg.ckpt_out);
  cfg.log_path = j.value("log", cfg.log_path);
  cfg.adam.lr = j.value("lr", cfg.stage == "selfsup" ? 2e-4 : 1e-3);
  cfg.steps = j.value("steps", cfg.steps);
  cfg.batch = j.value("batch", cfg.batch);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.arch.base_channels = j.value("base_channels", cfg.arch.base_channels);
  cfg.arch.num_classes = j.value("classes", cfg.arch.num_classes);
  cfg.augment = j.value("augment", cfg.augment);
  cfg.crop_w = j.value("crop_w", cfg.crop_w);
  cfg.crop_h = j.value("crop_h", cfg.crop_h);
  cfg.snippet_stride = j.value("snippet_stride", cfg.snippet_stride);
  cfg.snippet_skip = j.value("snippet_skip", cfg.snippet_skip);
  cfg.pose_warmup = j.value("pose_warmup", cfg.pose_warmup);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    check(w.is_array() && w.size() == 7,
          "loss_weights must be [pho, ssim, sc, sm, om, depth_prior, seg_prior]");
    cfg.weights = {w[0], w[1], w[2], w[3], w[4], w[5], w[6]};
  }
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw io_error("cannot open config: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw io_error("malformed config " + path + ": " + e.what());
  }
  return train_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Augmentation: zoom (scale) then crop, with intrinsics updated to match.
// Scaled dimensions and crop offsets are snapped to multiples of 8 so the
// same transform applies exactly at every pyramid level.
// ---------------------------------------------------------------------------

struct Augment {
  int src_w = 0, src_h = 0;
  int scaled_w = 0, scaled_h = 0;
  int crop_x = 0, crop_y = 0;
  int out_w = 0, out_h = 0;
};

inline Augment identity_augment(int w, int h) { return {w, h, w, h, 0, 0, w, h}; }

inline Augment draw_augment(Rng& rng, const TrainConfig& cfg, int src_w, int src_h) {
  Augment a;
  a.src_w = src_w;
  a.src_h = src_h;
  a.out_w = cfg.crop_w;
  a.out_h = cfg.crop_h;
  const double s = uniform(rng, cfg.aug_scale_lo, cfg.aug_scale_hi);
  a.scaled_w = std::max(cfg.crop_w, int(std::lround(src_w * s / 8.0)) * 8);
  a.scaled_h = std::max(cfg.crop_h, int(std::lround(src_h * s / 8.0)) * 8);
  a.crop_x = 8 * uniform_int(rng, 0, (a.scaled_w - a.out_w) / 8);
  a.crop_y = 8 * uniform_int(rng, 0, (a.scaled_h - a.out_h) / 8);
  return a;
}

namespace detail {

// Pixel-center-aligned bilinear resize of a [C,h,w] buffer.
inline std::vector<double> resize_bilinear(const std::vector<double>& src, int c, int h, int w,
                                           int oh, int ow) {
  if (oh == h && ow == w) return src;
  std::vector<double> dst(size_t(c) * oh * ow);
  const double sx = double(w) / ow, sy = double(h) / oh;
  for (int y = 0; y < oh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(h - 1));
    const int y0 = int(fy), y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < ow; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(w - 1));
      const int x0 = int(fx), x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int ci = 0; ci < c; ++ci) {
        const double* s0 = src.data() + size_t(ci) * h * w;
        dst[size_t(ci) * oh * ow + size_t(y) * ow + x] =
            (1 - wy) * ((1 - wx) * s0[y0 * w + x0] + wx * s0[y0 * w + x1]) +
            wy * ((1 - wx) * s0[y1 * w + x0] + wx * s0[y1 * w + x1]);
      }
    }
  }
  return dst;
}

inline std::vector<uint8_t> resize_nearest(const std::vector<uint8_t>& src, int h, int w, int oh,
                                           int ow) {
  if (oh == h && ow == w) return src;
  std::vector<uint8_t> dst(size_t(oh) * ow);
  for (int y = 0; y < oh; ++y) {
    const int sy = std::clamp(int(std::lround((y + 0.5) * double(h) / oh - 0.5)), 0, h - 1);
    for (int x = 0; x < ow; ++x) {
      const int sx = std::clamp(int(std::lround((x + 0.5) * double(w) / ow - 0.5)), 0, w - 1);
      dst[size_t(y) * ow + x] = src[size_t(sy) * w + sx];
    }
  }
  return dst;
}

template <typename T>
std::vector<T> crop(const std::vector<T>& src, int c, int h, int w, int x0, int y0, int oh,
                    int ow) {
  std::vector<T> dst(size_t(c) * oh * ow);
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        dst[size_t(ci) * oh * ow + size_t(y) * ow + x] =
            src[size_t(ci) * h * w + size_t(y0 + y) * w + (x0 + x)];
  return dst;
}

}  // namespace detail

inline TensorPtr augment_image(const Augment& a, const TensorPtr& image) {
  check(image->shape == Shape{3, a.src_h, a.src_w}, "augment_image: unexpected image shape");
  auto scaled = detail::resize_bilinear(image->data, 3, a.src_h, a.src_w, a.scaled_h, a.scaled_w);
  auto out = make_tensor({3, a.out_h, a.out_w});
  out->data = detail::crop(scaled, 3, a.scaled_h, a.scaled_w, a.crop_x, a.crop_y, a.out_h, a.out_w);
  return out;
}

// Applies the transform at pyramid level `level` (all offsets are divisible
// by 8, so levels 0..3 are exact).
inline std::vector<double> augment_map(const Augment& a, const std::vector<double>& map, int c,
                                       int level) {
  const int f = 1 << level;
  auto scaled = detail::resize_bilinear(map, c, a.src_h / f, a.src_w / f, a.scaled_h / f,
                                        a.scaled_w / f);
  return detail::crop(scaled, c, a.scaled_h / f, a.scaled_w / f, a.crop_x / f, a.crop_y / f,
                      a.out_h / f, a.out_w / f);
}

inline std::vector<uint8_t> augment_labels(const Augment& a, const std::vector<uint8_t>& labels) {
  auto scaled = detail::resize_nearest(labels, a.src_h, a.src_w, a.scaled_h, a.scaled_w);
  return detail::crop(scaled, 1, a.scaled_h, a.scaled_w, a.crop_x, a.crop_y, a.out_h, a.out_w);
}

inline Intrinsics augment_intrinsics(const Augment& a, const Intrinsics& K) {
  Intrinsics out = K;
  const double sx = double(a.scaled_w) / a.src_w, sy = double(a.scaled_h) / a.src_h;
  out.fx = K.fx * sx;
  out.fy = K.fy * sy;
  out.cx = (K.cx + 0.5) * sx - 0.5 - a.crop_x;
  out.cy = (K.cy + 0.5) * sy - 0.5 - a.crop_y;
  out.width = a.out_w;
  out.height = a.out_h;
  return out;
}

// ---------------------------------------------------------------------------
// Shared training plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<TensorPtr> collect_params(std::map<std::string, TensorPtr>& m) {
  std::vector<TensorPtr> out;
  for (auto& [name, t] : m) out.push_back(t);
  return out;
}

// Ground-truth depth pyramid by 2x2 average pooling (plain loops, no tape).
inline std::vector<double> avg_pool_map(const std::vector<double>& src, int h, int w) {
  std::vector<double> dst(size_t(h / 2) * (w / 2));
  for (int y = 0; y < h / 2; ++y)
    for (int x = 0; x < w / 2; ++x)
      dst[size_t(y) * (w / 2) + x] =
          0.25 * (src[size_t(2 * y) * w + 2 * x] + src[size_t(2 * y) * w + 2 * x + 1] +
                  src[size_t(2 * y + 1) * w + 2 * x] + src[size_t(2 * y + 1) * w + 2 * x + 1]);
  return dst;
}

// Label pyramid by stride-2 subsampling (labels cannot be averaged).
inline std::vector<uint8_t> subsample_labels(const std::vector<uint8_t>& src, int h, int w) {
  std::vector<uint8_t> dst(size_t(h / 2) * (w / 2));
  for (int y = 0; y < h / 2; ++y)
    for (int x = 0; x < w / 2; ++x) dst[size_t(y) * (w / 2) + x] = src[size_t(2 * y) * w + 2 * x];
  return dst;
}

class TrainLog {
 public:
  explicit TrainLog(const std::string& path) {
    if (!path.empty()) {
      os_.open(path, std::ios::app);
      if (!os_) throw io_error("cannot open training log: " + path);
    }
  }
  void write(const nlohmann::json& record) {
    if (os_) os_ << record.dump() << "\n";
  }

 private:
  std::ofstream os_;
};

inline double elapsed_ms(std::chrono::steady_clock::time_point from) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - from)
      .count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Supervised bootstrap: depth L1 at 4 scales, segmentation cross-entropy at
// 3 scales, labeled frames only. Ego-motion and outlier heads stay untrained.
// ---------------------------------------------------------------------------

struct TrainResult {
  Checkpoint checkpoint;
  double first_loss = 0, last_loss = 0;
  int skipped_steps = 0;
};

inline TrainResult train_supervised(const TrainConfig& cfg) {
  cfg.validate();
  check(cfg.stage == "supervised", "train_supervised requires stage=supervised");
  auto seq = read_dataset(cfg.data_dir);

  std::vector<int> labeled;
  for (int i = 0; i < int(seq.frames.size()); ++i)
    if (seq.frames[i].has_depth && seq.frames[i].has_labels) labeled.push_back(i);
  check(!labeled.empty(), "supervised stage needs at least one labeled frame");

  ArchConfig arch = cfg.arch;
  arch.num_classes = seq.num_classes;
  DepthNet depth_net(arch);
  SegNet seg_net(arch);
  PoseNet pose_net(arch);
  depth_net.init_params(cfg.seed);
  seg_net.init_params(cfg.seed + 1);
  pose_net.init_params(cfg.seed + 2);
  if (!cfg.ckpt_in.empty()) {
    const auto ck = load_checkpoint(cfg.ckpt_in);
    load_into_nets(ck, &depth_net, &seg_net, &pose_net);
  }

  auto params = detail::collect_params(depth_net.params());
  for (auto& p : detail::collect_params(seg_net.params())) params.push_back(p);
  Adam opt(params, cfg.adam);
  detail::TrainLog log(cfg.log_path);
  Rng rng(cfg.seed ^ 0x5e1f5u);

  const int w = seq.intrinsics.width, h = seq.intrinsics.height;
  TrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    opt.zero_grad();
    Tape tape;
    TensorPtr depth_term = make_scalar(0.0), seg_term = make_scalar(0.0);
    TensorPtr om_term = make_scalar(0.0);
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& fr = seq.frames[labeled[uniform_int(rng, 0, int(labeled.size()) - 1)]];
      const Augment aug = cfg.augment ? draw_augment(rng, cfg, w, h) : identity_augment(w, h);

      auto img = augment_image(aug, fr.image);
      std::vector<double> gt_depth(fr.depth.begin(), fr.depth.end());
      gt_depth = augment_map(aug, gt_depth, 1, 0);
      auto gt_labels = augment_labels(aug, fr.labels);

      auto d_out = depth_net.forward(tape, img);
      auto s_out = seg_net.forward(tape, img);

      // nothing supervises the outlier head in this stage, so regularize it
      // toward "inlier everywhere"; otherwise it drifts to near zero and
      // silences the photometric term at the start of the refinement stage
      if (cfg.weights.w_om > 0.0)
        for (int l = 0; l < kDepthScales; ++l)
          om_term = add(tape, om_term,
                        scale(tape, outlier_mask_reg(tape, d_out.outlier[l]),
                              cfg.weights.w_om / d_out.outlier[l]->numel()));

      std::vector<double> gt_l = gt_depth;
      int lh = aug.out_h, lw = aug.out_w;
      for (int l = 0; l < kDepthScales; ++l) {
        if (l > 0) {
          gt_l = detail::avg_pool_map(gt_l, lh, lw);
          lh /= 2;
          lw /= 2;
        }
        auto gt_t = make_tensor({lh, lw});
        gt_t->data = gt_l;
        const std::vector<uint8_t> all_valid(size_t(lh) * lw, 1);
        depth_term = add(tape, depth_term,
                         supervised_depth_loss(tape, d_out.depth[l], gt_t, all_valid));
      }

      std::vector<uint8_t> lab_l = gt_labels;
      lh = aug.out_h;
      lw = aug.out_w;
      for (int l = 0; l < kSegScales; ++l) {
        if (l > 0) {
          lab_l = detail::subsample_labels(lab_l, lh, lw);
          lh /= 2;
          lw /= 2;
        }
        const std::vector<int> labels_int(lab_l.begin(), lab_l.end());
        seg_term =
            add(tape, seg_term, cross_entropy_channels(tape, s_out.logits[l], labels_int, -1));
      }
    }
    auto total =
        scale(tape, add(tape, add(tape, depth_term, seg_term), om_term), 1.0 / cfg.batch);
    tape.backward(total);
    const bool applied = opt.step();
    if (!applied) ++result.skipped_steps;

    if (step == 0) result.first_loss = total->data[0];
    result.last_loss = total->data[0];
    log.write({{"step", step},
               {"depth_l1", depth_term->data[0] / cfg.batch},
               {"seg_ce", seg_term->data[0] / cfg.batch},
               {"om", om_term->data[0] / cfg.batch},
               {"total", total->data[0]},
               {"applied", applied},
               {"wall_ms", detail::elapsed_ms(t0)}});
  }

  result.checkpoint =
      make_checkpoint("supervised", cfg.steps, depth_net, seg_net, pose_net, cfg.weights);
  if (!cfg.ckpt_out.empty()) save_checkpoint(cfg.ckpt_out, result.checkpoint);
  return result;
}

// ---------------------------------------------------------------------------
// Self-supervised refinement on 3-frame snippets. Images and intrinsics are
// the only inputs read from the dataset; ground truth stays untouched.
// ---------------------------------------------------------------------------

inline TrainResult train_selfsup(const TrainConfig& cfg, const Checkpoint& ckpt_in) {
  cfg.validate();
  check(cfg.stage == "selfsup", "train_selfsup requires stage=selfsup");
  check(ckpt_in.stage == "supervised" || ckpt_in.stage == "selfsup",
        "self-supervised stage requires a supervised checkpoint");
  auto seq = read_dataset(cfg.data_dir, /*images_only=*/true);

  ArchConfig arch = ckpt_in.arch;
  DepthNet depth_net(arch);
  SegNet seg_net(arch);
  PoseNet pose_net(arch);
  load_into_nets(ckpt_in, &depth_net, &seg_net, &pose_net);

  const DepthNet frozen_depth = depth_net.clone_frozen();
  const SegNet frozen_seg = seg_net.clone_frozen();

  const auto snippets = make_snippets(seq, cfg.snippet_stride, cfg.snippet_skip);
  check(!snippets.empty(), "dataset too short for the configured snippet stride/skip");

  auto main_params = detail::collect_params(depth_net.params());
  for (auto& p : detail::collect_params(seg_net.params())) main_params.push_back(p);
  Adam opt(main_params, cfg.adam);
  Adam pose_opt(detail::collect_params(pose_net.params()), cfg.adam);
  detail::TrainLog log(cfg.log_path);
  Rng rng(cfg.seed ^ 0xb007u);

  const int w = seq.intrinsics.width, h = seq.intrinsics.height;
  TrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    opt.zero_grad();
    pose_opt.zero_grad();
    Tape tape;
    TensorPtr total = make_scalar(0.0);
    LossReport mean_report;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& snip = snippets[uniform_int(rng, 0, int(snippets.size()) - 1)];
      const Augment aug = cfg.augment ? draw_augment(rng, cfg, w, h) : identity_augment(w, h);

      SnippetTensors st;
      st.intrinsics = augment_intrinsics(aug, seq.intrinsics);
      std::array<TensorPtr, 3> imgs;
      for (int f = 0; f < 3; ++f) {
        const int frame = snip.idx[f];
        imgs[f] = augment_image(aug, seq.frames[frame].image);
        st.images[f].push_back(imgs[f]);
        for (int l = 1; l < kDepthScales; ++l)
          st.images[f].push_back(avg_pool2(tape, st.images[f].back()));

        auto d_out = depth_net.forward(tape, imgs[f]);
        st.depth[f] = d_out.depth;
        st.outlier[f] = d_out.outlier;
        st.seg[f] = seg_net.forward(tape, imgs[f]).probs;

        // frozen targets are predictions of the frozen nets on the very same
        // augmented input, so the priors are exactly zero until the live nets
        // drift; the frozen params carry no grads, so nothing is recorded
        st.depth_pre[f] = frozen_depth.forward(tape, imgs[f]).depth;
        st.seg_pre[f] = frozen_seg.forward(tape, imgs[f]).probs;
      }
      auto pose_out = pose_net.forward(tape, imgs[0], imgs[1], imgs[2]);
      const auto to_prev = pose_expr_from_twist(tape, pose_out.to_prev);
      const auto to_next = pose_expr_from_twist(tape, pose_out.to_next);
      st.poses[{1, 0}] = to_prev;
      st.poses[{0, 1}] = pose_expr_invert(tape, to_prev);
      st.poses[{1, 2}] = to_next;
      st.poses[{2, 1}] = pose_expr_invert(tape, to_next);

      auto report = total_loss(tape, st, cfg.weights);
      total = add(tape, total, scale(tape, report.total_tensor, 1.0 / cfg.batch));
      mean_report.pho += report.pho / cfg.batch;
      mean_report.ssim += report.ssim / cfg.batch;
      mean_report.sc += report.sc / cfg.batch;
      mean_report.sm += report.sm / cfg.batch;
      mean_report.om += report.om / cfg.batch;
      mean_report.d_prior += report.d_prior / cfg.batch;
      mean_report.s_prior += report.s_prior / cfg.batch;
    }
    tape.backward(total);
    bool applied = pose_opt.step();
    if (step >= cfg.pose_warmup) applied = opt.step() && applied;
    if (!applied) ++result.skipped_steps;

    if (step == 0) result.first_loss = total->data[0];
    result.last_loss = total->data[0];
    log.write({{"step", step},
               {"pho", mean_report.pho},
               {"ssim", mean_report.ssim},
               {"sc", mean_report.sc},
               {"sm", mean_report.sm},
               {"om", mean_report.om},
               {"depth_prior", mean_report.d_prior},
               {"seg_prior", mean_report.s_prior},
               {"total", total->data[0]},
               {"applied", applied},
               {"wall_ms", detail::elapsed_ms(t0)}});
  }

  result.checkpoint = make_checkpoint("selfsup", ckpt_in.step + cfg.steps, depth_net, seg_net,
                                      pose_net, cfg.weights);
  if (!cfg.ckpt_out.empty()) save_checkpoint(cfg.ckpt_out, result.checkpoint);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation drivers shared by the CLI and the acceptance harness.
// ---------------------------------------------------------------------------

inline DepthEvalReport evaluate_depth(const DepthNet& net, const Sequence& seq,
                                      const std::vector<int>& frames, ScaleMode mode) {
  std::vector<double> pred, gt;
  for (int f : frames) {
    const auto& fr = seq.frames[f];
    check(fr.has_depth, "evaluation frame has no ground-truth depth");
    Tape tape;
    auto d = net.forward(tape, fr.image).depth[0];
    pred.insert(pred.end(), d->data.begin(), d->data.end());
    gt.insert(gt.end(), fr.depth.begin(), fr.depth.end());
  }
  const std::vector<uint8_t> valid(pred.size(), 1);
  return depth_metrics(pred, gt, valid, mode);
}

inline SegEvalReport evaluate_seg(const SegNet& net, const Sequence& seq,
                                  const std::vector<int>& frames) {
  std::vector<uint8_t> pred, gt;
  const int c = net.config().num_classes;
  for (int f : frames) {
    const auto& fr = seq.frames[f];
    check(fr.has_labels, "evaluation frame has no ground-truth labels");
    Tape tape;
    auto probs = net.forward(tape, fr.image).probs[0];
    const int hw = probs->shape[1] * probs->shape[2];
    for (int i = 0; i < hw; ++i) {
      int best = 0;
      for (int ci = 1; ci < c; ++ci)
        if (probs->data[ci * hw + i] > probs->data[best * hw + i]) best = ci;
      pred.push_back(uint8_t(best));
    }
    gt.insert(gt.end(), fr.labels.begin(), fr.labels.end());
  }
  return iou(pred, gt, c);
}

inline double evaluate_odom(const PoseNet& net, const Sequence& seq,
                            const std::vector<Snippet>& snippets) {
  check(!snippets.empty(), "odometry evaluation needs at least one snippet");
  double total = 0;
  for (const auto& snip : snippets) {
    Tape tape;
    auto out = net.forward(tape, seq.frames[snip.idx[0]].image, seq.frames[snip.idx[1]].image,
                           seq.frames[snip.idx[2]].image);
    std::array<double, 6> tw_prev, tw_next;
    std::copy_n(out.to_prev->data.begin(), 6, tw_prev.begin());
    std::copy_n(out.to_next->data.begin(), 6, tw_next.begin());
    // predicted trajectory in frame-t1 coordinates
    const PoseSE3 t2_from_t1 = pose_invert(se3_exp(tw_prev));        // t1 -> t2
    const PoseSE3 t3_from_t1 = pose_compose(se3_exp(tw_next), t2_from_t1);
    const std::vector<PoseSE3> pred{PoseSE3::identity(), t2_from_t1, t3_from_t1};
    const std::vector<PoseSE3> gt{seq.frames[snip.idx[0]].pose, seq.frames[snip.idx[1]].pose,
                                  seq.frames[snip.idx[2]].pose};
    total += ate(pred, gt);
  }
  return total / double(snippets.size());
}

// Mean learned outlier-mask value over moving-object pixels vs static pixels;
// ground-truth labels are used only to partition pixels for this diagnostic.
inline std::pair<double, double> outlier_separation(const DepthNet& net, const Sequence& seq,
                                                    const std::vector<int>& frames) {
  check(seq.dynamic, "outlier_separation needs a dynamic-object sequence");
  const int dyn = seq.num_classes - 1;
  double dyn_sum = 0, stat_sum = 0;
  long dyn_n = 0, stat_n = 0;
  for (int f : frames) {
    const auto& fr = seq.frames[f];
    check(fr.has_labels, "outlier_separation frame has no labels");
    Tape tape;
    auto o = net.forward(tape, fr.image).outlier[0];
    for (int i = 0; i < o->numel(); ++i) {
      if (fr.labels[i] == dyn) {
        dyn_sum += o->data[i];
        ++dyn_n;
      } else {
        stat_sum += o->data[i];
        ++stat_n;
      }
    }
  }
  check(dyn_n > 0 && stat_n > 0, "outlier_separation needs both pixel populations");
  return {dyn_sum / dyn_n, stat_sum / stat_n};
}

}  // namespace selfsup
