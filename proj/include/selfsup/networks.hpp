#pragma once

// Miniature CPU-trainable networks. They are deliberately small encoder-decoder
// stacks, but keep the multi-scale output contracts of the full-size models
// they stand in for: 4 depth scales, 4 outlier-mask scales, 3 segmentation
// scales, and one 6-vector twist per non-center snippet frame.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "selfsup/geometry.hpp"
#include "selfsup/ops.hpp"

namespace selfsup {

inline constexpr int kDepthOutputScales = 4;
inline constexpr int kSegOutputScales = 3;

// Inverse-depth activation: D = 1 / (a*sigmoid(x) + b). With a = 9.99 and
// b = 0.01 the output is strictly inside (0.1, 100) scene units, which
// brackets the synthetic scenes (depths 1..20) with margin.
inline constexpr double kInvDepthA = 9.99;
inline constexpr double kInvDepthB = 0.01;

struct ArchConfig {
  int base_channels = 8;
  int num_classes = 4;

  void validate() const {
    check(base_channels >= 2 && base_channels <= 64, "base_channels out of range [2,64]");
    check(num_classes >= 2, "num_classes must be at least 2");
  }
};

namespace detail {

enum class InitKind { kHe, kZero };

// Named parameter registry shared by the three networks. std::map gives a
// stable iteration order, so seeding, optimizer state, and checkpoints all
// see parameters in the same order.
class ParamStore {
 public:
  TensorPtr add(const std::string& name, Shape shape, InitKind kind, int fan_in) {
    check(params_.find(name) == params_.end(), "duplicate parameter name: " + name);
    auto t = make_tensor(std::move(shape), 0.0, true);
    params_[name] = t;
    init_[name] = {kind, fan_in};
    return t;
  }

  void init(uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : params_) {
      const auto& [kind, fan_in] = init_.at(name);
      if (kind == InitKind::kZero) {
        std::fill(t->data.begin(), t->data.end(), 0.0);
      } else {
        const double stddev = std::sqrt(2.0 / fan_in);
        for (auto& v : t->data) v = gaussian(rng, 0.0, stddev);
      }
      t->grad.clear();
    }
  }

  std::map<std::string, TensorPtr>& all() { return params_; }
  const std::map<std::string, TensorPtr>& all() const { return params_; }

  void copy_values_from(const ParamStore& other) {
    check(params_.size() == other.params_.size(), "parameter set mismatch");
    for (auto& [name, t] : params_) t->data = other.params_.at(name)->data;
  }

  void freeze() {
    for (auto& [name, t] : params_) {
      t->requires_grad = false;
      t->grad.clear();
    }
  }

 private:
  std::map<std::string, TensorPtr> params_;
  std::map<std::string, std::pair<InitKind, int>> init_;
};

struct ConvLayer {
  TensorPtr kernel, bias;
  int stride = 1, padding = 1;
};

inline ConvLayer add_conv(ParamStore& store, const std::string& name, int cin, int cout, int k,
                          int stride, InitKind kind = InitKind::kHe) {
  ConvLayer l;
  l.kernel = store.add(name + ".kernel", {cout, cin, k, k}, kind, cin * k * k);
  l.bias = store.add(name + ".bias", {cout}, InitKind::kZero, 1);
  l.stride = stride;
  l.padding = k / 2;
  return l;
}

inline TensorPtr conv_relu(Tape& tape, const ConvLayer& l, const TensorPtr& x) {
  // stride 2 means "halve first": avg-pool then stride-1 conv, which keeps
  // every feature map size an exact power-of-two fraction of the input
  auto in = l.stride == 2 ? avg_pool2(tape, x) : x;
  return relu(tape, conv2d(tape, in, l.kernel, l.bias, 1, l.padding));
}

inline void check_divisible(const TensorPtr& image, int factor) {
  check(image->shape.size() == 3 && image->shape[0] == 3, "expected a [3,H,W] image");
  check(image->shape[1] % factor == 0 && image->shape[2] % factor == 0,
        "image dimensions must be divisible by " + std::to_string(factor));
}

}  // namespace detail

struct DepthOutputs {
  std::vector<TensorPtr> depth;    // finest first, [H,W] each, values in (0.1, 100)
  std::vector<TensorPtr> outlier;  // finest first, [H,W] each, values in (0, 1)
};

class DepthNet {
 public:
  explicit DepthNet(const ArchConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int c = cfg.base_channels;
    enc_[0] = detail::add_conv(store_, "enc0", 3, c, 3, 1);
    enc_[1] = detail::add_conv(store_, "enc1", c, 2 * c, 3, 2);
    enc_[2] = detail::add_conv(store_, "enc2", 2 * c, 4 * c, 3, 2);
    enc_[3] = detail::add_conv(store_, "enc3", 4 * c, 4 * c, 3, 2);
    const int widths[4] = {c, 2 * c, 2 * c, 4 * c};  // decoder widths, finest first
    dec_[3] = detail::add_conv(store_, "dec3", 4 * c, widths[3], 3, 1);
    dec_[2] = detail::add_conv(store_, "dec2", widths[3] + 4 * c, widths[2], 3, 1);
    dec_[1] = detail::add_conv(store_, "dec1", widths[2] + 2 * c, widths[1], 3, 1);
    dec_[0] = detail::add_conv(store_, "dec0", widths[1] + c, widths[0], 3, 1);
    for (int l = 0; l < 4; ++l) {
      head_depth_[l] = detail::add_conv(store_, "depth_head" + std::to_string(l), widths[l], 1, 3, 1);
      head_outlier_[l] =
          detail::add_conv(store_, "outlier_head" + std::to_string(l), widths[l], 1, 3, 1);
    }
  }

  void init_params(uint64_t seed) { store_.init(seed); }

  DepthOutputs forward(Tape& tape, const TensorPtr& image) const {
    detail::check_divisible(image, 8);
    const int h = image->shape[1], w = image->shape[2];
    TensorPtr skips[4];
    skips[0] = detail::conv_relu(tape, enc_[0], image);
    for (int l = 1; l < 4; ++l) skips[l] = detail::conv_relu(tape, enc_[l], skips[l - 1]);

    DepthOutputs out;
    out.depth.resize(4);
    out.outlier.resize(4);
    TensorPtr feat = detail::conv_relu(tape, dec_[3], skips[3]);
    for (int l = 3;; --l) {
      const int sh = h >> l, sw = w >> l;
      auto inv = sigmoid(tape, conv2d(tape, feat, head_depth_[l].kernel, head_depth_[l].bias, 1, 1));
      auto d = reciprocal(tape, affine(tape, inv, kInvDepthA, kInvDepthB));
      out.depth[l] = reshape(tape, d, {sh, sw});
      auto o = sigmoid(tape,
                       conv2d(tape, feat, head_outlier_[l].kernel, head_outlier_[l].bias, 1, 1));
      out.outlier[l] = reshape(tape, o, {sh, sw});
      if (l == 0) break;
      auto up = upsample_bilinear_x2(tape, feat);
      feat = detail::conv_relu(tape, dec_[l - 1], concat_channels(tape, {up, skips[l - 1]}));
    }
    return out;
  }

  DepthNet clone_frozen() const {
    DepthNet copy(cfg_);
    copy.store_.copy_values_from(store_);
    copy.store_.freeze();
    return copy;
  }

  const ArchConfig& config() const { return cfg_; }
  std::map<std::string, TensorPtr>& params() { return store_.all(); }
  const std::map<std::string, TensorPtr>& params() const { return store_.all(); }

 private:
  ArchConfig cfg_;
  detail::ParamStore store_;
  detail::ConvLayer enc_[4], dec_[4], head_depth_[4], head_outlier_[4];
};

struct SegOutputs {
  std::vector<TensorPtr> logits;  // finest first, [C,H,W] each
  std::vector<TensorPtr> probs;   // softmax of logits
};

class SegNet {
 public:
  explicit SegNet(const ArchConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int c = cfg.base_channels;
    enc_[0] = detail::add_conv(store_, "enc0", 3, c, 3, 1);
    enc_[1] = detail::add_conv(store_, "enc1", c, 2 * c, 3, 2);
    enc_[2] = detail::add_conv(store_, "enc2", 2 * c, 4 * c, 3, 2);
    const int widths[3] = {c, 2 * c, 4 * c};
    dec_[2] = detail::add_conv(store_, "dec2", 4 * c, widths[2], 3, 1);
    dec_[1] = detail::add_conv(store_, "dec1", widths[2] + 2 * c, widths[1], 3, 1);
    dec_[0] = detail::add_conv(store_, "dec0", widths[1] + c, widths[0], 3, 1);
    for (int l = 0; l < 3; ++l)
      head_[l] = detail::add_conv(store_, "logit_head" + std::to_string(l), widths[l],
                                  cfg.num_classes, 3, 1);
  }

  void init_params(uint64_t seed) { store_.init(seed); }

  SegOutputs forward(Tape& tape, const TensorPtr& image) const {
    detail::check_divisible(image, 8);
    TensorPtr skips[3];
    skips[0] = detail::conv_relu(tape, enc_[0], image);
    for (int l = 1; l < 3; ++l) skips[l] = detail::conv_relu(tape, enc_[l], skips[l - 1]);

    SegOutputs out;
    out.logits.resize(3);
    out.probs.resize(3);
    TensorPtr feat = detail::conv_relu(tape, dec_[2], skips[2]);
    for (int l = 2;; --l) {
      out.logits[l] = conv2d(tape, feat, head_[l].kernel, head_[l].bias, 1, 1);
      out.probs[l] = softmax_channels(tape, out.logits[l]);
      if (l == 0) break;
      auto up = upsample_bilinear_x2(tape, feat);
      feat = detail::conv_relu(tape, dec_[l - 1], concat_channels(tape, {up, skips[l - 1]}));
    }
    return out;
  }

  SegNet clone_frozen() const {
    SegNet copy(cfg_);
    copy.store_.copy_values_from(store_);
    copy.store_.freeze();
    return copy;
  }

  const ArchConfig& config() const { return cfg_; }
  std::map<std::string, TensorPtr>& params() { return store_.all(); }
  const std::map<std::string, TensorPtr>& params() const { return store_.all(); }

 private:
  ArchConfig cfg_;
  detail::ParamStore store_;
  detail::ConvLayer enc_[3], dec_[3], head_[3];
};

struct PoseOutputs {
  TensorPtr to_prev;  // 6-vector twist, center frame -> previous frame
  TensorPtr to_next;  // 6-vector twist, center frame -> next frame
};

class PoseNet {
 public:
  explicit PoseNet(const ArchConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int c = cfg.base_channels;
    conv_[0] = detail::add_conv(store_, "conv0", 9, c, 3, 2);
    conv_[1] = detail::add_conv(store_, "conv1", c, 2 * c, 3, 2);
    conv_[2] = detail::add_conv(store_, "conv2", 2 * c, 2 * c, 3, 2);
    // zero-initialized head so training starts from identity motion
    head_weight_ = store_.add("head.weight", {12, 2 * c}, detail::InitKind::kZero, 2 * c);
    head_bias_ = store_.add("head.bias", {12}, detail::InitKind::kZero, 1);
  }

  void init_params(uint64_t seed) { store_.init(seed); }

  // Frames in temporal order; the two twists describe the center frame's
  // motion to its neighbors. Reverse directions come from pose inversion.
  PoseOutputs forward(Tape& tape, const TensorPtr& f1, const TensorPtr& f2,
                      const TensorPtr& f3) const {
    detail::check_divisible(f1, 8);
    check(f1->shape == f2->shape && f2->shape == f3->shape, "snippet frames must share a shape");
    auto x = concat_channels(tape, {f1, f2, f3});
    for (const auto& l : conv_) x = detail::conv_relu(tape, l, x);
    auto twists = linear(tape, global_mean_pool(tape, x), head_weight_, head_bias_);
    PoseOutputs out;
    out.to_prev = slice_flat(tape, twists, 0, 6);
    out.to_next = slice_flat(tape, twists, 6, 6);
    return out;
  }

  PoseNet clone_frozen() const {
    PoseNet copy(cfg_);
    copy.store_.copy_values_from(store_);
    copy.store_.freeze();
    return copy;
  }

  const ArchConfig& config() const { return cfg_; }
  std::map<std::string, TensorPtr>& params() { return store_.all(); }
  const std::map<std::string, TensorPtr>& params() const { return store_.all(); }

 private:
  ArchConfig cfg_;
  detail::ParamStore store_;
  detail::ConvLayer conv_[3];
  TensorPtr head_weight_, head_bias_;
};

}  // namespace selfsup
