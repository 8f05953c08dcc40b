#pragma once

// Synthetic monocular video with exact ground truth. A sequence is ray-cast
// against an analytic scene: the inside of a textured room box plus a handful
// of textured boxes, each carrying a semantic class id. Exact depth and
// known poses make the renderer usable as a test oracle for the whole
// geometry stack. Textures are functions of the world-space hit point only
// (no lighting), so a static scene is photometrically consistent across
// viewpoints by construction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "selfsup/geometry.hpp"
#include "selfsup/image_io.hpp"

namespace selfsup {

struct Box {
  std::array<double, 3> lo{}, hi{};
  int class_id = 0;
  // oscillating translation, nonzero only for the moving box in dynamic mode:
  // offset(frame) = osc_amp * sin(osc_rate * frame)
  std::array<double, 3> osc_amp{};
  double osc_rate = 0;
};

struct Scene {
  uint64_t seed = 0;
  int num_classes = 6;
  std::array<double, 3> room_lo{-6, -2, -6};
  std::array<double, 3> room_hi{6, 2, 6};
  std::vector<Box> boxes;
  bool dynamic = false;
  int dynamic_class = -1;  // class id reserved for the moving box
};

struct Frame {
  TensorPtr image;              // [3,H,W] in [0,1], quantized to 8-bit levels
  std::vector<float> depth;     // [H*W] camera-frame z, empty if unavailable
  std::vector<uint8_t> labels;  // [H*W] class ids, empty if unavailable
  PoseSE3 pose;                 // world-to-camera
  bool has_depth = false, has_labels = false;
};

struct Sequence {
  Intrinsics intrinsics;
  std::vector<Frame> frames;
  int num_classes = 0;
  uint64_t seed = 0;
  bool dynamic = false;
};

struct Snippet {
  std::array<int, 3> idx{};  // frame indices (t1, t2, t3), uniform skip
};

struct GenOptions {
  int width = 64, height = 64;
  int num_classes = 6;
  bool dynamic = false;
};

namespace detail {

// Per-class procedural texture: a smooth low-frequency sinusoid field of the
// world position. Frequencies stay low so bilinear resampling between nearby
// viewpoints agrees with rendering to well under 0.02 intensity.
inline std::array<double, 3> class_texture(int class_id, const std::array<double, 3>& p) {
  static const double base[8][3] = {{0.85, 0.35, 0.30}, {0.30, 0.75, 0.35}, {0.30, 0.40, 0.85},
                                    {0.85, 0.75, 0.25}, {0.70, 0.35, 0.80}, {0.35, 0.75, 0.75},
                                    {0.80, 0.55, 0.30}, {0.60, 0.60, 0.60}};
  const double* b = base[class_id % 8];
  const double f = 1.2 + 0.45 * (class_id % 5);
  const double phase = 0.9 * class_id;
  const double m1 = std::sin(f * p[0] + 0.7 * f * p[2] + phase);
  const double m2 = std::sin(0.8 * f * p[1] + 0.5 * f * p[0] - phase);
  const double m3 = std::sin(3.1 * f * p[0] - 2.4 * f * p[2] + 1.7 * phase) *
                    std::sin(2.6 * f * p[1] + 1.9 * f * p[2] - 0.6 * phase);
  const double m = 0.70 + 0.14 * m1 + 0.08 * m2 + 0.14 * m3;
  return {std::clamp(b[0] * m, 0.0, 1.0), std::clamp(b[1] * m, 0.0, 1.0),
          std::clamp(b[2] * m, 0.0, 1.0)};
}

// Slab intersection with an AABB. Returns the entry distance for rays
// starting outside and the exit distance for rays starting inside.
inline bool ray_aabb(const std::array<double, 3>& origin, const std::array<double, 3>& dir,
                     const std::array<double, 3>& lo, const std::array<double, 3>& hi,
                     double* t_out) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::fabs(dir[a]) < 1e-12) {
      if (origin[a] < lo[a] || origin[a] > hi[a]) return false;
      continue;
    }
    double ta = (lo[a] - origin[a]) / dir[a];
    double tb = (hi[a] - origin[a]) / dir[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  const bool inside = origin[0] >= lo[0] && origin[0] <= hi[0] && origin[1] >= lo[1] &&
                      origin[1] <= hi[1] && origin[2] >= lo[2] && origin[2] <= hi[2];
  const double t = inside ? t1 : t0;
  if (t <= 1e-9) return false;
  *t_out = t;
  return true;
}

inline PoseSE3 camera_pose(double yaw, double pitch, const std::array<double, 3>& position) {
  // camera-to-world rotation: yaw about Y then pitch about X
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  const std::array<double, 9> r_cw = {cy, sy * sp, sy * cp, 0, cp, -sp, -sy, cy * sp, cy * cp};
  PoseSE3 pose;  // world-to-camera: transpose rotation, t = -R^T * position
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) pose.rotation[i * 3 + j] = r_cw[j * 3 + i];
  for (int i = 0; i < 3; ++i) {
    pose.translation[i] = 0;
    for (int j = 0; j < 3; ++j) pose.translation[i] -= pose.rotation[i * 3 + j] * position[j];
  }
  return pose;
}

}  // namespace detail

inline Scene make_scene(uint64_t seed, int num_classes, bool dynamic) {
  check(num_classes >= 3 && num_classes <= 8, "class count must be in [3,8]");
  Scene scene;
  scene.seed = seed;
  scene.num_classes = num_classes;
  scene.dynamic = dynamic;
  Rng rng(seed * 7919 + 13);
  const int n_static = 8 + uniform_int(rng, 0, 3);
  for (int i = 0; i < n_static; ++i) {
    for (int tries = 0; tries < 16; ++tries) {
      const double cx = uniform(rng, -4.5, 4.5);
      const double cz = uniform(rng, -4.5, 4.5);
      const double sx = uniform(rng, 0.6, 1.4), sy = uniform(rng, 0.6, 1.8),
                   sz = uniform(rng, 0.6, 1.4);
      // keep surfaces well clear of the camera orbit (radius <= 1.4) so every
      // rendered depth stays >= 1 scene unit
      if (std::hypot(cx, cz) - std::max(sx, sz) < 2.8) continue;
      Box b;
      b.lo = {cx - sx, -2.0, cz - sz};
      b.hi = {cx + sx, -2.0 + 2 * sy, cz + sz};
      b.class_id = 1 + (i % (num_classes - (dynamic ? 2 : 1)));
      scene.boxes.push_back(b);
      break;
    }
  }
  if (dynamic) {
    Box b;
    scene.dynamic_class = num_classes - 1;
    b.class_id = scene.dynamic_class;
    b.lo = {-0.8, -0.6, 3.2};
    b.hi = {0.8, 0.9, 4.6};
    b.osc_amp = {1.1, 0.0, 0.4};
    b.osc_rate = 0.09;
    scene.boxes.push_back(b);
  }
  return scene;
}

inline void render_frame(const Scene& scene, const Intrinsics& K, const PoseSE3& pose,
                         int frame_index, Frame* out) {
  const int w = K.width, h = K.height;
  out->image = make_tensor({3, h, w});
  out->depth.assign(size_t(w) * h, 0.f);
  out->labels.assign(size_t(w) * h, 0);
  out->has_depth = out->has_labels = true;
  out->pose = pose;

  // camera center and axes in world coordinates (pose is world-to-camera)
  std::array<double, 3> origin{}, axis_x{}, axis_y{}, axis_z{};
  for (int i = 0; i < 3; ++i) {
    axis_x[i] = pose.rotation[0 * 3 + i];
    axis_y[i] = pose.rotation[1 * 3 + i];
    axis_z[i] = pose.rotation[2 * 3 + i];
    origin[i] = -(pose.rotation[0 * 3 + i] * pose.translation[0] +
                  pose.rotation[1 * 3 + i] * pose.translation[1] +
                  pose.rotation[2 * 3 + i] * pose.translation[2]);
  }

  std::vector<Box> boxes = scene.boxes;
  for (auto& b : boxes)
    for (int a = 0; a < 3; ++a) {
      const double off = b.osc_amp[a] * std::sin(b.osc_rate * frame_index);
      b.lo[a] += off;
      b.hi[a] += off;
    }

  const int hw = h * w;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const double dx = (u - K.cx) / K.fx, dy = (v - K.cy) / K.fy;
      std::array<double, 3> dir;
      for (int i = 0; i < 3; ++i) dir[i] = dx * axis_x[i] + dy * axis_y[i] + axis_z[i];

      double best_t;
      int best_class = 0;
      bool hit_room = detail::ray_aabb(origin, dir, scene.room_lo, scene.room_hi, &best_t);
      check(hit_room, "camera escaped the room volume");
      for (const auto& b : boxes) {
        double t;
        if (detail::ray_aabb(origin, dir, b.lo, b.hi, &t) && t < best_t) {
          best_t = t;
          best_class = b.class_id;
        }
      }
      const std::array<double, 3> hit = {origin[0] + best_t * dir[0], origin[1] + best_t * dir[1],
                                         origin[2] + best_t * dir[2]};
      const auto rgb = detail::class_texture(best_class, hit);
      const int i = v * w + u;
      for (int c = 0; c < 3; ++c)
        out->image->data[c * hw + i] = std::lround(rgb[c] * 255.0) / 255.0;  // 8-bit levels
      out->depth[i] = float(best_t);  // dir has unit z in camera frame, so t is camera z
      out->labels[i] = uint8_t(best_class);
    }
  }
}

inline Sequence generate_sequence(uint64_t seed, int length, const GenOptions& opt = {}) {
  check(length >= 3, "sequence needs at least 3 frames");
  Intrinsics K;
  K.width = opt.width;
  K.height = opt.height;
  K.fx = K.fy = double(opt.width);
  K.cx = (opt.width - 1) / 2.0;
  K.cy = (opt.height - 1) / 2.0;
  K.validate();

  for (uint64_t attempt = 0; attempt < 64; ++attempt) {
    const uint64_t scene_seed = seed + 1000003 * attempt;
    Scene scene = make_scene(scene_seed, opt.num_classes, opt.dynamic);
    Rng rng(scene_seed * 31 + 7);
    // ranges are deliberately narrow: the tangential speed orbit_r * orbit_rate
    // sets the parallax available to any photometric objective, and wildly
    // different speeds across seeds would make sequences of uneven difficulty
    const double orbit_r = uniform(rng, 1.0, 1.4);
    const double yaw0 = uniform(rng, 0, 2 * M_PI);
    const double yaw_rate = uniform(rng, 0.01, 0.018);      // radians per frame
    const double orbit_rate = uniform(rng, 0.016, 0.022);   // units/frame along the orbit

    Sequence seq;
    seq.intrinsics = K;
    seq.num_classes = opt.num_classes;
    seq.seed = seed;
    seq.dynamic = opt.dynamic;
    seq.frames.resize(length);
    for (int f = 0; f < length; ++f) {
      const double a = yaw0 + orbit_rate * f;
      const std::array<double, 3> position = {orbit_r * std::cos(a), 0.35 * std::sin(0.013 * f),
                                              orbit_r * std::sin(a)};
      const double yaw = yaw0 + 0.6 + yaw_rate * f;
      const double pitch = 0.12 * std::sin(0.011 * f + 1.0);
      render_frame(scene, K, detail::camera_pose(yaw, pitch, position), f, &seq.frames[f]);
    }

    std::set<int> classes_seen;
    size_t dynamic_pixels = 0;
    for (const auto& fr : seq.frames)
      for (uint8_t c : fr.labels) {
        classes_seen.insert(c);
        if (opt.dynamic && c == opt.num_classes - 1) ++dynamic_pixels;
      }
    // a moving object that is barely ever on screen is useless both for
    // learning and for evaluating the outlier masks, so demand a minimum
    // average footprint of 16 pixels per frame
    const bool dynamic_visible = !opt.dynamic || dynamic_pixels >= 16 * seq.frames.size();
    if (int(classes_seen.size()) >= 3 && dynamic_visible) return seq;
  }
  throw domain_error("scene generation failed to produce 3 visible classes");
}

inline std::vector<Snippet> make_snippets(const Sequence& seq, int stride, int skip) {
  check(stride >= 1 && skip >= 1, "stride and skip must be positive");
  std::vector<Snippet> out;
  const int n = int(seq.frames.size());
  for (int i = 0; i + 2 * skip < n; i += stride) out.push_back({{i, i + skip, i + 2 * skip}});
  return out;
}

// Indices of frames that keep their ground truth under sparse labeling.
inline std::vector<int> sparse_label_view(const Sequence& seq, int label_stride) {
  check(label_stride >= 1, "label_stride must be >= 1");
  std::vector<int> labeled;
  for (int i = 0; i < int(seq.frames.size()); ++i)
    if (i % label_stride == 0) labeled.push_back(i);
  return labeled;
}

// ---------------------------------------------------------------------------
// On-disk layout:
//   manifest.json               intrinsics, counts, seed, labeling stride
//   frames/%06d.png             8-bit RGB
//   depth/%06d.pfm              float32 little-endian PFM (labeled frames only)
//   labels/%06d.png             8-bit class ids (labeled frames only)
//   poses.txt                   12 floats per line, row-major 3x4 world-to-camera
// ---------------------------------------------------------------------------

namespace detail {

inline std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", i);
  return buf;
}

}  // namespace detail

inline void write_dataset(const std::string& dir, const Sequence& seq, int label_stride = 1) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "frames");
  fs::create_directories(fs::path(dir) / "depth");
  fs::create_directories(fs::path(dir) / "labels");

  const auto labeled = sparse_label_view(seq, label_stride);
  const std::set<int> labeled_set(labeled.begin(), labeled.end());

  nlohmann::json manifest;
  manifest["width"] = seq.intrinsics.width;
  manifest["height"] = seq.intrinsics.height;
  manifest["fx"] = seq.intrinsics.fx;
  manifest["fy"] = seq.intrinsics.fy;
  manifest["cx"] = seq.intrinsics.cx;
  manifest["cy"] = seq.intrinsics.cy;
  manifest["frame_count"] = seq.frames.size();
  manifest["class_count"] = seq.num_classes;
  manifest["seed"] = seq.seed;
  manifest["dynamic"] = seq.dynamic;
  manifest["label_stride"] = label_stride;
  {
    std::ofstream mf(fs::path(dir) / "manifest.json");
    check(bool(mf), "cannot write manifest in " + dir);
    mf << manifest.dump(2) << "\n";
  }

  std::ofstream poses(fs::path(dir) / "poses.txt");
  check(bool(poses), "cannot write poses.txt in " + dir);
  poses.precision(17);
  for (int i = 0; i < int(seq.frames.size()); ++i) {
    const auto& fr = seq.frames[i];
    const auto name = detail::frame_name(i);
    write_png((fs::path(dir) / "frames" / (name + ".png")).string(), tensor_to_rgb8(fr.image));
    if (labeled_set.count(i)) {
      check(fr.has_depth && fr.has_labels, "frame selected for labels has no ground truth");
      write_pfm((fs::path(dir) / "depth" / (name + ".pfm")).string(), fr.depth,
                seq.intrinsics.width, seq.intrinsics.height);
      ImageU8 lab;
      lab.width = seq.intrinsics.width;
      lab.height = seq.intrinsics.height;
      lab.channels = 1;
      lab.pixels = fr.labels;
      write_png((fs::path(dir) / "labels" / (name + ".png")).string(), lab);
    }
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) poses << fr.pose.rotation[r * 3 + c] << " ";
      poses << fr.pose.translation[r] << (r == 2 ? "" : " ");
    }
    poses << "\n";
  }
}

// When images_only is set, ground-truth depth and label files are never
// opened: this is the restricted data path for the self-supervised stage.
inline Sequence read_dataset(const std::string& dir, bool images_only = false) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw io_error("missing manifest.json in " + dir);
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw io_error("malformed manifest.json in " + dir + ": " + e.what());
  }

  Sequence seq;
  try {
    seq.intrinsics.width = manifest.at("width").get<int>();
    seq.intrinsics.height = manifest.at("height").get<int>();
    seq.intrinsics.fx = manifest.at("fx").get<double>();
    seq.intrinsics.fy = manifest.at("fy").get<double>();
    seq.intrinsics.cx = manifest.at("cx").get<double>();
    seq.intrinsics.cy = manifest.at("cy").get<double>();
    seq.num_classes = manifest.at("class_count").get<int>();
    seq.seed = manifest.at("seed").get<uint64_t>();
    seq.dynamic = manifest.value("dynamic", false);
  } catch (const nlohmann::json::exception& e) {
    throw io_error("manifest.json in " + dir + " is missing fields: " + e.what());
  }
  seq.intrinsics.validate();
  const int n = manifest.at("frame_count").get<int>();
  check(n >= 1, "manifest frame_count must be positive");

  std::ifstream poses(fs::path(dir) / "poses.txt");
  if (!poses) throw io_error("missing poses.txt in " + dir);

  seq.frames.resize(n);
  for (int i = 0; i < n; ++i) {
    auto& fr = seq.frames[i];
    const auto name = detail::frame_name(i);
    fr.image = rgb8_to_tensor(read_png((fs::path(dir) / "frames" / (name + ".png")).string()));
    check(fr.image->shape[1] == seq.intrinsics.height && fr.image->shape[2] == seq.intrinsics.width,
          "frame " + name + " does not match manifest dimensions");

    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) {
        double v;
        if (!(poses >> v))
          throw io_error("poses.txt in " + dir + " truncated at frame " + std::to_string(i));
        if (c < 3)
          fr.pose.rotation[r * 3 + c] = v;
        else
          fr.pose.translation[r] = v;
      }

    if (images_only) continue;
    const auto depth_path = fs::path(dir) / "depth" / (name + ".pfm");
    const auto label_path = fs::path(dir) / "labels" / (name + ".png");
    if (fs::exists(depth_path)) {
      int dw = 0, dh = 0;
      fr.depth = read_pfm(depth_path.string(), &dw, &dh);
      check(dw == seq.intrinsics.width && dh == seq.intrinsics.height,
            "depth " + name + " does not match manifest dimensions");
      fr.has_depth = true;
    }
    if (fs::exists(label_path)) {
      auto lab = read_png(label_path.string());
      check(lab.channels == 1, "label file " + name + " must be grayscale");
      check(lab.width == seq.intrinsics.width && lab.height == seq.intrinsics.height,
            "labels " + name + " do not match manifest dimensions");
      fr.labels = lab.pixels;
      fr.has_labels = true;
    }
  }
  return seq;
}

}  // namespace selfsup
