#pragma once

// Versioned binary checkpoint container. Layout (little-endian):
//   8 bytes   magic "SSUPCKP1"
//   u32       format version (currently 1)
//   u8        stage tag: 0 = supervised, 1 = selfsup
//   u64       step counter
//   i32 i32   arch: base_channels, num_classes
//   7 x f64   loss weights (pho, ssim, sc, sm, om, D, S)
//   u32       blob count
//   per blob: u32 name length, name bytes, u32 ndim, i32 dims..., f64 data
// Written atomically: temp file in the target directory, then rename.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "selfsup/losses.hpp"
#include "selfsup/networks.hpp"

namespace selfsup {

struct Checkpoint {
  std::string stage;  // "supervised" or "selfsup"
  uint64_t step = 0;
  ArchConfig arch;
  LossWeights weights;
  std::map<std::string, TensorPtr> blobs;  // "depth/...", "seg/...", "pose/..."
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'S', 'S', 'U', 'P', 'C', 'K', 'P', '1'};
inline constexpr uint32_t kCkptVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw io_error("truncated checkpoint: " + path);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  check(ck.stage == "supervised" || ck.stage == "selfsup", "unknown checkpoint stage tag");
  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot write checkpoint: " + tmp.string());
    os.write(detail::kCkptMagic, 8);
    detail::put(os, detail::kCkptVersion);
    detail::put(os, uint8_t(ck.stage == "selfsup" ? 1 : 0));
    detail::put(os, ck.step);
    detail::put(os, int32_t(ck.arch.base_channels));
    detail::put(os, int32_t(ck.arch.num_classes));
    for (double w : {ck.weights.w_pho, ck.weights.w_ssim, ck.weights.w_sc, ck.weights.w_sm,
                     ck.weights.w_om, ck.weights.w_D, ck.weights.w_S})
      detail::put(os, w);
    detail::put(os, uint32_t(ck.blobs.size()));
    for (const auto& [name, t] : ck.blobs) {
      detail::put(os, uint32_t(name.size()));
      os.write(name.data(), std::streamsize(name.size()));
      detail::put(os, uint32_t(t->shape.size()));
      for (int d : t->shape) detail::put(os, int32_t(d));
      os.write(reinterpret_cast<const char*>(t->data.data()),
               std::streamsize(t->data.size() * sizeof(double)));
    }
    if (!os) throw io_error("short write on checkpoint: " + tmp.string());
  }
  fs::rename(tmp, target);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw io_error("not a checkpoint file: " + path);
  const auto version = detail::get<uint32_t>(is, path);
  if (version != detail::kCkptVersion)
    throw io_error("unsupported checkpoint version " + std::to_string(version) + " in " + path);

  Checkpoint ck;
  ck.stage = detail::get<uint8_t>(is, path) == 1 ? "selfsup" : "supervised";
  ck.step = detail::get<uint64_t>(is, path);
  ck.arch.base_channels = detail::get<int32_t>(is, path);
  ck.arch.num_classes = detail::get<int32_t>(is, path);
  ck.arch.validate();
  for (double* w : {&ck.weights.w_pho, &ck.weights.w_ssim, &ck.weights.w_sc, &ck.weights.w_sm,
                    &ck.weights.w_om, &ck.weights.w_D, &ck.weights.w_S})
    *w = detail::get<double>(is, path);

  const auto count = detail::get<uint32_t>(is, path);
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::get<uint32_t>(is, path);
    check(name_len < 4096, "implausible blob name length in " + path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto ndim = detail::get<uint32_t>(is, path);
    check(ndim >= 1 && ndim <= 4, "implausible blob rank in " + path);
    Shape shape(ndim);
    for (auto& d : shape) d = detail::get<int32_t>(is, path);
    auto t = make_tensor(shape);
    is.read(reinterpret_cast<char*>(t->data.data()),
            std::streamsize(t->data.size() * sizeof(double)));
    if (!is) throw io_error("truncated checkpoint: " + path);
    ck.blobs[name] = t;
  }
  return ck;
}

// --- network <-> checkpoint plumbing ---------------------------------------

namespace detail {

inline void pack_params(const std::map<std::string, TensorPtr>& params, const std::string& prefix,
                        Checkpoint* ck) {
  for (const auto& [name, t] : params) {
    auto copy = make_tensor(t->shape);
    copy->data = t->data;
    ck->blobs[prefix + name] = copy;
  }
}

inline void unpack_params(const Checkpoint& ck, const std::string& prefix,
                          std::map<std::string, TensorPtr>* params) {
  for (auto& [name, t] : *params) {
    auto it = ck.blobs.find(prefix + name);
    check(it != ck.blobs.end(), "checkpoint is missing parameter " + prefix + name);
    check(it->second->shape == t->shape,
          "checkpoint parameter " + prefix + name + " has mismatched shape");
    t->data = it->second->data;
  }
}

}  // namespace detail

inline Checkpoint make_checkpoint(const std::string& stage, uint64_t step, const DepthNet& depth,
                                  const SegNet& seg, const PoseNet& pose,
                                  const LossWeights& weights) {
  Checkpoint ck;
  ck.stage = stage;
  ck.step = step;
  ck.arch = depth.config();
  ck.weights = weights;
  detail::pack_params(depth.params(), "depth/", &ck);
  detail::pack_params(seg.params(), "seg/", &ck);
  detail::pack_params(pose.params(), "pose/", &ck);
  return ck;
}

inline void load_into_nets(const Checkpoint& ck, DepthNet* depth, SegNet* seg, PoseNet* pose) {
  if (depth) detail::unpack_params(ck, "depth/", &depth->params());
  if (seg) detail::unpack_params(ck, "seg/", &seg->params());
  if (pose) detail::unpack_params(ck, "pose/", &pose->params());
}

}  // namespace selfsup
