#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "selfsup/synthdata.hpp"

using namespace selfsup;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("selfsup_test_" + tag);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("sequence generation is deterministic per seed") {
  auto a = generate_sequence(1, 5);
  auto b = generate_sequence(1, 5);
  REQUIRE(a.frames.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(a.frames[i].image->data == b.frames[i].image->data);
    CHECK(a.frames[i].depth == b.frames[i].depth);
    CHECK(a.frames[i].labels == b.frames[i].labels);
    CHECK(a.frames[i].pose.rotation == b.frames[i].pose.rotation);
    CHECK(a.frames[i].pose.translation == b.frames[i].pose.translation);
  }
  auto c = generate_sequence(2, 5);
  CHECK(a.frames[0].image->data != c.frames[0].image->data);
}

TEST_CASE("rendered depth stays inside the scene bounds") {
  for (uint64_t seed : {1, 7, 23}) {
    auto seq = generate_sequence(seed, 4);
    for (const auto& fr : seq.frames)
      for (float d : fr.depth) {
        CHECK(d >= 1.0f);
        CHECK(d <= 20.0f);
      }
  }
}

TEST_CASE("every sequence shows at least 3 classes, all below the class count") {
  for (uint64_t seed : {3, 11, 42}) {
    auto seq = generate_sequence(seed, 6);
    std::set<int> seen;
    for (const auto& fr : seq.frames)
      for (uint8_t c : fr.labels) {
        CHECK(int(c) < seq.num_classes);
        seen.insert(c);
      }
    CHECK(seen.size() >= 3);
  }
}

TEST_CASE("consecutive poses move like video") {
  auto seq = generate_sequence(5, 30);
  double depth_sum = 0;
  size_t depth_n = 0;
  for (const auto& fr : seq.frames) {
    for (float d : fr.depth) depth_sum += d;
    depth_n += fr.depth.size();
  }
  const double mean_depth = depth_sum / depth_n;
  for (size_t i = 1; i < seq.frames.size(); ++i) {
    const auto rel = pose_compose(seq.frames[i].pose, pose_invert(seq.frames[i - 1].pose));
    const double trace = rel.rotation[0] + rel.rotation[4] + rel.rotation[8];
    const double angle = std::acos(std::clamp((trace - 1) / 2, -1.0, 1.0));
    CHECK(angle < 10.0 * M_PI / 180.0);
    const double t_norm = std::hypot(rel.translation[0], rel.translation[1], rel.translation[2]);
    CHECK(t_norm < 0.05 * mean_depth);
  }
}

TEST_CASE("warping with gt depth and pose reproduces the independent render") {
  for (uint64_t seed : {1, 9}) {
    auto seq = generate_sequence(seed, 11);
    for (auto [dst, src] : {std::pair{0, 5}, std::pair{5, 0}, std::pair{5, 10}}) {
      auto res = test::render_warp_error(seq, dst, src);
      INFO("seed " << seed << " pair " << dst << "->" << src << " over " << res.pixels
                   << " pixels");
      REQUIRE(res.pixels > 1000);
      CHECK(res.mean_abs_error < 0.02);
    }
  }
}

TEST_CASE("snippet assembly index arithmetic") {
  GenOptions tiny;
  tiny.width = tiny.height = 16;
  auto seq21 = generate_sequence(1, 21, tiny);
  auto s1 = make_snippets(seq21, 100, 10);
  REQUIRE(s1.size() == 1);
  CHECK(s1[0].idx == std::array<int, 3>{0, 10, 20});

  auto seq9 = generate_sequence(1, 9, tiny);
  CHECK(make_snippets(seq9, 100, 10).empty());

  auto seq250 = generate_sequence(1, 250, tiny);
  auto s3 = make_snippets(seq250, 100, 10);
  REQUIRE(s3.size() == 3);
  CHECK(s3[0].idx == std::array<int, 3>{0, 10, 20});
  CHECK(s3[1].idx == std::array<int, 3>{100, 110, 120});
  CHECK(s3[2].idx == std::array<int, 3>{200, 210, 220});
}

TEST_CASE("sparse label views") {
  GenOptions tiny;
  tiny.width = tiny.height = 16;
  auto seq = generate_sequence(4, 250, tiny);
  CHECK(sparse_label_view(seq, 1).size() == 250);
  auto sparse = sparse_label_view(seq, 100);
  CHECK(sparse == std::vector<int>{0, 100, 200});
}

TEST_CASE("dataset round trip is lossless") {
  auto dir = temp_dir("roundtrip");
  auto seq = generate_sequence(6, 5);
  write_dataset(dir.string(), seq);
  auto back = read_dataset(dir.string());
  REQUIRE(back.frames.size() == seq.frames.size());
  CHECK(back.intrinsics.fx == seq.intrinsics.fx);
  CHECK(back.num_classes == seq.num_classes);
  for (size_t i = 0; i < seq.frames.size(); ++i) {
    CHECK(back.frames[i].image->data == seq.frames[i].image->data);
    CHECK(back.frames[i].depth == seq.frames[i].depth);
    CHECK(back.frames[i].labels == seq.frames[i].labels);
    CHECK(back.frames[i].pose.rotation == seq.frames[i].pose.rotation);
    CHECK(back.frames[i].pose.translation == seq.frames[i].pose.translation);
  }
  fs::remove_all(dir);
}

TEST_CASE("sparse datasets store ground truth only for labeled frames") {
  auto dir = temp_dir("sparse");
  GenOptions tiny;
  tiny.width = tiny.height = 16;
  auto seq = generate_sequence(7, 10, tiny);
  write_dataset(dir.string(), seq, 4);

  size_t frame_files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir / "frames")) ++frame_files;
  CHECK(frame_files == 10);
  for (int i = 0; i < 10; ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "%06d", i);
    const bool labeled = i % 4 == 0;
    CHECK(fs::exists(dir / "depth" / (std::string(name) + ".pfm")) == labeled);
    CHECK(fs::exists(dir / "labels" / (std::string(name) + ".png")) == labeled);
  }

  auto back = read_dataset(dir.string());
  CHECK(back.frames[0].has_depth);
  CHECK_FALSE(back.frames[1].has_depth);
  CHECK_FALSE(back.frames[1].has_labels);
  fs::remove_all(dir);
}

TEST_CASE("truncated depth file raises a parse error, not a crash") {
  auto dir = temp_dir("truncated");
  GenOptions tiny;
  tiny.width = tiny.height = 16;
  auto seq = generate_sequence(8, 3, tiny);
  write_dataset(dir.string(), seq);
  fs::resize_file(dir / "depth" / "000001.pfm", 40);
  CHECK_THROWS_AS(read_dataset(dir.string()), io_error);
  fs::remove_all(dir);
}

TEST_CASE("images-only read path never opens ground-truth files") {
  auto dir = temp_dir("imagesonly");
  GenOptions tiny;
  tiny.width = tiny.height = 16;
  auto seq = generate_sequence(9, 4, tiny);
  write_dataset(dir.string(), seq);
  fs::remove_all(dir / "depth");
  fs::remove_all(dir / "labels");
  auto back = read_dataset(dir.string(), true);
  CHECK(back.frames.size() == 4);
  for (const auto& fr : back.frames) {
    CHECK_FALSE(fr.has_depth);
    CHECK_FALSE(fr.has_labels);
    CHECK(fr.image->numel() == 3 * 16 * 16);
  }
  fs::remove_all(dir);
}

TEST_CASE("dynamic mode moves exactly one class between frames") {
  auto seq = generate_sequence(10, 40, {64, 64, 6, true});
  const int dyn = seq.num_classes - 1;
  size_t dyn_pixels = 0;
  for (const auto& fr : seq.frames)
    for (uint8_t c : fr.labels) dyn_pixels += c == dyn;
  CHECK(dyn_pixels > 500);

  // the moving box occupies different pixels in far-apart frames
  size_t moved = 0;
  const auto& a = seq.frames[0].labels;
  const auto& b = seq.frames.back().labels;
  for (size_t i = 0; i < a.size(); ++i)
    if ((a[i] == dyn) != (b[i] == dyn)) ++moved;
  CHECK(moved > 50);
}
