#include <catch2/catch_amalgamated.hpp>

#include "selfsup/geometry.hpp"

using namespace selfsup;

namespace {

double rel_err(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
  return std::fabs(a - b) / denom;
}

Intrinsics test_intrinsics(int w = 8, int h = 8) {
  Intrinsics k;
  k.fx = k.fy = double(w);
  k.cx = (w - 1) / 2.0;
  k.cy = (h - 1) / 2.0;
  k.width = w;
  k.height = h;
  return k;
}

PoseSE3 random_pose(Rng& rng, double rot_scale = 0.3, double trans_scale = 0.5) {
  std::array<double, 6> tw;
  for (int i = 0; i < 3; ++i) tw[i] = uniform(rng, -rot_scale, rot_scale);
  for (int i = 3; i < 6; ++i) tw[i] = uniform(rng, -trans_scale, trans_scale);
  return se3_exp(tw);
}

double max_abs_diff(const PoseSE3& a, const PoseSE3& b) {
  double m = 0;
  for (int i = 0; i < 9; ++i) m = std::max(m, std::fabs(a.rotation[i] - b.rotation[i]));
  for (int i = 0; i < 3; ++i) m = std::max(m, std::fabs(a.translation[i] - b.translation[i]));
  return m;
}

}  // namespace

TEST_CASE("se3_exp of zero twist is identity") {
  auto p = se3_exp({0, 0, 0, 0, 0, 0});
  CHECK(max_abs_diff(p, PoseSE3::identity()) == 0.0);
}

TEST_CASE("se3_exp quarter turn about z maps x-axis to y-axis") {
  auto p = se3_exp({0, 0, M_PI / 2, 0, 0, 0});
  auto v = p.apply({1, 0, 0});
  CHECK(std::fabs(v[0]) < 1e-12);
  CHECK(std::fabs(v[1] - 1.0) < 1e-12);
  CHECK(std::fabs(v[2]) < 1e-12);
}

TEST_CASE("pose group axioms") {
  CHECK(max_abs_diff(pose_invert(PoseSE3::identity()), PoseSE3::identity()) == 0.0);
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    auto p = random_pose(rng);
    CHECK(max_abs_diff(pose_compose(p, pose_invert(p)), PoseSE3::identity()) < 1e-9);
    // orthonormality of the exponential
    auto rrt = pose_compose(p, pose_invert(p));
    (void)rrt;
    double det = p.rotation[0] * (p.rotation[4] * p.rotation[8] - p.rotation[5] * p.rotation[7]) -
                 p.rotation[1] * (p.rotation[3] * p.rotation[8] - p.rotation[5] * p.rotation[6]) +
                 p.rotation[2] * (p.rotation[3] * p.rotation[7] - p.rotation[4] * p.rotation[6]);
    CHECK(std::fabs(det - 1.0) < 1e-9);
  }
}

TEST_CASE("compose of pure translations adds vectors") {
  PoseSE3 a, b;
  a.translation = {0, 0, 1};
  b.translation = {0, 1, 0};
  auto c = pose_compose(a, b);
  CHECK(c.translation == std::array<double, 3>{0, 1, 1});
}

TEST_CASE("rodrigues gradient vs finite differences") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto w = make_tensor({3}, 0.0, true);
    for (auto& v : w->data) v = uniform(rng, -1.5, 1.5);
    auto weights = make_tensor({3, 3});
    for (auto& v : weights->data) v = uniform(rng, -1, 1);
    Tape tape;
    auto loss = sum(tape, mul(tape, rodrigues(tape, w), weights));
    tape.backward(loss);
    auto fd = finite_difference_grad(
        [&] {
          Tape t;
          return sum(t, mul(t, rodrigues(t, w), weights))->data[0];
        },
        w);
    for (int i = 0; i < 3; ++i) CHECK(rel_err(w->grad[i], fd[i]) < 1e-4);
  }
}

TEST_CASE("identity pose projects to the pixel grid exactly") {
  auto K = test_intrinsics();
  Tape tape;
  auto depth = make_tensor({8, 8}, 2.0);
  auto warp = project(tape, depth, pose_expr_const(PoseSE3::identity()), K);
  CHECK(warp.valid_count() == 64);
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) {
      CHECK(warp.coords->data[v * 8 + u] == Catch::Approx(u).margin(1e-12));
      CHECK(warp.coords->data[64 + v * 8 + u] == Catch::Approx(v).margin(1e-12));
    }
}

TEST_CASE("hand-computed projection with unit intrinsics") {
  Intrinsics K;
  K.fx = K.fy = 1;
  K.cx = K.cy = 0;
  K.width = K.height = 4;
  PoseSE3 p;
  p.translation = {1, 0, 0};
  Tape tape;
  auto depth = make_tensor({4, 4}, 1.0);
  auto warp = project(tape, depth, pose_expr_const(p), K);
  // pixel (0,0): P = (0,0,1), Q = (1,0,1), u' = 1, v' = 0
  CHECK(warp.coords->data[0] == Catch::Approx(1.0));
  CHECK(warp.coords->data[16] == Catch::Approx(0.0));
}

TEST_CASE("projection is homogeneous in depth and translation") {
  auto K = test_intrinsics();
  Rng rng(7);
  auto pose = random_pose(rng, 0.2, 0.3);
  auto depth = make_tensor({8, 8});
  for (auto& d : depth->data) d = uniform(rng, 2.0, 6.0);
  for (double k : {0.1, 1.0, 2.5, 100.0}) {
    Tape t1, t2;
    auto w1 = project(t1, depth, pose_expr_const(pose), K);
    auto scaled_depth = make_tensor({8, 8});
    for (int i = 0; i < 64; ++i) scaled_depth->data[i] = k * depth->data[i];
    PoseSE3 scaled_pose = pose;
    for (auto& v : scaled_pose.translation) v *= k;
    auto w2 = project(t2, scaled_depth, pose_expr_const(scaled_pose), K);
    REQUIRE(w1.valid == w2.valid);
    for (int i = 0; i < 128; ++i)
      CHECK(std::fabs(w1.coords->data[i] - w2.coords->data[i]) < 1e-10);
  }
}

TEST_CASE("negative projected depth marks pixels invalid without throwing") {
  auto K = test_intrinsics();
  PoseSE3 p;
  p.translation = {0, 0, -10};  // everything lands behind the camera
  Tape tape;
  auto depth = make_tensor({8, 8}, 2.0);
  WarpField warp;
  REQUIRE_NOTHROW(warp = project(tape, depth, pose_expr_const(p), K));
  CHECK(warp.valid_count() == 0);
}

TEST_CASE("warp coordinate gradient wrt twist and depth vs finite differences") {
  auto K = test_intrinsics();
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    auto twist = make_tensor({6}, 0.0, true);
    for (int i = 0; i < 3; ++i) twist->data[i] = uniform(rng, -0.2, 0.2);
    for (int i = 3; i < 6; ++i) twist->data[i] = uniform(rng, -0.3, 0.3);
    auto depth = make_tensor({8, 8}, 0.0, true);
    for (auto& d : depth->data) d = uniform(rng, 2.0, 6.0);
    // Gradients flow only through valid pixels, and border validity can flip
    // under perturbation, so weight only interior valid pixels.
    auto weights = make_tensor({2, 8, 8});
    {
      Tape t0;
      auto warp0 = project(t0, detach(depth), pose_expr_const(se3_exp({twist->data[0],
                           twist->data[1], twist->data[2], twist->data[3], twist->data[4],
                           twist->data[5]})), K);
      for (int i = 0; i < 64; ++i) {
        const double u = warp0.coords->data[i], v = warp0.coords->data[64 + i];
        if (warp0.valid[i] && u > 0.5 && u < 6.5 && v > 0.5 && v < 6.5) {
          weights->data[i] = uniform(rng, 0.1, 1.0);
          weights->data[64 + i] = uniform(rng, 0.1, 1.0);
        }
      }
    }

    auto build = [&](Tape& t) {
      auto pose = pose_expr_from_twist(t, twist);
      auto warp = project(t, depth, pose, K);
      return sum(t, mul(t, warp.coords, weights));
    };
    Tape tape;
    auto loss = build(tape);
    tape.backward(loss);
    auto f = [&] {
      Tape t;
      return build(t)->data[0];
    };
    auto fd_twist = finite_difference_grad(f, twist);
    for (int i = 0; i < 6; ++i) CHECK(rel_err(twist->grad[i], fd_twist[i]) < 1e-4);
    auto fd_depth = finite_difference_grad(f, depth);
    depth->ensure_grad();
    for (int i = 0; i < 64; ++i) CHECK(rel_err(depth->grad[i], fd_depth[i]) < 1e-4);
  }
}

TEST_CASE("bilinear sampling at lattice and midpoints") {
  auto K = test_intrinsics(4, 4);
  Tape tape;
  auto src = make_tensor({1, 4, 4});
  for (int i = 0; i < 16; ++i) src->data[i] = i;
  // identity warp: exact source values
  auto depth = make_tensor({4, 4}, 2.0);
  Intrinsics k4 = K;
  auto warp = project(tape, depth, pose_expr_const(PoseSE3::identity()), k4);
  auto out = bilinear_sample(tape, src, warp);
  for (int i = 0; i < 16; ++i) CHECK(out->data[i] == Catch::Approx(src->data[i]));

  // midpoint between values 2 and 4 -> 3
  WarpField mid;
  mid.width = mid.height = 4;
  mid.valid.assign(16, 0);
  mid.valid[0] = 1;
  mid.coords = make_tensor({2, 4, 4});
  auto src2 = make_tensor({1, 4, 4});
  src2->data[0] = 2.0;
  src2->data[1] = 4.0;
  mid.coords->data[0] = 0.5;  // u
  mid.coords->data[16] = 0.0; // v
  auto out2 = bilinear_sample(tape, src2, mid);
  CHECK(out2->data[0] == Catch::Approx(3.0));
}

TEST_CASE("bilinear sampling is linear in coords between lattice points") {
  Rng rng(13);
  auto src = make_tensor({1, 3, 3});
  for (auto& v : src->data) v = uniform(rng, 0, 1);
  auto sample_at = [&](double u, double v) {
    WarpField w;
    w.width = w.height = 3;
    w.valid.assign(9, 0);
    w.valid[0] = 1;
    w.coords = make_tensor({2, 3, 3});
    w.coords->data[0] = u;
    w.coords->data[9] = v;
    Tape t;
    return bilinear_sample(t, src, w)->data[0];
  };
  // convex combination along u within one cell, v fixed on the lattice
  for (double a : {0.25, 0.5, 0.75}) {
    double lhs = sample_at(a, 1.0);
    double rhs = (1 - a) * sample_at(0.0, 1.0) + a * sample_at(1.0, 1.0);
    CHECK(std::fabs(lhs - rhs) < 1e-12);
  }
}

TEST_CASE("bilinear sample gradient wrt coords vs finite differences") {
  Rng rng(17);
  auto src = make_tensor({1, 3, 3});
  for (auto& v : src->data) v = uniform(rng, 0, 1);
  auto coords = make_tensor({2, 3, 3}, 0.0, true);
  for (int i = 0; i < 9; ++i) {
    coords->data[i] = uniform(rng, 0.1, 1.8);
    coords->data[9 + i] = uniform(rng, 0.1, 1.8);
  }
  WarpField w;
  w.width = w.height = 3;
  w.valid.assign(9, 1);
  w.coords = coords;
  Tape tape;
  auto loss = sum(tape, bilinear_sample(tape, src, w));
  tape.backward(loss);
  auto fd = finite_difference_grad(
      [&] {
        Tape t;
        return sum(t, bilinear_sample(t, src, w))->data[0];
      },
      coords);
  for (int i = 0; i < 18; ++i) CHECK(rel_err(coords->grad[i], fd[i]) < 1e-4);
}

TEST_CASE("round trip warp on a fronto-parallel plane") {
  // Frames A and B both observe the plane z = 4 (in their own frames the
  // plane stays fronto-parallel under pure translation).
  auto K = test_intrinsics(16, 16);
  PoseSE3 a_to_b;
  a_to_b.translation = {0.4, 0.2, 0.0};
  const double plane_z = 4.0;
  Tape tape;
  auto depth_a = make_tensor({16, 16}, plane_z);
  auto depth_b = make_tensor({16, 16}, plane_z);
  auto warp_ab = project(tape, depth_a, pose_expr_const(a_to_b), K);
  auto warp_ba = project(tape, depth_b, pose_expr_const(pose_invert(a_to_b)), K);
  // follow p -> p' -> p'' and compare to p
  int checked = 0;
  for (int v = 2; v < 14; ++v)
    for (int u = 2; u < 14; ++u) {
      const int i = v * 16 + u;
      if (!warp_ab.valid[i]) continue;
      const double up = warp_ab.coords->data[i];
      const double vp = warp_ab.coords->data[256 + i];
      // sample the reverse warp field bilinearly at (up, vp)
      const int x0 = int(up), y0 = int(vp);
      const double wx = up - x0, wy = vp - y0;
      auto rw = [&](int plane, int y, int x) { return warp_ba.coords->data[plane * 256 + y * 16 + x]; };
      const double u2 = (1 - wy) * ((1 - wx) * rw(0, y0, x0) + wx * rw(0, y0, x0 + 1)) +
                        wy * ((1 - wx) * rw(0, y0 + 1, x0) + wx * rw(0, y0 + 1, x0 + 1));
      const double v2 = (1 - wy) * ((1 - wx) * rw(1, y0, x0) + wx * rw(1, y0, x0 + 1)) +
                        wy * ((1 - wx) * rw(1, y0 + 1, x0) + wx * rw(1, y0 + 1, x0 + 1));
      CHECK(std::fabs(u2 - u) < 0.51);
      CHECK(std::fabs(v2 - v) < 0.51);
      ++checked;
    }
  CHECK(checked > 50);
}

TEST_CASE("differentiable pose compose and invert agree with plain versions") {
  Rng rng(19);
  auto a = random_pose(rng);
  auto b = random_pose(rng);
  Tape tape;
  auto composed = pose_expr_compose(tape, pose_expr_const(a), pose_expr_const(b));
  CHECK(max_abs_diff(pose_expr_value(composed), pose_compose(a, b)) < 1e-12);
  auto inverted = pose_expr_invert(tape, pose_expr_const(a));
  CHECK(max_abs_diff(pose_expr_value(inverted), pose_invert(a)) < 1e-12);
}
