#pragma once

#include <array>
#include <cmath>

#include "selfsup/ops.hpp"

namespace selfsup {

// ---------------------------------------------------------------------------
// Pinhole intrinsics. Pixel (i, j) sits at continuous coordinate (i, j)
// exactly (no half-pixel offset); the border validity math below depends
// on this convention.
// ---------------------------------------------------------------------------
struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    check(fx > 0 && fy > 0, "intrinsics: focal lengths must be positive");
    check(cx >= 0 && cx < width && cy >= 0 && cy < height,
          "intrinsics: principal point must lie inside the image");
  }

  // Intrinsics of the next pyramid level produced by 2x2 average pooling.
  // A coarse pixel center u_c maps to fine coordinate 2*u_c + 0.5.
  Intrinsics halved() const {
    Intrinsics k = *this;
    k.fx = fx / 2;
    k.fy = fy / 2;
    k.cx = (cx - 0.5) / 2;
    k.cy = (cy - 0.5) / 2;
    k.width = width / 2;
    k.height = height / 2;
    return k;
  }

  Intrinsics at_level(int level) const {
    Intrinsics k = *this;
    for (int i = 0; i < level; ++i) k = k.halved();
    return k;
  }
};

// ---------------------------------------------------------------------------
// Rigid transform (plain, non-differentiable): x_out = R x + t
// ---------------------------------------------------------------------------
struct PoseSE3 {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3x3
  std::array<double, 3> translation{0, 0, 0};

  static PoseSE3 identity() { return {}; }

  std::array<double, 3> apply(const std::array<double, 3>& p) const {
    const auto& r = rotation;
    return {r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + translation[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + translation[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + translation[2]};
  }
};

namespace detail {

// Rodrigues rotation from an axis-angle vector, with series fallback near 0.
inline std::array<double, 9> rodrigues_matrix(const double* w) {
  const double th2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  const double th = std::sqrt(th2);
  double a, b;  // sin(th)/th, (1-cos(th))/th^2
  if (th < 1e-8) {
    a = 1.0 - th2 / 6.0;
    b = 0.5 - th2 / 24.0;
  } else {
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / th2;
  }
  const double wx = w[0], wy = w[1], wz = w[2];
  // R = I + a*[w]x + b*[w]x^2
  return {1 - b * (wy * wy + wz * wz), -a * wz + b * wx * wy,      a * wy + b * wx * wz,
          a * wz + b * wx * wy,        1 - b * (wx * wx + wz * wz), -a * wx + b * wy * wz,
          -a * wy + b * wx * wz,       a * wx + b * wy * wz,       1 - b * (wx * wx + wy * wy)};
}

}  // namespace detail

// twist = [axis-angle rotation; translation]
inline PoseSE3 se3_exp(const std::array<double, 6>& twist) {
  PoseSE3 p;
  p.rotation = detail::rodrigues_matrix(twist.data());
  p.translation = {twist[3], twist[4], twist[5]};
  return p;
}

inline PoseSE3 pose_compose(const PoseSE3& a, const PoseSE3& b) {
  PoseSE3 out;
  const auto& ra = a.rotation;
  const auto& rb = b.rotation;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += ra[i * 3 + k] * rb[k * 3 + j];
      out.rotation[i * 3 + j] = s;
    }
  const auto tb = a.apply(b.translation);
  out.translation = tb;
  return out;
}

inline PoseSE3 pose_invert(const PoseSE3& a) {
  PoseSE3 out;
  const auto& r = a.rotation;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.rotation[i * 3 + j] = r[j * 3 + i];
  for (int i = 0; i < 3; ++i)
    out.translation[i] = -(out.rotation[i * 3] * a.translation[0] +
                           out.rotation[i * 3 + 1] * a.translation[1] +
                           out.rotation[i * 3 + 2] * a.translation[2]);
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable pose: rotation [3,3] and translation [3] living on a tape
// ---------------------------------------------------------------------------
struct PoseExpr {
  TensorPtr rotation;     // [3,3]
  TensorPtr translation;  // [3]
};

inline PoseExpr pose_expr_const(const PoseSE3& p) {
  return {make_tensor({3, 3}, std::vector<double>(p.rotation.begin(), p.rotation.end())),
          make_tensor({3}, std::vector<double>(p.translation.begin(), p.translation.end()))};
}

inline PoseSE3 pose_expr_value(const PoseExpr& p) {
  PoseSE3 out;
  std::copy_n(p.rotation->data.begin(), 9, out.rotation.begin());
  std::copy_n(p.translation->data.begin(), 3, out.translation.begin());
  return out;
}

// Differentiable Rodrigues map: axis-angle [3] -> rotation matrix [3,3].
// Backward uses the closed-form derivative
//   dR/dw_i = (w_i [w]x + [w x (I - R) e_i]x) / th^2 * R,
// which degenerates to [e_i]x at th = 0.
inline TensorPtr rodrigues(Tape& tape, const TensorPtr& w) {
  check(w->numel() == 3, "rodrigues expects a 3-vector");
  auto r = detail::rodrigues_matrix(w->data.data());
  auto out = make_tensor({3, 3}, std::vector<double>(r.begin(), r.end()));
  out->requires_grad = w->requires_grad;
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([w, out] {
      w->ensure_grad();
      const double wx = w->data[0], wy = w->data[1], wz = w->data[2];
      const double th2 = wx * wx + wy * wy + wz * wz;
      const double* R = out->data.data();
      auto cross_mat = [](double a, double b, double c) {
        return std::array<double, 9>{0, -c, b, c, 0, -a, -b, a, 0};
      };
      for (int i = 0; i < 3; ++i) {
        std::array<double, 9> dR;
        if (th2 < 1e-16) {
          const double e[3] = {i == 0 ? 1.0 : 0.0, i == 1 ? 1.0 : 0.0, i == 2 ? 1.0 : 0.0};
          dR = cross_mat(e[0], e[1], e[2]);
        } else {
          // v = w x ((I - R) e_i)
          const double col[3] = {(i == 0) - R[i], (i == 1) - R[3 + i], (i == 2) - R[6 + i]};
          const double v[3] = {wy * col[2] - wz * col[1], wz * col[0] - wx * col[2],
                               wx * col[1] - wy * col[0]};
          const double wi = w->data[i];
          auto wcross = cross_mat(wx, wy, wz);
          auto vcross = cross_mat(v[0], v[1], v[2]);
          std::array<double, 9> m;
          for (int j = 0; j < 9; ++j) m[j] = (wi * wcross[j] + vcross[j]) / th2;
          for (int r0 = 0; r0 < 3; ++r0)
            for (int c0 = 0; c0 < 3; ++c0) {
              double s = 0;
              for (int k = 0; k < 3; ++k) s += m[r0 * 3 + k] * R[k * 3 + c0];
              dR[r0 * 3 + c0] = s;
            }
        }
        double g = 0;
        for (int j = 0; j < 9; ++j) g += out->grad[j] * dR[j];
        w->grad[i] += g;
      }
    });
  }
  return out;
}

inline PoseExpr pose_expr_from_twist(Tape& tape, const TensorPtr& twist) {
  check(twist->numel() == 6, "twist must be a 6-vector");
  auto wrot = slice_flat(tape, twist, 0, 3);
  auto trans = slice_flat(tape, twist, 3, 3);
  return {rodrigues(tape, wrot), trans};
}

inline PoseExpr pose_expr_compose(Tape& tape, const PoseExpr& a, const PoseExpr& b) {
  auto rot = matmul(tape, a.rotation, b.rotation);
  auto t = add(tape, linear(tape, b.translation, a.rotation, nullptr), a.translation);
  return {rot, t};
}

inline PoseExpr pose_expr_invert(Tape& tape, const PoseExpr& a) {
  auto rt = transpose2d(tape, a.rotation);
  auto t = neg(tape, linear(tape, a.translation, rt, nullptr));
  return {rt, t};
}

// ---------------------------------------------------------------------------
// Warping
// ---------------------------------------------------------------------------

// Per-pixel target coordinates of the perspective projection, plus a validity
// mask. A pixel is valid iff its projected depth is positive and the target
// coordinate lies inside [0, W-1] x [0, H-1]. The mask is a constant of the
// forward pass; coords carry gradients to depth and pose.
struct WarpField {
  TensorPtr coords;  // [2,H,W]: plane 0 = u', plane 1 = v'
  std::vector<uint8_t> valid;
  int width = 0, height = 0;

  int valid_count() const {
    int n = 0;
    for (uint8_t v : valid) n += v;
    return n;
  }
};

inline WarpField project(Tape& tape, const TensorPtr& depth, const PoseExpr& pose,
                         const Intrinsics& K) {
  check(depth->shape.size() == 2, "project expects a [H,W] depth map");
  const int h = depth->shape[0], w = depth->shape[1];
  check(h == K.height && w == K.width, "project: depth shape must match intrinsics");
  K.validate();
  const auto& R = pose.rotation->data;
  const auto& t = pose.translation->data;

  WarpField warp;
  warp.width = w;
  warp.height = h;
  warp.valid.assign(h * w, 0);
  auto coords = make_tensor({2, h, w});
  coords->requires_grad =
      depth->requires_grad || pose.rotation->requires_grad || pose.translation->requires_grad;

  constexpr double kMinZ = 1e-6;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const int i = v * w + u;
      const double d = depth->data[i];
      const double x = (u - K.cx) / K.fx, y = (v - K.cy) / K.fy;
      const double px = d * x, py = d * y, pz = d;
      const double qx = R[0] * px + R[1] * py + R[2] * pz + t[0];
      const double qy = R[3] * px + R[4] * py + R[5] * pz + t[1];
      const double qz = R[6] * px + R[7] * py + R[8] * pz + t[2];
      if (qz <= kMinZ) continue;  // behind the camera: invalid, never an error
      const double up = K.fx * qx / qz + K.cx;
      const double vp = K.fy * qy / qz + K.cy;
      coords->data[i] = up;
      coords->data[h * w + i] = vp;
      if (up >= 0 && up <= w - 1 && vp >= 0 && vp <= h - 1) warp.valid[i] = 1;
    }
  }

  if (coords->requires_grad) {
    auto valid = warp.valid;  // mask snapshot; gradients only flow through valid pixels
    tape.record([depth, pose, coords, K, valid, h, w] {
      const auto& R = pose.rotation->data;
      const auto& t = pose.translation->data;
      // downstream users may detach the coords (stop-gradient); then nothing
      // ever allocated coords->grad and this pass propagates zeros
      coords->ensure_grad();
      const bool gd = depth->requires_grad;
      const bool gr = pose.rotation->requires_grad;
      const bool gt = pose.translation->requires_grad;
      if (gd) depth->ensure_grad();
      if (gr) pose.rotation->ensure_grad();
      if (gt) pose.translation->ensure_grad();
      for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
          const int i = v * w + u;
          if (!valid[i]) continue;
          const double gu = coords->grad[i];
          const double gv = coords->grad[h * w + i];
          if (gu == 0 && gv == 0) continue;
          const double d = depth->data[i];
          const double x = (u - K.cx) / K.fx, y = (v - K.cy) / K.fy;
          const double px = d * x, py = d * y, pz = d;
          const double qx = R[0] * px + R[1] * py + R[2] * pz + t[0];
          const double qy = R[3] * px + R[4] * py + R[5] * pz + t[1];
          const double qz = R[6] * px + R[7] * py + R[8] * pz + t[2];
          const double gqx = gu * K.fx / qz;
          const double gqy = gv * K.fy / qz;
          const double gqz = -(gu * K.fx * qx + gv * K.fy * qy) / (qz * qz);
          if (gt) {
            pose.translation->grad[0] += gqx;
            pose.translation->grad[1] += gqy;
            pose.translation->grad[2] += gqz;
          }
          if (gr) {
            const double p[3] = {px, py, pz};
            const double gq[3] = {gqx, gqy, gqz};
            for (int r0 = 0; r0 < 3; ++r0)
              for (int c0 = 0; c0 < 3; ++c0) pose.rotation->grad[r0 * 3 + c0] += gq[r0] * p[c0];
          }
          if (gd) {
            // dQ/dD = R * dir
            const double rx = R[0] * x + R[1] * y + R[2];
            const double ry = R[3] * x + R[4] * y + R[5];
            const double rz = R[6] * x + R[7] * y + R[8];
            depth->grad[i] += gqx * rx + gqy * ry + gqz * rz;
          }
        }
      }
    });
  }

  warp.coords = coords;
  return warp;
}

// Differentiable bilinear sampling of source at the warp's target coordinates.
// Invalid pixels yield 0 and contribute no gradient.
inline TensorPtr bilinear_sample(Tape& tape, const TensorPtr& source, const WarpField& warp) {
  check(source->shape.size() == 3, "bilinear_sample expects [C,H,W] source");
  const int c = source->shape[0], h = source->shape[1], w = source->shape[2];
  check(h == warp.height && w == warp.width, "bilinear_sample: warp/source size mismatch");
  auto out = make_tensor({c, h, w});
  out->requires_grad = source->requires_grad || warp.coords->requires_grad;
  const int hw = h * w;
  for (int i = 0; i < hw; ++i) {
    if (!warp.valid[i]) continue;
    const double u = warp.coords->data[i];
    const double v = warp.coords->data[hw + i];
    const int x0 = std::min(int(u), w - 1), x1 = std::min(x0 + 1, w - 1);
    const int y0 = std::min(int(v), h - 1), y1 = std::min(y0 + 1, h - 1);
    const double wx = u - x0, wy = v - y0;
    for (int ci = 0; ci < c; ++ci) {
      const double* s0 = source->data.data() + ci * hw;
      out->data[ci * hw + i] = (1 - wy) * ((1 - wx) * s0[y0 * w + x0] + wx * s0[y0 * w + x1]) +
                               wy * ((1 - wx) * s0[y1 * w + x0] + wx * s0[y1 * w + x1]);
    }
  }
  if (out->requires_grad) {
    out->ensure_grad();
    auto valid = warp.valid;
    auto coords = warp.coords;
    tape.record([source, coords, out, valid, c, h, w, hw] {
      const bool gs = source->requires_grad;
      const bool gc = coords->requires_grad;
      if (gs) source->ensure_grad();
      if (gc) coords->ensure_grad();
      for (int i = 0; i < hw; ++i) {
        if (!valid[i]) continue;
        const double u = coords->data[i];
        const double v = coords->data[hw + i];
        const int x0 = std::min(int(u), w - 1), x1 = std::min(x0 + 1, w - 1);
        const int y0 = std::min(int(v), h - 1), y1 = std::min(y0 + 1, h - 1);
        const double wx = u - x0, wy = v - y0;
        for (int ci = 0; ci < c; ++ci) {
          const double g = out->grad[ci * hw + i];
          if (g == 0) continue;
          const double* s0 = source->data.data() + ci * hw;
          if (gs) {
            double* gsrc = source->grad.data() + ci * hw;
            gsrc[y0 * w + x0] += (1 - wy) * (1 - wx) * g;
            gsrc[y0 * w + x1] += (1 - wy) * wx * g;
            gsrc[y1 * w + x0] += wy * (1 - wx) * g;
            gsrc[y1 * w + x1] += wy * wx * g;
          }
          if (gc) {
            const double du = (1 - wy) * (s0[y0 * w + x1] - s0[y0 * w + x0]) +
                              wy * (s0[y1 * w + x1] - s0[y1 * w + x0]);
            const double dv = (1 - wx) * (s0[y1 * w + x0] - s0[y0 * w + x0]) +
                              wx * (s0[y1 * w + x1] - s0[y0 * w + x1]);
            coords->grad[i] += du * g;
            coords->grad[hw + i] += dv * g;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace selfsup
