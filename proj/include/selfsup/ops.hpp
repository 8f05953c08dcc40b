#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "selfsup/tensor.hpp"

namespace selfsup {

// ---------------------------------------------------------------------------
// Elementwise operations. Broadcasting is limited to scalar-vs-tensor.
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul, Div };

inline void check_broadcast(const Tensor& a, const Tensor& b) {
  check(same_shape(a, b) || a.is_scalar() || b.is_scalar(),
        "elementwise op: shapes must match or one operand must be scalar");
}

}  // namespace detail

inline TensorPtr binary_op(Tape& tape, detail::BinKind kind, const TensorPtr& a,
                           const TensorPtr& b) {
  detail::check_broadcast(*a, *b);
  const Shape& out_shape = a->is_scalar() ? b->shape : a->shape;
  auto out = make_tensor(out_shape);
  out->requires_grad = a->requires_grad || b->requires_grad;
  const int n = out->numel();
  const bool sa = a->is_scalar() && n > 1;
  const bool sb = b->is_scalar() && n > 1;
  for (int i = 0; i < n; ++i) {
    double av = a->data[sa ? 0 : i];
    double bv = b->data[sb ? 0 : i];
    switch (kind) {
      case detail::BinKind::Add: out->data[i] = av + bv; break;
      case detail::BinKind::Sub: out->data[i] = av - bv; break;
      case detail::BinKind::Mul: out->data[i] = av * bv; break;
      case detail::BinKind::Div:
        if (bv == 0.0) throw domain_error("division by zero");
        out->data[i] = av / bv;
        break;
    }
  }
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([kind, a, b, out, n, sa, sb] {
      for (int i = 0; i < n; ++i) {
        double g = out->grad[i];
        double av = a->data[sa ? 0 : i];
        double bv = b->data[sb ? 0 : i];
        double ga = 0, gb = 0;
        switch (kind) {
          case detail::BinKind::Add: ga = g; gb = g; break;
          case detail::BinKind::Sub: ga = g; gb = -g; break;
          case detail::BinKind::Mul: ga = g * bv; gb = g * av; break;
          case detail::BinKind::Div: ga = g / bv; gb = -g * av / (bv * bv); break;
        }
        if (a->requires_grad) {
          a->ensure_grad();
          a->grad[sa ? 0 : i] += ga;
        }
        if (b->requires_grad) {
          b->ensure_grad();
          b->grad[sb ? 0 : i] += gb;
        }
      }
    });
  }
  return out;
}

inline TensorPtr add(Tape& t, const TensorPtr& a, const TensorPtr& b) {
  return binary_op(t, detail::BinKind::Add, a, b);
}
inline TensorPtr sub(Tape& t, const TensorPtr& a, const TensorPtr& b) {
  return binary_op(t, detail::BinKind::Sub, a, b);
}
inline TensorPtr mul(Tape& t, const TensorPtr& a, const TensorPtr& b) {
  return binary_op(t, detail::BinKind::Mul, a, b);
}
inline TensorPtr div(Tape& t, const TensorPtr& a, const TensorPtr& b) {
  return binary_op(t, detail::BinKind::Div, a, b);
}

// out = scale * x + shift with constant coefficients.
inline TensorPtr affine(Tape& tape, const TensorPtr& x, double scale, double shift = 0.0) {
  auto out = make_tensor(x->shape);
  out->requires_grad = x->requires_grad;
  const int n = x->numel();
  for (int i = 0; i < n; ++i) out->data[i] = scale * x->data[i] + shift;
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([x, out, scale, n] {
      x->ensure_grad();
      for (int i = 0; i < n; ++i) x->grad[i] += scale * out->grad[i];
    });
  }
  return out;
}

inline TensorPtr scale(Tape& t, const TensorPtr& x, double c) { return affine(t, x, c); }
inline TensorPtr neg(Tape& t, const TensorPtr& x) { return affine(t, x, -1.0); }

namespace detail {

template <typename Fwd, typename Bwd>
TensorPtr unary_op(Tape& tape, const TensorPtr& x, Fwd fwd, Bwd dfd) {
  auto out = make_tensor(x->shape);
  out->requires_grad = x->requires_grad;
  const int n = x->numel();
  for (int i = 0; i < n; ++i) out->data[i] = fwd(x->data[i]);
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([x, out, dfd, n] {
      x->ensure_grad();
      for (int i = 0; i < n; ++i) x->grad[i] += out->grad[i] * dfd(x->data[i], out->data[i]);
    });
  }
  return out;
}

}  // namespace detail

inline TensorPtr abs(Tape& t, const TensorPtr& x) {
  // subgradient at 0 is 0
  return detail::unary_op(
      t, x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

inline TensorPtr exp(Tape& t, const TensorPtr& x) {
  return detail::unary_op(
      t, x, [](double v) { return std::exp(v); }, [](double, double o) { return o; });
}

inline TensorPtr log(Tape& t, const TensorPtr& x) {
  for (double v : x->data)
    if (v <= 0.0) throw domain_error("log of non-positive value");
  return detail::unary_op(
      t, x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline TensorPtr sigmoid(Tape& t, const TensorPtr& x) {
  return detail::unary_op(
      t, x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double o) { return o * (1.0 - o); });
}

inline TensorPtr relu(Tape& t, const TensorPtr& x) {
  return detail::unary_op(
      t, x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline TensorPtr reciprocal(Tape& t, const TensorPtr& x) {
  for (double v : x->data)
    if (v == 0.0) throw domain_error("reciprocal of zero");
  return detail::unary_op(
      t, x, [](double v) { return 1.0 / v; }, [](double v, double) { return -1.0 / (v * v); });
}

// max(x, floor); gradient passes only where x > floor
inline TensorPtr clamp_min(Tape& t, const TensorPtr& x, double floor) {
  return detail::unary_op(
      t, x, [floor](double v) { return v > floor ? v : floor; },
      [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline TensorPtr sum(Tape& tape, const TensorPtr& x) {
  double s = 0;
  for (double v : x->data) s += v;
  auto out = make_scalar(s);
  out->requires_grad = x->requires_grad;
  if (out->requires_grad) {
    const int n = x->numel();
    out->ensure_grad();
    tape.record([x, out, n] {
      x->ensure_grad();
      double g = out->grad[0];
      for (int i = 0; i < n; ++i) x->grad[i] += g;
    });
  }
  return out;
}

inline TensorPtr mean(Tape& tape, const TensorPtr& x) {
  return scale(tape, sum(tape, x), 1.0 / x->numel());
}

// [C,H,W] -> [H,W], summing over the channel axis
inline TensorPtr sum_channels(Tape& tape, const TensorPtr& x) {
  check(x->shape.size() == 3, "sum_channels expects [C,H,W]");
  const int c = x->shape[0], h = x->shape[1], w = x->shape[2];
  auto out = make_tensor({h, w});
  out->requires_grad = x->requires_grad;
  const int hw = h * w;
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < hw; ++i) out->data[i] += x->data[ci * hw + i];
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([x, out, c, hw] {
      x->ensure_grad();
      for (int ci = 0; ci < c; ++ci)
        for (int i = 0; i < hw; ++i) x->grad[ci * hw + i] += out->grad[i];
    });
  }
  return out;
}

inline TensorPtr mean_channels(Tape& tape, const TensorPtr& x) {
  return scale(tape, sum_channels(tape, x), 1.0 / x->shape[0]);
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline TensorPtr slice_flat(Tape& tape, const TensorPtr& x, int offset, int len) {
  check(offset >= 0 && len > 0 && offset + len <= x->numel(), "slice out of range");
  auto out = make_tensor({len});
  out->requires_grad = x->requires_grad;
  std::copy_n(x->data.begin() + offset, len, out->data.begin());
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([x, out, offset, len] {
      x->ensure_grad();
      for (int i = 0; i < len; ++i) x->grad[offset + i] += out->grad[i];
    });
  }
  return out;
}

// Same values under a new shape; backward is a pass-through.
inline TensorPtr reshape(Tape& tape, const TensorPtr& x, Shape shape) {
  check(shape_numel(shape) == x->numel(), "reshape must preserve element count");
  auto out = make_tensor(std::move(shape));
  out->requires_grad = x->requires_grad;
  out->data = x->data;
  if (out->requires_grad) {
    out->ensure_grad();
    const int n = x->numel();
    tape.record([x, out, n] {
      x->ensure_grad();
      for (int i = 0; i < n; ++i) x->grad[i] += out->grad[i];
    });
  }
  return out;
}

inline TensorPtr concat_flat(Tape& tape, const std::vector<TensorPtr>& parts) {
  check(!parts.empty(), "concat of nothing");
  int n = 0;
  bool rg = false;
  for (const auto& p : parts) {
    n += p->numel();
    rg = rg || p->requires_grad;
  }
  auto out = make_tensor({n});
  out->requires_grad = rg;
  int off = 0;
  for (const auto& p : parts) {
    std::copy(p->data.begin(), p->data.end(), out->data.begin() + off);
    off += p->numel();
  }
  if (rg) {
    out->ensure_grad();
    tape.record([parts, out] {
      int off = 0;
      for (const auto& p : parts) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (int i = 0; i < p->numel(); ++i) p->grad[i] += out->grad[off + i];
        }
        off += p->numel();
      }
    });
  }
  return out;
}

// stack [Ci,H,W] maps along the channel axis
inline TensorPtr concat_channels(Tape& tape, const std::vector<TensorPtr>& parts) {
  check(!parts.empty(), "concat of nothing");
  const int h = parts[0]->shape[1], w = parts[0]->shape[2];
  int c = 0;
  for (const auto& p : parts) {
    check(p->shape.size() == 3 && p->shape[1] == h && p->shape[2] == w,
          "concat_channels: spatial shapes must match");
    c += p->shape[0];
  }
  auto out = concat_flat(tape, parts);
  out->shape = {c, h, w};
  return out;
}

// [C,H,W] -> [C], averaging over the spatial extent
inline TensorPtr global_mean_pool(Tape& tape, const TensorPtr& x) {
  check(x->shape.size() == 3, "global_mean_pool expects [C,H,W]");
  const int c = x->shape[0], hw = x->shape[1] * x->shape[2];
  auto out = make_tensor({c});
  out->requires_grad = x->requires_grad;
  for (int ci = 0; ci < c; ++ci) {
    double s = 0;
    for (int i = 0; i < hw; ++i) s += x->data[ci * hw + i];
    out->data[ci] = s / hw;
  }
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([x, out, c, hw] {
      x->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        const double g = out->grad[ci] / hw;
        for (int i = 0; i < hw; ++i) x->grad[ci * hw + i] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and resampling
// ---------------------------------------------------------------------------

// input [C,H,W], kernel [Co,C,k,k], optional bias [Co]
inline TensorPtr conv2d(Tape& tape, const TensorPtr& input, const TensorPtr& kernel,
                        const TensorPtr& bias, int stride, int padding) {
  check(input->shape.size() == 3, "conv2d input must be [C,H,W]");
  check(kernel->shape.size() == 4, "conv2d kernel must be [Co,C,k,k]");
  const int c = input->shape[0], h = input->shape[1], w = input->shape[2];
  const int co = kernel->shape[0], k = kernel->shape[2];
  check(kernel->shape[1] == c, "conv2d: channel mismatch");
  check(kernel->shape[2] == kernel->shape[3], "conv2d: kernel must be square");
  check(k % 2 == 1, "conv2d: kernel size must be odd");
  check(stride >= 1, "conv2d: stride must be >= 1");
  check(h + 2 * padding >= k && w + 2 * padding >= k, "conv2d: padded input smaller than kernel");
  check((h + 2 * padding - k) % stride == 0 && (w + 2 * padding - k) % stride == 0,
        "conv2d: output size is not integral for this stride/padding");
  const int oh = (h + 2 * padding - k) / stride + 1;
  const int ow = (w + 2 * padding - k) / stride + 1;
  if (bias) check(bias->shape == Shape{co}, "conv2d: bias must be [Co]");

  auto out = make_tensor({co, oh, ow});
  out->requires_grad =
      input->requires_grad || kernel->requires_grad || (bias && bias->requires_grad);

  for (int o = 0; o < co; ++o) {
    double* orow0 = out->data.data() + o * oh * ow;
    if (bias) std::fill_n(orow0, oh * ow, bias->data[o]);
    for (int ci = 0; ci < c; ++ci) {
      const double* in0 = input->data.data() + ci * h * w;
      const double* kk = kernel->data.data() + ((o * c + ci) * k) * k;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double wv = kk[ky * k + kx];
          if (wv == 0.0) continue;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride + ky - padding;
            if (iy < 0 || iy >= h) continue;
            const double* irow = in0 + iy * w;
            double* orow = orow0 + oy * ow;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride + kx - padding;
              if (ix < 0 || ix >= w) continue;
              orow[ox] += wv * irow[ix];
            }
          }
        }
      }
    }
  }

  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([input, kernel, bias, out, c, h, w, co, k, oh, ow, stride, padding] {
      const bool gi = input->requires_grad, gk = kernel->requires_grad;
      if (gi) input->ensure_grad();
      if (gk) kernel->ensure_grad();
      if (bias && bias->requires_grad) {
        bias->ensure_grad();
        for (int o = 0; o < co; ++o) {
          double s = 0;
          const double* grow = out->grad.data() + o * oh * ow;
          for (int i = 0; i < oh * ow; ++i) s += grow[i];
          bias->grad[o] += s;
        }
      }
      if (!gi && !gk) return;
      for (int o = 0; o < co; ++o) {
        const double* gout0 = out->grad.data() + o * oh * ow;
        for (int ci = 0; ci < c; ++ci) {
          const double* in0 = input->data.data() + ci * h * w;
          double* gin0 = gi ? input->grad.data() + ci * h * w : nullptr;
          const double* kk = kernel->data.data() + ((o * c + ci) * k) * k;
          double* gkk = gk ? kernel->grad.data() + ((o * c + ci) * k) * k : nullptr;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const double wv = kk[ky * k + kx];
              double wgrad = 0;
              for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy * stride + ky - padding;
                if (iy < 0 || iy >= h) continue;
                const double* grow = gout0 + oy * ow;
                const double* irow = in0 + iy * w;
                double* girow = gi ? gin0 + iy * w : nullptr;
                for (int ox = 0; ox < ow; ++ox) {
                  const int ix = ox * stride + kx - padding;
                  if (ix < 0 || ix >= w) continue;
                  const double g = grow[ox];
                  if (gk) wgrad += g * irow[ix];
                  if (gi) girow[ix] += g * wv;
                }
              }
              if (gk) gkk[ky * k + kx] += wgrad;
            }
          }
        }
      }
    });
  }
  return out;
}

// Bilinear 2x upsampling, endpoints aligned: in(x) sampled at x_out*(n_in-1)/(n_out-1).
inline TensorPtr upsample_bilinear_x2(Tape& tape, const TensorPtr& input) {
  check(input->shape.size() == 3, "upsample expects [C,H,W]");
  const int c = input->shape[0], h = input->shape[1], w = input->shape[2];
  const int oh = 2 * h, ow = 2 * w;
  auto out = make_tensor({c, oh, ow});
  out->requires_grad = input->requires_grad;
  const double sy = h > 1 ? double(h - 1) / (oh - 1) : 0.0;
  const double sx = w > 1 ? double(w - 1) / (ow - 1) : 0.0;
  for (int ci = 0; ci < c; ++ci) {
    const double* in0 = input->data.data() + ci * h * w;
    double* out0 = out->data.data() + ci * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const double fy = oy * sy;
      const int y0 = std::min(int(fy), h - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const double wy = fy - y0;
      for (int ox = 0; ox < ow; ++ox) {
        const double fx = ox * sx;
        const int x0 = std::min(int(fx), w - 1);
        const int x1 = std::min(x0 + 1, w - 1);
        const double wx = fx - x0;
        out0[oy * ow + ox] = (1 - wy) * ((1 - wx) * in0[y0 * w + x0] + wx * in0[y0 * w + x1]) +
                             wy * ((1 - wx) * in0[y1 * w + x0] + wx * in0[y1 * w + x1]);
      }
    }
  }
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([input, out, c, h, w, oh, ow, sy, sx] {
      input->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        double* gin0 = input->grad.data() + ci * h * w;
        const double* gout0 = out->grad.data() + ci * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const double fy = oy * sy;
          const int y0 = std::min(int(fy), h - 1);
          const int y1 = std::min(y0 + 1, h - 1);
          const double wy = fy - y0;
          for (int ox = 0; ox < ow; ++ox) {
            const double fx = ox * sx;
            const int x0 = std::min(int(fx), w - 1);
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            const double g = gout0[oy * ow + ox];
            gin0[y0 * w + x0] += (1 - wy) * (1 - wx) * g;
            gin0[y0 * w + x1] += (1 - wy) * wx * g;
            gin0[y1 * w + x0] += wy * (1 - wx) * g;
            gin0[y1 * w + x1] += wy * wx * g;
          }
        }
      }
    });
  }
  return out;
}

// 2x2 average pooling, stride 2 (trailing odd row/column dropped)
inline TensorPtr avg_pool2(Tape& tape, const TensorPtr& input) {
  check(input->shape.size() == 3, "avg_pool2 expects [C,H,W]");
  const int c = input->shape[0], h = input->shape[1], w = input->shape[2];
  const int oh = h / 2, ow = w / 2;
  check(oh >= 1 && ow >= 1, "avg_pool2: input too small");
  auto out = make_tensor({c, oh, ow});
  out->requires_grad = input->requires_grad;
  for (int ci = 0; ci < c; ++ci) {
    const double* in0 = input->data.data() + ci * h * w;
    double* out0 = out->data.data() + ci * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        out0[oy * ow + ox] = 0.25 * (in0[2 * oy * w + 2 * ox] + in0[2 * oy * w + 2 * ox + 1] +
                                     in0[(2 * oy + 1) * w + 2 * ox] +
                                     in0[(2 * oy + 1) * w + 2 * ox + 1]);
  }
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([input, out, c, h, w, oh, ow] {
      input->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        double* gin0 = input->grad.data() + ci * h * w;
        const double* gout0 = out->grad.data() + ci * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const double g = 0.25 * gout0[oy * ow + ox];
            gin0[2 * oy * w + 2 * ox] += g;
            gin0[2 * oy * w + 2 * ox + 1] += g;
            gin0[(2 * oy + 1) * w + 2 * ox] += g;
            gin0[(2 * oy + 1) * w + 2 * ox + 1] += g;
          }
      }
    });
  }
  return out;
}

// 3x3 uniform local mean, valid padding: [C,H,W] -> [C,H-2,W-2]
inline TensorPtr box3(Tape& tape, const TensorPtr& input) {
  check(input->shape.size() == 3, "box3 expects [C,H,W]");
  const int c = input->shape[0], h = input->shape[1], w = input->shape[2];
  check(h >= 3 && w >= 3, "box3: input smaller than 3x3");
  const int oh = h - 2, ow = w - 2;
  auto out = make_tensor({c, oh, ow});
  out->requires_grad = input->requires_grad;
  constexpr double kInv9 = 1.0 / 9.0;
  for (int ci = 0; ci < c; ++ci) {
    const double* in0 = input->data.data() + ci * h * w;
    double* out0 = out->data.data() + ci * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double s = 0;
        for (int dy = 0; dy < 3; ++dy)
          for (int dx = 0; dx < 3; ++dx) s += in0[(oy + dy) * w + ox + dx];
        out0[oy * ow + ox] = s * kInv9;
      }
  }
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([input, out, c, h, w, oh, ow] {
      input->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        double* gin0 = input->grad.data() + ci * h * w;
        const double* gout0 = out->grad.data() + ci * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const double g = gout0[oy * ow + ox] * kInv9;
            for (int dy = 0; dy < 3; ++dy)
              for (int dx = 0; dx < 3; ++dx) gin0[(oy + dy) * w + ox + dx] += g;
          }
      }
    });
  }
  return out;
}

// Per-pixel softmax across channels, overflow-safe via max subtraction.
inline TensorPtr softmax_channels(Tape& tape, const TensorPtr& input) {
  check(input->shape.size() == 3, "softmax_channels expects [C,H,W]");
  const int c = input->shape[0], h = input->shape[1], w = input->shape[2];
  check(c >= 2, "softmax_channels requires at least 2 channels");
  auto out = make_tensor(input->shape);
  out->requires_grad = input->requires_grad;
  const int hw = h * w;
  for (int i = 0; i < hw; ++i) {
    double mx = input->data[i];
    for (int ci = 1; ci < c; ++ci) mx = std::max(mx, input->data[ci * hw + i]);
    double z = 0;
    for (int ci = 0; ci < c; ++ci) {
      const double e = std::exp(input->data[ci * hw + i] - mx);
      out->data[ci * hw + i] = e;
      z += e;
    }
    const double inv = 1.0 / z;
    for (int ci = 0; ci < c; ++ci) out->data[ci * hw + i] *= inv;
  }
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([input, out, c, hw] {
      input->ensure_grad();
      for (int i = 0; i < hw; ++i) {
        double dot = 0;
        for (int ci = 0; ci < c; ++ci) dot += out->grad[ci * hw + i] * out->data[ci * hw + i];
        for (int ci = 0; ci < c; ++ci)
          input->grad[ci * hw + i] +=
              out->data[ci * hw + i] * (out->grad[ci * hw + i] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// out[m] = W[m,n] x[n] + b[m]
inline TensorPtr linear(Tape& tape, const TensorPtr& x, const TensorPtr& weight,
                        const TensorPtr& bias) {
  check(weight->shape.size() == 2, "linear: weight must be [M,N]");
  const int m = weight->shape[0], n = weight->shape[1];
  check(x->numel() == n, "linear: input length mismatch");
  if (bias) check(bias->numel() == m, "linear: bias length mismatch");
  auto out = make_tensor({m});
  out->requires_grad =
      x->requires_grad || weight->requires_grad || (bias && bias->requires_grad);
  for (int i = 0; i < m; ++i) {
    double s = bias ? bias->data[i] : 0.0;
    const double* wr = weight->data.data() + i * n;
    for (int j = 0; j < n; ++j) s += wr[j] * x->data[j];
    out->data[i] = s;
  }
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([x, weight, bias, out, m, n] {
      if (bias && bias->requires_grad) {
        bias->ensure_grad();
        for (int i = 0; i < m; ++i) bias->grad[i] += out->grad[i];
      }
      if (weight->requires_grad) {
        weight->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) weight->grad[i * n + j] += out->grad[i] * x->data[j];
      }
      if (x->requires_grad) {
        x->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) x->grad[j] += out->grad[i] * weight->data[i * n + j];
      }
    });
  }
  return out;
}

// [m,k] x [k,n] -> [m,n]
inline TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  check(a->shape.size() == 2 && b->shape.size() == 2 && a->shape[1] == b->shape[0],
        "matmul: inner dimensions must agree");
  const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
  auto out = make_tensor({m, n});
  out->requires_grad = a->requires_grad || b->requires_grad;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int l = 0; l < k; ++l) s += a->data[i * k + l] * b->data[l * n + j];
      out->data[i * n + j] = s;
    }
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([a, b, out, m, k, n] {
      if (a->requires_grad) {
        a->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            double s = 0;
            for (int j = 0; j < n; ++j) s += out->grad[i * n + j] * b->data[l * n + j];
            a->grad[i * k + l] += s;
          }
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int l = 0; l < k; ++l)
          for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int i = 0; i < m; ++i) s += out->grad[i * n + j] * a->data[i * k + l];
            b->grad[l * n + j] += s;
          }
      }
    });
  }
  return out;
}

inline TensorPtr transpose2d(Tape& tape, const TensorPtr& a) {
  check(a->shape.size() == 2, "transpose2d expects a matrix");
  const int m = a->shape[0], n = a->shape[1];
  auto out = make_tensor({n, m});
  out->requires_grad = a->requires_grad;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->data[j * m + i] = a->data[i * n + j];
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([a, out, m, n] {
      a->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) a->grad[i * n + j] += out->grad[j * m + i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spatial finite differences (forward differences, last column/row dropped)
// ---------------------------------------------------------------------------

namespace detail {

inline TensorPtr spatial_diff(Tape& tape, const TensorPtr& x, bool along_x) {
  Shape s = x->shape;
  check(s.size() == 2 || s.size() == 3, "spatial diff expects [H,W] or [C,H,W]");
  const int c = s.size() == 3 ? s[0] : 1;
  const int h = s[s.size() - 2], w = s[s.size() - 1];
  const int oh = along_x ? h : h - 1;
  const int ow = along_x ? w - 1 : w;
  check(oh >= 1 && ow >= 1, "spatial diff: input too small");
  Shape os = s.size() == 3 ? Shape{c, oh, ow} : Shape{oh, ow};
  auto out = make_tensor(os);
  out->requires_grad = x->requires_grad;
  for (int ci = 0; ci < c; ++ci) {
    const double* in0 = x->data.data() + ci * h * w;
    double* out0 = out->data.data() + ci * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx)
        out0[y * ow + xx] = along_x ? in0[y * w + xx + 1] - in0[y * w + xx]
                                    : in0[(y + 1) * w + xx] - in0[y * w + xx];
  }
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([x, out, c, h, w, oh, ow, along_x] {
      x->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        double* gin0 = x->grad.data() + ci * h * w;
        const double* gout0 = out->grad.data() + ci * oh * ow;
        for (int y = 0; y < oh; ++y)
          for (int xx = 0; xx < ow; ++xx) {
            const double g = gout0[y * ow + xx];
            if (along_x) {
              gin0[y * w + xx + 1] += g;
              gin0[y * w + xx] -= g;
            } else {
              gin0[(y + 1) * w + xx] += g;
              gin0[y * w + xx] -= g;
            }
          }
      }
    });
  }
  return out;
}

}  // namespace detail

inline TensorPtr diff_x(Tape& t, const TensorPtr& x) { return detail::spatial_diff(t, x, true); }
inline TensorPtr diff_y(Tape& t, const TensorPtr& x) { return detail::spatial_diff(t, x, false); }

// Crop a [H,W] or [C,H,W] tensor to a spatial window.
inline TensorPtr crop2d(Tape& tape, const TensorPtr& x, int top, int left, int oh, int ow) {
  Shape s = x->shape;
  check(s.size() == 2 || s.size() == 3, "crop2d expects [H,W] or [C,H,W]");
  const int c = s.size() == 3 ? s[0] : 1;
  const int h = s[s.size() - 2], w = s[s.size() - 1];
  check(top >= 0 && left >= 0 && top + oh <= h && left + ow <= w, "crop2d: window out of range");
  Shape os = s.size() == 3 ? Shape{c, oh, ow} : Shape{oh, ow};
  auto out = make_tensor(os);
  out->requires_grad = x->requires_grad;
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < oh; ++y)
      std::copy_n(x->data.begin() + ci * h * w + (top + y) * w + left, ow,
                  out->data.begin() + ci * oh * ow + y * ow);
  if (out->requires_grad) {
    out->ensure_grad();
    tape.record([x, out, c, h, w, oh, ow, top, left] {
      x->ensure_grad();
      for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < oh; ++y)
          for (int xx = 0; xx < ow; ++xx)
            x->grad[ci * h * w + (top + y) * w + left + xx] +=
                out->grad[ci * oh * ow + y * ow + xx];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classification loss
// ---------------------------------------------------------------------------

// Mean per-pixel cross-entropy over non-void pixels. labels[y*W+x] in [0,C) or void_id.
// Returns 0 when every pixel is void; *valid_count_out reports the pixel count used.
inline TensorPtr cross_entropy_channels(Tape& tape, const TensorPtr& logits,
                                        const std::vector<int>& labels, int void_id,
                                        int* valid_count_out = nullptr) {
  check(logits->shape.size() == 3, "cross_entropy expects [C,H,W] logits");
  const int c = logits->shape[0], h = logits->shape[1], w = logits->shape[2];
  const int hw = h * w;
  check(static_cast<int>(labels.size()) == hw, "cross_entropy: label count mismatch");
  int count = 0;
  double total = 0;
  for (int i = 0; i < hw; ++i) {
    const int l = labels[i];
    if (l == void_id) continue;
    check(l >= 0 && l < c, "cross_entropy: label out of range");
    double mx = logits->data[i];
    for (int ci = 1; ci < c; ++ci) mx = std::max(mx, logits->data[ci * hw + i]);
    double z = 0;
    for (int ci = 0; ci < c; ++ci) z += std::exp(logits->data[ci * hw + i] - mx);
    total += (mx + std::log(z)) - logits->data[l * hw + i];
    ++count;
  }
  if (valid_count_out) *valid_count_out = count;
  auto out = make_scalar(count > 0 ? total / count : 0.0);
  out->requires_grad = logits->requires_grad;
  if (out->requires_grad && count > 0) {
    out->ensure_grad();
    tape.record([logits, out, labels, void_id, c, hw, count] {
      logits->ensure_grad();
      const double g = out->grad[0] / count;
      for (int i = 0; i < hw; ++i) {
        const int l = labels[i];
        if (l == void_id) continue;
        double mx = logits->data[i];
        for (int ci = 1; ci < c; ++ci) mx = std::max(mx, logits->data[ci * hw + i]);
        double z = 0;
        for (int ci = 0; ci < c; ++ci) z += std::exp(logits->data[ci * hw + i] - mx);
        for (int ci = 0; ci < c; ++ci) {
          const double p = std::exp(logits->data[ci * hw + i] - mx) / z;
          logits->grad[ci * hw + i] += g * (p - (ci == l ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking oracle (test support, independent of the backward rules)
// ---------------------------------------------------------------------------

// Central finite differences of a scalar-valued function wrt one tensor.
template <typename F>
std::vector<double> finite_difference_grad(F f, const TensorPtr& params, double eps = 1e-5) {
  std::vector<double> g(params->numel());
  for (int i = 0; i < params->numel(); ++i) {
    const double saved = params->data[i];
    params->data[i] = saved + eps;
    const double fp = f();
    params->data[i] = saved - eps;
    const double fm = f();
    params->data[i] = saved;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

}  // namespace selfsup
