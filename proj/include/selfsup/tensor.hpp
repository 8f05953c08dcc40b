#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "selfsup/common.hpp"

namespace selfsup {

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) {
    check(d > 0, "tensor dimension must be positive");
    n *= d;
  }
  return n;
}

// Dense double-precision n-d array with an optional gradient buffer.
// Values are row-major. Tensors are immutable after construction except
// for gradient accumulation during backward().
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation

  int numel() const { return static_cast<int>(data.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }

  void zero_grad() { grad.clear(); }

  bool is_scalar() const { return data.size() == 1; }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Shape shape, double fill = 0.0, bool requires_grad = false) {
  auto t = std::make_shared<Tensor>();
  int n = shape_numel(shape);
  t->shape = std::move(shape);
  t->data.assign(n, fill);
  t->requires_grad = requires_grad;
  return t;
}

inline TensorPtr make_tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
  auto t = std::make_shared<Tensor>();
  check(shape_numel(shape) == static_cast<int>(data.size()),
        "tensor data length does not match shape");
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  return t;
}

inline TensorPtr make_scalar(double v, bool requires_grad = false) {
  return make_tensor({1}, std::vector<double>{v}, requires_grad);
}

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

// Copy with gradient tracking severed; used for stop-gradient boundaries.
inline TensorPtr detach(const TensorPtr& x) {
  auto t = std::make_shared<Tensor>();
  t->shape = x->shape;
  t->data = x->data;
  t->requires_grad = false;
  return t;
}

// Records one backward rule per differentiable operation, in forward order.
// A tape is built per forward pass and consumed by exactly one backward().
class Tape {
 public:
  void record(std::function<void()> backward_rule) {
    nodes_.push_back(std::move(backward_rule));
  }

  // Seeds d(loss)/d(loss) = 1 and runs all recorded rules in reverse,
  // accumulating into the .grad of every requires_grad tensor reached.
  void backward(const TensorPtr& loss) {
    check(loss->is_scalar(), "backward requires a scalar loss");
    check(!consumed_, "tape already consumed; rebuild the tape before calling backward again");
    consumed_ = true;
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

}  // namespace selfsup
