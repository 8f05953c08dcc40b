#include <catch2/catch_amalgamated.hpp>

#include "selfsup/ops.hpp"

using namespace selfsup;

namespace {

double rel_err(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
  return std::fabs(a - b) / denom;
}

TensorPtr random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = true) {
  auto t = make_tensor(shape, 0.0, requires_grad);
  for (auto& v : t->data) v = uniform(rng, lo, hi);
  return t;
}

// Analytic gradient of f() wrt params vs central finite differences.
template <typename BuildLoss>
void check_grad(const std::vector<TensorPtr>& params, BuildLoss build, double tol = 1e-4) {
  for (const auto& p : params) p->zero_grad();
  Tape tape;
  auto loss = build(tape);
  tape.backward(loss);
  auto rebuilt = [&] {
    Tape t2;
    return build(t2)->data[0];
  };
  for (const auto& p : params) {
    auto fd = finite_difference_grad(rebuilt, p);
    p->ensure_grad();
    for (int i = 0; i < p->numel(); ++i) {
      INFO("param element " << i);
      CHECK(rel_err(p->grad[i], fd[i]) < tol);
    }
  }
}

}  // namespace

TEST_CASE("elementwise abs forward and gradient") {
  Tape tape;
  auto x = make_tensor({2}, {-2.0, 3.0}, true);
  auto y = abs(tape, x);
  CHECK(y->data == std::vector<double>{2.0, 3.0});
  auto loss = sum(tape, y);
  tape.backward(loss);
  CHECK(x->grad == std::vector<double>{-1.0, 1.0});
}

TEST_CASE("exp at zero") {
  Tape tape;
  auto x = make_scalar(0.0, true);
  auto y = exp(tape, x);
  CHECK(y->data[0] == 1.0);
  tape.backward(y);
  CHECK(x->grad[0] == 1.0);
}

TEST_CASE("finite difference oracle on x*y") {
  auto x = make_scalar(2.0, true);
  auto y = make_scalar(3.0, true);
  auto f = [&] {
    Tape t;
    return mul(t, x, y)->data[0];
  };
  auto g = finite_difference_grad(f, x);
  CHECK(std::fabs(g[0] - 3.0) < 1e-6);
}

TEST_CASE("finite difference oracle basics") {
  auto x = make_scalar(3.0, true);
  auto g = finite_difference_grad([&] { return x->data[0] * x->data[0]; }, x);
  CHECK(std::fabs(g[0] - 6.0) < 1e-8);
  auto gc = finite_difference_grad([&] { return 42.0; }, x);
  CHECK(gc[0] == 0.0);
}

TEST_CASE("elementwise shape mismatch rejected") {
  Tape tape;
  auto a = make_tensor({2, 2});
  auto b = make_tensor({3});
  CHECK_THROWS_AS(add(tape, a, b), contract_error);
}

TEST_CASE("log domain error") {
  Tape tape;
  auto x = make_tensor({2}, {1.0, -1.0});
  CHECK_THROWS_AS(log(tape, x), domain_error);
}

TEST_CASE("elementwise gradients match finite differences") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto a = random_tensor({6}, rng, 0.2, 2.0);  // positive so log/div are in-domain
    auto b = random_tensor({6}, rng, 0.2, 2.0);
    check_grad({a, b}, [&](Tape& t) {
      auto s = add(t, mul(t, a, b), div(t, a, b));
      return sum(t, add(t, log(t, a), add(t, s, exp(t, sub(t, a, b)))));
    });
  }
}

TEST_CASE("scalar broadcast gradient") {
  Rng rng(11);
  auto a = random_tensor({2, 3}, rng);
  auto s = make_scalar(0.7, true);
  check_grad({a, s}, [&](Tape& t) { return sum(t, mul(t, a, s)); });
}

TEST_CASE("sigmoid, relu, abs gradients away from kinks") {
  Rng rng(13);
  auto a = random_tensor({8}, rng, 0.1, 2.0);
  check_grad({a}, [&](Tape& t) {
    return sum(t, add(t, sigmoid(t, a), add(t, relu(t, a), abs(t, a))));
  });
}

TEST_CASE("conv2d all-ones sum") {
  Tape tape;
  auto in = make_tensor({1, 3, 3}, 1.0);
  auto k = make_tensor({1, 1, 3, 3}, 1.0);
  auto out = conv2d(tape, in, k, nullptr, 1, 0);
  REQUIRE(out->shape == Shape{1, 1, 1});
  CHECK(out->data[0] == 9.0);
}

TEST_CASE("conv2d identity kernel") {
  Rng rng(17);
  auto in = random_tensor({2, 4, 4}, rng, 0.0, 1.0, false);
  auto k = make_tensor({2, 2, 3, 3});
  k->data[(0 * 2 + 0) * 9 + 4] = 1.0;  // center tap, channel-matched
  k->data[(1 * 2 + 1) * 9 + 4] = 1.0;
  Tape tape;
  auto out = conv2d(tape, in, k, nullptr, 1, 1);
  REQUIRE(out->shape == in->shape);
  for (int i = 0; i < in->numel(); ++i) CHECK(out->data[i] == in->data[i]);
}

TEST_CASE("conv2d non-integral output size rejected") {
  Tape tape;
  auto in = make_tensor({1, 4, 4});
  auto k = make_tensor({1, 1, 3, 3});
  CHECK_THROWS_AS(conv2d(tape, in, k, nullptr, 2, 0), contract_error);
}

TEST_CASE("conv2d gradient wrt kernel, bias and input") {
  Rng rng(19);
  auto in = random_tensor({1, 4, 4}, rng);
  auto k = random_tensor({2, 1, 3, 3}, rng);
  auto b = random_tensor({2}, rng);
  check_grad({k, b, in}, [&](Tape& t) { return sum(t, conv2d(t, in, k, b, 1, 1)); }, 1e-5);
  // strided
  auto in2 = random_tensor({2, 7, 7}, rng);
  auto k2 = random_tensor({3, 2, 3, 3}, rng);
  check_grad({k2, in2}, [&](Tape& t) { return sum(t, conv2d(t, in2, k2, nullptr, 2, 1)); },
             1e-5);
}

TEST_CASE("upsample preserves constants") {
  Tape tape;
  auto in = make_tensor({1, 3, 3}, 5.0);
  auto out = upsample_bilinear_x2(tape, in);
  REQUIRE(out->shape == Shape{1, 6, 6});
  for (double v : out->data) CHECK(v == 5.0);
}

TEST_CASE("upsample monotone interpolation") {
  Tape tape;
  auto in = make_tensor({1, 1, 2}, {0.0, 1.0});
  auto out = upsample_bilinear_x2(tape, in);
  REQUIRE(out->shape == Shape{1, 2, 4});
  for (int i = 1; i < 4; ++i) CHECK(out->data[i] >= out->data[i - 1]);
}

TEST_CASE("upsample gradient vs finite differences") {
  Rng rng(23);
  auto in = random_tensor({1, 3, 3}, rng);
  auto weights = random_tensor({1, 6, 6}, rng, 0.0, 1.0, false);
  check_grad({in}, [&](Tape& t) {
    return sum(t, mul(t, upsample_bilinear_x2(t, in), weights));
  }, 1e-5);
}

TEST_CASE("softmax symmetry and overflow safety") {
  Tape tape;
  auto in = make_tensor({2, 1, 1}, {0.0, 0.0});
  auto out = softmax_channels(tape, in);
  CHECK(out->data[0] == Catch::Approx(0.5));
  CHECK(out->data[1] == Catch::Approx(0.5));

  auto big = make_tensor({2, 1, 1}, {1000.0, 0.0});
  auto out2 = softmax_channels(tape, big);
  CHECK(std::isfinite(out2->data[0]));
  CHECK(out2->data[0] == Catch::Approx(1.0));
  CHECK(out2->data[1] == Catch::Approx(0.0).margin(1e-300));
}

TEST_CASE("softmax sums to one per pixel") {
  Rng rng(29);
  Tape tape;
  auto in = random_tensor({4, 3, 3}, rng, -50, 50, false);
  auto out = softmax_channels(tape, in);
  for (int i = 0; i < 9; ++i) {
    double s = 0;
    for (int c = 0; c < 4; ++c) s += out->data[c * 9 + i];
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax gradient vs finite differences") {
  Rng rng(31);
  auto in = random_tensor({3, 2, 2}, rng);
  auto weights = random_tensor({3, 2, 2}, rng, 0.0, 1.0, false);
  check_grad({in}, [&](Tape& t) {
    return sum(t, mul(t, softmax_channels(t, in), weights));
  }, 1e-5);
}

TEST_CASE("backward identity Jacobian and null case") {
  {
    Tape tape;
    auto x = make_tensor({5}, 2.0, true);
    tape.backward(sum(tape, x));
    CHECK(x->grad == std::vector<double>(5, 1.0));
  }
  {
    Tape tape;
    auto x = make_tensor({5}, 2.0, true);
    tape.backward(sum(tape, scale(tape, x, 0.0)));
    CHECK(x->grad == std::vector<double>(5, 0.0));
  }
}

TEST_CASE("backward requires scalar loss and single use") {
  Tape tape;
  auto x = make_tensor({3}, 1.0, true);
  auto y = scale(tape, x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), contract_error);
  auto s = sum(tape, y);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), contract_error);
}

TEST_CASE("DAG fan-out accumulates gradients") {
  Rng rng(37);
  auto x = random_tensor({4}, rng, 0.5, 1.5);
  check_grad({x}, [&](Tape& t) {
    auto a = exp(t, x);
    return sum(t, add(t, mul(t, a, x), a));  // x feeds two consumers
  });
}

TEST_CASE("reductions, pools, diffs: gradients") {
  Rng rng(41);
  auto x = random_tensor({2, 4, 4}, rng, 0.5, 2.0);
  check_grad({x}, [&](Tape& t) { return mean(t, x); });
  check_grad({x}, [&](Tape& t) { return sum(t, avg_pool2(t, x)); });
  check_grad({x}, [&](Tape& t) { return sum(t, box3(t, x)); });
  auto wx = random_tensor({2, 4, 3}, rng, 0.1, 1.0, false);
  auto wy = random_tensor({2, 3, 4}, rng, 0.1, 1.0, false);
  check_grad({x}, [&](Tape& t) { return sum(t, mul(t, diff_x(t, x), wx)); });
  check_grad({x}, [&](Tape& t) { return sum(t, mul(t, diff_y(t, x), wy)); });
  check_grad({x}, [&](Tape& t) { return sum(t, global_mean_pool(t, x)); });
  check_grad({x}, [&](Tape& t) { return sum(t, sum_channels(t, x)); });
}

TEST_CASE("linear and matmul gradients") {
  Rng rng(43);
  auto x = random_tensor({4}, rng);
  auto w = random_tensor({3, 4}, rng);
  auto b = random_tensor({3}, rng);
  check_grad({x, w, b}, [&](Tape& t) { return sum(t, linear(t, x, w, b)); });

  auto a = random_tensor({3, 3}, rng);
  auto m = random_tensor({3, 3}, rng);
  check_grad({a, m}, [&](Tape& t) { return sum(t, matmul(t, a, m)); });
  check_grad({a}, [&](Tape& t) { return sum(t, transpose2d(t, a)); });
}

TEST_CASE("slice and concat gradients") {
  Rng rng(47);
  auto x = random_tensor({6}, rng);
  auto y = random_tensor({3}, rng);
  check_grad({x, y}, [&](Tape& t) {
    auto parts = concat_flat(t, {slice_flat(t, x, 1, 3), y});
    return sum(t, mul(t, parts, parts));
  });
}

TEST_CASE("cross entropy: uniform logits give log C") {
  Tape tape;
  const int c = 20;
  auto logits = make_tensor({c, 2, 2}, 0.0, true);
  std::vector<int> labels = {0, 5, 7, 19};
  auto loss = cross_entropy_channels(tape, logits, labels, -1);
  CHECK(loss->data[0] == Catch::Approx(std::log(20.0)));
}

TEST_CASE("cross entropy: confident correct prediction") {
  Tape tape;
  auto logits = make_tensor({3, 1, 2}, 0.0, true);
  std::vector<int> labels = {1, 2};
  logits->data[1 * 2 + 0] = 20.0;  // class 1 at pixel 0
  logits->data[2 * 2 + 1] = 20.0;  // class 2 at pixel 1
  auto loss = cross_entropy_channels(tape, logits, labels, -1);
  CHECK(loss->data[0] < 1e-3);
}

TEST_CASE("cross entropy: all void returns zero with count") {
  Tape tape;
  auto logits = make_tensor({3, 1, 1}, 0.0, true);
  int count = -1;
  auto loss = cross_entropy_channels(tape, logits, {9}, 9, &count);
  CHECK(loss->data[0] == 0.0);
  CHECK(count == 0);
}

TEST_CASE("cross entropy gradient vs finite differences") {
  Rng rng(53);
  auto logits = random_tensor({4, 3, 3}, rng);
  std::vector<int> labels(9);
  for (auto& l : labels) l = uniform_int(rng, 0, 4);  // 4 == void here
  check_grad({logits}, [&](Tape& t) {
    return cross_entropy_channels(t, logits, labels, 4);
  });
}

TEST_CASE("forward determinism") {
  Rng rng(59);
  auto in = random_tensor({2, 6, 6}, rng);
  auto k = random_tensor({3, 2, 3, 3}, rng);
  Tape t1, t2;
  auto a = conv2d(t1, in, k, nullptr, 1, 1);
  auto b = conv2d(t2, in, k, nullptr, 1, 1);
  CHECK(a->data == b->data);
}
