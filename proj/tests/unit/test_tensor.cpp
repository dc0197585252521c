#include <doctest.h>

#include <cmath>
#include <limits>

#include "malvit/error.hpp"
#include "malvit/gradcheck.hpp"
#include "malvit/ops.hpp"
#include "malvit/rng.hpp"

using namespace malvit;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, bool grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor<double>(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("shape and data invariants") {
  Tensor<float> t({2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK(shape_numel({}) == 1);
  CHECK(Tensor<float>::scalar(2.0f).item() == 2.0f);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  auto c = t.clone();
  c.data()[0] = 9.0f;
  CHECK(t.data()[0] == 1.5f);
}

TEST_CASE("matmul examples") {
  GradientTape<double> tape(false);
  Tensor<double> id({2, 2}, {1, 0, 0, 1});
  Tensor<double> m({2, 2}, {5, 6, 7, 8});
  const auto r = ops::matmul(tape, id, m);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{5, 6, 7, 8});
  const auto s = ops::matmul(tape, Tensor<double>({1, 2}, {1, 2}), Tensor<double>({2, 1}, {3, 4}));
  CHECK(s.data()[0] == 11.0);
  CHECK_THROWS_AS(ops::matmul(tape, Tensor<double>({2, 3}), Tensor<double>({2, 3})), DimensionError);
}

TEST_CASE("matmul gradient is an outer product with ones") {
  GradientTape<double> tape;
  Tensor<double> a({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor<double> b({2, 1}, {1, 1});
  tape.backward(ops::sum(tape, ops::matmul(tape, a, b)));
  for (double g : a.grad_values()) CHECK(g == 1.0);
  Rng rng(3);
  auto b2 = random_tensor({2, 1}, rng, false);
  const auto res = finite_difference_check(
      [&](GradientTape<double>& t) { return ops::sum(t, ops::matmul(t, a, b2)); }, {a});
  CHECK(res.max_rel_error <= 1e-8);
}

TEST_CASE("softmax examples") {
  GradientTape<double> tape(false);
  auto a = ops::softmax(tape, Tensor<double>({2}, {0, 0}), -1);
  CHECK(a.data()[0] == doctest::Approx(0.5));
  CHECK(a.data()[1] == doctest::Approx(0.5));
  auto b = ops::softmax(tape, Tensor<double>({3}, {1, 2, 3}), -1);
  CHECK(b.data()[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(b.data()[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(b.data()[2] == doctest::Approx(0.66524).epsilon(1e-4));
  CHECK(std::abs(b.data()[0] - 0.0900306) < 1e-5);
  auto c = ops::softmax(tape, Tensor<double>({2}, {1000, 0}), -1);
  CHECK(c.data()[0] == 1.0);
  CHECK(c.data()[1] == 0.0);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(ops::softmax(tape, Tensor<double>({2}, {nan, 0}), -1), NumericError);
}

TEST_CASE("softmax rows sum to one (property)") {
  Rng rng(11);
  GradientTape<float> tape(false);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(8), cols = 1 + rng.below(80);
    std::vector<float> v(rows * cols);
    const double spread = rng.uniform(0.1, 50.0);
    for (auto& x : v) x = static_cast<float>(spread * rng.normal());
    const auto s = ops::softmax(tape, Tensor<float>({rows, cols}, v), -1);
    for (std::size_t r = 0; r < rows; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) sum += s.data()[r * cols + c];
      CHECK(std::abs(sum - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("layer_norm examples") {
  GradientTape<double> tape(false);
  Tensor<double> one({2}, 1.0), zero({2}, 0.0);
  auto a = ops::layer_norm(tape, Tensor<double>({1, 2}, {4, 4}), one, zero);
  CHECK(a.data()[0] == 0.0);
  CHECK(a.data()[1] == 0.0);
  auto b = ops::layer_norm(tape, Tensor<double>({1, 2}, {1, 3}), one, zero, 1e-12);
  CHECK(b.data()[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(b.data()[1] == doctest::Approx(1.0).epsilon(1e-9));
  auto c = ops::layer_norm(tape, Tensor<double>({1, 2}, {1, 3}), zero, Tensor<double>({2}, {0.25, -2.0}));
  CHECK(c.data()[0] == 0.25);
  CHECK(c.data()[1] == -2.0);
  CHECK_THROWS_AS(ops::layer_norm(tape, Tensor<double>({2, 0}), Tensor<double>({0}), Tensor<double>({0})),
                  DimensionError);
}

TEST_CASE("gelu examples") {
  GradientTape<double> tape(false);
  auto g = ops::gelu(tape, Tensor<double>({3}, {0.0, 10.0, 1.0}));
  CHECK(g.data()[0] == 0.0);
  CHECK(std::abs(g.data()[1] - 10.0) <= 1e-6);
  CHECK(std::abs(g.data()[2] - 0.84134) <= 1e-4);
}

TEST_CASE("backward examples") {
  GradientTape<double> tape;
  Tensor<double> x({2, 3}, 0.7, true);
  tape.backward(ops::sum(tape, x));
  for (double g : x.grad_values()) CHECK(g == 1.0);

  GradientTape<double> t2;
  Tensor<double> y({2}, {1, 2}, true);
  t2.backward(ops::sum(t2, ops::mul(t2, y, y)));
  CHECK(y.grad_values() == std::vector<double>{2, 4});

  GradientTape<double> t3;
  Tensor<double> z({2}, {1, 2}, true);
  CHECK_THROWS_AS(t3.backward(ops::scale(t3, z, 2.0)), ContractError);
}

TEST_CASE("unreachable leaves get zero gradient and untracked tensors never join the graph") {
  GradientTape<double> tape;
  Tensor<double> used({2}, {1, 2}, true), unused({2}, {3, 4}, true), plain({2}, {1, 1});
  tape.backward(ops::sum(tape, ops::mul(tape, used, plain)));
  CHECK(unused.grad_values() == std::vector<double>{0, 0});
  CHECK(!plain.has_grad());
}

TEST_CASE("finite_difference_check examples") {
  Tensor<double> x({1}, {3.0}, true);
  auto sq = finite_difference_check([&](GradientTape<double>& t) { return ops::sum(t, ops::mul(t, x, x)); }, {x});
  CHECK(sq.max_rel_error <= 1e-8);
  Tensor<double> w({3}, {1, 2, 3}, true);
  auto constant = finite_difference_check(
      [&](GradientTape<double>& t) { return ops::sum(t, Tensor<double>({2}, {1.0, 2.0})); }, {w});
  CHECK(constant.max_rel_error == 0.0);
  Tensor<double> bad({1}, {1.0}, true);
  CHECK_THROWS_AS(finite_difference_check(
                      [&](GradientTape<double>& t) {
                        return ops::scale(t, ops::sum(t, bad), std::numeric_limits<double>::infinity());
                      },
                      {bad}),
                  NumericError);
}

TEST_CASE("the relative error floor governs zero gradients") {
  // d/dx x^3 at 0 is 0, while the central difference is exactly h^2.
  Tensor<double> x({1}, {0.0}, true);
  const auto cube = [&](GradientTape<double>& t) { return ops::sum(t, ops::mul(t, ops::mul(t, x, x), x)); };
  const auto tight = finite_difference_check(cube, {x}, {1e-5, 0, 0, 1e-8});
  CHECK(tight.max_rel_error == doctest::Approx(1e-2).epsilon(1e-3));
  CHECK(tight.worst_index == 0);
  CHECK(tight.below_scale == 1);
  CHECK(tight.max_abs_error == doctest::Approx(1e-10).epsilon(1e-3));
  const auto loose = finite_difference_check(cube, {x}, {1e-5, 0, 0, 1e-4});
  CHECK(loose.max_rel_error <= 1e-5);
  CHECK_THROWS_AS(finite_difference_check(cube, {x}, {1e-5, 0, 0, 0.0}), ContractError);
}

TEST_CASE("every differentiable op matches finite differences (property)") {
  Rng rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t m = 2 + rng.below(3), k = 2 + rng.below(3), n = 2 + rng.below(3);
    auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng), bias = random_tensor({n}, rng);
    auto gamma = random_tensor({n}, rng), beta = random_tensor({n}, rng);
    auto w = random_tensor({m, n}, rng, false);
    auto f = [&](GradientTape<double>& t) {
      auto h = ops::linear(t, a, b, bias);
      h = ops::layer_norm(t, h, gamma, beta);
      h = ops::gelu(t, h);
      auto s = ops::softmax(t, h, -1);
      auto e = ops::exp(t, ops::scale(t, h, 0.3));
      auto p = ops::permute(t, ops::reshape(t, ops::add(t, s, e), {m, n}), {1, 0});
      auto c = ops::concat(t, {p, ops::slice(t, p, 1, 0, 1)}, 1);
      auto r = ops::mean_axis(t, ops::sum_axis(t, ops::expand_leading(t, c, 2), 0), 1);
      return ops::add(t, ops::sum(t, ops::mul(t, r, r)), ops::sum(t, ops::mul(t, h, w)));
    };
    const auto res = finite_difference_check(f, {a, b, bias, gamma, beta});
    CHECK(res.max_rel_error <= 1e-4);
  }
}

TEST_CASE("bce_with_logits matches the stable closed form and its gradient") {
  Rng rng(8);
  auto logits = random_tensor({4, 3}, rng);
  std::vector<std::uint8_t> y{1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1, 0};
  GradientTape<double> tape(false);
  const auto l = ops::bce_with_logits(tape, logits, y, ops::Reduction::sum);
  for (std::size_t t = 0; t < 3; ++t) {
    double expect = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      const double z = logits.data()[i * 3 + t];
      expect += ops::softplus(z) - y[i * 3 + t] * z;
    }
    CHECK(l.data()[t] == doctest::Approx(expect).epsilon(1e-12));
  }
  const auto res = finite_difference_check(
      [&](GradientTape<double>& t) {
        return ops::sum(t, ops::bce_with_logits(t, logits, y, ops::Reduction::mean));
      },
      {logits});
  CHECK(res.max_rel_error <= 1e-4);
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(21);
  auto x = random_tensor({3, 4}, rng);
  auto w = random_tensor({4, 2}, rng, false);
  auto l1 = [&](GradientTape<double>& t) { return ops::sum(t, ops::gelu(t, ops::matmul(t, x, w))); };
  auto l2 = [&](GradientTape<double>& t) { return ops::sum(t, ops::mul(t, x, x)); };
  auto grad_of = [&](auto&& f) {
    x.zero_grad();
    GradientTape<double> t;
    t.backward(f(t));
    return x.grad_values();
  };
  const auto g1 = grad_of(l1), g2 = grad_of(l2);
  const auto g = grad_of([&](GradientTape<double>& t) {
    return ops::add(t, ops::scale(t, l1(t), 2.5), ops::scale(t, l2(t), -0.75));
  });
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i] - (2.5 * g1[i] - 0.75 * g2[i])) <= 1e-6);
}

TEST_CASE("rng determinism and derived streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42);
  const auto d1 = c.derive(3).next_u64();
  c.next_u64();
  CHECK(c.derive(3).next_u64() == d1);
  CHECK(Rng(42).derive(4).next_u64() != d1);
  const auto p = Rng(1).permutation(50);
  std::vector<int> seen(50, 0);
  for (auto i : p) seen[i]++;
  for (int s : seen) CHECK(s == 1);
}

TEST_CASE("identical op sequences give bit-identical buffers") {
  auto run = [] {
    Rng rng(9);
    auto x = random_tensor({4, 6}, rng);
    GradientTape<double> t;
    auto y = ops::softmax(t, ops::gelu(t, x), -1);
    t.backward(ops::sum(t, ops::mul(t, y, y)));
    auto out = x.grad_values();
    out.insert(out.end(), y.data().begin(), y.data().end());
    return out;
  };
  CHECK(run() == run());
}

}  // TEST_SUITE
