#include <doctest.h>

#include <cmath>

#include "psr/tensor.hpp"

using namespace psr;

namespace {

// Independent triple-loop product for checking matmul.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  int64_t m, int64_t k, int64_t n) {
  std::vector<double> c(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t p = 0; p < k; ++p)
        c[static_cast<size_t>(i * n + j)] +=
            a[static_cast<size_t>(i * k + p)] * b[static_cast<size_t>(p * n + j)];
  return c;
}

}  // namespace

TEST_CASE("tensor_new zero fill") {
  Tensor t = Tensor::full({2, 2}, 0.0);
  CHECK(t.numel() == 4);
  for (double v : t.values()) CHECK(v == 0.0);
}

TEST_CASE("tensor_new from data") {
  Tensor t = Tensor::from_data({3}, {1, 2, 3});
  CHECK(t.at({0}) == 1);
  CHECK(t.at({1}) == 2);
  CHECK(t.at({2}) == 3);
}

TEST_CASE("tensor_new length mismatch throws") {
  CHECK_THROWS_AS(Tensor::from_data({2, 3}, {1, 2, 3, 4, 5}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
}

TEST_CASE("elementwise add") {
  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = Tensor::from_data({2}, {3, 4});
  Tensor c = add(a, b);
  CHECK(c.at({0}) == 4);
  CHECK(c.at({1}) == 6);
}

TEST_CASE("relu definition") {
  Tensor a = Tensor::from_data({3}, {-1, 0, 2});
  Tensor r = relu(a);
  CHECK(r.at({0}) == 0);
  CHECK(r.at({1}) == 0);
  CHECK(r.at({2}) == 2);
}

TEST_CASE("sigmoid at zero") {
  Tensor r = sigmoid(Tensor::from_data({1}, {0}));
  CHECK(r.item() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("broadcasting trailing size-1 axes") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({1, 3}, {10, 20, 30});
  Tensor c = add(a, b);
  CHECK(c.at({0, 0}) == 11);
  CHECK(c.at({1, 2}) == 36);
  Tensor col = Tensor::from_data({2, 1}, {100, 200});
  Tensor d = add(a, col);
  CHECK(d.at({0, 2}) == 103);
  CHECK(d.at({1, 0}) == 204);
}

TEST_CASE("non-broadcastable shapes throw") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(add(a, b), ShapeError);
}

TEST_CASE("div by exact zero raises NumericError") {
  Tensor a = Tensor::from_data({2}, {1, 2});
  Tensor b = Tensor::from_data({2}, {1, 0});
  CHECK_THROWS_AS(div(a, b), NumericError);
}

TEST_CASE("reduce_sum rows") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor s = reduce_sum(a, {1}, false);
  CHECK(s.at({0}) == 3);
  CHECK(s.at({1}) == 7);
}

TEST_CASE("reduce_sum all axes of zeros") {
  Tensor a = Tensor::zeros({4, 4});
  Tensor s = reduce_sum(a, {0, 1}, false);
  CHECK(s.item() == 0.0);
}

TEST_CASE("reduce_sum empty axes is identity copy") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor s = reduce_sum(a, {}, false);
  CHECK(s.values() == a.values());
  CHECK(s.impl() != a.impl());
}

TEST_CASE("reduce_sum bad axis throws") {
  Tensor a = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(reduce_sum(a, {2}, false), ShapeError);
  CHECK_THROWS_AS(reduce_sum(a, {0, 0}, false), ShapeError);
}

TEST_CASE("matmul identity") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(eye, m);
  CHECK(c.values() == m.values());
}

TEST_CASE("matmul small case") {
  Tensor a = Tensor::from_data({1, 2}, {1, 2});
  Tensor b = Tensor::from_data({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == 11);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(7);
  Tensor a = Tensor::uniform({3, 4}, rng, -1, 1);
  Tensor b = Tensor::uniform({4, 2}, rng, -1, 1);
  Tensor c = matmul(a, b);
  auto expect = matmul_oracle(a.values(), b.values(), 3, 4, 2);
  for (size_t i = 0; i < expect.size(); ++i) {
    CHECK(c.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("backward of sum of squares") {
  Tensor x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
  Tape tape;
  Tensor loss = sum_all(mul(x, x));
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward through relu") {
  Tensor x = Tensor::from_data({2}, {-1, 3}).set_requires_grad(true);
  Tape tape;
  backward(sum_all(relu(x)));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
  Tape tape;
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("composite gradient matches finite differences") {
  Rng rng(11);
  Tensor x = Tensor::uniform({6}, rng, 0.3, 1.7);
  auto f = [](const Tensor& t) {
    Tensor y = sigmoid(mul(t, t));
    Tensor z = add(y, psr::exp(mul_scalar(t, -0.5)));
    return sum_all(mul(z, psr::log(add_scalar(mul(t, t), 1.0))));
  };
  CHECK(grad_check(f, x, 1e-6) <= 1e-5);
}

TEST_CASE("shared subexpression accumulates gradient") {
  Rng rng(13);
  Tensor x = Tensor::uniform({4}, rng, -1.0, 1.0);
  // u is consumed twice; gradients must sum across both uses.
  auto f = [](const Tensor& t) {
    Tensor u = mul(t, t);
    return sum_all(add(mul(u, t), u));
  };
  CHECK(grad_check(f, x, 1e-6) <= 1e-5);

  // Direct analytic check: d/dx (x^3 + x^2) = 3x^2 + 2x.
  Tensor xg = x.clone_detached().set_requires_grad(true);
  Tape tape;
  Tensor u = mul(xg, xg);
  backward(sum_all(add(mul(u, xg), u)));
  for (size_t i = 0; i < 4; ++i) {
    const double xi = x.values()[i];
    CHECK(xg.grad()[i] == doctest::Approx(3 * xi * xi + 2 * xi).epsilon(1e-9));
  }
}

TEST_CASE("grad_check of plain sum is tiny") {
  Rng rng(3);
  Tensor x = Tensor::uniform({5}, rng, -2, 2);
  CHECK(grad_check([](const Tensor& t) { return sum_all(t); }, x, 1e-6) <= 1e-9);
}

TEST_CASE("grad_check of sum of sigmoid") {
  Rng rng(5);
  Tensor x = Tensor::uniform({8}, rng, -2, 2);
  CHECK(grad_check([](const Tensor& t) { return sum_all(sigmoid(t)); }, x, 1e-6) <= 1e-5);
}

TEST_CASE("broadcast gradients reduce over stretched axes") {
  Rng rng(17);
  Tensor b = Tensor::uniform({1, 3}, rng, -1, 1);
  Tensor a = Tensor::uniform({2, 3}, rng, -1, 1);
  auto f = [&a](const Tensor& t) { return sum_all(mul(add(a, t), add(a, t))); };
  CHECK(grad_check(f, b, 1e-6) <= 1e-5);
}

TEST_CASE("adam zero grad leaves params unchanged") {
  Tensor p = Tensor::from_data({3}, {1, 2, 3}).set_requires_grad(true);
  std::vector<Tensor> params{p};
  AdamState st;
  st.lr = 0.1;
  zero_grad(params);
  adam_step(params, st);
  CHECK(p.values()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p.values()[1] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(p.values()[2] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("adam first step moves by lr under constant unit gradient") {
  Tensor p = Tensor::from_data({1}, {5.0}).set_requires_grad(true);
  std::vector<Tensor> params{p};
  AdamState st;
  st.lr = 0.1;
  p.ensure_zero_grad();
  p.grad()[0] = 1.0;
  adam_step(params, st);
  // Bias-corrected first step: lr * 1 / (1 + eps).
  CHECK(p.values()[0] == doctest::Approx(5.0 - 0.1).epsilon(1e-7));
  CHECK(st.step == 1);
}

TEST_CASE("adam requires gradients") {
  Tensor p = Tensor::from_data({1}, {1.0}).set_requires_grad(true);
  std::vector<Tensor> params{p};
  AdamState st;
  CHECK_THROWS_AS(adam_step(params, st), StateError);
}

TEST_CASE("concat and slice round data correctly") {
  Tensor a = Tensor::from_data({1, 2}, {1, 2});
  Tensor b = Tensor::from_data({1, 2}, {3, 4});
  Tensor c = concat({a, b}, 0);
  CHECK(c.shape() == Shape{2, 2});
  CHECK(c.at({1, 0}) == 3);
  Tensor s = slice0(c, 1, 1);
  CHECK(s.shape() == Shape{1, 2});
  CHECK(s.at({0, 1}) == 4);

  Tensor d = concat({a, b}, 1);
  CHECK(d.shape() == Shape{1, 4});
  CHECK(d.at({0, 2}) == 3);
}

TEST_CASE("concat gradient splits back") {
  Rng rng(23);
  Tensor a = Tensor::uniform({2, 2}, rng, -1, 1);
  Tensor b = Tensor::uniform({2, 1}, rng, -1, 1);
  auto f = [&b](const Tensor& t) {
    Tensor c = concat({t, b}, 1);
    return sum_all(mul(c, c));
  };
  CHECK(grad_check(f, a, 1e-6) <= 1e-5);
  auto g = [&a](const Tensor& t) {
    Tensor c = concat({a, t}, 1);
    return sum_all(mul(c, c));
  };
  CHECK(grad_check(g, b, 1e-6) <= 1e-5);
}

TEST_CASE("reshape keeps values and routes gradient") {
  Rng rng(29);
  Tensor a = Tensor::uniform({2, 3}, rng, -1, 1);
  Tensor r = reshape(a, {3, 2});
  CHECK(r.values() == a.values());
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
  auto f = [](const Tensor& t) { return sum_all(mul(reshape(t, {6}), reshape(t, {6}))); };
  CHECK(grad_check(f, a, 1e-6) <= 1e-5);
}

TEST_CASE("ops are deterministic for identical seeds") {
  Rng r1(99), r2(99);
  Tensor a = Tensor::uniform({16}, r1, -1, 1);
  Tensor b = Tensor::uniform({16}, r2, -1, 1);
  CHECK(a.values() == b.values());
  CHECK(sigmoid(a).values() == sigmoid(b).values());
}

TEST_CASE("unreachable parameter gets zero grad after backward") {
  Tensor used = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
  Tensor unused = Tensor::from_data({2}, {3, 4}).set_requires_grad(true);
  Tape tape;
  Tensor dead = mul(unused, unused);  // recorded but not reachable from loss
  Tensor loss = sum_all(mul(used, used));
  backward(loss);
  CHECK(dead.defined());
  CHECK(unused.grad()[0] == 0.0);
  CHECK(unused.grad()[1] == 0.0);
  CHECK(used.grad()[1] == doctest::Approx(4.0));
}
