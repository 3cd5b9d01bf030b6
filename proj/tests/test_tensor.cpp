#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dtmil/tensor.hpp"
#include "helpers.hpp"

using namespace dtmil;
using Catch::Matchers::WithinAbs;

TEST_CASE("tensor construction enforces shape invariants") {
  REQUIRE_THROWS_AS(Tensor<double>::zeros(0, 3), ShapeError);
  REQUIRE_THROWS_AS(Tensor<double>::zeros(3, 0), ShapeError);
  REQUIRE_THROWS_AS(Tensor<double>::leaf(2, 2, {1.0, 2.0, 3.0}), ShapeError);
  auto t = Tensor<double>::leaf(2, 3, {1, 2, 3, 4, 5, 6});
  REQUIRE(t.rows() == 2);
  REQUIRE(t.cols() == 3);
  REQUIRE(t.at(1, 2) == 6.0);
}

TEST_CASE("matmul identity and dot product") {
  auto I = Tensor<double>::leaf(2, 2, {1, 0, 0, 1});
  auto B = Tensor<double>::leaf(2, 2, {3, 4, 5, 6});
  auto C = matmul(I, B);
  REQUIRE(C.at(0, 0) == 3.0);
  REQUIRE(C.at(0, 1) == 4.0);
  REQUIRE(C.at(1, 0) == 5.0);
  REQUIRE(C.at(1, 1) == 6.0);

  auto a = Tensor<double>::leaf(1, 2, {1, 2});
  auto b = Tensor<double>::leaf(2, 1, {3, 4});
  REQUIRE(matmul(a, b).item() == 11.0);

  auto bad = Tensor<double>::zeros(3, 3);
  REQUIRE_THROWS_WITH(matmul(a, bad), Catch::Matchers::ContainsSubstring("1x2") &&
                                          Catch::Matchers::ContainsSubstring("3x3"));
}

TEST_CASE("elementwise basics") {
  auto z = Tensor<double>::scalar(0.0);
  REQUIRE_THAT(sigmoid(z).item(), WithinAbs(0.5, 1e-15));
  REQUIRE(tanh(z).item() == 0.0);

  auto x = Tensor<double>::leaf(1, 3, {1, 2, 3});
  auto y = Tensor<double>::leaf(1, 3, {4, 5, 6});
  auto m = mul(x, y);
  REQUIRE(m.at(0, 0) == 4.0);
  REQUIRE(m.at(0, 1) == 10.0);
  REQUIRE(m.at(0, 2) == 18.0);

  auto wrong = Tensor<double>::zeros(3, 1);
  REQUIRE_THROWS_AS(add(x, wrong), ShapeError);
  REQUIRE_THROWS_AS(sub(x, wrong), ShapeError);
  REQUIRE_THROWS_AS(mul(x, wrong), ShapeError);

  auto neg = Tensor<double>::leaf(1, 2, {1.0, -0.5});
  REQUIRE_THROWS_AS(log(neg), ValueError);
  REQUIRE_THROWS_AS(log(Tensor<double>::scalar(0.0)), ValueError);
}

TEST_CASE("softmax_row equal logits, shift invariance, closed form") {
  auto two = softmax_row(Tensor<double>::leaf(1, 2, {0, 0}));
  REQUIRE_THAT(two.at(0, 0), WithinAbs(0.5, 1e-15));
  REQUIRE_THAT(two.at(0, 1), WithinAbs(0.5, 1e-15));

  dtmil::Rng rng(19);
  auto x = testutil::random_tensor<double>(1, 7, rng, false, -3, 3);
  std::vector<double> shifted(x.values().begin(), x.values().end());
  for (auto& v : shifted) v += 1000.0;
  auto sx = softmax_row(x);
  auto sy = softmax_row(Tensor<double>::leaf(1, 7, shifted));
  double total = 0.0;
  for (int j = 0; j < 7; ++j) {
    REQUIRE_THAT(sy.at(0, j), WithinAbs(sx.at(0, j), 1e-9));
    total += sx.at(0, j);
  }
  REQUIRE_THAT(total, WithinAbs(1.0, 1e-9));

  auto closed = softmax_row(
      Tensor<double>::leaf(1, 3, {std::log(1.0), std::log(2.0), std::log(3.0)}));
  REQUIRE_THAT(closed.at(0, 0), WithinAbs(1.0 / 6.0, 1e-9));
  REQUIRE_THAT(closed.at(0, 1), WithinAbs(2.0 / 6.0, 1e-9));
  REQUIRE_THAT(closed.at(0, 2), WithinAbs(3.0 / 6.0, 1e-9));

  REQUIRE_THROWS_AS(softmax_row(Tensor<double>::zeros(2, 2)), ShapeError);
}

TEST_CASE("reduce over rows and cols") {
  auto x = Tensor<double>::leaf(2, 2, {1, 2, 3, 4});
  auto m = mean(x, Axis::rows);
  REQUIRE(m.rows() == 1);
  REQUIRE(m.cols() == 2);
  REQUIRE(m.at(0, 0) == 2.0);
  REQUIRE(m.at(0, 1) == 3.0);

  auto s = sum(x, Axis::cols);
  REQUIRE(s.rows() == 2);
  REQUIRE(s.cols() == 1);
  REQUIRE(s.at(0, 0) == 3.0);
  REQUIRE(s.at(1, 0) == 7.0);

  // Empty reductions cannot be expressed: zero-extent tensors are rejected at
  // construction.
  REQUIRE_THROWS_AS(Tensor<double>::leaf(1, 0, {}), ShapeError);
}

TEST_CASE("gradient of mean is 1/n per element") {
  auto x = Tensor<double>::leaf(1, 4, {1, 2, 3, 4}, true);
  auto root = mean(x, Axis::cols);
  backward(root);
  for (int j = 0; j < 4; ++j) REQUIRE(x.grad_at(0, j) == 0.25);
}

TEST_CASE("bce_loss closed forms and clamping") {
  const double eps = kBceClamp;
  REQUIRE(bce_loss(Tensor<double>::scalar(1.0 - eps), 1).item() < 1e-6);
  REQUIRE_THAT(bce_loss(Tensor<double>::scalar(0.5), 1).item(),
               WithinAbs(std::log(2.0), 1e-9));
  const double at_eps = bce_loss(Tensor<double>::scalar(eps), 1).item();
  REQUIRE(std::isfinite(at_eps));
  REQUIRE_THAT(at_eps, WithinAbs(-std::log(eps), 1e-9));
  // values outside [eps, 1-eps] clamp instead of blowing up
  REQUIRE(std::isfinite(bce_loss(Tensor<double>::scalar(0.0), 1).item()));
  REQUIRE(std::isfinite(bce_loss(Tensor<double>::scalar(1.0), 0).item()));
  REQUIRE_THROWS_AS(bce_loss(Tensor<double>::scalar(0.5), 2), ValueError);
}

TEST_CASE("backward of sum gives all-ones, of sum of squares gives 2x") {
  dtmil::Rng rng(23);
  auto x = testutil::random_tensor<double>(3, 5, rng);
  backward(sum_all(x));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) REQUIRE(x.grad_at(i, j) == 1.0);

  auto y = testutil::random_tensor<double>(2, 4, rng);
  backward(sum_all(mul(y, y)));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j) REQUIRE_THAT(y.grad_at(i, j), WithinAbs(2.0 * y.at(i, j), 1e-14));
}

TEST_CASE("backward requires a scalar root") {
  auto x = Tensor<double>::leaf(2, 2, {1, 2, 3, 4}, true);
  REQUIRE_THROWS_AS(backward(mul(x, x)), ShapeError);
}

TEST_CASE("gradients accumulate additively; double backward doubles") {
  auto x = Tensor<double>::leaf(1, 3, {1, 2, 3}, true);
  auto root = sum_all(mul(x, x));
  backward(root);
  std::vector<double> once(3);
  for (int j = 0; j < 3; ++j) once[size_t(j)] = x.grad_at(0, j);
  backward(root);
  for (int j = 0; j < 3; ++j) REQUIRE(x.grad_at(0, j) == 2.0 * once[size_t(j)]);
  zero_grad_graph(root);
  for (int j = 0; j < 3; ++j) REQUIRE(x.grad_at(0, j) == 0.0);
}

TEST_CASE("backward over a sum of subgraphs equals summed separate backwards") {
  auto mk = [] { return Tensor<double>::leaf(1, 3, {0.5, -1.0, 2.0}, true); };
  auto a = Tensor<double>::leaf(1, 3, {1, 2, 3});
  auto b = Tensor<double>::leaf(1, 3, {-2, 0.5, 4});

  auto x1 = mk();
  backward(add(sum_all(mul(x1, a)), sum_all(mul(x1, b))));

  auto x2 = mk();
  backward(sum_all(mul(x2, a)));
  backward(sum_all(mul(x2, b)));

  for (int j = 0; j < 3; ++j) REQUIRE(x1.grad_at(0, j) == x2.grad_at(0, j));
}

TEST_CASE("scale_rows values and pick extraction") {
  auto H = Tensor<double>::leaf(2, 2, {1, 2, 3, 4});
  auto a = Tensor<double>::leaf(1, 2, {10, 100});
  auto out = scale_rows(H, a);
  REQUIRE(out.at(0, 1) == 20.0);
  REQUIRE(out.at(1, 0) == 300.0);
  REQUIRE_THROWS_AS(scale_rows(H, Tensor<double>::zeros(1, 3)), ShapeError);

  REQUIRE(pick(H, 1, 0).item() == 3.0);
  REQUIRE_THROWS_AS(pick(H, 2, 0), ShapeError);
}

TEST_CASE("same seed and op sequence is bitwise deterministic") {
  auto run = [] {
    dtmil::Rng rng(99);
    auto x = testutil::random_tensor<float>(4, 4, rng);
    auto y = testutil::random_tensor<float>(4, 4, rng);
    auto out = sum_all(tanh(matmul(x, y)));
    backward(out);
    std::vector<float> result(out.values().begin(), out.values().end());
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) result.push_back(float(x.grad_at(i, j)));
    return result;
  };
  REQUIRE(run() == run());
}
