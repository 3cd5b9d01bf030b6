// Finite-difference checks for every differentiable op, run at 64-bit on the
// same graph code the 32-bit training path uses.

#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "dtmil/grad_check.hpp"
#include "dtmil/tensor.hpp"
#include "helpers.hpp"

using namespace dtmil;

namespace {

using Fn = Tensor<double> (*)(const std::vector<Tensor<double>>&);

double check(Tensor<double> (*f)(const std::vector<Tensor<double>>&),
             std::vector<Tensor<double>> xs) {
  return grad_check<double>([&](const std::vector<Tensor<double>>& v) { return f(v); }, xs);
}

}  // namespace

TEST_CASE("grad_check of a linear function is essentially exact") {
  Rng rng(1);
  auto x = testutil::random_tensor<double>(3, 4, rng);
  std::vector<Tensor<double>> xs = {x};
  const double err =
      grad_check<double>([](const std::vector<Tensor<double>>& v) { return sum_all(v[0]); }, xs);
  REQUIRE(err < 1e-10);
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(2);
  std::vector<Tensor<double>> xs = {testutil::random_tensor<double>(3, 3, rng),
                                    testutil::random_tensor<double>(3, 3, rng)};
  const double err = grad_check<double>(
      [](const std::vector<Tensor<double>>& v) { return sum_all(matmul(v[0], v[1])); }, xs);
  REQUIRE(err < 1e-6);
}

TEST_CASE("every differentiable op passes finite differences over 100+ random cases") {
  Rng rng(3);
  double worst = 0.0;
  int cases = 0;
  auto run = [&](auto f, std::vector<Tensor<double>> xs) {
    const double err = grad_check<double>(f, xs);
    worst = std::max(worst, err);
    ++cases;
    REQUIRE(err < 1e-6);
  };

  for (int rep = 0; rep < 10; ++rep) {
    const int m = int(rng.uniform_int(1, 4));
    const int k = int(rng.uniform_int(1, 4));
    const int n = int(rng.uniform_int(1, 4));
    run([](const std::vector<Tensor<double>>& v) { return sum_all(matmul(v[0], v[1])); },
        {testutil::random_tensor<double>(m, k, rng), testutil::random_tensor<double>(k, n, rng)});
    run([](const std::vector<Tensor<double>>& v) { return sum_all(transpose(v[0])); },
        {testutil::random_tensor<double>(m, k, rng)});
    run([](const std::vector<Tensor<double>>& v) { return sum_all(mul(tanh(v[0]), sigmoid(v[1]))); },
        {testutil::random_tensor<double>(m, n, rng), testutil::random_tensor<double>(m, n, rng)});
    run([](const std::vector<Tensor<double>>& v) { return sum_all(exp(v[0])); },
        {testutil::random_tensor<double>(m, n, rng)});
    run([](const std::vector<Tensor<double>>& v) { return sum_all(log(v[0])); },
        {testutil::random_tensor<double>(m, n, rng, true, 0.2, 3.0)});
    run([](const std::vector<Tensor<double>>& v) { return sum_all(add(v[0], v[1])); },
        {testutil::random_tensor<double>(m, n, rng), testutil::random_tensor<double>(m, n, rng)});
    run([](const std::vector<Tensor<double>>& v) { return sum_all(sub(v[0], v[1])); },
        {testutil::random_tensor<double>(m, n, rng), testutil::random_tensor<double>(m, n, rng)});
    run([](const std::vector<Tensor<double>>& v) { return sum_all(scale(v[0], 3.5)); },
        {testutil::random_tensor<double>(m, n, rng)});
    run([](const std::vector<Tensor<double>>& v) { return pick(softmax_row(v[0]), 0, 0); },
        {testutil::random_tensor<double>(1, n + 1, rng, true, -2, 2)});
    run([](const std::vector<Tensor<double>>& v) { return sum_all(mean(v[0], Axis::rows)); },
        {testutil::random_tensor<double>(m, n, rng)});
    run([](const std::vector<Tensor<double>>& v) { return sum_all(mean(v[0], Axis::cols)); },
        {testutil::random_tensor<double>(m, n, rng)});
    run([](const std::vector<Tensor<double>>& v) { return sum_all(scale_rows(v[0], v[1])); },
        {testutil::random_tensor<double>(m, n, rng), testutil::random_tensor<double>(1, m, rng)});
    run([](const std::vector<Tensor<double>>& v) {
          return bce_loss(sigmoid(pick(v[0], 0, 0)), 1);
        },
        {testutil::random_tensor<double>(1, 1, rng, true, -2, 2)});
  }
  REQUIRE(cases >= 100);
  INFO("worst relative error " << worst);
}

TEST_CASE("bce of sigmoid composite passes finite differences") {
  Rng rng(4);
  for (int y : {0, 1}) {
    std::vector<Tensor<double>> xs = {testutil::random_tensor<double>(1, 1, rng, true, -3, 3)};
    const double err = grad_check<double>(
        [y](const std::vector<Tensor<double>>& v) { return bce_loss(sigmoid(v[0]), y); }, xs);
    REQUIRE(err < 1e-6);
  }
}

TEST_CASE("three-layer composite passes finite differences") {
  Rng rng(5);
  std::vector<Tensor<double>> xs = {
      testutil::random_tensor<double>(2, 3, rng),   // input
      testutil::random_tensor<double>(3, 3, rng),   // layer 1
      testutil::random_tensor<double>(3, 2, rng),   // layer 2
      testutil::random_tensor<double>(2, 1, rng)};  // readout
  const double err = grad_check<double>(
      [](const std::vector<Tensor<double>>& v) {
        auto h1 = tanh(matmul(v[0], v[1]));
        auto h2 = sigmoid(matmul(h1, v[2]));
        return sum_all(matmul(h2, v[3]));
      },
      xs);
  REQUIRE(err < 1e-6);
}
