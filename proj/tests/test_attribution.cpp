#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include "dtmil/attribution.hpp"
#include "helpers.hpp"

using namespace dtmil;
using Catch::Matchers::WithinAbs;

namespace {

template <typename S>
AbmilParams<S> linear_params(int D, int D_att, uint64_t seed, bool bias) {
  Rng rng(seed);
  return AbmilParams<S>::init({D, D_att, 2, 0, bias}, rng);
}

}  // namespace

TEST_CASE("linear head channel weights equal the classifier row over K") {
  Rng rng(3);
  auto params = linear_params<double>(6, 8, 17, false);
  for (int K : {1, 4, 9}) {
    auto H = testutil::random_normal_tensor<double>(K, 6, rng, false);
    auto fwd = forward_bag(H, params);
    for (int c = 0; c < 2; ++c) {
      auto beta = channel_weights(fwd, c);
      for (int d = 0; d < 6; ++d)
        REQUIRE_THAT(beta[size_t(d)], WithinAbs(params.Wc.at(c, d) / K, 1e-9));
    }
  }
}

TEST_CASE("zero classifier gives zero channel weights") {
  Rng rng(4);
  auto params = linear_params<double>(5, 6, 2, false);
  params.Wc = Tensor<double>::zeros(2, 5, true);
  auto H = testutil::random_normal_tensor<double>(3, 5, rng, false);
  auto fwd = forward_bag(H, params);
  for (double b : channel_weights(fwd, 1)) REQUIRE(b == 0.0);
}

TEST_CASE("channel weights match central differences of the logit") {
  Rng rng(5);
  auto params = linear_params<double>(4, 6, 21, true);
  auto H = testutil::random_normal_tensor<double>(5, 4, rng, false);
  auto fwd = forward_bag(H, params);
  const int c = 1;
  auto beta = channel_weights(fwd, c);

  // Numeric beta from the head recomputed as a plain function of h_hat:
  // s_c = Wc[c] . mean_rows(h_hat) + bc[c].
  const double eps = 1e-5;
  std::vector<double> hv(fwd.h_hat.values().begin(), fwd.h_hat.values().end());
  auto logit_from = [&](const std::vector<double>& h) {
    double s = params.bc.at(0, c);
    for (int d = 0; d < 4; ++d) {
      double m = 0.0;
      for (int k = 0; k < 5; ++k) m += h[size_t(k) * 4 + d];
      s += params.Wc.at(c, d) * (m / 5.0);
    }
    return s;
  };
  for (int d = 0; d < 4; ++d) {
    double acc = 0.0;
    for (int k = 0; k < 5; ++k) {
      auto up = hv, dn = hv;
      up[size_t(k) * 4 + d] += eps;
      dn[size_t(k) * 4 + d] -= eps;
      acc += (logit_from(up) - logit_from(dn)) / (2 * eps);
    }
    REQUIRE_THAT(beta[size_t(d)], WithinAbs(acc / 5.0, 1e-5));
  }
}

TEST_CASE("attribution requires a retained graph") {
  Rng rng(6);
  auto params = linear_params<float>(4, 6, 22, true);
  auto H = testutil::random_normal_tensor<float>(3, 4, rng, false);
  auto fwd = forward_bag(H, params.detached());
  REQUIRE_THROWS_AS(channel_weights(fwd, 0), ValueError);
}

TEST_CASE("single-instance zero-bias bag: signal equals the logit") {
  Rng rng(7);
  auto params = linear_params<double>(8, 6, 23, false);
  auto H = testutil::random_normal_tensor<double>(1, 8, rng, false);
  auto fwd = forward_bag(H, params);
  auto attr = attribute_forward(fwd);
  for (int c = 0; c < 2; ++c) REQUIRE_THAT(attr.L[size_t(c)], WithinAbs(fwd.s.at(0, c), 1e-6));
}

TEST_CASE("zero attention forces zero signal and uniform probability") {
  auto H = Tensor<double>::leaf(3, 4, {1, 2, 3, 4, -1, -2, -3, -4, 0.5, 0.5, 0.5, 0.5}, false);
  auto a = Tensor<double>::leaf(1, 3, {0.0, 0.6, 0.4}, false);  // instance 0 deactivated
  auto params = linear_params<double>(4, 6, 29, false);
  auto emb = bag_embed(H, a);
  auto cls = classify(emb.F, params);
  AbmilForward<double> fwd;
  fwd.H = H;
  fwd.a = a;
  fwd.h_hat = emb.h_hat;
  fwd.F = emb.F;
  fwd.s = cls.s;
  fwd.p_bag = cls.p_bag;
  fwd.K = 3;
  fwd.D = 4;
  auto attr = attribute_forward(fwd);
  REQUIRE(attr.L[0] == 0.0);
  REQUIRE(attr.L[1] == 0.0);
  REQUIRE_THAT(attr.p[0], WithinAbs(0.5, 1e-9));
  REQUIRE_THAT(attr.p[1], WithinAbs(0.5, 1e-9));
}

TEST_CASE("signal totals equal the logit for a zero-bias linear head") {
  Rng rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    const int K = int(rng.uniform_int(1, 16));
    const int D = int(rng.uniform_int(2, 12));
    auto params = linear_params<double>(D, 6, 100 + uint64_t(rep), false);
    auto H = testutil::random_normal_tensor<double>(K, D, rng, false);
    auto fwd = forward_bag(H, params);
    auto attr = attribute_forward(fwd);
    for (int c = 0; c < 2; ++c) {
      double total = 0.0;
      for (int k = 0; k < K; ++k) total += attr.L[size_t(k) * 2 + c];
      const double s_c = fwd.s.at(0, c);
      REQUIRE_THAT(total, WithinAbs(s_c, 1e-5 * std::max(1.0, std::abs(s_c))));
    }
  }
}

TEST_CASE("instance probability rows are distributions, and softmax is monotone") {
  std::vector<double> L;
  for (double t : {0.1, 0.5, 2.0, 5.0, 20.0}) {
    L.push_back(-t);
    L.push_back(t);
  }
  auto p = instance_probs(L, 5, 2);
  double prev = 0.0;
  for (int k = 0; k < 5; ++k) {
    REQUIRE_THAT(p[size_t(k) * 2] + p[size_t(k) * 2 + 1], WithinAbs(1.0, 1e-9));
    REQUIRE(p[size_t(k) * 2 + 1] > prev);
    prev = p[size_t(k) * 2 + 1];
  }
  REQUIRE(prev > 0.999);
}

TEST_CASE("two-class probabilities obey the sigmoid identity") {
  Rng rng(9);
  auto params = linear_params<double>(6, 8, 31, true);
  auto H = testutil::random_normal_tensor<double>(7, 6, rng, false);
  auto attr = attribute_bag(H, params);
  for (int k = 0; k < 7; ++k) {
    const double diff = attr.L[size_t(k) * 2 + 1] - attr.L[size_t(k) * 2 + 0];
    REQUIRE_THAT(attr.p[size_t(k) * 2 + 1], WithinAbs(1.0 / (1.0 + std::exp(-diff)), 1e-9));
  }
}

TEST_CASE("attention normalization closed form and degenerate cases") {
  std::vector<double> a = {0.2, 0.5, 0.8};
  auto n = normalize_attention<double>(a);
  REQUIRE_THAT(n[0], WithinAbs(0.0, 1e-12));
  REQUIRE_THAT(n[1], WithinAbs(0.5, 1e-12));
  REQUIRE_THAT(n[2], WithinAbs(1.0, 1e-12));

  std::vector<double> flat = {0.25, 0.25, 0.25, 0.25};
  for (double v : normalize_attention<double>(flat)) REQUIRE(v == 0.0);

  std::vector<double> one = {1.0};
  REQUIRE(normalize_attention<double>(one)[0] == 0.0);
}

TEST_CASE("attribution is equivariant under instance permutation") {
  Rng rng(10);
  auto params = linear_params<double>(5, 8, 37, true);
  auto H = testutil::random_normal_tensor<double>(6, 5, rng, false);
  const std::vector<int> perm = {4, 1, 5, 0, 3, 2};
  std::vector<double> pv;
  for (int i : perm)
    for (int j = 0; j < 5; ++j) pv.push_back(H.at(i, j));
  auto Hp = Tensor<double>::leaf(6, 5, pv, false);

  auto attr = attribute_bag(H, params);
  auto attr_p = attribute_bag(Hp, params);
  for (int k = 0; k < 6; ++k) {
    const int src = perm[size_t(k)];
    REQUIRE_THAT(attr_p.a_raw[size_t(k)], WithinAbs(attr.a_raw[size_t(src)], 1e-6));
    REQUIRE_THAT(attr_p.a_norm[size_t(k)], WithinAbs(attr.a_norm[size_t(src)], 1e-6));
    for (int c = 0; c < 2; ++c) {
      REQUIRE_THAT(attr_p.L[size_t(k) * 2 + c], WithinAbs(attr.L[size_t(src) * 2 + c], 1e-6));
      REQUIRE_THAT(attr_p.p[size_t(k) * 2 + c], WithinAbs(attr.p[size_t(src) * 2 + c], 1e-6));
    }
  }
}

TEST_CASE("csv rows carry the documented columns") {
  Rng rng(11);
  auto params = linear_params<float>(4, 6, 39, true);
  auto H = testutil::random_normal_tensor<float>(2, 4, rng, false);
  auto attr = attribute_bag(H, params);
  std::ostringstream out;
  write_attribution_csv_rows(out, "bag_x", attr);
  std::istringstream in(out.str());
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    REQUIRE(std::count(line.begin(), line.end(), ',') == 6);
    REQUIRE(line.substr(0, 6) == "bag_x,");
  }
  REQUIRE(rows == 2);
}
