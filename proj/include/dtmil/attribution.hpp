#pragma once

// Per-instance class signals and probabilities derived from an AB-MIL
// forward pass. The channel weights beta are gradients of one class logit
// w.r.t. the weighted instance features, averaged over instances; signals
// are the beta-weighted projections of each weighted feature, and instance
// probabilities are their row-wise softmax. Runs on a retained forward
// graph, outside any training loss.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dtmil/abmil.hpp"
#include "dtmil/tensor.hpp"

namespace dtmil {

template <typename S>
struct InstanceAttribution {
  int K = 0;
  int C = 0;
  std::vector<S> a_raw;   // K attention scores
  std::vector<S> a_norm;  // K min-max normalized scores
  std::vector<S> beta;    // C x D channel weights, row-major
  std::vector<S> L;       // K x C signal strengths
  std::vector<S> p;       // K x C probabilities, rows sum to 1
};

// beta_d = (1/K) sum_i d s_c / d h_hat[i][d], from a dedicated backward of
// the logit itself (not the softmax or the loss).
template <typename S>
std::vector<S> channel_weights(const AbmilForward<S>& fwd, int c) {
  if (c < 0 || c >= fwd.s.cols())
    throw ValueError("channel_weights: class " + std::to_string(c) + " out of range");
  if (!fwd.h_hat.requires_grad())
    throw ValueError("channel_weights: forward graph was not retained (detached parameters)");
  auto root = pick(fwd.s, 0, c);
  zero_grad_graph(root);
  backward(root);
  const int K = fwd.K, D = fwd.D;
  std::vector<S> beta(size_t(D), S(0));
  for (int i = 0; i < K; ++i)
    for (int d = 0; d < D; ++d) beta[d] += fwd.h_hat.grad_at(i, d);
  for (auto& b : beta) b /= S(K);
  return beta;
}

// L[k][c] = beta^c . h_hat_k
template <typename S>
std::vector<S> instance_signals(const AbmilForward<S>& fwd, const std::vector<S>& beta_all) {
  const int K = fwd.K, D = fwd.D, C = fwd.s.cols();
  if (beta_all.size() != size_t(C) * size_t(D))
    throw ShapeError("instance_signals: beta has " + std::to_string(beta_all.size()) +
                     " entries, expected " + std::to_string(size_t(C) * D));
  std::vector<S> L(size_t(K) * C, S(0));
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < C; ++c) {
      S acc = S(0);
      for (int d = 0; d < D; ++d) acc += beta_all[size_t(c) * D + d] * fwd.h_hat.at(k, d);
      L[size_t(k) * C + c] = acc;
    }
  return L;
}

// Row-wise softmax of the K x C signal matrix.
template <typename S>
std::vector<S> instance_probs(const std::vector<S>& L, int K, int C) {
  if (L.size() != size_t(K) * size_t(C))
    throw ShapeError("instance_probs: signal matrix size mismatch");
  std::vector<S> p(L.size());
  for (int k = 0; k < K; ++k) {
    const S* row = L.data() + size_t(k) * C;
    S mx = row[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    S denom = S(0);
    for (int c = 0; c < C; ++c) {
      p[size_t(k) * C + c] = std::exp(row[c] - mx);
      denom += p[size_t(k) * C + c];
    }
    for (int c = 0; c < C; ++c) p[size_t(k) * C + c] /= denom;
  }
  return p;
}

// Min-max rescale to [0,1]; all-equal scores (within 1e-12) map to zeros so
// a flat bag renders as "no highlight" instead of NaN.
template <typename S>
std::vector<S> normalize_attention(std::span<const S> a) {
  if (a.empty()) throw ValueError("normalize_attention: empty score list");
  S lo = a[0], hi = a[0];
  for (S v : a) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<S> out(a.size(), S(0));
  if (double(hi - lo) <= 1e-12) return out;
  for (size_t i = 0; i < a.size(); ++i) out[i] = (a[i] - lo) / (hi - lo);
  return out;
}

template <typename S>
InstanceAttribution<S> attribute_forward(const AbmilForward<S>& fwd) {
  InstanceAttribution<S> attr;
  attr.K = fwd.K;
  attr.C = fwd.s.cols();
  attr.a_raw.assign(fwd.a.values().begin(), fwd.a.values().end());
  attr.a_norm = normalize_attention<S>(attr.a_raw);
  attr.beta.resize(size_t(attr.C) * fwd.D);
  for (int c = 0; c < attr.C; ++c) {
    auto beta_c = channel_weights(fwd, c);
    std::copy(beta_c.begin(), beta_c.end(), attr.beta.begin() + size_t(c) * fwd.D);
  }
  attr.L = instance_signals(fwd, attr.beta);
  attr.p = instance_probs(attr.L, attr.K, attr.C);
  return attr;
}

template <typename S>
InstanceAttribution<S> attribute_bag(const Tensor<S>& H, const AbmilParams<S>& params) {
  return attribute_forward(forward_bag(H, params));
}

// ---------------------------------------------------------------------------
// CSV export: one row per instance, '.' decimal, no separators.
// ---------------------------------------------------------------------------

inline constexpr const char* kAttributionCsvHeader =
    "bag_id,instance_index,a_raw,a_norm,L_neg,L_pos,p_pos";

inline std::string format_number(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename S>
void write_attribution_csv_rows(std::ostream& out, const std::string& bag_id,
                                const InstanceAttribution<S>& attr) {
  if (attr.C != 2)
    throw ValueError("attribution csv export expects 2 classes, got " + std::to_string(attr.C));
  for (int k = 0; k < attr.K; ++k) {
    out << bag_id << ',' << k << ',' << format_number(double(attr.a_raw[k])) << ','
        << format_number(double(attr.a_norm[k])) << ','
        << format_number(double(attr.L[size_t(k) * 2 + 0])) << ','
        << format_number(double(attr.L[size_t(k) * 2 + 1])) << ','
        << format_number(double(attr.p[size_t(k) * 2 + 1])) << '\n';
  }
}

}  // namespace dtmil
