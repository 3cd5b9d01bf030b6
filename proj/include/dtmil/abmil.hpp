#pragma once

// Gated-attention MIL over a bag of instance feature vectors: attention
// scores via a tanh/sigmoid gate, an attention-pooled bag embedding, and a
// classifier head producing class logits. The forward keeps the graph so the
// logits can later be differentiated w.r.t. the weighted instance features.

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtmil/rng.hpp"
#include "dtmil/tensor.hpp"

namespace dtmil {

struct AbmilDims {
  int D = 64;        // instance feature dimension
  int D_att = 128;   // attention hidden dimension
  int C = 2;         // class count
  int head_hidden = 0;  // 0 = affine head; >0 adds one tanh hidden layer
  bool head_bias = true;
};

template <typename S>
struct AbmilParams {
  AbmilDims dims;
  Tensor<S> V1;  // D_att x D
  Tensor<S> V2;  // D_att x D
  Tensor<S> w;   // 1 x D_att
  Tensor<S> Wh;  // head_hidden x D, only when head_hidden > 0
  Tensor<S> bh;  // 1 x head_hidden
  Tensor<S> Wc;  // C x (head_hidden > 0 ? head_hidden : D)
  Tensor<S> bc;  // 1 x C, zero and frozen when !head_bias

  static AbmilParams init(const AbmilDims& dims, Rng& rng) {
    if (dims.D < 1 || dims.D_att < 1 || dims.C < 2)
      throw ValueError("abmil dims: need D >= 1, D_att >= 1, C >= 2");
    AbmilParams p;
    p.dims = dims;
    p.V1 = uniform_fan_in(dims.D_att, dims.D, dims.D, rng);
    p.V2 = uniform_fan_in(dims.D_att, dims.D, dims.D, rng);
    p.w = uniform_fan_in(1, dims.D_att, dims.D_att, rng);
    const int head_in = dims.head_hidden > 0 ? dims.head_hidden : dims.D;
    if (dims.head_hidden > 0) {
      p.Wh = uniform_fan_in(dims.head_hidden, dims.D, dims.D, rng);
      p.bh = uniform_fan_in(1, dims.head_hidden, dims.D, rng);
    }
    p.Wc = uniform_fan_in(dims.C, head_in, head_in, rng);
    p.bc = dims.head_bias ? uniform_fan_in(1, dims.C, head_in, rng)
                          : Tensor<S>::zeros(1, dims.C, false);
    return p;
  }

  std::vector<Tensor<S>> trainable() const {
    std::vector<Tensor<S>> out = {V1, V2, w};
    if (dims.head_hidden > 0) {
      out.push_back(Wh);
      out.push_back(bh);
    }
    out.push_back(Wc);
    if (dims.head_bias) out.push_back(bc);
    return out;
  }

  // Value-copy with requires_grad cleared; evaluation forwards on a detached
  // snapshot build no backprop closures.
  AbmilParams detached() const { return copy_with(false); }

  AbmilParams clone() const { return copy_with(true); }

 private:
  static Tensor<S> uniform_fan_in(int rows, int cols, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    std::vector<S> vals(size_t(rows) * cols);
    for (auto& v : vals) v = S(rng.uniform(-bound, bound));
    return Tensor<S>::leaf(rows, cols, std::move(vals), true);
  }

  AbmilParams copy_with(bool requires_grad) const {
    auto cp = [&](const Tensor<S>& t, bool grad) {
      if (!t.defined()) return Tensor<S>();
      return Tensor<S>::leaf(t.rows(), t.cols(),
                             std::vector<S>(t.values().begin(), t.values().end()), grad);
    };
    AbmilParams p;
    p.dims = dims;
    p.V1 = cp(V1, requires_grad);
    p.V2 = cp(V2, requires_grad);
    p.w = cp(w, requires_grad);
    p.Wh = cp(Wh, requires_grad);
    p.bh = cp(bh, requires_grad);
    p.Wc = cp(Wc, requires_grad);
    p.bc = cp(bc, requires_grad && dims.head_bias);
    return p;
  }
};

// One bag forward pass, with graph handles retained for attribution.
template <typename S>
struct AbmilForward {
  Tensor<S> H;      // K x D input
  Tensor<S> a;      // 1 x K attention scores, sums to 1
  Tensor<S> h_hat;  // K x D weighted instance features a_k * K * h_k
  Tensor<S> F;      // 1 x D bag embedding
  Tensor<S> s;      // 1 x C logits
  Tensor<S> p_bag;  // 1 x C probabilities
  int K = 0;
  int D = 0;
};

// a_k = softmax_k( w^T (tanh(V1 h_k) (*) sigm(V2 h_k)) )
template <typename S>
Tensor<S> attention_scores(const Tensor<S>& H, const AbmilParams<S>& params) {
  if (H.cols() != params.dims.D)
    throw ShapeError("attention_scores: instance dim " + shape_str(H.rows(), H.cols()) +
                     " does not match model D=" + std::to_string(params.dims.D));
  auto z1 = tanh(matmul(H, transpose(params.V1)));     // K x D_att
  auto z2 = sigmoid(matmul(H, transpose(params.V2)));  // K x D_att
  auto gated = mul(z1, z2);
  auto raw = matmul(gated, transpose(params.w));  // K x 1
  return softmax_row(transpose(raw));             // 1 x K
}

template <typename S>
struct BagEmbedding {
  Tensor<S> F;      // 1 x D
  Tensor<S> h_hat;  // K x D
};

// F = sum_k a_k h_k, realized as the row mean of h_hat with
// h_hat_k = a_k * K * h_k so that F = (1/K) sum_k h_hat_k.
template <typename S>
BagEmbedding<S> bag_embed(const Tensor<S>& H, const Tensor<S>& a) {
  if (a.rows() != 1 || a.cols() != H.rows())
    throw ShapeError("bag_embed: weights " + shape_str(a.rows(), a.cols()) +
                     " do not match bag " + shape_str(H.rows(), H.cols()));
  S total = S(0);
  for (S v : a.values()) total += v;
  if (std::abs(double(total) - 1.0) > 1e-4)
    throw ValueError("bag_embed: attention weights sum to " + std::to_string(double(total)) +
                     ", expected 1");
  const int K = H.rows();
  BagEmbedding<S> out;
  out.h_hat = scale_rows(H, scale(a, S(K)));
  out.F = mean(out.h_hat, Axis::rows);
  return out;
}

template <typename S>
struct ClassifierOut {
  Tensor<S> s;      // 1 x C logits
  Tensor<S> p_bag;  // 1 x C probabilities
};

template <typename S>
ClassifierOut<S> classify(const Tensor<S>& F, const AbmilParams<S>& params) {
  Tensor<S> head_in = F;
  if (params.dims.head_hidden > 0)
    head_in = tanh(add(matmul(F, transpose(params.Wh)), params.bh));
  Tensor<S> s = matmul(head_in, transpose(params.Wc));
  if (params.dims.head_bias) s = add(s, params.bc);
  ClassifierOut<S> out;
  out.s = s;
  out.p_bag = softmax_row(s);
  return out;
}

template <typename S>
AbmilForward<S> forward_bag(const Tensor<S>& H, const AbmilParams<S>& params) {
  AbmilForward<S> fwd;
  fwd.H = H;
  fwd.K = H.rows();
  fwd.D = H.cols();
  fwd.a = attention_scores(H, params);
  auto emb = bag_embed(H, fwd.a);
  fwd.h_hat = emb.h_hat;
  fwd.F = emb.F;
  auto cls = classify(emb.F, params);
  fwd.s = cls.s;
  fwd.p_bag = cls.p_bag;
  return fwd;
}

// ---------------------------------------------------------------------------
// Serialization: versioned JSON, values row-major as doubles.
// ---------------------------------------------------------------------------

inline constexpr int kParamsFormatVersion = 1;

template <typename S>
nlohmann::json params_to_json(const AbmilParams<S>& p) {
  nlohmann::json tensors = nlohmann::json::object();
  auto put = [&](const std::string& name, const Tensor<S>& t) {
    if (!t.defined()) return;
    std::vector<double> vals(t.values().begin(), t.values().end());
    tensors[name] = {{"shape", {t.rows(), t.cols()}}, {"values", vals}};
  };
  put("V1", p.V1);
  put("V2", p.V2);
  put("w", p.w);
  if (p.dims.head_hidden > 0) {
    put("Wh", p.Wh);
    put("bh", p.bh);
  }
  put("Wc", p.Wc);
  if (p.dims.head_bias) put("bc", p.bc);
  return {{"format_version", kParamsFormatVersion},
          {"dims", {{"D", p.dims.D}, {"D_att", p.dims.D_att}, {"C", p.dims.C}}},
          {"tensors", tensors}};
}

template <typename S>
AbmilParams<S> params_from_json(const nlohmann::json& j) {
  if (!j.contains("format_version") || j["format_version"].get<int>() != kParamsFormatVersion)
    throw ValueError("abmil params: unsupported or missing format_version");
  AbmilParams<S> p;
  p.dims.D = j.at("dims").at("D").get<int>();
  p.dims.D_att = j.at("dims").at("D_att").get<int>();
  p.dims.C = j.at("dims").at("C").get<int>();
  const auto& tensors = j.at("tensors");
  auto get = [&](const std::string& name, int rows, int cols, bool grad) {
    const auto& tj = tensors.at(name);
    const int r = tj.at("shape").at(0).get<int>();
    const int c = tj.at("shape").at(1).get<int>();
    if (r != rows || c != cols)
      throw ValueError("abmil params: tensor " + name + " has shape " + shape_str(r, c) +
                       ", expected " + shape_str(rows, cols));
    auto vals = tj.at("values").get<std::vector<double>>();
    if (vals.size() != size_t(r) * size_t(c))
      throw ValueError("abmil params: tensor " + name + " value count mismatch");
    std::vector<S> sv(vals.begin(), vals.end());
    return Tensor<S>::leaf(r, c, std::move(sv), grad);
  };
  p.dims.head_hidden = tensors.contains("Wh") ? tensors.at("Wh").at("shape").at(0).get<int>() : 0;
  p.dims.head_bias = tensors.contains("bc");
  p.V1 = get("V1", p.dims.D_att, p.dims.D, true);
  p.V2 = get("V2", p.dims.D_att, p.dims.D, true);
  p.w = get("w", 1, p.dims.D_att, true);
  const int head_in = p.dims.head_hidden > 0 ? p.dims.head_hidden : p.dims.D;
  if (p.dims.head_hidden > 0) {
    p.Wh = get("Wh", p.dims.head_hidden, p.dims.D, true);
    p.bh = get("bh", 1, p.dims.head_hidden, true);
  }
  p.Wc = get("Wc", p.dims.C, head_in, true);
  p.bc = p.dims.head_bias ? get("bc", 1, p.dims.C, true) : Tensor<S>::zeros(1, p.dims.C, false);
  return p;
}

template <typename S>
void save_params(const AbmilParams<S>& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValueError("save_params: cannot open " + path);
  out << params_to_json(p).dump(2) << "\n";
}

template <typename S>
AbmilParams<S> load_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValueError("load_params: cannot open " + path);
  nlohmann::json j;
  in >> j;
  return params_from_json<S>(j);
}

}  // namespace dtmil
