#pragma once

// Dense 2-D tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a heap node; ops build the graph eagerly
// and backward(root) runs reverse topological accumulation from a scalar
// root. Gradients accumulate additively across backward calls until
// zero_grad_graph resets them, so two backwards without a reset double every
// gradient. Graphs are per-bag and single-threaded; parameters are leaves
// whose values may be updated in place between graphs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dtmil/errors.hpp"

namespace dtmil {

namespace detail {

template <typename S>
struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<S> val;
  std::vector<S> grad;  // empty means all-zero / never written
  std::vector<S> tmp;   // per-backward scratch, committed into grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // scatters this->tmp into parents' tmp

  size_t size() const { return val.size(); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), S(0));
  }
  void ensure_tmp() {
    if (tmp.size() != val.size()) tmp.assign(val.size(), S(0));
  }
};

}  // namespace detail

inline std::string shape_str(int r, int c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename S>
class Tensor {
 public:
  using NodeT = detail::Node<S>;

  Tensor() = default;

  static Tensor leaf(int rows, int cols, std::vector<S> vals, bool requires_grad = false) {
    check_dims(rows, cols);
    if (vals.size() != size_t(rows) * size_t(cols))
      throw ShapeError("leaf: value count " + std::to_string(vals.size()) +
                       " does not match shape " + shape_str(rows, cols));
    Tensor t;
    t.n_ = std::make_shared<NodeT>();
    t.n_->rows = rows;
    t.n_->cols = cols;
    t.n_->val = std::move(vals);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(int rows, int cols, S v, bool requires_grad = false) {
    check_dims(rows, cols);
    return leaf(rows, cols, std::vector<S>(size_t(rows) * size_t(cols), v), requires_grad);
  }

  static Tensor zeros(int rows, int cols, bool requires_grad = false) {
    return full(rows, cols, S(0), requires_grad);
  }

  static Tensor scalar(S v, bool requires_grad = false) { return leaf(1, 1, {v}, requires_grad); }

  bool defined() const { return n_ != nullptr; }
  int rows() const { return n_->rows; }
  int cols() const { return n_->cols; }
  size_t size() const { return n_->val.size(); }
  bool requires_grad() const { return n_->requires_grad; }

  S at(int i, int j) const { return n_->val[size_t(i) * n_->cols + j]; }
  S& at(int i, int j) { return n_->val[size_t(i) * n_->cols + j]; }
  S item() const {
    if (rows() != 1 || cols() != 1)
      throw ShapeError("item: tensor is " + shape_str(rows(), cols()) + ", expected 1x1");
    return n_->val[0];
  }

  std::span<const S> values() const { return n_->val; }
  std::span<S> values() { return n_->val; }

  // Gradient element; zero when no backward has written this node yet.
  S grad_at(int i, int j) const {
    if (n_->grad.empty()) return S(0);
    return n_->grad[size_t(i) * n_->cols + j];
  }
  std::span<const S> grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  bool has_grad() const { return !n_->grad.empty(); }

  void zero_grad() {
    n_->grad.clear();
    n_->tmp.clear();
  }

  NodeT* node() const { return n_.get(); }
  const std::shared_ptr<NodeT>& handle() const { return n_; }

  static Tensor wrap(std::shared_ptr<NodeT> n) {
    Tensor t;
    t.n_ = std::move(n);
    return t;
  }

 private:
  static void check_dims(int rows, int cols) {
    if (rows < 1 || cols < 1)
      throw ShapeError("tensor shape " + shape_str(rows, cols) + " must have rows,cols >= 1");
  }

  std::shared_ptr<NodeT> n_;
};

namespace detail {

// Builds an op node. Parents and the backprop closure are stored only when a
// parent requires grad, so detached subgraphs stay plain value buffers.
template <typename S>
Tensor<S> make_op(int rows, int cols, std::vector<S> vals,
                  std::initializer_list<Tensor<S>> parents,
                  std::function<void(Node<S>&)> backprop) {
  auto t = Tensor<S>::leaf(rows, cols, std::move(vals));
  bool req = false;
  for (const auto& p : parents) req = req || p.requires_grad();
  if (req) {
    t.node()->requires_grad = true;
    for (const auto& p : parents) t.node()->parents.push_back(p.handle());
    t.node()->backprop = std::move(backprop);
  }
  return t;
}

template <typename S>
void topo_collect(Node<S>* root, std::vector<Node<S>*>& order) {
  // Iterative postorder; only grad-requiring nodes participate.
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, size_t>> stack;
  if (!root->requires_grad) return;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<S>* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Reverse-mode accumulation from a scalar root. The pass computes this-call
// gradients in scratch buffers and commits them additively, so repeated
// backwards add up uniformly for leaves and intermediates alike.
template <typename S>
void backward(const Tensor<S>& root) {
  if (root.rows() != 1 || root.cols() != 1)
    throw ShapeError("backward: root is " + shape_str(root.rows(), root.cols()) +
                     ", expected a 1x1 scalar");
  if (!root.requires_grad()) return;
  std::vector<detail::Node<S>*> order;
  detail::topo_collect(root.node(), order);
  for (auto* n : order) n->tmp.clear();
  root.node()->ensure_tmp();
  root.node()->tmp[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<S>* n = *it;
    if (n->tmp.empty()) continue;  // unreached this pass
    if (n->backprop) n->backprop(*n);
  }
  for (auto* n : order) {
    if (n->tmp.empty()) continue;
    n->ensure_grad();
    for (size_t i = 0; i < n->tmp.size(); ++i) n->grad[i] += n->tmp[i];
    n->tmp.clear();
  }
}

// Clears accumulated gradients on every grad-requiring node reachable from root.
template <typename S>
void zero_grad_graph(const Tensor<S>& root) {
  if (!root.requires_grad()) return;
  std::vector<detail::Node<S>*> order;
  detail::topo_collect(root.node(), order);
  for (auto* n : order) {
    n->grad.clear();
    n->tmp.clear();
  }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& A, const Tensor<S>& B) {
  if (A.cols() != B.rows())
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(A.rows(), A.cols()) +
                     " vs " + shape_str(B.rows(), B.cols()));
  const int m = A.rows(), k = A.cols(), n = B.cols();
  std::vector<S> out(size_t(m) * n, S(0));
  const S* a = A.values().data();
  const S* b = B.values().data();
  for (int i = 0; i < m; ++i) {
    S* orow = out.data() + size_t(i) * n;
    for (int t = 0; t < k; ++t) {
      const S av = a[size_t(i) * k + t];
      const S* brow = b + size_t(t) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  auto an = A.node();
  auto bn = B.node();
  return detail::make_op<S>(
      m, n, std::move(out), {A, B}, [an, bn, m, k, n](detail::Node<S>& self) {
        const S* g = self.tmp.data();
        if (an->requires_grad) {
          an->ensure_tmp();
          // dA = g * B^T
          for (int i = 0; i < m; ++i)
            for (int t = 0; t < k; ++t) {
              S acc = S(0);
              const S* grow = g + size_t(i) * n;
              const S* brow = bn->val.data() + size_t(t) * n;
              for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
              an->tmp[size_t(i) * k + t] += acc;
            }
        }
        if (bn->requires_grad) {
          bn->ensure_tmp();
          // dB = A^T * g
          for (int t = 0; t < k; ++t)
            for (int i = 0; i < m; ++i) {
              const S av = an->val[size_t(i) * k + t];
              const S* grow = g + size_t(i) * n;
              S* brow = bn->tmp.data() + size_t(t) * n;
              for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
        }
      });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& X) {
  const int r = X.rows(), c = X.cols();
  std::vector<S> out(size_t(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[size_t(j) * r + i] = X.at(i, j);
  auto xn = X.node();
  return detail::make_op<S>(c, r, std::move(out), {X}, [xn, r, c](detail::Node<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_tmp();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) xn->tmp[size_t(i) * c + j] += self.tmp[size_t(j) * r + i];
  });
}

namespace detail {

template <typename S>
void check_same_shape(const char* op, const Tensor<S>& A, const Tensor<S>& B) {
  if (A.rows() != B.rows() || A.cols() != B.cols())
    throw ShapeError(std::string(op) + ": shapes differ: " + shape_str(A.rows(), A.cols()) +
                     " vs " + shape_str(B.rows(), B.cols()));
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& A, const Tensor<S>& B) {
  detail::check_same_shape("add", A, B);
  std::vector<S> out(A.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = A.values()[i] + B.values()[i];
  auto an = A.node();
  auto bn = B.node();
  return detail::make_op<S>(A.rows(), A.cols(), std::move(out), {A, B},
                            [an, bn](detail::Node<S>& self) {
                              if (an->requires_grad) {
                                an->ensure_tmp();
                                for (size_t i = 0; i < self.tmp.size(); ++i) an->tmp[i] += self.tmp[i];
                              }
                              if (bn->requires_grad) {
                                bn->ensure_tmp();
                                for (size_t i = 0; i < self.tmp.size(); ++i) bn->tmp[i] += self.tmp[i];
                              }
                            });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& A, const Tensor<S>& B) {
  detail::check_same_shape("sub", A, B);
  std::vector<S> out(A.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = A.values()[i] - B.values()[i];
  auto an = A.node();
  auto bn = B.node();
  return detail::make_op<S>(A.rows(), A.cols(), std::move(out), {A, B},
                            [an, bn](detail::Node<S>& self) {
                              if (an->requires_grad) {
                                an->ensure_tmp();
                                for (size_t i = 0; i < self.tmp.size(); ++i) an->tmp[i] += self.tmp[i];
                              }
                              if (bn->requires_grad) {
                                bn->ensure_tmp();
                                for (size_t i = 0; i < self.tmp.size(); ++i) bn->tmp[i] -= self.tmp[i];
                              }
                            });
}

// Hadamard product.
template <typename S>
Tensor<S> mul(const Tensor<S>& A, const Tensor<S>& B) {
  detail::check_same_shape("mul", A, B);
  std::vector<S> out(A.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = A.values()[i] * B.values()[i];
  auto an = A.node();
  auto bn = B.node();
  return detail::make_op<S>(A.rows(), A.cols(), std::move(out), {A, B},
                            [an, bn](detail::Node<S>& self) {
                              if (an->requires_grad) {
                                an->ensure_tmp();
                                for (size_t i = 0; i < self.tmp.size(); ++i)
                                  an->tmp[i] += bn->val[i] * self.tmp[i];
                              }
                              if (bn->requires_grad) {
                                bn->ensure_tmp();
                                for (size_t i = 0; i < self.tmp.size(); ++i)
                                  bn->tmp[i] += an->val[i] * self.tmp[i];
                              }
                            });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& X, S c) {
  std::vector<S> out(X.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = c * X.values()[i];
  auto xn = X.node();
  return detail::make_op<S>(X.rows(), X.cols(), std::move(out), {X},
                            [xn, c](detail::Node<S>& self) {
                              if (!xn->requires_grad) return;
                              xn->ensure_tmp();
                              for (size_t i = 0; i < self.tmp.size(); ++i)
                                xn->tmp[i] += c * self.tmp[i];
                            });
}

namespace detail {

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary_op(const Tensor<S>& X, Fwd fwd, Bwd dydx_from_xy) {
  std::vector<S> out(X.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(X.values()[i]);
  auto xn = X.node();
  return make_op<S>(X.rows(), X.cols(), std::move(out), {X},
                    [xn, dydx_from_xy](Node<S>& self) {
                      if (!xn->requires_grad) return;
                      xn->ensure_tmp();
                      for (size_t i = 0; i < self.tmp.size(); ++i)
                        xn->tmp[i] += dydx_from_xy(xn->val[i], self.val[i]) * self.tmp[i];
                    });
}

}  // namespace detail

template <typename S>
Tensor<S> tanh(const Tensor<S>& X) {
  return detail::unary_op(
      X, [](S x) { return std::tanh(x); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& X) {
  return detail::unary_op(
      X, [](S x) { return S(1) / (S(1) + std::exp(-x)); }, [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& X) {
  return detail::unary_op(
      X, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& X) {
  for (S v : X.values())
    if (!(v > S(0))) throw ValueError("log: input must be strictly positive, got " + std::to_string(double(v)));
  return detail::unary_op(
      X, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

// Numerically stable softmax over a single row.
template <typename S>
Tensor<S> softmax_row(const Tensor<S>& X) {
  if (X.rows() != 1)
    throw ShapeError("softmax_row: expected a 1xn row, got " + shape_str(X.rows(), X.cols()));
  const int n = X.cols();
  S mx = X.values()[0];
  for (S v : X.values()) mx = std::max(mx, v);
  std::vector<S> out(static_cast<size_t>(n));
  S denom = S(0);
  for (int j = 0; j < n; ++j) {
    out[j] = std::exp(X.values()[j] - mx);
    denom += out[j];
  }
  for (int j = 0; j < n; ++j) out[j] /= denom;
  auto xn = X.node();
  return detail::make_op<S>(1, n, std::move(out), {X}, [xn, n](detail::Node<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_tmp();
    S dot = S(0);
    for (int j = 0; j < n; ++j) dot += self.tmp[j] * self.val[j];
    for (int j = 0; j < n; ++j) xn->tmp[j] += self.val[j] * (self.tmp[j] - dot);
  });
}

enum class Axis { rows = 0, cols = 1 };

namespace detail {

template <typename S>
Tensor<S> reduce_impl(const Tensor<S>& X, Axis axis, bool take_mean) {
  const int r = X.rows(), c = X.cols();
  const bool over_rows = axis == Axis::rows;
  const int out_r = over_rows ? 1 : r;
  const int out_c = over_rows ? c : 1;
  const S denom = take_mean ? S(over_rows ? r : c) : S(1);
  std::vector<S> out(size_t(out_r) * out_c, S(0));
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[over_rows ? j : i] += X.at(i, j);
  if (take_mean)
    for (auto& v : out) v /= denom;
  auto xn = X.node();
  return make_op<S>(out_r, out_c, std::move(out), {X},
                    [xn, r, c, over_rows, denom](Node<S>& self) {
                      if (!xn->requires_grad) return;
                      xn->ensure_tmp();
                      for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j)
                          xn->tmp[size_t(i) * c + j] += self.tmp[over_rows ? j : i] / denom;
                    });
}

}  // namespace detail

// sum/mean collapse one axis: Axis::rows yields 1xC, Axis::cols yields Rx1.
template <typename S>
Tensor<S> sum(const Tensor<S>& X, Axis axis) {
  return detail::reduce_impl(X, axis, false);
}

template <typename S>
Tensor<S> mean(const Tensor<S>& X, Axis axis) {
  return detail::reduce_impl(X, axis, true);
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& X) {
  return sum(sum(X, Axis::rows), Axis::cols);
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& X) {
  return mean(mean(X, Axis::rows), Axis::cols);
}

// Scales row i of H by a[0][i]; `a` is a 1xK row, H is KxD.
template <typename S>
Tensor<S> scale_rows(const Tensor<S>& H, const Tensor<S>& a) {
  if (a.rows() != 1 || a.cols() != H.rows())
    throw ShapeError("scale_rows: weight row " + shape_str(a.rows(), a.cols()) +
                     " does not match " + shape_str(H.rows(), H.cols()));
  const int K = H.rows(), D = H.cols();
  std::vector<S> out(size_t(K) * D);
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < D; ++j) out[size_t(i) * D + j] = a.at(0, i) * H.at(i, j);
  auto hn = H.node();
  auto an = a.node();
  return detail::make_op<S>(K, D, std::move(out), {H, a}, [hn, an, K, D](detail::Node<S>& self) {
    if (hn->requires_grad) {
      hn->ensure_tmp();
      for (int i = 0; i < K; ++i)
        for (int j = 0; j < D; ++j)
          hn->tmp[size_t(i) * D + j] += an->val[i] * self.tmp[size_t(i) * D + j];
    }
    if (an->requires_grad) {
      an->ensure_tmp();
      for (int i = 0; i < K; ++i) {
        S acc = S(0);
        for (int j = 0; j < D; ++j) acc += hn->val[size_t(i) * D + j] * self.tmp[size_t(i) * D + j];
        an->tmp[i] += acc;
      }
    }
  });
}

// Extracts element (i, j) as a 1x1 tensor; used to differentiate one logit.
template <typename S>
Tensor<S> pick(const Tensor<S>& X, int i, int j) {
  if (i < 0 || i >= X.rows() || j < 0 || j >= X.cols())
    throw ShapeError("pick: index (" + std::to_string(i) + "," + std::to_string(j) +
                     ") out of range for " + shape_str(X.rows(), X.cols()));
  auto xn = X.node();
  const int c = X.cols();
  return detail::make_op<S>(1, 1, {X.at(i, j)}, {X}, [xn, i, j, c](detail::Node<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_tmp();
    xn->tmp[size_t(i) * c + j] += self.tmp[0];
  });
}

inline constexpr double kBceClamp = 1e-7;

// Binary cross entropy of a scalar probability against a 0/1 label. The
// probability is clamped to [kBceClamp, 1 - kBceClamp]; the clamp saturates
// (zero gradient) outside that band.
template <typename S>
Tensor<S> bce_loss(const Tensor<S>& p, int y) {
  if (y != 0 && y != 1) throw ValueError("bce_loss: label must be 0 or 1, got " + std::to_string(y));
  if (p.rows() != 1 || p.cols() != 1)
    throw ShapeError("bce_loss: probability is " + shape_str(p.rows(), p.cols()) + ", expected 1x1");
  const S eps = S(kBceClamp);
  const S raw = p.item();
  const S pc = std::clamp(raw, eps, S(1) - eps);
  const S loss = y == 1 ? -std::log(pc) : -std::log(S(1) - pc);
  auto pn = p.node();
  const bool clamped = raw < eps || raw > S(1) - eps;
  return detail::make_op<S>(1, 1, {loss}, {p}, [pn, pc, y, clamped](detail::Node<S>& self) {
    if (!pn->requires_grad || clamped) return;
    pn->ensure_tmp();
    pn->tmp[0] += (pc - S(y)) / (pc * (S(1) - pc)) * self.tmp[0];
  });
}

}  // namespace dtmil
