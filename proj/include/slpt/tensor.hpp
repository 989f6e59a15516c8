// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with tape-free reverse-mode differentiation.
//
// Every op allocates its result eagerly and, when any input requires a
// gradient, records a closure that pushes the output gradient back into
// its inputs. `backward()` topologically sorts the reachable graph from a
// scalar and runs those closures in reverse order.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "slpt/errors.hpp"

namespace slpt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first touched by backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// Multiply-accumulate sink for the instrumented cost counter.
inline std::uint64_t*& mac_sink() {
  thread_local std::uint64_t* sink = nullptr;
  return sink;
}

inline void count_macs(std::uint64_t n) {
  if (auto* s = mac_sink()) *s += n;
}

}  // namespace detail

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Counts scalar multiplies performed by matmul-class ops (matmul, linear,
/// conv2d) while alive. Biases, scaling, softmax and normalization are not
/// counted.
class MacCounter {
 public:
  MacCounter() : previous_(detail::mac_sink()) { detail::mac_sink() = &count_; }
  ~MacCounter() { detail::mac_sink() = previous_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t count() const { return count_; }
  void reset() { count_ = 0; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* previous_;
};

/// Shared handle to a graph node. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor scalar(double v) { return from({}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// In-place access for optimizers and initializers; never use on
  /// tensors that already feed a recorded graph.
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  /// Value copy with no graph history.
  Tensor detach() const { return from(shape(), node_->data); }

  const detail::NodePtr& node() const { return node_; }

 private:
  detail::NodePtr node_;
};

namespace detail {

using BackwardFn = std::function<void(Node&)>;

inline Tensor make_op(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                      BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs && grad_mode()) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline Tensor make_op(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                      BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs && grad_mode()) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of input i, or nullptr when it does not take gradients.
inline double* input_grad(Node& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? in.ensure_grad().data() : nullptr;
}

// Sum that depends only on the multiset of values (sorts `terms` in place).
inline double sorted_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double v : terms) s += v;
  return s;
}

inline void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward pass

/// Accumulates d(loss)/d(t) into every reachable tensor with
/// requires_grad. Leaf gradients accumulate across calls until cleared.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* n : order) {
    if (n->backward) {
      n->grad.assign(n->data.size(), 0.0);
    } else {
      n->ensure_grad();
    }
  }
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

// b broadcasts over a when b's shape is a suffix of a's shape.
inline std::size_t broadcast_inner(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok) {
    throw DimensionError(std::string(op) + ": cannot combine " + shape_str(sa) + " and " +
                         shape_str(sb));
  }
  return b.numel();
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t inner = detail::broadcast_inner(a, b, "add");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % inner];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [inner](detail::Node& self) {
    const auto& g = self.grad;
    if (double* ga = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (double* gb = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t inner = detail::broadcast_inner(a, b, "sub");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i % inner];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [inner](detail::Node& self) {
    const auto& g = self.grad;
    if (double* ga = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (double* gb = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] -= g[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t inner = detail::broadcast_inner(a, b, "mul");
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % inner];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [inner](detail::Node& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->data;
    const auto& bv = self.inputs[1]->data;
    if (double* ga = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i % inner];
    }
    if (double* gb = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  for (double& v : out) v *= s;
  return detail::make_op(a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    double* ga = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += s * self.grad[i];
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return detail::make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    double* ga = detail::input_grad(self, 0);
    const auto& x = self.inputs[0]->data;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > 0.0) ga[i] += self.grad[i];
    }
  });
}

/// tanh approximation of GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  std::vector<double> out(a.values());
  for (double& x : out) x = 0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x)));
  return detail::make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    double* ga = detail::input_grad(self, 0);
    const auto& xs = self.inputs[0]->data;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double x = xs[i];
      const double u = kC * (x + 0.044715 * x * x * x);
      const double t = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
      ga[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
    }
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
  return detail::make_op(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    double* ga = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      const double y = self.data[i];
      ga[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::make_op({}, {s}, {a}, [](detail::Node& self) {
    double* ga = detail::input_grad(self, 0);
    const double g = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) ga[i] += g;
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Euclidean norm over the last dimension. The subgradient at 0 is 0.
inline Tensor row_norm(const Tensor& a) {
  if (a.ndim() == 0) throw DimensionError("row_norm on a scalar");
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.numel() / width;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  std::vector<double> out(rows);
  const auto& x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < width; ++c) s += x[r * width + c] * x[r * width + c];
    out[r] = std::sqrt(s);
  }
  return detail::make_op(std::move(out_shape), std::move(out), {a},
                         [rows, width](detail::Node& self) {
                           double* ga = detail::input_grad(self, 0);
                           const auto& x = self.inputs[0]->data;
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double n = self.data[r];
                             if (n == 0.0) continue;
                             const double g = self.grad[r] / n;
                             for (std::size_t c = 0; c < width; ++c) {
                               ga[r * width + c] += g * x[r * width + c];
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return detail::make_op(std::move(shape), a.values(), {a}, [](detail::Node& self) {
    double* ga = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

/// Swaps the last two dimensions.
inline Tensor transpose(const Tensor& a) {
  if (a.ndim() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  const std::size_t rows = a.shape()[a.ndim() - 2];
  const std::size_t cols = a.shape().back();
  const std::size_t batch = a.numel() / (rows * cols);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  std::vector<double> out(a.numel());
  const auto& x = a.values();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t off = b * rows * cols;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[off + j * rows + i] = x[off + i * cols + j];
  }
  return detail::make_op(std::move(shape), std::move(out), {a},
                         [batch, rows, cols](detail::Node& self) {
                           double* ga = detail::input_grad(self, 0);
                           for (std::size_t b = 0; b < batch; ++b) {
                             const std::size_t off = b * rows * cols;
                             for (std::size_t i = 0; i < rows; ++i)
                               for (std::size_t j = 0; j < cols; ++j)
                                 ga[off + i * cols + j] += self.grad[off + j * rows + i];
                           }
                         });
}

/// [N, H*C] -> [H, N, C].
inline Tensor split_heads(const Tensor& a, std::size_t heads) {
  if (a.ndim() != 2 || heads == 0 || a.dim(1) % heads != 0) {
    throw DimensionError("split_heads: " + shape_str(a.shape()) + " into " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t n = a.dim(0);
  const std::size_t c = a.dim(1) / heads;
  std::vector<double> out(a.numel());
  const auto& x = a.values();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) out[(h * n + i) * c + k] = x[i * heads * c + h * c + k];
  return detail::make_op({heads, n, c}, std::move(out), {a}, [heads, n, c](detail::Node& self) {
    double* ga = detail::input_grad(self, 0);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k)
          ga[i * heads * c + h * c + k] += self.grad[(h * n + i) * c + k];
  });
}

/// [H, N, C] -> [N, H*C].
inline Tensor merge_heads(const Tensor& a) {
  if (a.ndim() != 3) throw DimensionError("merge_heads: " + shape_str(a.shape()));
  const std::size_t heads = a.dim(0);
  const std::size_t n = a.dim(1);
  const std::size_t c = a.dim(2);
  std::vector<double> out(a.numel());
  const auto& x = a.values();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) out[i * heads * c + h * c + k] = x[(h * n + i) * c + k];
  return detail::make_op({n, heads * c}, std::move(out), {a}, [heads, n, c](detail::Node& self) {
    double* ga = detail::input_grad(self, 0);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k)
          ga[(h * n + i) * c + k] += self.grad[i * heads * c + h * c + k];
  });
}

/// Concatenates along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat axis out of range for " + shape_str(s0));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) throw DimensionError("concat: " + shape_str(s0) + " vs " + shape_str(s));
    total += s[axis];
  }
  const std::size_t outer = shape_numel(Shape(s0.begin(), s0.begin() + axis));
  const std::size_t inner = shape_numel(Shape(s0.begin() + axis + 1, s0.end()));
  Shape shape = s0;
  shape[axis] = total;
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    offsets.push_back(off);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.values().begin() + o * w, w, out.begin() + o * total * inner + off);
    off += w;
  }
  return detail::make_op(std::move(shape), std::move(out), parts,
                         [outer, inner, total, offsets](detail::Node& self) {
                           for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                             double* gk = detail::input_grad(self, k);
                             if (!gk) continue;
                             const std::size_t w = self.inputs[k]->data.size() / outer;
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t i = 0; i < w; ++i)
                                 gk[o * w + i] += self.grad[o * total * inner + offsets[k] + i];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product over the last two dims. Leading (batch) dims must match,
/// or one operand may be a plain matrix shared across the other's batch.
/// With `order_invariant`, each output sums its k products in sorted
/// order, so permuting the contraction index leaves the result bit-equal.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool order_invariant = false) {
  auto fail = [&] {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  };
  if (a.ndim() < 2 || b.ndim() < 2) fail();
  const std::size_t m = a.shape()[a.ndim() - 2];
  const std::size_t k = a.shape().back();
  const std::size_t k2 = b.shape()[b.ndim() - 2];
  const std::size_t n = b.shape().back();
  if (k != k2) fail();
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b) fail();
  const Shape& batch_shape = batch_a.empty() ? batch_b : batch_a;
  const std::size_t batch = shape_numel(batch_shape);
  const std::size_t sa = batch_a.empty() ? 0 : m * k;
  const std::size_t sb = batch_b.empty() ? 0 : k * n;

  Shape shape = batch_shape;
  shape.push_back(m);
  shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t t = 0; t < batch; ++t) {
    const double* ap = av + t * sa;
    const double* bp = bv + t * sb;
    double* cp = out.data() + t * m * n;
    if (order_invariant) {
      std::vector<double> terms(k);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          for (std::size_t p = 0; p < k; ++p) terms[p] = ap[i * k + p] * bp[p * n + j];
          cp[i * n + j] = detail::sorted_sum(terms);
        }
      continue;
    }
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double s = ap[i * k + p];
        for (std::size_t j = 0; j < n; ++j) cp[i * n + j] += s * bp[p * n + j];
      }
  }
  detail::count_macs(static_cast<std::uint64_t>(batch) * m * k * n);
  return detail::make_op(std::move(shape), std::move(out), {a, b},
                         [=](detail::Node& self) {
                           const double* av = self.inputs[0]->data.data();
                           const double* bv = self.inputs[1]->data.data();
                           double* ga = detail::input_grad(self, 0);
                           double* gb = detail::input_grad(self, 1);
                           for (std::size_t t = 0; t < batch; ++t) {
                             const double* g = self.grad.data() + t * m * n;
                             if (ga) {
                               const double* bp = bv + t * sb;
                               double* gp = ga + t * sa;
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t p = 0; p < k; ++p) {
                                   double s = 0.0;
                                   for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bp[p * n + j];
                                   gp[i * k + p] += s;
                                 }
                             }
                             if (gb) {
                               const double* ap = av + t * sa;
                               double* gp = gb + t * sb;
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t p = 0; p < k; ++p) {
                                   const double s = ap[i * k + p];
                                   for (std::size_t j = 0; j < n; ++j) gp[p * n + j] += s * g[i * n + j];
                                 }
                             }
                           }
                         });
}

/// x·Wᵀ + b over the last dim of x. W is [out, in]; b is [out] or undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  if (x.ndim() < 1 || w.ndim() != 2 || x.shape().back() != w.dim(1) ||
      (b.defined() && (b.ndim() != 1 || b.dim(0) != w.dim(0)))) {
    throw DimensionError("linear: x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()) +
                         (b.defined() ? ", b " + shape_str(b.shape()) : std::string()));
  }
  const std::size_t in = w.dim(1);
  const std::size_t outd = w.dim(0);
  const std::size_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = outd;
  std::vector<double> out(rows * outd);
  const double* xv = x.values().data();
  const double* wv = w.values().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < outd; ++o) {
      double s = b.defined() ? b[o] : 0.0;
      const double* xr = xv + r * in;
      const double* wr = wv + o * in;
      for (std::size_t i = 0; i < in; ++i) s += xr[i] * wr[i];
      out[r * outd + o] = s;
    }
  detail::count_macs(static_cast<std::uint64_t>(rows) * in * outd);
  auto fn = [=](detail::Node& self) {
    const double* xv = self.inputs[0]->data.data();
    const double* wv = self.inputs[1]->data.data();
    double* gx = detail::input_grad(self, 0);
    double* gw = detail::input_grad(self, 1);
    double* gb = self.inputs.size() > 2 ? detail::input_grad(self, 2) : nullptr;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < outd; ++o) {
        const double g = self.grad[r * outd + o];
        if (g == 0.0) continue;
        if (gx) {
          double* gxr = gx + r * in;
          const double* wr = wv + o * in;
          for (std::size_t i = 0; i < in; ++i) gxr[i] += g * wr[i];
        }
        if (gw) {
          double* gwr = gw + o * in;
          const double* xr = xv + r * in;
          for (std::size_t i = 0; i < in; ++i) gwr[i] += g * xr[i];
        }
        if (gb) gb[o] += g;
      }
  };
  if (b.defined()) return detail::make_op(std::move(shape), std::move(out), {x, w, b}, fn);
  return detail::make_op(std::move(shape), std::move(out), {x, w}, fn);
}

// ---------------------------------------------------------------------------
// Normalization

/// Row-wise softmax over the last dimension, max-shifted. The normalizer is
/// summed in sorted order, so permuting a row permutes its output exactly.
inline Tensor softmax_rows(const Tensor& a) {
  if (a.ndim() == 0 || a.shape().back() == 0) {
    throw DimensionError("softmax_rows on " + shape_str(a.shape()));
  }
  detail::check_finite(a.data(), "softmax_rows");
  const std::size_t width = a.shape().back();
  const std::size_t rows = a.numel() / width;
  std::vector<double> out(a.numel());
  const auto& x = a.values();
  std::vector<double> terms(width);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * width;
    double* yr = out.data() + r * width;
    const double mx = *std::max_element(xr, xr + width);
    for (std::size_t c = 0; c < width; ++c) terms[c] = yr[c] = std::exp(xr[c] - mx);
    const double s = detail::sorted_sum(terms);
    for (std::size_t c = 0; c < width; ++c) yr[c] /= s;
  }
  return detail::make_op(a.shape(), std::move(out), {a}, [rows, width](detail::Node& self) {
    double* ga = detail::input_grad(self, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * width;
      const double* g = self.grad.data() + r * width;
      double dot = 0.0;
      for (std::size_t c = 0; c < width; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < width; ++c) ga[r * width + c] += y[c] * (g[c] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes the last dimension to zero mean and unit (biased) variance,
/// then applies gamma and beta.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        double eps = kLayerNormEps) {
  if (x.ndim() == 0 || gamma.shape() != Shape{x.shape().back()} || beta.shape() != gamma.shape()) {
    throw DimensionError("layernorm: x " + shape_str(x.shape()) + ", gamma " +
                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.numel() / width;
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * width;
    double mu = 0.0;
    for (std::size_t c = 0; c < width; ++c) mu += xr[c];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t c = 0; c < width; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(width);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < width; ++c) {
      const double h = (xr[c] - mu) * inv_std[r];
      xhat[r * width + c] = h;
      out[r * width + c] = h * gv[c] + bv[c];
    }
  }
  return detail::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, width, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& gv = self.inputs[1]->data;
        double* gx = detail::input_grad(self, 0);
        double* gg = detail::input_grad(self, 1);
        double* gbeta = detail::input_grad(self, 2);
        const double inv_w = 1.0 / static_cast<double>(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * width;
          const double* h = xhat.data() + r * width;
          double mean_d = 0.0, mean_dh = 0.0;
          for (std::size_t c = 0; c < width; ++c) {
            const double d = g[c] * gv[c];
            mean_d += d;
            mean_dh += d * h[c];
            if (gg) gg[c] += g[c] * h[c];
            if (gbeta) gbeta[c] += g[c];
          }
          if (!gx) continue;
          mean_d *= inv_w;
          mean_dh *= inv_w;
          for (std::size_t c = 0; c < width; ++c) {
            gx[r * width + c] += inv_std[r] * (g[c] * gv[c] - mean_d - h[c] * mean_dh);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution

/// 2-D convolution of x [C, H, W] with w [O, C, kh, kw] and optional bias
/// [O]. Out-of-range taps replicate the nearest border pixel.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                     std::size_t pad) {
  if (x.ndim() != 3 || w.ndim() != 4 || w.dim(1) != x.dim(0) || stride == 0 ||
      (b.defined() && b.shape() != Shape{w.dim(0)})) {
    throw DimensionError("conv2d: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()));
  }
  if (x.numel() == 0) throw InputError("conv2d on an empty input");
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (h + 2 * pad < kh || wd + 2 * pad < kw) {
    throw DimensionError("conv2d kernel larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (wd + 2 * pad - kw) / stride + 1;
  const std::size_t p = oh * ow;
  const std::size_t q = c * kh * kw;

  // im2col with replicated borders: src[qi * p + pi] indexes x.
  std::vector<std::uint32_t> src(q * p);
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const std::size_t qi = (ci * kh + ky) * kw + kx;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = std::clamp<long>(static_cast<long>(oy * stride + ky) - static_cast<long>(pad),
                                           0, static_cast<long>(h) - 1);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = std::clamp<long>(
                static_cast<long>(ox * stride + kx) - static_cast<long>(pad), 0,
                static_cast<long>(wd) - 1);
            src[qi * p + oy * ow + ox] =
                static_cast<std::uint32_t>((ci * h + static_cast<std::size_t>(iy)) * wd +
                                           static_cast<std::size_t>(ix));
          }
        }
      }
  std::vector<double> cols(q * p);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = xv[src[i]];

  std::vector<double> out(o * p, 0.0);
  const auto& wv = w.values();
  for (std::size_t oi = 0; oi < o; ++oi) {
    double* orow = out.data() + oi * p;
    if (b.defined()) std::fill(orow, orow + p, b[oi]);
    for (std::size_t qi = 0; qi < q; ++qi) {
      const double s = wv[oi * q + qi];
      const double* crow = cols.data() + qi * p;
      for (std::size_t pi = 0; pi < p; ++pi) orow[pi] += s * crow[pi];
    }
  }
  detail::count_macs(static_cast<std::uint64_t>(o) * q * p);

  auto fn = [o, p, q, src = std::move(src), cols = std::move(cols)](detail::Node& self) {
    const auto& wv = self.inputs[1]->data;
    double* gx = detail::input_grad(self, 0);
    double* gw = detail::input_grad(self, 1);
    double* gb = self.inputs.size() > 2 ? detail::input_grad(self, 2) : nullptr;
    std::vector<double> dcols;
    if (gx) dcols.assign(q * p, 0.0);
    for (std::size_t oi = 0; oi < o; ++oi) {
      const double* g = self.grad.data() + oi * p;
      if (gb) {
        double s = 0.0;
        for (std::size_t pi = 0; pi < p; ++pi) s += g[pi];
        gb[oi] += s;
      }
      for (std::size_t qi = 0; qi < q; ++qi) {
        const double* crow = cols.data() + qi * p;
        if (gw) {
          double s = 0.0;
          for (std::size_t pi = 0; pi < p; ++pi) s += g[pi] * crow[pi];
          gw[oi * q + qi] += s;
        }
        if (gx) {
          const double wq = wv[oi * q + qi];
          double* drow = dcols.data() + qi * p;
          for (std::size_t pi = 0; pi < p; ++pi) drow[pi] += wq * g[pi];
        }
      }
    }
    if (gx) {
      for (std::size_t i = 0; i < dcols.size(); ++i) gx[src[i]] += dcols[i];
    }
  };
  if (b.defined()) return detail::make_op({o, oh, ow}, std::move(out), {x, w, b}, std::move(fn));
  return detail::make_op({o, oh, ow}, std::move(out), {x, w}, std::move(fn));
}

// ---------------------------------------------------------------------------
// Initialization

using Rng = std::mt19937_64;

inline Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline Tensor normal(Shape shape, double mean_value, double stddev, Rng& rng,
                     bool requires_grad = true) {
  std::normal_distribution<double> dist(mean_value, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Kaiming-uniform (ReLU gain) with the given fan-in.
inline Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return uniform(std::move(shape), -bound, bound, rng);
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment slots, one pair per parameter, plus the step count.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState for_params(const std::vector<Tensor>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), 0.0);
      s.v.emplace_back(p.numel(), 0.0);
    }
    return s;
  }
};

/// One bias-corrected Adam update, in place on parameter values.
inline void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamOptions& opt) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                        " slots for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw ContractError("adam_step: parameter " + std::to_string(i) + " has no gradient");
    if (state.m[i].size() != params[i].numel()) throw ContractError("adam_step: slot shape mismatch");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_data();
    const auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
      v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      values[j] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
}

inline void zero_grad(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace slpt
