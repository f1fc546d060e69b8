#pragma once

// Dense row-major float64 tensors with reverse-mode automatic differentiation.
//
// Every op returns a fresh Tensor. When gradient recording is enabled and any
// input requires a gradient, the result keeps references to its inputs plus a
// closure that pushes the result's gradient back to them. backward() walks the
// recorded graph in reverse creation order, which is always a valid reverse
// topological order and makes gradient accumulation order deterministic.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace m3asr {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b)) {}
  ShapeError(const std::string& op, const std::string& what)
      : std::invalid_argument(op + ": " + what) {}
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& debug_mode() {
  thread_local bool enabled = false;
  return enabled;
}

inline void ensure_grad(Node& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
}

}  // namespace detail

/// RAII guard that disables graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Turns on non-finite input checks in every op on the current thread.
inline void set_debug_checks(bool on) { detail::debug_mode() = on; }
inline bool debug_checks() { return detail::debug_mode(); }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor", "shape " + shape_str(shape) + " needs " +
                                     std::to_string(shape_numel(shape)) + " values, got " +
                                     std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->id = detail::next_node_id();
    if (requires_grad) node_->grad.assign(node_->data.size(), 0.0);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(data), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  // 2-D view used by most ops: scalars are 1x1, vectors are 1xN.
  std::size_t rows() const {
    const auto& s = node_->shape;
    return s.size() < 2 ? 1 : s[0];
  }
  std::size_t cols() const {
    const auto& s = node_->shape;
    return s.empty() ? 1 : s.back();
  }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    detail::ensure_grad(*node_);
    return node_->grad;
  }

  double item() const {
    if (size() != 1) throw ShapeError("item", "tensor " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }
  double operator()(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(node_->shape, node_->data, false); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(const char* op, const Tensor& t) {
  if (!debug_mode()) return;
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite input in tensor " + shape_str(t.shape()));
    }
  }
}

inline void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw ShapeError(op, "undefined tensor");
}

// Builds the result node; attaches the backward closure only when recording.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = next_node_id();
  node->op = op;
  bool needs = false;
  if (grad_mode()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

inline bool wants_grad(const Node& n) { return n.requires_grad; }

// Accumulates into a parent's gradient buffer; allocates on first touch.
inline std::vector<double>& grad_of(Node& n) {
  ensure_grad(n);
  return n.grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward pass

inline void backward(const Tensor& loss) {
  detail::require_defined("backward", loss);
  if (loss.size() != 1) {
    throw ShapeError("backward", "loss must be a scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node().get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  // Interior gradients are per-call scratch; leaves accumulate across calls.
  for (detail::Node* n : order) {
    if (!n->parents.empty()) n->grad.assign(n->data.size(), 0.0);
  }
  detail::grad_of(*loss.node())[0] += 1.0;
  for (detail::Node* n : order) {
    if (n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops with 2-D broadcasting (each operand dim equals or is 1).

namespace detail {

struct Broadcast {
  std::size_t rows, cols;
  std::size_t a_rs, a_cs, b_rs, b_cs;  // strides, 0 when broadcast
  Shape shape;
};

inline Broadcast broadcast(const char* op, const Tensor& a, const Tensor& b) {
  const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  auto ok = [](std::size_t x, std::size_t y) { return x == y || x == 1 || y == 1; };
  if (a.rank() > 2 || b.rank() > 2 || !ok(ar, br) || !ok(ac, bc)) {
    throw ShapeError(op, a.shape(), b.shape());
  }
  Broadcast bc_info;
  bc_info.rows = std::max(ar, br);
  bc_info.cols = std::max(ac, bc);
  bc_info.a_rs = ar == 1 ? 0 : ac;
  bc_info.a_cs = ac == 1 ? 0 : 1;
  bc_info.b_rs = br == 1 ? 0 : bc;
  bc_info.b_cs = bc == 1 ? 0 : 1;
  if (a.shape() == b.shape()) {
    bc_info.shape = a.shape();
  } else if (ar == bc_info.rows && ac == bc_info.cols && a.rank() >= b.rank()) {
    bc_info.shape = a.shape();
  } else if (br == bc_info.rows && bc == bc_info.cols && b.rank() >= a.rank()) {
    bc_info.shape = b.shape();
  } else {
    bc_info.shape = {bc_info.rows, bc_info.cols};
  }
  return bc_info;
}

template <typename F, typename DA, typename DB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  require_defined(op, a);
  require_defined(op, b);
  check_finite(op, a);
  check_finite(op, b);
  const Broadcast bi = broadcast(op, a, b);
  std::vector<double> out(bi.rows * bi.cols);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t r = 0; r < bi.rows; ++r) {
    for (std::size_t c = 0; c < bi.cols; ++c) {
      out[r * bi.cols + c] = f(pa[r * bi.a_rs + c * bi.a_cs], pb[r * bi.b_rs + c * bi.b_cs]);
    }
  }
  return make_result(op, bi.shape, std::move(out), {a, b}, [bi, da, db](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    const double* xa = na.data.data();
    const double* xb = nb.data.data();
    const double* g = self.grad.data();
    double* ga = na.requires_grad ? grad_of(na).data() : nullptr;
    double* gb = nb.requires_grad ? grad_of(nb).data() : nullptr;
    for (std::size_t r = 0; r < bi.rows; ++r) {
      for (std::size_t c = 0; c < bi.cols; ++c) {
        const std::size_t ia = r * bi.a_rs + c * bi.a_cs;
        const std::size_t ib = r * bi.b_rs + c * bi.b_cs;
        const double gv = g[r * bi.cols + c];
        if (ga) ga[ia] += da(gv, xa[ia], xb[ib]);
        if (gb) gb[ib] += db(gv, xa[ia], xb[ib]);
      }
    }
  });
}

template <typename F, typename D>
Tensor unary_op(const char* op, const Tensor& x, F f, D d) {
  require_defined(op, x);
  check_finite(op, x);
  std::vector<double> out(x.size());
  const auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xs[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [d](Node& self) {
    Node& nx = *self.parents[0];
    auto& gx = grad_of(nx);
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      gx[i] += d(self.grad[i], nx.data[i], self.data[i]);
    }
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary_op(
      "scale", x, [s](double v) { return v * s; }, [s](double g, double, double) { return g * s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary_op(
      "add_scalar", x, [s](double v) { return v + s; }, [](double g, double, double) { return g; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double g, double xv, double) { return g / xv; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double g, double, double y) { return g * y; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double g, double, double y) { return g * 0.5 / y; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary_op(
      "square", x, [](double v) { return v * v; },
      [](double g, double xv, double) { return 2.0 * g * xv; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      "relu", x, [](double v) { return v > 0.0 || std::isnan(v) ? v : 0.0; },
      [](double g, double xv, double) { return xv > 0.0 ? g : 0.0; });
}

inline double sigmoid_value(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      "sigmoid", x, [](double v) { return sigmoid_value(v); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

/// x * sigmoid(x)
inline Tensor swish(const Tensor& x) {
  return detail::unary_op(
      "swish", x, [](double v) { return v * sigmoid_value(v); },
      [](double g, double xv, double) {
        const double s = sigmoid_value(xv);
        return g * (s + xv * s * (1.0 - s));
      });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  detail::require_defined("sum", x);
  detail::check_finite("sum", x);
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result("sum", {}, {s}, {x}, [](detail::Node& self) {
    auto& gx = detail::grad_of(*self.parents[0]);
    for (double& v : gx) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  detail::require_defined("mean", x);
  if (x.size() == 0) throw ShapeError("mean", "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Sum over the last dimension: [M x N] -> [M x 1].
inline Tensor sum_last(const Tensor& x) {
  detail::require_defined("sum_last", x);
  detail::check_finite("sum_last", x);
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r] += x(r, c);
  return detail::make_result("sum_last", {m, 1}, std::move(out), {x}, [m, n](detail::Node& self) {
    auto& gx = detail::grad_of(*self.parents[0]);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += self.grad[r];
  });
}

/// Sum over the first dimension: [M x N] -> [1 x N].
inline Tensor sum_first(const Tensor& x) {
  detail::require_defined("sum_first", x);
  detail::check_finite("sum_first", x);
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c] += x(r, c);
  return detail::make_result("sum_first", {1, n}, std::move(out), {x}, [m, n](detail::Node& self) {
    auto& gx = detail::grad_of(*self.parents[0]);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += self.grad[c];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_defined("matmul", a);
  detail::require_defined("matmul", b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul", a.shape(), b.shape());
  }
  detail::check_finite("matmul", a);
  detail::check_finite("matmul", b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    detail::Node& na = *self.parents[0];
    detail::Node& nb = *self.parents[1];
    const double* g = self.grad.data();
    if (na.requires_grad) {
      double* ga = detail::grad_of(na).data();
      const double* pb = nb.data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = g + i * n;
          const double* brow = pb + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
    }
    if (nb.requires_grad) {
      double* gb = detail::grad_of(nb).data();
      const double* pa = na.data.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa[i * k + p];
          if (av == 0.0) continue;
          double* gbrow = gb + p * n;
          const double* grow = g + i * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_defined("transpose", x);
  if (x.rank() != 2) throw ShapeError("transpose", "expects rank 2, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x(i, j);
  return detail::make_result("transpose", {n, m}, std::move(out), {x}, [m, n](detail::Node& self) {
    auto& gx = detail::grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += self.grad[j * m + i];
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require_defined("reshape", x);
  if (shape_numel(shape) != x.size()) throw ShapeError("reshape", x.shape(), shape);
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    auto& gx = detail::grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

/// Concatenates 2-D tensors with equal row counts along the last dimension.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last", "no inputs");
  const std::size_t m = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_defined("concat_last", p);
    if (p.rows() != m || p.rank() != 2) throw ShapeError("concat_last", parts[0].shape(), p.shape());
    detail::check_finite("concat_last", p);
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) out[r * total + off + c] = parts[k](r, c);
    off += widths[k];
  }
  return detail::make_result("concat_last", {m, total}, std::move(out), parts,
                             [m, total, widths](detail::Node& self) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 detail::Node& p = *self.parents[k];
                                 if (p.requires_grad) {
                                   auto& gp = detail::grad_of(p);
                                   for (std::size_t r = 0; r < m; ++r)
                                     for (std::size_t c = 0; c < widths[k]; ++c)
                                       gp[r * widths[k] + c] += self.grad[r * total + off + c];
                                 }
                                 off += widths[k];
                               }
                             });
}

/// Columns [begin, end) of a 2-D tensor.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_defined("slice_cols", x);
  const std::size_t m = x.rows(), n = x.cols();
  if (x.rank() != 2 || begin > end || end > n) {
    throw ShapeError("slice_cols", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                       ") out of bounds for " + shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x(r, begin + c);
  return detail::make_result("slice_cols", {m, w}, std::move(out), {x},
                             [m, n, w, begin](detail::Node& self) {
                               auto& gx = detail::grad_of(*self.parents[0]);
                               for (std::size_t r = 0; r < m; ++r)
                                 for (std::size_t c = 0; c < w; ++c)
                                   gx[r * n + begin + c] += self.grad[r * w + c];
                             });
}

/// Rows of x selected by index: [len(idx) x N].
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  detail::require_defined("gather_rows", x);
  const std::size_t m = x.rows(), n = x.cols();
  for (std::size_t i : idx)
    if (i >= m) throw ShapeError("gather_rows", "row index " + std::to_string(i) + " out of range");
  std::vector<double> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x(idx[r], c);
  return detail::make_result("gather_rows", {idx.size(), n}, std::move(out), {x},
                             [idx, n](detail::Node& self) {
                               auto& gx = detail::grad_of(*self.parents[0]);
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t c = 0; c < n; ++c)
                                   gx[idx[r] * n + c] += self.grad[r * n + c];
                             });
}

/// Inverse of gather_rows: places row r of x at row idx[r] of a zero [rows x N] result.
inline Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& idx, std::size_t rows) {
  detail::require_defined("scatter_rows", x);
  const std::size_t n = x.cols();
  if (x.rows() != idx.size()) throw ShapeError("scatter_rows", "index count does not match rows");
  std::vector<double> out(rows * n, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows) throw ShapeError("scatter_rows", "row index out of range");
    for (std::size_t c = 0; c < n; ++c) out[idx[r] * n + c] += x(r, c);
  }
  return detail::make_result("scatter_rows", {rows, n}, std::move(out), {x},
                             [idx, n](detail::Node& self) {
                               auto& gx = detail::grad_of(*self.parents[0]);
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t c = 0; c < n; ++c)
                                   gx[r * n + c] += self.grad[idx[r] * n + c];
                             });
}

/// out[r] = x[r, idx[r]] as an [M x 1] column.
inline Tensor pick(const Tensor& x, const std::vector<std::size_t>& idx) {
  detail::require_defined("pick", x);
  const std::size_t m = x.rows(), n = x.cols();
  if (idx.size() != m) throw ShapeError("pick", "need one index per row");
  std::vector<double> out(m);
  for (std::size_t r = 0; r < m; ++r) {
    if (idx[r] >= n) throw ShapeError("pick", "column index out of range");
    out[r] = x(r, idx[r]);
  }
  return detail::make_result("pick", {m, 1}, std::move(out), {x}, [idx, n](detail::Node& self) {
    auto& gx = detail::grad_of(*self.parents[0]);
    for (std::size_t r = 0; r < idx.size(); ++r) gx[r * n + idx[r]] += self.grad[r];
  });
}

/// Replaces entries where mask is set by value; masked entries get no gradient.
inline Tensor mask_fill(const Tensor& x, const std::vector<bool>& mask, double value) {
  detail::require_defined("mask_fill", x);
  if (mask.size() != x.size()) throw ShapeError("mask_fill", "mask size does not match tensor");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  return detail::make_result("mask_fill", x.shape(), std::move(out), {x}, [mask](detail::Node& self) {
    auto& gx = detail::grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!mask[i]) gx[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Normalisation and activations over the last dimension

inline Tensor softmax_last(const Tensor& x) {
  detail::require_defined("softmax_last", x);
  detail::check_finite("softmax_last", x);
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    double mx = x(r, 0);
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, x(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += (out[r * n + c] = std::exp(x(r, c) - mx));
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= s;
  }
  return detail::make_result("softmax_last", x.shape(), std::move(out), {x}, [m, n](detail::Node& self) {
    auto& gx = detail::grad_of(*self.parents[0]);
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += self.grad[r * n + c] * self.data[r * n + c];
      for (std::size_t c = 0; c < n; ++c)
        gx[r * n + c] += self.data[r * n + c] * (self.grad[r * n + c] - dot);
    }
  });
}

inline Tensor log_softmax_last(const Tensor& x) {
  detail::require_defined("log_softmax_last", x);
  detail::check_finite("log_softmax_last", x);
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    double mx = x(r, 0);
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, x(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += std::exp(x(r, c) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x(r, c) - lse;
  }
  return detail::make_result("log_softmax_last", x.shape(), std::move(out), {x},
                             [m, n](detail::Node& self) {
                               auto& gx = detail::grad_of(*self.parents[0]);
                               for (std::size_t r = 0; r < m; ++r) {
                                 double gs = 0.0;
                                 for (std::size_t c = 0; c < n; ++c) gs += self.grad[r * n + c];
                                 for (std::size_t c = 0; c < n; ++c)
                                   gx[r * n + c] +=
                                       self.grad[r * n + c] - std::exp(self.data[r * n + c]) * gs;
                               }
                             });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalises each row to zero mean and unit variance (no affine).
/// Zero-variance rows map to zeros through the epsilon floor.
inline Tensor layernorm(const Tensor& x, double eps = kLayerNormEps) {
  detail::require_defined("layernorm", x);
  detail::check_finite("layernorm", x);
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += x(r, c);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = (x(r, c) - mu) * inv_std[r];
  }
  return detail::make_result("layernorm", x.shape(), std::move(out), {x},
                             [m, n, inv_std](detail::Node& self) {
                               auto& gx = detail::grad_of(*self.parents[0]);
                               const double dn = static_cast<double>(n);
                               for (std::size_t r = 0; r < m; ++r) {
                                 double gmean = 0.0, gxhat = 0.0;
                                 for (std::size_t c = 0; c < n; ++c) {
                                   gmean += self.grad[r * n + c];
                                   gxhat += self.grad[r * n + c] * self.data[r * n + c];
                                 }
                                 gmean /= dn;
                                 gxhat /= dn;
                                 for (std::size_t c = 0; c < n; ++c)
                                   gx[r * n + c] += inv_std[r] * (self.grad[r * n + c] - gmean -
                                                                  self.data[r * n + c] * gxhat);
                               }
                             });
}

/// Gated linear unit over the last dimension: first half * sigmoid(second half).
inline Tensor glu(const Tensor& x) {
  detail::require_defined("glu", x);
  if (x.cols() % 2 != 0) throw ShapeError("glu", "last dimension must be even, got " + shape_str(x.shape()));
  const std::size_t n = x.cols() / 2;
  return mul(slice_cols(x, 0, n), sigmoid(slice_cols(x, n, 2 * n)));
}

// ---------------------------------------------------------------------------
// Convolutions over time. Inputs are [T x C] (time-major).

/// Per-channel convolution with an odd kernel [K x C] and zero "same" padding.
inline Tensor depthwise_conv1d(const Tensor& x, const Tensor& kernel) {
  detail::require_defined("depthwise_conv1d", x);
  detail::require_defined("depthwise_conv1d", kernel);
  if (x.rank() != 2 || kernel.rank() != 2 || kernel.dim(1) != x.dim(1)) {
    throw ShapeError("depthwise_conv1d", x.shape(), kernel.shape());
  }
  const std::size_t k = kernel.dim(0);
  if (k % 2 == 0) throw ShapeError("depthwise_conv1d", "kernel size must be odd, got " + std::to_string(k));
  detail::check_finite("depthwise_conv1d", x);
  detail::check_finite("depthwise_conv1d", kernel);
  const std::size_t t_len = x.dim(0), ch = x.dim(1);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<double> out(t_len * ch, 0.0);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - pad;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_len)) continue;
      for (std::size_t c = 0; c < ch; ++c) out[t * ch + c] += kernel(j, c) * x(src, c);
    }
  return detail::make_result(
      "depthwise_conv1d", {t_len, ch}, std::move(out), {x, kernel}, [t_len, ch, k, pad](detail::Node& self) {
        detail::Node& nx = *self.parents[0];
        detail::Node& nk = *self.parents[1];
        double* gx = nx.requires_grad ? detail::grad_of(nx).data() : nullptr;
        double* gk = nk.requires_grad ? detail::grad_of(nk).data() : nullptr;
        for (std::size_t t = 0; t < t_len; ++t)
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - pad;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_len)) continue;
            for (std::size_t c = 0; c < ch; ++c) {
              const double g = self.grad[t * ch + c];
              if (gx) gx[src * ch + c] += g * nk.data[j * ch + c];
              if (gk) gk[j * ch + c] += g * nx.data[src * ch + c];
            }
          }
      });
}

/// 1x1 convolution over time: [T x Cin] * [Cin x Cout] + bias.
inline Tensor pointwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

/// im2col for a single-image 2-D convolution without padding.
/// x is [(H*W) x C] (pixel-major); the result is [(H'*W') x (k*k*C)], columns
/// ordered (ki, kj, c), with H' = (H - k) / stride + 1.
inline Tensor unfold2d(const Tensor& x, std::size_t height, std::size_t width, std::size_t k,
                       std::size_t stride) {
  detail::require_defined("unfold2d", x);
  if (x.rank() != 2 || x.dim(0) != height * width || height < k || width < k || stride == 0) {
    throw ShapeError("unfold2d", "input " + shape_str(x.shape()) + " incompatible with " +
                                     std::to_string(height) + "x" + std::to_string(width) +
                                     " kernel " + std::to_string(k));
  }
  const std::size_t ch = x.dim(1);
  const std::size_t oh = (height - k) / stride + 1, ow = (width - k) / stride + 1;
  const std::size_t cols = k * k * ch;
  std::vector<double> out(oh * ow * cols);
  const double* px = x.data().data();
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double* row = out.data() + (i * ow + j) * cols;
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b) {
          const double* src = px + ((i * stride + a) * width + (j * stride + b)) * ch;
          std::copy(src, src + ch, row + (a * k + b) * ch);
        }
    }
  return detail::make_result("unfold2d", {oh * ow, cols}, std::move(out), {x},
                             [oh, ow, k, stride, width, ch, cols](detail::Node& self) {
                               auto& gx = detail::grad_of(*self.parents[0]);
                               for (std::size_t i = 0; i < oh; ++i)
                                 for (std::size_t j = 0; j < ow; ++j) {
                                   const double* row = self.grad.data() + (i * ow + j) * cols;
                                   for (std::size_t a = 0; a < k; ++a)
                                     for (std::size_t b = 0; b < k; ++b) {
                                       double* dst =
                                           gx.data() + ((i * stride + a) * width + (j * stride + b)) * ch;
                                       const double* src = row + (a * k + b) * ch;
                                       for (std::size_t c = 0; c < ch; ++c) dst[c] += src[c];
                                     }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Lookup and regularisation

/// Rows of table [V x D] for each id: [L x D].
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
  detail::require_defined("embedding_lookup", table);
  if (table.rank() != 2) throw ShapeError("embedding_lookup", "table must be rank 2");
  for (std::size_t id : ids)
    if (id >= table.dim(0))
      throw ShapeError("embedding_lookup", "id " + std::to_string(id) + " >= vocabulary " +
                                               std::to_string(table.dim(0)));
  return gather_rows(table, ids);
}

/// Inverted dropout; identity when not training or p == 0.
inline Tensor dropout(const Tensor& x, double p, bool training, Rng* rng) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0 || rng == nullptr) throw std::invalid_argument("dropout: need p < 1 and an rng");
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> factor(x.size());
  const double s = 1.0 / (1.0 - p);
  for (double& f : factor) f = keep(*rng) ? s : 0.0;
  return mul(x, Tensor(x.shape(), std::move(factor)));
}

}  // namespace m3asr
