#pragma once

// Tape-based reverse-mode automatic differentiation over nco::Tensor.
//
// A Tape records every op in execution order. Each node owns its forward
// value and, when any input needs a gradient, a closure that pushes the
// node's gradient into its inputs. backward() walks the nodes once in
// reverse. Trainable weights live in Parameter objects that outlive tapes;
// tape leaves refer back to them so gradients can be accumulated into
// Parameter::grad.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nco/tensor.hpp"

namespace nco {

struct Parameter {
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  std::string name;
  Tensor value;
  Tensor grad;
  void zero_grad() { grad.fill(0.0); }
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor t) { return push(std::move(t), {}, nullptr, "constant"); }

  /// Binds a parameter to this tape; repeated calls return the same node.
  Var leaf(Parameter& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var{this, it->second};
    Node node;
    node.value = p.value;
    node.param = &p;
    node.requires_grad = record_;
    nodes_.push_back(std::move(node));
    bound_.emplace(&p, nodes_.size() - 1);
    return Var{this, nodes_.size() - 1};
  }

  /// Records an op. `fn` is dropped when no input requires a gradient.
  Var push(Tensor value, const std::vector<Var>& inputs, BackwardFn fn, const char* op,
           bool allow_neg_inf = false) {
    check_values(value, op, allow_neg_inf);
    Node node;
    node.value = std::move(value);
    if (record_) {
      for (const auto& in : inputs) {
        if (nodes_[in.id].requires_grad) node.requires_grad = true;
      }
      if (node.requires_grad) node.backward = std::move(fn);
    }
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
  }

  /// Drops every node recorded after the first `size`; inference only.
  void truncate(std::size_t size) {
    if (record_) throw std::logic_error("truncate on a recording tape");
    while (nodes_.size() > size) nodes_.pop_back();
    std::erase_if(bound_, [size](const auto& kv) { return kv.second >= size; });
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  Tensor& grad(std::size_t id) {
    auto& node = nodes_[id];
    if (node.grad.empty()) node.grad = Tensor(node.value.shape());
    return node.grad;
  }

  /// Accumulates d(loss)/d(param) into Parameter::grad for every leaf.
  void backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("loss belongs to another tape");
    if (value(loss.id).numel() != 1) {
      throw ShapeError("backward needs a scalar loss, got " + shape_str(value(loss.id).shape()));
    }
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    grad(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.grad.empty()) continue;
      if (node.backward) node.backward(*this, i);
      if (node.param != nullptr) {
        auto& pg = node.param->grad.vec();
        const auto& g = node.grad.vec();
        for (std::size_t k = 0; k < g.size(); ++k) pg[k] += g[k];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  static void check_values(const Tensor& t, const char* op, bool allow_neg_inf) {
    for (double v : t.vec()) {
      if (std::isfinite(v)) continue;
      if (allow_neg_inf && v == -std::numeric_limits<double>::infinity()) continue;
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }

  bool record_;
  std::deque<Node> nodes_;  // stable references across push_back
  std::unordered_map<const Parameter*, std::size_t> bound_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

/// Boolean mask, 1 = entry participates. Same element count as the tensor it masks.
using Mask = std::vector<std::uint8_t>;

namespace op {

namespace detail {

inline void require_same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands on different tapes");
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i + a.size() >= r ? a[i + a.size() - r] : 1;
    const std::size_t db = i + b.size() >= r ? b[i + b.size() - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// For each flat output index of `target`, the flat index into `src` under
// numpy broadcasting.
inline std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& target) {
  const std::size_t r = target.size();
  Shape padded(r, 1);
  std::copy(src.begin(), src.end(), padded.begin() + static_cast<std::ptrdiff_t>(r - src.size()));
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    stride[i] = padded[i] == 1 ? 0 : s;
    s *= padded[i];
  }
  const std::size_t total = shape_numel(target);
  std::vector<std::size_t> out(total);
  std::vector<std::size_t> counter(r, 0);
  std::size_t off = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    out[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      ++counter[i];
      off += stride[i];
      if (counter[i] < target[i]) break;
      off -= stride[i] * counter[i];
      counter[i] = 0;
    }
  }
  return out;
}

inline std::size_t rows_of(const Shape& s) { return s.empty() ? 1 : shape_numel(s) / s.back(); }

}  // namespace detail

/// Broadcasts x to `target` (numpy rules); backward sums over expanded axes.
inline Var broadcast_to(Var x, const Shape& target) {
  const Shape& src = x.shape();
  if (src == target) return x;
  if (detail::broadcast_shape(src, target) != target) {
    throw ShapeError("cannot broadcast " + shape_str(src) + " to " + shape_str(target));
  }
  auto index = std::make_shared<std::vector<std::size_t>>(detail::broadcast_index(src, target));
  Tensor out(target);
  const auto& xv = x.value().vec();
  for (std::size_t i = 0; i < index->size(); ++i) out[i] = xv[(*index)[i]];
  const std::size_t xid = x.id;
  return x.tape->push(std::move(out), {x}, [xid, index](Tape& t, std::size_t self) {
    auto& gx = t.grad(xid).vec();
    const auto& g = t.grad(self).vec();
    for (std::size_t i = 0; i < index->size(); ++i) gx[(*index)[i]] += g[i];
  }, "broadcast_to");
}

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  if (a.shape() != b.shape()) {
    const Shape s = detail::broadcast_shape(a.shape(), b.shape());
    a = broadcast_to(a, s);
    b = broadcast_to(b, s);
  }
  Tensor out = a.value();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    for (std::size_t id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto& gi = t.grad(id).vec();
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  }, "add");
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape(a, b);
  if (a.shape() != b.shape()) {
    const Shape s = detail::broadcast_shape(a.shape(), b.shape());
    a = broadcast_to(a, s);
    b = broadcast_to(b, s);
  }
  Tensor out = a.value();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia).vec();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib).vec();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  }, "sub");
}

inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b);
  if (a.shape() != b.shape()) {
    const Shape s = detail::broadcast_shape(a.shape(), b.shape());
    a = broadcast_to(a, s);
    b = broadcast_to(b, s);
  }
  Tensor out = a.value();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const auto& av = t.value(ia).vec();
    const auto& bv = t.value(ib).vec();
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia).vec();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib).vec();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  }, "mul");
}

inline Var div(Var a, Var b) {
  detail::require_same_tape(a, b);
  if (a.shape() != b.shape()) {
    const Shape s = detail::broadcast_shape(a.shape(), b.shape());
    a = broadcast_to(a, s);
    b = broadcast_to(b, s);
  }
  Tensor out = a.value();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const auto& av = t.value(ia).vec();
    const auto& bv = t.value(ib).vec();
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia).vec();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib).vec();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  }, "div");
}

inline Var scale(Var x, double c) {
  Tensor out = x.value();
  for (auto& v : out.vec()) v *= c;
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix, c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    auto& gx = t.grad(ix).vec();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  }, "scale");
}

inline Var add_scalar(Var x, double c) {
  Tensor out = x.value();
  for (auto& v : out.vec()) v += c;
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    auto& gx = t.grad(ix).vec();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  }, "add_scalar");
}

namespace detail {

// Elementwise unary op whose derivative is expressed through (x, y).
template <class F, class D>
Var unary(Var x, F f, D dfdx, const char* name) {
  Tensor out = x.value();
  for (auto& v : out.vec()) v = f(v);
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix, dfdx](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const auto& xv = t.value(ix).vec();
    const auto& yv = t.value(self).vec();
    auto& gx = t.grad(ix).vec();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
  }, name);
}

}  // namespace detail

inline Var relu(Var x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline Var tanh(Var x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; },
      "tanh");
}

inline Var sigmoid(Var x) {
  return detail::unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

inline Var exp(Var x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; }, "exp");
}

inline Var log(Var x) {
  return detail::unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; }, "log");
}

inline Var square(Var x) {
  return detail::unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; }, "square");
}

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    auto& gx = t.grad(ix).vec();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  }, "reshape");
}

/// x[..., k] · w[k, n] → [..., n]
inline Var matmul(Var x, Var w) {
  detail::require_same_tape(x, w);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.size() != 2 || xs.empty() || xs.back() != ws[0]) {
    throw ShapeError("matmul: " + shape_str(xs) + " x " + shape_str(ws));
  }
  const std::size_t k = ws[0], n = ws[1];
  const std::size_t m = detail::rows_of(xs);
  Shape os = xs;
  os.back() = n;
  Tensor out(os);
  kernel::gemm_acc(x.value().vec().data(), w.value().vec().data(), out.vec().data(), m, k, n);
  const std::size_t ix = x.id, iw = w.id;
  return x.tape->push(std::move(out), {x, w}, [ix, iw, m, k, n](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    if (t.requires_grad(ix)) {
      kernel::gemm_nt_acc(g.data(), t.value(iw).vec().data(), t.grad(ix).vec().data(), m, n, k);
    }
    if (t.requires_grad(iw)) {
      kernel::gemm_tn_acc(t.value(ix).vec().data(), g.data(), t.grad(iw).vec().data(), m, k, n);
    }
  }, "matmul");
}

/// Batched a[B,m,k] · b[B,k,n] → [B,m,n]
inline Var bmm(Var a, Var b) {
  detail::require_same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1]) {
    throw ShapeError("bmm: " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t B = as[0], m = as[1], k = as[2], n = bs[2];
  Tensor out(Shape{B, m, n});
  for (std::size_t i = 0; i < B; ++i) {
    kernel::gemm_acc(a.value().vec().data() + i * m * k, b.value().vec().data() + i * k * n,
                     out.vec().data() + i * m * n, m, k, n);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    for (std::size_t i = 0; i < B; ++i) {
      const double* gi = g.data() + i * m * n;
      if (t.requires_grad(ia)) {
        kernel::gemm_nt_acc(gi, t.value(ib).vec().data() + i * k * n,
                            t.grad(ia).vec().data() + i * m * k, m, n, k);
      }
      if (t.requires_grad(ib)) {
        kernel::gemm_tn_acc(t.value(ia).vec().data() + i * m * k, gi,
                            t.grad(ib).vec().data() + i * k * n, m, k, n);
      }
    }
  }, "bmm");
}

/// Batched a[B,m,k] · b[B,n,k]ᵀ → [B,m,n]
inline Var bmm_nt(Var a, Var b) {
  detail::require_same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[2]) {
    throw ShapeError("bmm_nt: " + shape_str(as) + " x " + shape_str(bs) + "^T");
  }
  const std::size_t B = as[0], m = as[1], k = as[2], n = bs[1];
  Tensor out(Shape{B, m, n});
  for (std::size_t i = 0; i < B; ++i) {
    kernel::gemm_nt_acc(a.value().vec().data() + i * m * k, b.value().vec().data() + i * n * k,
                        out.vec().data() + i * m * n, m, k, n);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    for (std::size_t i = 0; i < B; ++i) {
      const double* gi = g.data() + i * m * n;
      if (t.requires_grad(ia)) {
        kernel::gemm_acc(gi, t.value(ib).vec().data() + i * n * k,
                         t.grad(ia).vec().data() + i * m * k, m, n, k);
      }
      if (t.requires_grad(ib)) {
        kernel::gemm_tn_acc(gi, t.value(ia).vec().data() + i * m * k,
                            t.grad(ib).vec().data() + i * n * k, m, n, k);
      }
    }
  }, "bmm_nt");
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().vec()) s += v;
  const std::size_t ix = x.id;
  return x.tape->push(Tensor::scalar(s), {x}, [ix](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (auto& v : t.grad(ix).vec()) v += g;
  }, "sum");
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Sums over `axis`; the axis is kept with extent 1 when `keepdim`.
inline Var sum_axis(Var x, std::size_t axis, bool keepdim = false) {
  const Shape& xs = x.shape();
  if (axis >= xs.size()) throw ShapeError("sum_axis: axis out of range for " + shape_str(xs));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t len = xs[axis];
  Shape os = xs;
  if (keepdim) {
    os[axis] = 1;
  } else {
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    if (os.empty()) os = {1};
  }
  Tensor out(os);
  const auto& xv = x.value().vec();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + l) * inner + i];
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    auto& gx = t.grad(ix).vec();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) gx[(o * len + l) * inner + i] += g[o * inner + i];
  }, "sum_axis");
}

inline Var mean_axis(Var x, std::size_t axis, bool keepdim = false) {
  const double len = static_cast<double>(x.shape().at(axis));
  return scale(sum_axis(x, axis, keepdim), 1.0 / len);
}

namespace detail {

inline void check_mask(const Tensor& x, const Mask* mask) {
  if (mask != nullptr && mask->size() != x.numel()) {
    throw ShapeError("mask has " + std::to_string(mask->size()) + " entries for tensor " +
                     shape_str(x.shape()));
  }
}

}  // namespace detail

/// Softmax over the last axis. Masked entries (mask == 0) come out exactly 0.
inline Var softmax(Var x, const Mask* mask = nullptr) {
  const Tensor& xv = x.value();
  detail::check_mask(xv, mask);
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.numel() / n;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || (*mask)[base + j]) mx = std::max(mx, xv[base + j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw std::invalid_argument("softmax: row " + std::to_string(r) + " is fully masked");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)[base + j]) continue;
      out[base + j] = std::exp(xv[base + j] - mx);
      z += out[base + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[base + j] /= z;
  }
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix, n, rows](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const auto& y = t.value(self).vec();
    auto& gx = t.grad(ix).vec();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[base + j] * y[base + j];
      for (std::size_t j = 0; j < n; ++j) gx[base + j] += y[base + j] * (g[base + j] - dot);
    }
  }, "softmax");
}

/// Log-softmax over the last axis; masked entries are -inf and receive no gradient.
inline Var log_softmax(Var x, const Mask* mask = nullptr) {
  const Tensor& xv = x.value();
  detail::check_mask(xv, mask);
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.numel() / n;
  Tensor out(xv.shape(), kNegInf);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    double mx = kNegInf;
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || (*mask)[base + j]) mx = std::max(mx, xv[base + j]);
    if (mx == kNegInf) {
      throw std::invalid_argument("log_softmax: row " + std::to_string(r) + " is fully masked");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || (*mask)[base + j]) z += std::exp(xv[base + j] - mx);
    const double lz = std::log(z) + mx;
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || (*mask)[base + j]) out[base + j] = xv[base + j] - lz;
  }
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {x}, [ix, n, rows](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    const auto& y = t.value(self).vec();
    auto& gx = t.grad(ix).vec();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * n;
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (std::isfinite(y[base + j])) gs += g[base + j];
      for (std::size_t j = 0; j < n; ++j) {
        if (!std::isfinite(y[base + j])) continue;
        gx[base + j] += g[base + j] - std::exp(y[base + j]) * gs;
      }
    }
  }, "log_softmax", /*allow_neg_inf=*/true);
}

/// [B, m, H·dk] → [B·H, m, dk]
inline Var split_heads(Var x, std::size_t heads) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 || xs[2] % heads != 0) {
    throw ShapeError("split_heads: " + shape_str(xs) + " into " + std::to_string(heads));
  }
  const std::size_t B = xs[0], m = xs[1], dk = xs[2] / heads;
  Tensor out(Shape{B * heads, m, dk});
  const auto& xv = x.value().vec();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < dk; ++k)
          out[((b * heads + h) * m + i) * dk + k] = xv[(b * m + i) * heads * dk + h * dk + k];
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    auto& gx = t.grad(ix).vec();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t k = 0; k < dk; ++k)
            gx[(b * m + i) * heads * dk + h * dk + k] += g[((b * heads + h) * m + i) * dk + k];
  }, "split_heads");
}

/// [B·H, m, dk] → [B, m, H·dk]
inline Var merge_heads(Var x, std::size_t heads) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 || xs[0] % heads != 0) {
    throw ShapeError("merge_heads: " + shape_str(xs) + " with " + std::to_string(heads));
  }
  const std::size_t B = xs[0] / heads, m = xs[1], dk = xs[2];
  Tensor out(Shape{B, m, heads * dk});
  const auto& xv = x.value().vec();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < dk; ++k)
          out[(b * m + i) * heads * dk + h * dk + k] = xv[((b * heads + h) * m + i) * dk + k];
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    auto& gx = t.grad(ix).vec();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t k = 0; k < dk; ++k)
            gx[((b * heads + h) * m + i) * dk + k] += g[(b * m + i) * heads * dk + h * dk + k];
  }, "merge_heads");
}

inline Var concat_last(Var a, Var b) {
  detail::require_same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 1, bs.begin())) {
    throw ShapeError("concat_last: " + shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t p = as.back(), q = bs.back();
  const std::size_t rows = detail::rows_of(as);
  Shape os = as;
  os.back() = p + q;
  Tensor out(os);
  const auto& av = a.value().vec();
  const auto& bv = b.value().vec();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(r * p), p, out.vec().begin() + static_cast<std::ptrdiff_t>(r * (p + q)));
    std::copy_n(bv.begin() + static_cast<std::ptrdiff_t>(r * q), q, out.vec().begin() + static_cast<std::ptrdiff_t>(r * (p + q) + p));
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia).vec();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < p; ++j) ga[r * p + j] += g[r * (p + q) + j];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib).vec();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < q; ++j) gb[r * q + j] += g[r * (p + q) + p + j];
    }
  }, "concat_last");
}

/// x[..., start:start+len]
inline Var slice_last(Var x, std::size_t start, std::size_t len) {
  const Shape& xs = x.shape();
  if (xs.empty() || start + len > xs.back()) {
    throw ShapeError("slice_last out of range on " + shape_str(xs));
  }
  const std::size_t w = xs.back();
  const std::size_t rows = detail::rows_of(xs);
  Shape os = xs;
  os.back() = len;
  Tensor out(os);
  const auto& xv = x.value().vec();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = xv[r * w + start + j];
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    auto& gx = t.grad(ix).vec();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < len; ++j) gx[r * w + start + j] += g[r * len + j];
  }, "slice_last");
}

/// h[B, n, d], idx[B·m] → [B, m, d] with out[b, r] = h[b, idx[b·m + r]].
inline Var gather_rows(Var h, const std::vector<std::size_t>& idx, std::size_t m) {
  const Shape& hs = h.shape();
  if (hs.size() != 3 || idx.size() != hs[0] * m) {
    throw ShapeError("gather_rows: " + shape_str(hs) + " with " + std::to_string(idx.size()) +
                     " indices");
  }
  const std::size_t B = hs[0], n = hs[1], d = hs[2];
  for (std::size_t i : idx)
    if (i >= n) throw std::out_of_range("gather_rows: node index " + std::to_string(i));
  Tensor out(Shape{B, m, d});
  const auto& hv = h.value().vec();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(hv.begin() + static_cast<std::ptrdiff_t>((b * n + idx[b * m + r]) * d), d,
                  out.vec().begin() + static_cast<std::ptrdiff_t>((b * m + r) * d));
  const std::size_t ih = h.id;
  return h.tape->push(std::move(out), {h}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    auto& gh = t.grad(ih).vec();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t k = 0; k < d; ++k) gh[(b * n + idx[b * m + r]) * d + k] += g[(b * m + r) * d + k];
  }, "gather_rows");
}

/// Picks one entry per last-axis row: x[..., n], idx[rows] → [...].
inline Var pick(Var x, const std::vector<std::size_t>& idx) {
  const Shape& xs = x.shape();
  const std::size_t n = xs.back();
  const std::size_t rows = detail::rows_of(xs);
  if (idx.size() != rows) throw ShapeError("pick: index count mismatch for " + shape_str(xs));
  Shape os(xs.begin(), xs.end() - 1);
  if (os.empty()) os = {1};
  Tensor out(os);
  const auto& xv = x.value().vec();
  for (std::size_t r = 0; r < rows; ++r) {
    if (idx[r] >= n) throw std::out_of_range("pick: index " + std::to_string(idx[r]));
    out[r] = xv[r * n + idx[r]];
  }
  const std::size_t ix = x.id;
  return x.tape->push(std::move(out), {x}, [=](Tape& t, std::size_t self) {
    const auto& g = t.grad(self).vec();
    auto& gx = t.grad(ix).vec();
    for (std::size_t r = 0; r < rows; ++r) gx[r * n + idx[r]] += g[r];
  }, "pick");
}

}  // namespace op

inline Var operator+(Var a, Var b) { return op::add(a, b); }
inline Var operator-(Var a, Var b) { return op::sub(a, b); }
inline Var operator*(Var a, Var b) { return op::mul(a, b); }

}  // namespace nco
