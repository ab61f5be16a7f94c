#pragma once

// Reverse-mode automatic differentiation over dense float64 arrays.
//
// A Tape records one forward pass as a topologically ordered list of nodes.
// Tensor is a lightweight handle (tape pointer + node id). Gradients are
// produced by backward() as a map node id -> buffer; they are never stored on
// the handles, so the same parameter Arrays can be bound to many tapes.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "villa/array.hpp"

namespace villa {

using NodeId = std::size_t;

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  NodeId id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const Array& value() const;
  inline const Shape& shape() const;
  inline bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

class GradSlots;

using BackwardFn = std::function<void(const Array& grad_out, GradSlots& slots)>;

struct Node {
  std::string_view op;
  Array value;
  std::vector<NodeId> inputs;
  bool requires_grad = false;
  BackwardFn backward;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  // Handles hold the tape address, so a tape never moves.
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Tensor leaf(Array value, bool requires_grad) {
    nodes_.push_back(Node{"leaf", std::move(value), {}, requires_grad, {}});
    return Tensor(this, nodes_.size() - 1);
  }

  Tensor constant(Array value) { return leaf(std::move(value), false); }

  /// Records an op output. The backward closure is dropped when no input
  /// requires a gradient.
  Tensor record(std::string_view op, Array value, std::vector<NodeId> inputs, BackwardFn backward) {
    bool rg = false;
    for (NodeId in : inputs) {
      if (in >= nodes_.size()) throw ContractError(std::string(op) + ": input from a different tape");
      rg = rg || nodes_[in].requires_grad;
    }
    if (!rg) backward = nullptr;
    nodes_.push_back(Node{op, std::move(value), std::move(inputs), rg, std::move(backward)});
    return Tensor(this, nodes_.size() - 1);
  }

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  void check_owns(const Tensor& t, std::string_view op) const {
    if (t.tape() != this || t.id() >= nodes_.size()) {
      throw ContractError(std::string(op) + ": tensor does not belong to this tape");
    }
  }

 private:
  std::vector<Node> nodes_;
};

inline const Array& Tensor::value() const { return tape_->node(id_).value; }
inline const Shape& Tensor::shape() const { return value().shape(); }
inline bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

/// Gradient buffers for the inputs of one node during backward.
class GradSlots {
 public:
  GradSlots(const Tape& tape, const Node& node, std::vector<std::optional<Array>>& grads)
      : tape_(tape), node_(node), grads_(grads) {}

  /// Buffer to accumulate into for input k, or nullptr if it needs no gradient.
  Array* operator()(std::size_t k) {
    const NodeId in = node_.inputs[k];
    const Node& src = tape_.node(in);
    if (!src.requires_grad) return nullptr;
    auto& slot = grads_[in];
    if (!slot) slot.emplace(src.value.shape(), 0.0);
    return &*slot;
  }

  const Array& input(std::size_t k) const { return tape_.node(node_.inputs[k]).value; }
  const Array& output() const { return node_.value; }

 private:
  const Tape& tape_;
  const Node& node_;
  std::vector<std::optional<Array>>& grads_;
};

/// Result of backward: gradient per node id. Unreached nodes read as zero.
class Gradients {
 public:
  Gradients(const Tape& tape, std::vector<std::optional<Array>> grads) : tape_(&tape), grads_(std::move(grads)) {}

  bool reached(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }

  Array of(NodeId id) const {
    if (reached(id)) return *grads_[id];
    return Array::zeros_like(tape_->node(id).value);
  }
  Array of(const Tensor& t) const { return of(t.id()); }

  /// Moves the buffer out (zeros if unreached).
  Array take(const Tensor& t) {
    if (reached(t.id())) {
      Array out = std::move(*grads_[t.id()]);
      grads_[t.id()].reset();
      return out;
    }
    return Array::zeros_like(t.value());
  }

 private:
  const Tape* tape_;
  std::vector<std::optional<Array>> grads_;
};

/// Reverse sweep from a scalar loss. Every node is visited at most once, in
/// reverse recording order.
inline Gradients backward(const Tape& tape, const Tensor& loss) {
  tape.check_owns(loss, "backward");
  if (loss.value().size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  std::vector<std::optional<Array>> grads(tape.size());
  if (!loss.requires_grad()) return Gradients(tape, std::move(grads));
  grads[loss.id()].emplace(loss.shape(), 1.0);
  for (NodeId i = loss.id() + 1; i-- > 0;) {
    const Node& node = tape.node(i);
    if (!grads[i] || !node.backward) continue;
    GradSlots slots(tape, node, grads);
    node.backward(*grads[i], slots);
  }
  return Gradients(tape, std::move(grads));
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline Tape& common_tape(std::string_view op, std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->valid()) throw ContractError(std::string(op) + ": invalid tensor handle");
    if (tape == nullptr) tape = t->tape();
    if (t->tape() != tape) throw ContractError(std::string(op) + ": tensors from different tapes");
  }
  return *tape;
}

inline DimensionError shape_error(std::string_view op, const Shape& a, const Shape& b) {
  return DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

inline void require_finite(std::string_view op, const Array& a) {
  if (!a.all_finite()) throw NumericDomainError(std::string(op) + ": non-finite input");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

/// [..., m, k] x [k, n] (shared right operand) or [..., m, k] x [..., k, n]
/// (matching batch dims).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  using namespace detail;
  Tape& tape = common_tape("matmul", {&a, &b});
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa.back() != sb[sb.size() - 2]) throw shape_error("matmul", sa, sb);
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  const std::size_t m = sa[sa.size() - 2];
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);

  if (sb.size() == 2) {
    const auto rows = static_cast<Eigen::Index>(a.value().size() / k);
    Array out(out_shape);
    MapMat(out.data().data(), rows, n).noalias() =
        CMapMat(a.value().data().data(), rows, k) * CMapMat(b.value().data().data(), k, n);
    return tape.record("matmul", std::move(out), {a.id(), b.id()}, [rows, k, n](const Array& g, GradSlots& s) {
      CMapMat gm(g.data().data(), rows, n);
      if (Array* ga = s(0)) {
        MapMat(ga->data().data(), rows, k).noalias() += gm * CMapMat(s.input(1).data().data(), k, n).transpose();
      }
      if (Array* gb = s(1)) {
        MapMat(gb->data().data(), k, n).noalias() += CMapMat(s.input(0).data().data(), rows, k).transpose() * gm;
      }
    });
  }

  if (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    throw shape_error("matmul", sa, sb);
  }
  const std::size_t batch = a.value().size() / (m * k);
  Array out(out_shape);
  for (std::size_t i = 0; i < batch; ++i) {
    MapMat(out.data().data() + i * m * n, m, n).noalias() =
        CMapMat(a.value().data().data() + i * m * k, m, k) * CMapMat(b.value().data().data() + i * k * n, k, n);
  }
  return tape.record("matmul", std::move(out), {a.id(), b.id()}, [batch, m, k, n](const Array& g, GradSlots& s) {
    Array* ga = s(0);
    Array* gb = s(1);
    for (std::size_t i = 0; i < batch; ++i) {
      CMapMat gm(g.data().data() + i * m * n, m, n);
      if (ga) {
        MapMat(ga->data().data() + i * m * k, m, k).noalias() +=
            gm * CMapMat(s.input(1).data().data() + i * k * n, k, n).transpose();
      }
      if (gb) {
        MapMat(gb->data().data() + i * k * n, k, n).noalias() +=
            CMapMat(s.input(0).data().data() + i * m * k, m, k).transpose() * gm;
      }
    }
  });
}

/// Elementwise sum; b may also be a trailing-axis bias (shape is a suffix of a's).
inline Tensor add(const Tensor& a, const Tensor& b) {
  using namespace detail;
  Tape& tape = common_tape("add", {&a, &b});
  if (!is_suffix(b.shape(), a.shape())) throw shape_error("add", a.shape(), b.shape());
  const std::size_t inner = b.value().size();
  Array out = a.value();
  const auto& bv = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % inner];
  return tape.record("add", std::move(out), {a.id(), b.id()}, [inner](const Array& g, GradSlots& s) {
    if (Array* ga = s(0)) *ga += g;
    if (Array* gb = s(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % inner] += g[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  using namespace detail;
  Tape& tape = common_tape("sub", {&a, &b});
  if (a.shape() != b.shape()) throw shape_error("sub", a.shape(), b.shape());
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return tape.record("sub", std::move(out), {a.id(), b.id()}, [](const Array& g, GradSlots& s) {
    if (Array* ga = s(0)) *ga += g;
    if (Array* gb = s(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

/// Elementwise product; b may be a trailing-axis suffix like in add().
inline Tensor multiply(const Tensor& a, const Tensor& b) {
  using namespace detail;
  Tape& tape = common_tape("multiply", {&a, &b});
  if (!is_suffix(b.shape(), a.shape())) throw shape_error("multiply", a.shape(), b.shape());
  const std::size_t inner = b.value().size();
  Array out = a.value();
  const auto& bv = b.value().values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % inner];
  return tape.record("multiply", std::move(out), {a.id(), b.id()}, [inner](const Array& g, GradSlots& s) {
    const Array& av = s.input(0);
    const Array& bv = s.input(1);
    if (Array* ga = s(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i % inner];
    }
    if (Array* gb = s(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % inner] += g[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  using namespace detail;
  Tape& tape = common_tape("scale", {&a});
  Array out = a.value();
  out *= c;
  return tape.record("scale", std::move(out), {a.id()}, [c](const Array& g, GradSlots& s) {
    if (Array* ga = s(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
    }
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  using namespace detail;
  if (parts.empty()) throw ContractError("concat: no inputs");
  Tape& tape = common_tape("concat", {&parts[0]});
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    tape.check_owns(p, "concat");
    const Shape& sp = p.shape();
    bool ok = sp.size() == s0.size();
    for (std::size_t d = 0; ok && d < sp.size(); ++d) ok = d == axis || sp[d] == s0[d];
    if (!ok) throw shape_error("concat", s0, sp);
    out_shape[axis] += sp[axis];
    ids.push_back(p.id());
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  for (const Tensor& p : parts) widths.push_back(p.shape()[axis] * inner);
  const std::size_t row = out_shape[axis] * inner;

  Array out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value().values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  out.values().begin() + static_cast<std::ptrdiff_t>(o * row + offset));
    }
    offset += widths[k];
  }
  return tape.record("concat", std::move(out), std::move(ids), [outer, row, widths](const Array& g, GradSlots& s) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (Array* gk = s(k)) {
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < widths[k]; ++i) (*gk)[o * widths[k] + i] += g[o * row + offset + i];
        }
      }
      offset += widths[k];
    }
  });
}

/// Half-open range [begin, end) along one axis.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  using namespace detail;
  Tape& tape = common_tape("slice", {&a});
  const Shape& sa = a.shape();
  if (axis >= sa.size() || begin >= end || end > sa[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(sa));
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= sa[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < sa.size(); ++d) inner *= sa[d];
  const std::size_t row = sa[axis] * inner;
  const std::size_t width = (end - begin) * inner;
  const std::size_t offset = begin * inner;
  Shape out_shape = sa;
  out_shape[axis] = end - begin;
  Array out(out_shape);
  const auto& av = a.value().values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(o * row + offset), width,
                out.values().begin() + static_cast<std::ptrdiff_t>(o * width));
  }
  return tape.record("slice", std::move(out), {a.id()}, [outer, row, width, offset](const Array& g, GradSlots& s) {
    if (Array* ga = s(0)) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < width; ++i) (*ga)[o * row + offset + i] += g[o * width + i];
      }
    }
  });
}

/// Row gather from a [V, H] table; output shape is prefix + [H].
inline Tensor embedding_gather(const Tensor& table, std::span<const std::size_t> ids, Shape prefix) {
  using namespace detail;
  Tape& tape = common_tape("embedding_gather", {&table});
  const Shape& st = table.shape();
  if (st.size() != 2) throw DimensionError("embedding_gather: table must be rank 2, got " + shape_str(st));
  if (shape_size(prefix) != ids.size()) {
    throw DimensionError("embedding_gather: " + std::to_string(ids.size()) + " ids for prefix " + shape_str(prefix));
  }
  const std::size_t vocab = st[0];
  const std::size_t h = st[1];
  Shape out_shape = std::move(prefix);
  out_shape.push_back(h);
  Array out(out_shape);
  const auto& tv = table.value().values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw DimensionError("embedding_gather: id " + std::to_string(ids[i]) + " outside table " + shape_str(st));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * h), h,
                out.values().begin() + static_cast<std::ptrdiff_t>(i * h));
  }
  std::vector<std::size_t> saved(ids.begin(), ids.end());
  return tape.record("embedding_gather", std::move(out), {table.id()},
                     [saved = std::move(saved), h](const Array& g, GradSlots& s) {
                       if (Array* gt = s(0)) {
                         for (std::size_t i = 0; i < saved.size(); ++i) {
                           for (std::size_t j = 0; j < h; ++j) (*gt)[saved[i] * h + j] += g[i * h + j];
                         }
                       }
                     });
}

inline Tensor softmax(const Tensor& a) {
  using namespace detail;
  Tape& tape = common_tape("softmax", {&a});
  require_finite("softmax", a.value());
  const std::size_t c = a.shape().empty() ? 1 : a.shape().back();
  const std::size_t rows = a.value().size() / c;
  Array out = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* x = out.data().data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (x[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) x[j] /= z;
  }
  return tape.record("softmax", std::move(out), {a.id()}, [rows, c](const Array& g, GradSlots& s) {
    if (Array* ga = s(0)) {
      const Array& y = s.output();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
        for (std::size_t j = 0; j < c; ++j) (*ga)[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
      }
    }
  });
}

inline Tensor log_softmax(const Tensor& a) {
  using namespace detail;
  Tape& tape = common_tape("log_softmax", {&a});
  require_finite("log_softmax", a.value());
  const std::size_t c = a.shape().empty() ? 1 : a.shape().back();
  const std::size_t rows = a.value().size() / c;
  Array out = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* x = out.data().data() + r * c;
    const double mx = *std::max_element(x, x + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) x[j] -= lse;
  }
  return tape.record("log_softmax", std::move(out), {a.id()}, [rows, c](const Array& g, GradSlots& s) {
    if (Array* ga = s(0)) {
      const Array& y = s.output();
      for (std::size_t r = 0; r < rows; ++r) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < c; ++j) gsum += g[r * c + j];
        for (std::size_t j = 0; j < c; ++j) (*ga)[r * c + j] += g[r * c + j] - std::exp(y[r * c + j]) * gsum;
      }
    }
  });
}

inline constexpr double kLayerNormEps = 1e-6;

/// Normalizes over the last axis, then applies gain and shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  using namespace detail;
  Tape& tape = common_tape("layer_norm", {&x, &gain, &bias});
  const Shape& sx = x.shape();
  if (sx.empty() || gain.shape() != Shape{sx.back()} || bias.shape() != Shape{sx.back()}) {
    throw shape_error("layer_norm", sx, gain.shape());
  }
  const std::size_t h = sx.back();
  const std::size_t rows = x.value().size() / h;
  std::vector<double> xhat(x.value().size());
  std::vector<double> inv_sigma(rows);
  Array out(sx);
  const auto& xv = x.value().values();
  const auto& gv = gain.value().values();
  const auto& bv = bias.value().values();
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < h; ++j) mean += xv[r * h + j];
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double d = xv[r * h + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(h);
    inv_sigma[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < h; ++j) {
      const double xh = (xv[r * h + j] - mean) * inv_sigma[r];
      xhat[r * h + j] = xh;
      out[r * h + j] = xh * gv[j] + bv[j];
    }
  }
  return tape.record(
      "layer_norm", std::move(out), {x.id(), gain.id(), bias.id()},
      [rows, h, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](const Array& g, GradSlots& s) {
        const Array& gv = s.input(1);
        if (Array* gx = s(0)) {
          const double inv_h = 1.0 / static_cast<double>(h);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0;
            double m2 = 0.0;
            for (std::size_t j = 0; j < h; ++j) {
              const double dxh = g[r * h + j] * gv[j];
              m1 += dxh;
              m2 += dxh * xhat[r * h + j];
            }
            m1 *= inv_h;
            m2 *= inv_h;
            for (std::size_t j = 0; j < h; ++j) {
              const double dxh = g[r * h + j] * gv[j];
              (*gx)[r * h + j] += inv_sigma[r] * (dxh - m1 - xhat[r * h + j] * m2);
            }
          }
        }
        if (Array* gg = s(1)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gg)[i % h] += g[i] * xhat[i];
        }
        if (Array* gb = s(2)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % h] += g[i];
        }
      });
}

inline constexpr double kGeluC = 0.7978845608;
inline constexpr double kGeluA = 0.044715;

/// tanh-approximated GELU.
inline Tensor gelu(const Tensor& a) {
  using namespace detail;
  Tape& tape = common_tape("gelu", {&a});
  Array out = a.value();
  for (double& v : out.values()) v = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  return tape.record("gelu", std::move(out), {a.id()}, [](const Array& g, GradSlots& s) {
    if (Array* ga = s(0)) {
      const Array& x = s.input(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x[i];
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        (*ga)[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
    }
  });
}

/// Swaps the last two axes.
inline Tensor transpose(const Tensor& a) {
  using namespace detail;
  Tape& tape = common_tape("transpose", {&a});
  const Shape& sa = a.shape();
  if (sa.size() < 2) throw DimensionError("transpose: rank < 2 for " + shape_str(sa));
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t n = sa.back();
  const std::size_t batch = a.value().size() / (m * n);
  Shape out_shape = sa;
  std::swap(out_shape[sa.size() - 2], out_shape[sa.size() - 1]);
  Array out(out_shape);
  const auto& av = a.value().values();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = av[b * m * n + i * n + j];
    }
  }
  return tape.record("transpose", std::move(out), {a.id()}, [batch, m, n](const Array& g, GradSlots& s) {
    if (Array* ga = s(0)) {
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) (*ga)[b * m * n + i * n + j] += g[b * m * n + j * m + i];
        }
      }
    }
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  using namespace detail;
  Tape& tape = common_tape("reshape", {&a});
  if (shape_size(shape) != a.value().size()) throw shape_error("reshape", a.shape(), shape);
  Array out(std::move(shape), a.value().values());
  return tape.record("reshape", std::move(out), {a.id()}, [](const Array& g, GradSlots& s) {
    if (Array* ga = s(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

inline Tensor reduce_sum(const Tensor& a) {
  using namespace detail;
  Tape& tape = common_tape("reduce_sum", {&a});
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return tape.record("reduce_sum", Array::scalar(total), {a.id()}, [](const Array& g, GradSlots& s) {
    if (Array* ga = s(0)) {
      const double gs = g.item();
      for (double& v : ga->values()) v += gs;
    }
  });
}

inline Tensor reduce_mean(const Tensor& a) {
  using namespace detail;
  Tape& tape = common_tape("reduce_mean", {&a});
  const double n = static_cast<double>(a.value().size());
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return tape.record("reduce_mean", Array::scalar(total / n), {a.id()}, [n](const Array& g, GradSlots& s) {
    if (Array* ga = s(0)) {
      const double gs = g.item() / n;
      for (double& v : ga->values()) v += gs;
    }
  });
}

}  // namespace villa
