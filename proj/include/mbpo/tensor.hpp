// Copyright 2026 The mbpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Dense double-precision tensors with define-by-run reverse-mode autodiff.
//
// Tensors are immutable values: every op returns a fresh tensor and data
// buffers are shared read-only between copies. Gradients are recorded only
// while a GradientTape is alive on the calling thread and at least one input
// was produced by (or watched on) that tape. Separate threads may drive
// separate tapes concurrently.
//
//   GradientTape tape;
//   Tensor w = tape.watch(weights);
//   Tensor loss = sum(matmul(x, w));
//   Gradients grads = tape.backward(loss);
//   grads[w];  // same shape as weights

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mbpo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;
using NodeId = std::int64_t;
inline constexpr NodeId kNoNode = -1;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a,
                                     const Shape& b,
                                     const std::string& what = {}) {
  std::string msg = op + ": incompatible shapes " + to_string(a) + " and " +
                    to_string(b);
  if (!what.empty()) msg += " (" + what + ")";
  throw ShapeError(msg);
}

class GradientTape;

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(data))) {
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("Tensor: zero-sized dimension in " + to_string(shape_));
    }
    if (numel(shape_) != data_->size()) {
      throw ShapeError("Tensor: shape " + to_string(shape_) + " needs " +
                       std::to_string(numel(shape_)) + " values, got " +
                       std::to_string(data_->size()));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor full(Shape shape, double v) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::span<const double> data() const { return *data_; }
  const std::vector<double>& values() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not a scalar");
    return (*data_)[0];
  }

  NodeId node() const { return node_; }
  bool tracked() const { return node_ != kNoNode; }

  // Same values, no graph identity.
  Tensor detach() const {
    Tensor t = *this;
    t.node_ = kNoNode;
    t.tape_id_ = 0;
    return t;
  }

  std::shared_ptr<const std::vector<double>> buffer() const { return data_; }

 private:
  friend class GradientTape;
  friend struct TapeAccess;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  NodeId node_ = kNoNode;
  std::uint64_t tape_id_ = 0;
};

// Gradient buffers of each input, indexed like the op's input list. An entry
// is null when that input does not need a gradient.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<double* const> grad_in)>;

class Gradients {
 public:
  const Tensor& operator[](const Tensor& leaf) const {
    auto it = grads_.find(leaf.node());
    if (it == grads_.end()) throw TapeError("Gradients: tensor is not a watched leaf of this tape");
    return it->second;
  }
  const Tensor& at(NodeId id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw TapeError("Gradients: unknown node " + std::to_string(id));
    return it->second;
  }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class GradientTape;
  std::unordered_map<NodeId, Tensor> grads_;
};

namespace detail {
inline thread_local GradientTape* active_tape = nullptr;
inline std::atomic<std::uint64_t> next_tape_id{1};
}  // namespace detail

class GradientTape {
 public:
  GradientTape() : id_(detail::next_tape_id.fetch_add(1)), previous_(detail::active_tape) {
    detail::active_tape = this;
  }
  ~GradientTape() { detail::active_tape = previous_; }
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  // Marks `leaf` as requiring gradients; the returned copy carries its node.
  Tensor watch(const Tensor& leaf) {
    ensure_open("watch");
    Tensor t = leaf.detach();
    t.node_ = static_cast<NodeId>(nodes_.size());
    t.tape_id_ = id_;
    nodes_.push_back(Node{t.shape(), {}, {}, true});
    return t;
  }

  bool consumed() const { return consumed_; }
  std::size_t node_count() const { return nodes_.size(); }

  Gradients backward(const Tensor& loss) {
    ensure_open("backward");
    if (loss.size() != 1 || loss.rank() != 0) {
      throw TapeError("backward: root must be a scalar, got shape " + to_string(loss.shape()));
    }
    consumed_ = true;
    Gradients out;
    std::vector<std::vector<double>> grads(nodes_.size());
    if (loss.tracked()) {
      if (loss.tape_id_ != id_) throw TapeError("backward: loss was recorded on a different tape");
      grads[static_cast<std::size_t>(loss.node())] = {1.0};
      std::vector<double*> in_ptrs;
      for (std::size_t k = nodes_.size(); k-- > 0;) {
        Node& node = nodes_[k];
        if (grads[k].empty() || node.leaf) continue;
        in_ptrs.assign(node.inputs.size(), nullptr);
        for (std::size_t j = 0; j < node.inputs.size(); ++j) {
          const NodeId in = node.inputs[j];
          if (in == kNoNode) continue;
          auto& g = grads[static_cast<std::size_t>(in)];
          if (g.empty()) g.assign(numel(nodes_[static_cast<std::size_t>(in)].shape), 0.0);
          in_ptrs[j] = g.data();
        }
        node.backward(grads[k], in_ptrs);
        node.backward = nullptr;  // release saved activations early
        if (!node.leaf) std::vector<double>().swap(grads[k]);
      }
    }
    for (std::size_t k = 0; k < nodes_.size(); ++k) {
      if (!nodes_[k].leaf) continue;
      auto& g = grads[k];
      if (g.empty()) g.assign(numel(nodes_[k].shape), 0.0);
      out.grads_.emplace(static_cast<NodeId>(k), Tensor(nodes_[k].shape, std::move(g)));
    }
    return out;
  }

 private:
  friend struct TapeAccess;

  struct Node {
    Shape shape;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool leaf = false;
  };

  void ensure_open(const char* what) const {
    if (consumed_) throw TapeError(std::string(what) + ": tape already consumed by a backward pass");
  }

  std::uint64_t id_;
  GradientTape* previous_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Glue used by primitive implementations to attach results to the active tape.
struct TapeAccess {
  template <typename MakeBackward>
  static Tensor finish(Shape shape, std::vector<double> data,
                       std::initializer_list<const Tensor*> inputs, MakeBackward&& make_backward) {
    Tensor out(std::move(shape), std::move(data));
    bool any = false;
    for (const Tensor* in : inputs) any = any || in->tracked();
    if (!any) return out;
    GradientTape* tape = detail::active_tape;
    if (tape == nullptr) throw TapeError("op on tracked tensors without an active tape");
    tape->ensure_open("record");
    Node node;
    node.shape = out.shape();
    for (const Tensor* in : inputs) {
      if (in->tracked() && in->tape_id_ != tape->id_) {
        throw TapeError("op mixes tensors from different tapes");
      }
      node.inputs.push_back(in->node_);
    }
    node.backward = make_backward();
    out.node_ = static_cast<NodeId>(tape->nodes_.size());
    out.tape_id_ = tape->id_;
    tape->nodes_.push_back(std::move(node));
    return out;
  }

  static Tensor finish_many(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                            BackwardFn backward) {
    Tensor out(std::move(shape), std::move(data));
    bool any = false;
    for (const auto& in : inputs) any = any || in.tracked();
    if (!any) return out;
    GradientTape* tape = detail::active_tape;
    if (tape == nullptr) throw TapeError("op on tracked tensors without an active tape");
    tape->ensure_open("record");
    Node node;
    node.shape = out.shape();
    for (const auto& in : inputs) {
      if (in.tracked() && in.tape_id_ != tape->id_) throw TapeError("op mixes tensors from different tapes");
      node.inputs.push_back(in.node_);
    }
    node.backward = std::move(backward);
    out.node_ = static_cast<NodeId>(tape->nodes_.size());
    out.tape_id_ = tape->id_;
    tape->nodes_.push_back(std::move(node));
    return out;
  }

 private:
  using Node = GradientTape::Node;
};

// ---------------------------------------------------------------------------
// Elementwise and broadcasting helpers.

namespace detail {

// `b` broadcasts over `a` when it equals a trailing block of a's shape.
inline std::size_t broadcast_block(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size()) shape_error(op, a, b);
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) shape_error(op, a, b, "only leading-batch broadcast is supported");
  }
  return numel(b);
}

template <typename Fn>
std::vector<double> unary(const Tensor& x, Fn&& f) {
  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t block = detail::broadcast_block("add", a.shape(), b.shape());
  std::vector<double> out(a.values());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % block];
  return TapeAccess::finish(a.shape(), std::move(out), {&a, &b}, [block] {
    return BackwardFn([block](std::span<const double> g, std::span<double* const> gi) {
      if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
      if (gi[1]) for (std::size_t i = 0; i < g.size(); ++i) gi[1][i % block] += g[i];
    });
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t block = detail::broadcast_block("sub", a.shape(), b.shape());
  std::vector<double> out(a.values());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i % block];
  return TapeAccess::finish(a.shape(), std::move(out), {&a, &b}, [block] {
    return BackwardFn([block](std::span<const double> g, std::span<double* const> gi) {
      if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
      if (gi[1]) for (std::size_t i = 0; i < g.size(); ++i) gi[1][i % block] -= g[i];
    });
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t block = detail::broadcast_block("mul", a.shape(), b.shape());
  std::vector<double> out(a.values());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i % block];
  return TapeAccess::finish(a.shape(), std::move(out), {&a, &b}, [&] {
    return BackwardFn([block, ad = a.buffer(), bb = b.buffer()](std::span<const double> g,
                                                                std::span<double* const> gi) {
      const auto& av = *ad;
      const auto& bv = *bb;
      if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * bv[i % block];
      if (gi[1]) for (std::size_t i = 0; i < g.size(); ++i) gi[1][i % block] += g[i] * av[i];
    });
  });
}

inline Tensor scale(const Tensor& x, double c) {
  auto out = detail::unary(x, [c](double v) { return v * c; });
  return TapeAccess::finish(x.shape(), std::move(out), {&x}, [c] {
    return BackwardFn([c](std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * c;
    });
  });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  auto out = detail::unary(x, [c](double v) { return v + c; });
  return TapeAccess::finish(x.shape(), std::move(out), {&x}, [] {
    return BackwardFn([](std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
    });
  });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor exp(const Tensor& x) {
  auto out = detail::unary(x, [](double v) { return std::exp(v); });
  auto saved = std::make_shared<const std::vector<double>>(out);
  return TapeAccess::finish(x.shape(), std::move(out), {&x}, [saved] {
    return BackwardFn([saved](std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * (*saved)[i];
    });
  });
}

inline Tensor relu(const Tensor& x) {
  auto out = detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; });
  return TapeAccess::finish(x.shape(), std::move(out), {&x}, [&] {
    return BackwardFn([xd = x.buffer()](std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) if ((*xd)[i] > 0.0) gi[0][i] += g[i];
    });
  });
}

// Elementwise min; ties route the gradient to `a`.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("minimum", a.shape(), b.shape());
  std::vector<double> out(a.size());
  std::vector<char> pick_a(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    pick_a[i] = a[i] <= b[i];
    out[i] = pick_a[i] ? a[i] : b[i];
  }
  return TapeAccess::finish(a.shape(), std::move(out), {&a, &b}, [&] {
    return BackwardFn([mask = std::move(pick_a)](std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (mask[i]) {
          if (gi[0]) gi[0][i] += g[i];
        } else if (gi[1]) {
          gi[1][i] += g[i];
        }
      }
    });
  });
}

// Clamp to [lo, hi]; zero gradient where the bound is active.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw DomainError("clamp: lo must not exceed hi");
  auto out = detail::unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); });
  return TapeAccess::finish(x.shape(), std::move(out), {&x}, [&] {
    return BackwardFn([xd = x.buffer(), lo, hi](std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = (*xd)[i];
        if (v > lo && v < hi) gi[0][i] += g[i];
      }
    });
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return TapeAccess::finish(Shape{}, {s}, {&x}, [n = x.size()] {
    return BackwardFn([n](std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
    });
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation.

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", x.shape(), shape, "element counts differ");
  return TapeAccess::finish(std::move(shape), std::vector<double>(x.values()), {&x}, [] {
    return BackwardFn([](std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
    });
  });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + to_string(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return TapeAccess::finish(Shape{n, m}, std::move(out), {&x}, [m, n] {
    return BackwardFn([m, n](std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gi[0][i * n + j] += g[j * m + i];
    });
  });
}

namespace detail {
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t inner = 1;
};
inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}
}  // namespace detail

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_error("concat", first, s, "rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) shape_error("concat", first, s);
    }
    out_shape[axis] += s[axis];
  }
  const auto split = detail::split_at(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> widths;
  const std::size_t out_row = out_shape[axis] * split.inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * split.inner;
    widths.push_back(w);
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_row + offset));
    }
    offset += w;
  }
  return TapeAccess::finish_many(out_shape, std::move(out), parts,
                                 [widths, outer = split.outer, out_row](std::span<const double> g,
                                                                         std::span<double* const> gi) {
                                   std::size_t off = 0;
                                   for (std::size_t k = 0; k < widths.size(); ++k) {
                                     const std::size_t w = widths[k];
                                     if (gi[k]) {
                                       for (std::size_t o = 0; o < outer; ++o)
                                         for (std::size_t i = 0; i < w; ++i) gi[k][o * w + i] += g[o * out_row + off + i];
                                     }
                                     off += w;
                                   }
                                 });
}

// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank()) throw ShapeError("slice: axis out of range for " + to_string(x.shape()));
  if (begin >= end || end > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for shape " + to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const auto split = detail::split_at(x.shape(), axis);
  const std::size_t in_row = x.dim(axis) * split.inner;
  const std::size_t w = (end - begin) * split.inner;
  const std::size_t off = begin * split.inner;
  std::vector<double> out(numel(out_shape));
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(o * in_row + off), w,
                out.begin() + static_cast<std::ptrdiff_t>(o * w));
  }
  return TapeAccess::finish(std::move(out_shape), std::move(out), {&x}, [=, outer = split.outer] {
    return BackwardFn([=](std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < w; ++i) gi[0][o * in_row + off + i] += g[o * w + i];
    });
  });
}

// out.flat[i] = x.flat[index[i]]; gradients scatter-add back.
inline Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape out_shape) {
  if (numel(out_shape) != index.size()) shape_error("gather", Shape{index.size()}, out_shape, "index count");
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.size()) throw ShapeError("gather: index " + std::to_string(index[i]) + " out of range for " + to_string(x.shape()));
    out[i] = x[index[i]];
  }
  return TapeAccess::finish(std::move(out_shape), std::move(out), {&x}, [&] {
    return BackwardFn([idx = std::move(index)](std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t i = 0; i < g.size(); ++i) gi[0][idx[i]] += g[i];
    });
  });
}

// Rows of `table` [V, d] selected by `ids`, giving [ids.size(), d].
inline Tensor embedding_gather(const Tensor& table, std::span<const std::size_t> ids) {
  if (table.rank() != 2) throw ShapeError("embedding_gather: table must be rank 2, got " + to_string(table.shape()));
  if (ids.empty()) throw ShapeError("embedding_gather: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= vocab) {
      throw DomainError("embedding_gather: id " + std::to_string(ids[r]) + " out of range for table " +
                        to_string(table.shape()));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return TapeAccess::finish(Shape{ids.size(), d}, std::move(out), {&table}, [&] {
    return BackwardFn([rows = std::vector<std::size_t>(ids.begin(), ids.end()), d](std::span<const double> g,
                                                                                  std::span<double* const> gi) {
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) gi[0][rows[r] * d + j] += g[r * d + j];
    });
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.

namespace detail {
// c[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}
// c[m,k] += g[m,n] * b[k,n]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * n;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
      ci[p] += s;
    }
  }
}
// c[k,n] += a[m,k]^T * g[m,n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return TapeAccess::finish(Shape{m, n}, std::move(out), {&a, &b}, [&] {
    return BackwardFn([ad = a.buffer(), bd = b.buffer(), m, k, n](std::span<const double> g,
                                                                  std::span<double* const> gi) {
      if (gi[0]) detail::gemm_nt(g.data(), bd->data(), gi[0], m, n, k);
      if (gi[1]) detail::gemm_tn(ad->data(), g.data(), gi[1], m, k, n);
    });
  });
}

// ---------------------------------------------------------------------------
// Normalization and probability ops, all over the last axis.

namespace detail {
inline std::size_t last_dim(const char* op, const Tensor& x) {
  if (x.rank() == 0) throw ShapeError(std::string(op) + ": needs rank >= 1");
  return x.shape().back();
}
}  // namespace detail

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t d = detail::last_dim("layer_norm", x);
  if (gamma.shape() != Shape{d}) shape_error("layer_norm", x.shape(), gamma.shape(), "gamma");
  if (beta.shape() != Shape{d}) shape_error("layer_norm", x.shape(), beta.shape(), "beta");
  const std::size_t rows = x.size() / d;
  std::vector<double> xhat(x.size()), out(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mean) * is;
      out[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
    }
  }
  return TapeAccess::finish(x.shape(), std::move(out), {&x, &gamma, &beta}, [&] {
    return BackwardFn([xh = std::move(xhat), is = std::move(inv_std), gm = gamma.buffer(), d, rows](
                          std::span<const double> g, std::span<double* const> gi) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * d;
        const double* hr = xh.data() + r * d;
        if (gi[1]) for (std::size_t j = 0; j < d; ++j) gi[1][j] += gr[j] * hr[j];
        if (gi[2]) for (std::size_t j = 0; j < d; ++j) gi[2][j] += gr[j];
        if (gi[0]) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = gr[j] * (*gm)[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
          }
          mean_dh /= static_cast<double>(d);
          mean_dh_h /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = gr[j] * (*gm)[j];
            gi[0][r * d + j] += is[r] * (dh - mean_dh - hr[j] * mean_dh_h);
          }
        }
      }
    });
  });
}

inline Tensor softmax(const Tensor& x) {
  const std::size_t d = detail::last_dim("softmax", x);
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double* o = out.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (o[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  auto saved = std::make_shared<const std::vector<double>>(out);
  return TapeAccess::finish(x.shape(), std::move(out), {&x}, [&] {
    return BackwardFn([saved, d, rows](std::span<const double> g, std::span<double* const> gi) {
      const auto& p = *saved;
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * p[r * d + j];
        for (std::size_t j = 0; j < d; ++j) gi[0][r * d + j] += p[r * d + j] * (g[r * d + j] - dot);
      }
    });
  });
}

inline Tensor log_softmax(const Tensor& x) {
  const std::size_t d = detail::last_dim("log_softmax", x);
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(xr[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = std::min(0.0, xr[j] - lse);
  }
  auto saved = std::make_shared<const std::vector<double>>(out);
  return TapeAccess::finish(x.shape(), std::move(out), {&x}, [&] {
    return BackwardFn([saved, d, rows](std::span<const double> g, std::span<double* const> gi) {
      const auto& lp = *saved;
      for (std::size_t r = 0; r < rows; ++r) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < d; ++j) gsum += g[r * d + j];
        for (std::size_t j = 0; j < d; ++j) gi[0][r * d + j] += g[r * d + j] - std::exp(lp[r * d + j]) * gsum;
      }
    });
  });
}

// x[N, V], picks x[r, index[r]] -> [N].
inline Tensor pick(const Tensor& x, std::span<const std::size_t> index) {
  if (x.rank() != 2 || x.dim(0) != index.size()) shape_error("pick", x.shape(), Shape{index.size()});
  const std::size_t v = x.dim(1);
  std::vector<std::size_t> flat(index.size());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= v) throw DomainError("pick: index " + std::to_string(index[r]) + " out of range for width " + std::to_string(v));
    flat[r] = r * v + index[r];
  }
  return gather(x, std::move(flat), Shape{index.size()});
}

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    shape_error("cross_entropy", logits.shape(), Shape{targets.size()});
  }
  return scale(sum(pick(log_softmax(logits), targets)), -1.0 / static_cast<double>(targets.size()));
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

}  // namespace mbpo
