// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "occfit/common.hpp"

namespace occfit {

using NodeId = int32_t;
constexpr NodeId kInvalidNode = -1;

enum class OpKind : uint8_t {
  kLeaf,     // optimizable input, value settable between sweeps
  kConst,    // literal
  kAdd, kSub, kMul, kDiv,
  kNeg, kExp, kLog, kSqrt, kAbs,
  kRelu,     // max(x, 0), subgradient 0 at x == 0
  kSigmoid,
  kMin2, kMax2,  // tie resolves to the first input
  kLinComb,  // bias + sum(coef_i * x_i); coefs live in the partials array
  kDot,      // sum(x_i * y_i); args interleaved [x0, y0, x1, y1, ...]
};

// Append-only reverse-mode tape. Nodes are stored in topological order by
// construction (every input id is smaller than the node's own id), local
// partials are computed at forward time, so the reverse sweep is a single
// saxpy pass from the output down to the leaves.
//
// Real is float for fitting and double for gradient checks.
template <class Real>
class Tape {
 public:
  Tape() = default;

  size_t size() const { return kind_.size(); }
  Real value(NodeId id) const { check_id(id); return val_[size_t(id)]; }
  OpKind kind(NodeId id) const { check_id(id); return kind_[size_t(id)]; }

  NodeId leaf(Real v) { return push0(OpKind::kLeaf, v); }
  NodeId constant(Real v) { return push0(OpKind::kConst, v); }

  // Updates a parameter in place; the tape must be rewound before the next
  // forward build so downstream values are recomputed.
  void set_leaf(NodeId id, Real v) {
    check_id(id);
    if (kind_[size_t(id)] != OpKind::kLeaf)
      throw StructuralError("set_leaf on a non-leaf node");
    val_[size_t(id)] = v;
  }

  // Truncates the tape back to its first keep_count nodes (typically the
  // parameter block) so storage is reused across optimization steps.
  void rewind(size_t keep_count) {
    if (keep_count > size())
      throw StructuralError("rewind past end of tape");
    if (keep_count == size()) return;
    size_t aw = size_t(arg_begin_[keep_count]);
    kind_.resize(keep_count);
    val_.resize(keep_count);
    aux_.resize(keep_count);
    arg_begin_.resize(keep_count);
    arg_end_.resize(keep_count);
    args_.resize(aw);
    partials_.resize(aw);
  }

  NodeId add(NodeId a, NodeId b) {
    return push2(OpKind::kAdd, a, b, value(a) + value(b), Real(1), Real(1));
  }
  NodeId sub(NodeId a, NodeId b) {
    return push2(OpKind::kSub, a, b, value(a) - value(b), Real(1), Real(-1));
  }
  NodeId mul(NodeId a, NodeId b) {
    Real va = value(a), vb = value(b);
    return push2(OpKind::kMul, a, b, va * vb, vb, va);
  }
  NodeId div(NodeId a, NodeId b) {
    Real va = value(a), vb = value(b);
    if (vb == Real(0)) throw NumericError("division by zero on tape");
    return push2(OpKind::kDiv, a, b, va / vb, Real(1) / vb, -va / (vb * vb));
  }
  NodeId neg(NodeId a) { return push1(OpKind::kNeg, a, -value(a), Real(-1)); }
  NodeId exp_(NodeId a) {
    Real v = std::exp(value(a));
    return push1(OpKind::kExp, a, v, v);
  }
  NodeId log_(NodeId a) {
    Real x = value(a);
    if (!(x > Real(0))) throw DomainError("log of non-positive tape value");
    return push1(OpKind::kLog, a, std::log(x), Real(1) / x);
  }
  NodeId sqrt_(NodeId a) {
    Real x = value(a);
    if (x < Real(0)) throw DomainError("sqrt of negative tape value");
    Real v = std::sqrt(x);
    // partial pinned to 0 at x == 0 so a flat zero input cannot emit inf
    return push1(OpKind::kSqrt, a, v, x == Real(0) ? Real(0) : Real(0.5) / v);
  }
  NodeId abs_(NodeId a) {
    Real x = value(a);
    Real p = x > Real(0) ? Real(1) : (x < Real(0) ? Real(-1) : Real(0));
    return push1(OpKind::kAbs, a, std::fabs(x), p);
  }
  NodeId relu(NodeId a) {
    Real x = value(a);
    return push1(OpKind::kRelu, a, x > Real(0) ? x : Real(0),
                 x > Real(0) ? Real(1) : Real(0));
  }
  NodeId sigmoid(NodeId a) {
    Real v = stable_sigmoid(value(a));
    return push1(OpKind::kSigmoid, a, v, v * (Real(1) - v));
  }
  NodeId min2(NodeId a, NodeId b) {
    bool first = value(a) <= value(b);
    return push2(OpKind::kMin2, a, b, first ? value(a) : value(b),
                 first ? Real(1) : Real(0), first ? Real(0) : Real(1));
  }
  NodeId max2(NodeId a, NodeId b) {
    bool first = value(a) >= value(b);
    return push2(OpKind::kMax2, a, b, first ? value(a) : value(b),
                 first ? Real(1) : Real(0), first ? Real(0) : Real(1));
  }

  // value = bias + sum coefs[i] * value(ids[i]); the workhorse for trilinear
  // interpolation, finite-difference stencils and weighted reductions.
  NodeId lincomb(std::span<const NodeId> ids, std::span<const Real> coefs,
                 Real bias = Real(0)) {
    if (ids.size() != coefs.size())
      throw StructuralError("lincomb ids/coefs size mismatch");
    Real v = bias;
    for (size_t i = 0; i < ids.size(); ++i) v += coefs[i] * value(ids[i]);
    begin_node(OpKind::kLinComb, v, bias);
    for (size_t i = 0; i < ids.size(); ++i) push_arg(ids[i], coefs[i]);
    return end_node();
  }

  NodeId dot(std::span<const NodeId> xs, std::span<const NodeId> ys) {
    if (xs.size() != ys.size())
      throw StructuralError("dot operand size mismatch");
    Real v = Real(0);
    for (size_t i = 0; i < xs.size(); ++i) v += value(xs[i]) * value(ys[i]);
    begin_node(OpKind::kDot, v, Real(0));
    for (size_t i = 0; i < xs.size(); ++i) {
      push_arg(xs[i], value(ys[i]));
      push_arg(ys[i], value(xs[i]));
    }
    return end_node();
  }

  NodeId sum(std::span<const NodeId> ids) {
    Real v = Real(0);
    for (NodeId n : ids) v += value(n);
    NodeId id = begin_node(OpKind::kLinComb, v, Real(0));
    for (NodeId n : ids) push_arg(n, Real(1));
    return end_node();
  }

  // One reverse sweep from `output`; fills the internal adjoint buffer and
  // returns it. Valid until the next tape mutation. Every node at or below
  // `output` is visited exactly once (see last_sweep_visits).
  const std::vector<Real>& backward(NodeId output) {
    check_id(output);
    adjoint_.assign(size(), Real(0));
    adjoint_[size_t(output)] = Real(1);
    last_visits_ = 0;
    for (NodeId i = output; i >= 0; --i) {
      ++last_visits_;
      Real adj = adjoint_[size_t(i)];
      if (adj == Real(0)) continue;
      uint32_t b = arg_begin_[size_t(i)], e = arg_end_[size_t(i)];
      for (uint32_t j = b; j < e; ++j)
        adjoint_[size_t(args_[j])] += adj * partials_[j];
    }
    return adjoint_;
  }

  size_t last_sweep_visits() const { return last_visits_; }

  // Recomputes every value from its stored operation and compares bitwise
  // against the cached forward values.
  bool replay_matches() const {
    std::vector<Real> v(size());
    for (size_t i = 0; i < size(); ++i) {
      v[i] = replay_node(i, v);
      if (std::memcmp(&v[i], &val_[i], sizeof(Real)) != 0) return false;
    }
    return true;
  }

 private:
  NodeId push0(OpKind k, Real v) {
    begin_node(k, v, Real(0));
    return end_node();
  }
  NodeId push1(OpKind k, NodeId a, Real v, Real pa) {
    check_id(a);
    begin_node(k, v, Real(0));
    push_arg(a, pa);
    return end_node();
  }
  NodeId push2(OpKind k, NodeId a, NodeId b, Real v, Real pa, Real pb) {
    check_id(a);
    check_id(b);
    begin_node(k, v, Real(0));
    push_arg(a, pa);
    push_arg(b, pb);
    return end_node();
  }

  NodeId begin_node(OpKind k, Real v, Real aux) {
    kind_.push_back(k);
    val_.push_back(v);
    aux_.push_back(aux);
    arg_begin_.push_back(uint32_t(args_.size()));
    arg_end_.push_back(uint32_t(args_.size()));
    return NodeId(kind_.size() - 1);
  }
  void push_arg(NodeId a, Real partial) {
    // topological order: inputs must already exist
    if (a < 0 || size_t(a) >= kind_.size() - 1)
      throw StructuralError("tape input id out of order: " + std::to_string(a));
    args_.push_back(a);
    partials_.push_back(partial);
    arg_end_.back() = uint32_t(args_.size());
  }
  NodeId end_node() { return NodeId(kind_.size() - 1); }

  void check_id(NodeId id) const {
    if (id < 0 || size_t(id) >= kind_.size())
      throw StructuralError("unknown tape node id: " + std::to_string(id));
  }

  static Real stable_sigmoid(Real x) {
    if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
    Real e = std::exp(x);
    return e / (Real(1) + e);
  }

  Real replay_node(size_t i, const std::vector<Real>& v) const {
    uint32_t b = arg_begin_[i], e = arg_end_[i];
    auto a0 = [&] { return v[size_t(args_[b])]; };
    auto a1 = [&] { return v[size_t(args_[b + 1])]; };
    switch (kind_[i]) {
      case OpKind::kLeaf:
      case OpKind::kConst: return val_[i];
      case OpKind::kAdd: return a0() + a1();
      case OpKind::kSub: return a0() - a1();
      case OpKind::kMul: return a0() * a1();
      case OpKind::kDiv: return a0() / a1();
      case OpKind::kNeg: return -a0();
      case OpKind::kExp: return std::exp(a0());
      case OpKind::kLog: return std::log(a0());
      case OpKind::kSqrt: return std::sqrt(a0());
      case OpKind::kAbs: return std::fabs(a0());
      case OpKind::kRelu: return a0() > Real(0) ? a0() : Real(0);
      case OpKind::kSigmoid: return stable_sigmoid(a0());
      case OpKind::kMin2: return a0() <= a1() ? a0() : a1();
      case OpKind::kMax2: return a0() >= a1() ? a0() : a1();
      case OpKind::kLinComb: {
        Real s = aux_[i];
        for (uint32_t j = b; j < e; ++j) s += partials_[j] * v[size_t(args_[j])];
        return s;
      }
      case OpKind::kDot: {
        Real s = Real(0);
        for (uint32_t j = b; j + 1 < e; j += 2)
          s += v[size_t(args_[j])] * v[size_t(args_[j + 1])];
        return s;
      }
    }
    throw StructuralError("unknown op kind in replay");
  }

  std::vector<OpKind> kind_;
  std::vector<Real> val_;
  std::vector<Real> aux_;  // lincomb bias, unused elsewhere
  std::vector<uint32_t> arg_begin_, arg_end_;
  std::vector<NodeId> args_;
  std::vector<Real> partials_;
  std::vector<Real> adjoint_;
  size_t last_visits_ = 0;
};

// Accumulated partials of one output with respect to a requested set of
// parameter ids. Each requested id appears exactly once; ids the sweep never
// reached report 0.
template <class Real>
struct GradientMap {
  std::vector<NodeId> ids;
  std::vector<Real> grads;

  Real at(NodeId id) const {
    auto it = index_.find(id);
    if (it == index_.end())
      throw StructuralError("gradient queried for unrequested id: " +
                            std::to_string(id));
    return grads[it->second];
  }

  void build_index() {
    index_.clear();
    index_.reserve(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
      if (!index_.emplace(ids[i], i).second)
        throw StructuralError("duplicate parameter id requested: " +
                              std::to_string(ids[i]));
    }
  }

 private:
  std::unordered_map<NodeId, size_t> index_;
};

template <class Real>
GradientMap<Real> grad(Tape<Real>& tape, NodeId output,
                       std::span<const NodeId> params) {
  const std::vector<Real>& adj = tape.backward(output);
  GradientMap<Real> g;
  g.ids.assign(params.begin(), params.end());
  g.grads.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    NodeId id = params[i];
    if (id < 0 || size_t(id) >= adj.size())
      throw StructuralError("gradient requested for unknown id: " +
                            std::to_string(id));
    g.grads[i] = adj[size_t(id)];
  }
  g.build_index();
  return g;
}

// Lightweight handle used to write numeric code naturally; carries the tape
// pointer so free operators can dispatch.
template <class Real>
struct Var {
  Tape<Real>* tape = nullptr;
  NodeId id = kInvalidNode;

  Var() = default;
  Var(Tape<Real>* t, NodeId i) : tape(t), id(i) {}

  Real value() const { return tape->value(id); }
};

template <class Real>
double scalar_value(const Var<Real>& v) {
  return double(v.value());
}

namespace detail {
template <class Real>
inline void same_tape(const Var<Real>& a, const Var<Real>& b) {
  if (a.tape != b.tape)
    throw StructuralError("mixing nodes from different tapes");
}
}  // namespace detail

template <class Real>
inline Var<Real> operator+(Var<Real> a, Var<Real> b) {
  detail::same_tape(a, b);
  return {a.tape, a.tape->add(a.id, b.id)};
}
template <class Real>
inline Var<Real> operator-(Var<Real> a, Var<Real> b) {
  detail::same_tape(a, b);
  return {a.tape, a.tape->sub(a.id, b.id)};
}
template <class Real>
inline Var<Real> operator*(Var<Real> a, Var<Real> b) {
  detail::same_tape(a, b);
  return {a.tape, a.tape->mul(a.id, b.id)};
}
template <class Real>
inline Var<Real> operator/(Var<Real> a, Var<Real> b) {
  detail::same_tape(a, b);
  return {a.tape, a.tape->div(a.id, b.id)};
}
template <class Real>
inline Var<Real> operator-(Var<Real> a) {
  return {a.tape, a.tape->neg(a.id)};
}

// Affine combinations with plain constants fold into a single lincomb node.
template <class Real>
inline Var<Real> affine(Var<Real> a, double scale, double bias) {
  NodeId ids[1] = {a.id};
  Real cs[1] = {Real(scale)};
  return {a.tape, a.tape->lincomb(ids, cs, Real(bias))};
}

template <class Real>
inline Var<Real> operator+(Var<Real> a, double c) { return affine(a, 1.0, c); }
template <class Real>
inline Var<Real> operator+(double c, Var<Real> a) { return affine(a, 1.0, c); }
template <class Real>
inline Var<Real> operator-(Var<Real> a, double c) { return affine(a, 1.0, -c); }
template <class Real>
inline Var<Real> operator-(double c, Var<Real> a) { return affine(a, -1.0, c); }
template <class Real>
inline Var<Real> operator*(Var<Real> a, double c) { return affine(a, c, 0.0); }
template <class Real>
inline Var<Real> operator*(double c, Var<Real> a) { return affine(a, c, 0.0); }
template <class Real>
inline Var<Real> operator/(Var<Real> a, double c) {
  if (c == 0.0) throw NumericError("division by zero on tape");
  return affine(a, 1.0 / c, 0.0);
}
template <class Real>
inline Var<Real> operator/(double c, Var<Real> a) {
  return Var<Real>{a.tape, a.tape->constant(Real(c))} / a;
}

template <class Real>
inline Var<Real> exp(Var<Real> a) { return {a.tape, a.tape->exp_(a.id)}; }
template <class Real>
inline Var<Real> log(Var<Real> a) { return {a.tape, a.tape->log_(a.id)}; }
template <class Real>
inline Var<Real> sqrt(Var<Real> a) { return {a.tape, a.tape->sqrt_(a.id)}; }
template <class Real>
inline Var<Real> abs(Var<Real> a) { return {a.tape, a.tape->abs_(a.id)}; }
template <class Real>
inline Var<Real> relu(Var<Real> a) { return {a.tape, a.tape->relu(a.id)}; }
template <class Real>
inline Var<Real> sigmoid(Var<Real> a) { return {a.tape, a.tape->sigmoid(a.id)}; }
template <class Real>
inline Var<Real> vmin(Var<Real> a, Var<Real> b) {
  detail::same_tape(a, b);
  return {a.tape, a.tape->min2(a.id, b.id)};
}
template <class Real>
inline Var<Real> vmax(Var<Real> a, Var<Real> b) {
  detail::same_tape(a, b);
  return {a.tape, a.tape->max2(a.id, b.id)};
}

// Central-difference gradient oracle. f must be a deterministic function of
// the point; non-finite samples raise NumericError naming the coordinate.
inline std::vector<double> finite_difference(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> point, double eps) {
  if (eps <= 0) throw DomainError("finite_difference eps must be positive");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    double keep = x[i];
    x[i] = keep + eps;
    double fp = f(x);
    x[i] = keep - eps;
    double fm = f(x);
    x[i] = keep;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_difference: non-finite value at coordinate " +
                         std::to_string(i));
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

}  // namespace occfit
