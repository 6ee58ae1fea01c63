#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "setinfer/array.hpp"

namespace setinfer::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the dynamically built computation graph. Interior nodes hold
/// a backward closure that pulls this node's gradient and accumulates into
/// the parents' gradients.
struct Node {
  Array value;
  Array grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool is_leaf = false;
  std::string name;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (!has_grad) {
      grad = Array(value.shape(), 0.0);
      has_grad = true;
    }
  }

  void add_grad(const Array& g) {
    ensure_grad();
    double* dst = grad.data();
    const double* src = g.data();
    const std::int64_t n = grad.size();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
  }

  void drop_grad() {
    grad = Array();
    has_grad = false;
  }
};

/// Value-semantic handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : n_(std::move(n)) {}

  static Var constant(Array v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->op = "const";
    return Var(std::move(n));
  }

  static Var constant(double v) { return constant(Array::scalar(v)); }

  static Var leaf(std::string name, Array v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->is_leaf = true;
    n->name = std::move(name);
    n->op = "param";
    return Var(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const Array& value() const { return n_->value; }
  Array& mutable_value() { return n_->value; }
  const Shape& shape() const { return n_->value.shape(); }
  double scalar() const { return n_->value.item(); }
  bool requires_grad() const { return n_->requires_grad; }
  const NodePtr& node() const { return n_; }

 private:
  NodePtr n_;
};

namespace detail {

inline Var make_node(const char* op, Array value, std::vector<Var> parents,
                     std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  n->parents.reserve(parents.size());
  for (const auto& p : parents) {
    rg = rg || p.node()->requires_grad;
    n->parents.push_back(p.node());
  }
  n->requires_grad = rg;
  if (rg) n->backward_fn = std::move(backward_fn);
  return Var(std::move(n));
}

struct BinPlan {
  Shape out;
  std::vector<std::int64_t> sa, sb;  // per-output-axis element strides, 0 on broadcast axes
  bool same = false;
};

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 0);
  std::int64_t acc = 1;
  for (std::int64_t k = static_cast<std::int64_t>(s.size()) - 1; k >= 0; --k) {
    st[static_cast<std::size_t>(k)] = acc;
    acc *= s[static_cast<std::size_t>(k)];
  }
  return st;
}

/// Trailing-axis broadcasting plan; throws ShapeError on incompatible extents.
inline BinPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  BinPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  const std::int64_t ra = static_cast<std::int64_t>(a.size());
  const std::int64_t rb = static_cast<std::int64_t>(b.size());
  const std::int64_t r = std::max(ra, rb);
  plan.out.assign(static_cast<std::size_t>(r), 1);
  const auto stra = row_major_strides(a);
  const auto strb = row_major_strides(b);
  plan.sa.assign(static_cast<std::size_t>(r), 0);
  plan.sb.assign(static_cast<std::size_t>(r), 0);
  for (std::int64_t k = 0; k < r; ++k) {
    const std::int64_t ia = ra - r + k;
    const std::int64_t ib = rb - r + k;
    const std::int64_t ea = ia >= 0 ? a[static_cast<std::size_t>(ia)] : 1;
    const std::int64_t eb = ib >= 0 ? b[static_cast<std::size_t>(ib)] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    const std::int64_t e = std::max(ea, eb);
    plan.out[static_cast<std::size_t>(k)] = e;
    if (ia >= 0 && ea != 1) plan.sa[static_cast<std::size_t>(k)] = stra[static_cast<std::size_t>(ia)];
    if (ib >= 0 && eb != 1) plan.sb[static_cast<std::size_t>(k)] = strb[static_cast<std::size_t>(ib)];
  }
  return plan;
}

/// Odometer walk over `out`; calls f(offset_a, offset_b, flat_index).
template <class F>
inline void for_each2(const Shape& out, const std::vector<std::int64_t>& sa,
                      const std::vector<std::int64_t>& sb, F&& f) {
  const std::int64_t n = numel(out);
  const std::int64_t r = static_cast<std::int64_t>(out.size());
  if (r == 0) {
    if (n > 0) f(std::int64_t{0}, std::int64_t{0}, std::int64_t{0});
    return;
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    f(oa, ob, i);
    for (std::int64_t k = r - 1; k >= 0; --k) {
      const auto ku = static_cast<std::size_t>(k);
      ++idx[ku];
      oa += sa[ku];
      ob += sb[ku];
      if (idx[ku] < out[ku]) break;
      oa -= sa[ku] * out[ku];
      ob -= sb[ku] * out[ku];
      idx[ku] = 0;
    }
  }
}

/// Sum `g` over the axes that were broadcast to reach `g`'s shape, producing
/// an array of shape `target`.
inline Array reduce_to_shape(const Array& g, const Shape& target) {
  if (g.shape() == target) return g;
  Array out(target, 0.0);
  const auto plan = broadcast_plan(target, g.shape(), "reduce");
  if (plan.out != g.shape()) {
    throw ShapeError("reduce: target " + shape_str(target) + " incompatible with " +
                     shape_str(g.shape()));
  }
  double* dst = out.data();
  const double* src = g.data();
  for_each2(plan.out, plan.sa, plan.sb,
            [&](std::int64_t oa, std::int64_t, std::int64_t i) { dst[oa] += src[i]; });
  return out;
}

enum class BinOp { Add, Sub, Mul, Div };

inline Var binary_op(BinOp kind, const char* name, const Var& a, const Var& b) {
  const Array& av = a.value();
  const Array& bv = b.value();
  auto plan = broadcast_plan(av.shape(), bv.shape(), name);
  Array out(plan.out);
  const double* pa = av.data();
  const double* pb = bv.data();
  double* po = out.data();

  auto apply = [kind, name](double x, double y) {
    switch (kind) {
      case BinOp::Add: return x + y;
      case BinOp::Sub: return x - y;
      case BinOp::Mul: return x * y;
      case BinOp::Div:
        if (y == 0.0) throw DomainError(std::string(name) + ": zero denominator");
        return x / y;
    }
    return 0.0;
  };

  if (plan.same) {
    const std::int64_t n = out.size();
    for (std::int64_t i = 0; i < n; ++i) po[i] = apply(pa[i], pb[i]);
  } else {
    for_each2(plan.out, plan.sa, plan.sb, [&](std::int64_t oa, std::int64_t ob, std::int64_t i) {
      po[i] = apply(pa[oa], pb[ob]);
    });
  }

  auto backward = [kind, plan](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    const double* g = self.grad.data();
    const double* pa = na.value.data();
    const double* pb = nb.value.data();
    const bool need_a = na.requires_grad;
    const bool need_b = nb.requires_grad;
    if (need_a) na.ensure_grad();
    if (need_b) nb.ensure_grad();
    double* ga = need_a ? na.grad.data() : nullptr;
    double* gb = need_b ? nb.grad.data() : nullptr;

    auto accum = [&](std::int64_t oa, std::int64_t ob, std::int64_t i) {
      const double gi = g[i];
      switch (kind) {
        case BinOp::Add:
          if (need_a) ga[oa] += gi;
          if (need_b) gb[ob] += gi;
          break;
        case BinOp::Sub:
          if (need_a) ga[oa] += gi;
          if (need_b) gb[ob] -= gi;
          break;
        case BinOp::Mul:
          if (need_a) ga[oa] += gi * pb[ob];
          if (need_b) gb[ob] += gi * pa[oa];
          break;
        case BinOp::Div: {
          const double inv = 1.0 / pb[ob];
          if (need_a) ga[oa] += gi * inv;
          if (need_b) gb[ob] -= gi * pa[oa] * inv * inv;
          break;
        }
      }
    };

    if (plan.same) {
      const std::int64_t n = self.grad.size();
      for (std::int64_t i = 0; i < n; ++i) accum(i, i, i);
    } else {
      for_each2(plan.out, plan.sa, plan.sb, accum);
    }
  };

  return make_node(name, std::move(out), {a, b}, std::move(backward));
}

template <class FwdFn, class BwdFn>
inline Var unary_op(const char* name, const Var& v, FwdFn&& fwd, BwdFn&& bwd) {
  const Array& x = v.value();
  Array out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);

  auto backward = [bwd](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double* g = self.grad.data();
    const double* x = p.value.data();
    const double* y = self.value.data();
    double* gp = p.grad.data();
    const std::int64_t n = self.value.size();
    for (std::int64_t i = 0; i < n; ++i) gp[i] += g[i] * bwd(x[i], y[i]);
  };
  return make_node(name, std::move(out), {v}, std::move(backward));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// binary ops

inline Var add(const Var& a, const Var& b) { return detail::binary_op(detail::BinOp::Add, "add", a, b); }
inline Var sub(const Var& a, const Var& b) { return detail::binary_op(detail::BinOp::Sub, "sub", a, b); }
inline Var mul(const Var& a, const Var& b) { return detail::binary_op(detail::BinOp::Mul, "mul", a, b); }
inline Var div(const Var& a, const Var& b) { return detail::binary_op(detail::BinOp::Div, "div", a, b); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

inline Var operator+(const Var& a, double b) { return add(a, Var::constant(b)); }
inline Var operator+(double a, const Var& b) { return add(Var::constant(a), b); }
inline Var operator-(const Var& a, double b) { return sub(a, Var::constant(b)); }
inline Var operator-(double a, const Var& b) { return sub(Var::constant(a), b); }
inline Var operator*(const Var& a, double b) { return mul(a, Var::constant(b)); }
inline Var operator*(double a, const Var& b) { return mul(Var::constant(a), b); }
inline Var operator/(const Var& a, double b) { return div(a, Var::constant(b)); }
inline Var operator/(double a, const Var& b) { return div(Var::constant(a), b); }
inline Var operator-(const Var& a) { return mul(a, Var::constant(-1.0)); }

// ---------------------------------------------------------------------------
// elementwise ops

inline Var exp(const Var& v) {
  return detail::unary_op("exp", v, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

inline Var log(const Var& v) {
  for (std::int64_t i = 0; i < v.value().size(); ++i) {
    if (!(v.value()[i] > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(v.value()[i]));
    }
  }
  return detail::unary_op("log", v, [](double x) { return std::log(x); },
                          [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(const Var& v) {
  for (std::int64_t i = 0; i < v.value().size(); ++i) {
    if (v.value()[i] < 0.0) {
      throw DomainError("sqrt: negative input " + std::to_string(v.value()[i]));
    }
  }
  return detail::unary_op("sqrt", v, [](double x) { return std::sqrt(x); },
                          [](double, double y) { return 0.5 / y; });
}

inline Var tanh(const Var& v) {
  return detail::unary_op("tanh", v, [](double x) { return std::tanh(x); },
                          [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& v) {
  return detail::unary_op("relu", v, [](double x) { return x > 0.0 ? x : 0.0; },
                          [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(const Var& v) {
  return detail::unary_op("sigmoid", v, [](double x) { return detail::stable_sigmoid(x); },
                          [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(const Var& v) {
  return detail::unary_op("softplus", v, [](double x) { return detail::stable_softplus(x); },
                          [](double x, double) { return detail::stable_sigmoid(x); });
}

/// Exact (erf-based) GELU.
inline Var gelu(const Var& v) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return detail::unary_op(
      "gelu", v,
      [=](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [=](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

// ---------------------------------------------------------------------------
// matmul / transpose

inline Var matmul(const Var& a, const Var& b) {
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  const std::int64_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  Array out(Shape{m, n});
  {
    detail::CMap A(av.data(), m, k), B(bv.data(), k, n);
    detail::MMap C(out.data(), m, n);
    C.noalias() = A * B;
  }
  auto backward = [m, k, n](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    detail::CMap G(self.grad.data(), m, n);
    if (na.requires_grad) {
      na.ensure_grad();
      detail::CMap B(nb.value.data(), k, n);
      detail::MMap GA(na.grad.data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (nb.requires_grad) {
      nb.ensure_grad();
      detail::CMap A(na.value.data(), m, k);
      detail::MMap GB(nb.grad.data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  };
  return detail::make_node("matmul", std::move(out), {a, b}, std::move(backward));
}

inline Var transpose(const Var& v) {
  const Array& x = v.value();
  if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
  const std::int64_t m = x.shape()[0], n = x.shape()[1];
  Array out(Shape{n, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  auto backward = [m, n](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double* g = self.grad.data();
    double* gp = p.grad.data();
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t i = 0; i < m; ++i) gp[i * n + j] += g[j * m + i];
  };
  return detail::make_node("transpose", std::move(out), {v}, std::move(backward));
}

// ---------------------------------------------------------------------------
// reductions

namespace detail {

struct AxisSplit {
  std::int64_t outer = 1, n = 1, inner = 1;
  Shape out_shape;
};

inline AxisSplit axis_split(const Shape& s, std::int64_t axis, bool keepdim, const char* op) {
  const std::int64_t r = static_cast<std::int64_t>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError(std::string(op) + ": axis out of range for shape " + shape_str(s));
  }
  AxisSplit sp;
  for (std::int64_t k = 0; k < r; ++k) {
    const auto e = s[static_cast<std::size_t>(k)];
    if (k < axis) {
      sp.outer *= e;
      sp.out_shape.push_back(e);
    } else if (k == axis) {
      sp.n = e;
      if (keepdim) sp.out_shape.push_back(1);
    } else {
      sp.inner *= e;
      sp.out_shape.push_back(e);
    }
  }
  return sp;
}

}  // namespace detail

inline Var sum(const Var& v, std::int64_t axis, bool keepdim = false) {
  const Array& x = v.value();
  auto sp = detail::axis_split(x.shape(), axis, keepdim, "sum");
  Array out(sp.out_shape, 0.0);
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t k = 0; k < sp.n; ++k)
      for (std::int64_t i = 0; i < sp.inner; ++i)
        po[o * sp.inner + i] += px[(o * sp.n + k) * sp.inner + i];
  auto backward = [sp](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double* g = self.grad.data();
    double* gp = p.grad.data();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t k = 0; k < sp.n; ++k)
        for (std::int64_t i = 0; i < sp.inner; ++i)
          gp[(o * sp.n + k) * sp.inner + i] += g[o * sp.inner + i];
  };
  return detail::make_node("sum", std::move(out), {v}, std::move(backward));
}

inline Var sum_all(const Var& v) {
  const Array& x = v.value();
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) acc += x[i];
  Array out = Array::scalar(acc);
  auto backward = [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0];
    double* gp = p.grad.data();
    for (std::int64_t i = 0; i < p.value.size(); ++i) gp[i] += g;
  };
  return detail::make_node("sum_all", std::move(out), {v}, std::move(backward));
}

inline Var mean(const Var& v, std::int64_t axis, bool keepdim = false) {
  const std::int64_t r = v.value().rank();
  const std::int64_t ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) {
    throw ShapeError("mean: axis out of range for shape " + shape_str(v.shape()));
  }
  const double n = static_cast<double>(v.shape()[static_cast<std::size_t>(ax)]);
  if (n == 0.0) throw ShapeError("mean: empty axis");
  return sum(v, axis, keepdim) * (1.0 / n);
}

inline Var mean_all(const Var& v) {
  const std::int64_t n = v.value().size();
  if (n == 0) throw ShapeError("mean_all: empty input");
  return sum_all(v) * (1.0 / static_cast<double>(n));
}

/// Numerically stable log-sum-exp along one axis (max-shifted).
inline Var logsumexp(const Var& v, std::int64_t axis, bool keepdim = false) {
  const Array& x = v.value();
  auto sp = detail::axis_split(x.shape(), axis, keepdim, "logsumexp");
  if (sp.n == 0) throw ShapeError("logsumexp: empty axis");
  Array out(sp.out_shape);
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t o = 0; o < sp.outer; ++o) {
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < sp.n; ++k) m = std::max(m, px[(o * sp.n + k) * sp.inner + i]);
      double s = 0.0;
      for (std::int64_t k = 0; k < sp.n; ++k) s += std::exp(px[(o * sp.n + k) * sp.inner + i] - m);
      po[o * sp.inner + i] = m + std::log(s);
    }
  }
  auto backward = [sp](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double* g = self.grad.data();
    const double* y = self.value.data();
    const double* px = p.value.data();
    double* gp = p.grad.data();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t k = 0; k < sp.n; ++k)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const std::int64_t oi = o * sp.inner + i;
          gp[(o * sp.n + k) * sp.inner + i] +=
              g[oi] * std::exp(px[(o * sp.n + k) * sp.inner + i] - y[oi]);
        }
  };
  return detail::make_node("logsumexp", std::move(out), {v}, std::move(backward));
}

inline Var softmax(const Var& v, std::int64_t axis) {
  return exp(sub(v, logsumexp(v, axis, /*keepdim=*/true)));
}

// ---------------------------------------------------------------------------
// shape ops

inline Var reshape(const Var& v, Shape shape) {
  const Array& x = v.value();
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Array out(shape, x.vec());
  const Shape orig = x.shape();
  auto backward = [orig](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double* g = self.grad.data();
    double* gp = p.grad.data();
    for (std::int64_t i = 0; i < self.value.size(); ++i) gp[i] += g[i];
  };
  return detail::make_node("reshape", std::move(out), {v}, std::move(backward));
}

inline Var broadcast_to(const Var& v, const Shape& shape) {
  auto plan = detail::broadcast_plan(v.shape(), shape, "broadcast");
  if (plan.out != shape) {
    throw ShapeError("broadcast: cannot expand " + shape_str(v.shape()) + " to " +
                     shape_str(shape));
  }
  Array out(shape);
  const double* px = v.value().data();
  double* po = out.data();
  if (plan.same) {
    for (std::int64_t i = 0; i < out.size(); ++i) po[i] = px[i];
  } else {
    detail::for_each2(plan.out, plan.sa, plan.sb,
                      [&](std::int64_t oa, std::int64_t, std::int64_t i) { po[i] = px[oa]; });
  }
  auto backward = [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.add_grad(detail::reduce_to_shape(self.grad, p.value.shape()));
  };
  return detail::make_node("broadcast", std::move(out), {v}, std::move(backward));
}

inline Var concat(const std::vector<Var>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::int64_t r = parts[0].value().rank();
  const std::int64_t ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != r) throw ShapeError("concat: rank mismatch");
    for (std::int64_t k = 0; k < r; ++k) {
      if (k != ax && p.shape()[static_cast<std::size_t>(k)] != out_shape[static_cast<std::size_t>(k)]) {
        throw ShapeError("concat: extent mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(out_shape));
      }
    }
    total += p.shape()[static_cast<std::size_t>(ax)];
  }
  out_shape[static_cast<std::size_t>(ax)] = total;

  std::int64_t outer = 1, inner = 1;
  for (std::int64_t k = 0; k < ax; ++k) outer *= out_shape[static_cast<std::size_t>(k)];
  for (std::int64_t k = ax + 1; k < r; ++k) inner *= out_shape[static_cast<std::size_t>(k)];

  Array out(out_shape);
  double* po = out.data();
  std::vector<std::int64_t> extents;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t e = p.shape()[static_cast<std::size_t>(ax)];
    extents.push_back(e);
    const double* px = p.value().data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t k = 0; k < e; ++k)
        for (std::int64_t i = 0; i < inner; ++i)
          po[(o * total + off + k) * inner + i] = px[(o * e + k) * inner + i];
    off += e;
  }
  auto backward = [outer, inner, total, extents](Node& self) {
    const double* g = self.grad.data();
    std::int64_t off = 0;
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      Node& p = *self.parents[pi];
      const std::int64_t e = extents[pi];
      if (p.requires_grad) {
        p.ensure_grad();
        double* gp = p.grad.data();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t k = 0; k < e; ++k)
            for (std::int64_t i = 0; i < inner; ++i)
              gp[(o * e + k) * inner + i] += g[(o * total + off + k) * inner + i];
      }
      off += e;
    }
  };
  return detail::make_node("concat", std::move(out), parts, std::move(backward));
}

inline Var slice(const Var& v, std::int64_t axis, std::int64_t start, std::int64_t len) {
  const Array& x = v.value();
  const std::int64_t r = x.rank();
  const std::int64_t ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("slice: axis out of range");
  const std::int64_t e = x.shape()[static_cast<std::size_t>(ax)];
  if (start < 0 || len < 0 || start + len > e) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of bounds for extent " + std::to_string(e));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = len;
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t k = 0; k < ax; ++k) outer *= x.shape()[static_cast<std::size_t>(k)];
  for (std::int64_t k = ax + 1; k < r; ++k) inner *= x.shape()[static_cast<std::size_t>(k)];

  Array out(out_shape);
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t k = 0; k < len; ++k)
      for (std::int64_t i = 0; i < inner; ++i)
        po[(o * len + k) * inner + i] = px[(o * e + start + k) * inner + i];
  auto backward = [outer, inner, e, start, len](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double* g = self.grad.data();
    double* gp = p.grad.data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t k = 0; k < len; ++k)
        for (std::int64_t i = 0; i < inner; ++i)
          gp[(o * e + start + k) * inner + i] += g[(o * len + k) * inner + i];
  };
  return detail::make_node("slice", std::move(out), {v}, std::move(backward));
}

inline std::vector<Var> chunk(const Var& v, std::int64_t axis, std::int64_t k) {
  const std::int64_t r = v.value().rank();
  const std::int64_t ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("chunk: axis out of range");
  const std::int64_t e = v.shape()[static_cast<std::size_t>(ax)];
  if (k <= 0 || e % k != 0) {
    throw ShapeError("chunk: extent " + std::to_string(e) + " not divisible by " +
                     std::to_string(k));
  }
  const std::int64_t step = e / k;
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) out.push_back(slice(v, ax, i * step, step));
  return out;
}

// ---------------------------------------------------------------------------
// segment ops over ragged batches

namespace detail {

inline void check_offsets(const std::vector<std::int64_t>& offsets, std::int64_t rows,
                          const char* op) {
  if (offsets.size() < 2 || offsets.front() != 0 ||
      offsets.back() != rows) {
    throw ShapeError(std::string(op) + ": invalid offsets for " + std::to_string(rows) + " rows");
  }
  for (std::size_t i = 1; i < offsets.size(); ++i) {
    if (offsets[i] < offsets[i - 1]) {
      throw ShapeError(std::string(op) + ": offsets must be nondecreasing");
    }
  }
}

}  // namespace detail

/// Per-segment column sums over a ragged [rows, width] batch. Each segment's
/// values are accumulated in ascending value order, which makes the result
/// bit-identical under any permutation of the segment's rows.
inline Var segment_sum(const Var& v, std::vector<std::int64_t> offsets) {
  const Array& x = v.value();
  if (x.rank() != 2) throw ShapeError("segment_sum: expected rank 2, got " + shape_str(x.shape()));
  const std::int64_t rows = x.shape()[0], width = x.shape()[1];
  detail::check_offsets(offsets, rows, "segment_sum");
  const std::int64_t nseg = static_cast<std::int64_t>(offsets.size()) - 1;
  Array out(Shape{nseg, width}, 0.0);
  const double* px = x.data();
  double* po = out.data();
  std::vector<double> buf;
  for (std::int64_t s = 0; s < nseg; ++s) {
    const std::int64_t lo = offsets[static_cast<std::size_t>(s)];
    const std::int64_t hi = offsets[static_cast<std::size_t>(s) + 1];
    for (std::int64_t c = 0; c < width; ++c) {
      buf.clear();
      for (std::int64_t r = lo; r < hi; ++r) buf.push_back(px[r * width + c]);
      std::sort(buf.begin(), buf.end());
      double acc = 0.0;
      for (double b : buf) acc += b;
      po[s * width + c] = acc;
    }
  }
  auto backward = [offsets, width](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double* g = self.grad.data();
    double* gp = p.grad.data();
    const std::int64_t nseg = static_cast<std::int64_t>(offsets.size()) - 1;
    for (std::int64_t s = 0; s < nseg; ++s)
      for (std::int64_t r = offsets[static_cast<std::size_t>(s)];
           r < offsets[static_cast<std::size_t>(s) + 1]; ++r)
        for (std::int64_t c = 0; c < width; ++c) gp[r * width + c] += g[s * width + c];
  };
  return detail::make_node("segment_sum", std::move(out), {v}, std::move(backward));
}

/// Repeats row s of a [segments, width] array across all rows of segment s.
inline Var segment_expand(const Var& v, std::vector<std::int64_t> offsets) {
  const Array& x = v.value();
  if (x.rank() != 2) {
    throw ShapeError("segment_expand: expected rank 2, got " + shape_str(x.shape()));
  }
  const std::int64_t nseg = x.shape()[0], width = x.shape()[1];
  if (static_cast<std::int64_t>(offsets.size()) != nseg + 1) {
    throw ShapeError("segment_expand: offsets size mismatch");
  }
  const std::int64_t rows = offsets.back();
  detail::check_offsets(offsets, rows, "segment_expand");
  Array out(Shape{rows, width});
  const double* px = x.data();
  double* po = out.data();
  for (std::int64_t s = 0; s < nseg; ++s)
    for (std::int64_t r = offsets[static_cast<std::size_t>(s)];
         r < offsets[static_cast<std::size_t>(s) + 1]; ++r)
      for (std::int64_t c = 0; c < width; ++c) po[r * width + c] = px[s * width + c];
  auto backward = [offsets, width, nseg](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double* g = self.grad.data();
    double* gp = p.grad.data();
    for (std::int64_t s = 0; s < nseg; ++s)
      for (std::int64_t r = offsets[static_cast<std::size_t>(s)];
           r < offsets[static_cast<std::size_t>(s) + 1]; ++r)
        for (std::int64_t c = 0; c < width; ++c) gp[s * width + c] += g[r * width + c];
  };
  return detail::make_node("segment_expand", std::move(out), {v}, std::move(backward));
}

// ---------------------------------------------------------------------------
// parameter store and backward pass

class ParameterStore {
 public:
  ParameterStore() = default;

  Var create(const std::string& name, Array init) {
    if (entries_.count(name)) {
      throw std::invalid_argument("ParameterStore: duplicate parameter '" + name + "'");
    }
    Var v = Var::leaf(name, std::move(init));
    entries_.emplace(name, v.node());
    return v;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Var get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
      throw std::out_of_range("ParameterStore: unknown parameter '" + name + "'");
    }
    return Var(it->second);
  }

  Array& values(const std::string& name) { return entries_.at(name)->value; }
  const Array& values(const std::string& name) const { return entries_.at(name)->value; }

  const Array* grad(const std::string& name) const {
    const auto& n = entries_.at(name);
    return n->has_grad ? &n->grad : nullptr;
  }

  void zero_grad() {
    for (auto& [_, n] : entries_) n->drop_grad();
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, _] : entries_) out.push_back(k);
    return out;
  }

  std::size_t size() const { return entries_.size(); }

  std::int64_t total_parameters() const {
    std::int64_t n = 0;
    for (const auto& [_, node] : entries_) n += node->value.size();
    return n;
  }

  const std::map<std::string, NodePtr>& entries() const { return entries_; }

 private:
  std::map<std::string, NodePtr> entries_;
};

using GradMap = std::map<std::string, Array>;

/// Reverse sweep from a scalar output. Leaf gradients accumulate until the
/// owning store zeroes them; interior gradients are released as soon as they
/// have been consumed.
inline void backward(const Var& out) {
  Node* root = out.node().get();
  if (root->value.rank() != 0 || root->value.size() != 1) {
    throw ShapeError("backward: output must be a scalar, got " + shape_str(root->value.shape()));
  }
  if (!root->requires_grad) return;

  // Post-order DFS; reversed, it yields every consumer before its inputs.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad.data()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->has_grad) continue;
    if (n->backward_fn) n->backward_fn(*n);
    if (!n->is_leaf) n->drop_grad();
  }
}

/// Backward pass returning gradients for every parameter in the store;
/// parameters the output does not depend on get zero gradients.
inline GradMap backward(const Var& out, const ParameterStore& ps) {
  backward(out);
  GradMap gm;
  for (const auto& [name, node] : ps.entries()) {
    gm.emplace(name, node->has_grad ? node->grad : Array(node->value.shape(), 0.0));
  }
  return gm;
}

// ---------------------------------------------------------------------------
// finite-difference check

/// Central-difference gradient check. `build` constructs a scalar graph from
/// leaves the store creates out of `point`. Returns the max over coordinates
/// of |analytic - numeric| / (|numeric| + 1e-12).
inline double grad_check(const std::function<Var(ParameterStore&)>& build,
                         const std::map<std::string, Array>& point, double step) {
  auto eval = [&](const std::map<std::string, Array>& pt) {
    ParameterStore ps;
    for (const auto& [k, v] : pt) ps.create(k, v);
    Var out = build(ps);
    if (out.value().rank() != 0 || out.value().size() != 1) {
      throw ShapeError("grad_check: builder must return a scalar");
    }
    const double y = out.value().item();
    if (!std::isfinite(y)) throw NumericError("grad_check: non-finite forward value");
    return y;
  };

  ParameterStore ps;
  for (const auto& [k, v] : point) ps.create(k, v);
  Var out = build(ps);
  if (out.value().rank() != 0 || out.value().size() != 1) {
    throw ShapeError("grad_check: builder must return a scalar");
  }
  GradMap analytic = backward(out, ps);

  double max_rel = 0.0;
  for (const auto& [name, base] : point) {
    for (std::int64_t i = 0; i < base.size(); ++i) {
      auto hi = point;
      auto lo = point;
      hi.at(name)[i] += step;
      lo.at(name)[i] -= step;
      const double numeric = (eval(hi) - eval(lo)) / (2.0 * step);
      const double a = analytic.at(name)[i];
      max_rel = std::max(max_rel, std::fabs(a - numeric) / (std::fabs(numeric) + 1e-12));
    }
  }
  return max_rel;
}

}  // namespace setinfer::ad
