#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <vector>

#include "dynrep/core/tensor.hpp"

namespace dynrep {

// ===================================================================
// Broadcasting machinery (NumPy right-aligned rules)
// ===================================================================

struct BcPlan {
  Shape out_shape;
  std::vector<int64_t> a_strides;  // 0 on broadcast dims
  std::vector<int64_t> b_strides;
};

inline BcPlan broadcast_plan(const char* op, const Shape& a, const Shape& b) {
  size_t rank = std::max(a.size(), b.size());
  BcPlan plan;
  plan.out_shape.assign(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    int64_t ad = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int64_t bd = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ad == bd || ad == 1 || bd == 1) {
      plan.out_shape[i] = std::max(ad, bd);
    } else {
      throw Error(ErrCode::shape, std::string(op) + ": shapes " +
                                      shape_str(a) + " and " + shape_str(b) +
                                      " are not broadcastable");
    }
  }
  auto eff = [&](const Shape& s) {
    std::vector<int64_t> st(rank, 0);
    std::vector<int64_t> own = strides_of(s);
    for (size_t i = 0; i < s.size(); ++i) {
      size_t oi = rank - s.size() + i;
      st[oi] = (s[i] == 1 && plan.out_shape[oi] != 1) ? 0 : own[i];
    }
    return st;
  };
  plan.a_strides = eff(a);
  plan.b_strides = eff(b);
  return plan;
}

// Walk the output index space keeping flat offsets into both operands.
template <class F>
inline void bc_for_each(const Shape& out_shape,
                        const std::vector<int64_t>& as,
                        const std::vector<int64_t>& bs, F&& f) {
  int64_t total = numel_of(out_shape);
  size_t rank = out_shape.size();
  if (rank == 0) {
    if (total == 1) f(int64_t{0}, int64_t{0}, int64_t{0});
    return;
  }
  std::vector<int64_t> idx(rank, 0);
  int64_t aoff = 0, boff = 0;
  for (int64_t o = 0; o < total; ++o) {
    f(o, aoff, boff);
    for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
      size_t du = static_cast<size_t>(d);
      ++idx[du];
      aoff += as[du];
      boff += bs[du];
      if (idx[du] < out_shape[du]) break;
      aoff -= as[du] * out_shape[du];
      boff -= bs[du] * out_shape[du];
      idx[du] = 0;
    }
  }
}

namespace detail {

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

template <class FwdSame, class FwdBc>
inline std::pair<Shape, std::vector<double>> binary_forward(
    const char* op, const Tensor& a, const Tensor& b, FwdSame&& fwd_same,
    FwdBc&& fwd_bc, BcPlan* plan_out) {
  const auto& ad = a.data();
  const auto& bd = b.data();
  if (same_shape(a.shape(), b.shape())) {
    std::vector<double> out(ad.size());
    fwd_same(ad.data(), bd.data(), out.data(), ad.size());
    if (plan_out) {
      plan_out->out_shape = a.shape();
      plan_out->a_strides = strides_of(a.shape());
      plan_out->b_strides = plan_out->a_strides;
    }
    return {a.shape(), std::move(out)};
  }
  BcPlan plan = broadcast_plan(op, a.shape(), b.shape());
  std::vector<double> out(static_cast<size_t>(numel_of(plan.out_shape)));
  fwd_bc(plan, ad.data(), bd.data(), out.data());
  if (plan_out) *plan_out = plan;
  return {plan.out_shape, std::move(out)};
}

}  // namespace detail

// ===================================================================
// Binary elementwise ops
// ===================================================================

inline Tensor add(const Tensor& a, const Tensor& b) {
  BcPlan plan;
  auto [shape, out] = detail::binary_forward(
      "add", a, b,
      [](const double* x, const double* y, double* o, size_t n) {
        for (size_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
      },
      [](const BcPlan& p, const double* x, const double* y, double* o) {
        bc_for_each(p.out_shape, p.a_strides, p.b_strides,
                    [&](int64_t oi, int64_t ai, int64_t bi) {
                      o[oi] = x[ai] + y[bi];
                    });
      },
      &plan);
  auto pa = a.impl();
  auto pb = b.impl();
  return make_op_result(
      "add", std::move(shape), std::move(out), {a, b},
      [pa, pb, plan](const TensorImpl& o) {
        const double* g = o.grad.data();
        bool na = pa->needs_grad(), nb = pb->needs_grad();
        if (na) pa->ensure_grad();
        if (nb) pb->ensure_grad();
        bc_for_each(plan.out_shape, plan.a_strides, plan.b_strides,
                    [&](int64_t oi, int64_t ai, int64_t bi) {
                      if (na) pa->grad[static_cast<size_t>(ai)] += g[oi];
                      if (nb) pb->grad[static_cast<size_t>(bi)] += g[oi];
                    });
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  BcPlan plan;
  auto [shape, out] = detail::binary_forward(
      "sub", a, b,
      [](const double* x, const double* y, double* o, size_t n) {
        for (size_t i = 0; i < n; ++i) o[i] = x[i] - y[i];
      },
      [](const BcPlan& p, const double* x, const double* y, double* o) {
        bc_for_each(p.out_shape, p.a_strides, p.b_strides,
                    [&](int64_t oi, int64_t ai, int64_t bi) {
                      o[oi] = x[ai] - y[bi];
                    });
      },
      &plan);
  auto pa = a.impl();
  auto pb = b.impl();
  return make_op_result(
      "sub", std::move(shape), std::move(out), {a, b},
      [pa, pb, plan](const TensorImpl& o) {
        const double* g = o.grad.data();
        bool na = pa->needs_grad(), nb = pb->needs_grad();
        if (na) pa->ensure_grad();
        if (nb) pb->ensure_grad();
        bc_for_each(plan.out_shape, plan.a_strides, plan.b_strides,
                    [&](int64_t oi, int64_t ai, int64_t bi) {
                      if (na) pa->grad[static_cast<size_t>(ai)] += g[oi];
                      if (nb) pb->grad[static_cast<size_t>(bi)] -= g[oi];
                    });
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  BcPlan plan;
  auto [shape, out] = detail::binary_forward(
      "mul", a, b,
      [](const double* x, const double* y, double* o, size_t n) {
        for (size_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
      },
      [](const BcPlan& p, const double* x, const double* y, double* o) {
        bc_for_each(p.out_shape, p.a_strides, p.b_strides,
                    [&](int64_t oi, int64_t ai, int64_t bi) {
                      o[oi] = x[ai] * y[bi];
                    });
      },
      &plan);
  auto pa = a.impl();
  auto pb = b.impl();
  return make_op_result(
      "mul", std::move(shape), std::move(out), {a, b},
      [pa, pb, plan](const TensorImpl& o) {
        const double* g = o.grad.data();
        const double* xa = pa->data.data();
        const double* xb = pb->data.data();
        bool na = pa->needs_grad(), nb = pb->needs_grad();
        if (na) pa->ensure_grad();
        if (nb) pb->ensure_grad();
        bc_for_each(plan.out_shape, plan.a_strides, plan.b_strides,
                    [&](int64_t oi, int64_t ai, int64_t bi) {
                      if (na)
                        pa->grad[static_cast<size_t>(ai)] += g[oi] * xb[bi];
                      if (nb)
                        pb->grad[static_cast<size_t>(bi)] += g[oi] * xa[ai];
                    });
      });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  BcPlan plan;
  auto [shape, out] = detail::binary_forward(
      "div", a, b,
      [](const double* x, const double* y, double* o, size_t n) {
        for (size_t i = 0; i < n; ++i) o[i] = x[i] / y[i];
      },
      [](const BcPlan& p, const double* x, const double* y, double* o) {
        bc_for_each(p.out_shape, p.a_strides, p.b_strides,
                    [&](int64_t oi, int64_t ai, int64_t bi) {
                      o[oi] = x[ai] / y[bi];
                    });
      },
      &plan);
  auto pa = a.impl();
  auto pb = b.impl();
  return make_op_result(
      "div", std::move(shape), std::move(out), {a, b},
      [pa, pb, plan](const TensorImpl& o) {
        const double* g = o.grad.data();
        const double* xa = pa->data.data();
        const double* xb = pb->data.data();
        bool na = pa->needs_grad(), nb = pb->needs_grad();
        if (na) pa->ensure_grad();
        if (nb) pb->ensure_grad();
        bc_for_each(plan.out_shape, plan.a_strides, plan.b_strides,
                    [&](int64_t oi, int64_t ai, int64_t bi) {
                      double inv = 1.0 / xb[bi];
                      if (na)
                        pa->grad[static_cast<size_t>(ai)] += g[oi] * inv;
                      if (nb)
                        pb->grad[static_cast<size_t>(bi)] -=
                            g[oi] * xa[ai] * inv * inv;
                    });
      });
}

// ===================================================================
// Scalar and unary ops
// ===================================================================

inline Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.data());
  for (double& v : out) v += c;
  auto px = x.impl();
  return make_op_result("add_scalar", x.shape(), std::move(out), {x},
                        [px](const TensorImpl& o) {
                          px->ensure_grad();
                          for (size_t i = 0; i < o.grad.size(); ++i)
                            px->grad[i] += o.grad[i];
                        });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.data());
  for (double& v : out) v *= c;
  auto px = x.impl();
  return make_op_result("mul_scalar", x.shape(), std::move(out), {x},
                        [px, c](const TensorImpl& o) {
                          px->ensure_grad();
                          for (size_t i = 0; i < o.grad.size(); ++i)
                            px->grad[i] += o.grad[i] * c;
                        });
}

inline Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

inline Tensor square(const Tensor& x) {
  std::vector<double> out(x.data());
  for (double& v : out) v *= v;
  auto px = x.impl();
  return make_op_result("square", x.shape(), std::move(out), {x},
                        [px](const TensorImpl& o) {
                          px->ensure_grad();
                          const double* xv = px->data.data();
                          for (size_t i = 0; i < o.grad.size(); ++i)
                            px->grad[i] += o.grad[i] * 2.0 * xv[i];
                        });
}

inline Tensor sqrt_op(const Tensor& x) {
  std::vector<double> out(x.data());
  for (double& v : out) {
    if (v < 0.0)
      throw Error(ErrCode::numeric, "sqrt: negative input");
    v = std::sqrt(v);
  }
  auto px = x.impl();
  return make_op_result("sqrt", x.shape(), std::move(out), {x},
                        [px](const TensorImpl& o) {
                          px->ensure_grad();
                          const double* y = o.data.data();
                          for (size_t i = 0; i < o.grad.size(); ++i)
                            px->grad[i] += o.grad[i] * 0.5 / y[i];
                        });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  auto px = x.impl();
  return make_op_result("relu", x.shape(), std::move(out), {x},
                        [px](const TensorImpl& o) {
                          px->ensure_grad();
                          const double* xv = px->data.data();
                          for (size_t i = 0; i < o.grad.size(); ++i)
                            if (xv[i] > 0.0) px->grad[i] += o.grad[i];
                        });
}

// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  std::vector<double> out(x.data());
  for (double& v : out) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  auto px = x.impl();
  return make_op_result(
      "gelu", x.shape(), std::move(out), {x}, [px](const TensorImpl& o) {
        px->ensure_grad();
        const double* xv = px->data.data();
        for (size_t i = 0; i < o.grad.size(); ++i) {
          double v = xv[i];
          double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
          double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          px->grad[i] += o.grad[i] * (cdf + v * pdf);
        }
      });
}

// ===================================================================
// Reductions
// ===================================================================

namespace detail {

struct ReducePlan {
  Shape out_shape;                 // after keepdim handling
  std::vector<int64_t> in_to_out;  // per input dim: out stride (0 if reduced)
  Shape in_shape;
  int64_t count = 1;  // elements folded into each output slot
};

inline ReducePlan reduce_plan(const char* op, const Shape& in,
                              std::vector<int64_t> axes, bool keepdim) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  std::vector<bool> red(in.size(), false);
  for (int64_t a : axes) {
    if (a < 0 || a >= static_cast<int64_t>(in.size()))
      throw Error(ErrCode::value, std::string(op) + ": axis " +
                                      std::to_string(a) +
                                      " out of range for " + shape_str(in));
    red[static_cast<size_t>(a)] = true;
  }
  ReducePlan plan;
  plan.in_shape = in;
  Shape kept;
  for (size_t i = 0; i < in.size(); ++i) {
    if (red[i]) {
      plan.count *= in[i];
      if (keepdim) kept.push_back(1);
    } else {
      kept.push_back(in[i]);
    }
  }
  if (kept.empty()) kept.push_back(1);
  plan.out_shape = kept;

  // Strides into the output for every input dim.
  Shape virt;  // output shape aligned with input rank (1 on reduced dims)
  for (size_t i = 0; i < in.size(); ++i) virt.push_back(red[i] ? 1 : in[i]);
  std::vector<int64_t> vst = strides_of(virt);
  plan.in_to_out.assign(in.size(), 0);
  for (size_t i = 0; i < in.size(); ++i) plan.in_to_out[i] = red[i] ? 0 : vst[i];
  return plan;
}

template <class F>
inline void reduce_for_each(const ReducePlan& plan, F&& f) {
  // f(in_flat, out_flat)
  const Shape& in = plan.in_shape;
  size_t rank = in.size();
  int64_t total = numel_of(in);
  if (rank == 0) {
    f(int64_t{0}, int64_t{0});
    return;
  }
  std::vector<int64_t> idx(rank, 0);
  int64_t ooff = 0;
  for (int64_t i = 0; i < total; ++i) {
    f(i, ooff);
    for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
      size_t du = static_cast<size_t>(d);
      ++idx[du];
      ooff += plan.in_to_out[du];
      if (idx[du] < in[du]) break;
      ooff -= plan.in_to_out[du] * in[du];
      idx[du] = 0;
    }
  }
}

}  // namespace detail

inline Tensor reduce_sum(const Tensor& x, std::vector<int64_t> axes,
                         bool keepdim = false) {
  auto plan = detail::reduce_plan("sum", x.shape(), std::move(axes), keepdim);
  std::vector<double> out(static_cast<size_t>(numel_of(plan.out_shape)), 0.0);
  const double* xv = x.data().data();
  detail::reduce_for_each(plan, [&](int64_t i, int64_t o) {
    out[static_cast<size_t>(o)] += xv[i];
  });
  auto px = x.impl();
  return make_op_result("sum", plan.out_shape, std::move(out), {x},
                        [px, plan](const TensorImpl& o) {
                          px->ensure_grad();
                          const double* g = o.grad.data();
                          detail::reduce_for_each(
                              plan, [&](int64_t i, int64_t oo) {
                                px->grad[static_cast<size_t>(i)] += g[oo];
                              });
                        });
}

inline Tensor reduce_mean(const Tensor& x, std::vector<int64_t> axes,
                          bool keepdim = false) {
  auto plan = detail::reduce_plan("mean", x.shape(), std::move(axes), keepdim);
  double inv = 1.0 / static_cast<double>(plan.count);
  std::vector<double> out(static_cast<size_t>(numel_of(plan.out_shape)), 0.0);
  const double* xv = x.data().data();
  detail::reduce_for_each(plan, [&](int64_t i, int64_t o) {
    out[static_cast<size_t>(o)] += xv[i];
  });
  for (double& v : out) v *= inv;
  auto px = x.impl();
  return make_op_result("mean", plan.out_shape, std::move(out), {x},
                        [px, plan, inv](const TensorImpl& o) {
                          px->ensure_grad();
                          const double* g = o.grad.data();
                          detail::reduce_for_each(
                              plan, [&](int64_t i, int64_t oo) {
                                px->grad[static_cast<size_t>(i)] += g[oo] * inv;
                              });
                        });
}

inline std::vector<int64_t> all_axes(const Tensor& x) {
  std::vector<int64_t> a(static_cast<size_t>(x.ndim()));
  std::iota(a.begin(), a.end(), 0);
  return a;
}

inline Tensor sum_all(const Tensor& x) { return reduce_sum(x, all_axes(x)); }
inline Tensor mean_all(const Tensor& x) { return reduce_mean(x, all_axes(x)); }

// Population variance (divide by n) over the given axes, composed from
// differentiable primitives.
inline Tensor reduce_var(const Tensor& x, const std::vector<int64_t>& axes,
                         bool keepdim = false) {
  Tensor mu = reduce_mean(x, axes, /*keepdim=*/true);
  Tensor centered = sub(x, mu);
  return reduce_mean(square(centered), axes, keepdim);
}

// ===================================================================
// Shape ops
// ===================================================================

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  int64_t infer = -1;
  int64_t known = 1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0)
        throw Error(ErrCode::shape, "reshape: more than one -1 dim");
      infer = static_cast<int64_t>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0)
      throw Error(ErrCode::shape, "reshape: cannot infer dim for " +
                                      shape_str(x.shape()) + " -> " +
                                      shape_str(new_shape));
    new_shape[static_cast<size_t>(infer)] = x.numel() / known;
  }
  if (numel_of(new_shape) != x.numel())
    throw Error(ErrCode::shape, "reshape: element count mismatch " +
                                    shape_str(x.shape()) + " -> " +
                                    shape_str(new_shape));
  auto px = x.impl();
  return make_op_result("reshape", std::move(new_shape),
                        std::vector<double>(x.data()), {x},
                        [px](const TensorImpl& o) {
                          px->ensure_grad();
                          for (size_t i = 0; i < o.grad.size(); ++i)
                            px->grad[i] += o.grad[i];
                        });
}

// out.shape[i] == in.shape[perm[i]]
inline Tensor transpose(const Tensor& x, const std::vector<int64_t>& perm) {
  size_t rank = x.shape().size();
  if (perm.size() != rank)
    throw Error(ErrCode::shape, "transpose: perm rank mismatch for " +
                                    shape_str(x.shape()));
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (size_t i = 0; i < rank; ++i) {
    int64_t p = perm[i];
    if (p < 0 || p >= static_cast<int64_t>(rank) || seen[static_cast<size_t>(p)])
      throw Error(ErrCode::shape, "transpose: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
    out_shape[i] = x.shape()[static_cast<size_t>(p)];
  }
  std::vector<int64_t> in_strides = strides_of(x.shape());
  std::vector<int64_t> step(rank);  // input stride per output dim
  for (size_t i = 0; i < rank; ++i)
    step[i] = in_strides[static_cast<size_t>(perm[i])];

  auto walk = [out_shape, step](auto&& f) {
    size_t rk = out_shape.size();
    int64_t total = numel_of(out_shape);
    std::vector<int64_t> idx(rk, 0);
    int64_t ioff = 0;
    for (int64_t o = 0; o < total; ++o) {
      f(o, ioff);
      for (int64_t d = static_cast<int64_t>(rk) - 1; d >= 0; --d) {
        size_t du = static_cast<size_t>(d);
        ++idx[du];
        ioff += step[du];
        if (idx[du] < out_shape[du]) break;
        ioff -= step[du] * out_shape[du];
        idx[du] = 0;
      }
    }
  };

  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* xv = x.data().data();
  walk([&](int64_t o, int64_t i) { out[static_cast<size_t>(o)] = xv[i]; });
  auto px = x.impl();
  return make_op_result("transpose", std::move(out_shape), std::move(out), {x},
                        [px, walk](const TensorImpl& o) {
                          px->ensure_grad();
                          const double* g = o.grad.data();
                          walk([&](int64_t oo, int64_t i) {
                            px->grad[static_cast<size_t>(i)] += g[oo];
                          });
                        });
}

inline Tensor concat(const std::vector<Tensor>& xs, int64_t axis) {
  if (xs.empty()) throw Error(ErrCode::value, "concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis < 0 || axis >= static_cast<int64_t>(s0.size()))
    throw Error(ErrCode::value, "concat: axis out of range");
  int64_t axis_total = 0;
  for (const Tensor& t : xs) {
    const Shape& s = t.shape();
    if (s.size() != s0.size())
      throw Error(ErrCode::shape, "concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int64_t>(i) != axis && s[i] != s0[i])
        throw Error(ErrCode::shape, "concat: shape mismatch " + shape_str(s) +
                                        " vs " + shape_str(s0));
    axis_total += s[static_cast<size_t>(axis)];
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i)
    inner *= s0[i];

  std::vector<double> out(static_cast<size_t>(numel_of(out_shape)));
  int64_t out_row = axis_total * inner;
  int64_t col = 0;
  std::vector<int64_t> offsets;
  for (const Tensor& t : xs) {
    offsets.push_back(col);
    int64_t len = t.shape()[static_cast<size_t>(axis)] * inner;
    const double* src = t.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * out_row + col, src + o * len,
                  static_cast<size_t>(len) * sizeof(double));
    col += len;
  }

  std::vector<std::shared_ptr<TensorImpl>> parents;
  for (const Tensor& t : xs) parents.push_back(t.impl());
  return make_op_result(
      "concat", std::move(out_shape), std::move(out), xs,
      [parents, offsets, outer, inner, out_row](const TensorImpl& o) {
        const double* g = o.grad.data();
        for (size_t p = 0; p < parents.size(); ++p) {
          auto& par = parents[p];
          if (!par->needs_grad()) continue;
          par->ensure_grad();
          int64_t len =
              static_cast<int64_t>(par->data.size()) / (outer == 0 ? 1 : outer);
          (void)inner;
          for (int64_t ou = 0; ou < outer; ++ou) {
            const double* src = g + ou * out_row + offsets[p];
            double* dst = par->grad.data() + ou * len;
            for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
          }
        }
      });
}

// Gather along one axis; repeated indices are allowed.
inline Tensor index_select(const Tensor& x, int64_t axis,
                           const std::vector<int64_t>& indices) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int64_t>(s.size()))
    throw Error(ErrCode::value, "index_select: axis out of range");
  if (indices.empty())
    throw Error(ErrCode::value, "index_select: empty index list");
  int64_t dim = s[static_cast<size_t>(axis)];
  for (int64_t i : indices)
    if (i < 0 || i >= dim)
      throw Error(ErrCode::value, "index_select: index " + std::to_string(i) +
                                      " out of range [0," +
                                      std::to_string(dim) + ")");
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i)
    inner *= s[i];
  Shape out_shape = s;
  out_shape[static_cast<size_t>(axis)] = static_cast<int64_t>(indices.size());

  std::vector<double> out(
      static_cast<size_t>(outer * static_cast<int64_t>(indices.size()) * inner));
  const double* xv = x.data().data();
  int64_t in_row = dim * inner;
  int64_t out_row = static_cast<int64_t>(indices.size()) * inner;
  for (int64_t o = 0; o < outer; ++o)
    for (size_t j = 0; j < indices.size(); ++j)
      std::memcpy(out.data() + o * out_row + static_cast<int64_t>(j) * inner,
                  xv + o * in_row + indices[j] * inner,
                  static_cast<size_t>(inner) * sizeof(double));

  auto px = x.impl();
  auto idx = indices;
  return make_op_result(
      "index_select", std::move(out_shape), std::move(out), {x},
      [px, idx, outer, inner, in_row, out_row](const TensorImpl& o) {
        px->ensure_grad();
        const double* g = o.grad.data();
        for (int64_t ou = 0; ou < outer; ++ou)
          for (size_t j = 0; j < idx.size(); ++j) {
            const double* src = g + ou * out_row + static_cast<int64_t>(j) * inner;
            double* dst = px->grad.data() + ou * in_row + idx[j] * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
      });
}

inline Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int64_t>(s.size()))
    throw Error(ErrCode::value, "slice: axis out of range");
  int64_t dim = s[static_cast<size_t>(axis)];
  if (start < 0 || len <= 0 || start + len > dim)
    throw Error(ErrCode::value, "slice: range [" + std::to_string(start) +
                                    "," + std::to_string(start + len) +
                                    ") out of bounds for dim " +
                                    std::to_string(dim));
  std::vector<int64_t> idx(static_cast<size_t>(len));
  std::iota(idx.begin(), idx.end(), start);
  return index_select(x, axis, idx);
}

inline Tensor broadcast_to(const Tensor& x, const Shape& target) {
  BcPlan plan = broadcast_plan("broadcast_to", x.shape(), target);
  if (plan.out_shape != target)
    throw Error(ErrCode::shape, "broadcast_to: " + shape_str(x.shape()) +
                                    " does not broadcast to " +
                                    shape_str(target));
  std::vector<double> out(static_cast<size_t>(numel_of(target)));
  const double* xv = x.data().data();
  bc_for_each(plan.out_shape, plan.a_strides, plan.b_strides,
              [&](int64_t oi, int64_t ai, int64_t) {
                out[static_cast<size_t>(oi)] = xv[ai];
              });
  auto px = x.impl();
  return make_op_result("broadcast_to", target, std::move(out), {x},
                        [px, plan](const TensorImpl& o) {
                          px->ensure_grad();
                          const double* g = o.grad.data();
                          bc_for_each(plan.out_shape, plan.a_strides,
                                      plan.b_strides,
                                      [&](int64_t oi, int64_t ai, int64_t) {
                                        px->grad[static_cast<size_t>(ai)] +=
                                            g[oi];
                                      });
                        });
}

// ===================================================================
// Softmax
// ===================================================================

inline Tensor softmax(const Tensor& x, int64_t axis) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int64_t>(s.size()))
    throw Error(ErrCode::value, "softmax: axis out of range for " +
                                    shape_str(s));
  int64_t outer = 1, inner = 1;
  int64_t len = s[static_cast<size_t>(axis)];
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i)
    inner *= s[i];

  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* xv = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * len * inner + in;
      double mx = xv[base];
      for (int64_t l = 1; l < len; ++l)
        mx = std::max(mx, xv[base + l * inner]);
      double sum = 0.0;
      for (int64_t l = 0; l < len; ++l) {
        double e = std::exp(xv[base + l * inner] - mx);
        out[static_cast<size_t>(base + l * inner)] = e;
        sum += e;
      }
      double invsum = 1.0 / sum;
      for (int64_t l = 0; l < len; ++l)
        out[static_cast<size_t>(base + l * inner)] *= invsum;
    }

  auto px = x.impl();
  return make_op_result(
      "softmax", s, std::move(out), {x},
      [px, outer, inner, len](const TensorImpl& o) {
        px->ensure_grad();
        const double* y = o.data.data();
        const double* g = o.grad.data();
        for (int64_t ou = 0; ou < outer; ++ou)
          for (int64_t in = 0; in < inner; ++in) {
            int64_t base = ou * len * inner + in;
            double dot = 0.0;
            for (int64_t l = 0; l < len; ++l)
              dot += g[base + l * inner] * y[base + l * inner];
            for (int64_t l = 0; l < len; ++l) {
              int64_t k = base + l * inner;
              px->grad[static_cast<size_t>(k)] += y[k] * (g[k] - dot);
            }
          }
      });
}

// ===================================================================
// Matrix products
// ===================================================================

namespace detail {

inline void mm_nn(const double* A, const double* B, double* C, int64_t m,
                  int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double a = A[i * k + p];
      if (a == 0.0) continue;
      const double* brow = B + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
inline void mm_nt(const double* A, const double* B, double* C, int64_t m,
                  int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = A + i * n;
    for (int64_t j = 0; j < k; ++j) {
      const double* brow = B + j * n;
      double acc = 0.0;
      for (int64_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
      C[i * k + j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void mm_tn(const double* A, const double* B, double* C, int64_t m,
                  int64_t k, int64_t n) {
  for (int64_t p = 0; p < m; ++p) {
    const double* arow = A + p * k;
    const double* brow = B + p * n;
    for (int64_t i = 0; i < k; ++i) {
      double a = arow[i];
      if (a == 0.0) continue;
      double* crow = C + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0])
    throw Error(ErrCode::shape, "matmul: incompatible shapes " +
                                    shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
  int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  detail::mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto pa = a.impl();
  auto pb = b.impl();
  return make_op_result(
      "matmul", {m, n}, std::move(out), {a, b},
      [pa, pb, m, k, n](const TensorImpl& o) {
        const double* g = o.grad.data();
        if (pa->needs_grad()) {
          pa->ensure_grad();
          detail::mm_nt(g, pb->data.data(), pa->grad.data(), m, n, k);
        }
        if (pb->needs_grad()) {
          pb->ensure_grad();
          detail::mm_tn(pa->data.data(), g, pb->grad.data(), m, k, n);
        }
      });
}

// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n]
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] ||
      a.shape()[2] != b.shape()[1])
    throw Error(ErrCode::shape, "bmm: incompatible shapes " +
                                    shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
  int64_t B = a.shape()[0], m = a.shape()[1], k = a.shape()[2],
          n = b.shape()[2];
  std::vector<double> out(static_cast<size_t>(B * m * n), 0.0);
  for (int64_t bi = 0; bi < B; ++bi)
    detail::mm_nn(a.data().data() + bi * m * k, b.data().data() + bi * k * n,
                  out.data() + bi * m * n, m, k, n);
  auto pa = a.impl();
  auto pb = b.impl();
  return make_op_result(
      "bmm", {B, m, n}, std::move(out), {a, b},
      [pa, pb, B, m, k, n](const TensorImpl& o) {
        const double* g = o.grad.data();
        if (pa->needs_grad()) {
          pa->ensure_grad();
          for (int64_t bi = 0; bi < B; ++bi)
            detail::mm_nt(g + bi * m * n, pb->data.data() + bi * k * n,
                          pa->grad.data() + bi * m * k, m, n, k);
        }
        if (pb->needs_grad()) {
          pb->ensure_grad();
          for (int64_t bi = 0; bi < B; ++bi)
            detail::mm_tn(pa->data.data() + bi * m * k, g + bi * m * n,
                          pb->grad.data() + bi * k * n, m, k, n);
        }
      });
}

// ===================================================================
// Losses
// ===================================================================

inline Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw Error(ErrCode::shape, "mse: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  return mean_all(square(sub(a, b)));
}

}  // namespace dynrep
