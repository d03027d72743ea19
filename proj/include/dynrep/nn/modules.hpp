#pragma once

#include <array>
#include <string>
#include <vector>

#include "dynrep/core/conv.hpp"
#include "dynrep/core/ops.hpp"
#include "dynrep/core/optim.hpp"
#include "dynrep/core/rng.hpp"

namespace dynrep {

// Dense layer: y = x W^T + b for x [..., in], W [out, in], b [out].
struct Linear {
  Tensor weight, bias;
  int64_t in = 0, out = 0;

  Linear() = default;
  Linear(int64_t in_dim, int64_t out_dim, Rng& rng)
      : weight(Tensor::trunc_normal({out_dim, in_dim}, rng)),
        bias(Tensor::zeros({out_dim})),
        in(in_dim),
        out(out_dim) {
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  Tensor forward(const Tensor& x) const {
    if (x.shape().empty() || x.shape().back() != in)
      throw Error(ErrCode::shape, "linear: input last dim " +
                                      shape_str(x.shape()) + " != " +
                                      std::to_string(in));
    Shape lead(x.shape().begin(), x.shape().end() - 1);
    Tensor x2 = reshape(x, {-1, in});
    Tensor y = add(matmul(x2, transpose(weight, {1, 0})), bias);
    Shape out_shape = lead;
    out_shape.push_back(out);
    return reshape(y, out_shape);
  }

  void collect(const std::string& prefix, std::vector<ParamRef>& ps) {
    ps.push_back({prefix + ".weight", weight});
    ps.push_back({prefix + ".bias", bias});
  }
};

// Layer normalization over one axis with learned per-feature scale and shift.
struct LayerNorm {
  Tensor gamma, beta;
  int64_t dim = 0;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(int64_t d) : gamma(Tensor::full({d}, 1.0)),
                                  beta(Tensor::zeros({d})),
                                  dim(d) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  // axis may be negative (counted from the end); defaults to the last axis.
  Tensor forward(const Tensor& x, int64_t axis = -1) const {
    int64_t r = static_cast<int64_t>(x.shape().size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
      throw Error(ErrCode::shape, "layernorm: axis out of range");
    if (x.shape()[static_cast<size_t>(axis)] != dim)
      throw Error(ErrCode::shape,
                  "layernorm: axis size " + shape_str(x.shape()) + " != " +
                      std::to_string(dim));
    Tensor mu = reduce_mean(x, {axis}, true);
    Tensor var = reduce_var(x, {axis}, true);
    Tensor xhat = div(sub(x, mu), sqrt_op(add_scalar(var, eps)));
    // shape gamma/beta so they broadcast along the normalized axis
    Shape bshape(static_cast<size_t>(r - axis), 1);
    bshape[0] = dim;
    return add(mul(xhat, reshape(gamma, bshape)), reshape(beta, bshape));
  }

  void collect(const std::string& prefix, std::vector<ParamRef>& ps) {
    ps.push_back({prefix + ".gamma", gamma});
    ps.push_back({prefix + ".beta", beta});
  }
};

// Two-layer GELU MLP with hidden expansion.
struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(int64_t dim, int64_t hidden, Rng& rng)
      : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

  Tensor forward(const Tensor& x) const {
    return fc2.forward(gelu(fc1.forward(x)));
  }

  void collect(const std::string& prefix, std::vector<ParamRef>& ps) {
    fc1.collect(prefix + ".fc1", ps);
    fc2.collect(prefix + ".fc2", ps);
  }
};

// 3D convolution layer owning its kernel and bias.
struct Conv3d {
  Tensor weight, bias;
  Conv3dSpec spec;

  Conv3d() = default;
  Conv3d(int64_t in_ch, int64_t out_ch, std::array<int64_t, 3> kernel,
         Conv3dSpec s, Rng& rng)
      : weight(Tensor::trunc_normal(
            {out_ch, in_ch / s.groups, kernel[0], kernel[1], kernel[2]}, rng)),
        bias(Tensor::zeros({out_ch})),
        spec(s) {
    if (in_ch % s.groups != 0)
      throw Error(ErrCode::value, "conv3d: groups must divide in channels");
    weight.set_requires_grad(true);
    bias.set_requires_grad(true);
  }

  Tensor forward(const Tensor& x) const { return conv3d(x, weight, bias, spec); }

  void collect(const std::string& prefix, std::vector<ParamRef>& ps) {
    ps.push_back({prefix + ".weight", weight});
    ps.push_back({prefix + ".bias", bias});
  }
};

}  // namespace dynrep
