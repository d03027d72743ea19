#pragma once

#include <array>
#include <cstring>
#include <vector>

#include "dynrep/core/ops.hpp"
#include "dynrep/core/tensor.hpp"

namespace dynrep {

struct Conv3dSpec {
  std::array<int64_t, 3> stride{1, 1, 1};  // (t, h, w)
  std::array<int64_t, 3> pad{0, 0, 0};
  int64_t groups = 1;
};

namespace detail {

struct ConvDims {
  int64_t N, Ci, T, H, W;
  int64_t Co, Cig, kt, kh, kw;
  int64_t ot, oh, ow;
  int64_t G;
};

inline ConvDims conv3d_dims(const Tensor& input, const Tensor& weight,
                            const Conv3dSpec& spec) {
  if (input.ndim() != 5 || weight.ndim() != 5)
    throw Error(ErrCode::shape,
                "conv3d: expected input [N,C,T,H,W] and kernel "
                "[Co,Ci/g,kt,kh,kw], got " +
                    shape_str(input.shape()) + " and " +
                    shape_str(weight.shape()));
  ConvDims d;
  d.N = input.shape()[0];
  d.Ci = input.shape()[1];
  d.T = input.shape()[2];
  d.H = input.shape()[3];
  d.W = input.shape()[4];
  d.Co = weight.shape()[0];
  d.Cig = weight.shape()[1];
  d.kt = weight.shape()[2];
  d.kh = weight.shape()[3];
  d.kw = weight.shape()[4];
  d.G = spec.groups;
  if (d.G < 1 || d.Ci % d.G != 0 || d.Co % d.G != 0 || d.Cig != d.Ci / d.G)
    throw Error(ErrCode::shape,
                "conv3d: group mismatch, input " + shape_str(input.shape()) +
                    " kernel " + shape_str(weight.shape()) + " groups " +
                    std::to_string(d.G));
  for (int i = 0; i < 3; ++i)
    if (spec.stride[static_cast<size_t>(i)] < 1 ||
        spec.pad[static_cast<size_t>(i)] < 0)
      throw Error(ErrCode::value, "conv3d: invalid stride/pad");
  auto out_dim = [](int64_t in, int64_t k, int64_t s, int64_t p) {
    return (in + 2 * p - k) / s + 1;
  };
  d.ot = out_dim(d.T, d.kt, spec.stride[0], spec.pad[0]);
  d.oh = out_dim(d.H, d.kh, spec.stride[1], spec.pad[1]);
  d.ow = out_dim(d.W, d.kw, spec.stride[2], spec.pad[2]);
  if (d.ot < 1 || d.oh < 1 || d.ow < 1)
    throw Error(ErrCode::shape,
                "conv3d: kernel " + shape_str(weight.shape()) +
                    " larger than padded input " + shape_str(input.shape()));
  return d;
}

// Pointwise 1x1x1/groups=1 convs dominate the encoder, so they get a matmul
// path; everything else goes through the direct loops.
inline void conv3d_forward(const ConvDims& d, const Conv3dSpec& sp,
                           const double* in, const double* w, const double* b,
                           double* out) {
  int64_t ovol = d.ot * d.oh * d.ow;
  int64_t ivol = d.T * d.H * d.W;
  if (b) {
    for (int64_t n = 0; n < d.N; ++n)
      for (int64_t co = 0; co < d.Co; ++co) {
        double* dst = out + (n * d.Co + co) * ovol;
        for (int64_t i = 0; i < ovol; ++i) dst[i] = b[co];
      }
  } else {
    std::memset(out, 0, static_cast<size_t>(d.N * d.Co * ovol) * sizeof(double));
  }

  if (d.kt == 1 && d.kh == 1 && d.kw == 1 && d.G == 1 && sp.stride[0] == 1 &&
      sp.stride[1] == 1 && sp.stride[2] == 1 && sp.pad[0] == 0 &&
      sp.pad[1] == 0 && sp.pad[2] == 0) {
    for (int64_t n = 0; n < d.N; ++n)
      mm_nn(w, in + n * d.Ci * ivol, out + n * d.Co * ovol, d.Co, d.Ci, ivol);
    return;
  }

  int64_t CoG = d.Co / d.G;
  for (int64_t n = 0; n < d.N; ++n)
    for (int64_t g = 0; g < d.G; ++g)
      for (int64_t cog = 0; cog < CoG; ++cog) {
        int64_t co = g * CoG + cog;
        double* dst = out + (n * d.Co + co) * ovol;
        for (int64_t cig = 0; cig < d.Cig; ++cig) {
          int64_t ci = g * d.Cig + cig;
          const double* src = in + (n * d.Ci + ci) * ivol;
          const double* ker = w + ((co * d.Cig + cig) * d.kt) * d.kh * d.kw;
          for (int64_t kt = 0; kt < d.kt; ++kt)
            for (int64_t kh = 0; kh < d.kh; ++kh)
              for (int64_t kw = 0; kw < d.kw; ++kw) {
                double wv = ker[(kt * d.kh + kh) * d.kw + kw];
                if (wv == 0.0) continue;
                for (int64_t t = 0; t < d.ot; ++t) {
                  int64_t it = t * sp.stride[0] - sp.pad[0] + kt;
                  if (it < 0 || it >= d.T) continue;
                  for (int64_t h = 0; h < d.oh; ++h) {
                    int64_t ih = h * sp.stride[1] - sp.pad[1] + kh;
                    if (ih < 0 || ih >= d.H) continue;
                    double* orow = dst + (t * d.oh + h) * d.ow;
                    const double* irow = src + (it * d.H + ih) * d.W;
                    int64_t iw0 = -sp.pad[2] + kw;
                    for (int64_t ww = 0; ww < d.ow; ++ww) {
                      int64_t iw = ww * sp.stride[2] + iw0;
                      if (iw < 0 || iw >= d.W) continue;
                      orow[ww] += wv * irow[iw];
                    }
                  }
                }
              }
        }
      }
}

inline void conv3d_backward(const ConvDims& d, const Conv3dSpec& sp,
                            const double* in, const double* w,
                            const double* gout, double* gin, double* gw,
                            double* gb) {
  int64_t ovol = d.ot * d.oh * d.ow;
  int64_t ivol = d.T * d.H * d.W;
  if (gb) {
    for (int64_t n = 0; n < d.N; ++n)
      for (int64_t co = 0; co < d.Co; ++co) {
        const double* src = gout + (n * d.Co + co) * ovol;
        double acc = 0.0;
        for (int64_t i = 0; i < ovol; ++i) acc += src[i];
        gb[co] += acc;
      }
  }

  if (d.kt == 1 && d.kh == 1 && d.kw == 1 && d.G == 1 && sp.stride[0] == 1 &&
      sp.stride[1] == 1 && sp.stride[2] == 1 && sp.pad[0] == 0 &&
      sp.pad[1] == 0 && sp.pad[2] == 0) {
    for (int64_t n = 0; n < d.N; ++n) {
      // gin[Ci,vol] += W^T[Ci,Co] * gout[Co,vol]; gw[Co,Ci] += gout * in^T
      if (gin)
        mm_tn(w, gout + n * d.Co * ovol, gin + n * d.Ci * ivol, d.Co, d.Ci,
              ivol);
      if (gw)
        mm_nt(gout + n * d.Co * ovol, in + n * d.Ci * ivol, gw, d.Co, ivol,
              d.Ci);
    }
    return;
  }

  int64_t CoG = d.Co / d.G;
  for (int64_t n = 0; n < d.N; ++n)
    for (int64_t g = 0; g < d.G; ++g)
      for (int64_t cog = 0; cog < CoG; ++cog) {
        int64_t co = g * CoG + cog;
        const double* gdst = gout + (n * d.Co + co) * ovol;
        for (int64_t cig = 0; cig < d.Cig; ++cig) {
          int64_t ci = g * d.Cig + cig;
          const double* src = in + (n * d.Ci + ci) * ivol;
          double* gsrc = gin ? gin + (n * d.Ci + ci) * ivol : nullptr;
          const double* ker = w + ((co * d.Cig + cig) * d.kt) * d.kh * d.kw;
          double* gker = gw ? gw + ((co * d.Cig + cig) * d.kt) * d.kh * d.kw
                            : nullptr;
          for (int64_t kt = 0; kt < d.kt; ++kt)
            for (int64_t kh = 0; kh < d.kh; ++kh)
              for (int64_t kw = 0; kw < d.kw; ++kw) {
                double wv = ker[(kt * d.kh + kh) * d.kw + kw];
                double wacc = 0.0;
                for (int64_t t = 0; t < d.ot; ++t) {
                  int64_t it = t * sp.stride[0] - sp.pad[0] + kt;
                  if (it < 0 || it >= d.T) continue;
                  for (int64_t h = 0; h < d.oh; ++h) {
                    int64_t ih = h * sp.stride[1] - sp.pad[1] + kh;
                    if (ih < 0 || ih >= d.H) continue;
                    const double* grow = gdst + (t * d.oh + h) * d.ow;
                    const double* irow = src + (it * d.H + ih) * d.W;
                    double* girow = gsrc ? gsrc + (it * d.H + ih) * d.W : nullptr;
                    int64_t iw0 = -sp.pad[2] + kw;
                    for (int64_t ww = 0; ww < d.ow; ++ww) {
                      int64_t iw = ww * sp.stride[2] + iw0;
                      if (iw < 0 || iw >= d.W) continue;
                      double gv = grow[ww];
                      if (girow) girow[iw] += gv * wv;
                      if (gker) wacc += gv * irow[iw];
                    }
                  }
                }
                if (gker) gker[(kt * d.kh + kh) * d.kw + kw] += wacc;
              }
        }
      }
}

}  // namespace detail

// 3D convolution over [N,C,T,H,W] with zero padding, strides, and channel
// groups. Pass an empty (default) Tensor for no bias.
inline Tensor conv3d(const Tensor& input, const Tensor& weight,
                     const Tensor& bias, const Conv3dSpec& spec) {
  detail::ConvDims d = detail::conv3d_dims(input, weight, spec);
  bool has_bias = bias.valid();
  if (has_bias && (bias.ndim() != 1 || bias.shape()[0] != d.Co))
    throw Error(ErrCode::shape,
                "conv3d: bias " + shape_str(bias.shape()) +
                    " does not match output channels " + std::to_string(d.Co));

  std::vector<double> out(
      static_cast<size_t>(d.N * d.Co * d.ot * d.oh * d.ow));
  detail::conv3d_forward(d, spec, input.data().data(), weight.data().data(),
                         has_bias ? bias.data().data() : nullptr, out.data());

  auto pin = input.impl();
  auto pw = weight.impl();
  auto pb = has_bias ? bias.impl() : nullptr;
  std::vector<Tensor> parents = {input, weight};
  if (has_bias) parents.push_back(bias);
  return make_op_result(
      "conv3d", {d.N, d.Co, d.ot, d.oh, d.ow}, std::move(out), parents,
      [pin, pw, pb, d, spec](const TensorImpl& o) {
        double* gin = nullptr;
        double* gw = nullptr;
        double* gb = nullptr;
        if (pin->needs_grad()) {
          pin->ensure_grad();
          gin = pin->grad.data();
        }
        if (pw->needs_grad()) {
          pw->ensure_grad();
          gw = pw->grad.data();
        }
        if (pb && pb->needs_grad()) {
          pb->ensure_grad();
          gb = pb->grad.data();
        }
        detail::conv3d_backward(d, spec, pin->data.data(), pw->data.data(),
                                o.grad.data(), gin, gw, gb);
      });
}

inline Tensor conv3d(const Tensor& input, const Tensor& weight,
                     const Conv3dSpec& spec) {
  return conv3d(input, weight, Tensor(), spec);
}

}  // namespace dynrep
