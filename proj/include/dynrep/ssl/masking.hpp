#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dynrep/core/ops.hpp"
#include "dynrep/core/rng.hpp"

namespace dynrep {

// Spatial patch mask shared by every frame of a clip: only the spatial grid
// is stored, which makes frame-invariance true by construction.
struct TubeMask {
  int64_t ph = 0, pw = 0;
  double ratio = 0.0;
  std::vector<uint8_t> masked;  // row-major [ph, pw], 1 = masked

  int64_t num_patches() const { return ph * pw; }

  int64_t num_masked() const {
    int64_t n = 0;
    for (uint8_t m : masked) n += m;
    return n;
  }

  std::vector<int64_t> masked_indices() const {
    std::vector<int64_t> idx;
    for (int64_t j = 0; j < num_patches(); ++j)
      if (masked[static_cast<size_t>(j)]) idx.push_back(j);
    return idx;
  }

  std::vector<int64_t> visible_indices() const {
    std::vector<int64_t> idx;
    for (int64_t j = 0; j < num_patches(); ++j)
      if (!masked[static_cast<size_t>(j)]) idx.push_back(j);
    return idx;
  }
};

// Draw a tube mask with exactly round(ratio * ph * pw) masked positions,
// uniform without replacement. Degenerate masks (nothing hidden or nothing
// visible) are rejected up front.
inline TubeMask tube_mask(int64_t ph, int64_t pw, double ratio, Rng& rng) {
  if (ph < 1 || pw < 1)
    throw Error(ErrCode::value, "tube_mask: empty patch grid");
  if (!(ratio > 0.0 && ratio < 1.0))
    throw Error(ErrCode::value, "tube_mask: ratio must be in (0,1)");
  int64_t total = ph * pw;
  int64_t count = static_cast<int64_t>(std::llround(ratio * static_cast<double>(total)));
  if (count <= 0 || count >= total)
    throw Error(ErrCode::value,
                "tube_mask: ratio " + std::to_string(ratio) + " on " +
                    std::to_string(total) + " patches is degenerate");
  TubeMask m;
  m.ph = ph;
  m.pw = pw;
  m.ratio = ratio;
  m.masked.assign(static_cast<size_t>(total), 0);
  for (int64_t j : rng.sample_without_replacement(total, count))
    m.masked[static_cast<size_t>(j)] = 1;
  return m;
}

// Mean squared error over masked-patch pixels only. The mask's spatial grid
// is scaled up to the field resolution; every frame and channel of a masked
// patch column contributes, unmasked pixels contribute nothing.
inline Tensor mae_loss(const Tensor& xhat, const Tensor& x, const TubeMask& mask) {
  if (xhat.shape() != x.shape())
    throw Error(ErrCode::shape, "mae_loss: shape mismatch " +
                                    shape_str(xhat.shape()) + " vs " +
                                    shape_str(x.shape()));
  if (x.shape().size() != 5)
    throw Error(ErrCode::shape,
                "mae_loss: expected [N,C,T,H,W], got " + shape_str(x.shape()));
  int64_t n = x.shape()[0], c = x.shape()[1], t = x.shape()[2];
  int64_t h = x.shape()[3], w = x.shape()[4];
  if (mask.ph < 1 || h % mask.ph != 0 || w % mask.pw != 0)
    throw Error(ErrCode::shape,
                "mae_loss: mask grid " + std::to_string(mask.ph) + "x" +
                    std::to_string(mask.pw) + " does not tile field " +
                    shape_str(x.shape()));
  int64_t sh = h / mask.ph, sw = w / mask.pw;
  int64_t masked_patches = mask.num_masked();
  if (masked_patches == 0) throw Error(ErrCode::value, "mae_loss: empty mask");

  std::vector<double> weight(static_cast<size_t>(h * w), 0.0);
  for (int64_t gh = 0; gh < mask.ph; ++gh)
    for (int64_t gw = 0; gw < mask.pw; ++gw)
      if (mask.masked[static_cast<size_t>(gh * mask.pw + gw)])
        for (int64_t dh = 0; dh < sh; ++dh)
          for (int64_t dw = 0; dw < sw; ++dw)
            weight[static_cast<size_t>((gh * sh + dh) * w + gw * sw + dw)] = 1.0;

  Tensor wt = Tensor::from({1, 1, 1, h, w}, std::move(weight));
  double denom = static_cast<double>(n * c * t * masked_patches * sh * sw);
  return mul_scalar(sum_all(mul(square(sub(xhat, x)), wt)), 1.0 / denom);
}

// Per-patch target normalization: each (tubelet x patch x patch x channel)
// block of x is shifted and scaled to zero mean, unit variance. Pure data
// transform for reconstruction targets; no gradients recorded.
inline Tensor normalize_patches(const Tensor& x, int64_t patch, int64_t tubelet,
                                double eps = 1e-6) {
  if (x.shape().size() != 5)
    throw Error(ErrCode::shape, "normalize_patches: expected [N,C,T,H,W], got " +
                                    shape_str(x.shape()));
  int64_t n = x.shape()[0], c = x.shape()[1], t = x.shape()[2];
  int64_t h = x.shape()[3], w = x.shape()[4];
  if (patch < 1 || tubelet < 1 || h % patch != 0 || w % patch != 0 ||
      t % tubelet != 0)
    throw Error(ErrCode::shape, "normalize_patches: patch " +
                                    std::to_string(patch) + " tubelet " +
                                    std::to_string(tubelet) +
                                    " does not tile " + shape_str(x.shape()));
  std::vector<double> out(x.data().size());
  const std::vector<double>& in = x.data();
  auto at = [&](int64_t ni, int64_t ci, int64_t ti, int64_t hi, int64_t wi) {
    return static_cast<size_t>((((ni * c + ci) * t + ti) * h + hi) * w + wi);
  };
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t g = 0; g < t / tubelet; ++g)
      for (int64_t gh = 0; gh < h / patch; ++gh)
        for (int64_t gw = 0; gw < w / patch; ++gw) {
          double sum = 0.0, sq = 0.0;
          int64_t cnt = c * tubelet * patch * patch;
          for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t dt = 0; dt < tubelet; ++dt)
              for (int64_t dh = 0; dh < patch; ++dh)
                for (int64_t dw = 0; dw < patch; ++dw) {
                  double v = in[at(ni, ci, g * tubelet + dt, gh * patch + dh,
                                   gw * patch + dw)];
                  sum += v;
                  sq += v * v;
                }
          double mean = sum / static_cast<double>(cnt);
          double var = sq / static_cast<double>(cnt) - mean * mean;
          double inv = 1.0 / std::sqrt(std::max(var, 0.0) + eps);
          for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t dt = 0; dt < tubelet; ++dt)
              for (int64_t dh = 0; dh < patch; ++dh)
                for (int64_t dw = 0; dw < patch; ++dw) {
                  size_t i = at(ni, ci, g * tubelet + dt, gh * patch + dh,
                                gw * patch + dw);
                  out[i] = (in[i] - mean) * inv;
                }
        }
  return Tensor::from(x.shape(), std::move(out));
}

}  // namespace dynrep
