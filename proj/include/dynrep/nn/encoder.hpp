#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynrep/nn/modules.hpp"

namespace dynrep {

struct EncoderConfig {
  int64_t in_channels = 1;
  int64_t context_frames = 8;
  std::vector<int64_t> widths{16, 32, 64};
  int64_t downsample = 8;   // total spatial reduction, one factor 2 per stage
  int64_t embed_dim = 64;

  void validate() const {
    if (in_channels < 1 || context_frames < 1)
      throw Error(ErrCode::value, "encoder config: channels and frames must be >= 1");
    if (widths.empty() || widths.back() != embed_dim)
      throw Error(ErrCode::value,
                  "encoder config: embed_dim must equal last stage width");
    int64_t d = 1;
    for (size_t i = 0; i < widths.size(); ++i) d *= 2;
    if (d != downsample)
      throw Error(ErrCode::value,
                  "encoder config: downsample must be 2^num_stages, got " +
                      std::to_string(downsample) + " with " +
                      std::to_string(widths.size()) + " stages");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncoderConfig, in_channels,
                                                context_frames, widths,
                                                downsample, embed_dim)

// Depthwise 3D conv + channel layer norm + pointwise inverse bottleneck,
// wrapped in a residual. Spatial kernel 3; temporal kernel 3 only while the
// clip still has a temporal extent at this depth.
struct ConvNextBlock3d {
  Conv3d dw;
  LayerNorm norm;
  Conv3d pw1, pw2;

  ConvNextBlock3d() = default;
  ConvNextBlock3d(int64_t ch, bool temporal, Rng& rng)
      : dw(ch, ch, {temporal ? 3 : 1, 3, 3},
           Conv3dSpec{{1, 1, 1}, {temporal ? 1 : 0, 1, 1}, ch}, rng),
        norm(ch),
        pw1(ch, ch * 4, {1, 1, 1}, Conv3dSpec{}, rng),
        pw2(ch * 4, ch, {1, 1, 1}, Conv3dSpec{}, rng) {}

  Tensor forward(const Tensor& x) const {
    Tensor h = dw.forward(x);
    h = norm.forward(h, 1);
    h = pw2.forward(gelu(pw1.forward(h)));
    return add(x, h);
  }

  void collect(const std::string& prefix, std::vector<ParamRef>& ps) {
    dw.collect(prefix + ".dw", ps);
    norm.collect(prefix + ".norm", ps);
    pw1.collect(prefix + ".pw1", ps);
    pw2.collect(prefix + ".pw2", ps);
  }
};

// Downsampling 3D CNN: each stage halves H and W (and T while it lasts) with
// a patch-merging conv, then applies one ConvNextBlock3d. The temporal axis is
// squeezed away entirely; output is a channels-last grid of embeddings.
struct Encoder {
  EncoderConfig cfg;
  std::vector<Conv3d> down;
  std::vector<ConvNextBlock3d> blocks;

  Encoder() = default;
  Encoder(EncoderConfig c, Rng& rng) : cfg(c) {
    cfg.validate();
    int64_t t = cfg.context_frames;
    int64_t ch = cfg.in_channels;
    for (size_t s = 0; s < cfg.widths.size(); ++s) {
      int64_t w = cfg.widths[s];
      int64_t kt = t > 1 ? 2 : 1;
      down.emplace_back(ch, w, std::array<int64_t, 3>{kt, 2, 2},
                        Conv3dSpec{{kt, 2, 2}, {0, 0, 0}, 1}, rng);
      t = (t - kt) / kt + 1;
      blocks.emplace_back(w, t > 1, rng);
      ch = w;
    }
  }

  // clip [N, C, t, H, W] -> [N, H/D, W/D, embed_dim]
  Tensor forward(const Tensor& x) const {
    if (x.shape().size() != 5)
      throw Error(ErrCode::shape,
                  "encoder: expected [N,C,T,H,W], got " + shape_str(x.shape()));
    if (x.shape()[1] != cfg.in_channels || x.shape()[2] != cfg.context_frames)
      throw Error(ErrCode::shape,
                  "encoder: clip " + shape_str(x.shape()) + " does not match " +
                      std::to_string(cfg.in_channels) + " channels x " +
                      std::to_string(cfg.context_frames) + " frames");
    if (x.shape()[3] % cfg.downsample != 0 || x.shape()[4] % cfg.downsample != 0)
      throw Error(ErrCode::shape,
                  "encoder: H and W must be divisible by " +
                      std::to_string(cfg.downsample));
    Tensor h = x;
    for (size_t s = 0; s < down.size(); ++s) {
      h = down[s].forward(h);
      h = blocks[s].forward(h);
    }
    if (h.shape()[2] > 1) h = reduce_mean(h, {2}, true);  // odd frame counts
    int64_t n = h.shape()[0], c = h.shape()[1];
    int64_t gh = h.shape()[3], gw = h.shape()[4];
    return transpose(reshape(h, {n, c, gh, gw}), {0, 2, 3, 1});
  }

  std::vector<ParamRef> params(const std::string& prefix = "encoder") {
    std::vector<ParamRef> ps;
    for (size_t s = 0; s < down.size(); ++s) {
      std::string stage = prefix + ".stage" + std::to_string(s);
      down[s].collect(stage + ".down", ps);
      blocks[s].collect(stage + ".block", ps);
    }
    return ps;
  }
};

struct PredictorConfig {
  int64_t embed_dim = 64;
  int64_t ratio = 4;
  int64_t depth = 2;

  void validate() const {
    if (ratio <= 1) throw Error(ErrCode::value, "predictor config: ratio must be > 1");
    if (depth < 1 || embed_dim < 1)
      throw Error(ErrCode::value, "predictor config: depth and dim must be >= 1");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PredictorConfig, embed_dim,
                                                ratio, depth)

// Latent-space dynamics model: shape-preserving CNN over the embedding grid
// with depthwise spatial mixing and an inverse channel bottleneck per block.
struct Predictor {
  PredictorConfig cfg;
  std::vector<ConvNextBlock3d> blocks;

  Predictor() = default;
  Predictor(PredictorConfig c, Rng& rng) : cfg(c) {
    cfg.validate();
    for (int64_t i = 0; i < cfg.depth; ++i)
      blocks.emplace_back(cfg.embed_dim, false, rng);
  }

  // z [N, Hg, Wg, embed_dim] -> same shape
  Tensor forward(const Tensor& z) const {
    if (z.shape().size() != 4 || z.shape()[3] != cfg.embed_dim)
      throw Error(ErrCode::shape,
                  "predictor: expected [N,Hg,Wg," + std::to_string(cfg.embed_dim) +
                      "], got " + shape_str(z.shape()));
    int64_t n = z.shape()[0], gh = z.shape()[1], gw = z.shape()[2];
    Tensor h = reshape(transpose(z, {0, 3, 1, 2}), {n, cfg.embed_dim, 1, gh, gw});
    for (const auto& b : blocks) h = b.forward(h);
    return transpose(reshape(h, {n, cfg.embed_dim, gh, gw}), {0, 2, 3, 1});
  }

  std::vector<ParamRef> params(const std::string& prefix = "predictor") {
    std::vector<ParamRef> ps;
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), ps);
    return ps;
  }
};

}  // namespace dynrep
