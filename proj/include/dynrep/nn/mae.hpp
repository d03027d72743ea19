#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dynrep/nn/attention.hpp"
#include "dynrep/ssl/masking.hpp"

namespace dynrep {

struct MaeConfig {
  int64_t in_channels = 1;
  int64_t frames = 8;
  int64_t height = 32, width = 32;
  int64_t patch = 4;    // spatial patch edge
  int64_t tubelet = 2;  // frames per token
  int64_t enc_dim = 64, enc_depth = 2;
  int64_t dec_dim = 32, dec_depth = 1;
  double mask_ratio = 0.75;
  bool norm_per_patch = true;

  int64_t grid_h() const { return height / patch; }
  int64_t grid_w() const { return width / patch; }
  int64_t grid_t() const { return frames / tubelet; }
  int64_t tokens_per_frame_group() const { return grid_h() * grid_w(); }
  int64_t num_tokens() const { return grid_t() * tokens_per_frame_group(); }
  int64_t patch_dim() const { return in_channels * tubelet * patch * patch; }

  void validate() const {
    if (patch < 1 || height % patch != 0 || width % patch != 0)
      throw Error(ErrCode::value, "mae config: patch must divide H and W");
    if (tubelet < 1 || frames % tubelet != 0)
      throw Error(ErrCode::value, "mae config: tubelet must divide frames");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
      throw Error(ErrCode::value, "mae config: mask_ratio must be in (0,1)");
    if (enc_dim < 1 || dec_dim < 1 || enc_depth < 1 || dec_depth < 1)
      throw Error(ErrCode::value, "mae config: dims and depths must be >= 1");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MaeConfig, in_channels, frames,
                                                height, width, patch, tubelet,
                                                enc_dim, enc_depth, dec_dim,
                                                dec_depth, mask_ratio,
                                                norm_per_patch)

// clip [N,C,T,H,W] -> tokens [N, S, C*tubelet*patch*patch], token order
// (frame group, grid row, grid col), entries (channel, dt, dh, dw).
inline Tensor patchify(const Tensor& x, const MaeConfig& cfg) {
  auto& s = x.shape();
  if (s.size() != 5 || s[1] != cfg.in_channels || s[2] != cfg.frames ||
      s[3] != cfg.height || s[4] != cfg.width)
    throw Error(ErrCode::shape, "patchify: clip " + shape_str(s) +
                                    " does not match configured geometry");
  int64_t n = s[0];
  Tensor t = reshape(x, {n, cfg.in_channels, cfg.grid_t(), cfg.tubelet,
                         cfg.grid_h(), cfg.patch, cfg.grid_w(), cfg.patch});
  t = transpose(t, {0, 2, 4, 6, 1, 3, 5, 7});
  return reshape(t, {n, cfg.num_tokens(), cfg.patch_dim()});
}

// Exact inverse of patchify.
inline Tensor unpatchify(const Tensor& tokens, const MaeConfig& cfg) {
  auto& s = tokens.shape();
  if (s.size() != 3 || s[1] != cfg.num_tokens() || s[2] != cfg.patch_dim())
    throw Error(ErrCode::shape, "unpatchify: tokens " + shape_str(s) +
                                    " do not match configured geometry");
  int64_t n = s[0];
  Tensor t = reshape(tokens, {n, cfg.grid_t(), cfg.grid_h(), cfg.grid_w(),
                              cfg.in_channels, cfg.tubelet, cfg.patch, cfg.patch});
  t = transpose(t, {0, 4, 1, 5, 2, 6, 3, 7});
  return reshape(t, {n, cfg.in_channels, cfg.frames, cfg.height, cfg.width});
}

// Masked autoencoder with a transformer encoder over visible tokens only and
// a cross-attention decoder that reconstructs the full token grid from the
// encoded visible set plus a learned mask token.
struct Mae {
  MaeConfig cfg;
  Linear patch_embed;
  Tensor pos_sp_enc, pos_tm_enc;  // factorized encoder positions
  std::vector<SelfAttnBlock> enc_blocks;
  LayerNorm enc_norm;
  Linear to_dec;
  Tensor mask_token;
  Tensor pos_sp_dec, pos_tm_dec;
  std::vector<CrossAttnBlock> dec_blocks;
  LayerNorm dec_norm;
  Linear head;

  static MaeConfig checked(MaeConfig c) {
    c.validate();
    return c;
  }

  Mae() = default;
  Mae(MaeConfig c, Rng& rng)
      : cfg(checked(c)),
        patch_embed(cfg.patch_dim(), cfg.enc_dim, rng),
        pos_sp_enc(Tensor::trunc_normal({cfg.tokens_per_frame_group(), cfg.enc_dim}, rng)),
        pos_tm_enc(Tensor::trunc_normal({cfg.grid_t(), cfg.enc_dim}, rng)),
        enc_norm(cfg.enc_dim),
        to_dec(cfg.enc_dim, cfg.dec_dim, rng),
        mask_token(Tensor::trunc_normal({1, 1, cfg.dec_dim}, rng)),
        pos_sp_dec(Tensor::trunc_normal({cfg.tokens_per_frame_group(), cfg.dec_dim}, rng)),
        pos_tm_dec(Tensor::trunc_normal({cfg.grid_t(), cfg.dec_dim}, rng)),
        dec_norm(cfg.dec_dim),
        head(cfg.dec_dim, cfg.patch_dim(), rng) {
    for (int64_t i = 0; i < cfg.enc_depth; ++i) enc_blocks.emplace_back(cfg.enc_dim, rng);
    for (int64_t i = 0; i < cfg.dec_depth; ++i) dec_blocks.emplace_back(cfg.dec_dim, rng);
    pos_sp_enc.set_requires_grad(true);
    pos_tm_enc.set_requires_grad(true);
    mask_token.set_requires_grad(true);
    pos_sp_dec.set_requires_grad(true);
    pos_tm_dec.set_requires_grad(true);
  }

  // Factorized positions expanded to the full token order: pos[g*G + j] =
  // temporal[g] + spatial[j].
  Tensor full_pos(const Tensor& sp, const Tensor& tm, int64_t dim) const {
    Tensor t3 = reshape(tm, {cfg.grid_t(), 1, dim});
    Tensor s3 = reshape(sp, {1, cfg.tokens_per_frame_group(), dim});
    return reshape(add(t3, s3), {cfg.num_tokens(), dim});
  }

  // Token indices kept by a tube mask (all frame groups, visible columns).
  std::vector<int64_t> visible_token_indices(const TubeMask& mask) const {
    if (mask.ph != cfg.grid_h() || mask.pw != cfg.grid_w())
      throw Error(ErrCode::shape,
                  "mae: mask grid " + std::to_string(mask.ph) + "x" +
                      std::to_string(mask.pw) + " does not match patch grid " +
                      std::to_string(cfg.grid_h()) + "x" +
                      std::to_string(cfg.grid_w()));
    std::vector<int64_t> vis = mask.visible_indices();
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(cfg.grid_t()) * vis.size());
    for (int64_t g = 0; g < cfg.grid_t(); ++g)
      for (int64_t j : vis) idx.push_back(g * cfg.tokens_per_frame_group() + j);
    return idx;
  }

  Tensor embed(const Tensor& clip) const {
    return add(patch_embed.forward(patchify(clip, cfg)),
               full_pos(pos_sp_enc, pos_tm_enc, cfg.enc_dim));
  }

  Tensor run_encoder(Tensor h) const {
    for (const auto& b : enc_blocks) h = b.forward(h);
    return enc_norm.forward(h);
  }

  // Encoder over a chosen token subset. Returns [N, |idx|, enc_dim].
  Tensor encode_tokens(const Tensor& clip, const std::vector<int64_t>& idx) const {
    return run_encoder(index_select(embed(clip), 1, idx));
  }

  // The attention blocks are length-agnostic, so probing encodes the full
  // token grid with the same weights that trained on visible subsets.
  Tensor encode_all(const Tensor& clip) const {
    return run_encoder(embed(clip));
  }

  // Full-field reconstruction from the visible tokens under the given mask.
  Tensor forward(const Tensor& clip, const TubeMask& mask) const {
    std::vector<int64_t> vis = visible_token_indices(mask);
    if (vis.empty() || static_cast<int64_t>(vis.size()) == cfg.num_tokens())
      throw Error(ErrCode::value, "mae: mask hides nothing or everything");
    Tensor enc = encode_tokens(clip, vis);
    int64_t n = clip.shape()[0];
    int64_t v = static_cast<int64_t>(vis.size());

    Tensor ctx = to_dec.forward(enc);  // [N, V, dec]
    Tensor pos_dec = full_pos(pos_sp_dec, pos_tm_dec, cfg.dec_dim);
    Tensor kv = add(ctx, index_select(pos_dec, 0, vis));

    // Full query grid: visible slots take their encoded token, masked slots
    // all gather the one learned mask token (index v); positions are added
    // after placement.
    std::vector<int64_t> place(static_cast<size_t>(cfg.num_tokens()), v);
    for (int64_t r = 0; r < v; ++r)
      place[static_cast<size_t>(vis[static_cast<size_t>(r)])] = r;
    Tensor mask_bc = broadcast_to(mask_token, {n, 1, cfg.dec_dim});
    Tensor grid = index_select(concat({ctx, mask_bc}, 1), 1, place);
    Tensor x = add(grid, pos_dec);

    for (const auto& b : dec_blocks) x = b.forward(x, kv);
    return unpatchify(head.forward(dec_norm.forward(x)), cfg);
  }

  std::vector<ParamRef> params(const std::string& prefix = "mae") {
    std::vector<ParamRef> ps;
    patch_embed.collect(prefix + ".patch_embed", ps);
    ps.push_back({prefix + ".pos_sp_enc", pos_sp_enc});
    ps.push_back({prefix + ".pos_tm_enc", pos_tm_enc});
    for (size_t i = 0; i < enc_blocks.size(); ++i)
      enc_blocks[i].collect(prefix + ".enc" + std::to_string(i), ps);
    enc_norm.collect(prefix + ".enc_norm", ps);
    to_dec.collect(prefix + ".to_dec", ps);
    ps.push_back({prefix + ".mask_token", mask_token});
    ps.push_back({prefix + ".pos_sp_dec", pos_sp_dec});
    ps.push_back({prefix + ".pos_tm_dec", pos_tm_dec});
    for (size_t i = 0; i < dec_blocks.size(); ++i)
      dec_blocks[i].collect(prefix + ".dec" + std::to_string(i), ps);
    dec_norm.collect(prefix + ".dec_norm", ps);
    head.collect(prefix + ".head", ps);
    return ps;
  }
};

}  // namespace dynrep
