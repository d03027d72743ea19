#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dynrep/nn/modules.hpp"

namespace dynrep {

// Scaled dot-product attention. q [N,Sq,dk], k [N,Sk,dk], v [N,Sk,dv]
// -> [N,Sq,dv]. Single head; callers project in and out.
inline Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.shape().size() != 3 || k.shape().size() != 3 || v.shape().size() != 3)
    throw Error(ErrCode::shape, "attend: expected rank-3 q/k/v");
  if (q.shape()[2] != k.shape()[2])
    throw Error(ErrCode::shape, "attend: q dim " + shape_str(q.shape()) +
                                    " vs k dim " + shape_str(k.shape()));
  if (k.shape()[1] != v.shape()[1])
    throw Error(ErrCode::shape, "attend: k tokens " + shape_str(k.shape()) +
                                    " vs v tokens " + shape_str(v.shape()));
  double scale = 1.0 / std::sqrt(static_cast<double>(q.shape()[2]));
  Tensor scores = mul_scalar(bmm(q, transpose(k, {0, 2, 1})), scale);
  return bmm(softmax(scores, 2), v);
}

// Pre-norm single-head self-attention + MLP transformer block.
struct SelfAttnBlock {
  LayerNorm norm1, norm2;
  Linear q, k, v, proj;
  Mlp mlp;

  SelfAttnBlock() = default;
  SelfAttnBlock(int64_t dim, Rng& rng)
      : norm1(dim),
        norm2(dim),
        q(dim, dim, rng),
        k(dim, dim, rng),
        v(dim, dim, rng),
        proj(dim, dim, rng),
        mlp(dim, dim * 4, rng) {}

  Tensor forward(const Tensor& x) const {
    Tensor h = norm1.forward(x);
    Tensor a = attend(q.forward(h), k.forward(h), v.forward(h));
    Tensor y = add(x, proj.forward(a));
    return add(y, mlp.forward(norm2.forward(y)));
  }

  void collect(const std::string& prefix, std::vector<ParamRef>& ps) {
    norm1.collect(prefix + ".norm1", ps);
    norm2.collect(prefix + ".norm2", ps);
    q.collect(prefix + ".q", ps);
    k.collect(prefix + ".k", ps);
    v.collect(prefix + ".v", ps);
    proj.collect(prefix + ".proj", ps);
    mlp.collect(prefix + ".mlp", ps);
  }
};

// Pre-norm single-head cross-attention + MLP block; queries attend to a
// fixed context sequence.
struct CrossAttnBlock {
  LayerNorm normq, normkv, norm2;
  Linear q, k, v, proj;
  Mlp mlp;

  CrossAttnBlock() = default;
  CrossAttnBlock(int64_t dim, Rng& rng)
      : normq(dim),
        normkv(dim),
        norm2(dim),
        q(dim, dim, rng),
        k(dim, dim, rng),
        v(dim, dim, rng),
        proj(dim, dim, rng),
        mlp(dim, dim * 4, rng) {}

  Tensor forward(const Tensor& x, const Tensor& ctx) const {
    Tensor hq = normq.forward(x);
    Tensor hk = normkv.forward(ctx);
    Tensor a = attend(q.forward(hq), k.forward(hk), v.forward(hk));
    Tensor y = add(x, proj.forward(a));
    return add(y, mlp.forward(norm2.forward(y)));
  }

  void collect(const std::string& prefix, std::vector<ParamRef>& ps) {
    normq.collect(prefix + ".normq", ps);
    normkv.collect(prefix + ".normkv", ps);
    norm2.collect(prefix + ".norm2", ps);
    q.collect(prefix + ".q", ps);
    k.collect(prefix + ".k", ps);
    v.collect(prefix + ".v", ps);
    proj.collect(prefix + ".proj", ps);
    mlp.collect(prefix + ".mlp", ps);
  }
};

}  // namespace dynrep
