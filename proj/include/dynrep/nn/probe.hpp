#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dynrep/nn/attention.hpp"

namespace dynrep {

struct ProbeConfig {
  int64_t num_queries = 1;
  int64_t dim = 64;        // probe working dim; inputs are projected to it
  int64_t token_dim = 64;  // dim of the frozen-encoder tokens fed in
  int64_t out = 2;         // number of regressed parameters

  void validate() const {
    if (num_queries < 1 || dim < 1 || token_dim < 1 || out < 1)
      throw Error(ErrCode::value, "probe config: all sizes must be >= 1");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProbeConfig, num_queries, dim,
                                                token_dim, out)

// Attentive probe: learnable queries cross-attend over frozen-encoder tokens;
// the pooled result goes through a linear head. Token order never matters.
struct AttentiveProbe {
  ProbeConfig cfg;
  Tensor query;  // [1, num_queries, dim]
  Linear in_proj, k, v, head;
  LayerNorm norm;

  AttentiveProbe() = default;
  AttentiveProbe(ProbeConfig c, Rng& rng)
      : cfg(c),
        query(Tensor::trunc_normal({1, c.num_queries, c.dim}, rng)),
        in_proj(c.token_dim, c.dim, rng),
        k(c.dim, c.dim, rng),
        v(c.dim, c.dim, rng),
        head(c.num_queries * c.dim, c.out, rng),
        norm(c.dim) {
    cfg.validate();
    query.set_requires_grad(true);
  }

  // tokens [N, S, token_dim] or a channels-last grid [N, Hg, Wg, token_dim]
  // -> predictions [N, out]
  Tensor forward(const Tensor& tokens_in) const {
    Tensor tokens = tokens_in;
    if (tokens.shape().size() == 4) {
      auto& s = tokens.shape();
      tokens = reshape(tokens, {s[0], s[1] * s[2], s[3]});
    }
    if (tokens.shape().size() != 3 || tokens.shape()[2] != cfg.token_dim)
      throw Error(ErrCode::shape,
                  "probe: expected tokens [N,S," + std::to_string(cfg.token_dim) +
                      "], got " + shape_str(tokens_in.shape()));
    if (tokens.shape()[1] < 1)
      throw Error(ErrCode::value, "probe: empty token set");
    int64_t n = tokens.shape()[0];
    Tensor h = norm.forward(in_proj.forward(tokens));
    Tensor qb = broadcast_to(query, {n, cfg.num_queries, cfg.dim});
    Tensor pooled = attend(qb, k.forward(h), v.forward(h));
    return head.forward(reshape(pooled, {n, cfg.num_queries * cfg.dim}));
  }

  std::vector<ParamRef> params(const std::string& prefix = "probe") {
    std::vector<ParamRef> ps;
    ps.push_back({prefix + ".query", query});
    in_proj.collect(prefix + ".in_proj", ps);
    k.collect(prefix + ".k", ps);
    v.collect(prefix + ".v", ps);
    head.collect(prefix + ".head", ps);
    norm.collect(prefix + ".norm", ps);
    return ps;
  }
};

}  // namespace dynrep
