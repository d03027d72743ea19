#pragma once

#include <cstdio>
#include <vector>

#include "dynrep/core/autodiff.hpp"
#include "dynrep/core/optim.hpp"
#include "dynrep/nn/encoder.hpp"
#include "dynrep/sim/systems.hpp"
#include "dynrep/ssl/vicreg.hpp"

namespace dynrep {

// Context window [offset, offset+k) paired with target [offset+k, offset+2k)
// from one trajectory.
struct JepaPair {
  int64_t trajectory = 0;
  int64_t offset = 0;
};

// One epoch of pairs: every trajectory with T >= 2k contributes one pair at
// a uniform offset in [0, T-2k]; order is shuffled. Short trajectories are
// skipped with a warning.
inline std::vector<JepaPair> make_jepa_pairs(
    const std::vector<Trajectory>& trajectories, int64_t k, uint64_t seed) {
  if (k < 1) throw Error(ErrCode::value, "jepa pairs: k must be >= 1");
  Rng rng(seed);
  std::vector<JepaPair> pairs;
  for (size_t i = 0; i < trajectories.size(); ++i) {
    int64_t t = trajectories[i].T;
    if (t < 2 * k) {
      std::fprintf(stderr,
                   "warning: trajectory %zu has %lld frames, needs %lld; "
                   "skipping\n",
                   i, static_cast<long long>(t), static_cast<long long>(2 * k));
      continue;
    }
    JepaPair p;
    p.trajectory = static_cast<int64_t>(i);
    p.offset = rng.uniform_int(0, t - 2 * k + 1);
    pairs.push_back(p);
  }
  if (pairs.empty())
    throw Error(ErrCode::value,
                "jepa pairs: no trajectory is long enough for k = " +
                    std::to_string(k));
  rng.shuffle(pairs);
  return pairs;
}

struct JepaModel {
  EncoderConfig enc_cfg;
  PredictorConfig pred_cfg;
  Encoder encoder;
  Predictor predictor;

  JepaModel() = default;
  JepaModel(const EncoderConfig& ec, const PredictorConfig& pc, uint64_t seed)
      : enc_cfg(ec), pred_cfg(pc) {
    Rng rng = Rng(seed).fork(0xE11C);
    encoder = Encoder(ec, rng);
    predictor = Predictor(pc, rng);
  }

  std::vector<ParamRef> params() {
    std::vector<ParamRef> ps = encoder.params();
    for (auto& p : predictor.params()) ps.push_back(std::move(p));
    return ps;
  }
};

// [N, gh, gw, d] token grid -> [N, d] mean-pooled embedding
inline Tensor pool_embedding(const Tensor& grid) {
  if (grid.shape().size() != 4)
    throw Error(ErrCode::shape, "pool_embedding: expected [n, gh, gw, d]");
  return reduce_mean(grid, {1, 2});
}

// Both clips go through the same encoder; the predictor sees only the
// context branch. Gradients flow through both branches.
inline VicregParts jepa_forward(JepaModel& model, const Tensor& context,
                                const Tensor& target, const VicregWeights& w,
                                bool per_token = false) {
  Tensor zc = model.encoder.forward(context);
  Tensor zt = model.encoder.forward(target);
  Tensor pred = model.predictor.forward(zc);
  Tensor z_a, z_b;
  if (per_token) {
    const Shape& s = pred.shape();
    z_a = reshape(pred, {s[0] * s[1] * s[2], s[3]});
    z_b = reshape(zt, {s[0] * s[1] * s[2], s[3]});
  } else {
    z_a = pool_embedding(pred);
    z_b = pool_embedding(zt);
  }
  return vicreg_parts(z_a, z_b, w);
}

struct JepaStepLog {
  double loss = 0.0, s = 0.0, v = 0.0, c = 0.0;
};

inline JepaStepLog jepa_train_step(JepaModel& model,
                                   std::vector<ParamRef>& params, AdamW& opt,
                                   double lr, const Tensor& context,
                                   const Tensor& target,
                                   const VicregWeights& w,
                                   bool per_token = false) {
  zero_grads(params);
  VicregParts parts = jepa_forward(model, context, target, w, per_token);
  JepaStepLog log;
  log.loss = parts.loss.data()[0];
  log.s = parts.s;
  log.v = parts.v_a + parts.v_b;
  log.c = parts.c_a + parts.c_b;
  if (!std::isfinite(log.loss))
    throw Error(ErrCode::numeric,
                "jepa step: non-finite loss (s=" + std::to_string(parts.s) +
                    " v_a=" + std::to_string(parts.v_a) + " v_b=" +
                    std::to_string(parts.v_b) + " c_a=" +
                    std::to_string(parts.c_a) + " c_b=" +
                    std::to_string(parts.c_b) + ")");
  backward(parts.loss);
  opt.step(params, lr);
  return log;
}

}  // namespace dynrep
