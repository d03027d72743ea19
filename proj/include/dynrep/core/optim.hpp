#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dynrep/core/tensor.hpp"

namespace dynrep {

struct ParamRef {
  std::string name;
  Tensor tensor;
};

inline void zero_grads(std::vector<ParamRef>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

// AdamW with decoupled weight decay: the decay multiplies the parameter by
// (1 - lr*wd) independently of the gradient moments.
class AdamW {
 public:
  explicit AdamW(double weight_decay = 0.0, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8)
      : wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  int64_t step_count() const { return step_; }

  void step(std::vector<ParamRef>& params, double lr) {
    if (lr < 0.0) throw Error(ErrCode::value, "adamw: negative learning rate");
    if (slots_.empty()) {
      slots_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        size_t n = params[i].tensor.data().size();
        slots_[i].m.assign(n, 0.0);
        slots_[i].v.assign(n, 0.0);
      }
    } else if (slots_.size() != params.size()) {
      throw Error(ErrCode::state, "adamw: parameter list changed size");
    }
    ++step_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = params[pi];
      if (!p.tensor.has_grad()) continue;  // untouched by the last backward
      const auto& g = p.tensor.grad();
      auto& x = p.tensor.mutable_data();
      if (g.size() != x.size())
        throw Error(ErrCode::shape,
                    "adamw: gradient shape mismatch for parameter '" + p.name +
                        "'");
      auto& m = slots_[pi].m;
      auto& v = slots_[pi].v;
      double decay = 1.0 - lr * wd_;
      for (size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(g[i]))
          throw Error(ErrCode::numeric,
                      "adamw: non-finite gradient in parameter '" + p.name +
                          "'");
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        if (lr != 0.0) {
          double mhat = m[i] / bc1;
          double vhat = v[i] / bc2;
          x[i] = x[i] * decay - lr * mhat / (std::sqrt(vhat) + eps_);
        }
      }
    }
  }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  int64_t step_ = 0;
  double wd_, beta1_, beta2_, eps_;
};

// Linear warmup from zero to base over `warmup` steps, then a half cosine
// down to zero at `total`.
inline double cosine_lr(int64_t step, int64_t total, double base,
                        int64_t warmup) {
  if (step < 0 || total <= 0 || step > total)
    throw Error(ErrCode::value,
                "cosine_lr: step " + std::to_string(step) +
                    " outside [0," + std::to_string(total) + "]");
  if (warmup < 0 || warmup >= total)
    throw Error(ErrCode::value, "cosine_lr: warmup must be in [0, total)");
  if (step < warmup)
    return base * static_cast<double>(step) / static_cast<double>(warmup);
  double phase = static_cast<double>(step - warmup) /
                 static_cast<double>(total - warmup);
  return base * 0.5 * (1.0 + std::cos(M_PI * phase));
}

}  // namespace dynrep
