#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "dynrep/core/autodiff.hpp"
#include "dynrep/core/conv.hpp"
#include "dynrep/core/optim.hpp"
#include "dynrep/nn/attention.hpp"
#include "dynrep/nn/mae.hpp"
#include "dynrep/nn/probe.hpp"
#include "dynrep/sim/systems.hpp"
#include "dynrep/ssl/jepa.hpp"
#include "dynrep/ssl/masking.hpp"

namespace dynrep {

struct CheckResult {
  std::string name;
  bool ok = false;
  std::string detail;
};

struct SelftestOptions {
  bool inject_bug = false;  // cripples the conv3d backward pass on purpose
  int oracle_instances = 10;
};

namespace selftest_detail {

inline Tensor rand_tensor(const Shape& shape, Rng& rng, double lo = -1.0,
                          double hi = 1.0) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, v);
}

inline void push_grad(std::vector<CheckResult>& out, const std::string& op,
                      double err, double tol = 1e-4) {
  CheckResult r;
  r.name = "gradcheck[" + op + "]";
  r.ok = err < tol;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max rel err %.2e (tol %.0e)", err, tol);
  r.detail = buf;
  out.push_back(r);
}

inline void push(std::vector<CheckResult>& out, const std::string& name,
                 bool ok, const std::string& detail) {
  out.push_back({name, ok, detail});
}

// Independent VICReg evaluation with plain loops, used as the oracle.
inline double vicreg_loop(const std::vector<std::vector<double>>& a,
                          const std::vector<std::vector<double>>& b,
                          const VicregWeights& w) {
  size_t n = a.size(), d = a[0].size();
  double s = 0.0;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < d; ++j)
      s += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
  s /= static_cast<double>(n);

  auto variance = [&](const std::vector<std::vector<double>>& z) {
    double acc = 0.0;
    for (size_t j = 0; j < d; ++j) {
      double mean = 0.0;
      for (size_t i = 0; i < n; ++i) mean += z[i][j];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (size_t i = 0; i < n; ++i) var += (z[i][j] - mean) * (z[i][j] - mean);
      var /= static_cast<double>(n);
      acc += std::max(0.0, w.gamma - std::sqrt(var + w.eps));
    }
    return acc / static_cast<double>(d);
  };
  auto covariance = [&](const std::vector<std::vector<double>>& z) {
    std::vector<double> mean(d, 0.0);
    for (size_t j = 0; j < d; ++j) {
      for (size_t i = 0; i < n; ++i) mean[j] += z[i][j];
      mean[j] /= static_cast<double>(n);
    }
    double acc = 0.0;
    for (size_t j = 0; j < d; ++j)
      for (size_t l = 0; l < d; ++l) {
        if (j == l) continue;
        double c = 0.0;
        for (size_t i = 0; i < n; ++i)
          c += (z[i][j] - mean[j]) * (z[i][l] - mean[l]);
        c /= static_cast<double>(n);
        acc += c * c;
      }
    return acc / static_cast<double>(d);
  };
  return w.lambda * s + w.mu * (variance(a) + variance(b)) +
         w.nu * (covariance(a) + covariance(b));
}

inline Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::from({static_cast<int64_t>(rows.size()),
                       static_cast<int64_t>(rows[0].size())},
                      flat);
}

inline void gradcheck_primitives(std::vector<CheckResult>& out,
                                 bool inject_bug) {
  Rng rng(0xC0FFEE);
  auto t = [&](std::initializer_list<int64_t> s, double lo = -1.0,
               double hi = 1.0) { return rand_tensor(Shape(s), rng, lo, hi); };

  push_grad(out, "add",
            grad_check_multi(
                [](const std::vector<Tensor>& xs) {
                  return mean_all(add(xs[0], xs[1]));
                },
                {t({3, 4}), t({1, 4})}));
  push_grad(out, "sub",
            grad_check_multi(
                [](const std::vector<Tensor>& xs) {
                  return mean_all(square(sub(xs[0], xs[1])));
                },
                {t({3, 4}), t({3, 1})}));
  push_grad(out, "mul",
            grad_check_multi(
                [](const std::vector<Tensor>& xs) {
                  return mean_all(mul(xs[0], xs[1]));
                },
                {t({2, 3, 4}), t({3, 4})}));
  push_grad(out, "div",
            grad_check_multi(
                [](const std::vector<Tensor>& xs) {
                  return mean_all(div(xs[0], xs[1]));
                },
                {t({3, 4}), t({3, 4}, 0.5, 1.5)}));
  push_grad(out, "matmul",
            grad_check_multi(
                [](const std::vector<Tensor>& xs) {
                  return mean_all(matmul(xs[0], xs[1]));
                },
                {t({3, 4}), t({4, 5})}));
  push_grad(out, "bmm",
            grad_check_multi(
                [](const std::vector<Tensor>& xs) {
                  return mean_all(bmm(xs[0], xs[1]));
                },
                {t({2, 3, 4}), t({2, 4, 5})}));

  {
    Conv3dSpec spec;
    spec.pad = {1, 1, 1};
    auto f = [spec, inject_bug](const std::vector<Tensor>& xs) {
      Tensor y = mean_all(conv3d(xs[0], xs[1], xs[2], spec));
      if (inject_bug)
        // value unchanged, recorded gradient scaled: a broken backward pass
        y = add(mul_scalar(y, 0.99), mul_scalar(y.detach(), 0.01));
      return y;
    };
    push_grad(out, "conv3d",
              grad_check_multi(
                  f, {t({1, 2, 3, 5, 5}), t({3, 2, 2, 3, 3}), t({3})}));
  }

  // keep relu inputs away from the kink
  Tensor relu_in = t({3, 4}, 0.2, 1.0);
  for (size_t i = 0; i < relu_in.data().size(); ++i)
    if (rng.uniform() < 0.5) relu_in.mutable_data()[i] *= -1.0;
  push_grad(out, "relu", grad_check([](const Tensor& x) {
             return mean_all(relu(x));
           }, relu_in));
  push_grad(out, "gelu", grad_check([](const Tensor& x) {
             return mean_all(gelu(x));
           }, t({3, 4})));
  push_grad(out, "sqrt", grad_check([](const Tensor& x) {
             return mean_all(sqrt_op(x));
           }, t({3, 4}, 0.5, 2.0)));
  push_grad(out, "square", grad_check([](const Tensor& x) {
             return mean_all(square(x));
           }, t({3, 4})));

  Tensor soft_w = t({3, 5}).detach();
  push_grad(out, "softmax", grad_check([soft_w](const Tensor& x) {
             return mean_all(mul(softmax(x, 1), soft_w));
           }, t({3, 5})));
  push_grad(out, "reduce_sum", grad_check([](const Tensor& x) {
             return mean_all(square(reduce_sum(x, {1})));
           }, t({3, 4})));
  push_grad(out, "reduce_mean", grad_check([](const Tensor& x) {
             return mean_all(square(reduce_mean(x, {0})));
           }, t({3, 4})));
  push_grad(out, "reduce_var", grad_check([](const Tensor& x) {
             return mean_all(square(reduce_var(x, {0})));
           }, t({5, 3})));
  push_grad(out, "transpose", grad_check([](const Tensor& x) {
             return mean_all(square(transpose(x, {1, 0})));
           }, t({3, 4})));
  push_grad(out, "reshape", grad_check([](const Tensor& x) {
             return mean_all(square(reshape(x, {4, 3})));
           }, t({3, 4})));
  Tensor cat_b = t({2, 4}).detach();
  push_grad(out, "concat", grad_check([cat_b](const Tensor& x) {
             return mean_all(square(concat({x, cat_b}, 0)));
           }, t({3, 4})));
  push_grad(out, "index_select", grad_check([](const Tensor& x) {
             return mean_all(square(index_select(x, 0, {2, 0, 2})));
           }, t({3, 4})));
  push_grad(out, "slice", grad_check([](const Tensor& x) {
             return mean_all(square(slice(x, 1, 1, 3)));
           }, t({3, 4})));
  push_grad(out, "broadcast_to", grad_check([](const Tensor& x) {
             return mean_all(square(broadcast_to(x, {3, 4})));
           }, t({1, 4})));
  Tensor mse_b = t({3, 4}).detach();
  push_grad(out, "mse", grad_check([mse_b](const Tensor& x) {
             return mse(x, mse_b);
           }, t({3, 4})));
  push_grad(out, "layer_norm", grad_check([](const Tensor& x) {
             LayerNorm ln(4);
             return mean_all(square(ln.forward(x)));
           }, t({3, 4})));
  push_grad(out, "attend",
            grad_check_multi(
                [](const std::vector<Tensor>& xs) {
                  return mean_all(attend(xs[0], xs[1], xs[2]));
                },
                {t({2, 3, 4}), t({2, 5, 4}), t({2, 5, 6})}));
}

inline void gradcheck_architectures(std::vector<CheckResult>& out) {
  // Whole-model checks run at a briefly trained point, not at init: a fresh
  // net maps every clip to nearly the same embedding, which parks the VICReg
  // variance hinge at sqrt(var + eps) with var ~ eps, where central
  // differences lose several digits. A short warmup moves all three models to
  // a well-conditioned spot; step size stays loose for deep-graph roundoff.
  const double h = 1e-4;
  const int warmup = 50;

  {
    Rng rng(0xA5A6);
    EncoderConfig ec;
    ec.in_channels = 1;
    ec.context_frames = 4;
    ec.widths = {4, 8};
    ec.downsample = 4;
    ec.embed_dim = 8;
    PredictorConfig pc;
    pc.embed_dim = 8;
    pc.ratio = 2;
    pc.depth = 1;
    JepaModel model(ec, pc, 3);
    Tensor ctx = Tensor::randn({4, 1, 4, 8, 8}, rng);
    Tensor tgt = Tensor::randn({4, 1, 4, 8, 8}, rng);
    VicregWeights w;
    auto prefs = model.params();
    AdamW opt;
    for (int i = 0; i < warmup; ++i)
      jepa_train_step(model, prefs, opt, 1e-2, ctx, tgt, w, false);
    std::vector<Tensor> params;
    for (auto& p : model.params()) params.push_back(p.tensor);
    double err = grad_check_params(
        [&]() { return jepa_forward(model, ctx, tgt, w, false).loss; }, params,
        h, 2);
    push_grad(out, "jepa+vicreg", err);
  }
  {
    MaeConfig mc;
    mc.in_channels = 1;
    mc.frames = 4;
    mc.height = mc.width = 8;
    mc.enc_dim = 8;
    mc.enc_depth = 1;
    mc.dec_dim = 8;
    mc.dec_depth = 1;
    mc.mask_ratio = 0.5;
    Rng mrng(5);
    Mae mae(mc, mrng);
    TubeMask mask = tube_mask(mc.grid_h(), mc.grid_w(), mc.mask_ratio, mrng);
    Rng rng(0xA5A5);
    Tensor clip = Tensor::randn({2, 1, 4, 8, 8}, rng);
    auto prefs = mae.params();
    AdamW opt;
    for (int i = 0; i < warmup; ++i) {
      zero_grads(prefs);
      Tensor loss = mae_loss(mae.forward(clip, mask), clip.detach(), mask);
      backward(loss);
      opt.step(prefs, 1e-2);
    }
    std::vector<Tensor> params;
    for (auto& p : mae.params()) params.push_back(p.tensor);
    double err = grad_check_params(
        [&]() { return mae_loss(mae.forward(clip, mask), clip.detach(), mask); },
        params, h, 2);
    push_grad(out, "mae", err);
  }
  {
    ProbeConfig pc;
    pc.num_queries = 1;
    pc.dim = 8;
    pc.token_dim = 8;
    pc.out = 2;
    Rng prng(9);
    AttentiveProbe probe(pc, prng);
    Rng rng(0xA5A5);
    Tensor tokens = Tensor::randn({2, 5, 8}, rng);
    Tensor target = Tensor::randn({2, 2}, rng);
    std::vector<Tensor> params;
    for (auto& p : probe.params()) params.push_back(p.tensor);
    double err = grad_check_params(
        [&]() { return mse(probe.forward(tokens), target.detach()); }, params,
        h, 2);
    push_grad(out, "probe", err);
  }
}

inline void loss_oracles(std::vector<CheckResult>& out, int instances) {
  VicregWeights w;  // defaults: lambda 2, mu 40, nu 2, eps 1e-4

  {
    std::vector<std::vector<double>> a{{1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
    VicregParts p0 = vicreg_parts(rows_to_tensor(a), rows_to_tensor(a), w);
    bool ok = p0.loss.item() == 0.0;
    push(out, "vicreg worked example (zero loss)", ok,
         "loss " + std::to_string(p0.loss.item()));

    std::vector<std::vector<double>> b{{0, 0}, {2, 0}};
    VicregParts p1 = vicreg_parts(rows_to_tensor(b), rows_to_tensor(b), w);
    ok = std::abs(p1.loss.item() - 39.6) < 1e-10 &&
         std::abs(p1.v_a - 0.495) < 1e-12;
    push(out, "vicreg worked example (39.6)", ok,
         "loss " + std::to_string(p1.loss.item()));

    std::vector<std::vector<double>> c{{0, 0}, {0, 0}};
    VicregParts p2 = vicreg_parts(rows_to_tensor(c), rows_to_tensor(c), w);
    ok = std::abs(p2.loss.item() - 79.2) < 1e-10;
    push(out, "vicreg worked example (79.2)", ok,
         "loss " + std::to_string(p2.loss.item()));
  }

  Rng rng(0x0AC1E);
  double worst_v = 0.0;
  for (int it = 0; it < instances; ++it) {
    int64_t n = rng.uniform_int(2, 9), d = rng.uniform_int(1, 7);
    std::vector<std::vector<double>> a(static_cast<size_t>(n)),
        b(static_cast<size_t>(n));
    for (auto& r : a)
      for (int64_t j = 0; j < d; ++j) r.push_back(rng.normal());
    for (auto& r : b)
      for (int64_t j = 0; j < d; ++j) r.push_back(rng.normal());
    VicregWeights wr = w;
    wr.lambda = rng.uniform(0.5, 4.0);
    wr.mu = rng.uniform(1.0, 50.0);
    wr.nu = rng.uniform(0.5, 4.0);
    double got = vicreg_loss(rows_to_tensor(a), rows_to_tensor(b), wr).item();
    double want = vicreg_loop(a, b, wr);
    worst_v = std::max(worst_v,
                       std::abs(got - want) / std::max(1.0, std::abs(want)));
  }
  push(out, "vicreg vs brute force", worst_v < 1e-10,
       "worst rel err " + std::to_string(worst_v) + " over " +
           std::to_string(instances) + " instances");

  double worst_m = 0.0;
  for (int it = 0; it < instances; ++it) {
    MaeConfig mc;
    mc.in_channels = 1;
    mc.frames = 4;
    mc.height = mc.width = 8;
    Rng mr(static_cast<uint64_t>(it) + 17);
    TubeMask mask = tube_mask(mc.grid_h(), mc.grid_w(), 0.5, mr);
    Tensor x = rand_tensor({1, 1, 4, 8, 8}, rng);
    Tensor xhat = rand_tensor({1, 1, 4, 8, 8}, rng);
    double got = mae_loss(xhat, x, mask).item();
    // plain-loop masked MSE over masked pixels only
    double acc = 0.0;
    int64_t count = 0;
    for (int64_t t = 0; t < 4; ++t)
      for (int64_t i = 0; i < 8; ++i)
        for (int64_t j = 0; j < 8; ++j) {
          int64_t patch = (i / mc.patch) * mc.grid_w() + j / mc.patch;
          if (!mask.masked[static_cast<size_t>(patch)]) continue;
          size_t idx = static_cast<size_t>(t * 64 + i * 8 + j);
          double dd = xhat.data()[idx] - x.data()[idx];
          acc += dd * dd;
          ++count;
        }
    double want = acc / static_cast<double>(count);
    worst_m = std::max(worst_m,
                       std::abs(got - want) / std::max(1.0, std::abs(want)));
  }
  push(out, "mae_loss vs brute force", worst_m < 1e-10,
       "worst rel err " + std::to_string(worst_m) + " over " +
           std::to_string(instances) + " instances");
}

inline void simulator_oracles(std::vector<CheckResult>& out) {
  {
    SystemSpec spec = default_spec("advdiff");
    spec.T = 2;
    spec.save_every = 100;  // 100 solver steps between the two saved frames
    Trajectory tr = simulate_advdiff(0.7, 0.02, spec, 3);
    size_t frame = static_cast<size_t>(spec.H * spec.W);
    double m0 = 0.0, m1 = 0.0;
    for (size_t i = 0; i < frame; ++i) {
      m0 += tr.frames[i];
      m1 += tr.frames[frame + i];
    }
    double drift = std::abs(m1 - m0) / std::max(1.0, std::abs(m0));
    push(out, "advdiff mass conservation", drift < 1e-8,
         "drift " + std::to_string(drift) + " per 100 steps");
  }
  {
    SystemSpec spec = default_spec("grayscott");
    spec.T = 4;
    spec.init = "uniform";
    Trajectory tr = simulate_grayscott(0.03, 0.06, spec, 5);
    bool exact = true;
    size_t frame = static_cast<size_t>(spec.H * spec.W);
    size_t last = static_cast<size_t>(spec.T - 1) * 2 * frame;
    for (size_t i = 0; i < frame; ++i)
      exact = exact && tr.frames[last + i] == 1.0 && tr.frames[last + frame + i] == 0.0;
    push(out, "gray-scott uniform fixed point", exact,
         exact ? "stationary to the bit" : "drifted off (1, 0)");
  }
  {
    SystemSpec spec = default_spec("shearvort");
    spec.T = 51;
    spec.save_every = 1;
    spec.init = "taylor_green";
    double inv_nu = 100.0;
    Trajectory tr = simulate_shearvort(inv_nu, 100.0, spec, 7);
    size_t frame = static_cast<size_t>(spec.H * spec.W);
    size_t stride = 2 * frame;  // vorticity + tracer channels
    double t50 = 50.0 * tr.frame_dt;
    double decay = std::exp(-2.0 / inv_nu * t50);
    double max_ref = 0.0, max_err = 0.0;
    for (size_t i = 0; i < frame; ++i) {
      double want = tr.frames[i] * decay;
      max_ref = std::max(max_ref, std::abs(want));
      max_err = std::max(max_err, std::abs(tr.frames[50 * stride + i] - want));
    }
    push(out, "taylor-green viscous decay", max_err < 0.01 * max_ref,
         "max err " + std::to_string(max_err) + " vs 1% of peak " +
             std::to_string(0.01 * max_ref));
  }
}

}  // namespace selftest_detail

// Fast internal consistency sweep: gradient checks for every differentiable
// primitive and each full architecture, loss values against brute-force
// oracles, and the three closed-form simulator checks.
inline std::vector<CheckResult> run_selftest(const SelftestOptions& opt = {}) {
  std::vector<CheckResult> out;
  selftest_detail::gradcheck_primitives(out, opt.inject_bug);
  selftest_detail::gradcheck_architectures(out);
  selftest_detail::loss_oracles(out, opt.oracle_instances);
  selftest_detail::simulator_oracles(out);
  return out;
}

}  // namespace dynrep
