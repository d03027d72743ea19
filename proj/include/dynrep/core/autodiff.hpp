#pragma once

#include <functional>
#include <unordered_set>
#include <vector>

#include "dynrep/core/tensor.hpp"

namespace dynrep {

namespace detail {

// Post-order over the recorded graph: every node's inputs come first.
inline void topo_collect(const std::shared_ptr<TensorImpl>& root,
                         std::vector<std::shared_ptr<TensorImpl>>& order) {
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<std::shared_ptr<TensorImpl>, size_t>> stack;
  stack.push_back({root, 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (!impl->node || next >= impl->node->parents.size()) {
      if (impl->node) order.push_back(impl);
      stack.pop_back();
      continue;
    }
    auto parent = impl->node->parents[next++];
    if (parent->node && seen.insert(parent.get()).second)
      stack.push_back({parent, 0});
  }
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Populates .grad on every grad-enabled
// leaf reachable from it, then consumes the recorded graph: a second sweep
// through any of its nodes is an error.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw Error(ErrCode::shape,
                "backward: loss must be scalar, got " + shape_str(loss.shape()));
  auto root = loss.impl();
  if (!root->node) {
    if (!root->requires_grad)
      throw Error(ErrCode::state,
                  "backward: no graph recorded for this tensor");
    root->ensure_grad();
    root->grad[0] += 1.0;
    return;
  }
  if (root->node->consumed)
    throw Error(ErrCode::state,
                "backward: graph already consumed by a previous backward pass");

  std::vector<std::shared_ptr<TensorImpl>> order;
  detail::topo_collect(root, order);

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& impl = *it;
    auto& node = impl->node;
    if (node->consumed)
      throw Error(ErrCode::state,
                  "backward: graph already consumed by a previous backward pass");
    impl->ensure_grad();  // zero contribution if nothing flowed here
    node->backward(*impl);
    node->consumed = true;
    node->backward = nullptr;  // release saved activations
  }
}

// Max relative error between analytic gradients of a scalar-valued function
// and central finite differences, taken over the coordinates of x.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double h = 1e-5,
                         int64_t max_coords = -1, uint64_t coord_seed = 0) {
  if (h <= 0.0) throw Error(ErrCode::value, "grad_check: h must be positive");
  Tensor xt = x.detach().set_requires_grad(true);
  Tensor y = f(xt);
  if (y.numel() != 1)
    throw Error(ErrCode::shape, "grad_check: function output must be scalar, got " +
                                    shape_str(y.shape()));
  // an output with no recorded graph is constant in x: analytic gradient 0
  if (y.impl()->needs_grad()) backward(y);
  std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
  if (xt.has_grad()) analytic = xt.grad();

  std::vector<int64_t> coords;
  if (max_coords > 0 && max_coords < x.numel()) {
    Rng rng(coord_seed == 0 ? 0x5eedULL : coord_seed);
    coords = rng.sample_without_replacement(x.numel(), max_coords);
  } else {
    coords.resize(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i) coords[static_cast<size_t>(i)] = i;
  }

  double max_rel = 0.0;
  NoGradGuard ng;
  Tensor probe = x.detach();
  for (int64_t i : coords) {
    size_t iu = static_cast<size_t>(i);
    double orig = probe.mutable_data()[iu];
    probe.mutable_data()[iu] = orig + h;
    double fp = f(probe).item();
    probe.mutable_data()[iu] = orig - h;
    double fm = f(probe).item();
    probe.mutable_data()[iu] = orig;
    double numeric = (fp - fm) / (2.0 * h);
    double a = analytic[iu];
    double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
  }
  return max_rel;
}

// Gradient check for parameters living inside a model: loss_fn rebuilds the
// loss from current parameter values each call. Analytic gradients come from
// one backward pass; numeric ones from central differences applied to the
// parameter data in place. Checks up to max_coords_per_param coordinates of
// each listed parameter.
inline double grad_check_params(const std::function<Tensor()>& loss_fn,
                                const std::vector<Tensor>& params,
                                double h = 1e-5,
                                int64_t max_coords_per_param = 4,
                                uint64_t coord_seed = 1) {
  for (const auto& p : params) p.impl()->grad.clear();
  Tensor loss = loss_fn();
  if (loss.numel() != 1)
    throw Error(ErrCode::shape, "grad_check_params: loss must be scalar, got " +
                                    shape_str(loss.shape()));
  backward(loss);

  double max_rel = 0.0;
  NoGradGuard ng;
  Rng rng(coord_seed);
  for (const auto& p : params) {
    std::vector<double> analytic(static_cast<size_t>(p.numel()), 0.0);
    if (p.has_grad()) analytic = p.grad();
    std::vector<int64_t> coords;
    if (max_coords_per_param > 0 && max_coords_per_param < p.numel())
      coords = rng.sample_without_replacement(p.numel(), max_coords_per_param);
    else {
      coords.resize(static_cast<size_t>(p.numel()));
      for (int64_t i = 0; i < p.numel(); ++i) coords[static_cast<size_t>(i)] = i;
    }
    Tensor pt = p;  // shares storage; perturbations hit the live parameter
    for (int64_t i : coords) {
      size_t iu = static_cast<size_t>(i);
      double orig = pt.mutable_data()[iu];
      pt.mutable_data()[iu] = orig + h;
      double fp = loss_fn().item();
      pt.mutable_data()[iu] = orig - h;
      double fm = loss_fn().item();
      pt.mutable_data()[iu] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      double a = analytic[iu];
      double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

// Same check, applied to each tensor of a multi-input function in turn.
inline double grad_check_multi(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& xs, double h = 1e-5, int64_t max_coords = -1,
    uint64_t coord_seed = 0) {
  double worst = 0.0;
  for (size_t which = 0; which < xs.size(); ++which) {
    auto g = [&](const Tensor& xi) {
      std::vector<Tensor> args;
      for (size_t j = 0; j < xs.size(); ++j)
        args.push_back(j == which ? xi : xs[j].detach());
      return f(args);
    };
    worst = std::max(worst, grad_check(g, xs[which], h, max_coords,
                                       coord_seed + which + 1));
  }
  return worst;
}

}  // namespace dynrep
