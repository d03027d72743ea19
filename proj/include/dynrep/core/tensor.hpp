#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dynrep/core/error.hpp"
#include "dynrep/core/rng.hpp"

namespace dynrep {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] =
        st[static_cast<size_t>(i + 1)] * s[static_cast<size_t>(i + 1)];
  return st;
}

struct TensorImpl;

// One recorded primitive: parents it read from and a closure that routes the
// output gradient back to them. Closures own any saved activations; they are
// released as soon as the node has run.
struct GradNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(const TensorImpl&)> backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward materializes it
  bool requires_grad = false;
  std::shared_ptr<GradNode> node;

  bool needs_grad() const { return requires_grad || node != nullptr; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Thread-local switch: when off, ops do not record nodes.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool v) { flag() = v; }

 private:
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : impl_(std::make_shared<TensorImpl>()) {
    validate_shape(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<size_t>(numel_of(impl_->shape)), fill);
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    validate_shape(shape);
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw Error(ErrCode::shape,
                  "tensor: data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double v) {
    return Tensor(std::move(shape), v);
  }

  static Tensor randn(Shape shape, Rng& rng, double std = 1.0) {
    Tensor t(std::move(shape));
    for (double& x : t.impl_->data) x = rng.normal(0.0, std);
    return t;
  }

  static Tensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0,
                             double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& x : t.impl_->data) x = rng.uniform(lo, hi);
    return t;
  }

  static Tensor trunc_normal(Shape shape, Rng& rng, double std = 0.02) {
    Tensor t(std::move(shape));
    for (double& x : t.impl_->data) x = rng.trunc_normal(std);
    return t;
  }

  bool valid() const { return impl_ != nullptr; }
  const Shape& shape() const { return check()->shape; }
  int64_t dim(size_t i) const { return check()->shape.at(i); }
  int64_t ndim() const { return static_cast<int64_t>(check()->shape.size()); }
  int64_t numel() const {
    return static_cast<int64_t>(check()->data.size());
  }

  const std::vector<double>& data() const { return check()->data; }
  std::vector<double>& mutable_data() { return check()->data; }
  double item() const {
    if (numel() != 1)
      throw Error(ErrCode::shape,
                  "tensor: item() on non-scalar " + shape_str(shape()));
    return check()->data[0];
  }

  bool requires_grad() const { return check()->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    check()->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !check()->grad.empty(); }
  const std::vector<double>& grad() const {
    if (!has_grad())
      throw Error(ErrCode::state, "tensor: gradient not materialized");
    return check()->grad;
  }
  void zero_grad() { check()->grad.clear(); }

  bool has_node() const { return check()->node != nullptr; }

  // Value copy detached from any graph.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = check()->shape;
    t.impl_->data = check()->data;
    return t;
  }

  bool all_finite() const {
    for (double x : check()->data)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::shared_ptr<TensorImpl>& impl() { return impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  static Tensor wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  static void validate_shape(const Shape& s) {
    for (int64_t d : s)
      if (d <= 0)
        throw Error(ErrCode::shape,
                    "tensor: non-positive dimension in " + shape_str(s));
  }

  const std::shared_ptr<TensorImpl>& check() const {
    if (!impl_) throw Error(ErrCode::state, "tensor: use of empty tensor");
    return impl_;
  }

  std::shared_ptr<TensorImpl> impl_;
};

// Build an op result, recording a node when grad mode is on and at least one
// parent participates in the graph.
inline Tensor make_op_result(const char* op, Shape shape,
                             std::vector<double> data,
                             const std::vector<Tensor>& parents,
                             std::function<void(const TensorImpl&)> backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const Tensor& p : parents)
    if (p.valid() && p.impl()->needs_grad()) any = true;
  if (!any) return out;
  auto node = std::make_shared<GradNode>();
  node->op = op;
  for (const Tensor& p : parents)
    if (p.valid()) node->parents.push_back(p.impl());
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  return out;
}

}  // namespace dynrep
