#pragma once

#include <cmath>

#include <json.hpp>

#include "dynrep/core/ops.hpp"

namespace dynrep {

struct VicregWeights {
  double lambda = 2.0;  // invariance
  double mu = 40.0;     // variance
  double nu = 2.0;      // covariance
  double eps = 1e-4;    // variance stabilizer
  double gamma = 1.0;   // target standard deviation

  void validate() const {
    if (lambda < 0.0 || mu < 0.0 || nu < 0.0)
      throw Error(ErrCode::value, "vicreg: weights must be >= 0");
    if (eps <= 0.0) throw Error(ErrCode::value, "vicreg: eps must be > 0");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VicregWeights, lambda, mu, nu,
                                                eps, gamma)

struct VicregParts {
  Tensor loss;  // differentiable scalar
  double s = 0.0, v_a = 0.0, v_b = 0.0, c_a = 0.0, c_b = 0.0;
};

namespace detail {

inline void check_embeddings(const Tensor& z, const char* which) {
  if (z.shape().size() != 2)
    throw Error(ErrCode::shape,
                std::string("vicreg: ") + which + " must be [n, d]");
  for (double v : z.data())
    if (!std::isfinite(v))
      throw Error(ErrCode::numeric,
                  std::string("vicreg: non-finite values in ") + which);
}

// mean over dims of max(0, gamma - sqrt(var + eps)), population variance
inline Tensor vicreg_variance(const Tensor& z, const VicregWeights& w) {
  Tensor sd = sqrt_op(add_scalar(reduce_var(z, {0}), w.eps));
  return mean_all(relu(add_scalar(neg(sd), w.gamma)));
}

// (1/d) * sum of squared off-diagonal entries of the batch covariance
inline Tensor vicreg_covariance(const Tensor& z) {
  int64_t n = z.shape()[0], d = z.shape()[1];
  Tensor centered = sub(z, reduce_mean(z, {0}, true));
  Tensor cov = mul_scalar(matmul(transpose(centered, {1, 0}), centered),
                          1.0 / static_cast<double>(n));
  std::vector<double> off(static_cast<size_t>(d * d), 1.0);
  for (int64_t i = 0; i < d; ++i) off[static_cast<size_t>(i * d + i)] = 0.0;
  Tensor masked = mul(cov, Tensor::from({d, d}, std::move(off)));
  return mul_scalar(sum_all(square(masked)), 1.0 / static_cast<double>(d));
}

}  // namespace detail

inline VicregParts vicreg_parts(const Tensor& z_a, const Tensor& z_b,
                                const VicregWeights& w = {}) {
  w.validate();
  detail::check_embeddings(z_a, "z_a");
  detail::check_embeddings(z_b, "z_b");
  if (z_a.shape() != z_b.shape())
    throw Error(ErrCode::shape, "vicreg: branch shapes differ");
  int64_t n = z_a.shape()[0];
  if (n < 2)
    throw Error(ErrCode::value,
                "vicreg: batch of " + std::to_string(n) +
                    " leaves the variance term undefined (need n >= 2)");

  Tensor s = mul_scalar(sum_all(square(sub(z_a, z_b))),
                        1.0 / static_cast<double>(n));
  Tensor v_a = detail::vicreg_variance(z_a, w);
  Tensor v_b = detail::vicreg_variance(z_b, w);
  Tensor c_a = detail::vicreg_covariance(z_a);
  Tensor c_b = detail::vicreg_covariance(z_b);

  VicregParts parts;
  parts.loss = add(mul_scalar(s, w.lambda),
                   add(mul_scalar(add(v_a, v_b), w.mu),
                       mul_scalar(add(c_a, c_b), w.nu)));
  parts.s = s.data()[0];
  parts.v_a = v_a.data()[0];
  parts.v_b = v_b.data()[0];
  parts.c_a = c_a.data()[0];
  parts.c_b = c_b.data()[0];
  return parts;
}

inline Tensor vicreg_loss(const Tensor& z_a, const Tensor& z_b,
                          const VicregWeights& w = {}) {
  return vicreg_parts(z_a, z_b, w).loss;
}

}  // namespace dynrep
