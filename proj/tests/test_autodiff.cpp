#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dynrep/core/autodiff.hpp"
#include "dynrep/core/conv.hpp"
#include "dynrep/core/ops.hpp"
#include "dynrep/core/rng.hpp"

using namespace dynrep;

TEST_CASE("backward: sum gives ones, converged mse gives zeros") {
  Tensor w = Tensor::from({3}, {1.5, -2.0, 0.25}).set_requires_grad(true);
  backward(sum_all(w));
  REQUIRE(w.grad() == std::vector<double>{1, 1, 1});

  Tensor t = Tensor::from({3}, {0.1, 0.2, 0.3});
  Tensor w2 = t.detach().set_requires_grad(true);
  backward(mse(w2, t));
  for (double g : w2.grad()) REQUIRE(g == 0.0);
}

TEST_CASE("backward rejects non-scalar loss and re-entry") {
  Tensor w = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  Tensor y = square(w);
  REQUIRE_THROWS_AS(backward(y), Error);
  Tensor loss = sum_all(y);
  backward(loss);
  try {
    backward(loss);
    FAIL("expected state error");
  } catch (const Error& e) {
    REQUIRE(e.code() == ErrCode::state);
  }
  // sibling outputs of the consumed graph also refuse a second sweep
  Tensor w3 = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  Tensor mid = square(w3);
  Tensor l1 = sum_all(mid);
  Tensor l2 = mean_all(mid);
  backward(l1);
  REQUIRE_THROWS_AS(backward(l2), Error);
}

TEST_CASE("gradients accumulate when a tensor is used twice") {
  Tensor w = Tensor::from({2}, {3, 4}).set_requires_grad(true);
  backward(sum_all(add(w, w)));
  REQUIRE(w.grad() == std::vector<double>{2, 2});
}

TEST_CASE("no recording under NoGradGuard") {
  Tensor w = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  NoGradGuard ng;
  Tensor y = sum_all(square(w));
  REQUIRE(!y.has_node());
}

TEST_CASE("grad_check closed forms") {
  Rng rng(11);
  // sum of squares: analytic gradient 2x, very tight agreement
  Tensor x = Tensor::randn({6}, rng);
  double err = grad_check([](const Tensor& t) { return sum_all(square(t)); }, x);
  REQUIRE(err < 1e-7);
  // constant function: both gradients identically zero
  double errc =
      grad_check([](const Tensor&) { return Tensor::scalar(2.5); }, x);
  REQUIRE(errc == 0.0);
  // gelu composed with mean
  Tensor xg = Tensor::randn({12}, rng);
  double errg =
      grad_check([](const Tensor& t) { return mean_all(gelu(t)); }, xg);
  REQUIRE(errg < 1e-4);
  // non-scalar output rejected
  REQUIRE_THROWS_AS(grad_check([](const Tensor& t) { return square(t); }, x),
                    Error);
}

TEST_CASE("grad_check passes for every differentiable primitive") {
  Rng rng(123);
  auto check = [&](const char* name, std::function<Tensor(const Tensor&)> f,
                   Tensor x, double tol = 1e-6) {
    double e = grad_check(f, x);
    INFO(name);
    REQUIRE(e < tol);
  };

  Tensor a = Tensor::randn({3, 4}, rng);
  Tensor b = add_scalar(Tensor::randn({3, 4}, rng), 3.0);  // keep b away from 0
  Tensor row = Tensor::randn({4}, rng);

  check("add", [&](const Tensor& t) { return sum_all(add(t, b)); }, a);
  check("add.rhs", [&](const Tensor& t) { return sum_all(add(a, t)); }, b);
  check("sub", [&](const Tensor& t) { return sum_all(sub(t, b)); }, a);
  check("mul", [&](const Tensor& t) { return mean_all(mul(t, b)); }, a);
  check("mul.broadcast",
        [&](const Tensor& t) { return mean_all(mul(a, t)); }, row);
  check("div", [&](const Tensor& t) { return mean_all(div(t, b)); }, a);
  check("div.den", [&](const Tensor& t) { return mean_all(div(a, t)); }, b,
        1e-5);
  check("add_scalar",
        [&](const Tensor& t) { return sum_all(add_scalar(t, 0.7)); }, a);
  check("mul_scalar",
        [&](const Tensor& t) { return sum_all(mul_scalar(t, -1.3)); }, a);
  check("square", [&](const Tensor& t) { return mean_all(square(t)); }, a);
  check("sqrt", [&](const Tensor& t) { return mean_all(sqrt_op(t)); },
        add_scalar(square(a), 0.5).detach());
  check("relu", [&](const Tensor& t) { return sum_all(relu(t)); },
        add_scalar(Tensor::rand_uniform({3, 3}, rng), 0.1).detach());
  check("gelu", [&](const Tensor& t) { return mean_all(gelu(t)); }, a, 1e-5);
  check("mean.axis",
        [&](const Tensor& t) { return sum_all(reduce_mean(t, {1})); }, a);
  check("sum.keepdim",
        [&](const Tensor& t) {
          return mean_all(reduce_sum(t, {0}, true));
        },
        a);
  check("var", [&](const Tensor& t) { return sum_all(reduce_var(t, {0})); }, a,
        1e-5);
  check("softmax",
        [&](const Tensor& t) { return mean_all(square(softmax(t, 1))); }, a,
        1e-5);
  check("transpose",
        [&](const Tensor& t) {
          return sum_all(mul(transpose(t, {1, 0}), transpose(b, {1, 0})));
        },
        a);
  check("reshape",
        [&](const Tensor& t) { return mean_all(square(reshape(t, {4, 3}))); },
        a);
  check("concat",
        [&](const Tensor& t) { return mean_all(square(concat({t, b}, 0))); },
        a);
  check("index_select",
        [&](const Tensor& t) {
          return mean_all(square(index_select(t, 0, {2, 0, 2})));
        },
        a);
  check("broadcast_to",
        [&](const Tensor& t) {
          return mean_all(square(broadcast_to(t, {3, 4})));
        },
        row);
  Tensor m = Tensor::randn({4, 3}, rng);
  check("matmul.lhs",
        [&](const Tensor& t) { return mean_all(square(matmul(t, m))); }, a,
        1e-5);
  check("matmul.rhs",
        [&](const Tensor& t) { return mean_all(square(matmul(a, t))); }, m,
        1e-5);
  Tensor p = Tensor::randn({2, 3, 4}, rng);
  Tensor q = Tensor::randn({2, 4, 2}, rng);
  check("bmm.lhs", [&](const Tensor& t) { return mean_all(square(bmm(t, q))); },
        p, 1e-5);
  check("bmm.rhs", [&](const Tensor& t) { return mean_all(square(bmm(p, t))); },
        q, 1e-5);

  // conv3d: input, weight, and bias routes
  Tensor cin = Tensor::randn({2, 2, 3, 5, 5}, rng);
  Tensor cw = Tensor::randn({3, 2, 2, 3, 3}, rng, 0.5);
  Tensor cb = Tensor::randn({3}, rng);
  Conv3dSpec sp;
  sp.stride = {1, 2, 2};
  sp.pad = {0, 1, 1};
  check("conv3d.input",
        [&](const Tensor& t) {
          return mean_all(square(conv3d(t, cw, cb, sp)));
        },
        cin, 1e-5);
  check("conv3d.weight",
        [&](const Tensor& t) {
          return mean_all(square(conv3d(cin, t, cb, sp)));
        },
        cw, 1e-5);
  check("conv3d.bias",
        [&](const Tensor& t) {
          return mean_all(square(conv3d(cin, cw, t, sp)));
        },
        cb, 1e-5);
  Tensor dwin = Tensor::randn({1, 3, 2, 4, 4}, rng);
  Tensor dww = Tensor::randn({3, 1, 1, 3, 3}, rng);
  Conv3dSpec dsp;
  dsp.pad = {0, 1, 1};
  dsp.groups = 3;
  check("conv3d.depthwise",
        [&](const Tensor& t) {
          return mean_all(square(conv3d(dwin, t, dsp)));
        },
        dww, 1e-5);
}

TEST_CASE("random two-layer conv net gradient vs central differences") {
  Rng rng(2024);
  Tensor in = Tensor::randn({1, 1, 4, 6, 6}, rng);
  Tensor w1 = Tensor::randn({3, 1, 2, 3, 3}, rng, 0.5);
  Tensor b1 = Tensor::randn({3}, rng, 0.1);
  Tensor w2 = Tensor::randn({2, 3, 2, 2, 2}, rng, 0.5);
  Conv3dSpec s1;
  s1.stride = {1, 1, 1};
  s1.pad = {0, 1, 1};
  Conv3dSpec s2;
  s2.stride = {2, 2, 2};
  auto net = [&](const std::vector<Tensor>& ps) {
    Tensor h = gelu(conv3d(ps[0], ps[1], ps[2], s1));
    Tensor o = conv3d(h, ps[3], s2);
    return mean_all(square(o));
  };
  double err = grad_check_multi(net, {in, w1, b1, w2}, 1e-5);
  REQUIRE(err < 1e-4);
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(31);
  for (int rep = 0; rep < 5; ++rep) {
    Tensor x0 = Tensor::randn({5}, rng);
    double ca = rng.uniform(-2, 2), cb = rng.uniform(-2, 2);
    auto f = [](const Tensor& t) { return mean_all(square(t)); };
    auto g = [](const Tensor& t) { return sum_all(gelu(t)); };

    Tensor xa = x0.detach().set_requires_grad(true);
    backward(f(xa));
    Tensor xb = x0.detach().set_requires_grad(true);
    backward(g(xb));
    Tensor xc = x0.detach().set_requires_grad(true);
    backward(add(mul_scalar(f(xc), ca), mul_scalar(g(xc), cb)));

    for (size_t i = 0; i < 5; ++i) {
      double expect = ca * xa.grad()[i] + cb * xb.grad()[i];
      REQUIRE(xc.grad()[i] == Catch::Approx(expect).margin(1e-10));
    }
  }
}
