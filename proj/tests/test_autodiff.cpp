#include <doctest.h>

#include <cmath>
#include <functional>

#include "ddm/autodiff.hpp"
#include "ddm/distance.hpp"
#include "ddm/rng.hpp"

using namespace ddm;

namespace {

using Builder = std::function<Var(const std::vector<Var>&)>;

Tensor rnd(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

// Uniform magnitude in [lo, hi] with random sign; keeps inputs away from
// kinks (relu) and singularities (div).
Tensor rnd_away(std::vector<std::size_t> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.vec()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return t;
}

double eval_scalar(const Builder& f, const std::vector<Tensor>& xs, const Tensor& cot) {
  std::vector<Var> leaves;
  for (const Tensor& t : xs) leaves.push_back(leaf(t, true));
  Var s = sum_all(mul(f(leaves), constant(cot)));
  return s->val[0];
}

// Scalarizes the op through a fixed random cotangent and compares every
// analytic input gradient against central finite differences.
void check_grads(const std::string& name, const Builder& f, std::vector<Tensor> xs,
                 double tol = 5e-6) {
  Rng rng(fnv1a(name));
  std::vector<Var> leaves;
  for (const Tensor& t : xs) leaves.push_back(leaf(t, true));
  Var y = f(leaves);
  Tensor cot = rnd(y->val.shape(), rng);
  Var s = sum_all(mul(y, constant(cot)));
  std::vector<Var> gs = gradients(s, leaves);

  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::vector<double> fd = finite_diff(
        [&](const std::vector<double>& v) {
          std::vector<Tensor> mod = xs;
          mod[i].vec() = v;
          return eval_scalar(f, mod, cot);
        },
        xs[i].vec());
    REQUIRE(gs[i]->val.numel() == fd.size());
    for (std::size_t j = 0; j < fd.size(); ++j) {
      CAPTURE(name);
      CAPTURE(i);
      CAPTURE(j);
      CHECK(std::abs(gs[i]->val[j] - fd[j]) <= tol * std::max(1.0, std::abs(fd[j])));
    }
  }
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(11);
  Tensor a = rnd({2, 3}, rng), b = rnd_away({2, 3}, rng, 0.5, 2.0);
  Tensor one = rnd({1}, rng);
  check_grads("add", [](const std::vector<Var>& v) { return add(v[0], v[1]); }, {a, b});
  check_grads("sub", [](const std::vector<Var>& v) { return sub(v[0], v[1]); }, {a, b});
  check_grads("mul", [](const std::vector<Var>& v) { return mul(v[0], v[1]); }, {a, b});
  check_grads("div", [](const std::vector<Var>& v) { return div(v[0], v[1]); }, {a, b});
  check_grads("add broadcast", [](const std::vector<Var>& v) { return add(v[0], v[1]); },
              {a, one});
  check_grads("mul broadcast scalar first",
              [](const std::vector<Var>& v) { return mul(v[0], v[1]); }, {one, b});
  check_grads("scale", [](const std::vector<Var>& v) { return scale(v[0], -1.7); }, {a});
  check_grads("neg", [](const std::vector<Var>& v) { return neg(v[0]); }, {a});
}

TEST_CASE("matrix and activation gradients match finite differences") {
  Rng rng(12);
  check_grads("matmul", [](const std::vector<Var>& v) { return matmul(v[0], v[1]); },
              {rnd({2, 3}, rng), rnd({3, 4}, rng)});
  check_grads("transpose", [](const std::vector<Var>& v) { return transpose(v[0]); },
              {rnd({2, 5}, rng)});
  check_grads("relu", [](const std::vector<Var>& v) { return relu(v[0]); },
              {rnd_away({3, 4}, rng, 0.1, 1.0)});
  check_grads("tanh", [](const std::vector<Var>& v) { return tanh_op(v[0]); },
              {rnd({3, 4}, rng)});
  check_grads("sqrt", [](const std::vector<Var>& v) { return sqrt_op(v[0]); },
              {rnd({3, 4}, rng, 0.5, 2.0)});
  check_grads("tanh of matmul chain",
              [](const std::vector<Var>& v) { return tanh_op(matmul(v[0], v[1])); },
              {rnd({2, 3}, rng), rnd({3, 2}, rng)});
}

TEST_CASE("reduction and broadcast gradients match finite differences") {
  Rng rng(13);
  check_grads("sum_all", [](const std::vector<Var>& v) { return sum_all(v[0]); },
              {rnd({3, 4}, rng)});
  check_grads("broadcast_to",
              [](const std::vector<Var>& v) { return broadcast_to(v[0], {3, 4}); },
              {rnd({1}, rng)});
  check_grads("row_sums", [](const std::vector<Var>& v) { return row_sums(v[0]); },
              {rnd({3, 4}, rng)});
  check_grads("col_sums", [](const std::vector<Var>& v) { return col_sums(v[0]); },
              {rnd({3, 4}, rng)});
  check_grads("broadcast_cols",
              [](const std::vector<Var>& v) { return broadcast_cols(v[0], 4); },
              {rnd({3}, rng)});
  check_grads("broadcast_rows",
              [](const std::vector<Var>& v) { return broadcast_rows(v[0], 3); },
              {rnd({4}, rng)});
  check_grads("reshape", [](const std::vector<Var>& v) { return reshape(v[0], {3, 4}); },
              {rnd({2, 6}, rng)});
}

TEST_CASE("softmax gradients match finite differences and rows normalize") {
  Rng rng(14);
  Tensor logits = rnd({3, 5}, rng, -2.0, 2.0);
  check_grads("softmax_rows", [](const std::vector<Var>& v) { return softmax_rows(v[0]); },
              {logits});
  const std::vector<int> labels{0, 4, 2};
  check_grads("softmax_xent",
              [&](const std::vector<Var>& v) { return softmax_xent(v[0], labels); }, {logits});

  Var p = softmax_rows(leaf(logits));
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      s += p->val[r * 5 + c];
      CHECK(p->val[r * 5 + c] >= 0.0);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("conv family gradients match finite differences") {
  Rng rng(15);
  Tensor x = rnd({2, 2, 5, 5}, rng), w = rnd({3, 2, 3, 3}, rng), g = rnd({2, 3, 3, 3}, rng);
  check_grads("conv2d", [](const std::vector<Var>& v) { return conv2d(v[0], v[1]); }, {x, w});
  check_grads("conv2d_input_adj",
              [](const std::vector<Var>& v) { return conv2d_input_adj(v[0], v[1]); }, {g, w});
  check_grads("conv2d_weight_adj",
              [](const std::vector<Var>& v) { return conv2d_weight_adj(v[0], v[1], 3); },
              {g, x});
}

TEST_CASE("pool, bias, shift, flip gradients match finite differences") {
  Rng rng(16);
  check_grads("avgpool2", [](const std::vector<Var>& v) { return avgpool2(v[0], 2); },
              {rnd({1, 2, 5, 5}, rng)});
  check_grads("avgpool2_adj",
              [](const std::vector<Var>& v) { return avgpool2_adj(v[0], 2, 5, 5); },
              {rnd({1, 2, 2, 2}, rng)});
  check_grads("add_chan_bias",
              [](const std::vector<Var>& v) { return add_chan_bias(v[0], v[1]); },
              {rnd({2, 3, 4, 4}, rng), rnd({3}, rng)});
  check_grads("chan_sums", [](const std::vector<Var>& v) { return chan_sums(v[0]); },
              {rnd({2, 3, 4, 4}, rng)});
  check_grads("shift2d", [](const std::vector<Var>& v) { return shift2d(v[0], 1, -2); },
              {rnd({1, 2, 4, 4}, rng)});
  check_grads("flip_h", [](const std::vector<Var>& v) { return flip_h(v[0]); },
              {rnd({1, 2, 3, 4}, rng)});
}

TEST_CASE("conv adjoint identities hold exactly") {
  Rng rng(17);
  Tensor x = rnd({2, 2, 6, 6}, rng), w = rnd({3, 2, 3, 3}, rng), y = rnd({2, 3, 4, 4}, rng);
  Tensor cxw = conv2d(leaf(x), leaf(w))->val;
  Tensor ax = conv2d_input_adj(leaf(y), leaf(w))->val;
  Tensor aw = conv2d_weight_adj(leaf(y), leaf(x), 3)->val;
  // <conv(x,w), y> == <x, A_x(y,w)> == <w, A_w(y,x)>
  CHECK(dot(cxw, y) == doctest::Approx(dot(x, ax)).epsilon(1e-12));
  CHECK(dot(cxw, y) == doctest::Approx(dot(w, aw)).epsilon(1e-12));
}

TEST_CASE("pool, shift and flip adjoint identities hold exactly") {
  Rng rng(18);
  Tensor x = rnd({2, 1, 5, 5}, rng), y = rnd({2, 1, 2, 2}, rng);
  CHECK(dot(avgpool2(leaf(x), 2)->val, y) ==
        doctest::Approx(dot(x, avgpool2_adj(leaf(y), 2, 5, 5)->val)).epsilon(1e-12));

  Tensor u = rnd({1, 1, 4, 4}, rng), v = rnd({1, 1, 4, 4}, rng);
  CHECK(dot(shift2d(leaf(u), 1, -2)->val, v) ==
        doctest::Approx(dot(u, shift2d(leaf(v), -1, 2)->val)).epsilon(1e-12));
  CHECK(dot(flip_h(leaf(u))->val, v) ==
        doctest::Approx(dot(u, flip_h(leaf(v))->val)).epsilon(1e-12));
}

TEST_CASE("double backward of x*x is exactly 2c") {
  Rng rng(19);
  Tensor x0 = rnd({2, 3}, rng);
  Tensor c = rnd({2, 3}, rng);
  Var x = leaf(x0, true);
  Var y = sum_all(mul(x, x));
  Var g = gradients(y, {x})[0];  // 2x as a graph node
  Var h = sum_all(mul(g, constant(c)));
  Tensor d2 = gradients(h, {x})[0]->val;
  for (std::size_t i = 0; i < d2.numel(); ++i) CHECK(d2[i] == doctest::Approx(2.0 * c[i]));
}

TEST_CASE("double backward through tanh matches finite differences") {
  Rng rng(20);
  Tensor x0 = rnd({2, 3}, rng);
  Tensor c = rnd({2, 3}, rng);

  auto grad_dot_c = [&](const std::vector<double>& xv) {
    Tensor xt = x0;
    xt.vec() = xv;
    Var x = leaf(xt, true);
    Var y = sum_all(mul(tanh_op(x), x));
    Var g = gradients(y, {x})[0];
    return sum_all(mul(g, constant(c)))->val[0];
  };

  Var x = leaf(x0, true);
  Var y = sum_all(mul(tanh_op(x), x));
  Var g = gradients(y, {x})[0];
  Var h = sum_all(mul(g, constant(c)));
  Tensor analytic = gradients(h, {x})[0]->val;

  std::vector<double> fd = finite_diff(grad_dot_c, x0.vec());
  for (std::size_t i = 0; i < fd.size(); ++i)
    CHECK(std::abs(analytic[i] - fd[i]) <= 5e-6 * std::max(1.0, std::abs(fd[i])));
}

TEST_CASE("double backward through the conv weight gradient matches finite differences") {
  Rng rng(21);
  Tensor x0 = rnd({1, 1, 4, 4}, rng);
  Tensor w0 = rnd({1, 1, 3, 3}, rng);
  Tensor c = rnd({1, 1, 3, 3}, rng);

  auto weight_grad_dot_c = [&](const std::vector<double>& xv) {
    Tensor xt = x0;
    xt.vec() = xv;
    Var x = leaf(xt, true);
    Var w = leaf(w0, true);
    Var y = conv2d(x, w);
    Var loss = sum_all(mul(y, y));
    Var gw = gradients(loss, {w})[0];
    return sum_all(mul(gw, constant(c)))->val[0];
  };

  Var x = leaf(x0, true);
  Var w = leaf(w0, true);
  Var loss = sum_all(mul(conv2d(x, w), conv2d(x, w)));
  Var gw = gradients(loss, {w})[0];
  Var h = sum_all(mul(gw, constant(c)));
  Tensor analytic = gradients(h, {x})[0]->val;

  std::vector<double> fd = finite_diff(weight_grad_dot_c, x0.vec());
  for (std::size_t i = 0; i < fd.size(); ++i)
    CHECK(std::abs(analytic[i] - fd[i]) <= 5e-6 * std::max(1.0, std::abs(fd[i])));
}

TEST_CASE("relu gradient is piecewise constant so its second derivative is zero") {
  Rng rng(22);
  Tensor x0 = rnd_away({2, 3}, rng, 0.1, 1.0);
  Tensor c = rnd({2, 3}, rng);
  Var x = leaf(x0, true);
  Var y = sum_all(relu(x));
  Var g = gradients(y, {x})[0];
  Var h = sum_all(mul(g, constant(c)));
  Tensor d2 = gradients(h, {x})[0]->val;
  for (std::size_t i = 0; i < d2.numel(); ++i) CHECK(d2[i] == 0.0);
}

TEST_CASE("gradients of unreachable leaves are zero tensors of the right shape") {
  Var x = leaf(Tensor({2, 2}, {1, 2, 3, 4}), true);
  Var z = leaf(Tensor({3}, {1, 1, 1}), true);
  Var y = sum_all(mul(x, x));
  std::vector<Var> gs = gradients(y, {x, z});
  CHECK(gs[1]->val.shape() == std::vector<std::size_t>{3});
  for (std::size_t i = 0; i < 3; ++i) CHECK(gs[1]->val[i] == 0.0);
}

TEST_CASE("gradient seed must match the root shape") {
  Var x = leaf(Tensor({2, 2}, {1, 2, 3, 4}), true);
  Var y = mul(x, x);  // non-scalar root
  Var bad_seed = constant(Tensor({3}, {1, 1, 1}));
  CHECK_THROWS(gradients(y, {x}, bad_seed));
  Var good_seed = constant(Tensor({2, 2}, {1, 1, 1, 1}));
  Tensor g = gradients(y, {x}, good_seed)[0]->val;
  for (std::size_t i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(2.0 * x->val[i]));
}

TEST_CASE("first_nonfinite names the op that produced a non-finite value") {
  Var num = constant(Tensor::scalar(1.0));
  Var den = constant(Tensor::scalar(0.0));
  Var y = add(div(num, den), constant_scalar(1.0));
  const std::string where = first_nonfinite(y);
  CHECK(where.find("div") != std::string::npos);
  CHECK(all_finite(y->val) == false);
}
