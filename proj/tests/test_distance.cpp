#include <doctest.h>

#include <cmath>

#include "ddm/autodiff.hpp"
#include "ddm/distance.hpp"
#include "ddm/rng.hpp"

using namespace ddm;

namespace {

std::vector<Var> as_leaves(const std::vector<Tensor>& ts, bool needs_grad = false) {
  std::vector<Var> out;
  for (const Tensor& t : ts) out.push_back(leaf(t, needs_grad));
  return out;
}

std::vector<Tensor> random_segments(Rng& rng) {
  std::vector<Tensor> ts;
  for (std::vector<std::size_t> shape : {std::vector<std::size_t>{3, 2},
                                         std::vector<std::size_t>{4},
                                         std::vector<std::size_t>{2, 2, 2}}) {
    Tensor t(shape);
    for (double& v : t.vec()) v = rng.uniform(-1.0, 1.0);
    ts.push_back(t);
  }
  return ts;
}

}  // namespace

TEST_CASE("layerwise cosine distance is zero for identical and scaled gradients") {
  Rng rng(31);
  std::vector<Tensor> a = random_segments(rng);
  std::vector<Tensor> scaled = a;
  for (Tensor& t : scaled)
    for (double& v : t.vec()) v *= 3.7;

  DistanceResult same = distance_graph(DistanceKind::layerwise_cosine, as_leaves(a), as_leaves(a));
  CHECK(same.node->val[0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(same.degenerate_segments.empty());

  DistanceResult sc = distance_graph(DistanceKind::layerwise_cosine, as_leaves(a), as_leaves(scaled));
  CHECK(sc.node->val[0] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("layerwise cosine distance of opposite gradients is two per segment") {
  Rng rng(32);
  std::vector<Tensor> a = random_segments(rng);
  std::vector<Tensor> negated = a;
  for (Tensor& t : negated)
    for (double& v : t.vec()) v = -v;
  DistanceResult d = distance_graph(DistanceKind::layerwise_cosine, as_leaves(a), as_leaves(negated));
  CHECK(d.node->val[0] == doctest::Approx(2.0 * a.size()).epsilon(1e-9));
}

TEST_CASE("layerwise cosine distance stays within its range on random input") {
  Rng rng(33);
  for (int trial = 0; trial < 8; ++trial) {
    std::vector<Tensor> a = random_segments(rng);
    std::vector<Tensor> b = random_segments(rng);
    DistanceResult d = distance_graph(DistanceKind::layerwise_cosine, as_leaves(a), as_leaves(b));
    CHECK(d.node->val[0] >= -1e-12);
    CHECK(d.node->val[0] <= 2.0 * a.size() + 1e-12);
  }
}

TEST_CASE("near-zero-norm segments are reported and contribute exactly one") {
  Rng rng(34);
  std::vector<Tensor> a = random_segments(rng);
  std::vector<Tensor> b = a;  // identical, so live segments contribute 0
  for (double& v : a[1].vec()) v = 0.0;

  DistanceResult d = distance_graph(DistanceKind::layerwise_cosine, as_leaves(a), as_leaves(b));
  REQUIRE(d.degenerate_segments.size() == 1);
  CHECK(d.degenerate_segments[0] == 1);
  CHECK(d.node->val[0] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("mse distance matches the hand-computed mean over all segments") {
  Rng rng(35);
  std::vector<Tensor> a = random_segments(rng);
  std::vector<Tensor> b = random_segments(rng);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < a.size(); ++s) {
    for (std::size_t i = 0; i < a[s].numel(); ++i) {
      double diff = a[s][i] - b[s][i];
      acc += diff * diff;
    }
    n += a[s].numel();
  }
  DistanceResult d = distance_graph(DistanceKind::mse, as_leaves(a), as_leaves(b));
  CHECK(d.node->val[0] == doctest::Approx(acc / static_cast<double>(n)).epsilon(1e-12));
  CHECK(d.degenerate_segments.empty());
}

TEST_CASE("distance graphs are differentiable and match finite differences") {
  Rng rng(36);
  Tensor a0({2, 3}), b0({2, 3});
  for (double& v : a0.vec()) v = rng.uniform(-1.0, 1.0);
  for (double& v : b0.vec()) v = rng.uniform(-1.0, 1.0);

  for (DistanceKind kind : {DistanceKind::layerwise_cosine, DistanceKind::mse}) {
    Var a = leaf(a0, true);
    Var b = leaf(b0);
    DistanceResult d = distance_graph(kind, {a}, {b});
    Tensor analytic = gradients(d.node, {a})[0]->val;

    std::vector<double> fd = finite_diff(
        [&](const std::vector<double>& xv) {
          Tensor at = a0;
          at.vec() = xv;
          return distance_graph(kind, {leaf(at)}, {leaf(b0)}).node->val[0];
        },
        a0.vec());
    for (std::size_t i = 0; i < fd.size(); ++i)
      CHECK(std::abs(analytic[i] - fd[i]) <= 5e-6 * std::max(1.0, std::abs(fd[i])));
  }
}

TEST_CASE("mismatched segment lists are rejected") {
  Tensor t({2}, {1.0, 2.0});
  CHECK_THROWS(distance_graph(DistanceKind::mse, {leaf(t), leaf(t)}, {leaf(t)}));
  CHECK_THROWS(distance_graph(DistanceKind::layerwise_cosine, {}, {}));
}

TEST_CASE("central differences recover the derivative of a quadratic") {
  std::vector<double> x{0.3, -0.7, 1.2};
  std::vector<double> fd = finite_diff(
      [](const std::vector<double>& v) {
        double s = 0.0;
        for (double u : v) s += u * u;
        return s;
      },
      x);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(fd[i] == doctest::Approx(2.0 * x[i]).epsilon(1e-8));
}
