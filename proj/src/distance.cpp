#include "ddm/distance.hpp"

#include <cmath>

#include "ddm/common.hpp"

namespace ddm {

namespace {

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double x : t.vec()) s += x * x;
  return std::sqrt(s);
}

}  // namespace

DistanceResult distance_graph(DistanceKind kind, const std::vector<Var>& a,
                              const std::vector<Var>& b) {
  if (a.size() != b.size() || a.empty())
    throw ConfigError("distance_graph: segment lists must be non-empty and parallel");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i]->val.same_shape(b[i]->val))
      throw ConfigError("distance_graph: segment " + std::to_string(i) + " shape mismatch");

  DistanceResult res;
  if (kind == DistanceKind::mse) {
    std::size_t total = 0;
    Var acc;
    for (std::size_t i = 0; i < a.size(); ++i) {
      Var d = sub(a[i], b[i]);
      Var s = sum_all(mul(d, d));
      acc = acc ? add(acc, s) : s;
      total += a[i]->val.numel();
    }
    res.node = scale(acc, 1.0 / static_cast<double>(total));
    return res;
  }

  // layerwise cosine
  Var acc;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double na_val = l2_norm(a[i]->val);
    const double nb_val = l2_norm(b[i]->val);
    Var term;
    if (na_val < kDegenerateNorm || nb_val < kDegenerateNorm) {
      // Near-zero gradient on this segment: the angle is undefined, so the
      // segment contributes a constant 1 and is reported to the caller.
      term = constant_scalar(1.0);
      res.degenerate_segments.push_back(i);
    } else {
      Var dot = sum_all(mul(a[i], b[i]));
      Var na = sqrt_op(sum_all(mul(a[i], a[i])));
      Var nb = sqrt_op(sum_all(mul(b[i], b[i])));
      Var denom = mul(add(na, constant_scalar(kCosineNormEps)),
                      add(nb, constant_scalar(kCosineNormEps)));
      term = sub(constant_scalar(1.0), div(dot, denom));
    }
    acc = acc ? add(acc, term) : term;
  }
  res.node = acc;
  return res;
}

std::vector<double> finite_diff(const std::function<double(const std::vector<double>&)>& f,
                                const std::vector<double>& x, double eps) {
  std::vector<double> g(x.size());
  std::vector<double> xt = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double h = eps * std::max(1.0, std::abs(x[i]));
    xt[i] = x[i] + h;
    const double fp = f(xt);
    xt[i] = x[i] - h;
    const double fm = f(xt);
    xt[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace ddm
