#pragma once

#include <functional>
#include <vector>

#include "ddm/autodiff.hpp"

namespace ddm {

enum class DistanceKind { layerwise_cosine, mse };

struct DistanceResult {
  Var node;  // scalar
  // Segments whose cosine term was clamped to the constant 1 because one of
  // the gradient vectors had norm below 1e-10 (treated as orthogonal).
  std::vector<std::size_t> degenerate_segments;
};

// a and b are parallel per-segment gradient nodes. layerwise_cosine sums
// 1 - cos per segment (range [0, 2*segments]); mse is the mean squared
// difference over the concatenation of all segments.
DistanceResult distance_graph(DistanceKind kind, const std::vector<Var>& a,
                              const std::vector<Var>& b);

inline constexpr double kCosineNormEps = 1e-12;
inline constexpr double kDegenerateNorm = 1e-10;

// Central differences; test oracle for analytic gradients.
std::vector<double> finite_diff(const std::function<double(const std::vector<double>&)>& f,
                                const std::vector<double>& x, double eps = 1e-5);

}  // namespace ddm
