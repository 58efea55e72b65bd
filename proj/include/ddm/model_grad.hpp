#pragma once

#include <functional>

#include "ddm/distance.hpp"
#include "ddm/models.hpp"

namespace ddm {

struct GradResult {
  ParamVector grad;
  double loss = 0.0;
};

// Mean-loss gradient over the batch. Throws NumericError naming the first
// non-finite node when the loss or a gradient blows up.
GradResult grad_params(const ModelSpec& spec, const ParamVector& params, const LabeledBatch& batch,
                       LossKind loss = LossKind::cross_entropy);

struct SyntheticGrad {
  Tensor pixel_grad;  // shape of the synthetic inputs
  double matching_loss = 0.0;
  std::vector<std::size_t> degenerate_segments;
};

// Gradient w.r.t. the synthetic pixels of
//   Dist( grad_theta L(theta, S), -target_grad ).
// The sign flip on the target is the reversed-matching convention: a synset
// whose gradients cancel the real ones rewinds that data's contribution.
// input_transform, when set, is a differentiable augmentation applied to the
// pixel leaf before the forward pass.
SyntheticGrad grad_synthetic(const ModelSpec& spec, const ParamVector& theta,
                             const LabeledBatch& synth, const ParamVector& target_grad,
                             DistanceKind dist, LossKind loss = LossKind::cross_entropy,
                             const std::function<Var(const Var&)>& input_transform = {});

}  // namespace ddm
