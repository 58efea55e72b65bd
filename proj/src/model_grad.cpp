#include "ddm/model_grad.hpp"

#include "ddm/common.hpp"

namespace ddm {

GradResult grad_params(const ModelSpec& spec, const ParamVector& params, const LabeledBatch& batch,
                       LossKind loss) {
  std::vector<Var> leaves = param_leaves(spec, params, true);
  Var in = input_leaf(spec, batch.inputs, false);
  ForwardOut fwd = forward_graph(spec, leaves, in);
  Var L = loss_graph(spec, fwd, batch.labels, loss);
  if (!all_finite(L->val))
    throw NumericError("non-finite loss at " + first_nonfinite(L));

  std::vector<Var> grads = gradients(L, leaves);
  GradResult out;
  out.loss = L->val[0];
  out.grad = params;  // copies the segment table
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!all_finite(grads[i]->val))
      throw NumericError("non-finite gradient in segment " + params.segments[i].name);
    out.grad.set_segment(i, grads[i]->val);
  }
  return out;
}

SyntheticGrad grad_synthetic(const ModelSpec& spec, const ParamVector& theta,
                             const LabeledBatch& synth, const ParamVector& target_grad,
                             DistanceKind dist, LossKind loss,
                             const std::function<Var(const Var&)>& input_transform) {
  if (theta.size() != target_grad.size())
    throw ConfigError("grad_synthetic: target gradient does not match parameter layout");

  std::vector<Var> leaves = param_leaves(spec, theta, true);
  Var pixels = input_leaf(spec, synth.inputs, true);
  Var fed = input_transform ? input_transform(pixels) : pixels;
  ForwardOut fwd = forward_graph(spec, leaves, fed);
  Var L = loss_graph(spec, fwd, synth.labels, loss);
  if (!all_finite(L->val))
    throw NumericError("non-finite synthetic loss at " + first_nonfinite(L));

  std::vector<Var> g_syn = gradients(L, leaves);
  std::vector<Var> g_target;
  g_target.reserve(leaves.size());
  for (std::size_t i = 0; i < target_grad.segments.size(); ++i) {
    Tensor t = target_grad.segment_tensor(i);
    for (double& x : t.vec()) x = -x;
    g_target.push_back(constant(std::move(t), target_grad.segments[i].name + ".target"));
  }

  DistanceResult d = distance_graph(dist, g_syn, g_target);
  if (!all_finite(d.node->val))
    throw NumericError("non-finite matching distance at " + first_nonfinite(d.node));

  Var pg = gradients(d.node, {pixels})[0];
  if (!all_finite(pg->val))
    throw NumericError("non-finite pixel gradient in matching distance");

  SyntheticGrad out;
  out.pixel_grad = pg->val;
  out.matching_loss = d.node->val[0];
  out.degenerate_segments = std::move(d.degenerate_segments);
  return out;
}

}  // namespace ddm
