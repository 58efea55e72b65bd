#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ddm/tensor.hpp"

namespace ddm {

struct Node;
using Var = std::shared_ptr<Node>;

// Define-by-run graph node. Forward values are computed eagerly at
// construction; backward() is SYMBOLIC: it returns the per-parent gradient
// contributions as new graph nodes, so gradients of gradients are ordinary
// graphs and second-order derivatives come out of the same machinery.
struct Node : std::enable_shared_from_this<Node> {
  Tensor val;
  bool needs_grad = false;
  std::vector<Var> parents;
  const char* op_name = "leaf";
  std::string label;  // optional tag surfaced by numeric-failure diagnostics

  virtual ~Node() = default;

  // grad_out has the shape of val. Returns one entry per parent; entries for
  // parents that do not need gradients may be null.
  virtual std::vector<Var> backward(const Var& grad_out);
};

Var leaf(Tensor v, bool needs_grad = false, std::string label = {});
Var constant(Tensor v, std::string label = {});
Var constant_scalar(double v);

// Elementwise; operands must have equal shapes, or either side may be a
// 1-element tensor which broadcasts against the other.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var neg(const Var& a);

Var matmul(const Var& a, const Var& b);  // [m,k]x[k,n]
Var transpose(const Var& a);             // 2-D

Var relu(const Var& a);  // second derivative is zero almost everywhere
Var tanh_op(const Var& a);
Var sqrt_op(const Var& a);  // domain: positive values

Var sum_all(const Var& a);                                     // -> [1]
Var broadcast_to(const Var& a, std::vector<std::size_t> shape);  // [1] -> shape
Var row_sums(const Var& a);                                    // [m,n] -> [m]
Var col_sums(const Var& a);                                    // [m,n] -> [n]
Var broadcast_cols(const Var& v, std::size_t n);               // [m] -> [m,n]
Var broadcast_rows(const Var& v, std::size_t m);               // [n] -> [m,n]
Var reshape(const Var& a, std::vector<std::size_t> shape);

Var softmax_rows(const Var& a);  // [m,n], numerically stable
// Mean cross-entropy of logits against integer labels; stable logsumexp form.
Var softmax_xent(const Var& logits, const std::vector<int>& labels);

// Valid convolution, stride 1, no padding: x [n,c,h,w] * w [o,c,k,k].
Var conv2d(const Var& x, const Var& w);
// Adjoint of conv2d w.r.t. its input / weight; both are first-class ops so
// the conv family is closed under repeated differentiation.
Var conv2d_input_adj(const Var& g, const Var& w);
Var conv2d_weight_adj(const Var& g, const Var& x, std::size_t k);

Var avgpool2(const Var& x, std::size_t p);  // floor truncation on odd dims
Var avgpool2_adj(const Var& g, std::size_t p, std::size_t h, std::size_t w);

Var add_chan_bias(const Var& x, const Var& b);  // x [n,c,h,w] + b [c]
Var chan_sums(const Var& x);                    // -> [c]

// Shift image content by (dy, dx) with zero fill; adjoint is the opposite
// shift. flip_h mirrors the last axis and is self-adjoint.
Var shift2d(const Var& x, int dy, int dx);
Var flip_h(const Var& x);

// Reverse-mode gradients of a scalar root (or any root when seed is given)
// with respect to each entry of wrt. Unreachable wrt entries get zero
// gradients of the right shape. Deterministic traversal order.
std::vector<Var> gradients(const Var& root, const std::vector<Var>& wrt, Var seed = nullptr);

bool all_finite(const Tensor& t);
// Description of the first node (forward topological order) whose value is
// non-finite, or empty string if the whole graph is finite.
std::string first_nonfinite(const Var& root);

}  // namespace ddm
