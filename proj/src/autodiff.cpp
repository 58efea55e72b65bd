#include "ddm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "ddm/common.hpp"

namespace ddm {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

bool any_needs_grad(const std::vector<Var>& ps) {
  return std::any_of(ps.begin(), ps.end(), [](const Var& p) { return p && p->needs_grad; });
}

// Shapes must match, or either side is a 1-element scalar that broadcasts.
void check_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b) || a.numel() == 1 || b.numel() == 1) return;
  throw ConfigError(std::string(op) + ": shape mismatch " + Tensor::shape_str(a.shape()) +
                    " vs " + Tensor::shape_str(b.shape()));
}

const std::vector<std::size_t>& binary_shape(const Tensor& a, const Tensor& b) {
  return a.numel() == 1 ? (b.numel() == 1 ? a.shape() : b.shape()) : a.shape();
}

// Reduce a full-shape gradient down to a scalar parent.
Var reduce_for(const Var& parent, const Var& g) {
  if (parent->val.numel() == 1 && g->val.numel() > 1) return sum_all(g);
  return g;
}

struct AddNode : Node {
  std::vector<Var> backward(const Var& g) override {
    return {reduce_for(parents[0], g), reduce_for(parents[1], g)};
  }
};

struct SubNode : Node {
  std::vector<Var> backward(const Var& g) override {
    return {reduce_for(parents[0], g), reduce_for(parents[1], neg(g))};
  }
};

struct MulNode : Node {
  std::vector<Var> backward(const Var& g) override {
    return {reduce_for(parents[0], mul(g, parents[1])),
            reduce_for(parents[1], mul(g, parents[0]))};
  }
};

struct DivNode : Node {
  std::vector<Var> backward(const Var& g) override {
    Var ga = reduce_for(parents[0], div(g, parents[1]));
    Var gb = reduce_for(parents[1], neg(div(mul(g, parents[0]), mul(parents[1], parents[1]))));
    return {ga, gb};
  }
};

struct ScaleNode : Node {
  double c = 1.0;
  std::vector<Var> backward(const Var& g) override { return {scale(g, c)}; }
};

struct MatmulNode : Node {
  std::vector<Var> backward(const Var& g) override {
    return {matmul(g, transpose(parents[1])), matmul(transpose(parents[0]), g)};
  }
};

struct TransposeNode : Node {
  std::vector<Var> backward(const Var& g) override { return {transpose(g)}; }
};

struct ReluNode : Node {
  Tensor mask;  // 1 where input > 0; constant w.r.t. further differentiation
  std::vector<Var> backward(const Var& g) override { return {mul(g, constant(mask))}; }
};

struct TanhNode : Node {
  std::vector<Var> backward(const Var& g) override {
    Var y = shared_from_this();
    Tensor ones(val.shape());
    std::fill(ones.vec().begin(), ones.vec().end(), 1.0);
    return {mul(g, sub(constant(std::move(ones)), mul(y, y)))};
  }
};

struct SqrtNode : Node {
  std::vector<Var> backward(const Var& g) override {
    return {div(scale(g, 0.5), shared_from_this())};
  }
};

struct SumAllNode : Node {
  std::vector<Var> backward(const Var& g) override {
    return {broadcast_to(g, parents[0]->val.shape())};
  }
};

struct BroadcastToNode : Node {
  std::vector<Var> backward(const Var& g) override { return {sum_all(g)}; }
};

struct RowSumsNode : Node {
  std::vector<Var> backward(const Var& g) override {
    return {broadcast_cols(g, parents[0]->val.dim(1))};
  }
};

struct ColSumsNode : Node {
  std::vector<Var> backward(const Var& g) override {
    return {broadcast_rows(g, parents[0]->val.dim(0))};
  }
};

struct BroadcastColsNode : Node {
  std::vector<Var> backward(const Var& g) override { return {row_sums(g)}; }
};

struct BroadcastRowsNode : Node {
  std::vector<Var> backward(const Var& g) override { return {col_sums(g)}; }
};

struct ReshapeNode : Node {
  std::vector<Var> backward(const Var& g) override {
    return {reshape(g, parents[0]->val.shape())};
  }
};

struct SoftmaxRowsNode : Node {
  std::vector<Var> backward(const Var& g) override {
    Var y = shared_from_this();
    Var t = mul(g, y);
    Var s = row_sums(t);
    return {mul(y, sub(g, broadcast_cols(s, val.dim(1))))};
  }
};

struct SoftmaxXentNode : Node {
  std::vector<int> labels;
  std::vector<Var> backward(const Var& g) override {
    const Var& logits = parents[0];
    std::size_t m = logits->val.dim(0), n = logits->val.dim(1);
    Tensor onehot({m, n});
    for (std::size_t i = 0; i < m; ++i) onehot[i * n + labels[i]] = 1.0;
    Var d = sub(softmax_rows(logits), constant(std::move(onehot)));
    return {scale(mul(d, g), 1.0 / static_cast<double>(m))};
  }
};

struct Conv2dNode : Node {
  std::vector<Var> backward(const Var& g) override {
    return {conv2d_input_adj(g, parents[1]),
            conv2d_weight_adj(g, parents[0], parents[1]->val.dim(2))};
  }
};

struct ConvInputAdjNode : Node {
  std::vector<Var> backward(const Var& g) override {
    // g here has the shape of the reconstructed input.
    return {conv2d(g, parents[1]), conv2d_weight_adj(parents[0], g, parents[1]->val.dim(2))};
  }
};

struct ConvWeightAdjNode : Node {
  std::vector<Var> backward(const Var& g) override {
    // g has the weight shape [o,c,k,k].
    return {conv2d(parents[1], g), conv2d_input_adj(parents[0], g)};
  }
};

struct AvgPoolNode : Node {
  std::size_t p = 2;
  std::vector<Var> backward(const Var& g) override {
    return {avgpool2_adj(g, p, parents[0]->val.dim(2), parents[0]->val.dim(3))};
  }
};

struct AvgPoolAdjNode : Node {
  std::size_t p = 2;
  std::vector<Var> backward(const Var& g) override { return {avgpool2(g, p)}; }
};

struct AddChanBiasNode : Node {
  std::vector<Var> backward(const Var& g) override { return {g, chan_sums(g)}; }
};

struct ChanSumsNode : Node {
  std::vector<Var> backward(const Var& g) override {
    const Tensor& x = parents[0]->val;
    Tensor zeros(x.shape());
    return {add_chan_bias(constant(std::move(zeros)), g)};
  }
};

struct Shift2dNode : Node {
  int dy = 0, dx = 0;
  std::vector<Var> backward(const Var& g) override { return {shift2d(g, -dy, -dx)}; }
};

struct FlipHNode : Node {
  std::vector<Var> backward(const Var& g) override { return {flip_h(g)}; }
};

template <class NodeT>
std::shared_ptr<NodeT> make_node(Tensor val, std::vector<Var> parents, const char* name) {
  auto n = std::make_shared<NodeT>();
  n->val = std::move(val);
  n->parents = std::move(parents);
  n->op_name = name;
  n->needs_grad = any_needs_grad(n->parents);
  return n;
}

template <class F>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(binary_shape(a, b));
  const std::size_t n = out.numel();
  const bool sa = a.numel() == 1, sb = b.numel() == 1;
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[sa ? 0 : i], pb[sb ? 0 : i]);
  return out;
}

}  // namespace

std::vector<Var> Node::backward(const Var&) { return {}; }

Var leaf(Tensor v, bool needs_grad, std::string label) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->needs_grad = needs_grad;
  n->label = std::move(label);
  return n;
}

Var constant(Tensor v, std::string label) { return leaf(std::move(v), false, std::move(label)); }

Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

Var add(const Var& a, const Var& b) {
  check_binary(a->val, b->val, "add");
  return make_node<AddNode>(elementwise_binary(a->val, b->val, [](double x, double y) { return x + y; }),
                            {a, b}, "add");
}

Var sub(const Var& a, const Var& b) {
  check_binary(a->val, b->val, "sub");
  return make_node<SubNode>(elementwise_binary(a->val, b->val, [](double x, double y) { return x - y; }),
                            {a, b}, "sub");
}

Var mul(const Var& a, const Var& b) {
  check_binary(a->val, b->val, "mul");
  return make_node<MulNode>(elementwise_binary(a->val, b->val, [](double x, double y) { return x * y; }),
                            {a, b}, "mul");
}

Var div(const Var& a, const Var& b) {
  check_binary(a->val, b->val, "div");
  return make_node<DivNode>(elementwise_binary(a->val, b->val, [](double x, double y) { return x / y; }),
                            {a, b}, "div");
}

Var scale(const Var& a, double c) {
  Tensor out = a->val;
  for (double& x : out.vec()) x *= c;
  auto n = make_node<ScaleNode>(std::move(out), {a}, "scale");
  n->c = c;
  return n;
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var matmul(const Var& a, const Var& b) {
  require(a->val.ndim() == 2 && b->val.ndim() == 2, "matmul: operands must be 2-D");
  require(a->val.dim(1) == b->val.dim(0),
          "matmul: inner dims differ " + Tensor::shape_str(a->val.shape()) + " vs " +
              Tensor::shape_str(b->val.shape()));
  const std::size_t m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
  Tensor out({m, n});
  const double* A = a->val.data();
  const double* B = b->val.data();
  double* C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return make_node<MatmulNode>(std::move(out), {a, b}, "matmul");
}

Var transpose(const Var& a) {
  require(a->val.ndim() == 2, "transpose: operand must be 2-D");
  const std::size_t m = a->val.dim(0), n = a->val.dim(1);
  Tensor out({n, m});
  const double* A = a->val.data();
  double* O = out.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) O[j * m + i] = A[i * n + j];
  return make_node<TransposeNode>(std::move(out), {a}, "transpose");
}

Var relu(const Var& a) {
  Tensor out = a->val;
  Tensor mask(a->val.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (out[i] > 0.0) {
      mask[i] = 1.0;
    } else {
      out[i] = 0.0;
    }
  }
  auto n = make_node<ReluNode>(std::move(out), {a}, "relu");
  n->mask = std::move(mask);
  return n;
}

Var tanh_op(const Var& a) {
  Tensor out = a->val;
  for (double& x : out.vec()) x = std::tanh(x);
  return make_node<TanhNode>(std::move(out), {a}, "tanh");
}

Var sqrt_op(const Var& a) {
  Tensor out = a->val;
  for (double& x : out.vec()) x = std::sqrt(x);
  return make_node<SqrtNode>(std::move(out), {a}, "sqrt");
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double x : a->val.vec()) s += x;
  return make_node<SumAllNode>(Tensor::scalar(s), {a}, "sum_all");
}

Var broadcast_to(const Var& a, std::vector<std::size_t> shape) {
  require(a->val.numel() == 1, "broadcast_to: source must be scalar");
  Tensor out(std::move(shape));
  std::fill(out.vec().begin(), out.vec().end(), a->val[0]);
  return make_node<BroadcastToNode>(std::move(out), {a}, "broadcast_to");
}

Var row_sums(const Var& a) {
  require(a->val.ndim() == 2, "row_sums: operand must be 2-D");
  const std::size_t m = a->val.dim(0), n = a->val.dim(1);
  Tensor out({m});
  const double* A = a->val.data();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += A[i * n + j];
    out[i] = s;
  }
  return make_node<RowSumsNode>(std::move(out), {a}, "row_sums");
}

Var col_sums(const Var& a) {
  require(a->val.ndim() == 2, "col_sums: operand must be 2-D");
  const std::size_t m = a->val.dim(0), n = a->val.dim(1);
  Tensor out({n});
  const double* A = a->val.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += A[i * n + j];
  return make_node<ColSumsNode>(std::move(out), {a}, "col_sums");
}

Var broadcast_cols(const Var& v, std::size_t n) {
  require(v->val.ndim() == 1, "broadcast_cols: source must be 1-D");
  const std::size_t m = v->val.dim(0);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = v->val[i];
  return make_node<BroadcastColsNode>(std::move(out), {v}, "broadcast_cols");
}

Var broadcast_rows(const Var& v, std::size_t m) {
  require(v->val.ndim() == 1, "broadcast_rows: source must be 1-D");
  const std::size_t n = v->val.dim(0);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = v->val[j];
  return make_node<BroadcastRowsNode>(std::move(out), {v}, "broadcast_rows");
}

Var reshape(const Var& a, std::vector<std::size_t> shape) {
  require(Tensor::numel_of(shape) == a->val.numel(),
          "reshape: element count mismatch for " + Tensor::shape_str(shape));
  Tensor out(std::move(shape), a->val.vec());
  return make_node<ReshapeNode>(std::move(out), {a}, "reshape");
}

Var softmax_rows(const Var& a) {
  require(a->val.ndim() == 2, "softmax_rows: operand must be 2-D");
  const std::size_t m = a->val.dim(0), n = a->val.dim(1);
  Tensor out({m, n});
  const double* A = a->val.data();
  double* O = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = A[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, A[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      O[i * n + j] = std::exp(A[i * n + j] - mx);
      z += O[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) O[i * n + j] /= z;
  }
  return make_node<SoftmaxRowsNode>(std::move(out), {a}, "softmax_rows");
}

Var softmax_xent(const Var& logits, const std::vector<int>& labels) {
  require(logits->val.ndim() == 2, "softmax_xent: logits must be 2-D");
  const std::size_t m = logits->val.dim(0), n = logits->val.dim(1);
  require(labels.size() == m, "softmax_xent: label count does not match batch size");
  for (int y : labels)
    require(y >= 0 && static_cast<std::size_t>(y) < n,
            "softmax_xent: label " + std::to_string(y) + " out of range for " +
                std::to_string(n) + " classes");
  const double* A = logits->val.data();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double mx = A[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, A[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(A[i * n + j] - mx);
    total += mx + std::log(z) - A[i * n + labels[i]];
  }
  auto node = make_node<SoftmaxXentNode>(Tensor::scalar(total / static_cast<double>(m)),
                                         {logits}, "softmax_xent");
  node->labels = labels;
  return node;
}

Var conv2d(const Var& x, const Var& w) {
  require(x->val.ndim() == 4 && w->val.ndim() == 4, "conv2d: operands must be 4-D");
  const std::size_t n = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), wd = x->val.dim(3);
  const std::size_t o = w->val.dim(0), k = w->val.dim(2);
  require(w->val.dim(1) == c, "conv2d: channel mismatch");
  require(w->val.dim(3) == k, "conv2d: kernel must be square");
  require(h >= k && wd >= k, "conv2d: kernel larger than input");
  const std::size_t oh = h - k + 1, ow = wd - k + 1;
  Tensor out({n, o, oh, ow});
  const double* X = x->val.data();
  const double* W = w->val.data();
  double* Y = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t ic = 0; ic < c; ++ic) {
        const double* xp = X + ((b * c + ic) * h) * wd;
        const double* wp = W + ((oc * c + ic) * k) * k;
        double* yp = Y + ((b * o + oc) * oh) * ow;
        for (std::size_t u = 0; u < k; ++u)
          for (std::size_t v = 0; v < k; ++v) {
            const double wv = wp[u * k + v];
            if (wv == 0.0) continue;
            for (std::size_t p = 0; p < oh; ++p) {
              const double* xrow = xp + (p + u) * wd + v;
              double* yrow = yp + p * ow;
              for (std::size_t q = 0; q < ow; ++q) yrow[q] += wv * xrow[q];
            }
          }
      }
  return make_node<Conv2dNode>(std::move(out), {x, w}, "conv2d");
}

Var conv2d_input_adj(const Var& g, const Var& w) {
  require(g->val.ndim() == 4 && w->val.ndim() == 4, "conv2d_input_adj: operands must be 4-D");
  const std::size_t n = g->val.dim(0), o = g->val.dim(1), oh = g->val.dim(2), ow = g->val.dim(3);
  const std::size_t c = w->val.dim(1), k = w->val.dim(2);
  require(w->val.dim(0) == o, "conv2d_input_adj: channel mismatch");
  const std::size_t h = oh + k - 1, wd = ow + k - 1;
  Tensor out({n, c, h, wd});
  const double* G = g->val.data();
  const double* W = w->val.data();
  double* X = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t ic = 0; ic < c; ++ic) {
        const double* gp = G + ((b * o + oc) * oh) * ow;
        const double* wp = W + ((oc * c + ic) * k) * k;
        double* xp = X + ((b * c + ic) * h) * wd;
        for (std::size_t u = 0; u < k; ++u)
          for (std::size_t v = 0; v < k; ++v) {
            const double wv = wp[u * k + v];
            if (wv == 0.0) continue;
            for (std::size_t p = 0; p < oh; ++p) {
              const double* grow = gp + p * ow;
              double* xrow = xp + (p + u) * wd + v;
              for (std::size_t q = 0; q < ow; ++q) xrow[q] += wv * grow[q];
            }
          }
      }
  return make_node<ConvInputAdjNode>(std::move(out), {g, w}, "conv2d_input_adj");
}

Var conv2d_weight_adj(const Var& g, const Var& x, std::size_t k) {
  require(g->val.ndim() == 4 && x->val.ndim() == 4, "conv2d_weight_adj: operands must be 4-D");
  const std::size_t n = g->val.dim(0), o = g->val.dim(1), oh = g->val.dim(2), ow = g->val.dim(3);
  const std::size_t c = x->val.dim(1), h = x->val.dim(2), wd = x->val.dim(3);
  require(x->val.dim(0) == n, "conv2d_weight_adj: batch mismatch");
  require(h == oh + k - 1 && wd == ow + k - 1, "conv2d_weight_adj: shape mismatch");
  Tensor out({o, c, k, k});
  const double* G = g->val.data();
  const double* X = x->val.data();
  double* W = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t ic = 0; ic < c; ++ic) {
        const double* gp = G + ((b * o + oc) * oh) * ow;
        const double* xp = X + ((b * c + ic) * h) * wd;
        double* wp = W + ((oc * c + ic) * k) * k;
        for (std::size_t u = 0; u < k; ++u)
          for (std::size_t v = 0; v < k; ++v) {
            double s = 0.0;
            for (std::size_t p = 0; p < oh; ++p) {
              const double* grow = gp + p * ow;
              const double* xrow = xp + (p + u) * wd + v;
              for (std::size_t q = 0; q < ow; ++q) s += grow[q] * xrow[q];
            }
            wp[u * k + v] += s;
          }
      }
  return make_node<ConvWeightAdjNode>(std::move(out), {g, x}, "conv2d_weight_adj");
}

Var avgpool2(const Var& x, std::size_t p) {
  require(x->val.ndim() == 4, "avgpool2: operand must be 4-D");
  require(p >= 1, "avgpool2: window must be >= 1");
  const std::size_t n = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), wd = x->val.dim(3);
  const std::size_t oh = h / p, ow = wd / p;  // floor: trailing remainder dropped
  require(oh >= 1 && ow >= 1, "avgpool2: window larger than input");
  Tensor out({n, c, oh, ow});
  const double inv = 1.0 / static_cast<double>(p * p);
  const double* X = x->val.data();
  double* Y = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* xp = X + ((b * c + ch) * h) * wd;
      double* yp = Y + ((b * c + ch) * oh) * ow;
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double s = 0.0;
          for (std::size_t u = 0; u < p; ++u)
            for (std::size_t v = 0; v < p; ++v) s += xp[(i * p + u) * wd + j * p + v];
          yp[i * ow + j] = s * inv;
        }
    }
  auto node = make_node<AvgPoolNode>(std::move(out), {x}, "avgpool2");
  node->p = p;
  return node;
}

Var avgpool2_adj(const Var& g, std::size_t p, std::size_t h, std::size_t w) {
  require(g->val.ndim() == 4, "avgpool2_adj: operand must be 4-D");
  const std::size_t n = g->val.dim(0), c = g->val.dim(1), oh = g->val.dim(2), ow = g->val.dim(3);
  require(oh == h / p && ow == w / p, "avgpool2_adj: shape mismatch");
  Tensor out({n, c, h, w});
  const double inv = 1.0 / static_cast<double>(p * p);
  const double* G = g->val.data();
  double* X = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* gp = G + ((b * c + ch) * oh) * ow;
      double* xp = X + ((b * c + ch) * h) * w;
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const double v0 = gp[i * ow + j] * inv;
          for (std::size_t u = 0; u < p; ++u)
            for (std::size_t v = 0; v < p; ++v) xp[(i * p + u) * w + j * p + v] = v0;
        }
    }
  auto node = make_node<AvgPoolAdjNode>(std::move(out), {g}, "avgpool2_adj");
  node->p = p;
  return node;
}

Var add_chan_bias(const Var& x, const Var& b) {
  require(x->val.ndim() == 4 && b->val.ndim() == 1, "add_chan_bias: expects 4-D input, 1-D bias");
  const std::size_t n = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), w = x->val.dim(3);
  require(b->val.dim(0) == c, "add_chan_bias: channel mismatch");
  Tensor out = x->val;
  double* O = out.data();
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double bv = b->val[ch];
      double* p = O + ((bi * c + ch) * h) * w;
      for (std::size_t i = 0; i < h * w; ++i) p[i] += bv;
    }
  return make_node<AddChanBiasNode>(std::move(out), {x, b}, "add_chan_bias");
}

Var chan_sums(const Var& x) {
  require(x->val.ndim() == 4, "chan_sums: operand must be 4-D");
  const std::size_t n = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), w = x->val.dim(3);
  Tensor out({c});
  const double* X = x->val.data();
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      const double* p = X + ((bi * c + ch) * h) * w;
      for (std::size_t i = 0; i < h * w; ++i) s += p[i];
      out[ch] += s;
    }
  return make_node<ChanSumsNode>(std::move(out), {x}, "chan_sums");
}

Var shift2d(const Var& x, int dy, int dx) {
  require(x->val.ndim() == 4, "shift2d: operand must be 4-D");
  const std::size_t n = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), w = x->val.dim(3);
  Tensor out(x->val.shape());
  const double* X = x->val.data();
  double* O = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* xp = X + ((b * c + ch) * h) * w;
      double* op = O + ((b * c + ch) * h) * w;
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const long si = static_cast<long>(i) - dy;
          const long sj = static_cast<long>(j) - dx;
          if (si >= 0 && si < static_cast<long>(h) && sj >= 0 && sj < static_cast<long>(w))
            op[i * w + j] = xp[si * w + sj];
        }
    }
  auto node = make_node<Shift2dNode>(std::move(out), {x}, "shift2d");
  node->dy = dy;
  node->dx = dx;
  return node;
}

Var flip_h(const Var& x) {
  require(x->val.ndim() == 4, "flip_h: operand must be 4-D");
  const std::size_t n = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), w = x->val.dim(3);
  Tensor out(x->val.shape());
  const double* X = x->val.data();
  double* O = out.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h; ++i) {
        const double* xrow = X + (((b * c + ch) * h) + i) * w;
        double* orow = O + (((b * c + ch) * h) + i) * w;
        for (std::size_t j = 0; j < w; ++j) orow[j] = xrow[w - 1 - j];
      }
  return make_node<FlipHNode>(std::move(out), {x}, "flip_h");
}

namespace {

// Post-order over the needs_grad subgraph; deterministic (parent index order).
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p && p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // leaves first, root last
}

}  // namespace

std::vector<Var> gradients(const Var& root, const std::vector<Var>& wrt, Var seed) {
  if (!seed) {
    if (root->val.numel() != 1)
      throw ConfigError("gradients: root must be scalar unless a seed gradient is given");
    seed = constant(Tensor::scalar(1.0));
  } else if (!seed->val.same_shape(root->val)) {
    throw ConfigError("gradients: seed shape does not match root");
  }

  std::unordered_map<Node*, Var> grad;
  if (root->needs_grad || !wrt.empty()) grad[root.get()] = seed;

  if (root->needs_grad) {
    std::vector<Node*> order = topo_order(root.get());
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      auto git = grad.find(node);
      if (git == grad.end()) continue;
      if (node->parents.empty()) continue;
      std::vector<Var> contribs = node->backward(git->second);
      for (std::size_t i = 0; i < node->parents.size(); ++i) {
        const Var& p = node->parents[i];
        if (!p || !p->needs_grad || i >= contribs.size() || !contribs[i]) continue;
        auto pit = grad.find(p.get());
        if (pit == grad.end()) {
          grad[p.get()] = contribs[i];
        } else {
          pit->second = add(pit->second, contribs[i]);
        }
      }
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    auto it = grad.find(w.get());
    if (it != grad.end() && w.get() != root.get()) {
      out.push_back(it->second);
    } else if (w.get() == root.get()) {
      out.push_back(seed);
    } else {
      out.push_back(constant(Tensor(w->val.shape())));
    }
  }
  return out;
}

bool all_finite(const Tensor& t) {
  for (double x : t.vec())
    if (!std::isfinite(x)) return false;
  return true;
}

std::string first_nonfinite(const Var& root) {
  // Forward topological order over the full graph, constants included.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (!all_finite(n->val)) {
      std::string desc = n->op_name;
      if (!n->label.empty()) desc += " (" + n->label + ")";
      return desc;
    }
  }
  return {};
}

}  // namespace ddm
