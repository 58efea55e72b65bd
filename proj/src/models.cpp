#include "ddm/models.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "ddm/common.hpp"
#include "ddm/rng.hpp"

namespace ddm {

namespace {

struct SegPlan {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t fan_in = 0, fan_out = 0;
  bool is_bias = false;
};

// Spatial dims after each conv+pool stage; throws when a stage underflows.
void conv_dims(const ModelSpec& s, std::vector<std::size_t>& hs, std::vector<std::size_t>& ws) {
  std::size_t h = s.in_h, w = s.in_w;
  for (std::size_t i = 0; i < s.conv_channels.size(); ++i) {
    if (h < s.kernel || w < s.kernel)
      throw ConfigError("convnet: input to conv layer " + std::to_string(i) +
                        " is smaller than the kernel");
    h = h - s.kernel + 1;
    w = w - s.kernel + 1;
    h /= s.pool;
    w /= s.pool;
    if (h < 1 || w < 1)
      throw ConfigError("convnet: pooling collapses layer " + std::to_string(i) + " to zero size");
    hs.push_back(h);
    ws.push_back(w);
  }
}

std::vector<SegPlan> segment_plan(const ModelSpec& s) {
  std::vector<SegPlan> plan;
  if (s.arch == ModelSpec::Arch::mlp) {
    std::size_t prev = s.in_dim();
    for (std::size_t i = 0; i < s.hidden.size(); ++i) {
      const std::size_t w = s.hidden[i];
      plan.push_back({"fc" + std::to_string(i) + ".weight", {prev, w}, prev, w, false});
      plan.push_back({"fc" + std::to_string(i) + ".bias", {w}, prev, w, true});
      prev = w;
    }
    plan.push_back({"head.weight", {prev, s.num_classes}, prev, s.num_classes, false});
    plan.push_back({"head.bias", {s.num_classes}, prev, s.num_classes, true});
  } else {
    std::vector<std::size_t> hs, ws;
    conv_dims(s, hs, ws);
    std::size_t prev_c = s.in_c;
    for (std::size_t i = 0; i < s.conv_channels.size(); ++i) {
      const std::size_t oc = s.conv_channels[i];
      const std::size_t fin = prev_c * s.kernel * s.kernel;
      const std::size_t fout = oc * s.kernel * s.kernel;
      plan.push_back({"conv" + std::to_string(i) + ".weight",
                      {oc, prev_c, s.kernel, s.kernel}, fin, fout, false});
      plan.push_back({"conv" + std::to_string(i) + ".bias", {oc}, fin, fout, true});
      prev_c = oc;
    }
    const std::size_t feat = prev_c * hs.back() * ws.back();
    plan.push_back({"head.weight", {feat, s.num_classes}, feat, s.num_classes, false});
    plan.push_back({"head.bias", {s.num_classes}, feat, s.num_classes, true});
  }
  return plan;
}

Var activate(const ModelSpec& s, const Var& z) {
  return s.activation == Activation::relu ? relu(z) : tanh_op(z);
}

}  // namespace

void ModelSpec::validate() const {
  if (in_c < 1 || in_h < 1 || in_w < 1) throw ConfigError("model: input dims must be >= 1");
  if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
  if (arch == Arch::mlp) {
    for (std::size_t w : hidden)
      if (w == 0) throw ConfigError("model: zero-width hidden layer");
  } else {
    if (conv_channels.empty()) throw ConfigError("model: convnet needs at least one conv layer");
    for (std::size_t c : conv_channels)
      if (c == 0) throw ConfigError("model: zero-channel conv layer");
    if (kernel < 1 || pool < 1) throw ConfigError("model: kernel and pool must be >= 1");
    std::vector<std::size_t> hs, ws;
    conv_dims(*this, hs, ws);
  }
}

std::uint64_t ModelSpec::hash() const {
  std::ostringstream os;
  os << (arch == Arch::mlp ? "mlp" : "convnet") << '|' << in_c << ',' << in_h << ',' << in_w
     << '|' << num_classes << "|h=";
  for (std::size_t w : hidden) os << w << ',';
  os << "|c=";
  for (std::size_t c : conv_channels) os << c << ',';
  os << '|' << kernel << '|' << pool << '|'
     << (activation == Activation::relu ? "relu" : "tanh") << '|'
     << (init == InitScheme::kaiming ? "kaiming" : init == InitScheme::xavier ? "xavier" : "normal")
     << '|' << seed;
  return fnv1a(os.str());
}

Tensor ParamVector::segment_tensor(std::size_t i) const {
  const ParamSegment& s = segments.at(i);
  std::vector<double> v(data.begin() + s.offset, data.begin() + s.offset + s.length);
  return Tensor(s.shape, std::move(v));
}

void ParamVector::set_segment(std::size_t i, const Tensor& t) {
  const ParamSegment& s = segments.at(i);
  if (t.numel() != s.length) throw ConfigError("set_segment: size mismatch");
  std::copy(t.vec().begin(), t.vec().end(), data.begin() + s.offset);
}

double l2_distance(const ParamVector& a, const ParamVector& b) {
  if (a.size() != b.size()) throw ConfigError("l2_distance: parameter sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return std::sqrt(s);
}

ParamVector init_params(const ModelSpec& spec) {
  spec.validate();
  ParamVector pv;
  std::size_t offset = 0;
  for (const SegPlan& sp : segment_plan(spec)) {
    ParamSegment seg{sp.name, offset, Tensor::numel_of(sp.shape), sp.shape};
    offset += seg.length;
    pv.segments.push_back(std::move(seg));
  }
  pv.data.assign(offset, 0.0);

  Rng rng = substream(spec.seed, "init");
  std::size_t i = 0;
  for (const SegPlan& sp : segment_plan(spec)) {
    const ParamSegment& seg = pv.segments[i++];
    if (sp.is_bias) continue;  // biases start at zero
    double sigma;
    switch (spec.init) {
      case InitScheme::kaiming:
        sigma = std::sqrt(2.0 / static_cast<double>(sp.fan_in));
        break;
      case InitScheme::xavier:
        sigma = std::sqrt(2.0 / static_cast<double>(sp.fan_in + sp.fan_out));
        break;
      default:
        sigma = 0.02;
        break;
    }
    for (std::size_t j = 0; j < seg.length; ++j) pv.data[seg.offset + j] = sigma * rng.normal();
  }
  return pv;
}

std::vector<Var> param_leaves(const ModelSpec& spec, const ParamVector& params, bool needs_grad) {
  std::vector<Var> out;
  out.reserve(params.segments.size());
  for (std::size_t i = 0; i < params.segments.size(); ++i)
    out.push_back(leaf(params.segment_tensor(i), needs_grad, params.segments[i].name));
  (void)spec;
  return out;
}

Var input_leaf(const ModelSpec& spec, const Tensor& inputs, bool needs_grad) {
  if (inputs.ndim() < 1) throw ConfigError("input batch must have a leading sample dim");
  const std::size_t n = inputs.dim(0);
  const std::size_t per = n == 0 ? 0 : inputs.numel() / n;
  if (n == 0 || per != spec.in_dim())
    throw ConfigError("input shape " + Tensor::shape_str(inputs.shape()) +
                      " does not match model input [n, " + std::to_string(spec.in_c) + ", " +
                      std::to_string(spec.in_h) + ", " + std::to_string(spec.in_w) + "]");
  return leaf(inputs, needs_grad, "input");
}

ForwardOut forward_graph(const ModelSpec& spec, const std::vector<Var>& params, const Var& input) {
  const std::size_t n = input->val.dim(0);
  ForwardOut out;
  if (spec.arch == ModelSpec::Arch::mlp) {
    Var x = reshape(input, {n, spec.in_dim()});
    Var feats = x;
    std::size_t p = 0;
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      Var z = add(matmul(x, params[p]), broadcast_rows(params[p + 1], n));
      z->label = "fc" + std::to_string(i);
      x = activate(spec, z);
      feats = x;
      p += 2;
    }
    Var logits = add(matmul(x, params[p]), broadcast_rows(params[p + 1], n));
    logits->label = "head";
    out.logits = logits;
    out.penultimate = feats;
  } else {
    Var x = reshape(input, {n, spec.in_c, spec.in_h, spec.in_w});
    std::size_t p = 0;
    for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
      Var z = add_chan_bias(conv2d(x, params[p]), params[p + 1]);
      z->label = "conv" + std::to_string(i);
      x = avgpool2(activate(spec, z), spec.pool);
      p += 2;
    }
    const std::size_t feat = x->val.numel() / n;
    Var flat = reshape(x, {n, feat});
    Var logits = add(matmul(flat, params[p]), broadcast_rows(params[p + 1], n));
    logits->label = "head";
    out.logits = logits;
    out.penultimate = flat;
  }
  return out;
}

Var loss_graph(const ModelSpec& spec, const ForwardOut& fwd, const std::vector<int>& labels,
               LossKind loss) {
  const std::size_t n = fwd.logits->val.dim(0);
  const std::size_t L = fwd.logits->val.dim(1);
  if (labels.size() != n) throw ConfigError("loss: label count does not match batch");
  if (loss == LossKind::cross_entropy) {
    if (spec.num_classes < 2)
      throw ConfigError("cross-entropy needs num_classes >= 2; use squared_error for the "
                        "single-output regression mode");
    return softmax_xent(fwd.logits, labels);
  }
  // Squared error: per-sample squared residual against the one-hot target
  // (or the raw label value when there is a single output), averaged over
  // the batch.
  Tensor target({n, L});
  for (std::size_t i = 0; i < n; ++i) {
    if (L == 1) {
      target[i] = static_cast<double>(labels[i]);
    } else {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= L)
        throw ConfigError("loss: label " + std::to_string(labels[i]) + " out of range");
      target[i * L + labels[i]] = 1.0;
    }
  }
  Var d = sub(fwd.logits, constant(std::move(target)));
  return scale(sum_all(mul(d, d)), 1.0 / static_cast<double>(n));
}

Tensor predict(const ModelSpec& spec, const ParamVector& params, const Tensor& inputs) {
  std::vector<Var> leaves = param_leaves(spec, params, false);
  Var in = input_leaf(spec, inputs, false);
  ForwardOut fwd = forward_graph(spec, leaves, in);
  return softmax_rows(fwd.logits)->val;
}

double loss_value(const ModelSpec& spec, const ParamVector& params, const LabeledBatch& batch,
                  LossKind loss) {
  std::vector<Var> leaves = param_leaves(spec, params, false);
  Var in = input_leaf(spec, batch.inputs, false);
  ForwardOut fwd = forward_graph(spec, leaves, in);
  return loss_graph(spec, fwd, batch.labels, loss)->val[0];
}

double accuracy(const ModelSpec& spec, const ParamVector& params, const LabeledBatch& batch) {
  Tensor probs = predict(spec, params, batch.inputs);
  const std::size_t n = probs.dim(0), L = probs.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < L; ++j)
      if (probs[i * L + j] > probs[i * L + best]) best = j;
    if (static_cast<int>(best) == batch.labels[i]) ++hits;
  }
  return n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(n);
}

namespace {
constexpr char kCkptMagic[8] = {'D', 'D', 'M', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                     const ParamVector& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open checkpoint for writing: " + path.string());
  os.write(kCkptMagic, 8);
  write_u64(os, spec.hash());
  write_u32(os, static_cast<std::uint32_t>(params.segments.size()));
  for (const ParamSegment& s : params.segments) {
    write_string(os, s.name);
    write_u32(os, static_cast<std::uint32_t>(s.shape.size()));
    for (std::size_t d : s.shape) write_u64(os, d);
  }
  write_u64(os, params.data.size());
  for (double d : params.data) write_f64(os, d);
  if (!os) throw ParseError("short write on checkpoint: " + path.string());
}

ParamVector load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("checkpoint not found: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw ParseError("not a checkpoint file: " + path.string());
  const std::uint64_t h = read_u64(is);
  if (h != spec.hash())
    throw ParseError("checkpoint " + path.string() + " was written for a different model spec");
  ParamVector pv = init_params(spec);  // segment table template
  const std::uint32_t nsegs = read_u32(is);
  if (nsegs != pv.segments.size()) throw ParseError("checkpoint segment table mismatch");
  for (std::uint32_t i = 0; i < nsegs; ++i) {
    const std::string name = read_string(is);
    if (name != pv.segments[i].name) throw ParseError("checkpoint segment name mismatch: " + name);
    const std::uint32_t nd = read_u32(is);
    std::vector<std::size_t> shape(nd);
    for (std::uint32_t d = 0; d < nd; ++d) shape[d] = read_u64(is);
    if (shape != pv.segments[i].shape) throw ParseError("checkpoint segment shape mismatch: " + name);
  }
  const std::uint64_t len = read_u64(is);
  if (len != pv.data.size()) throw ParseError("checkpoint data length mismatch");
  for (std::uint64_t i = 0; i < len; ++i) pv.data[i] = read_f64(is);
  return pv;
}

}  // namespace ddm
