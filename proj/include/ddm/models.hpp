#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddm/autodiff.hpp"
#include "ddm/tensor.hpp"

namespace ddm {

enum class Activation { relu, tanh };
enum class InitScheme { kaiming, normal, xavier };
enum class LossKind { cross_entropy, squared_error };

struct ModelSpec {
  enum class Arch { mlp, convnet };
  Arch arch = Arch::mlp;

  std::size_t in_c = 1, in_h = 1, in_w = 1;
  // num_classes == 1 is the regression micro-mode and is only valid together
  // with squared-error loss; classification paths require >= 2.
  std::size_t num_classes = 2;

  std::vector<std::size_t> hidden;          // mlp hidden widths
  std::vector<std::size_t> conv_channels;   // convnet channels per conv layer
  std::size_t kernel = 3;
  std::size_t pool = 2;

  Activation activation = Activation::relu;
  InitScheme init = InitScheme::kaiming;
  std::uint64_t seed = 0;

  std::size_t in_dim() const { return in_c * in_h * in_w; }
  void validate() const;
  std::uint64_t hash() const;  // fingerprint embedded in checkpoints
};

struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
  std::vector<std::size_t> shape;
};

// Flat parameter storage with a named-segment table; segment order is the
// model's layer order and is the unit of layerwise gradient matching.
struct ParamVector {
  std::vector<double> data;
  std::vector<ParamSegment> segments;

  std::size_t size() const { return data.size(); }
  Tensor segment_tensor(std::size_t i) const;
  void set_segment(std::size_t i, const Tensor& t);
};

double l2_distance(const ParamVector& a, const ParamVector& b);

struct LabeledBatch {
  Tensor inputs;            // [n, d] or [n, c, h, w]
  std::vector<int> labels;
};

ParamVector init_params(const ModelSpec& spec);

// Parameter leaves aligned with the segment table.
std::vector<Var> param_leaves(const ModelSpec& spec, const ParamVector& params, bool needs_grad);
// Normalizes the batch to the model's input shape; throws on a size mismatch
// naming both shapes.
Var input_leaf(const ModelSpec& spec, const Tensor& inputs, bool needs_grad);

struct ForwardOut {
  Var logits;       // [n, num_classes]
  Var penultimate;  // features before the classifier head
};

ForwardOut forward_graph(const ModelSpec& spec, const std::vector<Var>& params, const Var& input);

Var loss_graph(const ModelSpec& spec, const ForwardOut& fwd, const std::vector<int>& labels,
               LossKind loss);

Tensor predict(const ModelSpec& spec, const ParamVector& params, const Tensor& inputs);
double loss_value(const ModelSpec& spec, const ParamVector& params, const LabeledBatch& batch,
                  LossKind loss);
// Fraction of argmax predictions equal to the labels, in [0, 1].
double accuracy(const ModelSpec& spec, const ParamVector& params, const LabeledBatch& batch);

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                     const ParamVector& params);
ParamVector load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec);

}  // namespace ddm
