#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ddm/models.hpp"
#include "ddm/tensor.hpp"

namespace ddm {

// Labeled sample store. Image values live in [0, 1]; distilled pixels are
// clamped to the same range, so every generator below normalizes into it.
struct LabeledDataset {
  Tensor images;  // [N, d] or [N, c, h, w]
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_dim() const { return size() ? images.numel() / size() : 0; }
  void validate() const;
  LabeledBatch gather(const std::vector<std::size_t>& indices) const;
  LabeledBatch full() const;
};

// IDX pair (big-endian header, u8 pixels scaled to [0,1]). Distinct errors
// for magic mismatch, truncation, and image/label count mismatch.
LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path);

// Rows of "label,pixel0,pixel1,...", optional header line. Integer pixel
// values above 1 are treated as a 0-255 scale and normalized.
LabeledDataset load_csv(const std::filesystem::path& path);
void save_csv(const std::filesystem::path& path, const LabeledDataset& data);

// Gaussian blobs: class means are `separation`-scaled random unit vectors,
// unit noise, then the whole set is affinely mapped into [0,1]^dim (the map
// preserves relative separation and linear separability).
LabeledDataset make_blobs(int classes, int per_class, std::size_t dim, double separation,
                          std::uint64_t seed);

// Deterministic 28x28 digit glyphs with per-sample shift, intensity jitter
// and pixel noise. Stands in for a handwritten-digit subset when no external
// image files are available.
LabeledDataset make_digits(int per_class, std::uint64_t seed);

// Flattened raw pixels [N, d].
Tensor embed_raw(const LabeledDataset& data);
// Penultimate-layer activations of a trained model [N, width].
Tensor embed_features(const ModelSpec& spec, const ParamVector& params, const LabeledDataset& data);

}  // namespace ddm
