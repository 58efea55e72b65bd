#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ddm/clustering.hpp"
#include "ddm/distance.hpp"
#include "ddm/trainer.hpp"

namespace ddm {

// One part of a data partition to be distilled: a class (level one) or a
// per-class cluster (level two).
struct DataPart {
  std::size_t id = 0;
  int class_label = 0;
  std::vector<std::size_t> members;
};

std::vector<DataPart> class_parts(const ClusterHierarchy& h);
std::vector<DataPart> cluster_parts(const ClusterHierarchy& h);

struct SynsetEntry {
  std::size_t part_id = 0;
  int class_label = 0;
  Tensor pixels;            // [ipc, sample dims...], values in [0,1]
  std::vector<int> labels;  // the source part's class, repeated
};

// Synthetic set distilled from one partition: a few images per part whose
// gradients stand in for the part's accumulated real gradients.
struct Synset {
  std::vector<SynsetEntry> entries;
  int images_per_cluster = 1;
  std::vector<std::size_t> sample_shape;
  std::uint64_t trajectory_hash = 0;
  std::uint64_t config_hash = 0;
  std::size_t degenerate_reports = 0;  // cosine segments clamped during distillation

  const SynsetEntry& by_part(std::size_t part_id) const;
};

struct DistillConfig {
  double lr_img = 0.1;
  int steps = 50;
  // Offset s between the real-gradient epoch t and the synthetic evaluation
  // epoch t+s; reversed matching reads the trajectory pairs (t, t+s).
  int step_offset = 4;
  DistanceKind dist = DistanceKind::layerwise_cosine;
  enum class Mode { reverse, forward };
  Mode mode = Mode::reverse;
  bool augment = false;
  bool hflip = false;  // only with augment; keep off for digit-like data
  int images_per_cluster = 1;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::cross_entropy;
};

// Pixels start as uniformly sampled distinct members of each part.
Synset init_synset(const LabeledDataset& data, const std::vector<DataPart>& parts,
                   const DistillConfig& cfg);

// Per step: draw a valid start epoch t, take each part's full real gradient
// at theta_t, and step the part's pixels down the gradient of
//   Dist(grad L(theta_eval, S), -grad L(theta_t, D_part)),
// where theta_eval is theta_{t+s} in reverse mode and theta_t in forward
// mode (forward matches +grad instead). Pixels clamp to [0,1] after each
// step. Pass `resume` to continue from an existing synset.
Synset distill(const ModelSpec& spec, const Trajectory& traj, const LabeledDataset& data,
               const std::vector<DataPart>& parts, const DistillConfig& cfg,
               const Synset* resume = nullptr);

// Mean matching distance over ALL valid (t, t+s) pairs and all parts;
// deterministic (no augmentation, no sampling).
double matching_loss(const ModelSpec& spec, const Trajectory& traj, const LabeledDataset& data,
                     const std::vector<DataPart>& parts, const Synset& syn,
                     const DistillConfig& cfg);

void save_synset(const std::filesystem::path& path, const Synset& syn);
Synset load_synset(const std::filesystem::path& path);

// PGM (1-channel) or PPM (3-channel) per synthetic image, named
// class<label>_cluster<id>.pgm (suffix _s<i> when ipc > 1).
void export_synset_images(const Synset& syn, const std::filesystem::path& dir);

// Stacks the chosen entries' pixels into one batch.
LabeledBatch synset_batch(const Synset& syn, const std::vector<std::size_t>& part_ids);

}  // namespace ddm
