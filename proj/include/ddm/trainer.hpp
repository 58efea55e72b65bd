#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <thread>
#include <vector>

#include "ddm/clustering.hpp"
#include "ddm/dataset.hpp"
#include "ddm/model_grad.hpp"
#include "ddm/models.hpp"

namespace ddm {

struct TrainConfig {
  double lr = 0.01;
  int epochs = 30;
  int batch_size = 64;
  int checkpoint_stride = 1;
  bool shuffle = true;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::cross_entropy;
};

// Parameter snapshots along one training run: epoch 0 (pre-update), every
// stride-th epoch, and the final epoch.
struct Trajectory {
  std::vector<int> epochs;
  std::vector<ParamVector> params;
  TrainConfig config;
  std::uint64_t model_hash = 0;

  bool has_epoch(int t) const;
  const ParamVector& at_epoch(int t) const;
  const ParamVector& final_params() const;
  int final_epoch() const { return epochs.empty() ? 0 : epochs.back(); }
};

// Raised when a batch loss or gradient goes non-finite; carries the most
// recent finite checkpoint so callers can report or resume.
struct TrainingDiverged : NumericError {
  int failed_epoch;
  int last_checkpoint_epoch;
  ParamVector last_checkpoint;
  TrainingDiverged(const std::string& msg, int failed, int last, ParamVector params)
      : NumericError(msg), failed_epoch(failed), last_checkpoint_epoch(last),
        last_checkpoint(std::move(params)) {}
};

// Plain SGD over shuffled mini-batches. The epoch permutation is drawn from
// (seed, epoch) over the FULL index range and exclusions are filtered out
// afterwards, so runs that exclude data consume the identical random stream
// and stay comparable step for step.
Trajectory train(const ModelSpec& spec, const LabeledDataset& data, const TrainConfig& cfg,
                 const std::vector<std::size_t>& excluded_samples = {});

// Full-batch SGD for `epochs` steps from `start`.
ParamVector finetune(const ModelSpec& spec, ParamVector start, const LabeledBatch& batch,
                     int epochs, double lr, LossKind loss = LossKind::cross_entropy);

// Exact-retraining oracle: same seed and stream as train(), minus the given
// clusters' samples. Excluding everything is an error.
ParamVector retrain_without(const ModelSpec& spec, const LabeledDataset& data,
                            const ClusterHierarchy& hierarchy,
                            const std::vector<std::size_t>& excluded_clusters,
                            const TrainConfig& cfg);

void save_trajectory(const std::filesystem::path& dir, const ModelSpec& spec, const Trajectory& t);
Trajectory load_trajectory(const std::filesystem::path& dir, const ModelSpec& spec);

// Runs fn(0..n-1) on `workers` threads; results land wherever fn writes them
// (callers preallocate slots by index), so output order is deterministic.
// The first exception, if any, is rethrown after all threads join.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace ddm
