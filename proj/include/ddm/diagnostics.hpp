#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddm/attribution.hpp"
#include "ddm/clustering.hpp"
#include "ddm/dataset.hpp"
#include "ddm/distill.hpp"
#include "ddm/models.hpp"
#include "ddm/trainer.hpp"

namespace ddm {

// Per-cluster data-quality estimate from one stacked datamodel fit: the K
// single-deletion fine-tunes plus the free all-ones prediction, with every
// validation sample's output concatenated into one record. score[k] is the
// predicted change in summed validation cross-entropy when cluster k is
// deleted; negative means deleting helps, so `order` lists clusters most
// negative (worst data) first.
struct QualityRanking {
  std::vector<double> scores;      // indexed by cluster id
  std::vector<std::size_t> order;  // cluster ids, worst first
  double baseline_loss = 0.0;      // mean validation cross-entropy, final params
};

QualityRanking rank_quality(const ModelSpec& spec, const ParamVector& final_params,
                            const Synset& cluster_synset, const ClusterHierarchy& hierarchy,
                            const LabeledDataset& validation, const FinetuneSettings& ft);

void save_quality_csv(const std::filesystem::path& path, const QualityRanking& ranking,
                      const ClusterHierarchy& hierarchy, const std::string& header_comment);

struct SweepRow {
  double percent = 0.0;
  std::size_t removed = 0;
  double acc_ranked = 0.0;  // percent accuracy after retraining without worst-n
  double acc_random = 0.0;  // same for a seeded random pick of n
};

struct SweepResult {
  double baseline_acc = 0.0;  // percent, nothing removed
  std::vector<SweepRow> rows;
};

// Retrains without the worst-p% clusters (per `worst_first`) versus the same
// count picked at random, reporting test accuracy. 0 re-runs the unmodified
// training, so its row must reproduce the baseline exactly; a percentage
// that would remove every cluster is rejected.
SweepResult deletion_sweep(const ModelSpec& spec, const LabeledDataset& train_data,
                           const ClusterHierarchy& hierarchy, const TrainConfig& cfg,
                           const std::vector<std::size_t>& worst_first,
                           const std::vector<double>& percentages, std::uint64_t seed,
                           const LabeledDataset& test_data, int workers = 1);

void save_sweep_csv(const std::filesystem::path& path, const SweepResult& sweep,
                    const std::string& header_comment);
std::string sweep_table(const SweepResult& sweep);

// Bounded pixel corruption with an exact audit trail. In each selected
// sample the dimension with the most head-room moves by exactly
// min(norm, room) toward the far end of [0,1]; every other dimension moves
// uniformly in [-norm, norm] and is clamped. original = corrupted - delta
// holds bitwise, and max_abs_delta = min(norm, largest room).
struct NoiseReport {
  LabeledDataset corrupted;
  std::vector<std::size_t> indices;  // corrupted sample indices, ascending
  Tensor deltas;                     // [indices.size(), sample dims...]
  double max_abs_delta = 0.0;
};

NoiseReport inject_noise(const LabeledDataset& data, double fraction, double norm,
                         std::uint64_t seed);

// Sum over checkpointed epochs t whose mirror tau-t is also checkpointed of
// |grad L(theta_{tau-t}, S_k) + grad L(theta_t, D_k)|_2. Zero exactly when
// the synthetic gradients reverse the real ones at every matched pair.
double epsilon_residual(const ModelSpec& spec, const Trajectory& traj, const SynsetEntry& entry,
                        const LabeledBatch& real_members, LossKind loss);

// Fraction of samples where both parameter vectors pick the same class.
double agreement_rate(const ModelSpec& spec, const ParamVector& a, const ParamVector& b,
                      const LabeledBatch& data);

// How faithful the fine-tuned unlearning of one cluster is to the
// exact-retraining oracle, plus the gradient-reversal residual of its synset.
struct FidelityReport {
  std::size_t cluster_id = 0;
  double param_l2 = 0.0;   // fine-tuned vs oracle parameter distance
  double agreement = 0.0;  // held-out argmax agreement, in [0,1]
  double epsilon = 0.0;    // gradient-reversal residual
};

FidelityReport unlearn_fidelity(const ModelSpec& spec, const Trajectory& traj, const Synset& syn,
                                std::size_t cluster_id, const LabeledDataset& train_data,
                                const ClusterHierarchy& hierarchy, const ParamVector& finetuned,
                                const ParamVector& oracle, const LabeledBatch& heldout,
                                LossKind loss);

}  // namespace ddm
