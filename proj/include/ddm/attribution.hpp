#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ddm/clustering.hpp"
#include "ddm/distill.hpp"
#include "ddm/models.hpp"

namespace ddm {

// Deletion pattern over a partition: bit k is 1 to keep part k, 0 to delete
// it. The all-zeros mask (delete everything) is never valid.
struct PerturbationMask {
  std::vector<std::uint8_t> bits;
  std::size_t zeros() const;
  bool all_ones() const { return zeros() == 0; }
};

// All K single-deletion masks first (ascending part), then count-K random
// masks with 1-3 zeros (never all of them). When the set can determine the
// K+1 fit coefficients, its design matrix is verified to have full rank.
std::vector<PerturbationMask> sample_masks(std::size_t k, std::size_t count, std::uint64_t seed);

// Down-weights multi-deletion masks: 1 for single deletions and all-ones,
// 1/zeros otherwise.
double default_beta(const PerturbationMask& m);

struct MaskRecord {
  PerturbationMask mask;
  std::vector<double> prediction;  // model output probabilities on the query
};

enum class FitObjective { l2, cross_entropy, kl };
enum class ScoreKind { dist1_l2, dist2_ce, dist3_inverse, kl };

// Linear datamodel: prediction ~ W d + b with d the deletion indicator
// (1 - mask). Row k of W is the predicted effect of deleting part k alone.
// The L2 fit keeps the affine output; the cross-entropy/KL fits compose a
// softmax so the objective stays smooth, flagged by softmax_output.
struct AttributionModel {
  Tensor weights;  // [K, L]
  std::vector<double> bias;
  double fit_residual = 0.0;
  FitObjective objective = FitObjective::l2;
  bool softmax_output = false;
};

// Weighted fit of the records. L2 solves the weighted least squares by
// Householder QR; the other objectives run deterministic gradient descent.
// Requires at least K+1 records and a full-rank design.
AttributionModel fit_attribution(const std::vector<MaskRecord>& records,
                                 const std::vector<double>& beta,
                                 FitObjective obj = FitObjective::l2);

struct Reference {
  std::vector<double> probs;  // target-model prediction (dist1, dist3, kl)
  int label = -1;             // ground-truth class (dist2)
};

// Predicted output after deleting part k alone.
std::vector<double> predicted_deletion(const AttributionModel& m, std::size_t k);
// Score per part under the chosen distance; higher = located.
std::vector<double> influence_scores(const AttributionModel& m, ScoreKind kind,
                                     const Reference& ref);

// Distance between an unlearned/retrained prediction and the reference.
double prediction_distance(ScoreKind kind, const std::vector<double>& pred, const Reference& ref);

struct FinetuneSettings {
  int epochs = 30;
  double lr = 0.01;
  LossKind loss = LossKind::cross_entropy;
};

// Fine-tunes the final parameters on the synsets of the DELETED parts; the
// reversed-matched gradients rewind those parts' contributions. The all-ones
// mask returns the parameters untouched.
ParamVector perturbed_model(const ModelSpec& spec, const ParamVector& final_params,
                            const Synset& syn, const PerturbationMask& mask,
                            const FinetuneSettings& ft);

// Locates the training cluster most influential for a query. Hierarchical:
// argmax class via the class-level synset (L fine-tunes), then argmax
// cluster inside it (per_class fine-tunes); the flat variant fits all
// classes * per_class clusters. Fine-tuned models are cached per part, and
// finetune_count() reports how many actually ran.
class Locator {
 public:
  Locator(const ModelSpec& spec, const ParamVector& final_params, const Synset& class_synset,
          const Synset& cluster_synset, const ClusterHierarchy& hierarchy,
          const FinetuneSettings& ft);

  struct Located {
    int class_label = 0;
    std::size_t cluster_id = 0;
  };

  Located locate(const Tensor& input, int label, ScoreKind kind);
  std::size_t locate_flat(const Tensor& input, int label, ScoreKind kind);
  std::size_t finetune_count() const { return finetunes_; }

  // Prediction of the cached single-deletion model for a class or cluster.
  std::vector<double> class_deletion_prediction(std::size_t class_id, const Tensor& input);
  std::vector<double> cluster_deletion_prediction(std::size_t cluster_id, const Tensor& input);
  std::vector<double> target_prediction(const Tensor& input) const;

 private:
  const ParamVector& class_model(std::size_t class_id);
  const ParamVector& cluster_model(std::size_t cluster_id);

  const ModelSpec& spec_;
  ParamVector final_params_;
  const Synset& class_synset_;
  const Synset& cluster_synset_;
  const ClusterHierarchy& hierarchy_;
  FinetuneSettings ft_;
  std::map<std::pair<int, std::size_t>, ParamVector> cache_;
  std::size_t finetunes_ = 0;
};

void save_attribution_csv(const std::filesystem::path& path, const AttributionModel& m,
                          const std::vector<int>& part_classes, const Reference& ref,
                          const std::string& header_comment);
void save_wmatrix_csv(const std::filesystem::path& path, const AttributionModel& m,
                      const std::string& header_comment);

}  // namespace ddm
