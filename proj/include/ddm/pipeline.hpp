#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddm/attribution.hpp"
#include "ddm/clustering.hpp"
#include "ddm/dataset.hpp"
#include "ddm/diagnostics.hpp"
#include "ddm/distill.hpp"
#include "ddm/models.hpp"
#include "ddm/trainer.hpp"

namespace ddm {

struct DatasetConfig {
  enum class Type { blobs, digits, idx, csv };
  Type type = Type::digits;

  // blobs
  int classes = 2;
  int per_class = 50;
  std::size_t dim = 10;
  double separation = 6.0;

  // digits (28x28 glyph generator)
  int digits_per_class = 100;

  // shared: held-out test split size per class (blobs, digits)
  int test_per_class = 20;

  // idx / csv file sources
  std::string train_images, train_labels, test_images, test_labels;
  std::string train_csv, test_csv;
  std::size_t limit = 0, test_limit = 0;  // 0 = everything

  // optional bounded corruption of the training split
  bool corrupt = false;
  double corrupt_fraction = 0.0;
  double corrupt_norm = 0.1;
};

struct ModelConfig {
  ModelSpec::Arch arch = ModelSpec::Arch::mlp;
  std::vector<std::size_t> hidden{128, 64};
  std::vector<std::size_t> conv_channels;
  std::size_t kernel = 3, pool = 2;
  Activation activation = Activation::relu;
  InitScheme init = InitScheme::kaiming;
};

struct ClusterConfig {
  std::size_t per_class = 2;
  enum class Extractor { raw_pixels, model_features };
  Extractor extractor = Extractor::raw_pixels;
};

struct EvaluateConfig {
  int test_samples = 20;
  std::size_t masks = 0;  // extra perturbation records; 0 = just the K single deletions
  FitObjective objective = FitObjective::l2;
  bool flat = false;           // flat K-way search instead of hierarchical
  int finetune_epochs = -1;    // < 0: inherit train epochs
  double finetune_lr = -1.0;   // < 0: inherit train lr
};

struct DiagnoseConfig {
  std::vector<double> percentages{0.0, 10.0, 20.0};
  double validation_fraction = 0.5;  // of the test split
};

struct OracleConfig {
  enum class Which { located, all, list };
  Which which = Which::located;
  std::vector<std::size_t> ids;  // when which == list
};

struct ReportConfig {
  double min_speedup = 10.0;
};

// Whole-run configuration; loaded from strict JSON where unknown keys are
// errors. Every stage artifact embeds stage_hash() and the global seed, and
// a stage refuses to overwrite artifacts written under a different hash
// unless forced.
struct PipelineConfig {
  int version = 1;
  std::uint64_t seed = 0;
  std::string out = "runs/default";

  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  ClusterConfig cluster;
  DistillConfig distill;
  EvaluateConfig evaluate;
  DiagnoseConfig diagnose;
  OracleConfig oracle;
  ReportConfig report;

  std::string canonical() const;  // sorted-key JSON echo of the effective config
  // Fingerprint of the config sections a stage's output depends on.
  std::uint64_t stage_hash(const std::string& stage) const;
};

PipelineConfig load_config(const std::filesystem::path& path);

struct PipelineIO {
  std::filesystem::path out;
  bool force = false;
  int workers = 1;
};

// Stage commands; artifacts land under io.out in clusters/, traj/, synset/,
// eval/, oracle/, diagnose/, report/. Reruns with an unchanged config are
// cache hits; changed configs refuse without io.force.
void cmd_cluster(const PipelineConfig& cfg, const PipelineIO& io);
void cmd_train(const PipelineConfig& cfg, const PipelineIO& io);
void cmd_distill(const PipelineConfig& cfg, const PipelineIO& io);
void cmd_evaluate(const PipelineConfig& cfg, const PipelineIO& io);
void cmd_diagnose(const PipelineConfig& cfg, const PipelineIO& io);
void cmd_oracle(const PipelineConfig& cfg, const PipelineIO& io);
void cmd_report(const PipelineConfig& cfg, const PipelineIO& io);

}  // namespace ddm
