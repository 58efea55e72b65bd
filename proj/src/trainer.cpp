#include "ddm/trainer.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <mutex>

#include <json.hpp>

#include "ddm/common.hpp"
#include "ddm/rng.hpp"

namespace ddm {

bool Trajectory::has_epoch(int t) const {
  return std::find(epochs.begin(), epochs.end(), t) != epochs.end();
}

const ParamVector& Trajectory::at_epoch(int t) const {
  for (std::size_t i = 0; i < epochs.size(); ++i)
    if (epochs[i] == t) return params[i];
  throw MissingArtifactError("trajectory has no checkpoint for epoch " + std::to_string(t));
}

const ParamVector& Trajectory::final_params() const {
  if (params.empty()) throw MissingArtifactError("trajectory is empty");
  return params.back();
}

Trajectory train(const ModelSpec& spec, const LabeledDataset& data, const TrainConfig& cfg,
                 const std::vector<std::size_t>& excluded_samples) {
  spec.validate();
  data.validate();
  if (cfg.lr < 0.0) throw ConfigError("train: negative learning rate");
  if (cfg.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (cfg.checkpoint_stride < 1) throw ConfigError("train: checkpoint_stride must be >= 1");

  const std::size_t n = data.size();
  std::vector<char> excluded(n, 0);
  for (std::size_t i : excluded_samples) {
    if (i >= n) throw ConfigError("train: excluded index out of range");
    excluded[i] = 1;
  }
  if (std::all_of(excluded.begin(), excluded.end(), [](char c) { return c == 1; }))
    throw ConfigError("train: training set is empty after exclusions");

  Trajectory traj;
  traj.config = cfg;
  traj.model_hash = spec.hash();
  ParamVector theta = init_params(spec);
  traj.epochs.push_back(0);
  traj.params.push_back(theta);

  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order;
    if (cfg.shuffle) {
      order = substream(cfg.seed, "shuffle", static_cast<std::uint64_t>(e)).permutation(n);
    } else {
      order.resize(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
    }
    order.erase(std::remove_if(order.begin(), order.end(),
                               [&](std::size_t i) { return excluded[i] == 1; }),
                order.end());

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + stop);
      LabeledBatch batch = data.gather(idx);
      GradResult gr;
      try {
        gr = grad_params(spec, theta, batch, cfg.loss);
      } catch (const NumericError& err) {
        throw TrainingDiverged("training diverged in epoch " + std::to_string(e) + ": " +
                                   err.what() + "; last finite checkpoint at epoch " +
                                   std::to_string(traj.epochs.back()),
                               e, traj.epochs.back(), traj.params.back());
      }
      for (std::size_t i = 0; i < theta.data.size(); ++i)
        theta.data[i] -= cfg.lr * gr.grad.data[i];
    }

    const int t = e + 1;
    if (t % cfg.checkpoint_stride == 0 || t == cfg.epochs) {
      if (traj.epochs.back() != t) {
        traj.epochs.push_back(t);
        traj.params.push_back(theta);
      }
    }
  }
  return traj;
}

ParamVector finetune(const ModelSpec& spec, ParamVector start, const LabeledBatch& batch,
                     int epochs, double lr, LossKind loss) {
  if (epochs < 0) throw ConfigError("finetune: epochs must be >= 0");
  if (batch.labels.empty()) throw ConfigError("finetune: empty batch");
  for (int e = 0; e < epochs; ++e) {
    GradResult gr;
    try {
      gr = grad_params(spec, start, batch, loss);
    } catch (const NumericError& err) {
      throw TrainingDiverged(
          "fine-tuning diverged at step " + std::to_string(e) + ": " + err.what(), e, 0, start);
    }
    for (std::size_t i = 0; i < start.data.size(); ++i) start.data[i] -= lr * gr.grad.data[i];
  }
  return start;
}

ParamVector retrain_without(const ModelSpec& spec, const LabeledDataset& data,
                            const ClusterHierarchy& hierarchy,
                            const std::vector<std::size_t>& excluded_clusters,
                            const TrainConfig& cfg) {
  std::vector<std::size_t> excluded_samples;
  for (std::size_t c : excluded_clusters) {
    if (c >= hierarchy.num_clusters())
      throw ConfigError("retrain_without: cluster id " + std::to_string(c) + " out of range");
    const auto& members = hierarchy.cluster_members[c];
    excluded_samples.insert(excluded_samples.end(), members.begin(), members.end());
  }
  if (excluded_samples.size() >= data.size())
    throw ConfigError("retrain_without: exclusions would empty the training set");
  return train(spec, data, cfg, excluded_samples).final_params();
}

void save_trajectory(const std::filesystem::path& dir, const ModelSpec& spec, const Trajectory& t) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < t.epochs.size(); ++i)
    save_checkpoint(dir / ("epoch_" + std::to_string(t.epochs[i]) + ".ckpt"), spec, t.params[i]);
  nlohmann::json meta;
  meta["epochs"] = t.epochs;
  meta["lr"] = t.config.lr;
  meta["total_epochs"] = t.config.epochs;
  meta["batch_size"] = t.config.batch_size;
  meta["checkpoint_stride"] = t.config.checkpoint_stride;
  meta["shuffle"] = t.config.shuffle;
  meta["seed"] = t.config.seed;
  meta["loss"] = t.config.loss == LossKind::cross_entropy ? "cross_entropy" : "squared_error";
  meta["model_hash"] = t.model_hash;
  std::ofstream os(dir / "meta");
  os << meta.dump(2) << '\n';
  if (!os) throw ParseError("cannot write trajectory meta in " + dir.string());
}

Trajectory load_trajectory(const std::filesystem::path& dir, const ModelSpec& spec) {
  std::ifstream is(dir / "meta");
  if (!is) throw MissingArtifactError("trajectory meta not found in " + dir.string());
  nlohmann::json meta;
  try {
    is >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("trajectory meta is not valid JSON: " + std::string(e.what()));
  }
  Trajectory t;
  t.config.lr = meta.at("lr").get<double>();
  t.config.epochs = meta.at("total_epochs").get<int>();
  t.config.batch_size = meta.at("batch_size").get<int>();
  t.config.checkpoint_stride = meta.at("checkpoint_stride").get<int>();
  t.config.shuffle = meta.at("shuffle").get<bool>();
  t.config.seed = meta.at("seed").get<std::uint64_t>();
  t.config.loss = meta.at("loss").get<std::string>() == "squared_error" ? LossKind::squared_error
                                                                        : LossKind::cross_entropy;
  t.model_hash = meta.at("model_hash").get<std::uint64_t>();
  if (t.model_hash != spec.hash())
    throw ParseError("trajectory in " + dir.string() + " was written for a different model spec");
  for (int e : meta.at("epochs").get<std::vector<int>>()) {
    t.epochs.push_back(e);
    t.params.push_back(load_checkpoint(dir / ("epoch_" + std::to_string(e) + ".ckpt"), spec));
  }
  return t;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (workers < 1) throw ConfigError("parallel_for: workers must be >= 1");
  if (n == 0) return;
  if (workers == 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto body = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  const int count = static_cast<int>(std::min<std::size_t>(n, workers));
  threads.reserve(count);
  for (int i = 0; i < count; ++i) threads.emplace_back(body);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace ddm
