#include "ddm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ddm/common.hpp"
#include "ddm/rng.hpp"

namespace ddm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- strict config parsing -------------------------------------------------

// Wraps one JSON object; every key must be consumed or finish() rejects it.
class StrictObj {
 public:
  StrictObj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: " + path_ + " must be an object");
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    const json* v = find(key);
    if (!v) return fallback;
    return cast<T>(*v, key);
  }

  template <typename T>
  T require(const std::string& key) {
    const json* v = find(key);
    if (!v) throw ConfigError("config: missing required key " + path_ + "." + key);
    return cast<T>(*v, key);
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError("config: unknown key " + path_ + "." + it.key());
  }

  const json& raw() const { return j_; }
  const std::string& path() const { return path_; }

 private:
  template <typename T>
  T cast(const json& v, const std::string& key) {
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: " + path_ + "." + key + " has the wrong type");
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename E>
E parse_choice(const std::string& value, const std::vector<std::pair<std::string, E>>& table,
               const std::string& key_path) {
  for (const auto& [name, e] : table)
    if (name == value) return e;
  std::string allowed;
  for (const auto& [name, e] : table) allowed += (allowed.empty() ? "" : ", ") + name;
  throw ConfigError("config: " + key_path + " must be one of {" + allowed + "}, got \"" + value +
                    "\"");
}

template <typename E>
std::string choice_name(E value, const std::vector<std::pair<std::string, E>>& table) {
  for (const auto& [name, e] : table)
    if (e == value) return name;
  return "?";
}

const std::vector<std::pair<std::string, DatasetConfig::Type>> kDatasetTypes = {
    {"blobs", DatasetConfig::Type::blobs},
    {"digits", DatasetConfig::Type::digits},
    {"idx", DatasetConfig::Type::idx},
    {"csv", DatasetConfig::Type::csv}};
const std::vector<std::pair<std::string, ModelSpec::Arch>> kArchs = {
    {"mlp", ModelSpec::Arch::mlp}, {"convnet", ModelSpec::Arch::convnet}};
const std::vector<std::pair<std::string, Activation>> kActivations = {
    {"relu", Activation::relu}, {"tanh", Activation::tanh}};
const std::vector<std::pair<std::string, InitScheme>> kInits = {
    {"kaiming", InitScheme::kaiming}, {"xavier", InitScheme::xavier},
    {"normal", InitScheme::normal}};
const std::vector<std::pair<std::string, LossKind>> kLosses = {
    {"cross_entropy", LossKind::cross_entropy}, {"squared_error", LossKind::squared_error}};
const std::vector<std::pair<std::string, DistanceKind>> kDistances = {
    {"layerwise_cosine", DistanceKind::layerwise_cosine}, {"mse", DistanceKind::mse}};
const std::vector<std::pair<std::string, DistillConfig::Mode>> kModes = {
    {"reverse", DistillConfig::Mode::reverse}, {"forward", DistillConfig::Mode::forward}};
const std::vector<std::pair<std::string, ClusterConfig::Extractor>> kExtractors = {
    {"raw_pixels", ClusterConfig::Extractor::raw_pixels},
    {"model_features", ClusterConfig::Extractor::model_features}};
const std::vector<std::pair<std::string, FitObjective>> kObjectives = {
    {"l2", FitObjective::l2},
    {"cross_entropy", FitObjective::cross_entropy},
    {"kl", FitObjective::kl}};

DatasetConfig parse_dataset(const json& j) {
  StrictObj o(j, "dataset");
  DatasetConfig d;
  d.type = parse_choice(o.require<std::string>("type"), kDatasetTypes, "dataset.type");
  switch (d.type) {
    case DatasetConfig::Type::blobs:
      d.classes = o.get("classes", d.classes);
      d.per_class = o.get("per_class", d.per_class);
      d.dim = o.get("dim", d.dim);
      d.separation = o.get("separation", d.separation);
      d.test_per_class = o.get("test_per_class", d.test_per_class);
      break;
    case DatasetConfig::Type::digits:
      d.digits_per_class = o.get("per_class", d.digits_per_class);
      d.test_per_class = o.get("test_per_class", d.test_per_class);
      break;
    case DatasetConfig::Type::idx:
      d.train_images = o.require<std::string>("train_images");
      d.train_labels = o.require<std::string>("train_labels");
      d.test_images = o.require<std::string>("test_images");
      d.test_labels = o.require<std::string>("test_labels");
      d.limit = o.get<std::size_t>("limit", 0);
      d.test_limit = o.get<std::size_t>("test_limit", 0);
      break;
    case DatasetConfig::Type::csv:
      d.train_csv = o.require<std::string>("train");
      d.test_csv = o.require<std::string>("test");
      break;
  }
  if (const json* c = o.find("corrupt")) {
    StrictObj co(*c, "dataset.corrupt");
    d.corrupt = true;
    d.corrupt_fraction = co.require<double>("fraction");
    d.corrupt_norm = co.get("norm", d.corrupt_norm);
    co.finish();
  }
  o.finish();
  return d;
}

ModelConfig parse_model(const json& j) {
  StrictObj o(j, "model");
  ModelConfig m;
  if (const json* v = o.find("arch"))
    m.arch = parse_choice(v->get<std::string>(), kArchs, "model.arch");
  m.hidden = o.get("hidden", m.hidden);
  m.conv_channels = o.get("conv_channels", m.conv_channels);
  m.kernel = o.get("kernel", m.kernel);
  m.pool = o.get("pool", m.pool);
  if (const json* v = o.find("activation"))
    m.activation = parse_choice(v->get<std::string>(), kActivations, "model.activation");
  if (const json* v = o.find("init"))
    m.init = parse_choice(v->get<std::string>(), kInits, "model.init");
  o.finish();
  return m;
}

TrainConfig parse_train(const json& j) {
  StrictObj o(j, "train");
  TrainConfig t;
  t.lr = o.get("lr", t.lr);
  t.epochs = o.get("epochs", t.epochs);
  t.batch_size = o.get("batch_size", t.batch_size);
  t.checkpoint_stride = o.get("checkpoint_stride", t.checkpoint_stride);
  t.shuffle = o.get("shuffle", t.shuffle);
  if (const json* v = o.find("loss"))
    t.loss = parse_choice(v->get<std::string>(), kLosses, "train.loss");
  o.finish();
  return t;
}

ClusterConfig parse_cluster(const json& j) {
  StrictObj o(j, "cluster");
  ClusterConfig c;
  c.per_class = o.get("per_class", c.per_class);
  if (const json* v = o.find("extractor"))
    c.extractor = parse_choice(v->get<std::string>(), kExtractors, "cluster.extractor");
  o.finish();
  return c;
}

DistillConfig parse_distill(const json& j) {
  StrictObj o(j, "distill");
  DistillConfig d;
  d.lr_img = o.get("lr_img", d.lr_img);
  d.steps = o.get("steps", d.steps);
  d.step_offset = o.get("step_offset", d.step_offset);
  if (const json* v = o.find("distance"))
    d.dist = parse_choice(v->get<std::string>(), kDistances, "distill.distance");
  if (const json* v = o.find("mode"))
    d.mode = parse_choice(v->get<std::string>(), kModes, "distill.mode");
  d.augment = o.get("augment", d.augment);
  d.hflip = o.get("hflip", d.hflip);
  d.images_per_cluster = o.get("images_per_cluster", d.images_per_cluster);
  o.finish();
  return d;
}

EvaluateConfig parse_evaluate(const json& j) {
  StrictObj o(j, "evaluate");
  EvaluateConfig e;
  e.test_samples = o.get("test_samples", e.test_samples);
  e.masks = o.get("masks", e.masks);
  if (const json* v = o.find("objective"))
    e.objective = parse_choice(v->get<std::string>(), kObjectives, "evaluate.objective");
  e.flat = o.get("flat", e.flat);
  e.finetune_epochs = o.get("finetune_epochs", e.finetune_epochs);
  e.finetune_lr = o.get("finetune_lr", e.finetune_lr);
  o.finish();
  return e;
}

DiagnoseConfig parse_diagnose(const json& j) {
  StrictObj o(j, "diagnose");
  DiagnoseConfig d;
  d.percentages = o.get("percentages", d.percentages);
  d.validation_fraction = o.get("validation_fraction", d.validation_fraction);
  o.finish();
  return d;
}

OracleConfig parse_oracle(const json& j) {
  StrictObj o(j, "oracle");
  OracleConfig oc;
  if (const json* v = o.find("clusters")) {
    if (v->is_string()) {
      const std::string s = v->get<std::string>();
      if (s == "located")
        oc.which = OracleConfig::Which::located;
      else if (s == "all")
        oc.which = OracleConfig::Which::all;
      else
        throw ConfigError(
            "config: oracle.clusters must be \"located\", \"all\", or a list of cluster ids");
    } else if (v->is_array()) {
      oc.which = OracleConfig::Which::list;
      try {
        oc.ids = v->get<std::vector<std::size_t>>();
      } catch (const json::exception&) {
        throw ConfigError("config: oracle.clusters list must hold cluster ids");
      }
    } else {
      throw ConfigError(
          "config: oracle.clusters must be \"located\", \"all\", or a list of cluster ids");
    }
  }
  o.finish();
  return oc;
}

// ---- effective-config echo and hashing ------------------------------------

json json_of(const DatasetConfig& d) {
  json j{{"type", choice_name(d.type, kDatasetTypes)}};
  switch (d.type) {
    case DatasetConfig::Type::blobs:
      j["classes"] = d.classes;
      j["per_class"] = d.per_class;
      j["dim"] = d.dim;
      j["separation"] = d.separation;
      j["test_per_class"] = d.test_per_class;
      break;
    case DatasetConfig::Type::digits:
      j["per_class"] = d.digits_per_class;
      j["test_per_class"] = d.test_per_class;
      break;
    case DatasetConfig::Type::idx:
      j["train_images"] = d.train_images;
      j["train_labels"] = d.train_labels;
      j["test_images"] = d.test_images;
      j["test_labels"] = d.test_labels;
      j["limit"] = d.limit;
      j["test_limit"] = d.test_limit;
      break;
    case DatasetConfig::Type::csv:
      j["train"] = d.train_csv;
      j["test"] = d.test_csv;
      break;
  }
  if (d.corrupt) j["corrupt"] = {{"fraction", d.corrupt_fraction}, {"norm", d.corrupt_norm}};
  return j;
}

json json_of(const ModelConfig& m) {
  return {{"arch", choice_name(m.arch, kArchs)},
          {"hidden", m.hidden},
          {"conv_channels", m.conv_channels},
          {"kernel", m.kernel},
          {"pool", m.pool},
          {"activation", choice_name(m.activation, kActivations)},
          {"init", choice_name(m.init, kInits)}};
}

json json_of(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"checkpoint_stride", t.checkpoint_stride},
          {"shuffle", t.shuffle},
          {"loss", choice_name(t.loss, kLosses)}};
}

json json_of(const ClusterConfig& c) {
  return {{"per_class", c.per_class}, {"extractor", choice_name(c.extractor, kExtractors)}};
}

json json_of(const DistillConfig& d) {
  return {{"lr_img", d.lr_img},
          {"steps", d.steps},
          {"step_offset", d.step_offset},
          {"distance", choice_name(d.dist, kDistances)},
          {"mode", choice_name(d.mode, kModes)},
          {"augment", d.augment},
          {"hflip", d.hflip},
          {"images_per_cluster", d.images_per_cluster}};
}

json json_of(const EvaluateConfig& e) {
  return {{"test_samples", e.test_samples}, {"masks", e.masks},
          {"objective", choice_name(e.objective, kObjectives)}, {"flat", e.flat},
          {"finetune_epochs", e.finetune_epochs}, {"finetune_lr", e.finetune_lr}};
}

json json_of(const DiagnoseConfig& d) {
  return {{"percentages", d.percentages}, {"validation_fraction", d.validation_fraction}};
}

json json_of(const OracleConfig& o) {
  if (o.which == OracleConfig::Which::list) return {{"clusters", o.ids}};
  return {{"clusters", o.which == OracleConfig::Which::all ? "all" : "located"}};
}

json json_of(const ReportConfig& r) { return {{"min_speedup", r.min_speedup}}; }

}  // namespace

std::string PipelineConfig::canonical() const {
  json j{{"version", version},       {"seed", seed},
         {"dataset", json_of(dataset)}, {"model", json_of(model)},
         {"train", json_of(train)},  {"cluster", json_of(cluster)},
         {"distill", json_of(distill)}, {"evaluate", json_of(evaluate)},
         {"diagnose", json_of(diagnose)}, {"oracle", json_of(oracle)},
         {"report", json_of(report)}};
  return j.dump();  // object keys serialize sorted, so the echo is canonical
}

std::uint64_t PipelineConfig::stage_hash(const std::string& stage) const {
  json j{{"version", version}, {"seed", seed}, {"stage", stage}};
  auto add = [&](const char* name, const json& section) { j[name] = section; };
  const bool needs_model_features = cluster.extractor == ClusterConfig::Extractor::model_features;
  if (stage == "cluster") {
    add("dataset", json_of(dataset));
    add("cluster", json_of(cluster));
    if (needs_model_features) {
      add("model", json_of(model));
      add("train", json_of(train));
    }
  } else if (stage == "train") {
    add("dataset", json_of(dataset));
    add("model", json_of(model));
    add("train", json_of(train));
  } else if (stage == "distill" || stage == "evaluate" || stage == "diagnose") {
    add("dataset", json_of(dataset));
    add("model", json_of(model));
    add("train", json_of(train));
    add("cluster", json_of(cluster));
    add("distill", json_of(distill));
    if (stage == "evaluate") add("evaluate", json_of(evaluate));
    if (stage == "diagnose") add("diagnose", json_of(diagnose));
  } else if (stage == "oracle") {
    add("dataset", json_of(dataset));
    add("model", json_of(model));
    add("train", json_of(train));
    add("cluster", json_of(cluster));
    add("oracle", json_of(oracle));
    if (oracle.which == OracleConfig::Which::located) {
      add("distill", json_of(distill));
      add("evaluate", json_of(evaluate));
    }
  } else if (stage == "report") {
    return fnv1a(canonical() + ":report");
  } else {
    throw ConfigError("unknown pipeline stage: " + stage);
  }
  return fnv1a(j.dump());
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("config file: " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ParseError("config " + path.string() + ": " + e.what());
  }
  StrictObj root(j, "config");
  PipelineConfig cfg;
  cfg.version = root.require<int>("version");
  if (cfg.version != 1)
    throw ConfigError("config: unsupported version " + std::to_string(cfg.version) +
                      " (expected 1)");
  cfg.seed = root.require<std::uint64_t>("seed");
  cfg.out = root.get<std::string>("out", cfg.out);
  {
    const json* d = root.find("dataset");
    if (!d) throw ConfigError("config: missing required key config.dataset");
    cfg.dataset = parse_dataset(*d);
  }
  if (const json* v = root.find("model")) cfg.model = parse_model(*v);
  if (const json* v = root.find("train")) cfg.train = parse_train(*v);
  if (const json* v = root.find("cluster")) cfg.cluster = parse_cluster(*v);
  if (const json* v = root.find("distill")) cfg.distill = parse_distill(*v);
  if (const json* v = root.find("evaluate")) cfg.evaluate = parse_evaluate(*v);
  if (const json* v = root.find("diagnose")) cfg.diagnose = parse_diagnose(*v);
  if (const json* v = root.find("oracle")) cfg.oracle = parse_oracle(*v);
  if (const json* v = root.find("report")) {
    StrictObj o(*v, "report");
    cfg.report.min_speedup = o.get("min_speedup", cfg.report.min_speedup);
    o.finish();
  }
  root.finish();
  return cfg;
}

// ---- artifacts and stage plumbing -----------------------------------------

namespace {

std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string artifact_tag(const PipelineConfig& cfg, const std::string& stage) {
  return "config=" + hash_hex(cfg.stage_hash(stage)) + " seed=" + std::to_string(cfg.seed);
}

// True: the stage should run into a clean dir. False: cache hit, skip.
bool ensure_stage(const fs::path& dir, const std::string& stage, std::uint64_t hash,
                  bool force) {
  const fs::path marker = dir / ".done";
  if (fs::exists(marker)) {
    std::string stored;
    std::ifstream is(marker);
    json j;
    try {
      j = json::parse(is);
      stored = j.value("hash", "");
    } catch (const json::exception&) {
      stored.clear();  // unreadable marker: treat as stale
    }
    if (stored == hash_hex(hash) && !force) return false;
    if (!force)
      throw ConfigError("artifacts in " + dir.string() +
                        " were written by a different configuration (stage " + stage +
                        "); rerun with --force to replace them");
  }
  fs::remove_all(dir);
  fs::create_directories(dir);
  return true;
}

void finish_stage(const fs::path& dir, const std::string& stage, std::uint64_t hash,
                  std::uint64_t seed) {
  json j{{"stage", stage}, {"hash", hash_hex(hash)}, {"seed", seed}};
  std::ofstream os(dir / ".done");
  os << j.dump(2) << '\n';
}

void note(const std::string& line) { std::printf("%s\n", line.c_str()); }

// ---- dataset assembly ------------------------------------------------------

LabeledDataset subset(const LabeledDataset& d, const std::vector<std::size_t>& idx) {
  LabeledBatch b = d.gather(idx);
  LabeledDataset out;
  out.images = std::move(b.inputs);
  out.labels = std::move(b.labels);
  out.num_classes = d.num_classes;
  return out;
}

// First train_per_class occurrences of each class go to train, the rest to
// test; works for any sample order.
std::pair<LabeledDataset, LabeledDataset> split_per_class(const LabeledDataset& all,
                                                          int train_per_class) {
  std::vector<std::size_t> train_idx, test_idx;
  std::vector<int> seen(static_cast<std::size_t>(all.num_classes), 0);
  for (std::size_t i = 0; i < all.size(); ++i) {
    int& s = seen[static_cast<std::size_t>(all.labels[i])];
    (s < train_per_class ? train_idx : test_idx).push_back(i);
    ++s;
  }
  return {subset(all, train_idx), subset(all, test_idx)};
}

struct LoadedData {
  LabeledDataset train, test;
};

LoadedData load_data(const PipelineConfig& cfg) {
  const DatasetConfig& d = cfg.dataset;
  LoadedData out;
  switch (d.type) {
    case DatasetConfig::Type::blobs: {
      LabeledDataset all = make_blobs(d.classes, d.per_class + d.test_per_class, d.dim,
                                      d.separation, cfg.seed);
      std::tie(out.train, out.test) = split_per_class(all, d.per_class);
      break;
    }
    case DatasetConfig::Type::digits: {
      LabeledDataset all = make_digits(d.digits_per_class + d.test_per_class, cfg.seed);
      std::tie(out.train, out.test) = split_per_class(all, d.digits_per_class);
      break;
    }
    case DatasetConfig::Type::idx: {
      out.train = load_idx(d.train_images, d.train_labels);
      out.test = load_idx(d.test_images, d.test_labels);
      auto truncate = [](LabeledDataset& ds, std::size_t limit) {
        if (limit == 0 || limit >= ds.size()) return;
        std::vector<std::size_t> idx(limit);
        std::iota(idx.begin(), idx.end(), 0);
        ds = subset(ds, idx);
      };
      truncate(out.train, d.limit);
      truncate(out.test, d.test_limit);
      break;
    }
    case DatasetConfig::Type::csv: {
      out.train = load_csv(d.train_csv);
      out.test = load_csv(d.test_csv);
      break;
    }
  }
  const int nc = std::max(out.train.num_classes, out.test.num_classes);
  out.train.num_classes = nc;
  out.test.num_classes = nc;
  out.train.validate();
  if (out.test.size()) out.test.validate();
  if (d.corrupt)
    out.train = inject_noise(out.train, d.corrupt_fraction, d.corrupt_norm, cfg.seed).corrupted;
  return out;
}

ModelSpec build_spec(const PipelineConfig& cfg, const LabeledDataset& data) {
  ModelSpec spec;
  spec.arch = cfg.model.arch;
  if (data.images.ndim() == 4) {
    spec.in_c = data.images.dim(1);
    spec.in_h = data.images.dim(2);
    spec.in_w = data.images.dim(3);
  } else {
    spec.in_c = 1;
    spec.in_h = 1;
    spec.in_w = data.images.dim(1);
  }
  spec.num_classes = static_cast<std::size_t>(data.num_classes);
  spec.hidden = cfg.model.hidden;
  spec.conv_channels = cfg.model.conv_channels;
  spec.kernel = cfg.model.kernel;
  spec.pool = cfg.model.pool;
  spec.activation = cfg.model.activation;
  spec.init = cfg.model.init;
  spec.seed = cfg.seed;
  spec.validate();
  return spec;
}

TrainConfig effective_train(const PipelineConfig& cfg) {
  TrainConfig t = cfg.train;
  t.seed = cfg.seed;
  return t;
}

DistillConfig effective_distill(const PipelineConfig& cfg) {
  DistillConfig d = cfg.distill;
  d.seed = cfg.seed;
  d.loss = cfg.train.loss;
  return d;
}

FinetuneSettings effective_finetune(const PipelineConfig& cfg) {
  FinetuneSettings ft;
  ft.epochs = cfg.evaluate.finetune_epochs >= 0 ? cfg.evaluate.finetune_epochs : cfg.train.epochs;
  ft.lr = cfg.evaluate.finetune_lr >= 0.0 ? cfg.evaluate.finetune_lr : cfg.train.lr;
  ft.loss = cfg.train.loss;
  return ft;
}

// ---- upstream artifact loading --------------------------------------------

Trajectory require_trajectory(const PipelineIO& io, const ModelSpec& spec) {
  const fs::path dir = io.out / "traj";
  if (!fs::exists(dir / "meta"))
    throw MissingArtifactError("trajectory at " + dir.string() + "; run the train stage first");
  return load_trajectory(dir, spec);
}

ClusterHierarchy require_hierarchy(const PipelineIO& io, std::size_t dataset_size) {
  const fs::path path = io.out / "clusters" / "assignments.csv";
  if (!fs::exists(path))
    throw MissingArtifactError("cluster assignments at " + path.string() +
                               "; run the cluster stage first");
  ClusterHierarchy h = load_assignments_csv(path);
  h.validate(dataset_size);
  return h;
}

Synset require_synset(const PipelineIO& io, const std::string& level) {
  const fs::path path = io.out / "synset" / level / "synset.bin";
  if (!fs::exists(path))
    throw MissingArtifactError(level + "-level synset at " + path.string() +
                               "; run the distill stage first");
  return load_synset(path);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

struct LocatedRow {
  std::size_t sample = 0;
  std::string method;     // "ddm" or "random"
  std::string objective;  // dist1|dist2|dist3 for ddm, "-" for random
  int class_label = 0;
  std::size_t cluster = 0;
};

std::vector<LocatedRow> read_located(const fs::path& path) {
  std::ifstream is(path);
  if (!is)
    throw MissingArtifactError("located clusters at " + path.string() +
                               "; run the evaluate stage first");
  std::vector<LocatedRow> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("sample,", 0) == 0) continue;
    std::vector<std::string> f = split_csv_line(line);
    if (f.size() != 5) throw ParseError("malformed located row in " + path.string());
    LocatedRow r;
    r.sample = std::stoull(f[0]);
    r.method = f[1];
    r.objective = f[2];
    r.class_label = std::stoi(f[3]);
    r.cluster = std::stoull(f[4]);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ParseError("no located rows in " + path.string());
  return rows;
}

json read_json_file(const fs::path& path, const std::string& what) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError(what + " at " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

const std::vector<std::pair<std::string, ScoreKind>> kScoreNames = {
    {"dist1", ScoreKind::dist1_l2}, {"dist2", ScoreKind::dist2_ce},
    {"dist3", ScoreKind::dist3_inverse}};

}  // namespace

// ---- stage commands --------------------------------------------------------

void cmd_cluster(const PipelineConfig& cfg, const PipelineIO& io) {
  LoadedData data = load_data(cfg);
  const std::uint64_t h = cfg.stage_hash("cluster");
  const fs::path dir = io.out / "clusters";
  if (!ensure_stage(dir, "cluster", h, io.force)) {
    note("[cluster] cache hit: " + dir.string());
    return;
  }
  Tensor features;
  if (cfg.cluster.extractor == ClusterConfig::Extractor::raw_pixels) {
    features = embed_raw(data.train);
  } else {
    ModelSpec spec = build_spec(cfg, data.train);
    Trajectory traj = require_trajectory(io, spec);
    features = embed_features(spec, traj.final_params(), data.train);
  }
  ClusterHierarchy hier =
      cluster_dataset(data.train, features, cfg.cluster.per_class, cfg.seed);
  save_assignments_csv(dir / "assignments.csv", hier, artifact_tag(cfg, "cluster"));
  {
    std::ofstream os(dir / "summary.txt");
    os << "# " << artifact_tag(cfg, "cluster") << '\n';
    os << "classes: " << hier.num_classes << '\n';
    os << "clusters per class: " << hier.per_class << '\n';
    os << "total clusters: " << hier.num_clusters() << '\n';
    os << "extractor: " << choice_name(cfg.cluster.extractor, kExtractors) << '\n';
    for (std::size_t k = 0; k < hier.num_clusters(); ++k)
      os << "cluster " << k << " (class " << hier.cluster_class(k)
         << "): " << hier.cluster_members[k].size() << " samples\n";
  }
  finish_stage(dir, "cluster", h, cfg.seed);
  note("[cluster] " + std::to_string(hier.num_clusters()) + " clusters -> " + dir.string());
}

void cmd_train(const PipelineConfig& cfg, const PipelineIO& io) {
  LoadedData data = load_data(cfg);
  ModelSpec spec = build_spec(cfg, data.train);
  const std::uint64_t h = cfg.stage_hash("train");
  const fs::path dir = io.out / "traj";
  if (!ensure_stage(dir, "train", h, io.force)) {
    note("[train] cache hit: " + dir.string());
    return;
  }
  Trajectory traj = train(spec, data.train, effective_train(cfg));
  save_trajectory(dir, spec, traj);
  json metrics{{"config", hash_hex(h)},
               {"seed", cfg.seed},
               {"final_epoch", traj.final_epoch()},
               {"train_accuracy", 100.0 * accuracy(spec, traj.final_params(), data.train.full())}};
  if (data.test.size())
    metrics["test_accuracy"] = 100.0 * accuracy(spec, traj.final_params(), data.test.full());
  {
    std::ofstream os(dir / "metrics.json");
    os << metrics.dump(2) << '\n';
  }
  finish_stage(dir, "train", h, cfg.seed);
  note("[train] " + std::to_string(traj.params.size()) + " checkpoints -> " + dir.string());
}

void cmd_distill(const PipelineConfig& cfg, const PipelineIO& io) {
  LoadedData data = load_data(cfg);
  ModelSpec spec = build_spec(cfg, data.train);
  Trajectory traj = require_trajectory(io, spec);
  ClusterHierarchy hier = require_hierarchy(io, data.train.size());
  const std::uint64_t h = cfg.stage_hash("distill");
  const fs::path dir = io.out / "synset";
  if (!ensure_stage(dir, "distill", h, io.force)) {
    note("[distill] cache hit: " + dir.string());
    return;
  }
  DistillConfig dc = effective_distill(cfg);
  json losses{{"config", hash_hex(h)}, {"seed", cfg.seed}};
  for (const std::string& level : {std::string("class"), std::string("cluster")}) {
    std::vector<DataPart> parts =
        level == "class" ? class_parts(hier) : cluster_parts(hier);
    Synset syn = distill(spec, traj, data.train, parts, dc);
    syn.config_hash = h;
    fs::create_directories(dir / level / "images");
    save_synset(dir / level / "synset.bin", syn);
    export_synset_images(syn, dir / level / "images");
    losses[level + "_matching_loss"] =
        matching_loss(spec, traj, data.train, parts, syn, dc);
    note("[distill] " + level + " level: " + std::to_string(syn.entries.size()) + " entries");
  }
  {
    std::ofstream os(dir / "losses.json");
    os << losses.dump(2) << '\n';
  }
  finish_stage(dir, "distill", h, cfg.seed);
  note("[distill] synsets -> " + dir.string());
}

void cmd_evaluate(const PipelineConfig& cfg, const PipelineIO& io) {
  LoadedData data = load_data(cfg);
  if (data.test.size() == 0) throw ConfigError("evaluate: the dataset has no test split");
  ModelSpec spec = build_spec(cfg, data.train);
  Trajectory traj = require_trajectory(io, spec);
  ClusterHierarchy hier = require_hierarchy(io, data.train.size());
  Synset class_syn = require_synset(io, "class");
  Synset cluster_syn = require_synset(io, "cluster");
  const std::uint64_t h = cfg.stage_hash("evaluate");
  const fs::path dir = io.out / "eval";
  if (!ensure_stage(dir, "evaluate", h, io.force)) {
    note("[evaluate] cache hit: " + dir.string());
    return;
  }
  const std::size_t k = hier.num_clusters();
  FinetuneSettings ft = effective_finetune(cfg);
  Locator loc(spec, traj.final_params(), class_syn, cluster_syn, hier, ft);

  if (cfg.evaluate.test_samples < 1)
    throw ConfigError("evaluate: test_samples must be >= 1");
  const std::size_t nq =
      std::min<std::size_t>(static_cast<std::size_t>(cfg.evaluate.test_samples),
                            data.test.size());
  std::vector<std::size_t> queries =
      substream(cfg.seed, "eval.queries").sample_without_replacement(data.test.size(), nq);
  std::sort(queries.begin(), queries.end());

  double finetune_seconds = 0.0;
  std::size_t finetunes = 0;
  std::ofstream os(dir / "located.csv");
  os << "# " << artifact_tag(cfg, "evaluate") << '\n';
  os << "sample,method,objective,class,cluster\n";
  for (std::size_t q : queries) {
    Tensor x = data.test.gather({q}).inputs;
    const int label = data.test.labels[q];
    const double t0 = now_seconds();
    const std::size_t ft0 = loc.finetune_count();
    for (const auto& [kind_name, kind] : kScoreNames) {
      int cls;
      std::size_t cluster;
      if (cfg.evaluate.flat) {
        cluster = loc.locate_flat(x, label, kind);
        cls = hier.cluster_class(cluster);
      } else {
        Locator::Located lc = loc.locate(x, label, kind);
        cls = lc.class_label;
        cluster = lc.cluster_id;
      }
      os << q << ",ddm," << kind_name << ',' << cls << ',' << cluster << '\n';
    }
    finetune_seconds += now_seconds() - t0;
    finetunes += loc.finetune_count() - ft0;
    Rng rng = substream(cfg.seed, "eval.random", q);
    const std::size_t rk = rng.index(k);
    os << q << ",random,-," << hier.cluster_class(rk) << ',' << rk << '\n';
  }
  os.close();

  // Attribution artifacts for the first query: class-level single deletions
  // plus a mask-sampled cluster-level fit.
  {
    const std::size_t q0 = queries.front();
    Tensor x0 = data.test.gather({q0}).inputs;
    Reference ref{loc.target_prediction(x0), data.test.labels[q0]};
    const std::string tag = artifact_tag(cfg, "evaluate") + " sample=" + std::to_string(q0);

    std::vector<MaskRecord> records;
    std::vector<double> beta;
    const std::size_t l = static_cast<std::size_t>(hier.num_classes);
    for (std::size_t i = 0; i < l; ++i) {
      MaskRecord r;
      r.mask.bits.assign(l, 1);
      r.mask.bits[i] = 0;
      r.prediction = loc.class_deletion_prediction(i, x0);
      beta.push_back(default_beta(r.mask));
      records.push_back(std::move(r));
    }
    {
      MaskRecord r;
      r.mask.bits.assign(l, 1);
      r.prediction = ref.probs;
      beta.push_back(1.0);
      records.push_back(std::move(r));
    }
    AttributionModel class_fit = fit_attribution(records, beta, cfg.evaluate.objective);
    std::vector<int> class_ids(l);
    std::iota(class_ids.begin(), class_ids.end(), 0);
    save_attribution_csv(dir / "attribution_class.csv", class_fit, class_ids, ref, tag);
    save_wmatrix_csv(dir / "wmatrix_class.csv", class_fit, tag);

    records.clear();
    beta.clear();
    const std::size_t mask_count = std::max(cfg.evaluate.masks, k);
    for (const PerturbationMask& m : sample_masks(k, mask_count, cfg.seed)) {
      const double t0 = now_seconds();
      ParamVector params = perturbed_model(spec, traj.final_params(), cluster_syn, m, ft);
      finetune_seconds += now_seconds() - t0;
      ++finetunes;
      MaskRecord r;
      r.mask = m;
      r.prediction = predict(spec, params, x0).vec();
      beta.push_back(default_beta(r.mask));
      records.push_back(std::move(r));
    }
    {
      MaskRecord r;
      r.mask.bits.assign(k, 1);
      r.prediction = ref.probs;
      beta.push_back(1.0);
      records.push_back(std::move(r));
    }
    AttributionModel cluster_fit = fit_attribution(records, beta, cfg.evaluate.objective);
    std::vector<int> cluster_classes(k);
    for (std::size_t i = 0; i < k; ++i) cluster_classes[i] = hier.cluster_class(i);
    save_attribution_csv(dir / "attribution_cluster.csv", cluster_fit, cluster_classes, ref, tag);
    save_wmatrix_csv(dir / "wmatrix_cluster.csv", cluster_fit, tag);
  }

  json timing{{"finetunes", finetunes},
              {"total_seconds", finetune_seconds},
              {"mean_finetune_seconds",
               finetunes ? finetune_seconds / static_cast<double>(finetunes) : 0.0}};
  {
    std::ofstream ts(dir / "timing.json");
    ts << timing.dump(2) << '\n';
  }
  finish_stage(dir, "evaluate", h, cfg.seed);
  note("[evaluate] " + std::to_string(nq) + " queries, " + std::to_string(finetunes) +
       " fine-tunes -> " + dir.string());
}

void cmd_oracle(const PipelineConfig& cfg, const PipelineIO& io) {
  LoadedData data = load_data(cfg);
  ModelSpec spec = build_spec(cfg, data.train);
  ClusterHierarchy hier = require_hierarchy(io, data.train.size());
  const std::size_t k = hier.num_clusters();

  std::vector<std::size_t> ids;
  switch (cfg.oracle.which) {
    case OracleConfig::Which::all:
      ids.resize(k);
      std::iota(ids.begin(), ids.end(), 0);
      break;
    case OracleConfig::Which::list:
      ids = cfg.oracle.ids;
      break;
    case OracleConfig::Which::located: {
      for (const LocatedRow& r : read_located(io.out / "eval" / "located.csv"))
        ids.push_back(r.cluster);
      break;
    }
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.empty()) throw ConfigError("oracle: no clusters selected");
  for (std::size_t id : ids)
    if (id >= k)
      throw ConfigError("oracle: cluster id " + std::to_string(id) + " out of range (K=" +
                        std::to_string(k) + ")");

  const std::uint64_t h = cfg.stage_hash("oracle");
  const fs::path dir = io.out / "oracle";
  if (!ensure_stage(dir, "oracle", h, io.force)) {
    note("[oracle] cache hit: " + dir.string());
    return;
  }
  TrainConfig tc = effective_train(cfg);
  std::vector<ParamVector> params(ids.size());
  std::vector<double> seconds(ids.size());
  parallel_for(ids.size(), io.workers, [&](std::size_t i) {
    const double t0 = now_seconds();
    params[i] = retrain_without(spec, data.train, hier, {ids[i]}, tc);
    seconds[i] = now_seconds() - t0;
  });
  double total = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    save_checkpoint(dir / ("cluster_" + std::to_string(ids[i]) + ".ckpt"), spec, params[i]);
    total += seconds[i];
  }
  json timing{{"count", ids.size()},
              {"total_seconds", total},
              {"mean_retrain_seconds", total / static_cast<double>(ids.size())}};
  {
    std::ofstream ts(dir / "timing.json");
    ts << timing.dump(2) << '\n';
  }
  finish_stage(dir, "oracle", h, cfg.seed);
  note("[oracle] " + std::to_string(ids.size()) + " exact retrains -> " + dir.string());
}

void cmd_diagnose(const PipelineConfig& cfg, const PipelineIO& io) {
  LoadedData data = load_data(cfg);
  if (data.test.size() == 0) throw ConfigError("diagnose: the dataset has no test split");
  ModelSpec spec = build_spec(cfg, data.train);
  Trajectory traj = require_trajectory(io, spec);
  ClusterHierarchy hier = require_hierarchy(io, data.train.size());
  Synset cluster_syn = require_synset(io, "cluster");
  const std::uint64_t h = cfg.stage_hash("diagnose");
  const fs::path dir = io.out / "diagnose";
  if (!ensure_stage(dir, "diagnose", h, io.force)) {
    note("[diagnose] cache hit: " + dir.string());
    return;
  }
  if (!(cfg.diagnose.validation_fraction > 0.0 && cfg.diagnose.validation_fraction <= 1.0))
    throw ConfigError("diagnose: validation_fraction must be in (0, 1]");
  const std::size_t val_n = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.diagnose.validation_fraction *
                                  static_cast<double>(data.test.size())));
  std::vector<std::size_t> val_idx =
      substream(cfg.seed, "diag.val").sample_without_replacement(data.test.size(), val_n);
  std::sort(val_idx.begin(), val_idx.end());
  LabeledDataset validation = subset(data.test, val_idx);

  FinetuneSettings ft = effective_finetune(cfg);
  QualityRanking ranking =
      rank_quality(spec, traj.final_params(), cluster_syn, hier, validation, ft);
  save_quality_csv(dir / "quality.csv", ranking, hier, artifact_tag(cfg, "diagnose"));

  SweepResult sweep =
      deletion_sweep(spec, data.train, hier, effective_train(cfg), ranking.order,
                     cfg.diagnose.percentages, cfg.seed, data.test, io.workers);
  save_sweep_csv(dir / "sweep.csv", sweep, artifact_tag(cfg, "diagnose"));
  {
    std::ofstream os(dir / "sweep.txt");
    os << "# " << artifact_tag(cfg, "diagnose") << '\n' << sweep_table(sweep);
  }

  // Fidelity against whichever exact-retrain oracles exist.
  std::vector<std::size_t> oracle_ids;
  for (std::size_t id = 0; id < hier.num_clusters(); ++id)
    if (fs::exists(io.out / "oracle" / ("cluster_" + std::to_string(id) + ".ckpt")))
      oracle_ids.push_back(id);
  if (!oracle_ids.empty()) {
    std::ofstream os(dir / "fidelity.csv");
    os << "# " << artifact_tag(cfg, "diagnose") << '\n';
    os << "cluster,param_l2,target_l2,agreement,epsilon\n";
    LabeledBatch heldout = data.test.full();
    for (std::size_t id : oracle_ids) {
      ParamVector oracle = load_checkpoint(
          io.out / "oracle" / ("cluster_" + std::to_string(id) + ".ckpt"), spec);
      PerturbationMask m;
      m.bits.assign(hier.num_clusters(), 1);
      m.bits[id] = 0;
      ParamVector finetuned = perturbed_model(spec, traj.final_params(), cluster_syn, m, ft);
      FidelityReport rep = unlearn_fidelity(spec, traj, cluster_syn, id, data.train, hier,
                                            finetuned, oracle, heldout, cfg.train.loss);
      char line[160];
      std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", id, rep.param_l2,
                    l2_distance(traj.final_params(), oracle), rep.agreement, rep.epsilon);
      os << line;
    }
    note("[diagnose] fidelity over " + std::to_string(oracle_ids.size()) + " oracle clusters");
  } else {
    note("[diagnose] no oracle checkpoints found; skipping the fidelity table");
  }
  finish_stage(dir, "diagnose", h, cfg.seed);
  note("[diagnose] quality + sweep -> " + dir.string());
}

void cmd_report(const PipelineConfig& cfg, const PipelineIO& io) {
  LoadedData data = load_data(cfg);
  ModelSpec spec = build_spec(cfg, data.train);
  Trajectory traj = require_trajectory(io, spec);
  ClusterHierarchy hier = require_hierarchy(io, data.train.size());
  std::vector<LocatedRow> located = read_located(io.out / "eval" / "located.csv");
  json eval_timing = read_json_file(io.out / "eval" / "timing.json",
                                    "evaluation timing (run the evaluate stage first)");
  json oracle_timing = read_json_file(io.out / "oracle" / "timing.json",
                                      "oracle timing (run the oracle stage first)");
  const std::uint64_t h = cfg.stage_hash("report");
  const fs::path dir = io.out / "report";
  if (!ensure_stage(dir, "report", h, io.force)) {
    note("[report] cache hit: " + dir.string());
    return;
  }

  // Exact-unlearn oracle parameters per located cluster.
  std::map<std::size_t, ParamVector> oracles;
  for (const LocatedRow& r : located)
    if (!oracles.count(r.cluster)) {
      const fs::path path = io.out / "oracle" / ("cluster_" + std::to_string(r.cluster) + ".ckpt");
      if (!fs::exists(path))
        throw MissingArtifactError("oracle checkpoint " + path.string() +
                                   "; run the oracle stage first");
      oracles.emplace(r.cluster, load_checkpoint(path, spec));
    }

  std::map<std::size_t, Reference> refs;  // per test sample
  auto ref_for = [&](std::size_t q) -> const Reference& {
    auto it = refs.find(q);
    if (it == refs.end()) {
      if (q >= data.test.size())
        throw ParseError("located sample index " + std::to_string(q) +
                         " is outside the test split");
      Reference ref{predict(spec, traj.final_params(), data.test.gather({q}).inputs).vec(),
                    data.test.labels[q]};
      it = refs.emplace(q, std::move(ref)).first;
    }
    return it->second;
  };

  struct Avg {
    double ddm = 0.0, random = 0.0;
  };
  std::map<std::string, Avg> table;
  for (const auto& [kind_name, kind] : kScoreNames) {
    double ddm_sum = 0.0, rnd_sum = 0.0;
    std::size_t ddm_n = 0, rnd_n = 0;
    for (const LocatedRow& r : located) {
      const bool use = (r.method == "ddm" && r.objective == kind_name) || r.method == "random";
      if (!use) continue;
      const Reference& ref = ref_for(r.sample);
      Tensor x = data.test.gather({r.sample}).inputs;
      std::vector<double> y_u = predict(spec, oracles.at(r.cluster), x).vec();
      const double d = prediction_distance(kind, y_u, ref);
      if (r.method == "ddm") {
        ddm_sum += d;
        ++ddm_n;
      } else {
        rnd_sum += d;
        ++rnd_n;
      }
    }
    if (ddm_n == 0 || rnd_n == 0)
      throw ParseError("located.csv lacks rows for objective " + kind_name);
    table[kind_name] = {ddm_sum / static_cast<double>(ddm_n),
                       rnd_sum / static_cast<double>(rnd_n)};
  }

  const double mean_ft = eval_timing.value("mean_finetune_seconds", 0.0);
  const double mean_rt = oracle_timing.value("mean_retrain_seconds", 0.0);
  const double speedup = mean_ft > 0.0 ? mean_rt / mean_ft : 0.0;

  {
    std::ofstream os(dir / "avg_dist.csv");
    os << "# " << artifact_tag(cfg, "report") << '\n';
    os << "objective,ddm,random,ratio\n";
    for (const auto& [name, avg] : table) {
      char line[160];
      std::snprintf(line, sizeof line, "%s,%.17g,%.17g,%.17g\n", name.c_str(), avg.ddm,
                    avg.random, avg.random != 0.0 ? avg.ddm / avg.random : 0.0);
      os << line;
    }
  }
  {
    std::ofstream os(dir / "timing.csv");
    os << "# " << artifact_tag(cfg, "report") << '\n';
    os << "mean_finetune_seconds,mean_retrain_seconds,speedup\n";
    char line[160];
    std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g\n", mean_ft, mean_rt, speedup);
    os << line;
  }
  if (fs::exists(io.out / "eval" / "attribution_class.csv")) {
    std::ifstream src(io.out / "eval" / "attribution_class.csv");
    std::ofstream dst(dir / "class_scores.csv");
    dst << src.rdbuf();
  }

  {
    std::ofstream os(dir / "report.txt");
    char line[240];
    os << "run " << hash_hex(h) << " seed " << cfg.seed << '\n';
    os << "clusters: " << hier.num_clusters() << " (" << hier.num_classes << " classes x "
       << hier.per_class << ")\n\n";
    os << "average distances between exact-unlearn and target predictions (x100)\n";
    std::snprintf(line, sizeof line, "%9s %12s %12s %8s\n", "objective", "located", "random",
                  "ratio");
    os << line;
    for (const auto& [name, avg] : table) {
      std::snprintf(line, sizeof line, "%9s %12.3f %12.3f %8.2f\n", name.c_str(),
                    100.0 * avg.ddm, 100.0 * avg.random,
                    avg.random != 0.0 ? avg.ddm / avg.random : 0.0);
      os << line;
    }
    const fs::path sweep_path = io.out / "diagnose" / "sweep.csv";
    if (fs::exists(sweep_path)) {
      os << "\ndeletion sweep (test accuracy, %)\n";
      std::snprintf(line, sizeof line, "%9s %9s %12s %12s\n", "removed%", "clusters",
                    "ranked_acc", "random_acc");
      os << line;
      std::ifstream is(sweep_path);
      std::string row;
      while (std::getline(is, row)) {
        if (row.empty() || row[0] == '#' || row.rfind("percent,", 0) == 0) continue;
        std::vector<std::string> f = split_csv_line(row);
        if (f.size() != 5) continue;
        std::snprintf(line, sizeof line, "%9.1f %9zu %12.2f %12.2f\n", std::stod(f[0]),
                      static_cast<std::size_t>(std::stoull(f[1])), std::stod(f[2]),
                      std::stod(f[3]));
        os << line;
      }
    }
    os << "\ntiming\n";
    std::snprintf(line, sizeof line, "mean fine-tune unlearning: %.4f s\n", mean_ft);
    os << line;
    std::snprintf(line, sizeof line, "mean exact retraining:     %.4f s\n", mean_rt);
    os << line;
    std::snprintf(line, sizeof line, "online speedup: %.1fx (threshold %.1fx): %s\n", speedup,
                  cfg.report.min_speedup, speedup >= cfg.report.min_speedup ? "met" : "NOT met");
    os << line;
  }
  finish_stage(dir, "report", h, cfg.seed);
  note("[report] -> " + (dir / "report.txt").string());
}

}  // namespace ddm
