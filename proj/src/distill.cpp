#include "ddm/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <utility>

#include "ddm/common.hpp"
#include "ddm/model_grad.hpp"

namespace ddm {

std::vector<DataPart> class_parts(const ClusterHierarchy& h) {
  std::vector<DataPart> parts;
  for (int l = 0; l < h.num_classes; ++l)
    parts.push_back({static_cast<std::size_t>(l), l, h.class_members[l]});
  return parts;
}

std::vector<DataPart> cluster_parts(const ClusterHierarchy& h) {
  std::vector<DataPart> parts;
  for (std::size_t c = 0; c < h.num_clusters(); ++c)
    parts.push_back({c, h.cluster_class(c), h.cluster_members[c]});
  return parts;
}

const SynsetEntry& Synset::by_part(std::size_t part_id) const {
  for (const SynsetEntry& e : entries)
    if (e.part_id == part_id) return e;
  throw MissingArtifactError("synset has no entry for part " + std::to_string(part_id));
}

Synset init_synset(const LabeledDataset& data, const std::vector<DataPart>& parts,
                   const DistillConfig& cfg) {
  if (parts.empty()) throw ConfigError("init_synset: empty partition");
  if (cfg.images_per_cluster < 1) throw ConfigError("init_synset: images_per_cluster must be >= 1");
  const std::size_t ipc = static_cast<std::size_t>(cfg.images_per_cluster);
  const std::size_t per = data.sample_dim();

  Synset syn;
  syn.images_per_cluster = cfg.images_per_cluster;
  syn.sample_shape.assign(data.images.shape().begin() + 1, data.images.shape().end());
  for (const DataPart& p : parts) {
    if (p.members.size() < ipc)
      throw ConfigError("part " + std::to_string(p.id) + " has " +
                        std::to_string(p.members.size()) + " members, fewer than images_per_cluster=" +
                        std::to_string(ipc));
    Rng rng = substream(cfg.seed, "synset.init", p.id);
    std::vector<std::size_t> picks = rng.sample_without_replacement(p.members.size(), ipc);
    std::vector<std::size_t> shape = {ipc};
    shape.insert(shape.end(), syn.sample_shape.begin(), syn.sample_shape.end());
    SynsetEntry e;
    e.part_id = p.id;
    e.class_label = p.class_label;
    e.pixels = Tensor(std::move(shape));
    for (std::size_t i = 0; i < ipc; ++i)
      std::copy_n(data.images.data() + p.members[picks[i]] * per, per, e.pixels.data() + i * per);
    e.labels.assign(ipc, p.class_label);
    syn.entries.push_back(std::move(e));
  }
  return syn;
}

namespace {

std::vector<int> valid_starts(const Trajectory& traj, int step_offset) {
  std::vector<int> starts;
  for (int t : traj.epochs)
    if (traj.has_epoch(t + step_offset)) starts.push_back(t);
  return starts;
}

void check_resume(const Synset& resume, const std::vector<DataPart>& parts,
                  const DistillConfig& cfg) {
  if (resume.entries.size() != parts.size() ||
      resume.images_per_cluster != cfg.images_per_cluster)
    throw ConfigError("resume synset does not match the partition or images_per_cluster");
  for (std::size_t i = 0; i < parts.size(); ++i)
    if (resume.entries[i].part_id != parts[i].id)
      throw ConfigError("resume synset entry order does not match the partition");
}

}  // namespace

Synset distill(const ModelSpec& spec, const Trajectory& traj, const LabeledDataset& data,
               const std::vector<DataPart>& parts, const DistillConfig& cfg,
               const Synset* resume) {
  spec.validate();
  if (cfg.steps < 0) throw ConfigError("distill: steps must be >= 0");
  if (cfg.step_offset < 1) throw ConfigError("distill: step offset must be >= 1");
  if (cfg.lr_img <= 0.0) throw ConfigError("distill: lr_img must be positive");

  const std::vector<int> starts = valid_starts(traj, cfg.step_offset);
  if (starts.empty())
    throw ConfigError("distill: no usable (t, t+" + std::to_string(cfg.step_offset) +
                      ") checkpoint pairs; the checkpoint stride must divide the step offset and "
                      "the trajectory must extend past it");

  const bool image_data = data.images.ndim() == 4;
  if (cfg.augment && !image_data)
    throw ConfigError("distill: augmentation requires image-shaped data");

  Synset syn;
  if (resume) {
    check_resume(*resume, parts, cfg);
    syn = *resume;
  } else {
    syn = init_synset(data, parts, cfg);
  }
  syn.trajectory_hash = traj.model_hash ^ fnv1a(std::to_string(traj.config.seed) + ":" +
                                                std::to_string(traj.final_epoch()));

  Rng t_rng = substream(cfg.seed, "distill.t");
  Rng aug_rng = substream(cfg.seed, "distill.aug");

  // Real-data gradients depend only on (checkpoint, part), not on the synset;
  // memoize them so repeated visits to a checkpoint skip the full-data pass.
  std::map<std::pair<int, std::size_t>, ParamVector> target_cache;

  for (int step = 0; step < cfg.steps; ++step) {
    const int t = starts[t_rng.index(starts.size())];
    const ParamVector& theta_real = traj.at_epoch(t);
    const ParamVector& theta_eval =
        cfg.mode == DistillConfig::Mode::reverse ? traj.at_epoch(t + cfg.step_offset) : theta_real;

    for (std::size_t e = 0; e < parts.size(); ++e) {
      SynsetEntry& entry = syn.entries[e];
      auto cached = target_cache.find({t, e});
      if (cached == target_cache.end()) {
        LabeledBatch real = data.gather(parts[e].members);
        ParamVector g = grad_params(spec, theta_real, real, cfg.loss).grad;
        if (cfg.mode == DistillConfig::Mode::forward)
          for (double& x : g.data) x = -x;  // net effect: match +grad instead of -grad
        cached = target_cache.emplace(std::make_pair(t, e), std::move(g)).first;
      }
      const ParamVector& target = cached->second;

      std::function<Var(const Var&)> transform;
      if (cfg.augment) {
        const int dy = static_cast<int>(aug_rng.index(5)) - 2;
        const int dx = static_cast<int>(aug_rng.index(5)) - 2;
        const bool fl = cfg.hflip && aug_rng.index(2) == 1;
        transform = [dy, dx, fl](const Var& v) {
          Var s = shift2d(v, dy, dx);
          return fl ? flip_h(s) : s;
        };
      }

      LabeledBatch sb{entry.pixels, entry.labels};
      SyntheticGrad sg =
          grad_synthetic(spec, theta_eval, sb, target, cfg.dist, cfg.loss, transform);
      syn.degenerate_reports += sg.degenerate_segments.size();
      for (std::size_t i = 0; i < entry.pixels.numel(); ++i)
        entry.pixels[i] =
            std::clamp(entry.pixels[i] - cfg.lr_img * sg.pixel_grad[i], 0.0, 1.0);
    }
  }
  return syn;
}

double matching_loss(const ModelSpec& spec, const Trajectory& traj, const LabeledDataset& data,
                     const std::vector<DataPart>& parts, const Synset& syn,
                     const DistillConfig& cfg) {
  const std::vector<int> starts = valid_starts(traj, cfg.step_offset);
  if (starts.empty()) throw ConfigError("matching_loss: no usable checkpoint pairs");
  if (syn.entries.size() != parts.size())
    throw ConfigError("matching_loss: synset does not match the partition");

  double total = 0.0;
  std::size_t count = 0;
  for (int t : starts) {
    const ParamVector& theta_real = traj.at_epoch(t);
    const ParamVector& theta_eval =
        cfg.mode == DistillConfig::Mode::reverse ? traj.at_epoch(t + cfg.step_offset) : theta_real;
    for (std::size_t e = 0; e < parts.size(); ++e) {
      const SynsetEntry& entry = syn.entries[e];
      LabeledBatch real = data.gather(parts[e].members);
      ParamVector target = grad_params(spec, theta_real, real, cfg.loss).grad;
      if (cfg.mode == DistillConfig::Mode::forward)
        for (double& x : target.data) x = -x;
      LabeledBatch sb{entry.pixels, entry.labels};
      SyntheticGrad sg = grad_synthetic(spec, theta_eval, sb, target, cfg.dist, cfg.loss);
      total += sg.matching_loss;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

namespace {
constexpr char kSynMagic[8] = {'D', 'D', 'M', 'S', 'Y', 'N', '0', '1'};
}

void save_synset(const std::filesystem::path& path, const Synset& syn) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open synset for writing: " + path.string());
  os.write(kSynMagic, 8);
  write_u64(os, syn.trajectory_hash);
  write_u64(os, syn.config_hash);
  write_u32(os, static_cast<std::uint32_t>(syn.entries.size()));
  write_u32(os, static_cast<std::uint32_t>(syn.images_per_cluster));
  write_u32(os, static_cast<std::uint32_t>(syn.sample_shape.size()));
  for (std::size_t d : syn.sample_shape) write_u64(os, d);
  for (const SynsetEntry& e : syn.entries) {
    write_u64(os, e.part_id);
    write_u32(os, static_cast<std::uint32_t>(e.class_label));
    for (int l : e.labels) write_u32(os, static_cast<std::uint32_t>(l));
    for (double v : e.pixels.vec()) write_f64(os, v);
  }
  if (!os) throw ParseError("short write on synset: " + path.string());
}

Synset load_synset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("synset not found: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kSynMagic, 8) != 0)
    throw ParseError("not a synset file: " + path.string());
  Synset syn;
  syn.trajectory_hash = read_u64(is);
  syn.config_hash = read_u64(is);
  const std::uint32_t k = read_u32(is);
  syn.images_per_cluster = static_cast<int>(read_u32(is));
  const std::uint32_t nd = read_u32(is);
  syn.sample_shape.resize(nd);
  for (std::uint32_t i = 0; i < nd; ++i) syn.sample_shape[i] = read_u64(is);
  const std::size_t per = Tensor::numel_of(syn.sample_shape);
  const std::size_t ipc = static_cast<std::size_t>(syn.images_per_cluster);
  for (std::uint32_t i = 0; i < k; ++i) {
    SynsetEntry e;
    e.part_id = read_u64(is);
    e.class_label = static_cast<int>(read_u32(is));
    e.labels.resize(ipc);
    for (std::size_t j = 0; j < ipc; ++j) e.labels[j] = static_cast<int>(read_u32(is));
    std::vector<std::size_t> shape = {ipc};
    shape.insert(shape.end(), syn.sample_shape.begin(), syn.sample_shape.end());
    e.pixels = Tensor(std::move(shape));
    for (std::size_t j = 0; j < ipc * per; ++j) e.pixels[j] = read_f64(is);
    syn.entries.push_back(std::move(e));
  }
  return syn;
}

void export_synset_images(const Synset& syn, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::size_t c = 1, h = 1, w = 1;
  if (syn.sample_shape.size() == 3) {
    c = syn.sample_shape[0];
    h = syn.sample_shape[1];
    w = syn.sample_shape[2];
  } else if (syn.sample_shape.size() == 1) {
    w = syn.sample_shape[0];
  } else {
    throw ConfigError("export_synset_images: unsupported sample shape");
  }
  if (c != 1 && c != 3)
    throw ConfigError("export_synset_images: only 1- or 3-channel images supported");

  for (const SynsetEntry& e : syn.entries) {
    const std::size_t per = c * h * w;
    for (std::size_t i = 0; i < e.labels.size(); ++i) {
      std::string name = "class" + std::to_string(e.class_label) + "_cluster" +
                         std::to_string(e.part_id);
      if (e.labels.size() > 1) name += "_s" + std::to_string(i);
      name += c == 3 ? ".ppm" : ".pgm";
      std::ofstream os(dir / name, std::ios::binary);
      if (!os) throw ParseError("cannot write image: " + (dir / name).string());
      os << (c == 3 ? "P6" : "P5") << "\n# synset part " << e.part_id << " class "
         << e.class_label << "\n" << w << ' ' << h << "\n255\n";
      const double* px = e.pixels.data() + i * per;
      // Channel-interleave for PPM; PGM is the single channel as-is.
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double v = px[ch * h * w + y * w + x];
            os.put(static_cast<char>(static_cast<int>(std::lround(v * 255.0))));
          }
    }
  }
}

LabeledBatch synset_batch(const Synset& syn, const std::vector<std::size_t>& part_ids) {
  if (part_ids.empty()) throw ConfigError("synset_batch: no parts selected");
  const std::size_t per = Tensor::numel_of(syn.sample_shape);
  const std::size_t ipc = static_cast<std::size_t>(syn.images_per_cluster);
  std::vector<std::size_t> shape = {part_ids.size() * ipc};
  shape.insert(shape.end(), syn.sample_shape.begin(), syn.sample_shape.end());
  LabeledBatch b;
  b.inputs = Tensor(std::move(shape));
  std::size_t row = 0;
  for (std::size_t id : part_ids) {
    const SynsetEntry& e = syn.by_part(id);
    std::copy_n(e.pixels.data(), ipc * per, b.inputs.data() + row * per);
    b.labels.insert(b.labels.end(), e.labels.begin(), e.labels.end());
    row += ipc;
  }
  return b;
}

}  // namespace ddm
