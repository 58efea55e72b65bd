#include "ddm/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "ddm/common.hpp"
#include "ddm/model_grad.hpp"
#include "ddm/rng.hpp"

namespace ddm {

namespace {

double clamped_ce(const double* probs, int label) {
  return -std::log(std::clamp(probs[label], 1e-12, 1.0));
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

QualityRanking rank_quality(const ModelSpec& spec, const ParamVector& final_params,
                            const Synset& cluster_synset, const ClusterHierarchy& hierarchy,
                            const LabeledDataset& validation, const FinetuneSettings& ft) {
  if (validation.size() == 0) throw ConfigError("quality ranking needs a validation set");
  const std::size_t k = hierarchy.num_clusters();
  if (cluster_synset.entries.size() != k)
    throw ConfigError("quality ranking: synset does not cover every cluster");
  const std::size_t v = validation.size();
  const std::size_t l = static_cast<std::size_t>(spec.num_classes);

  Tensor base = predict(spec, final_params, validation.images);  // [v, l]
  double base_total = 0.0;
  for (std::size_t x = 0; x < v; ++x) base_total += clamped_ce(&base[x * l], validation.labels[x]);

  std::vector<MaskRecord> records;
  std::vector<double> beta;
  for (std::size_t i = 0; i < k; ++i) {
    PerturbationMask m;
    m.bits.assign(k, 1);
    m.bits[i] = 0;
    ParamVector deleted = perturbed_model(spec, final_params, cluster_synset, m, ft);
    Tensor probs = predict(spec, deleted, validation.images);
    MaskRecord r;
    r.mask = std::move(m);
    r.prediction = probs.vec();
    beta.push_back(1.0);
    records.push_back(std::move(r));
  }
  {
    MaskRecord r;
    r.mask.bits.assign(k, 1);
    r.prediction = base.vec();
    beta.push_back(1.0);
    records.push_back(std::move(r));
  }
  AttributionModel fit = fit_attribution(records, beta);

  QualityRanking out;
  out.baseline_loss = base_total / static_cast<double>(v);
  out.scores.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> pred = predicted_deletion(fit, i);  // stacked [v * l]
    double total = 0.0;
    for (std::size_t x = 0; x < v; ++x) total += clamped_ce(&pred[x * l], validation.labels[x]);
    out.scores[i] = total - base_total;
  }
  out.order.resize(k);
  std::iota(out.order.begin(), out.order.end(), 0);
  std::stable_sort(out.order.begin(), out.order.end(),
                   [&](std::size_t a, std::size_t b) { return out.scores[a] < out.scores[b]; });
  return out;
}

void save_quality_csv(const std::filesystem::path& path, const QualityRanking& ranking,
                      const ClusterHierarchy& hierarchy, const std::string& header_comment) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot write quality CSV: " + path.string());
  if (!header_comment.empty()) os << "# " << header_comment << '\n';
  os << "# baseline_loss=" << fmt(ranking.baseline_loss) << '\n';
  os << "cluster_id,class,score,rank\n";
  std::vector<std::size_t> rank_of(ranking.order.size());
  for (std::size_t r = 0; r < ranking.order.size(); ++r) rank_of[ranking.order[r]] = r;
  for (std::size_t i = 0; i < ranking.scores.size(); ++i)
    os << i << ',' << hierarchy.cluster_class(i) << ',' << fmt(ranking.scores[i]) << ','
       << rank_of[i] << '\n';
}

SweepResult deletion_sweep(const ModelSpec& spec, const LabeledDataset& train_data,
                           const ClusterHierarchy& hierarchy, const TrainConfig& cfg,
                           const std::vector<std::size_t>& worst_first,
                           const std::vector<double>& percentages, std::uint64_t seed,
                           const LabeledDataset& test_data, int workers) {
  const std::size_t k = hierarchy.num_clusters();
  if (worst_first.size() != k)
    throw ConfigError("deletion sweep: ranking must list every cluster exactly once");
  {
    std::vector<std::uint8_t> seen(k, 0);
    for (std::size_t id : worst_first) {
      if (id >= k || seen[id])
        throw ConfigError("deletion sweep: ranking must list every cluster exactly once");
      seen[id] = 1;
    }
  }
  if (test_data.size() == 0) throw ConfigError("deletion sweep: empty test set");

  struct Job {
    std::vector<std::size_t> excluded;  // sorted
    ParamVector params;
  };
  std::map<std::vector<std::size_t>, std::size_t> job_of;
  std::vector<Job> jobs;
  auto job_for = [&](std::vector<std::size_t> ids) {
    std::sort(ids.begin(), ids.end());
    auto it = job_of.find(ids);
    if (it == job_of.end()) {
      it = job_of.emplace(ids, jobs.size()).first;
      jobs.push_back({ids, {}});
    }
    return it->second;
  };

  const std::size_t baseline_job = job_for({});
  struct RowPlan {
    double percent;
    std::size_t removed;
    std::size_t ranked_job;
    std::size_t random_job;
  };
  std::vector<RowPlan> plan;
  for (std::size_t r = 0; r < percentages.size(); ++r) {
    const double p = percentages[r];
    if (!(p >= 0.0) || p >= 100.0)
      throw ConfigError("deletion sweep: percentage must be in [0, 100)");
    if (p == 0.0) {
      plan.push_back({p, 0, baseline_job, baseline_job});
      continue;
    }
    std::size_t n_rm = static_cast<std::size_t>(
        std::llround(p / 100.0 * static_cast<double>(k)));
    n_rm = std::max<std::size_t>(1, n_rm);
    if (n_rm >= k)
      throw ConfigError("deletion sweep: removing every cluster leaves nothing to train on");
    std::vector<std::size_t> ranked(worst_first.begin(),
                                    worst_first.begin() + static_cast<std::ptrdiff_t>(n_rm));
    Rng rng = substream(seed, "sweep.random", r);
    std::vector<std::size_t> random = rng.sample_without_replacement(k, n_rm);
    plan.push_back({p, n_rm, job_for(std::move(ranked)), job_for(std::move(random))});
  }

  parallel_for(jobs.size(), workers, [&](std::size_t j) {
    jobs[j].params = retrain_without(spec, train_data, hierarchy, jobs[j].excluded, cfg);
  });

  LabeledBatch test = test_data.full();
  std::vector<double> acc(jobs.size());
  for (std::size_t j = 0; j < jobs.size(); ++j)
    acc[j] = 100.0 * accuracy(spec, jobs[j].params, test);

  SweepResult out;
  out.baseline_acc = acc[baseline_job];
  for (const RowPlan& rp : plan)
    out.rows.push_back({rp.percent, rp.removed, acc[rp.ranked_job], acc[rp.random_job]});
  return out;
}

void save_sweep_csv(const std::filesystem::path& path, const SweepResult& sweep,
                    const std::string& header_comment) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot write sweep CSV: " + path.string());
  if (!header_comment.empty()) os << "# " << header_comment << '\n';
  os << "percent,removed,acc_ranked,acc_random,baseline_acc\n";
  for (const SweepRow& r : sweep.rows)
    os << fmt(r.percent) << ',' << r.removed << ',' << fmt(r.acc_ranked) << ','
       << fmt(r.acc_random) << ',' << fmt(sweep.baseline_acc) << '\n';
}

std::string sweep_table(const SweepResult& sweep) {
  char line[160];
  std::string out;
  std::snprintf(line, sizeof line, "%9s %9s %12s %12s\n", "removed%", "clusters", "ranked_acc",
                "random_acc");
  out += line;
  for (const SweepRow& r : sweep.rows) {
    std::snprintf(line, sizeof line, "%9.1f %9zu %12.2f %12.2f\n", r.percent, r.removed,
                  r.acc_ranked, r.acc_random);
    out += line;
  }
  std::snprintf(line, sizeof line, "baseline accuracy: %.2f\n", sweep.baseline_acc);
  out += line;
  return out;
}

NoiseReport inject_noise(const LabeledDataset& data, double fraction, double norm,
                         std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ConfigError("inject_noise: fraction must be in (0, 1]");
  if (!(norm > 0.0)) throw ConfigError("inject_noise: norm must be positive");
  data.validate();
  const std::size_t n = data.size();
  const std::size_t d = data.sample_dim();
  const std::size_t n_corrupt =
      std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));

  NoiseReport out;
  out.corrupted = data;
  Rng pick = substream(seed, "noise");
  out.indices = pick.sample_without_replacement(n, n_corrupt);
  std::sort(out.indices.begin(), out.indices.end());
  out.deltas = Tensor({n_corrupt, d});

  for (std::size_t r = 0; r < n_corrupt; ++r) {
    const std::size_t idx = out.indices[r];
    Rng rng = substream(seed, "noise.delta", idx);
    double* x = out.corrupted.images.data() + idx * d;
    double* delta = out.deltas.data() + r * d;

    std::size_t star = 0;
    double best_room = -1.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double room = std::max(x[j], 1.0 - x[j]);
      if (room > best_room) {
        best_room = room;
        star = j;
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      double moved;
      if (j == star) {
        // one guaranteed move of exactly min(norm, room) toward the far end
        const double mag = std::min(norm, best_room);
        moved = (1.0 - x[j] >= x[j]) ? x[j] + mag : x[j] - mag;
      } else {
        moved = std::clamp(x[j] + rng.uniform(-norm, norm), 0.0, 1.0);
      }
      delta[j] = moved - x[j];
      x[j] = moved;
      out.max_abs_delta = std::max(out.max_abs_delta, std::abs(delta[j]));
    }
  }
  return out;
}

double epsilon_residual(const ModelSpec& spec, const Trajectory& traj, const SynsetEntry& entry,
                        const LabeledBatch& real_members, LossKind loss) {
  const int tau = traj.final_epoch();
  LabeledBatch syn_batch{entry.pixels, entry.labels};
  double sum = 0.0;
  bool any = false;
  for (int t : traj.epochs) {
    const int mirror = tau - t;
    if (mirror < 0 || !traj.has_epoch(mirror)) continue;
    any = true;
    GradResult g_syn = grad_params(spec, traj.at_epoch(mirror), syn_batch, loss);
    GradResult g_real = grad_params(spec, traj.at_epoch(t), real_members, loss);
    double norm2 = 0.0;
    for (std::size_t i = 0; i < g_syn.grad.data.size(); ++i) {
      const double s = g_syn.grad.data[i] + g_real.grad.data[i];
      norm2 += s * s;
    }
    sum += std::sqrt(norm2);
  }
  if (!any) throw ConfigError("epsilon residual: no mirrored checkpoint pairs available");
  return sum;
}

double agreement_rate(const ModelSpec& spec, const ParamVector& a, const ParamVector& b,
                      const LabeledBatch& data) {
  const std::size_t n = data.labels.size();
  if (n == 0) throw ConfigError("agreement rate: empty batch");
  const std::size_t l = static_cast<std::size_t>(spec.num_classes);
  Tensor pa = predict(spec, a, data.inputs);
  Tensor pb = predict(spec, b, data.inputs);
  std::size_t same = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t c = 1; c < l; ++c) {
      if (pa[i * l + c] > pa[i * l + ia]) ia = c;
      if (pb[i * l + c] > pb[i * l + ib]) ib = c;
    }
    if (ia == ib) ++same;
  }
  return static_cast<double>(same) / static_cast<double>(n);
}

FidelityReport unlearn_fidelity(const ModelSpec& spec, const Trajectory& traj, const Synset& syn,
                                std::size_t cluster_id, const LabeledDataset& train_data,
                                const ClusterHierarchy& hierarchy, const ParamVector& finetuned,
                                const ParamVector& oracle, const LabeledBatch& heldout,
                                LossKind loss) {
  if (cluster_id >= hierarchy.num_clusters())
    throw ConfigError("unlearn fidelity: cluster id out of range");
  FidelityReport out;
  out.cluster_id = cluster_id;
  out.param_l2 = l2_distance(finetuned, oracle);
  out.agreement = agreement_rate(spec, finetuned, oracle, heldout);
  LabeledBatch members = train_data.gather(hierarchy.cluster_members[cluster_id]);
  out.epsilon = epsilon_residual(spec, traj, syn.by_part(cluster_id), members, loss);
  return out;
}

}  // namespace ddm
