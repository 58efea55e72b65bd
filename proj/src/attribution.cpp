#include "ddm/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "ddm/common.hpp"
#include "ddm/rng.hpp"
#include "ddm/trainer.hpp"

namespace ddm {

std::size_t PerturbationMask::zeros() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 0));
}

double default_beta(const PerturbationMask& m) {
  const std::size_t z = m.zeros();
  return z <= 1 ? 1.0 : 1.0 / static_cast<double>(z);
}

namespace {

// Dense design matrix [deletion indicators | intercept].
Tensor design_matrix(const std::vector<PerturbationMask>& masks) {
  const std::size_t n = masks.size(), k = masks[0].bits.size();
  Tensor x({n, k + 1});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) x[i * (k + 1) + j] = masks[i].bits[j] ? 0.0 : 1.0;
    x[i * (k + 1) + k] = 1.0;
  }
  return x;
}

// In-place Householder QR of a (n x m, n >= m); b (n x l) becomes Q^T b.
// Returns false when R is rank-deficient at the given relative tolerance.
bool householder_qr(Tensor& a, Tensor& b, double rel_tol = 1e-12) {
  const std::size_t n = a.dim(0), m = a.dim(1), l = b.numel() ? b.dim(1) : 0;
  std::vector<double> v(n);
  for (std::size_t j = 0; j < m; ++j) {
    double norm = 0.0;
    for (std::size_t i = j; i < n; ++i) norm += a[i * m + j] * a[i * m + j];
    norm = std::sqrt(norm);
    if (norm == 0.0) return false;
    const double alpha = a[j * m + j] >= 0 ? -norm : norm;
    double vnorm2 = 0.0;
    for (std::size_t i = j; i < n; ++i) {
      v[i] = a[i * m + j] - (i == j ? alpha : 0.0);
      vnorm2 += v[i] * v[i];
    }
    if (vnorm2 > 0.0) {
      for (std::size_t c = j; c < m; ++c) {
        double dot = 0.0;
        for (std::size_t i = j; i < n; ++i) dot += v[i] * a[i * m + c];
        const double f = 2.0 * dot / vnorm2;
        for (std::size_t i = j; i < n; ++i) a[i * m + c] -= f * v[i];
      }
      for (std::size_t c = 0; c < l; ++c) {
        double dot = 0.0;
        for (std::size_t i = j; i < n; ++i) dot += v[i] * b[i * l + c];
        const double f = 2.0 * dot / vnorm2;
        for (std::size_t i = j; i < n; ++i) b[i * l + c] -= f * v[i];
      }
    }
  }
  double max_diag = 0.0;
  for (std::size_t j = 0; j < m; ++j) max_diag = std::max(max_diag, std::abs(a[j * m + j]));
  for (std::size_t j = 0; j < m; ++j)
    if (std::abs(a[j * m + j]) < rel_tol * max_diag) return false;
  return true;
}

bool design_full_rank(const std::vector<PerturbationMask>& masks) {
  Tensor x = design_matrix(masks);
  if (x.dim(0) < x.dim(1)) return false;
  Tensor empty;
  return householder_qr(x, empty, 1e-10);
}

}  // namespace

std::vector<PerturbationMask> sample_masks(std::size_t k, std::size_t count, std::uint64_t seed) {
  if (k < 1) throw ConfigError("sample_masks: need at least one part");
  if (count < k)
    throw ConfigError("sample_masks: count must cover the " + std::to_string(k) +
                      " single-deletion masks");
  std::vector<PerturbationMask> masks;
  for (std::size_t i = 0; i < k; ++i) {
    PerturbationMask m;
    m.bits.assign(k, 1);
    m.bits[i] = 0;
    masks.push_back(std::move(m));
  }

  Rng rng = substream(seed, "masks");
  const std::size_t max_zeros = std::min<std::size_t>(3, k - 1);
  auto draw_tail = [&] {
    masks.resize(k);
    for (std::size_t i = k; i < count; ++i) {
      PerturbationMask m;
      m.bits.assign(k, 1);
      const std::size_t z = max_zeros >= 1 ? 1 + rng.index(max_zeros) : 0;
      for (std::size_t pos : rng.sample_without_replacement(k, z)) m.bits[pos] = 0;
      masks.push_back(std::move(m));
    }
  };
  draw_tail();

  // With the intercept, K+1 coefficients are determinable only from K+1
  // records; re-draw the random tail if the design degenerates.
  if (count >= k + 1) {
    int attempts = 0;
    while (!design_full_rank(masks)) {
      if (++attempts > 32)
        throw ConfigError("sample_masks: could not draw a full-rank mask design");
      draw_tail();
    }
  }
  return masks;
}

AttributionModel fit_attribution(const std::vector<MaskRecord>& records,
                                 const std::vector<double>& beta, FitObjective obj) {
  if (records.empty()) throw ConfigError("fit_attribution: no records");
  const std::size_t n = records.size();
  const std::size_t k = records[0].mask.bits.size();
  const std::size_t l = records[0].prediction.size();
  if (l < 1) throw ConfigError("fit_attribution: empty predictions");
  if (beta.size() != n) throw ConfigError("fit_attribution: weight count does not match records");
  if (n < k + 1)
    throw ConfigError("fit_attribution: need at least " + std::to_string(k + 1) +
                      " records to determine " + std::to_string(k) + " parts plus intercept");
  for (const MaskRecord& r : records) {
    if (r.mask.bits.size() != k || r.prediction.size() != l)
      throw ConfigError("fit_attribution: ragged records");
    if (r.mask.zeros() == r.mask.bits.size())
      throw ConfigError("fit_attribution: all-zeros mask is not a valid perturbation");
    for (double p : r.prediction)
      if (!std::isfinite(p)) throw ConfigError("fit_attribution: non-finite prediction");
  }
  for (double b : beta)
    if (!(b > 0.0)) throw ConfigError("fit_attribution: weights must be positive");

  std::vector<PerturbationMask> masks;
  for (const MaskRecord& r : records) masks.push_back(r.mask);

  AttributionModel model;
  model.objective = obj;
  model.weights = Tensor({k, l});
  model.bias.assign(l, 0.0);
  const std::size_t m = k + 1;

  if (obj == FitObjective::l2) {
    Tensor a = design_matrix(masks);
    Tensor y({n, l});
    for (std::size_t i = 0; i < n; ++i) {
      const double s = std::sqrt(beta[i]);
      for (std::size_t j = 0; j < m; ++j) a[i * m + j] *= s;
      for (std::size_t c = 0; c < l; ++c) y[i * l + c] = s * records[i].prediction[c];
    }
    if (!householder_qr(a, y))
      throw ConfigError("fit_attribution: mask design is rank-deficient");
    // Back-substitution per output column.
    Tensor theta({m, l});
    for (std::size_t c = 0; c < l; ++c)
      for (std::size_t j = m; j-- > 0;) {
        double s = y[j * l + c];
        for (std::size_t p = j + 1; p < m; ++p) s -= a[j * m + p] * theta[p * l + c];
        theta[j * l + c] = s / a[j * m + j];
      }
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < l; ++c) model.weights[j * l + c] = theta[j * l + c];
    for (std::size_t c = 0; c < l; ++c) model.bias[c] = theta[k * l + c];
    double res = 0.0;
    for (std::size_t i = m; i < n; ++i)
      for (std::size_t c = 0; c < l; ++c) res += y[i * l + c] * y[i * l + c];
    model.fit_residual = res;
    return model;
  }

  // Smooth non-L2 objectives: softmax-composed model, deterministic gradient
  // descent from zero. KL and cross-entropy share the same gradient.
  {
    Tensor probe = design_matrix(masks);
    Tensor empty;
    if (!householder_qr(probe, empty, 1e-10))
      throw ConfigError("fit_attribution: mask design is rank-deficient");
  }
  model.softmax_output = true;
  Tensor x = design_matrix(masks);
  Tensor theta({m, l});
  double lip = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) row += x[i * m + j] * x[i * m + j];
    lip += 0.5 * beta[i] * row;
  }
  const double lr = lip > 0 ? 1.0 / lip : 1.0;
  std::vector<double> z(l), p(l);
  Tensor grad({m, l});
  double loss = 0.0;
  for (int iter = 0; iter < 2000; ++iter) {
    std::fill(grad.vec().begin(), grad.vec().end(), 0.0);
    loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < l; ++c) {
        z[c] = 0.0;
        for (std::size_t j = 0; j < m; ++j) z[c] += theta[j * l + c] * x[i * m + j];
      }
      double mx = z[0];
      for (std::size_t c = 1; c < l; ++c) mx = std::max(mx, z[c]);
      double sum = 0.0;
      for (std::size_t c = 0; c < l; ++c) {
        p[c] = std::exp(z[c] - mx);
        sum += p[c];
      }
      for (std::size_t c = 0; c < l; ++c) p[c] /= sum;
      for (std::size_t c = 0; c < l; ++c) {
        const double target = records[i].prediction[c];
        if (target > 0.0) {
          loss -= beta[i] * target * std::log(std::max(p[c], 1e-300));
          if (obj == FitObjective::kl) loss += beta[i] * target * std::log(target);
        }
        const double diff = beta[i] * (p[c] - target);
        for (std::size_t j = 0; j < m; ++j) grad[j * l + c] += diff * x[i * m + j];
      }
    }
    double gmax = 0.0;
    for (double gv : grad.vec()) gmax = std::max(gmax, std::abs(gv));
    if (gmax < 1e-12) break;
    for (std::size_t j = 0; j < m * l; ++j) theta[j] -= lr * grad[j];
  }
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t c = 0; c < l; ++c) model.weights[j * l + c] = theta[j * l + c];
  for (std::size_t c = 0; c < l; ++c) model.bias[c] = theta[k * l + c];
  model.fit_residual = loss;
  return model;
}

std::vector<double> predicted_deletion(const AttributionModel& m, std::size_t k) {
  const std::size_t parts = m.weights.dim(0), l = m.weights.dim(1);
  if (k >= parts) throw ConfigError("predicted_deletion: part index out of range");
  std::vector<double> out(l);
  for (std::size_t c = 0; c < l; ++c) out[c] = m.weights[k * l + c] + m.bias[c];
  if (m.softmax_output) {
    double mx = out[0];
    for (double v : out) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : out) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : out) v /= sum;
  }
  return out;
}

double prediction_distance(ScoreKind kind, const std::vector<double>& pred, const Reference& ref) {
  switch (kind) {
    case ScoreKind::dist1_l2:
    case ScoreKind::dist3_inverse: {
      if (ref.probs.size() != pred.size())
        throw ConfigError("prediction distance needs a reference prediction of matching size");
      double s = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - ref.probs[i];
        s += d * d;
      }
      return kind == ScoreKind::dist1_l2 ? s : 1.0 / (1.0 + s);
    }
    case ScoreKind::dist2_ce: {
      if (ref.label < 0 || static_cast<std::size_t>(ref.label) >= pred.size())
        throw ConfigError("prediction distance needs a ground-truth label for cross-entropy");
      return -std::log(std::clamp(pred[ref.label], 1e-12, 1.0));
    }
    case ScoreKind::kl: {
      if (ref.probs.size() != pred.size())
        throw ConfigError("prediction distance needs a reference prediction of matching size");
      // Clamp and renormalize the candidate so it is a distribution.
      std::vector<double> q(pred.size());
      double sum = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        q[i] = std::max(pred[i], 1e-12);
        sum += q[i];
      }
      double s = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i)
        if (ref.probs[i] > 0.0) s += ref.probs[i] * std::log(ref.probs[i] * sum / q[i]);
      return s;
    }
  }
  throw ConfigError("unknown score kind");
}

std::vector<double> influence_scores(const AttributionModel& m, ScoreKind kind,
                                     const Reference& ref) {
  const std::size_t parts = m.weights.dim(0);
  std::vector<double> scores(parts);
  for (std::size_t k = 0; k < parts; ++k)
    scores[k] = prediction_distance(kind, predicted_deletion(m, k), ref);
  return scores;
}

ParamVector perturbed_model(const ModelSpec& spec, const ParamVector& final_params,
                            const Synset& syn, const PerturbationMask& mask,
                            const FinetuneSettings& ft) {
  if (mask.bits.size() != syn.entries.size())
    throw ConfigError("perturbed_model: mask size does not match synset");
  std::vector<std::size_t> deleted;
  for (std::size_t i = 0; i < mask.bits.size(); ++i)
    if (!mask.bits[i]) deleted.push_back(syn.entries[i].part_id);
  if (deleted.empty()) return final_params;  // nothing rewound
  LabeledBatch batch = synset_batch(syn, deleted);
  return finetune(spec, final_params, batch, ft.epochs, ft.lr, ft.loss);
}

Locator::Locator(const ModelSpec& spec, const ParamVector& final_params,
                 const Synset& class_synset, const Synset& cluster_synset,
                 const ClusterHierarchy& hierarchy, const FinetuneSettings& ft)
    : spec_(spec), final_params_(final_params), class_synset_(class_synset),
      cluster_synset_(cluster_synset), hierarchy_(hierarchy), ft_(ft) {
  if (class_synset_.entries.size() != static_cast<std::size_t>(hierarchy_.num_classes))
    throw ConfigError("locator: class synset does not cover every class");
  if (cluster_synset_.entries.size() != hierarchy_.num_clusters())
    throw ConfigError("locator: cluster synset does not cover every cluster");
  for (std::size_t i = 0; i < class_synset_.entries.size(); ++i)
    if (class_synset_.entries[i].part_id != i)
      throw ConfigError("locator: class synset entries out of order");
  for (std::size_t i = 0; i < cluster_synset_.entries.size(); ++i)
    if (cluster_synset_.entries[i].part_id != i)
      throw ConfigError("locator: cluster synset entries out of order");
}

const ParamVector& Locator::class_model(std::size_t class_id) {
  const auto key = std::make_pair(0, class_id);
  auto it = cache_.find(key);
  if (it == cache_.end()) {
    PerturbationMask m;
    m.bits.assign(class_synset_.entries.size(), 1);
    m.bits[class_id] = 0;
    ++finetunes_;
    it = cache_.emplace(key, perturbed_model(spec_, final_params_, class_synset_, m, ft_)).first;
  }
  return it->second;
}

const ParamVector& Locator::cluster_model(std::size_t cluster_id) {
  const auto key = std::make_pair(1, cluster_id);
  auto it = cache_.find(key);
  if (it == cache_.end()) {
    PerturbationMask m;
    m.bits.assign(cluster_synset_.entries.size(), 1);
    m.bits[cluster_id] = 0;
    ++finetunes_;
    it = cache_.emplace(key, perturbed_model(spec_, final_params_, cluster_synset_, m, ft_)).first;
  }
  return it->second;
}

namespace {

std::vector<double> predict_one(const ModelSpec& spec, const ParamVector& params,
                                const Tensor& input) {
  Tensor probs = predict(spec, params, input);
  if (probs.dim(0) != 1) throw ConfigError("locator: expected a single query sample");
  return probs.vec();
}

std::size_t argmax_lowest_tie(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace

std::vector<double> Locator::target_prediction(const Tensor& input) const {
  return predict_one(spec_, final_params_, input);
}

std::vector<double> Locator::class_deletion_prediction(std::size_t class_id, const Tensor& input) {
  return predict_one(spec_, class_model(class_id), input);
}

std::vector<double> Locator::cluster_deletion_prediction(std::size_t cluster_id,
                                                         const Tensor& input) {
  return predict_one(spec_, cluster_model(cluster_id), input);
}

Locator::Located Locator::locate(const Tensor& input, int label, ScoreKind kind) {
  const std::size_t l = hierarchy_.num_classes, c = hierarchy_.per_class;
  Reference ref{target_prediction(input), label};

  // Level one: which class.
  std::vector<MaskRecord> records;
  std::vector<double> beta;
  for (std::size_t i = 0; i < l; ++i) {
    MaskRecord r;
    r.mask.bits.assign(l, 1);
    r.mask.bits[i] = 0;
    r.prediction = class_deletion_prediction(i, input);
    beta.push_back(default_beta(r.mask));
    records.push_back(std::move(r));
  }
  {
    MaskRecord r;
    r.mask.bits.assign(l, 1);
    r.prediction = ref.probs;  // final params, no fine-tune
    beta.push_back(default_beta(r.mask));
    records.push_back(std::move(r));
  }
  AttributionModel class_fit = fit_attribution(records, beta);
  const std::size_t located_class = argmax_lowest_tie(influence_scores(class_fit, kind, ref));

  // Level two: which cluster inside it.
  records.clear();
  beta.clear();
  for (std::size_t j = 0; j < c; ++j) {
    const std::size_t cluster_id = located_class * c + j;
    MaskRecord r;
    r.mask.bits.assign(c, 1);
    r.mask.bits[j] = 0;
    r.prediction = cluster_deletion_prediction(cluster_id, input);
    beta.push_back(default_beta(r.mask));
    records.push_back(std::move(r));
  }
  {
    MaskRecord r;
    r.mask.bits.assign(c, 1);
    r.prediction = ref.probs;
    beta.push_back(default_beta(r.mask));
    records.push_back(std::move(r));
  }
  AttributionModel cluster_fit = fit_attribution(records, beta);
  const std::size_t local = argmax_lowest_tie(influence_scores(cluster_fit, kind, ref));

  return {static_cast<int>(located_class), located_class * c + local};
}

std::size_t Locator::locate_flat(const Tensor& input, int label, ScoreKind kind) {
  const std::size_t k = hierarchy_.num_clusters();
  Reference ref{target_prediction(input), label};
  std::vector<MaskRecord> records;
  std::vector<double> beta;
  for (std::size_t i = 0; i < k; ++i) {
    MaskRecord r;
    r.mask.bits.assign(k, 1);
    r.mask.bits[i] = 0;
    r.prediction = cluster_deletion_prediction(i, input);
    beta.push_back(default_beta(r.mask));
    records.push_back(std::move(r));
  }
  {
    MaskRecord r;
    r.mask.bits.assign(k, 1);
    r.prediction = ref.probs;
    beta.push_back(default_beta(r.mask));
    records.push_back(std::move(r));
  }
  AttributionModel fit = fit_attribution(records, beta);
  return argmax_lowest_tie(influence_scores(fit, kind, ref));
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void save_attribution_csv(const std::filesystem::path& path, const AttributionModel& m,
                          const std::vector<int>& part_classes, const Reference& ref,
                          const std::string& header_comment) {
  const std::size_t parts = m.weights.dim(0);
  if (part_classes.size() != parts)
    throw ConfigError("save_attribution_csv: class list does not match parts");
  std::ofstream os(path);
  if (!os) throw ParseError("cannot write attribution CSV: " + path.string());
  if (!header_comment.empty()) os << "# " << header_comment << '\n';
  os << "cluster_id,class,score_dist1,score_dist2,score_dist3\n";
  std::vector<double> d1 = influence_scores(m, ScoreKind::dist1_l2, ref);
  std::vector<double> d2 = influence_scores(m, ScoreKind::dist2_ce, ref);
  std::vector<double> d3 = influence_scores(m, ScoreKind::dist3_inverse, ref);
  for (std::size_t k = 0; k < parts; ++k)
    os << k << ',' << part_classes[k] << ',' << fmt(d1[k]) << ',' << fmt(d2[k]) << ','
       << fmt(d3[k]) << '\n';
}

void save_wmatrix_csv(const std::filesystem::path& path, const AttributionModel& m,
                      const std::string& header_comment) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot write weight-matrix CSV: " + path.string());
  if (!header_comment.empty()) os << "# " << header_comment << '\n';
  const std::size_t parts = m.weights.dim(0), l = m.weights.dim(1);
  os << "part";
  for (std::size_t c = 0; c < l; ++c) os << ",w" << c;
  os << '\n';
  for (std::size_t k = 0; k < parts; ++k) {
    os << k;
    for (std::size_t c = 0; c < l; ++c) os << ',' << fmt(m.weights[k * l + c]);
    os << '\n';
  }
  os << "bias";
  for (std::size_t c = 0; c < l; ++c) os << ',' << fmt(m.bias[c]);
  os << '\n';
}

}  // namespace ddm
