#include "ddm/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "ddm/common.hpp"

namespace ddm {

namespace {

double sqdist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

}  // namespace

KMeansResult kmeans_fit(const Tensor& rows, std::size_t k, Rng& rng, std::size_t max_iters,
                        double tol) {
  if (rows.ndim() != 2) throw ConfigError("kmeans: rows must be 2-D");
  const std::size_t n = rows.dim(0), d = rows.dim(1);
  if (k < 1 || k > n)
    throw ConfigError("kmeans: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  const double* X = rows.data();

  // k-means++ seeding.
  Tensor centroids({k, d});
  std::vector<double> best_sq(n, std::numeric_limits<double>::infinity());
  {
    std::size_t first = rng.index(n);
    std::copy_n(X + first * d, d, centroids.data());
    for (std::size_t c = 1; c < k; ++c) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        best_sq[i] = std::min(best_sq[i], sqdist(X + i * d, centroids.data() + (c - 1) * d, d));
        total += best_sq[i];
      }
      std::size_t pick = 0;
      if (total > 0.0) {
        const double r = rng.uniform() * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          acc += best_sq[i];
          if (acc >= r) {
            pick = i;
            break;
          }
        }
      } else {
        pick = rng.index(n);  // all points coincide with chosen centroids
      }
      std::copy_n(X + pick * d, d, centroids.data() + c * d);
    }
  }

  KMeansResult res;
  res.assignments.assign(n, 0);
  std::vector<std::size_t> counts(k);
  Tensor next({k, d});
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    // Assignment; ties resolve to the lowest centroid index via strict <.
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = sqdist(X + i * d, centroids.data(), d);
      for (std::size_t c = 1; c < k; ++c) {
        const double dist = sqdist(X + i * d, centroids.data() + c * d, d);
        if (dist < bd) {
          bd = dist;
          best = static_cast<int>(c);
        }
      }
      res.assignments[i] = best;
    }

    // Reseed empty clusters at the point farthest from its assigned centroid.
    for (std::size_t c = 0; c < k; ++c) {
      bool empty = std::none_of(res.assignments.begin(), res.assignments.end(),
                                [&](int a) { return a == static_cast<int>(c); });
      if (!empty) continue;
      std::size_t far_i = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dist =
            sqdist(X + i * d, centroids.data() + res.assignments[i] * d, d);
        if (dist > far_d) {
          far_d = dist;
          far_i = i;
        }
      }
      std::copy_n(X + far_i * d, d, centroids.data() + c * d);
      res.assignments[far_i] = static_cast<int>(c);
    }

    // Update step.
    std::fill(next.vec().begin(), next.vec().end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const int c = res.assignments[i];
      ++counts[c];
      double* row = next.data() + static_cast<std::size_t>(c) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += X[i * d + j];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // cannot happen after reseeding
      double* row = next.data() + c * d;
      for (std::size_t j = 0; j < d; ++j) row[j] /= static_cast<double>(counts[c]);
      shift = std::max(shift, std::sqrt(sqdist(row, centroids.data() + c * d, d)));
      std::copy_n(row, d, centroids.data() + c * d);
    }

    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      sse += sqdist(X + i * d, centroids.data() + res.assignments[i] * d, d);
    res.objective_history.push_back(sse);
    if (shift < tol) break;
  }
  res.centroids = std::move(centroids);
  return res;
}

void ClusterHierarchy::validate(std::size_t dataset_size) const {
  std::vector<char> seen(dataset_size, 0);
  for (const auto& members : cluster_members)
    for (std::size_t i : members) {
      if (i >= dataset_size) throw ConfigError("hierarchy: member index out of range");
      if (seen[i]) throw ConfigError("hierarchy: sample in more than one cluster");
      seen[i] = 1;
    }
  if (!std::all_of(seen.begin(), seen.end(), [](char c) { return c == 1; }))
    throw ConfigError("hierarchy: clusters do not cover the dataset");
  if (cluster_members.size() != static_cast<std::size_t>(num_classes) * per_class)
    throw ConfigError("hierarchy: cluster count is not classes * per_class");
}

ClusterHierarchy cluster_dataset(const LabeledDataset& data, const Tensor& features,
                                 std::size_t per_class, std::uint64_t seed) {
  if (features.ndim() != 2 || features.dim(0) != data.size())
    throw ConfigError("cluster_dataset: features must be [N, d]");
  const std::size_t d = features.dim(1);

  ClusterHierarchy h;
  h.num_classes = data.num_classes;
  h.per_class = static_cast<int>(per_class);
  h.class_members.resize(data.num_classes);
  for (std::size_t i = 0; i < data.size(); ++i) h.class_members[data.labels[i]].push_back(i);
  h.cluster_members.assign(static_cast<std::size_t>(data.num_classes) * per_class, {});

  for (int l = 0; l < data.num_classes; ++l) {
    const auto& members = h.class_members[l];
    if (members.size() < per_class)
      throw ConfigError("class " + std::to_string(l) + " has " + std::to_string(members.size()) +
                        " samples, fewer than per_class=" + std::to_string(per_class));
    Tensor rows({members.size(), d});
    for (std::size_t i = 0; i < members.size(); ++i)
      std::copy_n(features.data() + members[i] * d, d, rows.data() + i * d);
    Rng rng = substream(seed, "kmeans", static_cast<std::uint64_t>(l));
    KMeansResult km = kmeans_fit(rows, per_class, rng);
    for (std::size_t i = 0; i < members.size(); ++i)
      h.cluster_members[static_cast<std::size_t>(l) * per_class + km.assignments[i]].push_back(
          members[i]);
  }
  h.validate(data.size());
  return h;
}

void save_assignments_csv(const std::filesystem::path& path, const ClusterHierarchy& h,
                          const std::string& header_comment) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open assignments CSV for writing: " + path.string());
  if (!header_comment.empty()) os << "# " << header_comment << '\n';
  os << "# classes=" << h.num_classes << " per_class=" << h.per_class << '\n';
  os << "index,class,cluster\n";
  // Rows sorted by sample index for stable diffs.
  std::vector<std::pair<std::size_t, std::size_t>> rows;  // index -> cluster
  for (std::size_t c = 0; c < h.cluster_members.size(); ++c)
    for (std::size_t i : h.cluster_members[c]) rows.emplace_back(i, c);
  std::sort(rows.begin(), rows.end());
  for (const auto& [i, c] : rows)
    os << i << ',' << h.cluster_class(c) << ',' << c << '\n';
}

ClusterHierarchy load_assignments_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("assignments CSV not found: " + path.string());
  ClusterHierarchy h;
  std::string line;
  bool have_dims = false;
  while (std::getline(is, line)) {
    if (line.rfind("# classes=", 0) == 0) {
      std::sscanf(line.c_str(), "# classes=%d per_class=%d", &h.num_classes, &h.per_class);
      have_dims = true;
      h.class_members.resize(h.num_classes);
      h.cluster_members.assign(static_cast<std::size_t>(h.num_classes) * h.per_class, {});
      continue;
    }
    if (line.empty() || line[0] == '#' || line.rfind("index,", 0) == 0) continue;
    if (!have_dims) throw ParseError("assignments CSV missing dimension header: " + path.string());
    std::size_t idx, cls, cl;
    if (std::sscanf(line.c_str(), "%zu,%zu,%zu", &idx, &cls, &cl) != 3)
      throw ParseError("assignments CSV: malformed row '" + line + "'");
    if (cl >= h.cluster_members.size())
      throw ParseError("assignments CSV: cluster id out of range in '" + line + "'");
    h.class_members[cls].push_back(idx);
    h.cluster_members[cl].push_back(idx);
  }
  if (!have_dims) throw ParseError("assignments CSV missing dimension header: " + path.string());
  return h;
}

}  // namespace ddm
