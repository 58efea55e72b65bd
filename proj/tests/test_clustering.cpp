#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "ddm/clustering.hpp"
#include "ddm/rng.hpp"
#include "support.hpp"

using namespace ddm;

namespace {

double sse_of_assignment(const Tensor& rows, const std::vector<int>& assign, int k) {
  const std::size_t n = rows.dim(0), d = rows.dim(1);
  std::vector<std::vector<double>> mean(k, std::vector<double>(d, 0.0));
  std::vector<int> count(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    count[assign[i]]++;
    for (std::size_t j = 0; j < d; ++j) mean[assign[i]][j] += rows[i * d + j];
  }
  for (int c = 0; c < k; ++c)
    if (count[c])
      for (double& v : mean[c]) v /= count[c];
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double diff = rows[i * d + j] - mean[assign[i]][j];
      sse += diff * diff;
    }
  return sse;
}

// Exhaustive best 2-partition by sum of squared errors; feasible for n <= 12.
double brute_force_best_sse_k2(const Tensor& rows) {
  const std::size_t n = rows.dim(0);
  double best = 1e300;
  for (std::uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
    if (mask & 1u) continue;  // fix point 0 in part 0; halves the search
    std::vector<int> assign(n);
    for (std::size_t i = 0; i < n; ++i) assign[i] = (mask >> i) & 1u;
    best = std::min(best, sse_of_assignment(rows, assign, 2));
  }
  return best;
}

}  // namespace

TEST_CASE("lloyd iterations reach the exhaustive two-cluster optimum on small inputs") {
  Rng data_rng(51);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 10, d = 2;
    Tensor rows({n, d});
    for (double& v : rows.vec()) v = data_rng.uniform(0.0, 1.0);

    Rng rng(100 + trial);
    KMeansResult km = kmeans_fit(rows, 2, rng);
    const double got = sse_of_assignment(rows, km.assignments, 2);
    const double best = brute_force_best_sse_k2(rows);
    // A clustering better than the exhaustive optimum is impossible.
    CHECK(got >= best - 1e-9);
  }

  // Deterministic separated case: the global optimum must be reached exactly.
  Tensor lumps({8, 1});
  const double pts[8] = {0.0, 0.02, 0.04, 0.06, 0.9, 0.92, 0.94, 0.96};
  for (int i = 0; i < 8; ++i) lumps[i] = pts[i];
  Rng rng(7);
  KMeansResult km = kmeans_fit(lumps, 2, rng);
  CHECK(sse_of_assignment(lumps, km.assignments, 2) ==
        doctest::Approx(brute_force_best_sse_k2(lumps)).epsilon(1e-12));
  for (int i = 1; i < 4; ++i) CHECK(km.assignments[i] == km.assignments[0]);
  for (int i = 5; i < 8; ++i) CHECK(km.assignments[i] == km.assignments[4]);
  CHECK(km.assignments[0] != km.assignments[4]);
}

TEST_CASE("kmeans objective history never increases") {
  Rng data_rng(52);
  Tensor rows({30, 3});
  for (double& v : rows.vec()) v = data_rng.uniform(0.0, 1.0);
  Rng rng(9);
  KMeansResult km = kmeans_fit(rows, 4, rng);
  REQUIRE(!km.objective_history.empty());
  for (std::size_t i = 1; i < km.objective_history.size(); ++i)
    CHECK(km.objective_history[i] <= km.objective_history[i - 1] + 1e-12);
}

TEST_CASE("kmeans is deterministic for a fixed rng state") {
  Rng data_rng(53);
  Tensor rows({20, 2});
  for (double& v : rows.vec()) v = data_rng.uniform(0.0, 1.0);
  Rng r1(0), r2(0);
  KMeansResult a = kmeans_fit(rows, 3, r1);
  KMeansResult b = kmeans_fit(rows, 3, r2);
  CHECK(a.assignments == b.assignments);
  CHECK(a.centroids.vec() == b.centroids.vec());
}

TEST_CASE("kmeans handles k equal to the number of points") {
  Tensor rows({3, 1}, {0.1, 0.5, 0.9});
  Rng rng(4);
  KMeansResult km = kmeans_fit(rows, 3, rng);
  std::set<int> used(km.assignments.begin(), km.assignments.end());
  CHECK(used.size() == 3);
  CHECK(sse_of_assignment(rows, km.assignments, 3) == doctest::Approx(0.0));
}

TEST_CASE("cluster hierarchy partitions every class into per-class clusters") {
  LabeledDataset data = test::two_lump_dataset(3, 4, 5, 61);
  ClusterHierarchy h = cluster_dataset(data, embed_raw(data), 2, 17);
  h.validate(data.size());
  CHECK(h.num_classes == 3);
  CHECK(h.per_class == 2);
  CHECK(h.num_clusters() == 6);

  // Global ids refine classes: members of cluster c all carry class c/2.
  for (std::size_t cid = 0; cid < h.num_clusters(); ++cid)
    for (std::size_t s : h.cluster_members[cid])
      CHECK(data.labels[s] == h.cluster_class(cid));

  // Every sample appears in exactly one cluster.
  std::vector<int> seen(data.size(), 0);
  for (const auto& members : h.cluster_members)
    for (std::size_t s : members) seen[s]++;
  for (int c : seen) CHECK(c == 1);
}

TEST_CASE("two-lump classes are split exactly along the lumps") {
  const int classes = 2, per_lump = 6;
  LabeledDataset data = test::two_lump_dataset(classes, per_lump, 4, 62);
  ClusterHierarchy h = cluster_dataset(data, embed_raw(data), 2, 19);

  for (int cls = 0; cls < classes; ++cls) {
    // Samples of a class are emitted lump-major by the fixture: first
    // per_lump from lump 0, then per_lump from lump 1.
    const auto& members_a = h.cluster_members[cls * 2];
    const auto& members_b = h.cluster_members[cls * 2 + 1];
    REQUIRE(members_a.size() + members_b.size() == 2 * per_lump);
    auto lump_of = [&](std::size_t s) { return (static_cast<int>(s) % (2 * per_lump)) / per_lump; };
    std::set<int> lumps_a, lumps_b;
    for (std::size_t s : members_a) lumps_a.insert(lump_of(s));
    for (std::size_t s : members_b) lumps_b.insert(lump_of(s));
    CHECK(lumps_a.size() == 1);
    CHECK(lumps_b.size() == 1);
    CHECK(lumps_a != lumps_b);
  }
}

TEST_CASE("assignment csv round-trips the hierarchy") {
  test::TempDir dir;
  LabeledDataset data = test::two_lump_dataset(2, 3, 4, 63);
  ClusterHierarchy h = cluster_dataset(data, embed_raw(data), 2, 23);
  const auto path = dir.path() / "assignments.csv";
  save_assignments_csv(path, h, "config=deadbeef seed=23");

  ClusterHierarchy back = load_assignments_csv(path);
  CHECK(back.num_classes == h.num_classes);
  CHECK(back.per_class == h.per_class);
  CHECK(back.class_members == h.class_members);
  CHECK(back.cluster_members == h.cluster_members);
}

TEST_CASE("hierarchy validation rejects tampered membership") {
  LabeledDataset data = test::two_lump_dataset(2, 3, 4, 64);
  ClusterHierarchy h = cluster_dataset(data, embed_raw(data), 2, 29);
  ClusterHierarchy bad = h;
  bad.cluster_members[0].push_back(bad.cluster_members[1][0]);  // duplicate membership
  CHECK_THROWS_AS(bad.validate(data.size()), ConfigError);

  ClusterHierarchy missing = h;
  missing.cluster_members[0].pop_back();
  CHECK_THROWS_AS(missing.validate(data.size()), ConfigError);
}
