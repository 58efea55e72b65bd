#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ddm/dataset.hpp"
#include "ddm/rng.hpp"
#include "ddm/tensor.hpp"

namespace ddm {

struct KMeansResult {
  Tensor centroids;              // [k, d]
  std::vector<int> assignments;  // per input row
  // Sum of squared distances after each Lloyd round; non-increasing.
  std::vector<double> objective_history;
};

// Lloyd iterations with k-means++ seeding. Deterministic: ties go to the
// lowest centroid index, empty clusters are reseeded at the point farthest
// from its assigned centroid.
KMeansResult kmeans_fit(const Tensor& rows, std::size_t k, Rng& rng, std::size_t max_iters = 100,
                        double tol = 1e-6);

// Two-level partition: classes (level one) and per-class k-means clusters
// (level two). Global cluster id = class * per_class + local index, so the
// flat partition refines the class partition by construction.
struct ClusterHierarchy {
  int num_classes = 0;
  int per_class = 0;
  std::vector<std::vector<std::size_t>> class_members;
  std::vector<std::vector<std::size_t>> cluster_members;

  std::size_t num_clusters() const { return cluster_members.size(); }
  int cluster_class(std::size_t cluster_id) const {
    return static_cast<int>(cluster_id) / per_class;
  }
  void validate(std::size_t dataset_size) const;
};

ClusterHierarchy cluster_dataset(const LabeledDataset& data, const Tensor& features,
                                 std::size_t per_class, std::uint64_t seed);

void save_assignments_csv(const std::filesystem::path& path, const ClusterHierarchy& h,
                          const std::string& header_comment);
ClusterHierarchy load_assignments_csv(const std::filesystem::path& path);

}  // namespace ddm
