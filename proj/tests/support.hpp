#pragma once

#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddm/attribution.hpp"
#include "ddm/dataset.hpp"
#include "ddm/models.hpp"
#include "ddm/rng.hpp"

namespace ddm::test {

// Weighted least-squares oracle on the deletion design [1-bits | 1]: normal
// equations solved by Gauss-Jordan elimination with partial pivoting. A
// deliberately different route from the production Householder QR solver.
inline AttributionModel normal_equations_fit(const std::vector<MaskRecord>& records,
                                             const std::vector<double>& beta) {
  const std::size_t n = records.size();
  const std::size_t k = records[0].mask.bits.size();
  const std::size_t l = records[0].prediction.size();
  const std::size_t m = k + 1;

  std::vector<std::vector<double>> x(n, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) x[i][j] = records[i].mask.bits[j] ? 0.0 : 1.0;
    x[i][k] = 1.0;
  }
  // A = X^T B X, rhs = X^T B Y
  std::vector<std::vector<double>> a(m, std::vector<double>(m, 0.0));
  std::vector<std::vector<double>> rhs(m, std::vector<double>(l, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < m; ++p) {
      for (std::size_t q = 0; q < m; ++q) a[p][q] += beta[i] * x[i][p] * x[i][q];
      for (std::size_t c = 0; c < l; ++c)
        rhs[p][c] += beta[i] * x[i][p] * records[i].prediction[c];
    }
  for (std::size_t col = 0; col < m; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < m; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) < 1e-12) throw std::runtime_error("singular normal equations");
    std::swap(a[col], a[piv]);
    std::swap(rhs[col], rhs[piv]);
    const double d = a[col][col];
    for (std::size_t q = 0; q < m; ++q) a[col][q] /= d;
    for (std::size_t c = 0; c < l; ++c) rhs[col][c] /= d;
    for (std::size_t r = 0; r < m; ++r) {
      if (r == col) continue;
      const double f = a[r][col];
      if (f == 0.0) continue;
      for (std::size_t q = 0; q < m; ++q) a[r][q] -= f * a[col][q];
      for (std::size_t c = 0; c < l; ++c) rhs[r][c] -= f * rhs[col][c];
    }
  }
  AttributionModel model;
  model.weights = Tensor({k, l});
  model.bias.assign(l, 0.0);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t c = 0; c < l; ++c) model.weights[j * l + c] = rhs[j][c];
  for (std::size_t c = 0; c < l; ++c) model.bias[c] = rhs[k][c];
  double res = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < l; ++c) {
      double yhat = model.bias[c];
      for (std::size_t j = 0; j < k; ++j) yhat += model.weights[j * l + c] * x[i][j];
      const double d = records[i].prediction[c] - yhat;
      res += beta[i] * d * d;
    }
  model.fit_residual = res;
  return model;
}

// Unique scratch directory under the system temp dir; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& stem = "ddm_test") {
    namespace fs = std::filesystem;
    const fs::path base = fs::temp_directory_path();
    for (int i = 0; i < 10000; ++i) {
      fs::path candidate = base / (stem + "_" + std::to_string(::getpid()) + "_" +
                                   std::to_string(counter_++));
      std::error_code ec;
      if (fs::create_directories(candidate, ec) && !ec) {
        path_ = candidate;
        return;
      }
    }
    throw std::runtime_error("could not create a scratch directory");
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  std::filesystem::path path_;
};

// Two separable point groups per class along distinct axes: class c has
// sub-blob 0 near 0.2 and sub-blob 1 near 0.8 on axis c. K-means with
// per_class=2 must recover the sub-blobs exactly.
inline LabeledDataset two_lump_dataset(int classes, int per_lump, std::size_t dim,
                                       std::uint64_t seed) {
  Rng rng(seed);
  LabeledDataset d;
  d.num_classes = classes;
  const std::size_t n = static_cast<std::size_t>(classes) * 2 * per_lump;
  d.images = Tensor({n, dim});
  std::size_t row = 0;
  for (int c = 0; c < classes; ++c)
    for (int lump = 0; lump < 2; ++lump)
      for (int i = 0; i < per_lump; ++i, ++row) {
        for (std::size_t j = 0; j < dim; ++j) d.images[row * dim + j] = 0.45 + 0.02 * rng.uniform();
        d.images[row * dim + static_cast<std::size_t>(c) % dim] = lump ? 0.8 : 0.2;
        d.labels.push_back(c);
      }
  d.validate();
  return d;
}

}  // namespace ddm::test
