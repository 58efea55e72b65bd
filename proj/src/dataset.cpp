#include "ddm/dataset.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ddm/common.hpp"
#include "ddm/rng.hpp"

namespace ddm {

void LabeledDataset::validate() const {
  if (images.ndim() < 2 || images.dim(0) != labels.size())
    throw ConfigError("dataset: image count does not match label count");
  if (num_classes < 1) throw ConfigError("dataset: num_classes must be >= 1");
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw ConfigError("dataset: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(num_classes) + ")");
  for (double v : images.vec())
    if (!(v >= 0.0 && v <= 1.0))
      throw ConfigError("dataset: pixel value outside [0, 1]");
}

LabeledBatch LabeledDataset::gather(const std::vector<std::size_t>& indices) const {
  const std::size_t per = sample_dim();
  std::vector<std::size_t> shape = images.shape();
  shape[0] = indices.size();
  Tensor out(std::move(shape));
  LabeledBatch b;
  b.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= size()) throw ConfigError("gather: index out of range");
    std::copy_n(images.data() + src * per, per, out.data() + i * per);
    b.labels.push_back(labels[src]);
  }
  b.inputs = std::move(out);
  return b;
}

LabeledBatch LabeledDataset::full() const {
  LabeledBatch b;
  b.inputs = images;
  b.labels = labels;
  return b;
}

namespace {

std::uint32_t read_be32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw ParseError("IDX file truncated while reading header: " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace

LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw MissingArtifactError("IDX image file not found: " + images_path.string());
  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw MissingArtifactError("IDX label file not found: " + labels_path.string());

  const std::uint32_t img_magic = read_be32(imgs, images_path.string());
  if (img_magic != 0x00000803u)
    throw ParseError("IDX magic mismatch in " + images_path.string() +
                     ": expected 0x00000803 (u8 images, 3 dims)");
  const std::uint32_t n = read_be32(imgs, images_path.string());
  const std::uint32_t h = read_be32(imgs, images_path.string());
  const std::uint32_t w = read_be32(imgs, images_path.string());

  const std::uint32_t lab_magic = read_be32(labs, labels_path.string());
  if (lab_magic != 0x00000801u)
    throw ParseError("IDX magic mismatch in " + labels_path.string() +
                     ": expected 0x00000801 (u8 labels, 1 dim)");
  const std::uint32_t nl = read_be32(labs, labels_path.string());
  if (n != nl)
    throw ParseError("IDX image/label count mismatch: " + std::to_string(n) + " images vs " +
                     std::to_string(nl) + " labels");

  LabeledDataset d;
  d.images = Tensor({n, 1, h, w});
  std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w);
  for (std::uint32_t i = 0; i < n; ++i) {
    imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!imgs) throw ParseError("IDX file truncated in pixel data: " + images_path.string());
    double* dst = d.images.data() + static_cast<std::size_t>(i) * buf.size();
    for (std::size_t j = 0; j < buf.size(); ++j) dst[j] = buf[j] / 255.0;
  }
  d.labels.resize(n);
  std::vector<unsigned char> lbuf(n);
  labs.read(reinterpret_cast<char*>(lbuf.data()), static_cast<std::streamsize>(n));
  if (!labs) throw ParseError("IDX file truncated in label data: " + labels_path.string());
  int maxlab = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    d.labels[i] = lbuf[i];
    maxlab = std::max(maxlab, d.labels[i]);
  }
  d.num_classes = maxlab + 1;
  d.validate();
  return d;
}

LabeledDataset load_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("CSV dataset not found: " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t width = 0;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::size_t pos = 0;
    bool numeric = true;
    while (pos <= line.size()) {
      std::size_t comma = line.find(',', pos);
      if (comma == std::string::npos) comma = line.size();
      const std::string field = line.substr(pos, comma - pos);
      double v = 0.0;
      auto [p, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || p != field.data() + field.size()) {
        numeric = false;
        break;
      }
      row.push_back(v);
      pos = comma + 1;
      if (comma == line.size()) break;
    }
    if (!numeric) {
      if (rows.empty()) continue;  // header line
      throw ParseError("CSV dataset: non-numeric field in " + path.string());
    }
    if (row.size() < 2) throw ParseError("CSV dataset: row with fewer than 2 fields");
    if (width == 0) width = row.size();
    if (row.size() != width) throw ParseError("CSV dataset: ragged rows in " + path.string());
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("CSV dataset: no data rows in " + path.string());

  const std::size_t n = rows.size(), d = width - 1;
  bool all_int = true;
  double maxv = 0.0;
  for (const auto& r : rows)
    for (std::size_t j = 1; j < r.size(); ++j) {
      if (r[j] != std::floor(r[j])) all_int = false;
      maxv = std::max(maxv, r[j]);
    }
  const double scale = (all_int && maxv > 1.0) ? 255.0 : 1.0;

  LabeledDataset out;
  out.images = Tensor({n, d});
  out.labels.resize(n);
  int maxlab = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out.labels[i] = static_cast<int>(rows[i][0]);
    maxlab = std::max(maxlab, out.labels[i]);
    for (std::size_t j = 0; j < d; ++j) out.images[i * d + j] = rows[i][j + 1] / scale;
  }
  out.num_classes = maxlab + 1;
  out.validate();
  return out;
}

void save_csv(const std::filesystem::path& path, const LabeledDataset& data) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open CSV for writing: " + path.string());
  const std::size_t per = data.sample_dim();
  os << "label";
  for (std::size_t j = 0; j < per; ++j) os << ",pixel" << j;
  os << '\n';
  char buf[40];
  for (std::size_t i = 0; i < data.size(); ++i) {
    os << data.labels[i];
    for (std::size_t j = 0; j < per; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", data.images[i * per + j]);
      os << ',' << buf;
    }
    os << '\n';
  }
}

LabeledDataset make_blobs(int classes, int per_class, std::size_t dim, double separation,
                          std::uint64_t seed) {
  if (classes < 1 || per_class < 1 || dim < 1)
    throw ConfigError("make_blobs: classes, per_class and dim must be >= 1");
  Rng mean_rng = substream(seed, "blobs.means");
  std::vector<std::vector<double>> means(classes, std::vector<double>(dim));
  for (auto& m : means) {
    double norm = 0.0;
    for (double& x : m) {
      x = mean_rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : m) x = norm > 0 ? separation * x / norm : 0.0;
  }

  const std::size_t n = static_cast<std::size_t>(classes) * per_class;
  Tensor raw({n, dim});
  LabeledDataset out;
  out.labels.resize(n);
  out.num_classes = classes;
  Rng noise_rng = substream(seed, "blobs.noise");
  std::size_t idx = 0;
  for (int c = 0; c < classes; ++c)
    for (int s = 0; s < per_class; ++s) {
      for (std::size_t j = 0; j < dim; ++j) raw[idx * dim + j] = means[c][j] + noise_rng.normal();
      out.labels[idx] = c;
      ++idx;
    }

  double lo = raw[0], hi = raw[0];
  for (double v : raw.vec()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi - lo;
  for (double& v : raw.vec()) v = span > 1e-12 ? (v - lo) / span : 0.5;
  out.images = std::move(raw);
  out.validate();
  return out;
}

namespace {

// 7x5 glyph bitmaps for digits 0-9.
constexpr std::array<const char*, 10> kGlyphs = {
    "01110"
    "10001"
    "10001"
    "10001"
    "10001"
    "10001"
    "01110",
    "00100"
    "01100"
    "00100"
    "00100"
    "00100"
    "00100"
    "01110",
    "01110"
    "10001"
    "00001"
    "00010"
    "00100"
    "01000"
    "11111",
    "11110"
    "00001"
    "00001"
    "01110"
    "00001"
    "00001"
    "11110",
    "00010"
    "00110"
    "01010"
    "10010"
    "11111"
    "00010"
    "00010",
    "11111"
    "10000"
    "11110"
    "00001"
    "00001"
    "10001"
    "01110",
    "00110"
    "01000"
    "10000"
    "11110"
    "10001"
    "10001"
    "01110",
    "11111"
    "00001"
    "00010"
    "00100"
    "01000"
    "01000"
    "01000",
    "01110"
    "10001"
    "10001"
    "01110"
    "10001"
    "10001"
    "01110",
    "01110"
    "10001"
    "10001"
    "01111"
    "00001"
    "00010"
    "01100"};

}  // namespace

LabeledDataset make_digits(int per_class, std::uint64_t seed) {
  if (per_class < 1) throw ConfigError("make_digits: per_class must be >= 1");
  constexpr std::size_t H = 28, W = 28, GH = 7, GW = 5, S = 3;  // glyph upscale factor 3
  const std::size_t n = static_cast<std::size_t>(per_class) * 10;
  LabeledDataset out;
  out.images = Tensor({n, 1, H, W});
  out.labels.resize(n);
  out.num_classes = 10;
  Rng rng = substream(seed, "digits");
  std::size_t idx = 0;
  for (int digit = 0; digit < 10; ++digit) {
    const char* glyph = kGlyphs[digit];
    for (int s = 0; s < per_class; ++s) {
      const int dy = static_cast<int>(rng.index(7)) - 3;
      const int dx = static_cast<int>(rng.index(7)) - 3;
      const double intensity = 0.55 + 0.45 * rng.uniform();
      double* img = out.images.data() + idx * H * W;
      const int base_y = 3 + dy, base_x = 6 + dx;
      for (std::size_t gy = 0; gy < GH; ++gy)
        for (std::size_t gx = 0; gx < GW; ++gx) {
          if (glyph[gy * GW + gx] != '1') continue;
          for (std::size_t uy = 0; uy < S; ++uy)
            for (std::size_t ux = 0; ux < S; ++ux) {
              const long y = base_y + static_cast<long>(gy * S + uy);
              const long x = base_x + static_cast<long>(gx * S + ux);
              if (y >= 0 && y < static_cast<long>(H) && x >= 0 && x < static_cast<long>(W))
                img[y * W + x] = intensity;
            }
        }
      for (std::size_t j = 0; j < H * W; ++j)
        img[j] = std::clamp(img[j] + 0.12 * rng.normal(), 0.0, 1.0);
      out.labels[idx] = digit;
      ++idx;
    }
  }
  out.validate();
  return out;
}

Tensor embed_raw(const LabeledDataset& data) {
  return Tensor({data.size(), data.sample_dim()}, data.images.vec());
}

Tensor embed_features(const ModelSpec& spec, const ParamVector& params,
                      const LabeledDataset& data) {
  const std::size_t n = data.size();
  constexpr std::size_t kChunk = 256;
  Tensor out;
  std::size_t width = 0;
  for (std::size_t start = 0; start < n; start += kChunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + kChunk); ++i) idx.push_back(i);
    LabeledBatch b = data.gather(idx);
    std::vector<Var> leaves = param_leaves(spec, params, false);
    Var in = input_leaf(spec, b.inputs, false);
    ForwardOut fwd = forward_graph(spec, leaves, in);
    const Tensor& feats = fwd.penultimate->val;
    if (width == 0) {
      width = feats.numel() / idx.size();
      out = Tensor({n, width});
    }
    std::copy(feats.vec().begin(), feats.vec().end(), out.data() + start * width);
  }
  return out;
}

}  // namespace ddm
