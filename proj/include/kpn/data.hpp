#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kpn/errors.hpp"
#include "kpn/tensor.hpp"

namespace kpn {

// Images in [0, 1], NCHW, with integer class labels.
struct Dataset {
  std::size_t channels = 1, height = 0, width = 0;
  std::vector<float> images;
  std::vector<int> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }

  std::span<const float> image(std::size_t i) const {
    return {images.data() + i * image_size(), image_size()};
  }

  std::vector<std::vector<std::size_t>> class_indices() const {
    std::vector<std::vector<std::size_t>> out(class_count);
    for (std::size_t i = 0; i < labels.size(); ++i) out[static_cast<std::size_t>(labels[i])].push_back(i);
    return out;
  }

  Dataset select(std::span<const std::size_t> indices) const {
    Dataset d{channels, height, width, {}, {}, class_count};
    d.images.reserve(indices.size() * image_size());
    d.labels.reserve(indices.size());
    for (auto i : indices) {
      const auto img = image(i);
      d.images.insert(d.images.end(), img.begin(), img.end());
      d.labels.push_back(labels[i]);
    }
    return d;
  }
};

// ---------------------------------------------------------------------------
// IDX container (big-endian header: 0x00 0x00 type ndims, then ndims u32 extents)

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) b.push_back(static_cast<std::uint8_t>(v >> shift));
}

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::span<const std::uint8_t> payload;
};

inline IdxArray parse_idx(const std::vector<std::uint8_t>& bytes, const std::string& name,
                          std::initializer_list<std::uint32_t> magics) {
  if (bytes.size() < 4) throw DataError(DataError::Kind::truncated, name + ": truncated IDX header");
  const std::uint32_t magic = read_be32(bytes, 0);
  if (std::find(magics.begin(), magics.end(), magic) == magics.end()) {
    throw DataError(DataError::Kind::bad_magic, name + ": unexpected IDX magic " + std::to_string(magic));
  }
  const std::size_t ndims = magic & 0xff;
  if (bytes.size() < 4 + 4 * ndims) throw DataError(DataError::Kind::truncated, name + ": truncated IDX header");
  IdxArray arr;
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    arr.dims.push_back(read_be32(bytes, 4 + 4 * d));
    count *= arr.dims.back();
  }
  const std::size_t offset = 4 + 4 * ndims;
  if (bytes.size() - offset < count) {
    throw DataError(DataError::Kind::truncated, name + ": payload holds " + std::to_string(bytes.size() - offset) +
                                                    " bytes, header promises " + std::to_string(count));
  }
  arr.payload = std::span<const std::uint8_t>(bytes.data() + offset, count);
  return arr;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxLabelsMagic = 2049;   // ubyte, 1-D
inline constexpr std::uint32_t kIdxImagesMagic = 2051;   // ubyte, 3-D (N, H, W)
inline constexpr std::uint32_t kIdxImages4dMagic = 2052; // ubyte, 4-D (N, C, H, W)

// Pixel bytes are scaled by 1/255.
inline Dataset read_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img_bytes = detail::read_file(images_path);
  const auto lbl_bytes = detail::read_file(labels_path);
  const auto imgs = detail::parse_idx(img_bytes, images_path.string(), {kIdxImagesMagic, kIdxImages4dMagic});
  const auto lbls = detail::parse_idx(lbl_bytes, labels_path.string(), {kIdxLabelsMagic});
  if (imgs.dims[0] != lbls.dims[0]) {
    throw DataError(DataError::Kind::count_mismatch, std::to_string(imgs.dims[0]) + " images but " +
                                                         std::to_string(lbls.dims[0]) + " labels");
  }
  Dataset d;
  if (imgs.dims.size() == 3) {
    d.channels = 1;
    d.height = imgs.dims[1];
    d.width = imgs.dims[2];
  } else {
    d.channels = imgs.dims[1];
    d.height = imgs.dims[2];
    d.width = imgs.dims[3];
  }
  d.images.resize(imgs.payload.size());
  for (std::size_t i = 0; i < imgs.payload.size(); ++i) d.images[i] = static_cast<float>(imgs.payload[i]) / 255.0f;
  d.labels.assign(lbls.payload.begin(), lbls.payload.end());
  int max_label = -1;
  for (int l : d.labels) max_label = std::max(max_label, l);
  d.class_count = static_cast<std::size_t>(max_label + 1);
  return d;
}

inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(DataError::Kind::io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError(DataError::Kind::io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// Writes N images of HxW bytes (3-D layout) or NxCxHxW (4-D when channels > 1).
inline void write_idx_images(const std::filesystem::path& path, std::span<const std::uint8_t> pixels, std::size_t n,
                             std::size_t channels, std::size_t height, std::size_t width) {
  if (pixels.size() != n * channels * height * width) throw ShapeError("write_idx_images: pixel count mismatch");
  std::vector<std::uint8_t> bytes;
  detail::put_be32(bytes, channels == 1 ? kIdxImagesMagic : kIdxImages4dMagic);
  detail::put_be32(bytes, static_cast<std::uint32_t>(n));
  if (channels != 1) detail::put_be32(bytes, static_cast<std::uint32_t>(channels));
  detail::put_be32(bytes, static_cast<std::uint32_t>(height));
  detail::put_be32(bytes, static_cast<std::uint32_t>(width));
  bytes.insert(bytes.end(), pixels.begin(), pixels.end());
  write_file_atomic(path, bytes);
}

inline void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> bytes;
  detail::put_be32(bytes, kIdxLabelsMagic);
  detail::put_be32(bytes, static_cast<std::uint32_t>(labels.size()));
  bytes.insert(bytes.end(), labels.begin(), labels.end());
  write_file_atomic(path, bytes);
}

// Loads <dir>/train-* and <dir>/t10k-* in the MNIST naming scheme.
inline std::pair<Dataset, Dataset> load_idx_dir(const std::filesystem::path& dir) {
  return {read_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
          read_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte")};
}

// ---------------------------------------------------------------------------
// Sampling

struct SubsetSpec {
  std::size_t total = 0;
  std::uint64_t seed = 0;
};

struct Subset {
  Dataset data;
  std::vector<std::size_t> source_indices;  // into the parent dataset, ascending
};

// Exactly total/K samples from every class, drawn by a seeded shuffle inside
// each class.
inline Subset class_balanced_subset(const Dataset& d, const SubsetSpec& spec) {
  if (d.class_count == 0) throw ConfigError("class_balanced_subset: dataset has no classes");
  if (spec.total == 0 || spec.total % d.class_count != 0) {
    throw ConfigError("subset size " + std::to_string(spec.total) + " is not a positive multiple of " +
                      std::to_string(d.class_count) + " classes");
  }
  const std::size_t quota = spec.total / d.class_count;
  std::mt19937_64 rng(spec.seed);
  Subset s;
  for (auto& members : d.class_indices()) {
    if (members.size() < quota) {
      throw ConfigError("class has " + std::to_string(members.size()) + " samples, subset needs " +
                        std::to_string(quota));
    }
    std::shuffle(members.begin(), members.end(), rng);
    s.source_indices.insert(s.source_indices.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(quota));
  }
  std::sort(s.source_indices.begin(), s.source_indices.end());
  s.data = d.select(s.source_indices);
  return s;
}

// Class-balanced, disjoint, exhaustive split: round(val_fraction * n_c) of
// each class goes to validation.
inline std::pair<Subset, Subset> train_val_split(const Dataset& d, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("val_fraction must lie in [0, 1)");
  std::mt19937_64 rng(seed);
  Subset train, val;
  for (auto& members : d.class_indices()) {
    std::shuffle(members.begin(), members.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(members.size())));
    val.source_indices.insert(val.source_indices.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    train.source_indices.insert(train.source_indices.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
  }
  std::sort(train.source_indices.begin(), train.source_indices.end());
  std::sort(val.source_indices.begin(), val.source_indices.end());
  train.data = d.select(train.source_indices);
  val.data = d.select(val.source_indices);
  return {std::move(train), std::move(val)};
}

inline nlohmann::json subset_manifest(const Subset& s, const SubsetSpec& spec) {
  return {{"total", spec.total}, {"seed", spec.seed}, {"indices", s.source_indices}};
}

template <typename Real>
struct Batch {
  Tensor<Real> images;
  std::vector<int> labels;
};

template <typename Real>
Batch<Real> make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  std::vector<Real> values;
  values.reserve(indices.size() * d.image_size());
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (auto i : indices) {
    const auto img = d.image(i);
    values.insert(values.end(), img.begin(), img.end());
    labels.push_back(d.labels[i]);
  }
  return {Tensor<Real>({indices.size(), d.channels, d.height, d.width}, std::move(values)), std::move(labels)};
}

// Mirrors each image left-right with the given probability. Returns a new
// batch; labels are copied unchanged.
template <typename Real>
Batch<Real> augment_hflip(const Batch<Real>& batch, double probability, std::mt19937_64& rng) {
  const auto& shape = batch.images.shape();
  const std::size_t n = shape[0], planes = shape[1] * shape[2], w = shape[3];
  std::vector<Real> values(batch.images.values().begin(), batch.images.values().end());
  std::bernoulli_distribution coin(probability);
  for (std::size_t s = 0; s < n; ++s) {
    if (!coin(rng)) continue;
    for (std::size_t row = 0; row < planes; ++row) {
      Real* p = values.data() + (s * planes + row) * w;
      std::reverse(p, p + w);
    }
  }
  return {Tensor<Real>(shape, std::move(values)), batch.labels};
}

// Reshuffles the index range every epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : order_(n), batch_(std::min(batch_size, n)), rng_(seed) {
    if (n == 0 || batch_size == 0) throw ConfigError("BatchSampler: empty dataset or zero batch size");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next() {
    if (cursor_ + batch_ > order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
      ++epoch_;
    }
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
    cursor_ += batch_;
    return out;
  }

  std::size_t batches_per_epoch() const { return order_.size() / batch_; }
  std::size_t epoch() const { return epoch_; }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::mt19937_64 rng_;
};

}  // namespace kpn
