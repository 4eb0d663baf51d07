#pragma once

// Dataset construction, IDX file I/O, Dirichlet label-skew partitioning and
// the aggregator-side per-class validation split.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskfl/errors.hpp"
#include "maskfl/rng.hpp"
#include "maskfl/tensor_nn.hpp"

namespace maskfl {

struct ImageShape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  bool operator==(const ImageShape&) const = default;
};

/// Labeled samples plus class count and, for image data, the pixel grid
/// each input row encodes (row-major).
struct Dataset : Batch {
  int num_classes = 0;
  std::optional<ImageShape> image;

  std::size_t dim() const { return inputs.cols; }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.num_classes = num_classes;
    out.image = image;
    out.inputs = Matrix(indices.size(), inputs.cols);
    out.labels.reserve(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const auto src = inputs.row(indices[r]);
      std::copy(src.begin(), src.end(), out.inputs.row(r).begin());
      out.labels.push_back(labels[indices[r]]);
    }
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> h(static_cast<std::size_t>(num_classes), 0);
    for (ClassIndex y : labels) ++h[static_cast<std::size_t>(y)];
    return h;
  }

  bool operator==(const Dataset&) const = default;
};

/// Gaussian blobs: per class, a center drawn from N(0, I_d), then samples
/// center + spread * N(0, I_d). Samples are stored class-major.
inline Dataset generate_blobs(int num_classes, std::size_t per_class, std::size_t dim,
                              double spread, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("generate_blobs: need at least 2 classes");
  if (per_class < 1) throw std::invalid_argument("generate_blobs: per_class must be >= 1");
  if (dim < 1) throw std::invalid_argument("generate_blobs: dim must be >= 1");
  if (!(spread >= 0.0)) throw std::invalid_argument("generate_blobs: spread must be >= 0");
  Rng rng(seed);
  const auto classes = static_cast<std::size_t>(num_classes);
  std::vector<double> centers(classes * dim);
  for (double& c : centers) c = rng.normal();

  Dataset d;
  d.num_classes = num_classes;
  d.inputs = Matrix(classes * per_class, dim);
  d.labels.reserve(classes * per_class);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t s = 0; s < per_class; ++s) {
      auto row = d.inputs.row(c * per_class + s);
      for (std::size_t j = 0; j < dim; ++j) row[j] = centers[c * dim + j] + spread * rng.normal();
      d.labels.push_back(static_cast<ClassIndex>(c));
    }
  }
  return d;
}

/// Affine map of all inputs into [0, 1] using the bounds found in `reference`
/// (values outside those bounds are clamped).
struct UnitRange {
  double lo = 0.0;
  double hi = 1.0;

  static UnitRange fit(const Dataset& reference) {
    const auto [mn, mx] = std::minmax_element(reference.inputs.data.begin(),
                                              reference.inputs.data.end());
    if (mn == reference.inputs.data.end()) return {};
    return {*mn, *mx};
  }

  void apply(Dataset& d) const {
    const double span = hi - lo;
    for (double& v : d.inputs.data) {
      const double t = span > 0.0 ? (v - lo) / span : 0.0;
      v = std::clamp(t, 0.0, 1.0);
    }
  }
};

/// Tags the dataset as rows x cols images. Inputs are not changed.
inline void set_image_shape(Dataset& d, std::size_t rows, std::size_t cols) {
  if (rows * cols != d.dim())
    throw ShapeError("image shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " does not match input dimension " + std::to_string(d.dim()));
  d.image = ImageShape{rows, cols};
}

/// Splits off the first `head_per_class` samples of each class (dataset
/// order). Returns (head, rest); both preserve relative order.
inline std::pair<Dataset, Dataset> split_head_per_class(const Dataset& d,
                                                        std::size_t head_per_class) {
  std::vector<std::size_t> taken(static_cast<std::size_t>(d.num_classes), 0);
  std::vector<std::size_t> head, rest;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto& t = taken[static_cast<std::size_t>(d.labels[i])];
    if (t < head_per_class) {
      head.push_back(i);
      ++t;
    } else {
      rest.push_back(i);
    }
  }
  return {d.subset(head), d.subset(rest)};
}

// ---------------------------------------------------------------------------
// IDX format: big-endian u32 magic (0x00000803 images, 0x00000801 labels),
// big-endian u32 dimensions, raw u8 payload.

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path,
                                                 const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(what + ": cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off,
                               const std::string& field) {
  if (b.size() < off + 4) throw FormatError(field + ": truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>((v >> 24) & 0xff), static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 8) & 0xff), static_cast<char>(v & 0xff)};
  out.write(b.data(), 4);
}

inline std::string hex32(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s = "0x";
  for (int shift = 28; shift >= 0; shift -= 4) s += digits[(v >> shift) & 0xf];
  return s;
}

}  // namespace detail

/// Reads an IDX image/label pair. Pixels are scaled by 1/255; the class
/// count is max(label) + 1 (at least 2).
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const auto img = detail::read_file_bytes(images_path, "images");
  const auto lab = detail::read_file_bytes(labels_path, "labels");

  const std::uint32_t img_magic = detail::read_be32(img, 0, "images.magic");
  if (img_magic != kIdxImageMagic)
    throw FormatError("images.magic: expected 0x00000803, got " + detail::hex32(img_magic));
  const std::uint32_t lab_magic = detail::read_be32(lab, 0, "labels.magic");
  if (lab_magic != kIdxLabelMagic)
    throw FormatError("labels.magic: expected 0x00000801, got " + detail::hex32(lab_magic));

  const std::size_t n = detail::read_be32(img, 4, "images.count");
  const std::size_t rows = detail::read_be32(img, 8, "images.rows");
  const std::size_t cols = detail::read_be32(img, 12, "images.cols");
  const std::size_t n_labels = detail::read_be32(lab, 4, "labels.count");
  if (n != n_labels)
    throw FormatError("count: images header says " + std::to_string(n) +
                      " but labels header says " + std::to_string(n_labels));
  if (n == 0) throw FormatError("images.count: dataset is empty");
  if (rows == 0 || cols == 0) throw FormatError("images.rows/cols: zero-sized image");
  const std::size_t d = rows * cols;
  if (img.size() != 16 + n * d)
    throw FormatError("images.payload: expected " + std::to_string(n * d) + " bytes, found " +
                      std::to_string(img.size() < 16 ? 0 : img.size() - 16));
  if (lab.size() != 8 + n)
    throw FormatError("labels.payload: expected " + std::to_string(n) + " bytes, found " +
                      std::to_string(lab.size() < 8 ? 0 : lab.size() - 8));

  Dataset out;
  out.inputs = Matrix(n, d);
  for (std::size_t i = 0; i < n * d; ++i) out.inputs.data[i] = img[16 + i] / 255.0;
  out.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out.labels[i] = lab[8 + i];
    max_label = std::max(max_label, out.labels[i]);
  }
  out.num_classes = std::max(2, max_label + 1);
  out.image = ImageShape{rows, cols};
  return out;
}

/// Writes an IDX pair. Inputs must lie in [0, 1]; they are quantized to
/// round(255 * v). Non-image datasets are written as 1 x dim images.
inline void write_idx(const Dataset& d, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  const ImageShape shape = d.image.value_or(ImageShape{1, d.dim()});
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error("cannot write " + images_path.string());
  detail::write_be32(img, kIdxImageMagic);
  detail::write_be32(img, static_cast<std::uint32_t>(d.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(shape.rows));
  detail::write_be32(img, static_cast<std::uint32_t>(shape.cols));
  for (double v : d.inputs.data) {
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("write_idx: input value outside [0, 1]");
    img.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0))));
  }
  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error("cannot write " + labels_path.string());
  detail::write_be32(lab, kIdxLabelMagic);
  detail::write_be32(lab, static_cast<std::uint32_t>(d.size()));
  for (ClassIndex y : d.labels) {
    if (y < 0 || y > 255) throw std::invalid_argument("write_idx: label does not fit in a byte");
    lab.put(static_cast<char>(static_cast<std::uint8_t>(y)));
  }
  if (!img || !lab) throw std::runtime_error("write_idx: I/O failure");
}

// ---------------------------------------------------------------------------
// Dirichlet partitioning.

struct PartitionPlan {
  std::vector<std::vector<std::size_t>> assignments;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  /// Seed of the draw that was accepted (seed + number of redraws).
  std::uint64_t accepted_seed = 0;

  std::size_t n_clients() const { return assignments.size(); }
};

/// Largest-remainder apportionment of `total` items by `proportions`
/// (non-negative, summing to ~1). Ties in the remainder go to the lower index.
inline std::vector<std::size_t> largest_remainder(std::span<const double> proportions,
                                                  std::size_t total) {
  const std::size_t n = proportions.size();
  std::vector<std::size_t> counts(n);
  std::vector<double> frac(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = proportions[i] * static_cast<double>(total);
    const double fl = std::floor(q);
    counts[i] = static_cast<std::size_t>(fl);
    frac[i] = q - fl;
    assigned += counts[i];
  }
  // Floating error can push the floor sum one over; trim from the smallest remainders.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  while (assigned > total) {
    for (auto it = order.rbegin(); it != order.rend() && assigned > total; ++it)
      if (counts[*it] > 0) {
        --counts[*it];
        --assigned;
      }
  }
  for (std::size_t r = 0; assigned < total; r = (r + 1) % n) {
    ++counts[order[r]];
    ++assigned;
  }
  return counts;
}

namespace detail {

// One attempt: for each class in order, draw n_clients gamma(alpha) variates,
// normalize, apportion with largest remainder, shuffle the class's sample
// indices and hand out consecutive runs to clients 0..n-1.
inline std::vector<std::vector<std::size_t>> dirichlet_attempt(const Dataset& data,
                                                               std::size_t n_clients,
                                                               double alpha, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.num_classes));
  for (std::size_t i = 0; i < data.size(); ++i)
    by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);

  std::vector<std::vector<std::size_t>> out(n_clients);
  std::vector<double> props(n_clients);
  for (auto& members : by_class) {
    double sum = 0.0;
    for (double& p : props) {
      p = rng.gamma(alpha);
      sum += p;
    }
    if (sum > 0.0) {
      for (double& p : props) p /= sum;
    } else {
      std::fill(props.begin(), props.end(), 1.0 / static_cast<double>(n_clients));
    }
    const auto counts = largest_remainder(props, members.size());
    rng.shuffle(members);
    std::size_t pos = 0;
    for (std::size_t c = 0; c < n_clients; ++c) {
      out[c].insert(out[c].end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                    members.begin() + static_cast<std::ptrdiff_t>(pos + counts[c]));
      pos += counts[c];
    }
  }
  for (auto& a : out) std::sort(a.begin(), a.end());
  return out;
}

}  // namespace detail

/// Label-skew split: per class, client shares ~ Dirichlet(alpha * 1_N).
/// Draws that leave a client empty are retried with seed + 1 (100 attempts).
inline PartitionPlan dirichlet_partition(const Dataset& data, std::size_t n_clients, double alpha,
                                         std::uint64_t seed) {
  if (n_clients < 1) throw std::invalid_argument("dirichlet_partition: need at least one client");
  if (!(alpha > 0.0)) throw std::invalid_argument("dirichlet_partition: alpha must be > 0");
  if (n_clients > data.size())
    throw std::invalid_argument("dirichlet_partition: " + std::to_string(n_clients) +
                                " clients exceed dataset size " + std::to_string(data.size()));
  constexpr int kMaxAttempts = 100;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(attempt);
    auto assignments = detail::dirichlet_attempt(data, n_clients, alpha, s);
    const bool all_nonempty = std::none_of(assignments.begin(), assignments.end(),
                                           [](const auto& a) { return a.empty(); });
    if (all_nonempty) return PartitionPlan{std::move(assignments), alpha, seed, s};
  }
  throw std::runtime_error("dirichlet_partition: no draw without empty clients after 100 attempts");
}

// ---------------------------------------------------------------------------
// Validation split.

struct ClassValidationSets {
  std::vector<Dataset> per_class;

  std::size_t num_classes() const { return per_class.size(); }

  std::vector<ClassIndex> empty_classes() const {
    std::vector<ClassIndex> out;
    for (std::size_t c = 0; c < per_class.size(); ++c)
      if (per_class[c].empty()) out.push_back(static_cast<ClassIndex>(c));
    return out;
  }

  bool all_empty() const {
    return std::all_of(per_class.begin(), per_class.end(),
                       [](const Dataset& d) { return d.empty(); });
  }
};

struct ValidationSplit {
  ClassValidationSets validation;
  Dataset holdout;
};

/// First `per_class_cap` samples of each class (test order) become V_c; the
/// remainder is the holdout test set.
inline ValidationSplit split_validation(const Dataset& test, std::size_t per_class_cap) {
  auto [head, rest] = split_head_per_class(test, per_class_cap);
  ValidationSplit out;
  out.holdout = std::move(rest);
  out.validation.per_class.resize(static_cast<std::size_t>(test.num_classes));
  std::vector<std::vector<std::size_t>> idx(static_cast<std::size_t>(test.num_classes));
  for (std::size_t i = 0; i < head.size(); ++i)
    idx[static_cast<std::size_t>(head.labels[i])].push_back(i);
  for (std::size_t c = 0; c < idx.size(); ++c) out.validation.per_class[c] = head.subset(idx[c]);
  return out;
}

}  // namespace maskfl
