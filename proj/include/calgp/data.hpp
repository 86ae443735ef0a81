#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "calgp/errors.hpp"
#include "calgp/layers.hpp"
#include "calgp/rng.hpp"
#include "calgp/tensor.hpp"

namespace calgp {

struct Dataset {
  Tensor images;         // [n, channels, h, w], values in [0,1]
  Tensor labels_onehot;  // [n, Q]
  std::vector<std::string> class_names;

  std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
  std::size_t num_classes() const { return labels_onehot.dim(1); }

  void validate() const {
    require_rank(images, 4, "dataset images");
    require_rank(labels_onehot, 2, "dataset labels");
    require(images.dim(0) == labels_onehot.dim(0),
            "dataset: image count " + std::to_string(images.dim(0)) +
                " != label count " + std::to_string(labels_onehot.dim(0)));
    for (double v : images.values())
      require(v >= 0.0 && v <= 1.0, "dataset: pixel outside [0,1]");
    require_one_hot(labels_onehot, "dataset labels");
  }

  std::size_t label_of(std::size_t i) const {
    for (std::size_t j = 0; j < num_classes(); ++j)
      if (labels_onehot(i, j) == 1.0) return j;
    throw std::invalid_argument("dataset: row " + std::to_string(i) + " has no label");
  }
};

namespace detail {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline std::uint32_t read_be_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw io_error("idx: truncated file " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_be_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

// Parses a big-endian IDX image/label pair (the MNIST layout): images file
// with magic 0x00000803 then count/rows/cols and raw u8 pixels, labels file
// with magic 0x00000801 then count and raw u8 labels. Pixels are divided by
// 255; labels are one-hot encoded over num_classes (0 = use max label + 1).
inline Dataset load_idx_pair(const std::string& images_path,
                             const std::string& labels_path,
                             std::size_t num_classes = 0) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw io_error("idx: cannot open " + images_path);
  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw io_error("idx: cannot open " + labels_path);

  const auto magic_i = detail::read_be_u32(fi, images_path);
  if (magic_i != detail::kIdxImagesMagic)
    throw io_error("idx: bad image magic in " + images_path + ": expected 0x803, found 0x" +
                   [&] { char b[16]; std::snprintf(b, sizeof b, "%x", magic_i); return std::string(b); }());
  const std::size_t count = detail::read_be_u32(fi, images_path);
  const std::size_t rows = detail::read_be_u32(fi, images_path);
  const std::size_t cols = detail::read_be_u32(fi, images_path);

  const auto magic_l = detail::read_be_u32(fl, labels_path);
  if (magic_l != detail::kIdxLabelsMagic)
    throw io_error("idx: bad label magic in " + labels_path + ": expected 0x801, found 0x" +
                   [&] { char b[16]; std::snprintf(b, sizeof b, "%x", magic_l); return std::string(b); }());
  const std::size_t lcount = detail::read_be_u32(fl, labels_path);
  if (count != lcount)
    throw io_error("idx: image count " + std::to_string(count) + " in " + images_path +
                   " != label count " + std::to_string(lcount) + " in " + labels_path);
  require(count > 0 && rows > 0 && cols > 0, "idx: empty dataset in " + images_path);

  std::vector<unsigned char> pixels(count * rows * cols);
  fi.read(reinterpret_cast<char*>(pixels.data()), std::streamsize(pixels.size()));
  if (std::size_t(fi.gcount()) != pixels.size())
    throw io_error("idx: truncated image data in " + images_path);
  std::vector<unsigned char> labels(count);
  fl.read(reinterpret_cast<char*>(labels.data()), std::streamsize(labels.size()));
  if (std::size_t(fl.gcount()) != labels.size())
    throw io_error("idx: truncated label data in " + labels_path);

  std::size_t q = num_classes;
  if (q == 0) {
    unsigned char mx = 0;
    for (unsigned char l : labels) mx = std::max(mx, l);
    q = std::size_t(mx) + 1;
  }
  require(q >= 2, "idx: need at least 2 classes, got " + std::to_string(q));
  for (unsigned char l : labels)
    if (l >= q)
      throw io_error("idx: label " + std::to_string(int(l)) + " in " + labels_path +
                     " exceeds class count " + std::to_string(q));

  Dataset ds;
  ds.images = Tensor({count, 1, rows, cols});
  for (std::size_t i = 0; i < pixels.size(); ++i)
    ds.images[i] = double(pixels[i]) / 255.0;
  ds.labels_onehot = Tensor({count, q});
  for (std::size_t i = 0; i < count; ++i) ds.labels_onehot(i, labels[i]) = 1.0;
  for (std::size_t j = 0; j < q; ++j) ds.class_names.push_back(std::to_string(j));
  return ds;
}

// Inverse of load_idx_pair for single-channel datasets; byte-exact round trip.
inline void write_idx_pair(const Dataset& ds, const std::string& images_path,
                           const std::string& labels_path) {
  require(ds.images.dim(1) == 1, "write_idx: only single-channel images");
  std::ofstream fi(images_path, std::ios::binary);
  if (!fi) throw io_error("idx: cannot write " + images_path);
  std::ofstream fl(labels_path, std::ios::binary);
  if (!fl) throw io_error("idx: cannot write " + labels_path);
  const std::size_t n = ds.size(), rows = ds.images.dim(2), cols = ds.images.dim(3);
  detail::write_be_u32(fi, detail::kIdxImagesMagic);
  detail::write_be_u32(fi, std::uint32_t(n));
  detail::write_be_u32(fi, std::uint32_t(rows));
  detail::write_be_u32(fi, std::uint32_t(cols));
  std::vector<unsigned char> pixels(n * rows * cols);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    pixels[i] = static_cast<unsigned char>(std::lround(ds.images[i] * 255.0));
  fi.write(reinterpret_cast<const char*>(pixels.data()), std::streamsize(pixels.size()));
  detail::write_be_u32(fl, detail::kIdxLabelsMagic);
  detail::write_be_u32(fl, std::uint32_t(n));
  std::vector<unsigned char> labels(n);
  for (std::size_t i = 0; i < n; ++i)
    labels[i] = static_cast<unsigned char>(ds.label_of(i));
  fl.write(reinterpret_cast<const char*>(labels.data()), std::streamsize(labels.size()));
  if (!fi || !fl) throw io_error("idx: write failed");
}

// Draws exactly n/Q examples per class uniformly without replacement and
// shuffles the combined order.
inline Dataset balanced_subsample(const Dataset& ds, std::size_t n, Rng& rng) {
  const std::size_t q = ds.num_classes();
  require(n >= 1 && n % q == 0,
          "balanced_subsample: n = " + std::to_string(n) +
              " is not divisible by the class count " + std::to_string(q));
  const std::size_t per = n / q;
  std::vector<std::vector<std::size_t>> by_class(q);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.label_of(i)].push_back(i);
  for (std::size_t c = 0; c < q; ++c)
    if (by_class[c].size() < per)
      throw std::invalid_argument(
          "balanced_subsample: class " + std::to_string(c) + " has only " +
          std::to_string(by_class[c].size()) + " examples, need " + std::to_string(per));

  std::vector<std::size_t> chosen;
  chosen.reserve(n);
  for (std::size_t c = 0; c < q; ++c) {
    auto& pool = by_class[c];
    // partial Fisher-Yates: the first `per` entries are a uniform draw
    for (std::size_t i = 0; i < per; ++i)
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + std::ptrdiff_t(per));
  }
  auto order = rng.permutation(n);

  const std::size_t px = ds.images.size() / ds.size();
  Dataset out;
  out.images = Tensor({n, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
  out.labels_onehot = Tensor({n, q});
  out.class_names = ds.class_names;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = chosen[order[i]];
    for (std::size_t j = 0; j < px; ++j) out.images[i * px + j] = ds.images[src * px + j];
    for (std::size_t j = 0; j < q; ++j)
      out.labels_onehot(i, j) = ds.labels_onehot(src, j);
  }
  return out;
}

// Gaussian clusters centered at separation * (unit directions), rendered as
// flat [1,1,d] images and rescaled into [0,1] by one global affine map, which
// keeps the class geometry intact.
inline Dataset synthetic_blobs(std::size_t n, std::size_t q, std::size_t d,
                               double separation, Rng& rng) {
  require(q >= 2, "synthetic_blobs: need at least 2 classes");
  require(n >= q, "synthetic_blobs: need at least one point per class");
  require(q <= 2 * d, "synthetic_blobs: class count " + std::to_string(q) +
                          " exceeds available unit directions 2d = " +
                          std::to_string(2 * d));
  Tensor raw({n, d});
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % q;
    labels[i] = c;
    const std::size_t axis = c % d;
    const double sign = c < d ? 1.0 : -1.0;
    for (std::size_t j = 0; j < d; ++j)
      raw(i, j) = (j == axis ? sign * separation : 0.0) + rng.normal();
  }
  auto order = rng.permutation(n);

  double lo = raw[0], hi = raw[0];
  for (double v : raw.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;

  Dataset ds;
  ds.images = Tensor({n, 1, 1, d});
  ds.labels_onehot = Tensor({n, q});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = order[i];
    for (std::size_t j = 0; j < d; ++j)
      ds.images[i * d + j] = (raw(src, j) - lo) / span;
    ds.labels_onehot(i, labels[src]) = 1.0;
  }
  for (std::size_t j = 0; j < q; ++j) ds.class_names.push_back(std::to_string(j));
  return ds;
}

// One epoch of minibatch index sets: a fresh permutation split into
// consecutive blocks, so the sets are disjoint and cover 0..n-1.
inline std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t m,
                                                         Rng& rng) {
  require(m >= 1 && m <= n, "minibatches: batch size " + std::to_string(m) +
                                " not in [1, " + std::to_string(n) + "]");
  auto perm = rng.permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += m) {
    const std::size_t len = std::min(m, n - start);
    out.emplace_back(perm.begin() + std::ptrdiff_t(start),
                     perm.begin() + std::ptrdiff_t(start + len));
  }
  return out;
}

// Out-of-distribution substitute: one fixed pixel permutation applied to
// every image (all channels alike).
inline Dataset pixel_permuted(const Dataset& ds, Rng& rng) {
  const std::size_t h = ds.images.dim(2), w = ds.images.dim(3);
  const std::size_t c = ds.images.dim(1);
  auto perm = rng.permutation(h * w);
  Dataset out = ds;
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * h * w;
      for (std::size_t p = 0; p < h * w; ++p)
        out.images[base + p] = ds.images[base + perm[p]];
    }
  return out;
}

}  // namespace calgp
