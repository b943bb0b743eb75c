#pragma once

// Dataset ingestion (CIFAR-10 binary, MNIST IDX, STL-10 binary, synthetic),
// augmentation, deterministic batching and a bounded prefetch queue.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <queue>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "odenet/tensor.hpp"

namespace odenet::data {

namespace fs = std::filesystem;

class DataError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Split { train, test };

/// Images stored as raw 8-bit pixels in (N, C, H, W) order.
struct Dataset {
  std::string name;
  Split split = Split::train;
  std::size_t channels = 0;
  std::size_t hw = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * hw * hw; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * image_size(), image_size()};
  }

  void validate() const {
    if (pixels.size() != labels.size() * image_size())
      throw DataError(name + ": " + std::to_string(pixels.size()) + " pixel bytes for " +
                      std::to_string(labels.size()) + " images of " + std::to_string(image_size()) + " bytes");
    for (int l : labels)
      if (l < 0 || l >= num_classes) throw DataError(name + ": label " + std::to_string(l) + " out of range");
  }

  /// First n examples (or all, if n is 0 or larger than the set).
  Dataset head(std::size_t n) const {
    if (n == 0 || n >= size()) return *this;
    Dataset d = *this;
    d.labels.resize(n);
    d.pixels.resize(n * image_size());
    return d;
  }

  /// Class-balanced subset: walks the set in order, taking up to
  /// ceil(n / classes) examples per class until n are collected.
  Dataset balanced_subset(std::size_t n) const {
    if (n == 0 || n >= size()) return *this;
    const std::size_t per = (n + num_classes - 1) / static_cast<std::size_t>(num_classes);
    std::vector<std::size_t> taken(static_cast<std::size_t>(num_classes), 0);
    Dataset d = *this;
    d.labels.clear();
    d.pixels.clear();
    for (std::size_t i = 0; i < size() && d.size() < n; ++i) {
      auto& t = taken[static_cast<std::size_t>(labels[i])];
      if (t == per) continue;
      ++t;
      d.labels.push_back(labels[i]);
      auto img = image(i);
      d.pixels.insert(d.pixels.end(), img.begin(), img.end());
    }
    return d;
  }
};

// ---------------------------------------------------------------------------
// File helpers

/// Reads a whole file; if `path` is missing but `path.gz` exists, inflates it.
inline std::vector<std::uint8_t> read_file(const fs::path& path) {
  if (fs::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
  }
  fs::path gz = path;
  gz += ".gz";
  if (!fs::exists(gz)) throw DataError("missing data file " + path.string());
  gzFile f = gzopen(gz.string().c_str(), "rb");
  if (!f) throw DataError("cannot open " + gz.string());
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf;
  int n;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.insert(out.end(), buf.begin(), buf.begin() + n);
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw DataError("corrupt gzip stream in " + gz.string());
  return out;
}

inline void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// CIFAR-10: records of 1 label byte + 3072 channel-major pixel bytes.

inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

inline Dataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& origin,
                             std::optional<std::size_t> expected_records = std::nullopt) {
  if (expected_records && bytes.size() != *expected_records * kCifarRecord)
    throw DataError(origin + ": expected " + std::to_string(*expected_records * kCifarRecord) + " bytes, found " +
                    std::to_string(bytes.size()));
  if (bytes.size() % kCifarRecord != 0)
    throw DataError(origin + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                    std::to_string(kCifarRecord) + "-byte record");
  Dataset d{"cifar10", Split::train, 3, 32, 10, {}, {}};
  const std::size_t n = bytes.size() / kCifarRecord;
  d.labels.reserve(n);
  d.pixels.reserve(n * (kCifarRecord - 1));
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] > 9)
      throw DataError(origin + ": corrupt record " + std::to_string(i) + " (label byte " + std::to_string(rec[0]) + ")");
    d.labels.push_back(rec[0]);
    d.pixels.insert(d.pixels.end(), rec + 1, rec + kCifarRecord);
  }
  return d;
}

inline Dataset load_cifar10_file(const fs::path& path) {
  auto bytes = read_file(path);
  return parse_cifar10(bytes, path.string());
}

inline std::vector<std::uint8_t> encode_cifar10(const Dataset& d) {
  std::vector<std::uint8_t> out;
  out.reserve(d.size() * kCifarRecord);
  for (std::size_t i = 0; i < d.size(); ++i) {
    out.push_back(static_cast<std::uint8_t>(d.labels[i]));
    auto img = d.image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

inline void append(Dataset& into, const Dataset& from) {
  into.labels.insert(into.labels.end(), from.labels.begin(), from.labels.end());
  into.pixels.insert(into.pixels.end(), from.pixels.begin(), from.pixels.end());
}

/// Standard binary distribution: data_batch_{1..5}.bin and test_batch.bin,
/// each exactly 10,000 records.
inline std::pair<Dataset, Dataset> load_cifar10(const fs::path& dir) {
  Dataset train{"cifar10", Split::train, 3, 32, 10, {}, {}};
  for (int b = 1; b <= 5; ++b) {
    const fs::path p = dir / ("data_batch_" + std::to_string(b) + ".bin");
    append(train, parse_cifar10(read_file(p), p.string(), kCifarRecordsPerFile));
  }
  const fs::path tp = dir / "test_batch.bin";
  Dataset test = parse_cifar10(read_file(tp), tp.string(), kCifarRecordsPerFile);
  test.split = Split::test;
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// MNIST IDX (big-endian headers). Images are promoted to 32x32 with a
// 2-pixel zero border.

inline std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline constexpr std::uint32_t kIdxImagesMagic = 2051;
inline constexpr std::uint32_t kIdxLabelsMagic = 2049;

inline Dataset parse_mnist(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                           const std::string& origin, std::size_t border = 2) {
  if (images.size() < 16 || labels.size() < 8) throw DataError(origin + ": truncated IDX header");
  if (read_be32(images.data()) != kIdxImagesMagic)
    throw DataError(origin + ": image file magic " + std::to_string(read_be32(images.data())) + ", expected 2051");
  if (read_be32(labels.data()) != kIdxLabelsMagic)
    throw DataError(origin + ": label file magic " + std::to_string(read_be32(labels.data())) + ", expected 2049");
  const std::size_t n = read_be32(images.data() + 4);
  const std::size_t rows = read_be32(images.data() + 8), cols = read_be32(images.data() + 12);
  if (read_be32(labels.data() + 4) != n)
    throw DataError(origin + ": " + std::to_string(n) + " images but " + std::to_string(read_be32(labels.data() + 4)) +
                    " labels");
  if (rows != cols) throw DataError(origin + ": non-square images");
  if (images.size() != 16 + n * rows * cols || labels.size() != 8 + n)
    throw DataError(origin + ": expected " + std::to_string(16 + n * rows * cols) + " image bytes, found " +
                    std::to_string(images.size()));
  const std::size_t hw = rows + 2 * border;
  Dataset d{"mnist", Split::train, 1, hw, 10, std::vector<std::uint8_t>(n * hw * hw, 0), {}};
  d.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int l = labels[8 + i];
    if (l > 9) throw DataError(origin + ": corrupt label " + std::to_string(l) + " at " + std::to_string(i));
    d.labels.push_back(l);
    const std::uint8_t* src = images.data() + 16 + i * rows * cols;
    std::uint8_t* dst = d.pixels.data() + i * hw * hw;
    for (std::size_t y = 0; y < rows; ++y) std::copy_n(src + y * cols, cols, dst + (y + border) * hw + border);
  }
  return d;
}

/// IDX encoding of `d`, cropping `border` pixels off each side.
inline std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> encode_mnist(const Dataset& d,
                                                                                   std::size_t border = 2) {
  const std::size_t side = d.hw - 2 * border;
  std::vector<std::uint8_t> img, lab;
  put_be32(img, kIdxImagesMagic);
  put_be32(img, static_cast<std::uint32_t>(d.size()));
  put_be32(img, static_cast<std::uint32_t>(side));
  put_be32(img, static_cast<std::uint32_t>(side));
  put_be32(lab, kIdxLabelsMagic);
  put_be32(lab, static_cast<std::uint32_t>(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i) {
    lab.push_back(static_cast<std::uint8_t>(d.labels[i]));
    auto p = d.image(i);
    for (std::size_t y = 0; y < side; ++y)
      img.insert(img.end(), p.begin() + (y + border) * d.hw + border, p.begin() + (y + border) * d.hw + border + side);
  }
  return {img, lab};
}

inline std::pair<Dataset, Dataset> load_mnist(const fs::path& dir) {
  auto one = [&](const std::string& prefix, Split split) {
    const fs::path ip = dir / (prefix + "-images-idx3-ubyte");
    const fs::path lp = dir / (prefix + "-labels-idx1-ubyte");
    Dataset d = parse_mnist(read_file(ip), read_file(lp), ip.string());
    d.split = split;
    return d;
  };
  return {one("train", Split::train), one("t10k", Split::test)};
}

// ---------------------------------------------------------------------------
// STL-10 binary: uint8 images 3x96x96 stored column-major per channel,
// labels 1..10 in a separate file.

inline Dataset parse_stl10(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                           const std::string& origin) {
  constexpr std::size_t side = 96, img_bytes = 3 * side * side;
  if (images.size() % img_bytes != 0 || images.size() / img_bytes != labels.size())
    throw DataError(origin + ": " + std::to_string(images.size()) + " image bytes do not match " +
                    std::to_string(labels.size()) + " labels of " + std::to_string(img_bytes) + "-byte images");
  Dataset d{"stl10", Split::train, 3, side, 10, std::vector<std::uint8_t>(images.size()), {}};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 1 || labels[i] > 10) throw DataError(origin + ": corrupt label " + std::to_string(labels[i]));
    d.labels.push_back(labels[i] - 1);
    const std::uint8_t* src = images.data() + i * img_bytes;
    std::uint8_t* dst = d.pixels.data() + i * img_bytes;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t x = 0; x < side; ++x)
        for (std::size_t y = 0; y < side; ++y) dst[(c * side + y) * side + x] = src[(c * side + x) * side + y];
  }
  return d;
}

inline std::pair<Dataset, Dataset> load_stl10(const fs::path& dir) {
  Dataset train = parse_stl10(read_file(dir / "train_X.bin"), read_file(dir / "train_y.bin"), (dir / "train_X.bin").string());
  Dataset test = parse_stl10(read_file(dir / "test_X.bin"), read_file(dir / "test_y.bin"), (dir / "test_X.bin").string());
  test.split = Split::test;
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Synthetic: each class is a fixed random low-frequency template; examples add
// per-pixel noise and a random brightness offset.

inline Dataset make_synthetic(std::size_t n, std::size_t channels, std::size_t hw, int classes, std::uint64_t seed,
                              Split split = Split::train, double noise = 40.0) {
  std::mt19937_64 template_rng(0x5eedULL + static_cast<std::uint64_t>(classes) * 7919 + hw);
  std::vector<std::vector<double>> templates(static_cast<std::size_t>(classes));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& t : templates) {
    const std::size_t coarse = 4;
    std::vector<double> grid(channels * coarse * coarse);
    for (auto& g : grid) g = nd(template_rng);
    t.resize(channels * hw * hw);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < hw; ++y)
        for (std::size_t x = 0; x < hw; ++x)
          t[(c * hw + y) * hw + x] = 128.0 + 60.0 * grid[(c * coarse + y * coarse / hw) * coarse + x * coarse / hw];
  }
  std::mt19937_64 rng(seed);
  Dataset d{"synthetic", split, channels, hw, classes, {}, {}};
  d.pixels.reserve(n * channels * hw * hw);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
    const double shift = 20.0 * nd(rng);
    d.labels.push_back(c);
    for (double v : templates[static_cast<std::size_t>(c)]) {
      const double p = std::clamp(v + shift + noise * nd(rng), 0.0, 255.0);
      d.pixels.push_back(static_cast<std::uint8_t>(std::lround(p)));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class Standardize { none, per_image, global };

struct AugmentConfig {
  int pad = 4;
  bool random_crop = true;
  bool hflip = true;
  Standardize standardize = Standardize::per_image;
  /// Per-channel statistics for Standardize::global.
  std::vector<double> global_mean, global_std;

  void validate() const {
    if (pad < 0) throw std::invalid_argument("augment pad must be >= 0");
    if (standardize == Standardize::global && (global_mean.empty() || global_mean.size() != global_std.size()))
      throw std::invalid_argument("global standardization needs per-channel mean and std");
  }
};

inline Standardize parse_standardize(const std::string& s) {
  if (s == "per_image") return Standardize::per_image;
  if (s == "global") return Standardize::global;
  if (s == "none") return Standardize::none;
  throw std::invalid_argument("standardize must be per_image, global or none, got '" + s + "'");
}

inline const char* to_string(Standardize s) {
  switch (s) {
    case Standardize::per_image: return "per_image";
    case Standardize::global: return "global";
    case Standardize::none: return "none";
  }
  return "?";
}

/// Per-channel mean/std of a dataset's raw pixels.
inline void fit_global_stats(const Dataset& d, AugmentConfig& cfg) {
  const std::size_t plane = d.hw * d.hw;
  cfg.global_mean.assign(d.channels, 0.0);
  cfg.global_std.assign(d.channels, 0.0);
  for (std::size_t c = 0; c < d.channels; ++c) {
    double s = 0, sq = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const std::uint8_t* p = d.pixels.data() + i * d.image_size() + c * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        s += p[k];
        sq += double(p[k]) * p[k];
      }
    }
    const double n = double(d.size() * plane);
    cfg.global_mean[c] = s / n;
    cfg.global_std[c] = std::sqrt(std::max(sq / n - cfg.global_mean[c] * cfg.global_mean[c], 1e-8));
  }
}

/// Image as floats in (C, H, W).
struct Image {
  std::size_t channels = 0, hw = 0;
  std::vector<float> values;
};

inline Image to_image(std::span<const std::uint8_t> px, std::size_t channels, std::size_t hw) {
  return {channels, hw, std::vector<float>(px.begin(), px.end())};
}

inline void standardize(Image& img, const AugmentConfig& cfg) {
  if (cfg.standardize == Standardize::none) return;
  if (cfg.standardize == Standardize::per_image) {
    double s = 0;
    for (float v : img.values) s += v;
    const double mean = s / double(img.values.size());
    double sq = 0;
    for (float v : img.values) sq += (v - mean) * (v - mean);
    const double sd = std::max(std::sqrt(sq / double(img.values.size())), 1e-8);
    for (float& v : img.values) v = static_cast<float>((v - mean) / sd);
    return;
  }
  const std::size_t plane = img.hw * img.hw;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t k = 0; k < plane; ++k) {
      float& v = img.values[c * plane + k];
      v = static_cast<float>((v - cfg.global_mean[c]) / cfg.global_std[c]);
    }
}

/// Offsets chosen by one augmentation draw; exposed for tests.
struct CropFlip {
  std::size_t dy = 0, dx = 0;
  bool flip = false;
};

inline CropFlip draw_crop_flip(const AugmentConfig& cfg, std::mt19937_64& rng) {
  CropFlip cf;
  const auto span = static_cast<std::size_t>(2 * cfg.pad);
  if (cfg.random_crop && span > 0) {
    std::uniform_int_distribution<std::size_t> off(0, span);
    cf.dy = off(rng);
    cf.dx = off(rng);
  } else {
    cf.dy = cf.dx = static_cast<std::size_t>(cfg.pad);
  }
  if (cfg.hflip) cf.flip = std::bernoulli_distribution(0.5)(rng);
  return cf;
}

/// Train-time path: zero-pad -> random crop back to H x W -> random
/// horizontal flip -> standardization.
inline Image augment(const Image& in, const AugmentConfig& cfg, std::mt19937_64& rng) {
  const CropFlip cf = draw_crop_flip(cfg, rng);
  const std::size_t hw = in.hw, pad = static_cast<std::size_t>(cfg.pad);
  Image out{in.channels, hw, std::vector<float>(in.values.size(), 0.0f)};
  for (std::size_t c = 0; c < in.channels; ++c)
    for (std::size_t y = 0; y < hw; ++y)
      for (std::size_t x = 0; x < hw; ++x) {
        // position in the padded (side x side) canvas
        const std::size_t py = y + cf.dy, px = (cf.flip ? hw - 1 - x : x) + cf.dx;
        float v = 0.0f;
        if (py >= pad && px >= pad && py < pad + hw && px < pad + hw) v = in.values[(c * hw + py - pad) * hw + px - pad];
        out.values[(c * hw + y) * hw + x] = v;
      }
  standardize(out, cfg);
  return out;
}

/// Test-time path: standardization only.
inline Image preprocess_eval(const Image& in, const AugmentConfig& cfg) {
  Image out = in;
  standardize(out, cfg);
  return out;
}

// ---------------------------------------------------------------------------
// Batching

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E5CBULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Example order for one epoch, a pure function of (n, seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// Index groups for one pass. Training drops the last partial batch and
/// shuffles per epoch; evaluation keeps every example in order.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t shuffle_seed,
                                                     std::uint64_t epoch, Split split) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order;
  if (split == Split::train) {
    order = epoch_order(n, shuffle_seed, epoch);
  } else {
    order.resize(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    const std::size_t end = std::min(n, i + batch_size);
    if (split == Split::train && end - i < batch_size) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

template <typename T>
struct Batch {
  Tensor<T> images;
  std::vector<int> labels;
};

/// Materializes a batch. In training mode each example's augmentation RNG is
/// keyed by (seed, epoch, position in epoch), so the result does not depend on
/// which thread builds it or when.
template <typename T>
Batch<T> make_batch(const Dataset& d, std::span<const std::size_t> idx, const AugmentConfig& cfg, bool train,
                    std::uint64_t seed, std::uint64_t epoch, std::size_t first_position) {
  Batch<T> b{Tensor<T>(Shape{idx.size(), d.channels, d.hw, d.hw}), {}};
  b.labels.reserve(idx.size());
  const std::size_t isz = d.image_size();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    Image img = to_image(d.image(idx[k]), d.channels, d.hw);
    if (train) {
      std::mt19937_64 rng(mix_seed(mix_seed(seed, epoch), first_position + k));
      img = augment(img, cfg, rng);
    } else {
      img = preprocess_eval(img, cfg);
    }
    std::copy(img.values.begin(), img.values.end(), b.images.data() + k * isz);
    b.labels.push_back(d.labels[idx[k]]);
  }
  return b;
}

/// Background producer feeding a bounded FIFO. Items are produced by index,
/// in order, so consumers see the same sequence regardless of timing.
template <typename Item>
class Prefetcher {
 public:
  Prefetcher(std::size_t count, std::size_t capacity, std::function<Item(std::size_t)> produce)
      : count_(count), capacity_(std::max<std::size_t>(1, capacity)), produce_(std::move(produce)) {
    worker_ = std::thread([this] { run(); });
  }
  Prefetcher(const Prefetcher&) = delete;
  Prefetcher& operator=(const Prefetcher&) = delete;
  ~Prefetcher() {
    {
      std::lock_guard lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  /// Next item, or nullopt after `count` items.
  std::optional<Item> next() {
    std::unique_lock lk(mu_);
    if (consumed_ == count_) return std::nullopt;
    cv_.wait(lk, [&] { return !queue_.empty() || error_; });
    if (queue_.empty() && error_) std::rethrow_exception(error_);
    Item it = std::move(queue_.front());
    queue_.pop();
    ++consumed_;
    cv_.notify_all();
    return it;
  }

 private:
  void run() {
    for (std::size_t i = 0; i < count_; ++i) {
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return stop_ || queue_.size() < capacity_; });
        if (stop_) return;
      }
      try {
        Item it = produce_(i);
        std::lock_guard lk(mu_);
        queue_.push(std::move(it));
      } catch (...) {
        std::lock_guard lk(mu_);
        error_ = std::current_exception();
        cv_.notify_all();
        return;
      }
      cv_.notify_all();
    }
  }

  std::size_t count_, capacity_;
  std::function<Item(std::size_t)> produce_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::queue<Item> queue_;
  std::size_t consumed_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
  std::thread worker_;
};

}  // namespace odenet::data
