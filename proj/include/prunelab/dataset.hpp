#pragma once

#include <prunelab/error.hpp>
#include <prunelab/tensor.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace prunelab {

// In-memory labeled image set, images stored [N, C, H, W] contiguous.
struct Dataset {
  std::array<std::size_t, 3> image_shape{3, 32, 32};
  std::size_t num_classes = 10;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_volume() const { return image_shape[0] * image_shape[1] * image_shape[2]; }

  Tensor images(std::span<const std::size_t> indices) const {
    const std::size_t vol = image_volume();
    Tensor out({indices.size(), image_shape[0], image_shape[1], image_shape[2]});
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy_n(pixels.data() + indices[i] * vol, vol, out.data() + i * vol);
    }
    return out;
  }

  std::vector<int> labels_of(std::span<const std::size_t> indices) const {
    std::vector<int> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
    return out;
  }
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

inline std::vector<std::size_t> shuffled_indices(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  // Fisher-Yates with explicit draws so the order does not depend on the library's shuffle.
  for (std::size_t i = count; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

// Splits `order` into consecutive batches (the last one may be short) and calls fn(Batch).
template <class Fn>
void for_each_batch(const Dataset& data, std::span<const std::size_t> order, std::size_t batch_size, Fn&& fn) {
  if (batch_size == 0) fail(ErrorKind::config, "batch_size must be positive");
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto chunk = order.subspan(start, std::min(batch_size, order.size() - start));
    fn(Batch{data.images(chunk), data.labels_of(chunk)});
  }
}

// Deterministic calibration sample: `count` batches of `batch_size` drawn from a seeded permutation.
inline std::vector<Batch> sample_batches(const Dataset& data, std::size_t count, std::size_t batch_size,
                                         std::uint64_t seed) {
  if (data.size() == 0) fail(ErrorKind::data, "calibration dataset is empty");
  const auto perm = shuffled_indices(data.size(), seed);
  std::vector<Batch> out;
  std::size_t cursor = 0;
  for (std::size_t b = 0; b < count; ++b) {
    std::vector<std::size_t> idx(batch_size);
    for (auto& i : idx) i = perm[cursor++ % perm.size()];
    out.push_back(Batch{data.images(idx), data.labels_of(idx)});
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// CIFAR binary format

enum class CifarVariant { c10, c100 };

struct Normalization {
  std::vector<float> mean;
  std::vector<float> stddev;

  static Normalization cifar10() { return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}}; }
  static Normalization cifar100() { return {{0.5071f, 0.4865f, 0.4409f}, {0.2673f, 0.2564f, 0.2762f}}; }
};

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;

inline std::size_t cifar_record_size(CifarVariant v) { return (v == CifarVariant::c10 ? 1 : 2) + kCifarPixels; }

// Record: label byte (c10) or coarse+fine label bytes (c100, fine is kept), then planar R,G,B 32x32.
inline Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes, CifarVariant variant,
                                  const Normalization& norm, std::optional<std::size_t> expected_records = {}) {
  const std::size_t record = cifar_record_size(variant);
  if (bytes.empty()) fail(ErrorKind::format, "CIFAR file is empty");
  if (bytes.size() % record != 0) {
    fail(ErrorKind::format, "CIFAR file truncated: trailing record starts at byte offset " +
                                std::to_string(bytes.size() - bytes.size() % record) + " but only " +
                                std::to_string(bytes.size() % record) + " of " + std::to_string(record) +
                                " bytes are present");
  }
  const std::size_t count = bytes.size() / record;
  if (expected_records && *expected_records != count) {
    fail(ErrorKind::format, "CIFAR file holds " + std::to_string(count) + " records, expected " +
                                std::to_string(*expected_records) + " (byte offset " +
                                std::to_string(bytes.size()) + ")");
  }
  if (norm.mean.size() != 3 || norm.stddev.size() != 3) fail(ErrorKind::config, "CIFAR normalization needs 3 channels");
  Dataset ds;
  ds.image_shape = {3, 32, 32};
  ds.num_classes = variant == CifarVariant::c10 ? 10 : 100;
  ds.pixels.resize(count * kCifarPixels);
  ds.labels.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    const std::uint8_t* rec = bytes.data() + r * record;
    const std::size_t header = variant == CifarVariant::c10 ? 1 : 2;
    const int label = rec[header - 1];
    if (static_cast<std::size_t>(label) >= ds.num_classes) {
      fail(ErrorKind::format, "label " + std::to_string(label) + " out of range at byte offset " +
                                  std::to_string(r * record + header - 1));
    }
    ds.labels[r] = label;
    for (std::size_t i = 0; i < kCifarPixels; ++i) {
      const std::size_t c = i / 1024;
      ds.pixels[r * kCifarPixels + i] = (rec[header + i] / 255.0f - norm.mean[c]) / norm.stddev[c];
    }
  }
  return ds;
}

inline Dataset load_cifar_binary(const std::string& path, CifarVariant variant, const Normalization& norm,
                                 std::optional<std::size_t> expected_records = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::data, "cannot open CIFAR file " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_cifar_binary(bytes, variant, norm, expected_records);
  } catch (const Error& e) {
    fail(e.kind(), path + ": " + std::string(e.what()));
  }
}

// ---------------------------------------------------------------------------------------------
// Seeded synthetic task

struct SyntheticDatasetSpec {
  std::size_t num_classes = 4;
  std::size_t samples_per_class = 200;
  std::array<std::size_t, 3> image_shape{3, 16, 16};
  double margin = 1.0;  // RMS amplitude of each class pattern relative to unit pixel noise
  std::uint64_t seed = 0;

  friend bool operator==(const SyntheticDatasetSpec&, const SyntheticDatasetSpec&) = default;

  void check() const {
    if (num_classes < 2) fail(ErrorKind::config, "synthetic num_classes must be at least 2");
    if (samples_per_class == 0) fail(ErrorKind::config, "synthetic samples_per_class must be positive");
    if (image_shape[0] == 0 || image_shape[1] == 0 || image_shape[2] == 0) {
      fail(ErrorKind::config, "synthetic image_shape extents must be positive");
    }
    if (!(margin > 0.0)) fail(ErrorKind::config, "synthetic margin must be positive");
  }
};

// Class centroids: per channel a constant offset plus one low-frequency cosine, scaled to RMS = margin.
inline std::vector<std::vector<float>> synthetic_centroids(const SyntheticDatasetSpec& spec) {
  spec.check();
  const auto [c, h, w] = spec.image_shape;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::vector<std::vector<float>> centroids(spec.num_classes, std::vector<float>(c * h * w));
  for (auto& centroid : centroids) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double offset = normal(rng), amplitude = normal(rng);
      const double fy = static_cast<double>(rng() % 3), fx = static_cast<double>(rng() % 3), phi = phase(rng);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double arg = 2.0 * std::numbers::pi * (fy * y / h + fx * x / w) + phi;
          centroid[(ch * h + y) * w + x] = static_cast<float>(offset + amplitude * std::cos(arg));
        }
      }
    }
    double sq = 0.0;
    for (float v : centroid) sq += static_cast<double>(v) * v;
    const double scale = spec.margin / std::sqrt(sq / static_cast<double>(centroid.size()));
    for (auto& v : centroid) v = static_cast<float>(v * scale);
  }
  return centroids;
}

// Samples are centroid + N(0,1) pixel noise; classes interleave (label = index mod K).
// `stream` selects an independent noise draw over the same centroids (e.g. 0 train, 1 validation).
inline Dataset generate_synthetic(const SyntheticDatasetSpec& spec, std::uint64_t stream = 0) {
  const auto centroids = synthetic_centroids(spec);
  Dataset ds;
  ds.image_shape = spec.image_shape;
  ds.num_classes = spec.num_classes;
  const std::size_t vol = ds.image_volume();
  const std::size_t total = spec.num_classes * spec.samples_per_class;
  ds.pixels.resize(total * vol);
  ds.labels.resize(total);
  std::mt19937_64 rng(spec.seed ^ (0x9E3779B97F4A7C15ull * (stream + 1)));
  std::normal_distribution<float> noise(0.0f, 1.0f);
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t label = i % spec.num_classes;
    ds.labels[i] = static_cast<int>(label);
    for (std::size_t j = 0; j < vol; ++j) ds.pixels[i * vol + j] = centroids[label][j] + noise(rng);
  }
  return ds;
}

}  // namespace prunelab
