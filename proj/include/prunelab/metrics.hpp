#pragma once

#include <prunelab/dataset.hpp>
#include <prunelab/error.hpp>
#include <prunelab/model.hpp>

#include <array>
#include <chrono>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace prunelab {

// ---------------------------------------------------------------------------------------------
// Complexity

inline constexpr const char* kFlopConvention =
    "FLOPs per forward pass at batch 1: conv/linear 1 per multiply-accumulate; batchnorm 2 per output "
    "element; ReLU 1 per element; residual add 1 per element; global pool 1 per pooled input element; "
    "parameter-free shortcuts 0";

struct ComplexityEntry {
  std::string name;  // "stem", a block id, or "head"
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct ComplexityReport {
  std::uint64_t param_count = 0;
  std::uint64_t flop_count = 0;
  std::vector<ComplexityEntry> breakdown;
};

inline std::uint64_t conv_params(const ConvParams& c) { return c.weight.size(); }
inline std::uint64_t bn_params(const BatchNormParams& bn) { return bn.gamma.size() + bn.beta.size(); }

inline std::uint64_t block_params(const ResidualBlock& b) {
  return conv_params(b.conv1) + bn_params(b.bn1) + conv_params(b.conv2) + bn_params(b.bn2);
}

inline ComplexityReport analyze_complexity(const ModelGraph& model, std::array<std::size_t, 3> input_shape) {
  ComplexityReport report;
  auto conv_macs = [](const ConvParams& c, std::size_t ho, std::size_t wo) -> std::uint64_t {
    return static_cast<std::uint64_t>(c.out_channels()) * c.in_channels() * c.kernel_size() * c.kernel_size() * ho * wo;
  };

  std::size_t h = input_shape[1], w = input_shape[2];
  {
    const std::size_t ho = conv_output_extent(h, model.stem_conv.kernel_size(), model.stem_conv.stride, model.stem_conv.padding);
    const std::size_t wo = conv_output_extent(w, model.stem_conv.kernel_size(), model.stem_conv.stride, model.stem_conv.padding);
    const std::uint64_t elems = static_cast<std::uint64_t>(model.stem_conv.out_channels()) * ho * wo;
    report.breakdown.push_back({"stem", conv_params(model.stem_conv) + bn_params(model.stem_bn),
                                conv_macs(model.stem_conv, ho, wo) + 2 * elems + elems});
    h = ho;
    w = wo;
  }
  for (const auto& b : model.blocks) {
    const std::size_t ho = conv_output_extent(h, b.conv1.kernel_size(), b.conv1.stride, b.conv1.padding);
    const std::size_t wo = conv_output_extent(w, b.conv1.kernel_size(), b.conv1.stride, b.conv1.padding);
    const std::uint64_t mid = static_cast<std::uint64_t>(b.mid_channels) * ho * wo;
    const std::uint64_t out = static_cast<std::uint64_t>(b.out_channels()) * ho * wo;
    const std::uint64_t flops = conv_macs(b.conv1, ho, wo) + 2 * mid + mid  // conv1, bn1, relu
                                + conv_macs(b.conv2, ho, wo) + 2 * out      // conv2, bn2
                                + out + out;                                // add, relu
    report.breakdown.push_back({b.id.str(), block_params(b), flops});
    h = ho;
    w = wo;
  }
  const std::uint64_t pooled = static_cast<std::uint64_t>(model.head.in_features()) * h * w;
  report.breakdown.push_back({"head", model.head.weight.size() + model.head.bias.size(),
                              pooled + static_cast<std::uint64_t>(model.head.in_features()) * model.head.out_features()});
  for (const auto& e : report.breakdown) {
    report.param_count += e.params;
    report.flop_count += e.flops;
  }
  return report;
}

inline ComplexityReport analyze_complexity(const ModelGraph& model) {
  return analyze_complexity(model, model.config.input_shape);
}

// Trainable scalars: conv weights, BN gamma and beta, linear weight and bias.
inline std::uint64_t count_params(const ModelGraph& model) { return analyze_complexity(model).param_count; }

inline std::uint64_t count_flops(const ModelGraph& model, std::array<std::size_t, 3> input_shape) {
  return analyze_complexity(model, input_shape).flop_count;
}
inline std::uint64_t count_flops(const ModelGraph& model) { return count_flops(model, model.config.input_shape); }

// ---------------------------------------------------------------------------------------------
// Accuracy

// Number of rows whose argmax matches the label; logit ties resolve to the lowest class index.
inline std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    }
    if (static_cast<int>(best) == labels[i]) ++correct;
  }
  return correct;
}

// Top-1 accuracy in eval mode.
inline double evaluate_accuracy(const ModelGraph& model, const Dataset& data, std::size_t batch_size = 256) {
  if (data.size() == 0) fail(ErrorKind::data, "cannot evaluate accuracy on an empty dataset");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t correct = 0;
  for_each_batch(data, order, batch_size, [&](const Batch& batch) {
    correct += count_correct(forward(model, batch.images, Mode::eval).logits, batch.labels);
  });
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------------------------
// Latency

struct LatencyReport {
  double mean_ms = 0.0;
  std::vector<double> samples_ms;
  int warmup_passes = 0;
  std::size_t batch_size = 1;
  std::optional<double> reduction_vs_baseline;  // percent
};

inline double latency_reduction_percent(double baseline_ms, double pruned_ms) {
  if (!(baseline_ms > 0.0)) fail(ErrorKind::report, "baseline latency must be positive");
  return (1.0 - pruned_ms / baseline_ms) * 100.0;
}

// Untimed warm-up passes, then `passes` timed eval forwards on one fixed random input.
inline LatencyReport measure_latency(const ModelGraph& model, std::size_t batch_size = 1, int warmup = 10,
                                     int passes = 100, std::uint64_t input_seed = 0,
                                     const LatencyReport* baseline = nullptr) {
  if (batch_size == 0 || passes <= 0 || warmup < 0) fail(ErrorKind::config, "latency: invalid protocol parameters");
  const auto& in = model.config.input_shape;
  Tensor input({batch_size, in[0], in[1], in[2]});
  std::mt19937_64 rng(input_seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (auto& v : input.values()) v = dist(rng);

  for (int i = 0; i < warmup; ++i) (void)forward(model, input, Mode::eval);

  LatencyReport report;
  report.warmup_passes = warmup;
  report.batch_size = batch_size;
  report.samples_ms.reserve(static_cast<std::size_t>(passes));
  for (int i = 0; i < passes; ++i) {
    const auto start = std::chrono::steady_clock::now();
    const ForwardResult r = forward(model, input, Mode::eval);
    const auto stop = std::chrono::steady_clock::now();
    report.samples_ms.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
  }
  report.mean_ms = std::accumulate(report.samples_ms.begin(), report.samples_ms.end(), 0.0) /
                   static_cast<double>(report.samples_ms.size());
  if (baseline) report.reduction_vs_baseline = latency_reduction_percent(baseline->mean_ms, report.mean_ms);
  return report;
}

// ---------------------------------------------------------------------------------------------
// Summaries

struct ModelMetrics {
  std::string method;
  std::optional<double> accuracy;  // fraction in [0,1]
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::optional<LatencyReport> latency;
};

struct ExperimentRow {
  std::string method;
  std::optional<double> accuracy;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::optional<double> latency_ms;
  std::optional<double> param_reduction_pct;
  std::optional<double> flop_reduction_pct;
  std::optional<double> latency_reduction_pct;
  std::optional<double> accuracy_delta_points;
};

inline ExperimentRow baseline_row(const ModelMetrics& baseline) {
  ExperimentRow row;
  row.method = baseline.method;
  row.accuracy = baseline.accuracy;
  row.params = baseline.params;
  row.flops = baseline.flops;
  if (baseline.latency) row.latency_ms = baseline.latency->mean_ms;
  return row;
}

inline ExperimentRow reduction_summary(const ModelMetrics& baseline, const ModelMetrics& pruned) {
  auto pct = [](double before, double after) { return before > 0.0 ? (1.0 - after / before) * 100.0 : 0.0; };
  ExperimentRow row = baseline_row(pruned);
  row.param_reduction_pct = pct(static_cast<double>(baseline.params), static_cast<double>(pruned.params));
  row.flop_reduction_pct = pct(static_cast<double>(baseline.flops), static_cast<double>(pruned.flops));
  if (baseline.accuracy && pruned.accuracy) row.accuracy_delta_points = (*pruned.accuracy - *baseline.accuracy) * 100.0;
  if (baseline.latency && pruned.latency) {
    const auto& b = *baseline.latency;
    const auto& p = *pruned.latency;
    if (b.batch_size != p.batch_size || b.warmup_passes != p.warmup_passes || b.samples_ms.size() != p.samples_ms.size()) {
      fail(ErrorKind::report, "latency protocols differ between '" + baseline.method + "' and '" + pruned.method + "'");
    }
    row.latency_reduction_pct = latency_reduction_percent(b.mean_ms, p.mean_ms);
  }
  return row;
}

}  // namespace prunelab
