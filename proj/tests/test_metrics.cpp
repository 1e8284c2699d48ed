#include <prunelab/metrics.hpp>

#include <gtest/gtest.h>

#include <numeric>

#include "test_support.hpp"

using namespace prunelab;

namespace {

ArchitectureConfig bench_config(std::size_t blocks_per_group) {
  return ArchitectureConfig{"bench", {3, 16, 16}, 4, 8,
                            {{blocks_per_group, 8, 1}, {blocks_per_group, 16, 2}, {blocks_per_group, 16, 2}}};
}

ModelMetrics metrics_with_latency(const std::string& name, double mean_ms, std::size_t samples = 100) {
  ModelMetrics m;
  m.method = name;
  m.accuracy = 0.5;
  m.params = 1000;
  m.flops = 5000;
  LatencyReport l;
  l.mean_ms = mean_ms;
  l.samples_ms.assign(samples, mean_ms);
  l.warmup_passes = 10;
  m.latency = l;
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Complexity

TEST(Complexity, LinearLayerParams) {
  ModelGraph m = build_model(ArchitectureConfig{"lin", {3, 4, 4}, 100, 64, {{1, 64, 1}}}, 0);
  const auto report = analyze_complexity(m);
  EXPECT_EQ(report.breakdown.back().name, "head");
  EXPECT_EQ(report.breakdown.back().params, 6500u);
}

TEST(Complexity, PresetTotals) {
  const ModelGraph m = build_model(ArchitectureConfig::resnet56(), 0);
  const auto report = analyze_complexity(m);
  EXPECT_EQ(report.param_count, 858868u);
  EXPECT_NEAR(static_cast<double>(report.flop_count), 127621440.0, 0.02 * 127621440.0);
  const auto& stem = m.stem_conv;
  EXPECT_EQ(stem.out_channels() * stem.in_channels() * 9 * 32 * 32, 442368u);
}

TEST(Complexity, StemMacCount) {
  const ModelGraph m = build_model(ArchitectureConfig::resnet56(), 0);
  const auto report = analyze_complexity(m);
  // The stem entry is conv MACs plus batchnorm (2/elem) and ReLU (1/elem).
  EXPECT_EQ(report.breakdown.front().flops, 442368u + 3u * 16u * 32u * 32u);
}

TEST(Complexity, BreakdownIsAdditive) {
  ModelGraph m = build_model(ArchitectureConfig::resnet56(), 0);
  auto sum = [](const ComplexityReport& r) {
    std::uint64_t p = 0, f = 0;
    for (const auto& e : r.breakdown) {
      p += e.params;
      f += e.flops;
    }
    return std::pair{p, f};
  };
  const auto before = analyze_complexity(m);
  EXPECT_EQ(sum(before), (std::pair{before.param_count, before.flop_count}));
  std::uint64_t removed_flops = 0;
  for (const auto& e : before.breakdown) {
    if (e.name == "g2.b3") removed_flops = e.flops;
  }
  remove_block(m, {2, 3});
  const auto after = analyze_complexity(m);
  EXPECT_EQ(sum(after), (std::pair{after.param_count, after.flop_count}));
  EXPECT_EQ(after.flop_count, before.flop_count - removed_flops);
}

TEST(Complexity, AreaScaling) {
  const ModelGraph m = build_model(ArchitectureConfig::resnet56(), 0);
  const auto small = analyze_complexity(m, {3, 32, 32});
  const auto large = analyze_complexity(m, {3, 64, 64});
  for (std::size_t i = 0; i + 1 < small.breakdown.size(); ++i) {
    EXPECT_EQ(large.breakdown[i].flops, 4 * small.breakdown[i].flops) << small.breakdown[i].name;
  }
  // The head's pooling term scales with area; its linear term does not.
  const std::uint64_t linear = 64u * 100u;
  EXPECT_EQ(large.breakdown.back().flops - linear, 4 * (small.breakdown.back().flops - linear));
}

// ---------------------------------------------------------------------------------------------
// Accuracy

TEST(Accuracy, ConstantLogitsScoreOneOverK) {
  ModelGraph m = build_model(ArchitectureConfig{"c", {3, 8, 8}, 4, 4, {{1, 4, 1}}}, 0);
  m.head.weight.fill(0.0f);
  m.head.bias = Tensor({4}, std::vector<float>{0.0f, 0.3f, 0.3f, -1.0f});
  SyntheticDatasetSpec spec;
  spec.image_shape = {3, 8, 8};
  spec.samples_per_class = 5;
  EXPECT_DOUBLE_EQ(evaluate_accuracy(m, generate_synthetic(spec)), 0.25);
}

TEST(Accuracy, HandFixture) {
  // Ten rows over three classes; row 4 ties classes 1 and 2, row 7 ties all three.
  const Tensor logits({10, 3}, std::vector<float>{
                                   3, 1, 0,   // 0
                                   0, 2, 1,   // 1
                                   0, 1, 5,   // 2
                                   2, 2.5, 1, // 1
                                   0, 4, 4,   // 1 (tie)
                                   9, 0, 0,   // 0
                                   1, 0, 2,   // 2
                                   1, 1, 1,   // 0 (tie)
                                   0, 0, -1,  // 0 (tie)
                                   -2, -1, -3 // 1
                               });
  const std::vector<int> labels{0, 1, 1, 0, 2, 0, 2, 0, 1, 1};
  // Matches: rows 0, 1, 5, 6, 7, 9.
  EXPECT_EQ(count_correct(logits, labels), 6u);
}

TEST(Accuracy, EmptyDataIsDataError) {
  const ModelGraph m = build_model(ArchitectureConfig{"c", {3, 8, 8}, 4, 4, {{1, 4, 1}}}, 0);
  Dataset empty;
  empty.image_shape = {3, 8, 8};
  try {
    evaluate_accuracy(m, empty);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
  }
}

TEST(Accuracy, InvariantUnderShuffling) {
  const ModelGraph m = build_model(ArchitectureConfig{"c", {3, 8, 8}, 4, 4, {{1, 4, 1}}}, 3);
  SyntheticDatasetSpec spec;
  spec.image_shape = {3, 8, 8};
  spec.samples_per_class = 25;
  const Dataset data = generate_synthetic(spec);
  const auto perm = shuffled_indices(data.size(), 7);
  Dataset shuffled = data;
  const Tensor images = data.images(perm);
  shuffled.pixels.assign(images.values().begin(), images.values().end());
  shuffled.labels = data.labels_of(perm);
  const double a = evaluate_accuracy(m, data, 16);
  EXPECT_DOUBLE_EQ(a, evaluate_accuracy(m, shuffled, 7));
  EXPECT_GE(a, 0.0);
  EXPECT_LE(a, 1.0);
}

// ---------------------------------------------------------------------------------------------
// Latency

TEST(Latency, ProtocolRecordsEveryPass) {
  const ModelGraph m = build_model(bench_config(1), 0);
  const LatencyReport r = measure_latency(m, 1, 10, 100);
  ASSERT_EQ(r.samples_ms.size(), 100u);
  EXPECT_EQ(r.warmup_passes, 10);
  EXPECT_GT(r.mean_ms, 0.0);
  EXPECT_NEAR(r.mean_ms, std::accumulate(r.samples_ms.begin(), r.samples_ms.end(), 0.0) / 100.0, 1e-12);
  EXPECT_FALSE(r.reduction_vs_baseline);
  const LatencyReport again = measure_latency(m, 1, 10, 100, 0, &r);
  ASSERT_TRUE(again.reduction_vs_baseline);
  EXPECT_NEAR(*again.reduction_vs_baseline, (1.0 - again.mean_ms / r.mean_ms) * 100.0, 1e-9);
}

// Smoke check on repeatability; a loaded machine can legitimately disturb it.
TEST(Latency, RepeatedMeasurementsAreStable) {
  const ModelGraph m = build_model(bench_config(2), 0);
  const double a = measure_latency(m).mean_ms;
  const double b = measure_latency(m).mean_ms;
  EXPECT_LT(std::abs(a - b) / std::max(a, b), 0.15) << a << " vs " << b;
}

TEST(Latency, HalvedModelIsFaster) {
  const double full = measure_latency(build_model(bench_config(4), 0)).mean_ms;
  const double half = measure_latency(build_model(bench_config(2), 0)).mean_ms;
  EXPECT_LT(half, full);
}

// Published latencies are rounded to microseconds and percentages printed to two decimals, so the
// fixture is compared at that display precision (the exact quotient is 43.8986).
TEST(Latency, ReductionFormula) {
  EXPECT_NEAR(latency_reduction_percent(61.207, 34.338), 43.89, 0.01);
  EXPECT_NEAR(latency_reduction_percent(61.207, 34.338), (1.0 - 34.338 / 61.207) * 100.0, 1e-12);
  EXPECT_THROW(latency_reduction_percent(0.0, 1.0), Error);
}

// ---------------------------------------------------------------------------------------------
// Summaries

TEST(Summary, IdenticalModelsGiveZeroReductions) {
  const auto base = metrics_with_latency("Baseline", 12.5);
  const auto row = reduction_summary(base, base);
  EXPECT_EQ(*row.param_reduction_pct, 0.0);
  EXPECT_EQ(*row.flop_reduction_pct, 0.0);
  EXPECT_EQ(*row.latency_reduction_pct, 0.0);
  EXPECT_EQ(*row.accuracy_delta_points, 0.0);
}

TEST(Summary, ReductionsFromTotals) {
  auto base = metrics_with_latency("Baseline", 61.207);
  auto pruned = metrics_with_latency("Pruned", 34.338);
  pruned.params = 750;
  pruned.flops = 4000;
  pruned.accuracy = 0.48;
  const auto row = reduction_summary(base, pruned);
  EXPECT_NEAR(*row.param_reduction_pct, 25.0, 1e-12);
  EXPECT_NEAR(*row.flop_reduction_pct, 20.0, 1e-12);
  EXPECT_NEAR(*row.latency_reduction_pct, 43.89, 0.01);
  EXPECT_NEAR(*row.accuracy_delta_points, -2.0, 1e-9);
  EXPECT_EQ(row.method, "Pruned");
}

TEST(Summary, ProtocolMismatchIsReportError) {
  const auto base = metrics_with_latency("Baseline", 10.0, 100);
  const auto other = metrics_with_latency("Pruned", 8.0, 50);
  try {
    reduction_summary(base, other);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::report);
  }
}

TEST(Summary, BaselineRowHasNoReductions) {
  const auto row = baseline_row(metrics_with_latency("Baseline", 3.0));
  EXPECT_FALSE(row.param_reduction_pct);
  EXPECT_FALSE(row.latency_reduction_pct);
  EXPECT_EQ(*row.latency_ms, 3.0);
}
