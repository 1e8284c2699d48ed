#include <prunelab/checkpoint.hpp>
#include <prunelab/config.hpp>
#include <prunelab/report.hpp>

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_support.hpp"

using namespace prunelab;
namespace fs = std::filesystem;

namespace {

template <class F>
void expect_error(F&& f, ErrorKind kind, const std::string& fragment) {
  try {
    f();
    ADD_FAILURE() << "expected an error containing '" << fragment << "'";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

ArchitectureConfig small_arch() { return ArchitectureConfig{"small", {3, 8, 8}, 4, 4, {{2, 8, 1}, {2, 8, 2}}}; }

Tensor probe_batch(const ModelGraph& m, std::uint64_t seed) {
  const auto& in = m.config.input_shape;
  return prunelab::testing::random_tensor({3, in[0], in[1], in[2]}, seed);
}

// A model whose running statistics, counters and structure all differ from a fresh build.
ModelGraph worked_model() {
  ModelGraph m = build_model(small_arch(), 3);
  const Tensor x = probe_batch(m, 11);
  const std::vector<int> labels{0, 1, 2};
  (void)backward(m, x, labels);
  (void)train_forward(m, x);
  m.step = 7;
  m.epoch = 2;
  return m;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("prunelab_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

// ---------------------------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  const ModelGraph m = worked_model();
  const auto bytes = serialize_checkpoint(m);
  const ModelGraph back = parse_checkpoint(bytes);
  EXPECT_EQ(parameter_checksum(back), parameter_checksum(m));
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(back.step, 7u);
  EXPECT_EQ(back.epoch, 2u);
  const Tensor x = probe_batch(m, 5);
  const Tensor a = forward(m, x).logits, b = forward(back, x).logits;
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Checkpoint, RoundTripAfterSurgeryKeepsStructure) {
  ModelGraph m = worked_model();
  const std::vector<std::size_t> keep{0, 2, 5};
  shrink_channels(m, BlockId{0, 1}, keep);
  remove_block(m, BlockId{1, 1});
  const ModelGraph back = parse_checkpoint(serialize_checkpoint(m));
  ASSERT_EQ(back.blocks.size(), m.blocks.size());
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    EXPECT_EQ(back.blocks[i].id, m.blocks[i].id);
    EXPECT_EQ(back.blocks[i].mid_channels, m.blocks[i].mid_channels);
  }
  EXPECT_EQ(back.retired, m.retired);
  EXPECT_EQ(parameter_checksum(back), parameter_checksum(m));
  const Tensor x = probe_batch(m, 6);
  const Tensor a = forward(m, x).logits, b = forward(back, x).logits;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Checkpoint, FileRoundTrip) {
  TempDir dir;
  const ModelGraph m = worked_model();
  const auto path = (dir.path / "m.prlb").string();
  save_checkpoint(m, path);
  EXPECT_EQ(parameter_checksum(load_checkpoint(path)), parameter_checksum(m));
  expect_error([&] { (void)load_checkpoint((dir.path / "absent.prlb").string()); }, ErrorKind::data, "cannot open");
}

TEST(Checkpoint, BadMagicIsRejected) {
  auto bytes = serialize_checkpoint(worked_model());
  bytes[0] = 'X';
  expect_error([&] { (void)parse_checkpoint(bytes); }, ErrorKind::format, "byte offset 0");
  expect_error([&] { (void)parse_checkpoint(std::vector<std::uint8_t>{'P', 'R'}); }, ErrorKind::format, "magic");
}

TEST(Checkpoint, UnknownVersionIsRejected) {
  auto bytes = serialize_checkpoint(worked_model());
  bytes[4] = 9;
  expect_error([&] { (void)parse_checkpoint(bytes); }, ErrorKind::format, "version 9");
}

TEST(Checkpoint, TruncationNamesAnOffset) {
  const auto bytes = serialize_checkpoint(worked_model());
  auto cut = bytes;
  cut.resize(bytes.size() - 10);
  expect_error([&] { (void)parse_checkpoint(cut); }, ErrorKind::format, "truncated at byte offset " + std::to_string(cut.size()));
  cut.resize(20);
  expect_error([&] { (void)parse_checkpoint(cut); }, ErrorKind::format, "truncated");
}

TEST(Checkpoint, TrailingBytesAreRejected) {
  auto bytes = serialize_checkpoint(worked_model());
  bytes.push_back(0);
  expect_error([&] { (void)parse_checkpoint(bytes); }, ErrorKind::format, "trailing");
}

TEST(Checkpoint, CorruptHeaderIsRejected) {
  auto bytes = serialize_checkpoint(worked_model());
  bytes[12] = '#';
  expect_error([&] { (void)parse_checkpoint(bytes); }, ErrorKind::format, "JSON");
}

TEST(Checkpoint, ManifestShapeMismatchIsRejected) {
  // Claim a narrower block than the blobs were written for: shapes and offsets stop lining up.
  const auto bytes = serialize_checkpoint(worked_model());
  const std::uint32_t len = detail::get_u32(bytes, 8);
  std::string header(bytes.begin() + 12, bytes.begin() + 12 + len);
  auto j = nlohmann::json::parse(header);
  j["blocks"][0]["mid_channels"] = 7;
  const std::string text = j.dump();
  std::vector<std::uint8_t> out(bytes.begin(), bytes.begin() + 8);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), bytes.begin() + 12 + len, bytes.end());
  expect_error([&] { (void)parse_checkpoint(out); }, ErrorKind::format, "manifest shape");
}

// ---------------------------------------------------------------------------------------------
// CIFAR binary records

namespace {

std::vector<std::uint8_t> cifar_record(CifarVariant v, int coarse, int fine, std::uint8_t base) {
  std::vector<std::uint8_t> r;
  if (v == CifarVariant::c100) r.push_back(static_cast<std::uint8_t>(coarse));
  r.push_back(static_cast<std::uint8_t>(fine));
  for (std::size_t i = 0; i < kCifarPixels; ++i) r.push_back(static_cast<std::uint8_t>(base + i % 7));
  return r;
}

}  // namespace

TEST(Cifar, TwoRecordFixtureDecodes) {
  for (const auto v : {CifarVariant::c10, CifarVariant::c100}) {
    auto bytes = cifar_record(v, 3, 7, 10);
    const auto second = cifar_record(v, 1, 9, 200);
    bytes.insert(bytes.end(), second.begin(), second.end());
    const Normalization norm{{0.5f, 0.25f, 0.0f}, {0.5f, 0.25f, 1.0f}};
    const Dataset d = parse_cifar_binary(bytes, v, norm, 2);
    ASSERT_EQ(d.size(), 2u);
    EXPECT_EQ(d.num_classes, v == CifarVariant::c10 ? 10u : 100u);
    EXPECT_EQ(d.labels[0], 7);  // the fine label for CIFAR-100
    EXPECT_EQ(d.labels[1], 9);
    const std::size_t header = v == CifarVariant::c10 ? 1 : 2;
    for (std::size_t i : {std::size_t{0}, std::size_t{1500}, std::size_t{3071}}) {
      const std::size_t c = i / 1024;
      const float raw = bytes[kCifarPixels + header + header + i] / 255.0f;
      EXPECT_FLOAT_EQ(d.pixels[kCifarPixels + i], (raw - norm.mean[c]) / norm.stddev[c]);
    }
  }
}

TEST(Cifar, EmptyAndTruncatedFilesAreFormatErrors) {
  const Normalization norm = Normalization::cifar10();
  expect_error([&] { (void)parse_cifar_binary({}, CifarVariant::c10, norm); }, ErrorKind::format, "empty");
  auto bytes = cifar_record(CifarVariant::c10, 0, 1, 0);
  bytes.resize(bytes.size() + 100, 0);
  expect_error([&] { (void)parse_cifar_binary(bytes, CifarVariant::c10, norm); }, ErrorKind::format, "byte offset 3073");
  auto one = cifar_record(CifarVariant::c10, 0, 1, 0);
  expect_error([&] { (void)parse_cifar_binary(one, CifarVariant::c10, norm, 2); }, ErrorKind::format, "expected 2");
}

TEST(Cifar, OutOfRangeLabelNamesItsOffset) {
  auto bytes = cifar_record(CifarVariant::c10, 0, 1, 0);
  const auto bad = cifar_record(CifarVariant::c10, 0, 12, 0);
  bytes.insert(bytes.end(), bad.begin(), bad.end());
  expect_error([&] { (void)parse_cifar_binary(bytes, CifarVariant::c10, Normalization::cifar10()); }, ErrorKind::format,
               "byte offset 3073");
}

TEST(Cifar, MissingFileIsADataError) {
  expect_error([] { (void)load_cifar_binary("/nonexistent/data_batch_1.bin", CifarVariant::c10, Normalization::cifar10()); },
               ErrorKind::data, "cannot open");
}

// ---------------------------------------------------------------------------------------------
// Synthetic task

TEST(Synthetic, DeterministicPerSeedAndStream) {
  SyntheticDatasetSpec spec;
  spec.samples_per_class = 10;
  spec.seed = 4;
  const Dataset a = generate_synthetic(spec, 0), b = generate_synthetic(spec, 0), c = generate_synthetic(spec, 1);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.pixels, c.pixels);
  spec.seed = 5;
  EXPECT_NE(generate_synthetic(spec, 0).pixels, a.pixels);
}

TEST(Synthetic, ClassesAreBalanced) {
  SyntheticDatasetSpec spec;
  spec.num_classes = 5;
  spec.samples_per_class = 13;
  const Dataset d = generate_synthetic(spec);
  std::vector<int> counts(5, 0);
  for (int l : d.labels) ++counts.at(static_cast<std::size_t>(l));
  for (int c : counts) EXPECT_EQ(c, 13);
}

TEST(Synthetic, NearestCentroidSeparatesAtLargeMargin) {
  // With pattern RMS 1.0 over 768 pixels the centroid distance dwarfs unit noise, so the Bayes
  // classifier (nearest centroid) should be essentially perfect.
  SyntheticDatasetSpec spec;
  spec.samples_per_class = 50;
  spec.margin = 1.0;
  spec.seed = 8;
  const auto centroids = synthetic_centroids(spec);
  const Dataset d = generate_synthetic(spec, 1);
  const std::size_t vol = d.image_volume();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < centroids.size(); ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < vol; ++j) {
        const double diff = d.pixels[i * vol + j] - centroids[k][j];
        s += diff * diff;
      }
      if (s < best_d) best_d = s, best = k;
    }
    correct += static_cast<int>(best) == d.labels[i];
  }
  EXPECT_GE(static_cast<double>(correct) / d.size(), 0.99);
}

TEST(Synthetic, CentroidsHaveRequestedRms) {
  SyntheticDatasetSpec spec;
  spec.margin = 0.4;
  for (const auto& c : synthetic_centroids(spec)) {
    double sq = 0.0;
    for (float v : c) sq += static_cast<double>(v) * v;
    EXPECT_NEAR(std::sqrt(sq / c.size()), 0.4, 1e-5);
  }
}

// ---------------------------------------------------------------------------------------------
// Configuration

namespace {

const char* kDeskConfig = R"(
; small synthetic run
[experiment]
seed = 21
out_dir = runs/desk

[architecture]
preset = resnet8

[dataset]
kind = synthetic
samples_per_class = 40
margin = 0.8

[train]
epochs = 3
learning_rate = 0.1

[prune]
criterion = fmr
order = lc
blocks = 1
target_ratio = 0.25

[bench]
passes = 20
)";

}  // namespace

TEST(Config, ParsesValuesAndPropagatesSeed) {
  const ExperimentConfig c = parse_experiment_config(kDeskConfig);
  EXPECT_EQ(c.seed, 21u);
  EXPECT_EQ(c.training.seed, 21u);
  EXPECT_EQ(c.calibration.seed, 21u);
  EXPECT_EQ(c.dataset.synthetic.seed, 21u);
  EXPECT_EQ(c.out_dir, "runs/desk");
  EXPECT_EQ(c.architecture.name, "ResNet-8");
  EXPECT_EQ(c.architecture.num_classes, 4u);
  EXPECT_EQ(c.dataset.synthetic.image_shape, c.architecture.input_shape);
  EXPECT_EQ(c.dataset.synthetic.samples_per_class, 40u);
  EXPECT_DOUBLE_EQ(c.dataset.synthetic.margin, 0.8);
  EXPECT_EQ(c.training.epochs, 3u);
  EXPECT_EQ(c.prune.criterion, Criterion::feature_map_rank);
  EXPECT_EQ(c.prune.order, PhaseOrder::layers_then_channels);
  EXPECT_DOUBLE_EQ(c.prune.channel_schedule.target_ratio, 0.25);
  EXPECT_EQ(c.bench.passes, 20);
  EXPECT_EQ(c.bench.warmup, 10);
}

TEST(Config, SerializedFormReloadsEqual) {
  ExperimentConfig c = parse_experiment_config(kDeskConfig);
  c.training.learning_rate = 0.1 / 3.0;  // a value with no short decimal form
  c.dataset.mean = {0.1f, 0.2f, 0.3f};
  c.dataset.stddev = {0.25f, 0.5f, 1.0f / 3.0f};
  const ExperimentConfig back = parse_experiment_config(serialize_experiment_config(c));
  EXPECT_TRUE(back == c);
  EXPECT_EQ(serialize_experiment_config(back), serialize_experiment_config(c));
}

TEST(Config, CustomArchitectureRoundTrips) {
  const std::string text = "[experiment]\nseed = 2\n[architecture]\npreset = custom\nnum_classes = 3\ninput = 3x12x12\n"
                           "stem_width = 6\ngroups = 2:6:1, 1:12:2\n";
  const ExperimentConfig c = parse_experiment_config(text);
  EXPECT_EQ(c.architecture.groups.size(), 2u);
  EXPECT_EQ(c.architecture.groups[1].width, 12u);
  EXPECT_TRUE(parse_experiment_config(serialize_experiment_config(c)) == c);
}

TEST(Config, SeedIsMandatory) {
  expect_error([] { (void)parse_experiment_config("[experiment]\nout_dir = x\n"); }, ErrorKind::config, "experiment.seed");
}

TEST(Config, UnknownKeysAndSectionsAreRejected) {
  expect_error([] { (void)parse_experiment_config("[experiment]\nseed = 1\n[train]\nepoch = 3\n"); }, ErrorKind::config,
               "train.epoch");
  expect_error([] { (void)parse_experiment_config("[experiment]\nseed = 1\n[trian]\nepochs = 3\n"); }, ErrorKind::config,
               "trian.epochs");
}

TEST(Config, BadValuesAreConfigErrors) {
  const std::string head = "[experiment]\nseed = 1\n";
  expect_error([&] { (void)parse_experiment_config(head + "[train]\nepochs = three\n"); }, ErrorKind::config, "train.epochs");
  expect_error([&] { (void)parse_experiment_config(head + "[prune]\ncriterion = entropy\n"); }, ErrorKind::config, "entropy");
  expect_error([&] { (void)parse_experiment_config(head + "[prune]\norder = xy\n"); }, ErrorKind::config, "xy");
  expect_error([&] { (void)parse_experiment_config(head + "[prune]\ntarget_ratio = 1.5\n"); }, ErrorKind::config, "");
  expect_error([&] { (void)parse_experiment_config(head + "[prune]\nrescore = maybe\n"); }, ErrorKind::config, "prune.rescore");
  expect_error([&] { (void)parse_experiment_config(head + "[architecture]\ninput = 3x32\n"); }, ErrorKind::config, "CxHxW");
  expect_error([&] { (void)parse_experiment_config(head + "[bench]\npasses = 0\n"); }, ErrorKind::config, "bench");
  expect_error([&] { (void)parse_experiment_config(head + "[calibration]\nrank_epsilon = 0\n"); }, ErrorKind::config,
               "rank_epsilon");
  expect_error([&] { (void)parse_experiment_config("seed = 1\n"); }, ErrorKind::config, "outside any section");
}

TEST(Config, CifarNeedsExistingFiles) {
  const std::string text = "[experiment]\nseed = 1\n[dataset]\nkind = cifar100\ntrain_path = /nonexistent/train.bin\n"
                           "val_path = /nonexistent/test.bin\n";
  expect_error([&] { (void)parse_experiment_config(text); }, ErrorKind::config, "dataset.train_path");
  EXPECT_NO_THROW((void)parse_experiment_config(text, false));
  expect_error([] { (void)parse_experiment_config("[experiment]\nseed = 1\n[dataset]\nkind = cifar10\n"); }, ErrorKind::config,
               "");
}

TEST(Config, MissingFileIsAConfigError) {
  expect_error([] { (void)load_experiment_config("/nonexistent/run.ini"); }, ErrorKind::config, "cannot open");
}

TEST(Config, SyntheticSplitsUseIndependentNoise) {
  const ExperimentConfig c = parse_experiment_config(kDeskConfig);
  const DataSplits s = load_datasets(c.dataset);
  EXPECT_EQ(s.train.size(), 4u * 40u);
  EXPECT_EQ(s.val.size(), 4u * c.dataset.val_samples_per_class);
  EXPECT_NE(std::vector<float>(s.train.pixels.begin(), s.train.pixels.begin() + 10),
            std::vector<float>(s.val.pixels.begin(), s.val.pixels.begin() + 10));
}

// ---------------------------------------------------------------------------------------------
// Report tables

TEST(Report, NumberFormatting) {
  EXPECT_EQ(with_thousands(0), "0");
  EXPECT_EQ(with_thousands(999), "999");
  EXPECT_EQ(with_thousands(1000), "1,000");
  EXPECT_EQ(with_thousands(858868), "858,868");
  EXPECT_EQ(with_thousands(127621440), "127,621,440");
  EXPECT_EQ(fixed(0.68484 * 100.0, 2), "68.48");
  EXPECT_EQ(method_label(Criterion::weight_magnitude, 1), "Weight Magnitude (1 block)");
  EXPECT_EQ(method_label(Criterion::taylor, 2), "Weight Taylor (2 blocks)");
  EXPECT_EQ(baseline_label("ResNet-56", dataset_title(DatasetKind::cifar100)), "Baseline ResNet-56 on CIFAR-100");
}

TEST(Report, ComplexityTableLayout) {
  ExperimentRow base{"Baseline ResNet-56 on CIFAR-100", 0.7128, 858868, 127621440, {}, {}, {}, {}, {}};
  ExperimentRow wm{"Weight Magnitude (1 block)", 0.6848, 833326, 109383824, {}, {}, {}, {}, {}};
  std::ostringstream md, csv;
  write_complexity_markdown(md, {base, wm});
  write_complexity_csv(csv, {base, wm});
  EXPECT_NE(md.str().find("FLOPs convention:"), std::string::npos);
  EXPECT_NE(md.str().find("| Method"), std::string::npos);
  EXPECT_NE(md.str().find("|  71.28 % |    858,868 | 127,621,440 |"), std::string::npos) << md.str();
  EXPECT_NE(md.str().find("68.48 %"), std::string::npos);
  EXPECT_EQ(csv.str(), "method,accuracy_pct,parameters,flops\n"
                       "Baseline ResNet-56 on CIFAR-100,71.28,858868,127621440\n"
                       "Weight Magnitude (1 block),68.48,833326,109383824\n");
}

TEST(Report, LatencyTableLayoutAndBaselineOnly) {
  ExperimentRow base;
  base.method = "Baseline ResNet-56 on CIFAR-100";
  base.latency_ms = 61.207;
  std::ostringstream only;
  write_latency_markdown(only, {base});
  const std::string text = only.str();
  EXPECT_NE(text.find("61.207 ms"), std::string::npos);
  // Header, separator and one row.
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
  EXPECT_NE(text.find(" - |\n"), std::string::npos);

  ExperimentRow pruned;
  pruned.method = "Weight Magnitude (1 block)";
  pruned.latency_ms = 34.338;
  pruned.latency_reduction_pct = latency_reduction_percent(61.207, 34.338);
  std::ostringstream csv;
  write_latency_csv(csv, {base, pruned});
  EXPECT_EQ(csv.str(), "method,latency_ms,latency_reduction_pct\n"
                       "Baseline ResNet-56 on CIFAR-100,61.207,\n"
                       "Weight Magnitude (1 block),34.338,43.90\n");
}

TEST(Report, CsvQuotesFieldsWithCommas) {
  ExperimentRow r;
  r.method = "odd, \"name\"";
  std::ostringstream csv;
  write_latency_csv(csv, {r});
  EXPECT_NE(csv.str().find("\"odd, \"\"name\"\"\",,"), std::string::npos) << csv.str();
}
