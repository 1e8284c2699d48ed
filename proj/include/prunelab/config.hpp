#pragma once

// Experiment configuration: an INI file with [experiment], [architecture], [dataset], [train],
// [prune], [calibration] and [bench] sections. Comments start with ';'. Every key is optional except
// experiment.seed; unknown sections or keys are rejected so typos cannot silently fall back to defaults.

#include <prunelab/criteria.hpp>
#include <prunelab/dataset.hpp>
#include <prunelab/error.hpp>
#include <prunelab/model.hpp>
#include <prunelab/pruner.hpp>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

namespace prunelab {

enum class DatasetKind { synthetic, cifar10, cifar100 };

inline std::string dataset_tag(DatasetKind k) {
  switch (k) {
    case DatasetKind::synthetic: return "synthetic";
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::cifar100: return "cifar100";
  }
  return "?";
}

// Display name used in report rows, e.g. "Baseline ResNet-56 on CIFAR-100".
inline std::string dataset_title(DatasetKind k) {
  switch (k) {
    case DatasetKind::synthetic: return "synthetic";
    case DatasetKind::cifar10: return "CIFAR-10";
    case DatasetKind::cifar100: return "CIFAR-100";
  }
  return "?";
}

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic;
  std::string train_path;
  std::string val_path;
  std::vector<float> mean;    // per channel; empty means the CIFAR defaults
  std::vector<float> stddev;
  SyntheticDatasetSpec synthetic;
  std::size_t val_samples_per_class = 50;

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct BenchConfig {
  std::size_t batch_size = 1;
  int warmup = 10;
  int passes = 100;

  friend bool operator==(const BenchConfig&, const BenchConfig&) = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs";
  std::string preset = "resnet56";  // resnet56 | resnet8 | custom
  ArchitectureConfig architecture = ArchitectureConfig::resnet56();
  DatasetConfig dataset;
  TrainingConfig training;
  HybridConfig prune;
  CalibrationSpec calibration;
  BenchConfig bench;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  // Propagates the experiment seed into every component that draws random numbers.
  void set_seed(std::uint64_t s) {
    seed = s;
    training.seed = s;
    calibration.seed = s;
    dataset.synthetic.seed = s;
  }
};

namespace detail {

inline std::string format_real(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string format_real(float v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, value);
  if (r.ec != std::errc() || r.ptr != end) fail(ErrorKind::config, key + ": cannot parse '" + text + "' as a number");
  return value;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string tok; std::getline(in, tok, sep);) out.push_back(trim(tok));
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  fail(ErrorKind::config, key + ": expected true or false, got '" + text + "'");
}

// Reads typed values out of the parsed INI tree and remembers which keys were consumed.
class IniReader {
 public:
  explicit IniReader(const boost::property_tree::ptree& tree) : tree_(tree) {}

  std::optional<std::string> raw(const std::string& section, const std::string& key) {
    const auto s = tree_.get_child_optional(section);
    if (!s) return std::nullopt;
    const auto v = s->get_optional<std::string>(key);
    if (!v) return std::nullopt;
    used_.insert(section + "." + key);
    return trim(*v);
  }

  template <class T>
  void number(const std::string& section, const std::string& key, T& out) {
    if (auto v = raw(section, key)) out = parse_number<T>(section + "." + key, *v);
  }

  void text(const std::string& section, const std::string& key, std::string& out) {
    if (auto v = raw(section, key)) out = *v;
  }

  void boolean(const std::string& section, const std::string& key, bool& out) {
    if (auto v = raw(section, key)) out = parse_bool(section + "." + key, *v);
  }

  void reals(const std::string& section, const std::string& key, std::vector<float>& out) {
    if (auto v = raw(section, key)) {
      out.clear();
      for (const auto& tok : split(*v, ',')) out.push_back(parse_number<float>(section + "." + key, tok));
    }
  }

  void reject_unknown() const {
    for (const auto& [section, body] : tree_) {
      for (const auto& [key, value] : body) {
        if (!used_.count(section + "." + key)) fail(ErrorKind::config, "unknown config key " + section + "." + key);
      }
    }
  }

 private:
  const boost::property_tree::ptree& tree_;
  std::set<std::string> used_;
};

inline std::array<std::size_t, 3> parse_shape(const std::string& key, const std::string& text) {
  const auto parts = split(text, 'x');
  if (parts.size() != 3) fail(ErrorKind::config, key + ": expected CxHxW, got '" + text + "'");
  return {parse_number<std::size_t>(key, parts[0]), parse_number<std::size_t>(key, parts[1]),
          parse_number<std::size_t>(key, parts[2])};
}

inline std::vector<GroupSpec> parse_groups(const std::string& key, const std::string& text) {
  std::vector<GroupSpec> out;
  for (const auto& g : split(text, ',')) {
    const auto parts = split(g, ':');
    if (parts.size() != 3) fail(ErrorKind::config, key + ": groups are count:width:stride, got '" + g + "'");
    out.push_back(GroupSpec{parse_number<std::size_t>(key, parts[0]), parse_number<std::size_t>(key, parts[1]),
                            parse_number<int>(key, parts[2])});
  }
  return out;
}

inline ArchitectureConfig preset_architecture(const std::string& preset, std::size_t num_classes) {
  if (preset == "resnet56") return ArchitectureConfig::resnet56(num_classes);
  if (preset == "resnet8") return ArchitectureConfig::resnet8(num_classes);
  if (preset == "custom") return ArchitectureConfig{"custom", {3, 32, 32}, num_classes, 16, {}};
  fail(ErrorKind::config, "architecture.preset: unknown preset '" + preset + "' (expected resnet56, resnet8 or custom)");
}

inline void require_path(const std::string& key, const std::string& path) {
  if (path.empty()) fail(ErrorKind::config, key + " is required for this dataset kind");
  if (!std::filesystem::exists(path)) fail(ErrorKind::config, key + ": file '" + path + "' does not exist");
}

}  // namespace detail

// Parses INI text. `check_paths` verifies that dataset files exist.
inline ExperimentConfig parse_experiment_config(const std::string& text, bool check_paths = true) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorKind::config, std::string("config syntax: ") + e.what());
  }
  for (const auto& [name, body] : tree) {
    if (body.empty() && !body.data().empty()) fail(ErrorKind::config, "key '" + name + "' outside any section");
  }
  detail::IniReader r(tree);
  ExperimentConfig cfg;

  const auto seed = r.raw("experiment", "seed");
  if (!seed) fail(ErrorKind::config, "experiment.seed is required");
  cfg.set_seed(detail::parse_number<std::uint64_t>("experiment.seed", *seed));
  r.text("experiment", "out_dir", cfg.out_dir);

  r.text("architecture", "preset", cfg.preset);
  std::size_t classes = cfg.preset == "resnet8" ? 4 : 100;
  r.number("architecture", "num_classes", classes);
  cfg.architecture = detail::preset_architecture(cfg.preset, classes);
  if (auto v = r.raw("architecture", "input")) cfg.architecture.input_shape = detail::parse_shape("architecture.input", *v);
  r.number("architecture", "stem_width", cfg.architecture.stem_width);
  if (auto v = r.raw("architecture", "groups")) cfg.architecture.groups = detail::parse_groups("architecture.groups", *v);
  try {
    cfg.architecture.check();
  } catch (const Error& e) {
    fail(ErrorKind::config, std::string("[architecture] ") + e.what());
  }

  auto& ds = cfg.dataset;
  std::string kind = "synthetic";
  r.text("dataset", "kind", kind);
  if (kind == "synthetic") {
    ds.kind = DatasetKind::synthetic;
  } else if (kind == "cifar10") {
    ds.kind = DatasetKind::cifar10;
  } else if (kind == "cifar100") {
    ds.kind = DatasetKind::cifar100;
  } else {
    fail(ErrorKind::config, "dataset.kind: unknown kind '" + kind + "' (expected synthetic, cifar10 or cifar100)");
  }
  r.text("dataset", "train_path", ds.train_path);
  r.text("dataset", "val_path", ds.val_path);
  r.reals("dataset", "mean", ds.mean);
  r.reals("dataset", "std", ds.stddev);
  ds.synthetic.num_classes = cfg.architecture.num_classes;
  ds.synthetic.image_shape = cfg.architecture.input_shape;
  r.number("dataset", "samples_per_class", ds.synthetic.samples_per_class);
  r.number("dataset", "val_samples_per_class", ds.val_samples_per_class);
  r.number("dataset", "margin", ds.synthetic.margin);
  if (ds.kind == DatasetKind::synthetic) {
    try {
      ds.synthetic.check();
    } catch (const Error& e) {
      fail(ErrorKind::config, std::string("[dataset] ") + e.what());
    }
    if (ds.val_samples_per_class == 0) fail(ErrorKind::config, "dataset.val_samples_per_class must be positive");
  } else {
    if (check_paths) {
      detail::require_path("dataset.train_path", ds.train_path);
      detail::require_path("dataset.val_path", ds.val_path);
    }
    const std::size_t expected = ds.kind == DatasetKind::cifar10 ? 10 : 100;
    if (cfg.architecture.num_classes != expected || cfg.architecture.input_shape != std::array<std::size_t, 3>{3, 32, 32}) {
      fail(ErrorKind::config, "architecture must take 3x32x32 input with " + std::to_string(expected) +
                                  " classes for dataset.kind = " + kind);
    }
  }
  if (ds.mean.size() != ds.stddev.size()) fail(ErrorKind::config, "dataset.mean and dataset.std differ in length");

  auto& t = cfg.training;
  r.number("train", "epochs", t.epochs);
  r.number("train", "batch_size", t.batch_size);
  r.number("train", "learning_rate", t.learning_rate);
  r.number("train", "momentum", t.momentum);
  r.number("train", "weight_decay", t.weight_decay);
  r.number("train", "bn_l1_strength", t.bn_l1_strength);
  t.check();

  auto& p = cfg.prune;
  if (auto v = r.raw("prune", "criterion")) p.criterion = parse_criterion(*v);
  if (auto v = r.raw("prune", "order")) p.order = parse_order(*v);
  r.number("prune", "blocks", p.blocks_to_remove);
  r.number("prune", "target_ratio", p.channel_schedule.target_ratio);
  r.number("prune", "per_iteration_ratio", p.channel_schedule.per_iteration_ratio);
  r.number("prune", "finetune_epochs_per_iter", p.channel_schedule.finetune_epochs_per_iter);
  r.number("prune", "min_channels", p.channel_schedule.min_channels_per_block);
  r.number("prune", "layer_finetune_epochs", p.layer_finetune_epochs);
  r.number("prune", "final_finetune_epochs", p.final_finetune_epochs);
  r.boolean("prune", "rescore", p.rescore_between_phases);
  r.number("prune", "finetune_lr_scale", p.finetune_lr_scale);
  p.check();

  r.number("calibration", "batch_count", cfg.calibration.batch_count);
  r.number("calibration", "batch_size", cfg.calibration.batch_size);
  r.number("calibration", "rank_epsilon", cfg.calibration.rank_epsilon);
  cfg.calibration.check();

  r.number("bench", "batch_size", cfg.bench.batch_size);
  r.number("bench", "warmup", cfg.bench.warmup);
  r.number("bench", "passes", cfg.bench.passes);
  if (cfg.bench.batch_size == 0 || cfg.bench.passes <= 0 || cfg.bench.warmup < 0) {
    fail(ErrorKind::config, "bench: batch_size and passes must be positive, warmup nonnegative");
  }

  r.reject_unknown();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path, bool check_paths = true) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::config, "cannot open config file " + path);
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return parse_experiment_config(text.str(), check_paths);
  } catch (const Error& e) {
    fail(e.kind(), path + ": " + e.what());
  }
}

// Writes every key explicitly, so the output reloads to an equal configuration.
inline std::string serialize_experiment_config(const ExperimentConfig& c) {
  using detail::format_real;
  std::ostringstream os;
  auto join = [](const std::vector<float>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_real(v[i]);
    return s;
  };
  const auto& a = c.architecture;
  os << "[experiment]\nseed = " << c.seed << "\nout_dir = " << c.out_dir << "\n\n";
  os << "[architecture]\npreset = " << c.preset << "\ninput = " << a.input_shape[0] << 'x' << a.input_shape[1] << 'x'
     << a.input_shape[2] << "\nnum_classes = " << a.num_classes << "\nstem_width = " << a.stem_width << "\ngroups = ";
  for (std::size_t i = 0; i < a.groups.size(); ++i) {
    os << (i ? ", " : "") << a.groups[i].block_count << ':' << a.groups[i].width << ':' << a.groups[i].stride;
  }
  const auto& d = c.dataset;
  os << "\n\n[dataset]\nkind = " << dataset_tag(d.kind) << '\n';
  if (!d.train_path.empty()) os << "train_path = " << d.train_path << '\n';
  if (!d.val_path.empty()) os << "val_path = " << d.val_path << '\n';
  if (!d.mean.empty()) os << "mean = " << join(d.mean) << "\nstd = " << join(d.stddev) << '\n';
  os << "samples_per_class = " << d.synthetic.samples_per_class << "\nval_samples_per_class = "
     << d.val_samples_per_class << "\nmargin = " << format_real(d.synthetic.margin) << "\n\n";
  const auto& t = c.training;
  os << "[train]\nepochs = " << t.epochs << "\nbatch_size = " << t.batch_size
     << "\nlearning_rate = " << format_real(t.learning_rate) << "\nmomentum = " << format_real(t.momentum)
     << "\nweight_decay = " << format_real(t.weight_decay) << "\nbn_l1_strength = " << format_real(t.bn_l1_strength)
     << "\n\n";
  const auto& p = c.prune;
  os << "[prune]\ncriterion = " << criterion_tag(p.criterion) << "\norder = " << order_tag(p.order)
     << "\nblocks = " << p.blocks_to_remove << "\ntarget_ratio = " << format_real(p.channel_schedule.target_ratio)
     << "\nper_iteration_ratio = " << format_real(p.channel_schedule.per_iteration_ratio)
     << "\nfinetune_epochs_per_iter = " << p.channel_schedule.finetune_epochs_per_iter
     << "\nmin_channels = " << p.channel_schedule.min_channels_per_block
     << "\nlayer_finetune_epochs = " << p.layer_finetune_epochs << "\nfinal_finetune_epochs = " << p.final_finetune_epochs
     << "\nrescore = " << (p.rescore_between_phases ? "true" : "false")
     << "\nfinetune_lr_scale = " << format_real(p.finetune_lr_scale) << "\n\n";
  os << "[calibration]\nbatch_count = " << c.calibration.batch_count << "\nbatch_size = " << c.calibration.batch_size
     << "\nrank_epsilon = " << format_real(c.calibration.rank_epsilon) << "\n\n";
  os << "[bench]\nbatch_size = " << c.bench.batch_size << "\nwarmup = " << c.bench.warmup
     << "\npasses = " << c.bench.passes << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------------------------
// Dataset materialization

struct DataSplits {
  Dataset train;
  Dataset val;
};

inline Normalization normalization_for(const DatasetConfig& d) {
  if (!d.mean.empty()) return Normalization{d.mean, d.stddev};
  return d.kind == DatasetKind::cifar10 ? Normalization::cifar10() : Normalization::cifar100();
}

inline DataSplits load_datasets(const DatasetConfig& d) {
  if (d.kind == DatasetKind::synthetic) {
    SyntheticDatasetSpec val_spec = d.synthetic;
    val_spec.samples_per_class = d.val_samples_per_class;
    return {generate_synthetic(d.synthetic, 0), generate_synthetic(val_spec, 1)};
  }
  const CifarVariant v = d.kind == DatasetKind::cifar10 ? CifarVariant::c10 : CifarVariant::c100;
  const Normalization norm = normalization_for(d);
  return {load_cifar_binary(d.train_path, v, norm), load_cifar_binary(d.val_path, v, norm)};
}

}  // namespace prunelab
