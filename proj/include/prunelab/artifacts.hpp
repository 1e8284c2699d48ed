#pragma once

// On-disk layout of one experiment directory and the JSON summaries the report step joins.
//
//   config.ini                      snapshot of the configuration each command ran with
//   baseline.prlb, baseline.json    trained model and its metrics/history
//   baseline.prlb.latency.json      written by `bench` next to whichever checkpoint it timed
//   scores/<crit>.csv, .hist        importance tables and gnuplot-ready block scores
//   prune/<crit>_<order>_<n>b/      model.prlb, plan.tsv, phases.csv, summary.json
//   report/                         table1..4 (.md, .csv) and summary_<order>.csv
//
// Nothing here records wall-clock time, so every artifact except the latency files is a pure
// function of the configuration and seed.

#include <prunelab/criteria.hpp>
#include <prunelab/error.hpp>
#include <prunelab/metrics.hpp>
#include <prunelab/pruner.hpp>
#include <prunelab/report.hpp>

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace prunelab {

namespace fs = std::filesystem;

struct RunLayout {
  fs::path root;

  fs::path config_snapshot() const { return root / "config.ini"; }
  fs::path lock_file() const { return root / ".prunelab.lock"; }
  fs::path baseline_checkpoint() const { return root / "baseline.prlb"; }
  fs::path baseline_summary() const { return root / "baseline.json"; }
  fs::path scores_dir() const { return root / "scores"; }
  fs::path prune_root() const { return root / "prune"; }
  fs::path report_dir() const { return root / "report"; }

  fs::path prune_dir(Criterion c, PhaseOrder o, std::size_t blocks) const {
    return prune_root() / (criterion_tag(c) + "_" + order_tag(o) + "_" + std::to_string(blocks) + "b");
  }
  static fs::path latency_file(const fs::path& checkpoint) { return checkpoint.string() + ".latency.json"; }
};

// Writes through a temporary sibling and renames, so readers never observe a half-written file.
inline void write_file(const fs::path& path, const std::string& contents) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::report, "cannot write " + path.string());
    out << contents;
    if (!out) fail(ErrorKind::report, "short write to " + path.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::report, "cannot move " + tmp.string() + " into place: " + ec.message());
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::data, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------------------------
// Baseline

struct BaselineSummary {
  std::string architecture;
  std::string dataset;
  std::uint64_t seed = 0;
  double val_accuracy = 0.0;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
};

inline nlohmann::json to_json(const BaselineSummary& s) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : s.history) {
    history.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_accuracy", e.val_accuracy}});
  }
  return {{"architecture", s.architecture}, {"dataset", s.dataset}, {"seed", s.seed},
          {"val_accuracy", s.val_accuracy}, {"params", s.params},   {"flops", s.flops},
          {"best_epoch", s.best_epoch},     {"history", history}};
}

inline BaselineSummary baseline_from_json(const nlohmann::json& j) {
  BaselineSummary s;
  s.architecture = j.at("architecture").get<std::string>();
  s.dataset = j.at("dataset").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.val_accuracy = j.at("val_accuracy").get<double>();
  s.params = j.at("params").get<std::uint64_t>();
  s.flops = j.at("flops").get<std::uint64_t>();
  s.best_epoch = j.at("best_epoch").get<std::size_t>();
  for (const auto& e : j.at("history")) {
    s.history.push_back(
        {e.at("epoch").get<std::uint64_t>(), e.at("train_loss").get<double>(), e.at("val_accuracy").get<double>()});
  }
  return s;
}

// ---------------------------------------------------------------------------------------------
// Pruning runs

struct PruneSummary {
  Criterion criterion = Criterion::weight_magnitude;
  PhaseOrder order = PhaseOrder::channels_then_layers;
  std::size_t blocks = 0;
  std::uint64_t baseline_params = 0;
  std::uint64_t baseline_flops = 0;
  std::optional<double> baseline_accuracy;
  std::optional<double> val_accuracy;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::size_t channels_removed = 0;
  std::vector<std::string> removed_blocks;
  bool replay_verified = false;
};

inline nlohmann::json to_json(const PruneSummary& s) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"criterion", criterion_tag(s.criterion)},
          {"order", order_tag(s.order)},
          {"blocks", s.blocks},
          {"baseline_params", s.baseline_params},
          {"baseline_flops", s.baseline_flops},
          {"baseline_val_accuracy", opt(s.baseline_accuracy)},
          {"val_accuracy", opt(s.val_accuracy)},
          {"params", s.params},
          {"flops", s.flops},
          {"channels_removed", s.channels_removed},
          {"removed_blocks", s.removed_blocks},
          {"replay_verified", s.replay_verified}};
}

inline PruneSummary prune_summary_from_json(const nlohmann::json& j) {
  auto opt = [&](const char* key) {
    const auto& v = j.at(key);
    return v.is_null() ? std::optional<double>() : std::optional<double>(v.get<double>());
  };
  PruneSummary s;
  try {
    s.criterion = parse_criterion(j.at("criterion").get<std::string>());
    s.order = parse_order(j.at("order").get<std::string>());
  } catch (const Error& e) {
    fail(ErrorKind::format, e.what());
  }
  s.blocks = j.at("blocks").get<std::size_t>();
  s.baseline_params = j.at("baseline_params").get<std::uint64_t>();
  s.baseline_flops = j.at("baseline_flops").get<std::uint64_t>();
  s.baseline_accuracy = opt("baseline_val_accuracy");
  s.val_accuracy = opt("val_accuracy");
  s.params = j.at("params").get<std::uint64_t>();
  s.flops = j.at("flops").get<std::uint64_t>();
  s.channels_removed = j.at("channels_removed").get<std::size_t>();
  s.removed_blocks = j.at("removed_blocks").get<std::vector<std::string>>();
  s.replay_verified = j.at("replay_verified").get<bool>();
  return s;
}

// phase,iteration,removed,params,flops,val_accuracy for the channel iterations, then the phase rows.
inline void write_phases_csv(std::ostream& os, const HybridResult& r) {
  os << "phase,iteration,removed,params,flops,val_accuracy\n";
  auto row = [&](const PhaseRecord& p, const std::string& name) {
    os << name << ',' << p.iteration << ',' << p.removed << ',' << p.params << ',' << p.flops << ','
       << (p.val_accuracy ? format_score(*p.val_accuracy) : "") << '\n';
  };
  for (const auto& p : r.channel_iterations) row(p, "channel_iteration");
  for (const auto& p : r.rows) row(p, p.phase);
}

// ---------------------------------------------------------------------------------------------
// Latency

inline nlohmann::json to_json(const LatencyReport& r) {
  return {{"mean_ms", r.mean_ms}, {"batch_size", r.batch_size}, {"warmup", r.warmup_passes}, {"samples_ms", r.samples_ms}};
}

inline LatencyReport latency_from_json(const nlohmann::json& j) {
  LatencyReport r;
  r.mean_ms = j.at("mean_ms").get<double>();
  r.batch_size = j.at("batch_size").get<std::size_t>();
  r.warmup_passes = j.at("warmup").get<int>();
  r.samples_ms = j.at("samples_ms").get<std::vector<double>>();
  return r;
}

// ---------------------------------------------------------------------------------------------
// Report assembly

struct ReportTables {
  std::vector<ExperimentRow> channels_first;  // baseline row, then one row per (criterion, blocks)
  std::vector<ExperimentRow> layers_first;
};

namespace detail {

template <class T, class F>
T parse_artifact(const fs::path& path, F&& from_json) {
  const nlohmann::json j = read_json(path);
  try {
    return from_json(j);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

inline std::optional<LatencyReport> optional_latency(const fs::path& checkpoint) {
  const fs::path p = RunLayout::latency_file(checkpoint);
  if (!fs::exists(p)) return std::nullopt;
  return parse_artifact<LatencyReport>(p, latency_from_json);
}

inline std::size_t criterion_rank(Criterion c) {
  return static_cast<std::size_t>(std::find(std::begin(kAllCriteria), std::end(kAllCriteria), c) - std::begin(kAllCriteria));
}

}  // namespace detail

// Reads the baseline and every finished pruning run under `layout`; no artifact is modified.
inline ReportTables collect_report(const RunLayout& layout) {
  if (!fs::exists(layout.baseline_summary())) {
    fail(ErrorKind::data, "no baseline at " + layout.baseline_summary().string() + " (run the train command first)");
  }
  const auto base = detail::parse_artifact<BaselineSummary>(layout.baseline_summary(), baseline_from_json);
  ModelMetrics baseline{baseline_label(base.architecture, base.dataset), base.val_accuracy, base.params, base.flops,
                        detail::optional_latency(layout.baseline_checkpoint())};

  std::vector<fs::path> runs;
  if (fs::exists(layout.prune_root())) {
    for (const auto& entry : fs::directory_iterator(layout.prune_root())) {
      if (entry.is_directory() && fs::exists(entry.path() / "summary.json")) runs.push_back(entry.path());
    }
  }

  struct Keyed {
    std::size_t rank;
    std::size_t blocks;
    PhaseOrder order;
    ExperimentRow row;
  };
  std::vector<Keyed> rows;
  for (const auto& dir : runs) {
    const auto s = detail::parse_artifact<PruneSummary>(dir / "summary.json", prune_summary_from_json);
    if (s.baseline_params != base.params || s.baseline_flops != base.flops) {
      fail(ErrorKind::report, dir.string() + " was pruned from a different baseline than " + layout.baseline_summary().string());
    }
    ModelMetrics pruned{method_label(s.criterion, s.blocks), s.val_accuracy, s.params, s.flops,
                        detail::optional_latency(dir / "model.prlb")};
    if (!baseline.latency) pruned.latency.reset();
    rows.push_back({detail::criterion_rank(s.criterion), s.blocks, s.order, reduction_summary(baseline, pruned)});
  }
  std::sort(rows.begin(), rows.end(),
            [](const Keyed& a, const Keyed& b) { return std::tie(a.rank, a.blocks) < std::tie(b.rank, b.blocks); });

  ReportTables t;
  t.channels_first.push_back(baseline_row(baseline));
  t.layers_first.push_back(baseline_row(baseline));
  for (auto& k : rows) (k.order == PhaseOrder::channels_then_layers ? t.channels_first : t.layers_first).push_back(k.row);
  return t;
}

// Tables 1 and 2 cover channels-then-layers runs, tables 3 and 4 the reverse order.
inline void write_report(const RunLayout& layout, const ReportTables& t) {
  const fs::path dir = layout.report_dir();
  auto emit = [&](const std::string& name, auto writer, const std::vector<ExperimentRow>& rows) {
    std::ostringstream os;
    writer(os, rows);
    write_file(dir / name, os.str());
  };
  using Rows = std::vector<ExperimentRow>;
  const std::pair<const Rows*, int> sets[] = {{&t.channels_first, 1}, {&t.layers_first, 3}};
  for (const auto& [rows, first] : sets) {
    const std::string a = "table" + std::to_string(first), b = "table" + std::to_string(first + 1);
    emit(a + ".md", write_complexity_markdown, *rows);
    emit(a + ".csv", write_complexity_csv, *rows);
    emit(b + ".md", write_latency_markdown, *rows);
    emit(b + ".csv", write_latency_csv, *rows);
  }
  emit("summary_cl.csv", write_summary_csv, t.channels_first);
  emit("summary_lc.csv", write_summary_csv, t.layers_first);
}

}  // namespace prunelab
