// prunelab: train a baseline, score blocks, run hybrid pruning, time checkpoints and build report tables.
//
//   prunelab train  --config run.ini
//   prunelab score  --config run.ini --criterion fmr
//   prunelab prune  --config run.ini --criterion bn --blocks 2 --order lc
//   prunelab bench  --config run.ini [--checkpoint runs/x/prune/bn_lc_2b/model.prlb]
//   prunelab report --config run.ini
//
// Exit status: 0 success, 1 configuration error, 2 data or file error, 3 numeric or structural error.

#include <prunelab/artifacts.hpp>
#include <prunelab/checkpoint.hpp>
#include <prunelab/config.hpp>

#include <CLI11.hpp>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdio>
#include <iostream>
#include <optional>

using namespace prunelab;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string criterion;
  std::optional<std::size_t> blocks;
  std::string order;
};

// Exclusive advisory lock on the experiment directory, held for the whole command.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& file) {
    fd_ = ::open(file.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) fail(ErrorKind::data, "cannot open lock file " + file.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      std::cerr << "prunelab: waiting for another command using " << file.parent_path().string() << '\n';
      if (::flock(fd_, LOCK_EX) != 0) fail(ErrorKind::data, "cannot lock " + file.string());
    }
  }
  ~DirectoryLock() {
    if (fd_ >= 0) ::close(fd_);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig cfg = load_experiment_config(o.config);
  if (o.seed) cfg.set_seed(*o.seed);
  if (!o.out.empty()) cfg.out_dir = o.out;
  try {
    if (!o.criterion.empty()) cfg.prune.criterion = parse_criterion(o.criterion);
    if (!o.order.empty()) cfg.prune.order = parse_order(o.order);
  } catch (const Error& e) {
    fail(ErrorKind::config, std::string("command line: ") + e.what());
  }
  if (o.blocks) cfg.prune.blocks_to_remove = *o.blocks;
  return cfg;
}

std::string percent(std::optional<double> fraction) { return fraction ? fixed(*fraction * 100.0, 2) + " %" : "-"; }

fs::path checkpoint_or_baseline(const Options& o, const RunLayout& layout) {
  return o.checkpoint.empty() ? layout.baseline_checkpoint() : fs::path(o.checkpoint);
}

std::string dataset_name(const ExperimentConfig& cfg) { return dataset_title(cfg.dataset.kind); }

// ---------------------------------------------------------------------------------------------

void cmd_train(const ExperimentConfig& cfg, const RunLayout& layout) {
  const DataSplits data = load_datasets(cfg.dataset);
  ModelGraph model = build_model(cfg.architecture, cfg.seed);
  std::cout << "training " << cfg.architecture.name << " on " << dataset_name(cfg) << " (" << data.train.size()
            << " train / " << data.val.size() << " val samples, " << cfg.training.epochs << " epochs)\n";
  const TrainResult r = train_model(model, data.train, data.val, cfg.training);
  for (const auto& e : r.history) {
    std::cout << "  epoch " << e.epoch << "  loss " << fixed(e.train_loss, 4) << "  val " << percent(e.val_accuracy) << '\n';
  }

  const auto complexity = analyze_complexity(model);
  const BaselineSummary s{cfg.architecture.name, dataset_name(cfg), cfg.seed, evaluate_accuracy(model, data.val),
                          complexity.param_count, complexity.flop_count, r.best_epoch, r.history};
  save_checkpoint(model, layout.baseline_checkpoint().string());
  write_file(layout.config_snapshot(), serialize_experiment_config(cfg));
  write_file(layout.baseline_summary(), to_json(s).dump(2) + "\n");
  std::cout << "baseline: val " << percent(s.val_accuracy) << ", " << with_thousands(s.params) << " params, "
            << with_thousands(s.flops) << " FLOPs -> " << layout.baseline_checkpoint().string() << '\n';
}

void cmd_score(const ExperimentConfig& cfg, const RunLayout& layout, const Options& o) {
  const fs::path ckpt = checkpoint_or_baseline(o, layout);
  const ModelGraph model = load_checkpoint(ckpt.string());
  const Criterion c = cfg.prune.criterion;
  std::optional<DataSplits> data;
  if (is_data_driven(c)) data = load_datasets(cfg.dataset);
  const ImportanceTable table = score(c, model, data ? &data->train : nullptr, cfg.calibration);

  std::ostringstream csv, hist;
  write_table_csv(csv, table);
  write_histogram(hist, table);
  const std::string tag = criterion_tag(c);
  write_file(layout.scores_dir() / (tag + ".csv"), csv.str());
  write_file(layout.scores_dir() / (tag + ".hist"), hist.str());

  std::cout << criterion_title(c) << " scores for " << ckpt.string() << " (lowest first):\n";
  for (const auto& id : block_ranking(table)) {
    const auto it = std::find_if(table.blocks.begin(), table.blocks.end(), [&](const BlockScores& b) { return b.id == id; });
    std::cout << "  " << id.str() << "  " << format_score(it->block_score) << '\n';
  }
  std::cout << "wrote " << (layout.scores_dir() / (tag + ".csv")).string() << '\n';
}

void cmd_prune(const ExperimentConfig& cfg, const RunLayout& layout, const Options& o) {
  const fs::path ckpt = checkpoint_or_baseline(o, layout);
  const ModelGraph baseline = load_checkpoint(ckpt.string());
  const DataSplits data = load_datasets(cfg.dataset);
  const HybridConfig& h = cfg.prune;

  ModelGraph model = baseline;
  HybridInputs in;
  in.train = &data.train;
  in.val = &data.val;
  in.training = cfg.training;
  in.calibration_spec = cfg.calibration;
  const HybridResult r = run_hybrid(model, h, in);

  // The replay oracle: the logged actions alone must rebuild the final structure.
  const ModelGraph replayed = replay_plan_log(baseline, r.log);
  const bool verified = count_params(replayed) == count_params(model) && count_flops(replayed) == count_flops(model);
  if (!verified) fail(ErrorKind::structural, "plan log replay does not reproduce the pruned structure");

  PruneSummary s;
  s.criterion = h.criterion;
  s.order = h.order;
  s.blocks = h.blocks_to_remove;
  s.baseline_params = r.rows.front().params;
  s.baseline_flops = r.rows.front().flops;
  s.baseline_accuracy = r.rows.front().val_accuracy;
  s.val_accuracy = r.rows.back().val_accuracy;
  s.params = r.rows.back().params;
  s.flops = r.rows.back().flops;
  for (const auto& p : r.channel_iterations) s.channels_removed += p.removed;
  for (const auto& id : r.removed_blocks) s.removed_blocks.push_back(id.str());
  s.replay_verified = verified;

  const fs::path dir = layout.prune_dir(h.criterion, h.order, h.blocks_to_remove);
  fs::create_directories(dir);
  save_checkpoint(model, (dir / "model.prlb").string());
  write_file(dir / "plan.tsv", r.log.str());
  std::ostringstream phases;
  write_phases_csv(phases, r);
  write_file(dir / "phases.csv", phases.str());
  write_file(dir / "summary.json", to_json(s).dump(2) + "\n");
  write_file(dir / "config.ini", serialize_experiment_config(cfg));

  std::cout << method_label(h.criterion, h.blocks_to_remove) << ", order " << order_tag(h.order) << ":\n";
  for (const auto& row : r.rows) {
    std::cout << "  " << row.phase << ": val " << percent(row.val_accuracy) << ", " << with_thousands(row.params)
              << " params, " << with_thousands(row.flops) << " FLOPs\n";
  }
  std::cout << "wrote " << dir.string() << '\n';
}

void cmd_bench(const ExperimentConfig& cfg, const RunLayout& layout, const Options& o) {
  std::vector<fs::path> targets;
  if (!o.checkpoint.empty()) {
    targets.push_back(o.checkpoint);
  } else {
    // Time the baseline and every pruned model in one session so the numbers are comparable.
    targets.push_back(layout.baseline_checkpoint());
    if (fs::exists(layout.prune_root())) {
      std::vector<fs::path> pruned;
      for (const auto& e : fs::directory_iterator(layout.prune_root())) {
        if (fs::exists(e.path() / "model.prlb")) pruned.push_back(e.path() / "model.prlb");
      }
      std::sort(pruned.begin(), pruned.end());
      targets.insert(targets.end(), pruned.begin(), pruned.end());
    }
  }
  const auto& b = cfg.bench;
  for (const auto& path : targets) {
    const ModelGraph model = load_checkpoint(path.string());
    const LatencyReport r = measure_latency(model, b.batch_size, b.warmup, b.passes, cfg.seed);
    write_file(RunLayout::latency_file(path), to_json(r).dump(2) + "\n");
    std::cout << path.string() << ": " << fixed(r.mean_ms, 3) << " ms mean over " << r.samples_ms.size()
              << " passes (batch " << r.batch_size << ", " << r.warmup_passes << " warm-up)\n";
  }
}

void cmd_report(const RunLayout& layout) {
  const ReportTables t = collect_report(layout);
  write_report(layout, t);
  write_complexity_markdown(std::cout, t.channels_first);
  std::cout << '\n';
  write_latency_markdown(std::cout, t.channels_first);
  if (t.layers_first.size() > 1) {
    std::cout << "\nlayers then channels:\n\n";
    write_complexity_markdown(std::cout, t.layers_first);
    std::cout << '\n';
    write_latency_markdown(std::cout, t.layers_first);
  }
  std::cout << "\nwrote " << layout.report_dir().string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Filter and block importance criteria with hybrid channel/layer pruning"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "experiment INI file")->required();
    cmd->add_option("--seed", o.seed, "override experiment.seed");
    cmd->add_option("--out", o.out, "override experiment.out_dir");
  };
  auto* train = app.add_subcommand("train", "train the baseline model");
  auto* score_cmd = app.add_subcommand("score", "compute block and filter importance for one criterion");
  auto* prune = app.add_subcommand("prune", "run hybrid channel + layer pruning with fine-tuning");
  auto* bench = app.add_subcommand("bench", "measure mean inference latency");
  auto* report = app.add_subcommand("report", "join baseline, pruning and latency artifacts into tables");
  for (auto* cmd : {train, score_cmd, prune, bench, report}) add_common(cmd);
  for (auto* cmd : {score_cmd, prune, bench}) cmd->add_option("--checkpoint", o.checkpoint, "checkpoint to read");
  for (auto* cmd : {score_cmd, prune}) {
    cmd->add_option("--criterion", o.criterion, "wm, bn, fmr or taylor (overrides prune.criterion)");
  }
  prune->add_option("--blocks", o.blocks, "blocks to remove (overrides prune.blocks)");
  prune->add_option("--order", o.order, "cl or lc (overrides prune.order)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const ExperimentConfig cfg = resolve_config(o);
    const RunLayout layout{cfg.out_dir};
    fs::create_directories(layout.root);
    DirectoryLock lock(layout.lock_file());

    if (train->parsed()) cmd_train(cfg, layout);
    if (score_cmd->parsed()) cmd_score(cfg, layout, o);
    if (prune->parsed()) cmd_prune(cfg, layout, o);
    if (bench->parsed()) cmd_bench(cfg, layout, o);
    if (report->parsed()) cmd_report(layout);
  } catch (const Error& e) {
    std::cerr << "prunelab: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "prunelab: file error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "prunelab: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
