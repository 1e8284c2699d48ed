#pragma once

#include <prunelab/criteria.hpp>
#include <prunelab/dataset.hpp>
#include <prunelab/error.hpp>
#include <prunelab/metrics.hpp>
#include <prunelab/model.hpp>
#include <prunelab/optimizer.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace prunelab {

// ---------------------------------------------------------------------------------------------
// Training

struct TrainingConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  float learning_rate = 0.05f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  float bn_l1_strength = 1e-4f;  // used only when training for the BN-scale criterion
  std::uint64_t seed = 0;

  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;

  void check() const {
    if (batch_size == 0) fail(ErrorKind::config, "train.batch_size must be positive");
    if (!(learning_rate > 0.0f)) fail(ErrorKind::config, "train.learning_rate must be positive");
    if (!(momentum >= 0.0f && momentum < 1.0f)) fail(ErrorKind::config, "train.momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0f)) fail(ErrorKind::config, "train.weight_decay must be nonnegative");
    if (!(bn_l1_strength >= 0.0f)) fail(ErrorKind::config, "train.bn_l1_strength must be nonnegative");
  }

  // Fresh optimizer; the gamma sparsity term is switched on only for the BN-scale criterion.
  OptimizerState optimizer(std::optional<Criterion> criterion, float lr_scale = 1.0f) const {
    OptimizerState s;
    s.learning_rate = learning_rate * lr_scale;
    s.momentum_coeff = momentum;
    s.weight_decay = weight_decay;
    s.bn_l1_strength = criterion == Criterion::bn_scale ? bn_l1_strength : 0.0f;
    s.check();
    return s;
  }
};

struct EpochRecord {
  std::uint64_t epoch = 0;  // model epoch counter after the pass
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_val_accuracy = 0.0;
  std::size_t best_epoch = 0;  // 0 means the starting weights were never beaten
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// One shuffled pass; the shuffle depends only on the seed and the model's epoch counter.
inline double train_epoch(ModelGraph& model, const Dataset& data, std::size_t batch_size, OptimizerState& opt,
                          std::uint64_t seed) {
  const auto order = shuffled_indices(data.size(), mix_seed(seed, model.epoch));
  double loss_sum = 0.0;
  std::size_t seen = 0;
  for_each_batch(data, order, batch_size, [&](const Batch& batch) {
    const GradientSet grads = backward(model, batch.images, batch.labels);
    if (!std::isfinite(grads.loss)) {
      fail(ErrorKind::numeric, "training loss became non-finite at step " + std::to_string(model.step));
    }
    sgd_step(model, grads, opt);
    loss_sum += grads.loss * static_cast<double>(batch.labels.size());
    seen += batch.labels.size();
  });
  ++model.epoch;
  return loss_sum / static_cast<double>(seen);
}

inline void require_data(const Dataset& train, const Dataset& val) {
  if (train.size() == 0) fail(ErrorKind::data, "training set is empty");
  if (val.size() == 0) fail(ErrorKind::data, "validation set is empty");
}

}  // namespace detail

// Plain SGD training; the model ends at its last epoch.
inline TrainResult train_model(ModelGraph& model, const Dataset& train, const Dataset& val, const TrainingConfig& cfg,
                               std::optional<Criterion> criterion = {}) {
  cfg.check();
  detail::require_data(train, val);
  OptimizerState opt = cfg.optimizer(criterion);
  TrainResult result;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EpochRecord rec;
    rec.train_loss = detail::train_epoch(model, train, cfg.batch_size, opt, cfg.seed);
    rec.epoch = model.epoch;
    rec.val_accuracy = evaluate_accuracy(model, val);
    result.history.push_back(rec);
    if (rec.val_accuracy > result.best_val_accuracy || e == 0) {
      result.best_val_accuracy = rec.val_accuracy;
      result.best_epoch = e + 1;
    }
  }
  return result;
}

// Fine-tuning with a fresh optimizer at lr_scale x the training rate. The weights with the best
// validation accuracy (the starting point included) are restored at the end; step and epoch
// counters keep counting forward.
inline TrainResult fine_tune(ModelGraph& model, const Dataset& train, const Dataset& val, std::size_t epochs,
                             const TrainingConfig& cfg, float lr_scale = 0.1f, std::optional<Criterion> criterion = {}) {
  cfg.check();
  detail::require_data(train, val);
  TrainResult result;
  result.best_val_accuracy = evaluate_accuracy(model, val);
  if (epochs == 0) return result;
  OptimizerState opt = cfg.optimizer(criterion, lr_scale);
  ModelGraph best = model;
  for (std::size_t e = 0; e < epochs; ++e) {
    EpochRecord rec;
    rec.train_loss = detail::train_epoch(model, train, cfg.batch_size, opt, cfg.seed);
    rec.epoch = model.epoch;
    rec.val_accuracy = evaluate_accuracy(model, val);
    result.history.push_back(rec);
    if (rec.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = rec.val_accuracy;
      result.best_epoch = e + 1;
      best = model;
    }
  }
  if (result.best_epoch != epochs) {
    best.step = model.step;
    best.epoch = model.epoch;
    model = std::move(best);
  }
  return result;
}

// ---------------------------------------------------------------------------------------------
// Plans and the plan log

struct ChannelAction {
  BlockId block;
  std::vector<std::size_t> keep;
};

struct PruningPlan {
  std::vector<ChannelAction> channel_actions;
  std::vector<BlockId> layer_actions;
  Criterion criterion = Criterion::weight_magnitude;
  TableProvenance created_from;

  bool empty() const { return channel_actions.empty() && layer_actions.empty(); }
};

enum class ActionKind { shrink, remove };

inline std::string action_tag(ActionKind k) { return k == ActionKind::shrink ? "shrink" : "remove"; }

// One applied surgery action. The timestamp is logical (sequence number and model step), so logs
// of repeated runs compare equal byte for byte.
struct PlanLogEntry {
  std::uint64_t sequence = 0;
  std::uint64_t model_step = 0;
  ActionKind kind = ActionKind::shrink;
  BlockId block;
  std::vector<std::size_t> keep;  // shrink only
  std::uint64_t params_after = 0;
  std::uint64_t flops_after = 0;

  friend bool operator==(const PlanLogEntry&, const PlanLogEntry&) = default;
};

class PlanLog {
 public:
  static constexpr const char* kHeader = "timestamp\taction\tblock_id\tdetail\tparams_after\tflops_after";

  const std::vector<PlanLogEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void append(const ModelGraph& model, ActionKind kind, const BlockId& block, std::vector<std::size_t> keep = {}) {
    const auto c = analyze_complexity(model);
    entries_.push_back(PlanLogEntry{entries_.size() + 1, model.step, kind, block, std::move(keep), c.param_count,
                                    c.flop_count});
  }

  void write(std::ostream& os) const {
    os << kHeader << '\n';
    for (const auto& e : entries_) {
      os << e.sequence << '@' << e.model_step << '\t' << action_tag(e.kind) << '\t' << e.block.str() << '\t';
      if (e.kind == ActionKind::shrink) {
        os << "keep=";
        for (std::size_t i = 0; i < e.keep.size(); ++i) os << (i ? "," : "") << e.keep[i];
      } else {
        os << '-';
      }
      os << '\t' << e.params_after << '\t' << e.flops_after << '\n';
    }
  }

  std::string str() const {
    std::ostringstream os;
    write(os);
    return os.str();
  }

  static PlanLog parse(std::istream& is) {
    PlanLog log;
    std::string line;
    std::size_t line_no = 0;
    auto bad = [&](const std::string& why) -> void {
      fail(ErrorKind::format, "plan log line " + std::to_string(line_no) + ": " + why);
    };
    if (!std::getline(is, line) || line != kHeader) {
      line_no = 1;
      bad("missing header");
    }
    line_no = 1;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::vector<std::string> cols;
      std::istringstream ls(line);
      for (std::string col; std::getline(ls, col, '\t');) cols.push_back(col);
      if (cols.size() != 6) bad("expected 6 tab-separated columns, got " + std::to_string(cols.size()));
      PlanLogEntry e;
      try {
        const auto at = cols[0].find('@');
        if (at == std::string::npos) bad("timestamp must be <sequence>@<step>");
        e.sequence = std::stoull(cols[0].substr(0, at));
        e.model_step = std::stoull(cols[0].substr(at + 1));
        if (cols[1] == "shrink") {
          e.kind = ActionKind::shrink;
        } else if (cols[1] == "remove") {
          e.kind = ActionKind::remove;
        } else {
          bad("unknown action '" + cols[1] + "'");
        }
        e.block = BlockId::parse(cols[2]);
        if (e.kind == ActionKind::shrink) {
          if (cols[3].rfind("keep=", 0) != 0) bad("shrink detail must start with keep=");
          std::istringstream ks(cols[3].substr(5));
          for (std::string tok; std::getline(ks, tok, ',');) e.keep.push_back(std::stoull(tok));
        } else if (cols[3] != "-") {
          bad("remove detail must be '-'");
        }
        e.params_after = std::stoull(cols[4]);
        e.flops_after = std::stoull(cols[5]);
      } catch (const std::logic_error&) {
        bad("malformed number");
      }
      if (e.sequence != log.entries_.size() + 1) bad("sequence numbers must be consecutive");
      log.entries_.push_back(std::move(e));
    }
    return log;
  }

  friend bool operator==(const PlanLog&, const PlanLog&) = default;

 private:
  std::vector<PlanLogEntry> entries_;
};

// Validates a plan against the model, then applies it action by action (channels first), checking
// the whole graph after every individual action.
inline void apply_plan(ModelGraph& model, const PruningPlan& plan, PlanLog* log = nullptr) {
  std::set<BlockId> shrunk;
  for (const auto& a : plan.channel_actions) {
    if (!shrunk.insert(a.block).second) fail(ErrorKind::plan, "block " + a.block.str() + " shrunk twice in one plan");
  }
  std::set<BlockId> removed;
  for (const auto& id : plan.layer_actions) {
    if (shrunk.count(id)) fail(ErrorKind::plan, "block " + id.str() + " appears in both channel and layer actions");
    if (!removed.insert(id).second) fail(ErrorKind::plan, "block " + id.str() + " removed twice in one plan");
    const ResidualBlock* b = model.find_block(id);
    if (!b) fail(ErrorKind::plan, "unknown block " + id.str());
    if (!b->is_prunable) fail(ErrorKind::pruning, "block " + id.str() + " not eligible for layer pruning");
  }
  for (const auto& a : plan.channel_actions) {
    shrink_channels(model, a.block, a.keep);
    require_valid(model, "after shrinking " + a.block.str());
    if (log) log->append(model, ActionKind::shrink, a.block, a.keep);
  }
  for (const auto& id : plan.layer_actions) {
    remove_block(model, id);
    require_valid(model, "after removing " + id.str());
    if (log) log->append(model, ActionKind::remove, id);
  }
}

// Re-executes a logged plan on a copy of the starting model, checking the recorded complexity.
inline ModelGraph replay_plan_log(ModelGraph model, const PlanLog& log) {
  for (const auto& e : log.entries()) {
    if (e.kind == ActionKind::shrink) {
      shrink_channels(model, e.block, e.keep);
    } else {
      remove_block(model, e.block);
    }
    require_valid(model, "replay of action " + std::to_string(e.sequence));
    const auto c = analyze_complexity(model);
    if (c.param_count != e.params_after || c.flop_count != e.flops_after) {
      fail(ErrorKind::plan, "replay of action " + std::to_string(e.sequence) + " on " + e.block.str() +
                                " gives " + std::to_string(c.param_count) + " params, log says " +
                                std::to_string(e.params_after));
    }
  }
  return model;
}

// ---------------------------------------------------------------------------------------------
// Scoring hook

// Produces an importance table for the current model. Injected so that tests can supply
// constructed scores and observe how often scoring happens.
using Scorer = std::function<ImportanceTable(const ModelGraph&)>;

inline Scorer make_scorer(Criterion criterion, const Dataset* calibration_data, const CalibrationSpec& spec) {
  return [=](const ModelGraph& model) { return score(criterion, model, calibration_data, spec); };
}

// ---------------------------------------------------------------------------------------------
// Channel phase

struct ChannelSchedule {
  double target_ratio = 0.3;          // fraction of mid channels (at phase start) to remove; 0 disables
  double per_iteration_ratio = 0.1;   // fraction of the remaining mid channels removed per iteration
  std::size_t finetune_epochs_per_iter = 2;
  std::size_t min_channels_per_block = 4;

  friend bool operator==(const ChannelSchedule&, const ChannelSchedule&) = default;

  void check() const {
    if (!(target_ratio >= 0.0 && target_ratio < 1.0)) fail(ErrorKind::config, "prune.target_ratio must lie in [0,1)");
    if (!(per_iteration_ratio > 0.0 && per_iteration_ratio < 1.0)) {
      fail(ErrorKind::config, "prune.per_iteration_ratio must lie in (0,1)");
    }
    if (target_ratio > 0.0 && per_iteration_ratio > target_ratio) {
      fail(ErrorKind::config, "prune.per_iteration_ratio may not exceed prune.target_ratio");
    }
    if (min_channels_per_block == 0) fail(ErrorKind::config, "prune.min_channels must be positive");
  }
};

struct PhaseRecord {
  std::string phase;  // "channels", "layers" or "final"
  std::size_t iteration = 0;
  std::size_t removed = 0;  // channels or blocks removed in this step
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::optional<double> val_accuracy;
};

struct ChannelPhaseResult {
  std::size_t target_count = 0;
  std::size_t removed_count = 0;
  std::vector<PhaseRecord> iterations;
};

inline std::size_t total_mid_channels(const ModelGraph& model) {
  std::size_t t = 0;
  for (const auto& b : model.blocks) t += b.mid_channels;
  return t;
}

// Globally lowest-scoring filters, `count` of them, never taking a block below `floor` channels.
// Candidates are ordered by (score, block id, filter index).
inline PruningPlan select_channels(const ModelGraph& model, const ImportanceTable& table, std::size_t count,
                                   std::size_t floor) {
  struct Candidate {
    double score;
    BlockId block;
    std::size_t filter;
  };
  std::vector<Candidate> pool;
  std::map<BlockId, std::size_t> budget;
  for (const auto& b : model.blocks) {
    const BlockScores* s = table.find(b.id);
    if (!s || s->filter_scores.size() != b.mid_channels) {
      fail(ErrorKind::plan, "importance table does not cover block " + b.id.str() + " at its current width");
    }
    budget[b.id] = b.mid_channels > floor ? b.mid_channels - floor : 0;
    for (std::size_t f = 0; f < b.mid_channels; ++f) pool.push_back({s->filter_scores[f], b.id, f});
  }
  std::sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.block != b.block) return a.block < b.block;
    return a.filter < b.filter;
  });
  std::map<BlockId, std::set<std::size_t>> drop;
  std::size_t taken = 0;
  for (const auto& c : pool) {
    if (taken == count) break;
    if (budget[c.block] == 0) continue;
    --budget[c.block];
    drop[c.block].insert(c.filter);
    ++taken;
  }
  PruningPlan plan;
  plan.criterion = table.criterion;
  plan.created_from = table.provenance;
  for (const auto& b : model.blocks) {
    auto it = drop.find(b.id);
    if (it == drop.end()) continue;
    ChannelAction a{b.id, {}};
    for (std::size_t f = 0; f < b.mid_channels; ++f) {
      if (!it->second.count(f)) a.keep.push_back(f);
    }
    plan.channel_actions.push_back(std::move(a));
  }
  return plan;
}

struct FineTuneHook {
  const Dataset* train = nullptr;
  const Dataset* val = nullptr;
  TrainingConfig config;
  float lr_scale = 0.1f;
  std::optional<Criterion> criterion;

  std::optional<double> run(ModelGraph& model, std::size_t epochs) const {
    if (!train || !val) return std::nullopt;
    return fine_tune(model, *train, *val, epochs, config, lr_scale, criterion).best_val_accuracy;
  }
};

// Score, cut the globally weakest filters, fine-tune; repeat until the target count is removed.
inline ChannelPhaseResult iterative_channel_prune(ModelGraph& model, const Scorer& scorer, const ChannelSchedule& schedule,
                                                  const FineTuneHook& tune = {}, PlanLog* log = nullptr) {
  schedule.check();
  ChannelPhaseResult result;
  const std::size_t start_total = total_mid_channels(model);
  result.target_count = static_cast<std::size_t>(std::floor(schedule.target_ratio * static_cast<double>(start_total)));
  std::size_t achievable = 0;
  for (const auto& b : model.blocks) {
    if (b.mid_channels > schedule.min_channels_per_block) achievable += b.mid_channels - schedule.min_channels_per_block;
  }
  if (result.target_count > achievable) {
    std::ostringstream os;
    os << "channel target of " << result.target_count << " channels (ratio " << schedule.target_ratio
       << ") is unreachable with a floor of " << schedule.min_channels_per_block << " per block; at most "
       << achievable << " channels (ratio " << static_cast<double>(achievable) / static_cast<double>(start_total)
       << ") can be removed";
    fail(ErrorKind::pruning, os.str());
  }
  std::size_t iteration = 0;
  while (result.removed_count < result.target_count) {
    const std::size_t current = total_mid_channels(model);
    const auto per_iter = static_cast<std::size_t>(std::ceil(schedule.per_iteration_ratio * static_cast<double>(current)));
    const std::size_t k = std::min(per_iter, result.target_count - result.removed_count);
    const ImportanceTable table = scorer(model);
    const PruningPlan plan = select_channels(model, table, k, schedule.min_channels_per_block);
    apply_plan(model, plan, log);
    result.removed_count += k;
    PhaseRecord rec{"channels", ++iteration, k, 0, 0, std::nullopt};
    rec.val_accuracy = tune.run(model, schedule.finetune_epochs_per_iter);
    const auto c = analyze_complexity(model);
    rec.params = c.param_count;
    rec.flops = c.flop_count;
    result.iterations.push_back(rec);
  }
  return result;
}

// ---------------------------------------------------------------------------------------------
// Layer phase

struct LayerPhaseResult {
  ImportanceTable table;
  std::vector<BlockId> ranking;
  std::vector<BlockId> removed;
};

// All block scores are computed once, up front; the n lowest-ranked prunable blocks are then removed
// in a single pass. Fine-tuning is left to the caller.
inline LayerPhaseResult one_shot_layer_prune(ModelGraph& model, const Scorer& scorer, std::size_t n,
                                             PlanLog* log = nullptr) {
  const std::size_t available = model.prunable_block_count();
  if (n > available) {
    fail(ErrorKind::pruning, "cannot remove " + std::to_string(n) + " blocks: only " + std::to_string(available) +
                                 " blocks are eligible for layer pruning");
  }
  LayerPhaseResult result;
  if (n == 0) return result;
  result.table = scorer(model);
  result.ranking = block_ranking(result.table);
  if (result.ranking.size() < n) fail(ErrorKind::plan, "importance table ranks fewer blocks than requested");
  result.removed.assign(result.ranking.begin(), result.ranking.begin() + static_cast<std::ptrdiff_t>(n));
  PruningPlan plan;
  plan.criterion = result.table.criterion;
  plan.created_from = result.table.provenance;
  plan.layer_actions = result.removed;
  apply_plan(model, plan, log);
  return result;
}

// ---------------------------------------------------------------------------------------------
// Hybrid orchestration

enum class PhaseOrder { channels_then_layers, layers_then_channels };

inline std::string order_tag(PhaseOrder o) { return o == PhaseOrder::channels_then_layers ? "cl" : "lc"; }

inline PhaseOrder parse_order(const std::string& s) {
  if (s == "cl") return PhaseOrder::channels_then_layers;
  if (s == "lc") return PhaseOrder::layers_then_channels;
  fail(ErrorKind::config, "unknown phase order '" + s + "' (expected cl or lc)");
}

struct HybridConfig {
  PhaseOrder order = PhaseOrder::channels_then_layers;
  ChannelSchedule channel_schedule;
  std::size_t blocks_to_remove = 1;
  std::size_t layer_finetune_epochs = 2;
  std::size_t final_finetune_epochs = 4;
  Criterion criterion = Criterion::weight_magnitude;
  bool rescore_between_phases = true;
  float finetune_lr_scale = 0.1f;

  friend bool operator==(const HybridConfig&, const HybridConfig&) = default;

  void check() const {
    channel_schedule.check();
    if (!(finetune_lr_scale > 0.0f)) fail(ErrorKind::config, "prune.finetune_lr_scale must be positive");
  }
};

struct HybridResult {
  std::vector<PhaseRecord> rows;  // baseline, one row per phase boundary, final
  std::vector<PhaseRecord> channel_iterations;
  std::vector<BlockId> removed_blocks;
  PlanLog log;
};

struct HybridInputs {
  const Dataset* train = nullptr;
  const Dataset* val = nullptr;
  const Dataset* calibration = nullptr;  // defaults to the training set
  TrainingConfig training;
  CalibrationSpec calibration_spec;
  Scorer scorer;  // defaults to the configured criterion
};

inline PhaseRecord snapshot_row(const std::string& phase, const ModelGraph& model, const Dataset* val,
                                std::size_t removed = 0) {
  const auto c = analyze_complexity(model);
  PhaseRecord r{phase, 0, removed, c.param_count, c.flop_count, std::nullopt};
  if (val && val->size() > 0) r.val_accuracy = evaluate_accuracy(model, *val);
  return r;
}

inline HybridResult run_hybrid(ModelGraph& model, const HybridConfig& cfg, const HybridInputs& in) {
  cfg.check();
  if (cfg.blocks_to_remove > model.prunable_block_count()) {
    fail(ErrorKind::pruning, "blocks_to_remove = " + std::to_string(cfg.blocks_to_remove) + " exceeds the " +
                                 std::to_string(model.prunable_block_count()) + " prunable blocks");
  }
  HybridResult result;
  const Dataset* calib = in.calibration ? in.calibration : in.train;
  Scorer base = in.scorer ? in.scorer : make_scorer(cfg.criterion, calib, in.calibration_spec);

  // Without re-scoring, the second phase starts from the table computed for the first one.
  std::optional<ImportanceTable> first_table;
  bool second_phase = false;
  bool reused = false;
  Scorer scorer = [&](const ModelGraph& m) {
    if (second_phase && !cfg.rescore_between_phases && first_table && !reused) {
      reused = true;
      ImportanceTable stale = *first_table;
      std::erase_if(stale.blocks, [&](const BlockScores& b) { return m.find_block(b.id) == nullptr; });
      return stale;
    }
    ImportanceTable t = base(m);
    if (!second_phase && !first_table) first_table = t;
    return t;
  };

  FineTuneHook tune{in.train, in.val, in.training, cfg.finetune_lr_scale, cfg.criterion};
  result.rows.push_back(snapshot_row("baseline", model, in.val));

  auto channel_phase = [&] {
    const auto r = iterative_channel_prune(model, scorer, cfg.channel_schedule, tune, &result.log);
    result.channel_iterations = r.iterations;
    result.rows.push_back(snapshot_row("channels", model, in.val, r.removed_count));
  };
  auto layer_phase = [&] {
    const auto r = one_shot_layer_prune(model, scorer, cfg.blocks_to_remove, &result.log);
    result.removed_blocks = r.removed;
    if (!r.removed.empty()) tune.run(model, cfg.layer_finetune_epochs);
    result.rows.push_back(snapshot_row("layers", model, in.val, r.removed.size()));
  };

  if (cfg.order == PhaseOrder::channels_then_layers) {
    channel_phase();
    second_phase = true;
    layer_phase();
  } else {
    layer_phase();
    second_phase = true;
    channel_phase();
  }
  tune.run(model, cfg.final_finetune_epochs);
  result.rows.push_back(snapshot_row("final", model, in.val));
  return result;
}

}  // namespace prunelab
