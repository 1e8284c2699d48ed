#pragma once

#include <prunelab/dataset.hpp>
#include <prunelab/error.hpp>
#include <prunelab/model.hpp>
#include <prunelab/svd.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace prunelab {

enum class Criterion { weight_magnitude, bn_scale, feature_map_rank, taylor };

inline constexpr Criterion kAllCriteria[] = {Criterion::weight_magnitude, Criterion::bn_scale,
                                             Criterion::feature_map_rank, Criterion::taylor};

inline std::string criterion_tag(Criterion c) {
  switch (c) {
    case Criterion::weight_magnitude: return "wm";
    case Criterion::bn_scale: return "bn";
    case Criterion::feature_map_rank: return "fmr";
    case Criterion::taylor: return "taylor";
  }
  return "?";
}

// Row label used in the result tables.
inline std::string criterion_title(Criterion c) {
  switch (c) {
    case Criterion::weight_magnitude: return "Weight Magnitude";
    case Criterion::bn_scale: return "Batch Normalization Scale";
    case Criterion::feature_map_rank: return "Feature Maps Rank";
    case Criterion::taylor: return "Weight Taylor";
  }
  return "?";
}

inline Criterion parse_criterion(const std::string& text) {
  for (Criterion c : kAllCriteria) {
    if (criterion_tag(c) == text) return c;
  }
  fail(ErrorKind::config, "unknown criterion '" + text + "' (expected wm, bn, fmr or taylor)");
}

inline bool is_data_driven(Criterion c) { return c == Criterion::feature_map_rank || c == Criterion::taylor; }

// Weight slices are taken along the output-filter axis of [out, in, k, k] conv weights.
inline constexpr std::size_t kFilterAxis = 0;

struct CalibrationSpec {
  std::size_t batch_count = 4;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double rank_epsilon = 1e-3;

  friend bool operator==(const CalibrationSpec&, const CalibrationSpec&) = default;

  void check() const {
    if (batch_count == 0 || batch_size == 0) fail(ErrorKind::config, "calibration batch_count and batch_size must be positive");
    if (!(rank_epsilon > 0.0)) fail(ErrorKind::config, "calibration rank_epsilon must be positive");
  }
};

struct BlockScores {
  BlockId id;
  bool prunable = false;
  std::vector<double> filter_scores;  // one per conv1 filter / bn1 channel
  double block_score = 0.0;           // mean of filter_scores
};

struct TableProvenance {
  std::uint64_t model_step = 0;
  std::uint64_t model_revision = 0;
  std::optional<CalibrationSpec> calibration;
};

struct ImportanceTable {
  Criterion criterion = Criterion::weight_magnitude;
  std::vector<BlockScores> blocks;
  TableProvenance provenance;

  const BlockScores* find(const BlockId& id) const {
    for (const auto& b : blocks) {
      if (b.id == id) return &b;
    }
    return nullptr;
  }
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline ImportanceTable make_table(Criterion criterion, const ModelGraph& model) {
  ImportanceTable table;
  table.criterion = criterion;
  table.provenance.model_step = model.step;
  table.provenance.model_revision = model.revision;
  for (const auto& block : model.blocks) {
    table.blocks.push_back(BlockScores{block.id, block.is_prunable, std::vector<double>(block.mid_channels, 0.0), 0.0});
  }
  return table;
}

inline void finish_table(ImportanceTable& table) {
  for (auto& b : table.blocks) {
    for (double s : b.filter_scores) {
      if (!std::isfinite(s) || s < 0.0) {
        fail(ErrorKind::numeric, "criterion " + criterion_tag(table.criterion) + " produced invalid score in " + b.id.str());
      }
    }
    b.block_score = mean_of(b.filter_scores);
  }
}

}  // namespace detail

// L1 norm of every filter slice of a conv weight.
inline std::vector<double> filter_l1_norms(const Tensor& w) {
  const std::size_t filters = w.dim(kFilterAxis), volume = w.size() / filters;
  std::vector<double> out(filters, 0.0);
  for (std::size_t f = 0; f < filters; ++f) {
    for (std::size_t j = 0; j < volume; ++j) out[f] += std::abs(static_cast<double>(w[f * volume + j]));
  }
  return out;
}

// |sum(g * w)| over every filter slice: the first-order loss change from zeroing that filter.
inline std::vector<double> filter_taylor_terms(const Tensor& w, const Tensor& g) {
  require_shape(g, w.shape(), "taylor gradient");
  const std::size_t filters = w.dim(kFilterAxis), volume = w.size() / filters;
  std::vector<double> out(filters, 0.0);
  for (std::size_t f = 0; f < filters; ++f) {
    double dot = 0.0;
    for (std::size_t j = 0; j < volume; ++j) dot += static_cast<double>(g[f * volume + j]) * w[f * volume + j];
    out[f] = std::abs(dot);
  }
  return out;
}

// L1 norm of each conv1 filter; block score is the mean over filters.
inline ImportanceTable score_weight_magnitude(const ModelGraph& model) {
  ImportanceTable table = detail::make_table(Criterion::weight_magnitude, model);
  for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
    table.blocks[bi].filter_scores = filter_l1_norms(model.blocks[bi].conv1.weight);
  }
  detail::finish_table(table);
  return table;
}

// Squared bn1 scale factor per channel; block score is the mean squared scale.
inline ImportanceTable score_bn_scale(const ModelGraph& model) {
  ImportanceTable table = detail::make_table(Criterion::bn_scale, model);
  for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
    const Tensor& gamma = model.blocks[bi].bn1.gamma;
    for (std::size_t c = 0; c < gamma.size(); ++c) {
      const double g = gamma[c];
      table.blocks[bi].filter_scores[c] = g * g;
    }
  }
  detail::finish_table(table);
  return table;
}

// Mean thresholded rank of each post-bn1 feature map over the calibration samples (eval mode).
inline ImportanceTable score_feature_map_rank(const ModelGraph& model, const Dataset& data, const CalibrationSpec& spec) {
  spec.check();
  ImportanceTable table = detail::make_table(Criterion::feature_map_rank, model);
  table.provenance.calibration = spec;
  const auto batches = sample_batches(data, spec.batch_count, spec.batch_size, spec.seed);
  std::size_t samples = 0;
  for (const auto& batch : batches) {
    ForwardResult result = forward(model, batch.images, Mode::eval, true);
    for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
      const Tensor& maps = result.activations->post_bn1.at(model.blocks[bi].id);
      const std::size_t n = maps.dim(0), c = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
      if (h < 1 || w < 1) fail(ErrorKind::structural, model.blocks[bi].id.str() + ": feature map smaller than 1x1");
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::span<const float> map(maps.data() + (i * c + ch) * h * w, h * w);
          try {
            table.blocks[bi].filter_scores[ch] += static_cast<double>(thresholded_rank(map, h, w, spec.rank_epsilon));
          } catch (const Error& e) {
            fail(e.kind(), model.blocks[bi].id.str() + ": " + e.what());
          }
        }
      }
    }
    samples += batch.labels.size();
  }
  for (auto& b : table.blocks) {
    for (auto& s : b.filter_scores) s /= static_cast<double>(samples);
  }
  detail::finish_table(table);
  return table;
}

// First-order Taylor: per batch |sum(dL/dW * W)| over each conv1 filter, averaged over batches.
inline ImportanceTable score_taylor(const ModelGraph& model, const Dataset& data, const CalibrationSpec& spec) {
  spec.check();
  ImportanceTable table = detail::make_table(Criterion::taylor, model);
  table.provenance.calibration = spec;
  const auto batches = sample_batches(data, spec.batch_count, spec.batch_size, spec.seed);
  for (const auto& batch : batches) {
    const GradientSet grads = compute_gradients(model, batch.images, batch.labels, Mode::eval);
    for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
      const auto& block = model.blocks[bi];
      const auto terms = filter_taylor_terms(block.conv1.weight, grads.at(block.id.str() + ".conv1.weight"));
      for (std::size_t f = 0; f < terms.size(); ++f) table.blocks[bi].filter_scores[f] += terms[f];
    }
  }
  for (auto& b : table.blocks) {
    for (auto& s : b.filter_scores) s /= static_cast<double>(batches.size());
  }
  detail::finish_table(table);
  return table;
}

// Dispatch; `data` is required for the data-driven criteria.
inline ImportanceTable score(Criterion criterion, const ModelGraph& model, const Dataset* data,
                             const CalibrationSpec& spec) {
  if (is_data_driven(criterion) && (!data || data->size() == 0)) {
    fail(ErrorKind::data, "criterion " + criterion_tag(criterion) + " needs calibration data");
  }
  switch (criterion) {
    case Criterion::weight_magnitude: return score_weight_magnitude(model);
    case Criterion::bn_scale: return score_bn_scale(model);
    case Criterion::feature_map_rank: return score_feature_map_rank(model, *data, spec);
    case Criterion::taylor: return score_taylor(model, *data, spec);
  }
  fail(ErrorKind::config, "unhandled criterion");
}

// Prunable blocks by ascending block score; ties go to the shallower block.
inline std::vector<BlockId> block_ranking(const ImportanceTable& table) {
  std::vector<const BlockScores*> entries;
  for (const auto& b : table.blocks) {
    if (b.prunable) entries.push_back(&b);
  }
  std::stable_sort(entries.begin(), entries.end(), [](const BlockScores* a, const BlockScores* b) {
    if (a->block_score != b->block_score) return a->block_score < b->block_score;
    return a->id < b->id;
  });
  std::vector<BlockId> out;
  out.reserve(entries.size());
  for (const auto* e : entries) out.push_back(e->id);
  return out;
}

// ---------------------------------------------------------------------------------------------
// Export

inline std::string format_score(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// criterion,block_id,filter_index-or-BLOCK,score
inline void write_table_csv(std::ostream& os, const ImportanceTable& table) {
  os << "criterion,block_id,filter,score\n";
  const std::string tag = criterion_tag(table.criterion);
  for (const auto& b : table.blocks) {
    for (std::size_t f = 0; f < b.filter_scores.size(); ++f) {
      os << tag << ',' << b.id.str() << ',' << f << ',' << format_score(b.filter_scores[f]) << '\n';
    }
    os << tag << ',' << b.id.str() << ",BLOCK," << format_score(b.block_score) << '\n';
  }
}

// Whitespace-separated columns for gnuplot: index group position block_id score prunable.
inline void write_histogram(std::ostream& os, const ImportanceTable& table) {
  os << "# " << criterion_title(table.criterion) << " block importance\n";
  os << "# index group position block_id score prunable\n";
  for (std::size_t i = 0; i < table.blocks.size(); ++i) {
    const auto& b = table.blocks[i];
    os << i << ' ' << b.id.group << ' ' << b.id.position << ' ' << b.id.str() << ' ' << format_score(b.block_score)
       << ' ' << (b.prunable ? 1 : 0) << '\n';
  }
}

}  // namespace prunelab
