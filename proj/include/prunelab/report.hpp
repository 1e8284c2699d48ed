#pragma once

#include <prunelab/criteria.hpp>
#include <prunelab/metrics.hpp>

#include <algorithm>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace prunelab {

// "Weight Magnitude (1 block)", "Feature Maps Rank (2 blocks)".
inline std::string method_label(Criterion c, std::size_t blocks) {
  return criterion_title(c) + " (" + std::to_string(blocks) + (blocks == 1 ? " block)" : " blocks)");
}

inline std::string baseline_label(const std::string& architecture, const std::string& dataset) {
  return "Baseline " + architecture + " on " + dataset;
}

inline std::string with_thousands(std::uint64_t v) {
  std::string digits = std::to_string(v), out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

inline std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

namespace detail {

using Cells = std::vector<std::string>;

inline void write_markdown(std::ostream& os, const Cells& header, const std::vector<Cells>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = std::max<std::size_t>(3, header[c].size());
    for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
  }
  auto line = [&](const Cells& cells) {
    os << '|';
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string pad(width[c] - cells[c].size(), ' ');
      os << ' ' << (c == 0 ? cells[c] + pad : pad + cells[c]) << " |";
    }
    os << '\n';
  };
  line(header);
  os << '|';
  // Method column left-aligned, numeric columns right-aligned.
  for (std::size_t c = 0; c < header.size(); ++c) {
    os << (c == 0 ? ":" + std::string(width[c] + 1, '-') : std::string(width[c] + 1, '-') + ":") << '|';
  }
  os << '\n';
  for (const auto& r : rows) line(r);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

inline void write_csv(std::ostream& os, const Cells& header, const std::vector<Cells>& rows) {
  auto line = [&](const Cells& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) os << (c ? "," : "") << csv_field(cells[c]);
    os << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

}  // namespace detail

// Method, Accuracy, Parameters, FLOPs. The counting convention heads the Markdown form.
inline void write_complexity_markdown(std::ostream& os, const std::vector<ExperimentRow>& rows) {
  os << "FLOPs convention: " << kFlopConvention << ".\n\n";
  std::vector<detail::Cells> cells;
  for (const auto& r : rows) {
    cells.push_back({r.method, r.accuracy ? fixed(*r.accuracy * 100.0, 2) + " %" : "-", with_thousands(r.params),
                     with_thousands(r.flops)});
  }
  detail::write_markdown(os, {"Method", "Accuracy", "Parameters", "FLOPs"}, cells);
}

inline void write_complexity_csv(std::ostream& os, const std::vector<ExperimentRow>& rows) {
  std::vector<detail::Cells> cells;
  for (const auto& r : rows) {
    cells.push_back({r.method, r.accuracy ? fixed(*r.accuracy * 100.0, 2) : "", std::to_string(r.params),
                     std::to_string(r.flops)});
  }
  detail::write_csv(os, {"method", "accuracy_pct", "parameters", "flops"}, cells);
}

// Method, Latency, Latency Reduction; the baseline row shows '-' for the reduction.
inline void write_latency_markdown(std::ostream& os, const std::vector<ExperimentRow>& rows) {
  std::vector<detail::Cells> cells;
  for (const auto& r : rows) {
    cells.push_back({r.method, r.latency_ms ? fixed(*r.latency_ms, 3) + " ms" : "-",
                     r.latency_reduction_pct ? fixed(*r.latency_reduction_pct, 2) + " %" : "-"});
  }
  detail::write_markdown(os, {"Method", "Latency", "Latency Reduction"}, cells);
}

inline void write_latency_csv(std::ostream& os, const std::vector<ExperimentRow>& rows) {
  std::vector<detail::Cells> cells;
  for (const auto& r : rows) {
    cells.push_back({r.method, r.latency_ms ? fixed(*r.latency_ms, 3) : "",
                     r.latency_reduction_pct ? fixed(*r.latency_reduction_pct, 2) : ""});
  }
  detail::write_csv(os, {"method", "latency_ms", "latency_reduction_pct"}, cells);
}

// Every ExperimentRow field; reduction columns stay empty where a row has nothing to compare against.
inline void write_summary_csv(std::ostream& os, const std::vector<ExperimentRow>& rows) {
  auto opt = [](const std::optional<double>& v, int decimals) { return v ? fixed(*v, decimals) : std::string(); };
  std::vector<detail::Cells> cells;
  for (const auto& r : rows) {
    cells.push_back({r.method, r.accuracy ? fixed(*r.accuracy * 100.0, 2) : "", std::to_string(r.params),
                     std::to_string(r.flops), opt(r.latency_ms, 3), opt(r.accuracy_delta_points, 2),
                     opt(r.param_reduction_pct, 2), opt(r.flop_reduction_pct, 2), opt(r.latency_reduction_pct, 2)});
  }
  detail::write_csv(os,
                    {"method", "accuracy_pct", "parameters", "flops", "latency_ms", "accuracy_delta_points",
                     "param_reduction_pct", "flop_reduction_pct", "latency_reduction_pct"},
                    cells);
}

}  // namespace prunelab
