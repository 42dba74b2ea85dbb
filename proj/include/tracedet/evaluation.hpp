#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracedet/errors.hpp"
#include "tracedet/net.hpp"
#include "tracedet/trace.hpp"

namespace tracedet {

inline constexpr const char* kReportFormat = "tracedet-report-v1";

struct RocResult {
  double auroc = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::size_t tie_count = 0;  // positive/negative pairs with equal scores
};

// Probability that a random positive outranks a random negative, ties worth
// half, via the rank (Mann-Whitney) formulation.
inline RocResult auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw validation_error("auroc: scores/labels length mismatch");
  RocResult result;
  for (int y : labels) {
    if (y == 1)
      ++result.n_pos;
    else if (y == 0)
      ++result.n_neg;
    else
      throw validation_error("auroc: labels must be binary");
  }
  if (result.n_pos == 0 || result.n_neg == 0)
    throw undefined_metric_error("auroc: undefined without both classes (n_pos=" +
                                 std::to_string(result.n_pos) + ", n_neg=" +
                                 std::to_string(result.n_neg) + ")");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // 1-based average rank of the tie group [i, j)
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    std::size_t pos_in_group = 0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) ++pos_in_group;
    rank_sum_pos += avg_rank * static_cast<double>(pos_in_group);
    result.tie_count += pos_in_group * (j - i - pos_in_group);
    i = j;
  }
  const double np = static_cast<double>(result.n_pos);
  const double u = rank_sum_pos - np * (np + 1.0) / 2.0;
  result.auroc = u / (np * static_cast<double>(result.n_neg));
  return result;
}

// O(n_pos * n_neg) pairwise count; the oracle the fast path must match.
inline double auroc_bruteforce(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw validation_error("auroc_bruteforce: scores/labels length mismatch");
  std::size_t n_pos = 0, n_neg = 0;
  for (int y : labels) {
    if (y == 1)
      ++n_pos;
    else if (y == 0)
      ++n_neg;
    else
      throw validation_error("auroc_bruteforce: labels must be binary");
  }
  if (n_pos == 0 || n_neg == 0)
    throw undefined_metric_error("auroc_bruteforce: undefined without both classes");
  double wins = 0.0;
  for (std::size_t p = 0; p < scores.size(); ++p) {
    if (labels[p] != 1) continue;
    for (std::size_t q = 0; q < scores.size(); ++q) {
      if (labels[q] != 0) continue;
      if (scores[p] > scores[q])
        wins += 1.0;
      else if (scores[p] == scores[q])
        wins += 0.5;
    }
  }
  return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// The naive confidence baseline: mean normalized entropy over all steps and
// positions, used directly as a hallucination score.
inline double ave_entropy_score(const ActionTrace& trace) {
  trace.validate();
  const double inv = 1.0 / trace.max_entropy();
  double total = 0.0;
  for (double e : trace.entropies.values()) total += e * inv;
  return total / static_cast<double>(trace.entropies.size());
}

struct ExampleDiagnostics {
  std::string id;
  int label = 0;
  std::vector<std::size_t> selected;   // S: steps with M = 1
  std::vector<double> h_max;           // per-step max token entropy, raw nats
  std::optional<double> e_bar;         // mean of h_max over S; empty when S is empty
  double selection_rate = 0.0;         // |S| / T
  std::optional<double> window_recall;
  std::optional<double> window_precision;
};

struct MaskDiagnostics {
  std::vector<ExampleDiagnostics> examples;

  double mean_selection_rate() const {
    if (examples.empty()) return 0.0;
    double total = 0.0;
    for (const auto& e : examples) total += e.selection_rate;
    return total / static_cast<double>(examples.size());
  }

  // Population variance of Ē over the examples where it is defined.
  double ebar_variance() const {
    std::vector<double> vals;
    for (const auto& e : examples)
      if (e.e_bar) vals.push_back(*e.e_bar);
    if (vals.size() < 2) return 0.0;
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    return var / static_cast<double>(vals.size());
  }

  std::optional<double> mean_window_recall() const {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& e : examples)
      if (e.window_recall) {
        total += *e.window_recall;
        ++count;
      }
    if (count == 0) return std::nullopt;
    return total / static_cast<double>(count);
  }
};

struct EvalResult {
  RocResult roc;
  MaskDiagnostics diagnostics;
  std::vector<double> scores;
  std::vector<std::string> ids;
};

// Scores one split with the model in evaluation mode under the requested
// mask mode and derives the mask diagnostics from the raw (unnormalized)
// entropies, so they stay comparable across training configurations.
inline EvalResult evaluate_model(const ModelParams& params, const ModelConfig& config,
                                 const TraceDataset& dataset, Split split, MaskMode mask_mode,
                                 bool normalize_inputs = true) {
  const std::vector<const LabeledTrace*> items = dataset.subset(split);
  if (items.empty())
    throw validation_error("evaluate_model: split '" + to_string(split) + "' is empty");
  const TraceBatch batch = stack_batch(items, normalize_inputs);
  ModelConfig eval_config = config;
  eval_config.mask_mode = mask_mode;
  const ForwardResult fw = forward_eval(batch, params, eval_config);

  EvalResult result;
  result.scores = fw.y_hat;
  result.ids = batch.ids;
  result.roc = auroc(result.scores, batch.labels);

  const std::size_t t_steps = batch.steps;
  for (std::size_t b = 0; b < items.size(); ++b) {
    const LabeledTrace& item = *items[b];
    ExampleDiagnostics diag;
    diag.id = item.trace.meta.example_id;
    diag.label = item.label;
    diag.h_max.resize(t_steps);
    for (std::size_t t = 0; t < t_steps; ++t) {
      double mx = 0.0;
      for (std::size_t i = 0; i < item.trace.positions; ++i)
        mx = std::max(mx, item.trace.entropies.at(t, i));
      diag.h_max[t] = mx;
      if (fw.mask.values.at(t, b) > 0.5) diag.selected.push_back(t);
    }
    diag.selection_rate =
        static_cast<double>(diag.selected.size()) / static_cast<double>(t_steps);
    if (!diag.selected.empty()) {
      double total = 0.0;
      for (std::size_t t : diag.selected) total += diag.h_max[t];
      diag.e_bar = total / static_cast<double>(diag.selected.size());
    }
    if (item.planted_window && !item.planted_window->empty()) {
      std::size_t hits = 0;
      for (std::size_t t : *item.planted_window)
        if (std::binary_search(diag.selected.begin(), diag.selected.end(), t)) ++hits;
      diag.window_recall =
          static_cast<double>(hits) / static_cast<double>(item.planted_window->size());
      if (!diag.selected.empty())
        diag.window_precision =
            static_cast<double>(hits) / static_cast<double>(diag.selected.size());
    }
    result.diagnostics.examples.push_back(std::move(diag));
  }
  return result;
}

// Writes report.json and an aligned report.txt; output is byte-deterministic
// for identical inputs. Rows are sorted by AUROC descending, names breaking
// ties.
inline void compare_report(const std::map<std::string, RocResult>& results,
                           const std::filesystem::path& dir) {
  if (results.empty()) throw validation_error("compare_report: no methods to report");
  std::vector<std::pair<std::string, RocResult>> rows(results.begin(), results.end());
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.second.auroc != b.second.auroc) return a.second.auroc > b.second.auroc;
    return a.first < b.first;
  });
  std::filesystem::create_directories(dir);

  nlohmann::ordered_json j;
  j["format"] = kReportFormat;
  nlohmann::ordered_json jrows = nlohmann::ordered_json::array();
  for (const auto& [name, roc] : rows) {
    nlohmann::ordered_json row;
    row["method"] = name;
    row["auroc"] = roc.auroc;
    row["n_pos"] = roc.n_pos;
    row["n_neg"] = roc.n_neg;
    row["tie_count"] = roc.tie_count;
    jrows.push_back(std::move(row));
  }
  j["rows"] = std::move(jrows);
  {
    std::ofstream out(dir / "report.json", std::ios::binary);
    if (!out) throw io_error("compare_report: cannot write " + (dir / "report.json").string());
    out << j.dump(2) << "\n";
  }
  {
    std::ofstream out(dir / "report.txt", std::ios::binary);
    if (!out) throw io_error("compare_report: cannot write " + (dir / "report.txt").string());
    char line[128];
    std::snprintf(line, sizeof(line), "%-28s %10s %7s %7s %7s\n", "method", "auroc", "pos",
                  "neg", "ties");
    out << line;
    for (const auto& [name, roc] : rows) {
      std::snprintf(line, sizeof(line), "%-28s %10.6f %7zu %7zu %7zu\n", name.c_str(),
                    roc.auroc, roc.n_pos, roc.n_neg, roc.tie_count);
      out << line;
    }
  }
}

}  // namespace tracedet
