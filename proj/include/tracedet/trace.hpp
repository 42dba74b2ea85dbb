#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tracedet/errors.hpp"
#include "tracedet/tensor.hpp"

namespace tracedet {

inline constexpr const char* kTraceFormat = "tracedet-v1";

struct TraceMeta {
  std::string remask_strategy = "low_confidence";
  std::size_t step_length = 1;
  std::string source = "sim";
  std::string example_id;

  bool operator==(const TraceMeta&) const = default;
};

// One example's step-by-step entropy record: a T x n matrix of per-step,
// per-position Shannon entropies in nats.
struct ActionTrace {
  std::size_t steps = 0;      // T
  std::size_t positions = 0;  // n
  std::size_t vocab_size = 0; // V
  Tensor entropies;           // shape [T, n]
  TraceMeta meta;

  double max_entropy() const { return std::log(static_cast<double>(vocab_size)); }

  void validate() const {
    if (steps < 1) throw validation_error("ActionTrace: steps must be >= 1");
    if (positions < 1) throw validation_error("ActionTrace: positions must be >= 1");
    if (vocab_size < 2) throw validation_error("ActionTrace: vocab_size must be >= 2");
    if (entropies.shape() != std::vector<std::size_t>{steps, positions})
      throw validation_error("ActionTrace: entropies shape " +
                             Tensor::shape_string(entropies.shape()) + " does not match T=" +
                             std::to_string(steps) + ", n=" + std::to_string(positions));
    const double bound = max_entropy() * (1.0 + 1e-12) + 1e-12;
    for (double e : entropies.values()) {
      if (!(e >= 0.0) || e > bound)
        throw validation_error("ActionTrace: entropies entry " + std::to_string(e) +
                               " outside [0, ln V] for V=" + std::to_string(vocab_size));
    }
  }

  bool operator==(const ActionTrace& o) const {
    return steps == o.steps && positions == o.positions && vocab_size == o.vocab_size &&
           entropies.shape() == o.entropies.shape() &&
           entropies.values() == o.entropies.values() && meta == o.meta;
  }
};

struct LabeledTrace {
  ActionTrace trace;
  int label = 0;  // 1 = hallucinated, 0 = factual
  // Simulator ground truth for the informative steps; absent for exports and
  // for patterns whose signal is not step-localized.
  std::optional<std::vector<std::size_t>> planted_window;

  void validate() const {
    trace.validate();
    if (label != 0 && label != 1) throw validation_error("LabeledTrace: label must be 0 or 1");
    if (planted_window) {
      std::size_t prev = 0;
      bool first = true;
      for (std::size_t s : *planted_window) {
        if (s >= trace.steps)
          throw validation_error("LabeledTrace: planted_window step " + std::to_string(s) +
                                 " outside [0, T)");
        if (!first && s <= prev)
          throw validation_error("LabeledTrace: planted_window must be sorted and unique");
        prev = s;
        first = false;
      }
    }
  }

  bool operator==(const LabeledTrace&) const = default;
};

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  throw validation_error("unknown split");
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw validation_error("unknown split tag '" + s + "'");
}

struct TraceDataset {
  std::vector<LabeledTrace> items;
  std::map<std::string, Split> split;

  void validate() const {
    std::size_t t0 = 0, n0 = 0;
    for (const auto& item : items) {
      item.validate();
      if (t0 == 0) {
        t0 = item.trace.steps;
        n0 = item.trace.positions;
      } else if (item.trace.steps != t0 || item.trace.positions != n0) {
        throw validation_error("TraceDataset: item '" + item.trace.meta.example_id +
                               "' has shape (T=" + std::to_string(item.trace.steps) +
                               ", n=" + std::to_string(item.trace.positions) +
                               "); expected (T=" + std::to_string(t0) + ", n=" +
                               std::to_string(n0) + ")");
      }
      if (!split.count(item.trace.meta.example_id))
        throw validation_error("TraceDataset: split missing example '" +
                               item.trace.meta.example_id + "'");
    }
    if (split.size() != items.size())
      throw validation_error("TraceDataset: split has " + std::to_string(split.size()) +
                             " entries for " + std::to_string(items.size()) + " items");
  }

  std::vector<const LabeledTrace*> subset(Split which) const {
    std::vector<const LabeledTrace*> out;
    for (const auto& item : items)
      if (split.at(item.trace.meta.example_id) == which) out.push_back(&item);
    return out;
  }

  bool operator==(const TraceDataset&) const = default;
};

// Stacked model input of shape [T, B, D] with D = n.
struct TraceBatch {
  std::size_t steps = 0;  // T
  std::size_t batch = 0;  // B
  std::size_t dim = 0;    // D
  Tensor data;            // [T, B, D]
  std::vector<int> labels;
  std::vector<std::string> ids;
};

// Rescales every entry by 1/ln(V) so values land in [0, 1].
inline ActionTrace normalize_entropy(const ActionTrace& trace) {
  trace.validate();
  if (trace.vocab_size < 2) throw validation_error("normalize_entropy: vocab_size must be >= 2");
  ActionTrace out = trace;
  const double inv = 1.0 / trace.max_entropy();
  for (auto& e : out.entropies.values()) e = std::min(1.0, e * inv);
  return out;
}

inline TraceBatch stack_batch(const std::vector<const LabeledTrace*>& traces, bool normalize) {
  if (traces.empty()) throw validation_error("stack_batch: batch must contain at least one trace");
  const std::size_t t = traces.front()->trace.steps;
  const std::size_t n = traces.front()->trace.positions;
  std::string offending;
  for (const auto* item : traces) {
    if (item->trace.steps != t || item->trace.positions != n)
      offending += (offending.empty() ? "" : ", ") + item->trace.meta.example_id;
  }
  if (!offending.empty())
    throw validation_error("stack_batch: shape mismatch for ids: " + offending);
  const std::size_t b = traces.size();
  TraceBatch out;
  out.steps = t;
  out.batch = b;
  out.dim = n;
  out.data = Tensor({t, b, n});
  out.labels.resize(b);
  out.ids.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    const LabeledTrace& item = *traces[i];
    item.validate();
    const double inv = normalize ? 1.0 / item.trace.max_entropy() : 1.0;
    for (std::size_t step = 0; step < t; ++step)
      for (std::size_t d = 0; d < n; ++d) {
        double v = item.trace.entropies.at(step, d) * inv;
        if (normalize) v = std::min(1.0, v);
        out.data.at(step, i, d) = v;
      }
    out.labels[i] = item.label;
    out.ids[i] = item.trace.meta.example_id;
  }
  return out;
}

inline TraceBatch stack_batch(const std::vector<LabeledTrace>& traces, bool normalize) {
  std::vector<const LabeledTrace*> ptrs;
  ptrs.reserve(traces.size());
  for (const auto& t : traces) ptrs.push_back(&t);
  return stack_batch(ptrs, normalize);
}

namespace detail {

inline nlohmann::ordered_json trace_line_json(const LabeledTrace& item, Split split) {
  nlohmann::ordered_json line;
  line["id"] = item.trace.meta.example_id;
  line["label"] = item.label;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < item.trace.steps; ++t) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < item.trace.positions; ++i)
      row.push_back(item.trace.entropies.at(t, i));
    rows.push_back(std::move(row));
  }
  line["entropies"] = std::move(rows);
  if (item.planted_window) {
    line["planted_window"] = *item.planted_window;
  } else {
    line["planted_window"] = nullptr;
  }
  line["meta"] = {{"remask_strategy", item.trace.meta.remask_strategy},
                  {"step_length", item.trace.meta.step_length},
                  {"source", item.trace.meta.source}};
  line["split"] = to_string(split);
  return line;
}

}  // namespace detail

// JSON Lines trace file: line 1 is a header object, each following line is
// one labeled trace. Doubles are written with round-trip precision, so
// read_traces(write_traces(d)) reproduces d bit for bit.
inline void write_traces(const TraceDataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("write_traces: cannot open '" + path.string() + "' for writing");
  nlohmann::ordered_json header;
  header["format"] = kTraceFormat;
  header["T"] = dataset.items.empty() ? 0 : dataset.items.front().trace.steps;
  header["n"] = dataset.items.empty() ? 0 : dataset.items.front().trace.positions;
  header["V"] = dataset.items.empty() ? 0 : dataset.items.front().trace.vocab_size;
  out << header.dump() << "\n";
  for (const auto& item : dataset.items) {
    const Split s = dataset.split.at(item.trace.meta.example_id);
    out << detail::trace_line_json(item, s).dump() << "\n";
  }
  if (!out) throw io_error("write_traces: write failed for '" + path.string() + "'");
}

inline TraceDataset read_traces(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("read_traces: cannot open '" + path.string() + "'");
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw parse_error("read_traces: line " + std::to_string(line_no) + ": " + what);
  };
  if (!std::getline(in, line)) throw parse_error("read_traces: line 1: missing header");
  line_no = 1;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("invalid JSON: ") + e.what());
  }
  if (!header.contains("format") || header["format"] != kTraceFormat)
    fail("unexpected format tag (want \"" + std::string(kTraceFormat) + "\")");
  std::size_t t = 0, n = 0, v = 0;
  try {
    t = header.at("T").get<std::size_t>();
    n = header.at("n").get<std::size_t>();
    v = header.at("V").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("bad header: ") + e.what());
  }

  TraceDataset dataset;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("invalid JSON: ") + e.what());
    }
    LabeledTrace item;
    try {
      item.trace.meta.example_id = rec.at("id").get<std::string>();
      item.label = rec.at("label").get<int>();
      const auto& rows = rec.at("entropies");
      if (!rows.is_array() || rows.size() != t)
        fail("entropies has " + std::to_string(rows.size()) + " rows; header says T=" +
             std::to_string(t));
      item.trace.steps = t;
      item.trace.positions = n;
      item.trace.vocab_size = v;
      item.trace.entropies = Tensor({t, n});
      for (std::size_t r = 0; r < t; ++r) {
        const auto& row = rows[r];
        if (!row.is_array() || row.size() != n)
          fail("entropies row " + std::to_string(r) + " has " + std::to_string(row.size()) +
               " entries; header says n=" + std::to_string(n));
        for (std::size_t c = 0; c < n; ++c) item.trace.entropies.at(r, c) = row[c].get<double>();
      }
      if (rec.contains("planted_window") && !rec["planted_window"].is_null())
        item.planted_window = rec["planted_window"].get<std::vector<std::size_t>>();
      const auto& meta = rec.at("meta");
      item.trace.meta.remask_strategy = meta.at("remask_strategy").get<std::string>();
      item.trace.meta.step_length = meta.at("step_length").get<std::size_t>();
      item.trace.meta.source = meta.at("source").get<std::string>();
      dataset.split[item.trace.meta.example_id] = parse_split(rec.at("split").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("bad record: ") + e.what());
    }
    item.validate();
    dataset.items.push_back(std::move(item));
  }
  dataset.validate();
  return dataset;
}

}  // namespace tracedet
