#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tracedet/rng.hpp"
#include "tracedet/sim.hpp"
#include "tracedet/trace.hpp"

#include "data_util.hpp"

using namespace tracedet;
using Catch::Approx;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("tracedet_test_" + name);
}

LabeledTrace zero_trace() {
  LabeledTrace item;
  item.trace.steps = 2;
  item.trace.positions = 2;
  item.trace.vocab_size = 4;
  item.trace.entropies = Tensor({2, 2});
  item.trace.meta.example_id = "zero";
  return item;
}

}  // namespace

TEST_CASE("empty dataset round-trips through a header-only file") {
  const auto path = temp_file("empty.jsonl");
  TraceDataset empty;
  write_traces(empty, path);
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 1);
  CHECK(read_traces(path) == empty);
}

TEST_CASE("zero matrix trace round-trips bit exactly") {
  const auto path = temp_file("zero.jsonl");
  TraceDataset dataset;
  dataset.items.push_back(zero_trace());
  dataset.split["zero"] = Split::val;
  write_traces(dataset, path);
  const TraceDataset back = read_traces(path);
  REQUIRE(back.items.size() == 1);
  CHECK(back == dataset);
  CHECK(back.items[0].trace.entropies.values() == std::vector<real_t>{0, 0, 0, 0});
}

TEST_CASE("simulator dataset round-trips field by field") {
  SimConfig config;
  config.steps = 16;
  config.positions = 8;
  config.vocab_size = 8;
  std::map<Pattern, std::size_t> mix{{Pattern::faithful, 100},
                                     {Pattern::interleaving, 100},
                                     {Pattern::inconsistent_guesses, 100},
                                     {Pattern::persistent_error, 100}};
  const TraceDataset dataset = synthesize_dataset(config, mix, 41);
  REQUIRE(dataset.items.size() == 400);
  const auto path = temp_file("sim400.jsonl");
  write_traces(dataset, path);
  const TraceDataset back = read_traces(path);
  REQUIRE(back.items.size() == dataset.items.size());
  for (std::size_t i = 0; i < back.items.size(); ++i) {
    CHECK(back.items[i].label == dataset.items[i].label);
    CHECK(back.items[i].planted_window == dataset.items[i].planted_window);
    CHECK(back.items[i].trace.meta == dataset.items[i].trace.meta);
    CHECK(back.items[i].trace.entropies.values() == dataset.items[i].trace.entropies.values());
  }
  CHECK(back.split == dataset.split);
}

TEST_CASE("round-trip property on random datasets") {
  Rng rng(2025);
  const auto path = temp_file("roundtrip.jsonl");
  for (int round = 0; round < 30; ++round) {
    const TraceDataset dataset = testutil::random_dataset(rng);
    write_traces(dataset, path);
    CHECK(read_traces(path) == dataset);
  }
}

TEST_CASE("read rejects out-of-range entropies naming the field") {
  const auto path = temp_file("bad_entropy.jsonl");
  {
    std::ofstream out(path);
    out << R"({"format":"tracedet-v1","T":1,"n":1,"V":4})" << "\n";
    out << R"({"id":"x","label":0,"entropies":[[-0.1]],"planted_window":null,)"
        << R"("meta":{"remask_strategy":"low_confidence","step_length":1,"source":"sim"},)"
        << R"("split":"val"})" << "\n";
  }
  CHECK_THROWS_WITH(read_traces(path), Catch::Matchers::ContainsSubstring("entropies"));
}

TEST_CASE("read rejects a row count that disagrees with the header") {
  const auto path = temp_file("bad_rows.jsonl");
  {
    std::ofstream out(path);
    out << R"({"format":"tracedet-v1","T":2,"n":1,"V":4})" << "\n";
    out << R"({"id":"x","label":0,"entropies":[[0.5]],"planted_window":null,)"
        << R"("meta":{"remask_strategy":"low_confidence","step_length":1,"source":"sim"},)"
        << R"("split":"val"})" << "\n";
  }
  CHECK_THROWS_MATCHES(read_traces(path), parse_error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("line 2")));
}

TEST_CASE("read rejects malformed JSON with the line number") {
  const auto path = temp_file("bad_json.jsonl");
  {
    std::ofstream out(path);
    out << R"({"format":"tracedet-v1","T":1,"n":1,"V":4})" << "\n";
    out << "{not json}\n";
  }
  CHECK_THROWS_MATCHES(read_traces(path), parse_error,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("line 2")));
}

TEST_CASE("normalize_entropy rescales into the unit interval") {
  LabeledTrace item = zero_trace();
  item.trace.vocab_size = 16;
  item.trace.entropies.at(0, 0) = std::log(16.0);
  item.trace.entropies.at(0, 1) = 0.0;
  item.trace.entropies.at(1, 0) = std::log(4.0);
  const ActionTrace normalized = normalize_entropy(item.trace);
  CHECK(normalized.entropies.at(0, 0) == 1.0);
  CHECK(normalized.entropies.at(0, 1) == 0.0);
  CHECK(normalized.entropies.at(1, 0) == Approx(0.5).margin(1e-12));
  CHECK(normalized.vocab_size == 16);
  CHECK(normalized.meta == item.trace.meta);
}

TEST_CASE("normalize_entropy rejects a degenerate vocabulary") {
  LabeledTrace item = zero_trace();
  item.trace.vocab_size = 1;
  CHECK_THROWS_AS(normalize_entropy(item.trace), validation_error);
}

TEST_CASE("stack_batch of one trace equals the trace matrix") {
  LabeledTrace item = zero_trace();
  item.trace.entropies = Tensor({2, 2}, {0.1, 0.2, 0.3, 0.4});
  const TraceBatch batch = stack_batch(std::vector<LabeledTrace>{item}, false);
  CHECK(batch.batch == 1);
  CHECK(batch.data.at(0, 0, 0) == 0.1);
  CHECK(batch.data.at(0, 0, 1) == 0.2);
  CHECK(batch.data.at(1, 0, 0) == 0.3);
  CHECK(batch.data.at(1, 0, 1) == 0.4);
  CHECK(batch.labels == std::vector<int>{0});
  CHECK(batch.ids == std::vector<std::string>{"zero"});
}

TEST_CASE("stack_batch rejects mismatched shapes and names the ids") {
  LabeledTrace a = zero_trace();
  LabeledTrace b = zero_trace();
  b.trace.meta.example_id = "wide";
  b.trace.positions = 3;
  b.trace.entropies = Tensor({2, 3});
  CHECK_THROWS_WITH(stack_batch(std::vector<LabeledTrace>{a, b}, false),
                    Catch::Matchers::ContainsSubstring("wide"));
}

TEST_CASE("stack_batch is a pure reindexing") {
  SimConfig config;
  config.steps = 8;
  config.positions = 6;
  config.vocab_size = 8;
  std::map<Pattern, std::size_t> mix{{Pattern::faithful, 4}, {Pattern::persistent_error, 4}};
  const TraceDataset dataset = synthesize_dataset(config, mix, 7);
  const TraceBatch batch = stack_batch(dataset.items, false);
  REQUIRE(batch.batch == 8);

  // spot check one entry against its source trace
  CHECK(batch.data.at(3, 5, 2) == dataset.items[5].trace.entropies.at(3, 2));

  long double batch_sum = 0.0L, trace_sum = 0.0L;
  for (double v : batch.data.values()) batch_sum += v;
  for (const auto& item : dataset.items)
    for (double v : item.trace.entropies.values()) trace_sum += v;
  CHECK(std::abs(static_cast<double>(batch_sum - trace_sum)) < 1e-12);
}

TEST_CASE("normalized batches stay in the unit interval") {
  Rng rng(555);
  for (int round = 0; round < 10; ++round) {
    const TraceDataset dataset = testutil::random_dataset(rng);
    std::vector<LabeledTrace> items = dataset.items;
    const TraceBatch batch = stack_batch(items, true);
    for (double v : batch.data.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("dataset validation catches shape drift and split gaps") {
  TraceDataset dataset;
  dataset.items.push_back(zero_trace());
  SECTION("missing split entry") {
    CHECK_THROWS_AS(dataset.validate(), validation_error);
  }
  SECTION("mixed shapes") {
    dataset.split["zero"] = Split::val;
    LabeledTrace other = zero_trace();
    other.trace.meta.example_id = "tall";
    other.trace.steps = 3;
    other.trace.entropies = Tensor({3, 2});
    dataset.items.push_back(other);
    dataset.split["tall"] = Split::val;
    CHECK_THROWS_AS(dataset.validate(), validation_error);
  }
}
