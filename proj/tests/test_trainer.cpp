#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "tracedet/sim.hpp"
#include "tracedet/trainer.hpp"

using namespace tracedet;
using Catch::Approx;

namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.n_layers = 2;
  cfg.d_pe = 8;
  cfg.d_ff = 16;
  return cfg;
}

TraceDataset separable_dataset(std::uint64_t seed) {
  SimConfig config;
  config.steps = 16;
  config.positions = 8;
  config.vocab_size = 8;
  config.intensity = 1.0;
  std::map<Pattern, std::size_t> mix{{Pattern::faithful, 24},
                                     {Pattern::inconsistent_guesses, 24}};
  return synthesize_dataset(config, mix, seed);
}

TrainConfig quick_config(std::size_t epochs, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.model = tiny_model();
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.lr = 3e-3;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("train rejects zero epochs") {
  TrainConfig cfg = quick_config(1, 0);
  cfg.epochs = 0;
  CHECK_THROWS_AS(train(separable_dataset(1), cfg), validation_error);
}

TEST_CASE("train rejects an empty validation split") {
  TraceDataset dataset = separable_dataset(1);
  for (auto& [id, s] : dataset.split) s = Split::test;
  CHECK_THROWS_AS(train(dataset, quick_config(1, 0)), validation_error);
}

TEST_CASE("separable toy traces reach perfect validation AUROC") {
  const TraceDataset dataset = separable_dataset(5);
  const TrainResult result = train(dataset, quick_config(50, 3));
  const double best = result.history.epochs[result.history.best_epoch].val_auroc;
  CHECK(best == 1.0);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const TraceDataset dataset = separable_dataset(9);
  const TrainConfig cfg = quick_config(8, 21);
  const TrainResult a = train(dataset, cfg);
  const TrainResult b = train(dataset, cfg);
  REQUIRE(a.history.epochs.size() == b.history.epochs.size());
  for (std::size_t e = 0; e < a.history.epochs.size(); ++e) {
    CHECK(std::abs(a.history.epochs[e].total - b.history.epochs[e].total) <= 1e-12);
    CHECK(a.history.epochs[e].val_auroc == b.history.epochs[e].val_auroc);
  }
  CHECK(a.history.best_epoch == b.history.best_epoch);
  CHECK(pack_params(a.params) == pack_params(b.params));
}

TEST_CASE("loss decreases on the separable sanity dataset") {
  const TraceDataset dataset = separable_dataset(13);
  const TrainResult result = train(dataset, quick_config(30, 5));
  const auto& hist = result.history.epochs;
  CHECK(hist[result.history.best_epoch].total < hist[0].total);
}

TEST_CASE("returned parameters correspond to the best epoch, not the last") {
  const TraceDataset dataset = separable_dataset(17);
  const TrainResult result = train(dataset, quick_config(25, 7));
  double best = -1.0;
  std::size_t best_epoch = 0;
  for (std::size_t e = 0; e < result.history.epochs.size(); ++e) {
    if (result.history.epochs[e].val_auroc > best) {
      best = result.history.epochs[e].val_auroc;
      best_epoch = e;
    }
  }
  CHECK(result.history.best_epoch == best_epoch);
  // re-evaluating the snapshot reproduces the recorded best validation AUROC
  const EvalResult eval =
      evaluate_model(result.params, tiny_model(), dataset, Split::val, MaskMode::deterministic);
  CHECK(eval.roc.auroc == Approx(best).margin(1e-12));
}

TEST_CASE("history length matches the epoch count and wall clock is recorded") {
  const TraceDataset dataset = separable_dataset(19);
  const TrainResult result = train(dataset, quick_config(6, 11));
  CHECK(result.history.epochs.size() == 6);
  CHECK(result.history.wall_seconds > 0.0);
}

TEST_CASE("an explicit train split is used when present") {
  SimConfig config;
  config.steps = 12;
  config.positions = 6;
  config.vocab_size = 8;
  std::map<Pattern, std::size_t> mix{{Pattern::faithful, 16}, {Pattern::interleaving, 16}};
  const TraceDataset dataset = synthesize_dataset(config, mix, 23, 0.5);
  std::size_t n_train = 0;
  for (const auto& [id, s] : dataset.split)
    if (s == Split::train) ++n_train;
  REQUIRE(n_train == 16);
  const TrainResult result = train(dataset, quick_config(4, 13));
  CHECK(result.history.epochs.size() == 4);
}

TEST_CASE("exploding learning rate aborts with a numerical diagnostic") {
  const TraceDataset dataset = separable_dataset(29);
  TrainConfig cfg = quick_config(6, 15);
  cfg.lr = 1e305;
  CHECK_THROWS_AS(train(dataset, cfg), numerical_error);
}

TEST_CASE("grid search bookkeeping") {
  const TraceDataset dataset = separable_dataset(31);
  GridSpec grid;
  grid.lr = {1e-3, 3e-3};
  grid.batch_size = {16};
  grid.dropout = {0.0, 0.1};
  grid.n_layers = {2};
  grid.beta = {1.0};
  grid.tau = {0.25, 0.3};
  grid.base = quick_config(3, 17);

  SECTION("budget one runs exactly one configuration") {
    const GridResult result = grid_search(dataset, grid, 1, 90);
    CHECK(result.leaderboard.size() == 1);
    CHECK(result.grid_total == 8);
  }
  SECTION("full product runs everything and sorts by validation AUROC") {
    const GridResult result = grid_search(dataset, grid, 100, 90);
    REQUIRE(result.leaderboard.size() == 8);
    for (std::size_t i = 1; i < result.leaderboard.size(); ++i)
      CHECK(result.leaderboard[i - 1].val_auroc >= result.leaderboard[i].val_auroc);
    CHECK(result.best.lr == result.leaderboard.front().config.lr);
  }
  SECTION("same seed and budget reproduce the leaderboard") {
    const GridResult a = grid_search(dataset, grid, 3, 91);
    const GridResult b = grid_search(dataset, grid, 3, 91);
    REQUIRE(a.leaderboard.size() == b.leaderboard.size());
    for (std::size_t i = 0; i < a.leaderboard.size(); ++i) {
      CHECK(a.leaderboard[i].config_index == b.leaderboard[i].config_index);
      CHECK(a.leaderboard[i].val_auroc == b.leaderboard[i].val_auroc);
    }
  }
  SECTION("parallel jobs produce the same leaderboard as serial") {
    const GridResult serial = grid_search(dataset, grid, 4, 92, 1);
    const GridResult parallel = grid_search(dataset, grid, 4, 92, 2);
    REQUIRE(serial.leaderboard.size() == parallel.leaderboard.size());
    for (std::size_t i = 0; i < serial.leaderboard.size(); ++i) {
      CHECK(serial.leaderboard[i].config_index == parallel.leaderboard[i].config_index);
      CHECK(serial.leaderboard[i].val_auroc == parallel.leaderboard[i].val_auroc);
    }
  }
  SECTION("zero budget is rejected") {
    CHECK_THROWS_AS(grid_search(dataset, grid, 0, 90), validation_error);
  }
}

TEST_CASE("the stock search grid enumerates the full hyperparameter product") {
  const GridSpec grid = GridSpec::search_default();
  CHECK(grid.total() == 5760);
  CHECK(grid.lr.front() == Approx(1e-5));
  CHECK(grid.lr.back() == Approx(1e-3));
  REQUIRE(grid.dropout.size() == 5);
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(grid.dropout[i] == Approx(0.1 * static_cast<double>(i)).margin(1e-12));
  CHECK(grid.beta.front() == 0.0);
  CHECK(grid.beta.back() == Approx(2.0));
  CHECK(grid.tau.front() == Approx(0.1));
  CHECK(grid.tau.back() == Approx(0.4));

  // every decoded configuration stays inside the documented ranges
  for (std::size_t idx : {std::size_t{0}, std::size_t{2879}, std::size_t{5759}}) {
    const TrainConfig cfg = grid.config_at(idx);
    CHECK(cfg.lr >= 1e-5);
    CHECK(cfg.lr <= 1e-3 + 1e-12);
    CHECK((cfg.batch_size == 8 || cfg.batch_size == 64));
    CHECK(cfg.model.n_layers >= 2);
    CHECK(cfg.model.n_layers <= 4);
    CHECK(cfg.loss.beta >= 0.0);
    CHECK(cfg.loss.beta <= 2.0 + 1e-12);
    CHECK(cfg.loss.tau >= 0.1);
    CHECK(cfg.loss.tau <= 0.4 + 1e-12);
  }
}
