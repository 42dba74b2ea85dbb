#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "tracedet/errors.hpp"
#include "tracedet/evaluation.hpp"
#include "tracedet/losses.hpp"
#include "tracedet/net.hpp"
#include "tracedet/rng.hpp"
#include "tracedet/trace.hpp"

namespace tracedet {

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  std::uint64_t seed = 0;
  LossConfig loss;
  ModelConfig model;
  bool normalize_inputs = true;
  // Constraint warm-up: the regularizer weight ramps from 0 to beta and the
  // selection prior anneals from tau_start down to tau over the first
  // warmup_frac of the epochs. Starting with the gate open lets the
  // classifier latch onto informative steps before the prior prunes the
  // rest; without it the KL term collapses every gate below threshold.
  double warmup_frac = 0.3;
  double tau_start = 0.9;

  void validate() const {
    if (!(lr > 0.0)) throw validation_error("TrainConfig: lr must be positive");
    if (batch_size < 1) throw validation_error("TrainConfig: batch_size must be >= 1");
    if (epochs < 1) throw validation_error("TrainConfig: epochs must be >= 1");
    if (warmup_frac < 0.0 || warmup_frac > 1.0)
      throw validation_error("TrainConfig: warmup_frac must lie in [0,1]");
    if (!(tau_start > 0.0 && tau_start < 1.0))
      throw validation_error("TrainConfig: tau_start must lie in (0,1)");
    loss.validate();
    model.validate();
  }

  // Effective schedule at one epoch; identical to (beta, tau) once the
  // warm-up window has passed.
  std::pair<double, double> schedule_at(std::size_t epoch) const {
    const double warm_epochs = warmup_frac * static_cast<double>(epochs);
    double frac = 1.0;
    if (warm_epochs > 0.0 && static_cast<double>(epoch) < warm_epochs)
      frac = static_cast<double>(epoch) / warm_epochs;
    const double beta_e = loss.beta * frac;
    const double tau_e = tau_start + (loss.tau - tau_start) * frac;
    return {beta_e, tau_e};
  }
};

struct EpochStats {
  double cls = 0.0;
  double ext = 0.0;
  double total = 0.0;
  double val_auroc = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  ModelParams params;  // snapshot at the best validation-AUROC epoch
  TrainHistory history;
};

namespace detail {

// Adam with bias correction; constants fixed so runs are reproducible.
struct AdamState {
  std::vector<real_t> m, v;
  std::size_t step = 0;
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit AdamState(std::size_t size) : m(size, 0.0), v(size, 0.0) {}

  void update(std::vector<real_t>& theta, const std::vector<real_t>& grad, double lr) {
    ++step;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grad[i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
      theta[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kEps);
    }
  }
};

inline void clip_global_norm(std::vector<real_t>& grad, double max_norm) {
  double sq = 0.0;
  for (real_t g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (real_t& g : grad) g *= scale;
  }
}

}  // namespace detail

// Mini-batch training on the train split (or the val split when no train
// items exist, mirroring the 200/200 protocol), selecting the parameters of
// the epoch with the highest validation AUROC. Deterministic given the seed.
inline TrainResult train(const TraceDataset& dataset, const TrainConfig& cfg) {
  cfg.validate();
  dataset.validate();

  std::vector<const LabeledTrace*> train_items = dataset.subset(Split::train);
  const std::vector<const LabeledTrace*> val_items = dataset.subset(Split::val);
  if (train_items.empty()) train_items = val_items;
  if (train_items.empty()) throw validation_error("train: empty training split");
  if (val_items.empty()) throw validation_error("train: empty validation split");
  {
    bool has_pos = false, has_neg = false;
    for (const auto* item : val_items) (item->label == 1 ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg)
      throw undefined_metric_error("train: validation split needs both classes");
  }

  const auto t_start = std::chrono::steady_clock::now();
  const std::size_t input_dim = train_items.front()->trace.positions;

  Rng init_rng = Rng::stream(cfg.seed, "init");
  Rng shuffle_rng = Rng::stream(cfg.seed, "shuffle");
  Rng gumbel_rng = Rng::stream(cfg.seed, "gumbel");
  Rng dropout_rng = Rng::stream(cfg.seed, "dropout");

  ModelParams params = init_params(cfg.model, input_dim, init_rng);
  params.mask_b[0] = 2.0;  // open gate at initialization
  std::vector<real_t> theta = pack_params(params);
  detail::AdamState adam(theta.size());

  const TraceBatch val_batch = stack_batch(val_items, cfg.normalize_inputs);
  ModelConfig eval_config = cfg.model;
  if (eval_config.mask_mode != MaskMode::forced_on)
    eval_config.mask_mode = MaskMode::deterministic;

  TrainResult result;
  result.history.epochs.reserve(cfg.epochs);
  double best_auroc = -1.0;

  std::vector<std::size_t> order(train_items.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto [beta_e, tau_e] = cfg.schedule_at(epoch);
    shuffle_rng.shuffle(order);
    double cls_sum = 0.0, ext_sum = 0.0, total_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<const LabeledTrace*> chunk;
      chunk.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) chunk.push_back(train_items[order[i]]);
      const TraceBatch batch = stack_batch(chunk, cfg.normalize_inputs);

      Tape tape;
      const ParamVarSet pv = leaf_params(tape, params);
      const ForwardVars fw =
          forward_on_tape(tape, batch, pv, cfg.model, true, gumbel_rng, dropout_rng);
      const Var cls = cls_loss_node(tape, fw.y_hat, batch.labels);
      const Var ext = ext_loss_node(tape, fw.m_hat, tau_e);
      const Var total = total_loss_node(tape, cls, ext, beta_e);

      const double cls_v = tape.value(cls).item();
      const double ext_v = tape.value(ext).item();
      const double total_v = tape.value(total).item();
      if (!std::isfinite(total_v))
        throw numerical_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(start / cfg.batch_size) +
                              " (cls=" + std::to_string(cls_v) + ", ext=" +
                              std::to_string(ext_v) + ")");

      tape.backward(total);
      std::vector<real_t> grad = collect_grads(tape, pv);
      detail::clip_global_norm(grad, 5.0);
      adam.update(theta, grad, cfg.lr);
      unpack_params(params, theta);

      const double weight = static_cast<double>(stop - start);
      cls_sum += cls_v * weight;
      ext_sum += ext_v * weight;
      total_sum += total_v * weight;
      seen += stop - start;
    }

    const ForwardResult val_fw = forward_eval(val_batch, params, eval_config);
    const RocResult roc = auroc(val_fw.y_hat, val_batch.labels);

    EpochStats stats;
    stats.cls = cls_sum / static_cast<double>(seen);
    stats.ext = ext_sum / static_cast<double>(seen);
    stats.total = total_sum / static_cast<double>(seen);
    stats.val_auroc = roc.auroc;
    result.history.epochs.push_back(stats);

    if (roc.auroc > best_auroc) {
      best_auroc = roc.auroc;
      result.history.best_epoch = epoch;
      result.params = params;
    }
  }

  result.history.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

// ---- hyperparameter grid ---------------------------------------------------

struct GridSpec {
  std::vector<double> lr;
  std::vector<std::size_t> batch_size;
  std::vector<double> dropout;
  std::vector<std::size_t> n_layers;
  std::vector<double> beta;
  std::vector<double> tau;
  TrainConfig base;

  // lr log-spaced over [1e-5, 1e-3] (8), batch {8, 64}, dropout linear over
  // [0, 0.4] (5), layers {2, 3, 4}, beta linear over [0, 2] (6), tau linear
  // over [0.1, 0.4] (4): 5760 combinations.
  static GridSpec search_default() {
    GridSpec g;
    for (int i = 0; i < 8; ++i) g.lr.push_back(std::pow(10.0, -5.0 + 2.0 * i / 7.0));
    g.batch_size = {8, 64};
    for (int i = 0; i < 5; ++i) g.dropout.push_back(0.1 * i);
    g.n_layers = {2, 3, 4};
    for (int i = 0; i < 6; ++i) g.beta.push_back(0.4 * i);
    for (int i = 0; i < 4; ++i) g.tau.push_back(0.1 * (i + 1));
    return g;
  }

  std::size_t total() const {
    return lr.size() * batch_size.size() * dropout.size() * n_layers.size() * beta.size() *
           tau.size();
  }

  void validate() const {
    if (lr.empty() || batch_size.empty() || dropout.empty() || n_layers.empty() ||
        beta.empty() || tau.empty())
      throw validation_error("GridSpec: every axis needs at least one value");
  }

  // Mixed-radix decode in axis order lr, batch, dropout, layers, beta, tau.
  TrainConfig config_at(std::size_t index) const {
    TrainConfig cfg = base;
    const std::size_t i_tau = index % tau.size();
    index /= tau.size();
    const std::size_t i_beta = index % beta.size();
    index /= beta.size();
    const std::size_t i_layers = index % n_layers.size();
    index /= n_layers.size();
    const std::size_t i_drop = index % dropout.size();
    index /= dropout.size();
    const std::size_t i_batch = index % batch_size.size();
    index /= batch_size.size();
    const std::size_t i_lr = index;
    cfg.lr = lr[i_lr];
    cfg.batch_size = batch_size[i_batch];
    cfg.model.dropout_rate = dropout[i_drop];
    cfg.model.n_layers = n_layers[i_layers];
    cfg.loss.beta = beta[i_beta];
    cfg.loss.tau = tau[i_tau];
    return cfg;
  }
};

struct LeaderboardEntry {
  std::size_t config_index = 0;
  double val_auroc = 0.0;
  double best_total_loss = 0.0;
  TrainConfig config;
};

struct GridResult {
  TrainConfig best;
  std::vector<LeaderboardEntry> leaderboard;
  std::size_t grid_total = 0;
};

// Trains every sampled configuration and ranks by validation AUROC; ties
// break on lower loss, then lower config index. With budget below the grid
// size, a seeded uniform subsample of configurations runs instead.
inline GridResult grid_search(const TraceDataset& dataset, const GridSpec& grid,
                              std::size_t budget, std::uint64_t seed, std::size_t jobs = 1) {
  grid.validate();
  if (budget < 1) throw validation_error("grid_search: budget must be >= 1");
  const std::size_t total = grid.total();

  std::vector<std::size_t> chosen;
  if (budget >= total) {
    chosen.resize(total);
    std::iota(chosen.begin(), chosen.end(), 0);
  } else {
    Rng rng = Rng::stream(seed, "grid");
    std::vector<std::size_t> pool(total);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < budget; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(total - i));
      std::swap(pool[i], pool[j]);
    }
    chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(budget));
    std::sort(chosen.begin(), chosen.end());
  }

  std::vector<LeaderboardEntry> entries(chosen.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t slot = next.fetch_add(1);
      if (slot >= chosen.size()) return;
      TrainConfig cfg = grid.config_at(chosen[slot]);
      cfg.seed = seed;
      const TrainResult run = train(dataset, cfg);
      LeaderboardEntry entry;
      entry.config_index = chosen[slot];
      entry.val_auroc = run.history.epochs[run.history.best_epoch].val_auroc;
      entry.best_total_loss = run.history.epochs[run.history.best_epoch].total;
      entry.config = cfg;
      entries[slot] = std::move(entry);
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < std::min(jobs, chosen.size()); ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.val_auroc != b.val_auroc) return a.val_auroc > b.val_auroc;
    if (a.best_total_loss != b.best_total_loss) return a.best_total_loss < b.best_total_loss;
    return a.config_index < b.config_index;
  });

  GridResult result;
  result.leaderboard = std::move(entries);
  result.best = result.leaderboard.front().config;
  result.grid_total = total;
  return result;
}

}  // namespace tracedet
