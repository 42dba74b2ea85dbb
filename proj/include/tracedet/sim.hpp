#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tracedet/errors.hpp"
#include "tracedet/rng.hpp"
#include "tracedet/trace.hpp"

namespace tracedet {

enum class RemaskPolicy { low_confidence, entropy, random, topk_margin };

inline std::string to_string(RemaskPolicy p) {
  switch (p) {
    case RemaskPolicy::low_confidence: return "low_confidence";
    case RemaskPolicy::entropy: return "entropy";
    case RemaskPolicy::random: return "random";
    case RemaskPolicy::topk_margin: return "topk_margin";
  }
  throw validation_error("unknown remask policy");
}

inline RemaskPolicy parse_remask_policy(const std::string& s) {
  if (s == "low_confidence") return RemaskPolicy::low_confidence;
  if (s == "entropy") return RemaskPolicy::entropy;
  if (s == "random") return RemaskPolicy::random;
  if (s == "topk_margin") return RemaskPolicy::topk_margin;
  throw validation_error("unknown remask policy '" + s + "'");
}

enum class Pattern { faithful, interleaving, inconsistent_guesses, persistent_error };

inline std::string to_string(Pattern p) {
  switch (p) {
    case Pattern::faithful: return "faithful";
    case Pattern::interleaving: return "interleaving";
    case Pattern::inconsistent_guesses: return "inconsistent_guesses";
    case Pattern::persistent_error: return "persistent_error";
  }
  throw validation_error("unknown pattern");
}

inline Pattern parse_pattern(const std::string& s) {
  if (s == "faithful") return Pattern::faithful;
  if (s == "interleaving") return Pattern::interleaving;
  if (s == "inconsistent_guesses") return Pattern::inconsistent_guesses;
  if (s == "persistent_error") return Pattern::persistent_error;
  throw validation_error("unknown pattern '" + s + "'");
}

struct SimConfig {
  std::size_t steps = 64;      // T
  std::size_t positions = 32;  // n
  std::size_t vocab_size = 16; // V
  std::size_t step_length = 0; // tokens decoded per step; 0 derives n/T
  std::uint64_t seed = 0;
  RemaskPolicy remask = RemaskPolicy::low_confidence;
  // After a position decodes, its row entries repeat the decode-step entropy;
  // switching this off records zeros instead.
  bool frozen_decoded_entropy = true;
  double intensity = 0.7;    // scenario signal strength for synthesized data
  double window_frac = 0.2;  // fraction of steps covered by planted windows
  double span_frac = 0.25;   // fraction of positions carrying the answer

  void validate() const {
    if (steps < 1) throw validation_error("SimConfig: steps must be >= 1");
    if (positions < 1) throw validation_error("SimConfig: positions must be >= 1");
    if (vocab_size < 2) throw validation_error("SimConfig: vocab_size must be >= 2");
    if (step_length > 0 && step_length * steps < positions)
      throw validation_error("SimConfig: step_length * steps must cover all positions");
    if (!(intensity > 0.0 && intensity <= 1.0))
      throw validation_error("SimConfig: intensity must lie in (0,1]");
    if (!(window_frac > 0.0 && window_frac <= 1.0))
      throw validation_error("SimConfig: window_frac must lie in (0,1]");
    if (!(span_frac > 0.0 && span_frac <= 1.0))
      throw validation_error("SimConfig: span_frac must lie in (0,1]");
  }
};

struct ScenarioSpec {
  Pattern pattern = Pattern::faithful;
  std::vector<std::size_t> window;       // sorted step indices
  std::vector<std::size_t> answer_span;  // sorted token positions
  double intensity = 0.7;

  void validate(const SimConfig& config) const {
    if (!(intensity > 0.0 && intensity <= 1.0))
      throw validation_error("ScenarioSpec: intensity must lie in (0,1]");
    auto check_sorted = [](const std::vector<std::size_t>& v, std::size_t bound,
                           const char* what) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] >= bound)
          throw validation_error(std::string("ScenarioSpec: ") + what + " index out of range");
        if (i > 0 && v[i] <= v[i - 1])
          throw validation_error(std::string("ScenarioSpec: ") + what +
                                 " must be sorted and unique");
      }
    };
    check_sorted(window, config.steps, "window");
    check_sorted(answer_span, config.positions, "answer_span");
    if (answer_span.empty()) throw validation_error("ScenarioSpec: answer_span must be non-empty");
    const bool windowed =
        pattern == Pattern::interleaving || pattern == Pattern::inconsistent_guesses;
    if (windowed && window.empty())
      throw validation_error("ScenarioSpec: " + to_string(pattern) + " requires a window");
  }
};

// Internal denoising state, exposed so tests can watch invariants evolve.
struct SimSequenceState {
  std::size_t step = 0;
  std::vector<int> tokens;                 // -1 marks a masked position
  std::vector<std::vector<double>> dists;  // n rows over the vocabulary

  void validate() const {
    for (const auto& row : dists) {
      double sum = 0.0;
      for (double p : row) {
        if (p < 0.0) throw validation_error("SimSequenceState: negative probability");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-9)
        throw validation_error("SimSequenceState: distribution row does not sum to 1");
    }
  }
};

// Shannon entropy in nats of one categorical distribution.
inline double step_entropy(std::span<const double> dist) {
  if (dist.empty()) throw validation_error("step_entropy: empty distribution");
  double sum = 0.0;
  for (double p : dist) {
    if (p < 0.0) throw validation_error("step_entropy: negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw validation_error("step_entropy: distribution sums to " + std::to_string(sum));
  double h = 0.0;
  for (double p : dist)
    if (p > 0.0) h -= p * std::log(p);
  return std::clamp(h, 0.0, std::log(static_cast<double>(dist.size())));
}

// Picks `keep` indices to decode this step. low_confidence and entropy both
// take the largest confidences (entropy passes negated entropies through the
// confidence slot); topk_margin takes the largest margins; random draws a
// uniform subset. Ties resolve to the lowest index. Result is sorted.
inline std::vector<std::size_t> remask_select(std::span<const double> confidences,
                                              std::span<const double> margins, std::size_t keep,
                                              RemaskPolicy policy, Rng& rng) {
  const std::size_t k = confidences.size();
  if (margins.size() != k)
    throw validation_error("remask_select: confidences/margins length mismatch");
  if (keep > k)
    throw validation_error("remask_select: keep=" + std::to_string(keep) + " exceeds k=" +
                           std::to_string(k));
  std::vector<std::size_t> picked;
  if (keep == 0) return picked;
  if (policy == RemaskPolicy::random) {
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < keep; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(k - i));
      std::swap(idx[i], idx[j]);
    }
    picked.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep));
  } else {
    const std::span<const double> key =
        policy == RemaskPolicy::topk_margin ? margins : confidences;
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (key[a] != key[b]) return key[a] > key[b];
      return a < b;
    });
    picked.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

namespace detail {

// (1-alpha) * uniform + alpha * onehot(top)
inline void mixture_dist(std::vector<double>& row, std::size_t vocab, std::size_t top,
                         double alpha) {
  const double base = (1.0 - alpha) / static_cast<double>(vocab);
  row.assign(vocab, base);
  row[top] += alpha;
}

// Per-step decode counts; the remainder of n/T lands on the early steps.
inline std::vector<std::size_t> retain_schedule(const SimConfig& c) {
  std::vector<std::size_t> s(c.steps, 0);
  if (c.step_length > 0) {
    std::size_t remaining = c.positions;
    for (auto& v : s) {
      v = std::min(c.step_length, remaining);
      remaining -= v;
    }
  } else {
    const std::size_t base = c.positions / c.steps;
    const std::size_t rem = c.positions % c.steps;
    for (std::size_t t = 0; t < c.steps; ++t) s[t] = base + (t < rem ? 1 : 0);
  }
  return s;
}

}  // namespace detail

using StepObserver = std::function<void(const SimSequenceState&)>;

// Runs the toy masked-diffusion process for one example and returns its
// entropy trace. Per-position categorical distributions evolve as mixtures
// between uniform and a one-hot target; the scenario pattern shapes how the
// answer-span positions sharpen, oscillate, or plateau. Entropy rows are
// recorded before each step's remasking.
inline LabeledTrace simulate_trace(const SimConfig& config, const ScenarioSpec& scenario,
                                   Rng& rng, const StepObserver& observer = {}) {
  config.validate();
  scenario.validate(config);
  const std::size_t t_steps = config.steps;
  const std::size_t n = config.positions;
  const std::size_t v = config.vocab_size;
  const double ci = scenario.intensity;
  const Pattern pattern = scenario.pattern;
  const bool windowed =
      pattern == Pattern::interleaving || pattern == Pattern::inconsistent_guesses;

  const std::vector<std::size_t> schedule = detail::retain_schedule(config);
  std::size_t horizon = 1;
  for (std::size_t t = 0; t < t_steps; ++t)
    if (schedule[t] > 0) horizon = t + 1;

  std::vector<char> in_span(n, 0);
  for (std::size_t i : scenario.answer_span) in_span[i] = 1;
  std::vector<char> in_window(t_steps, 0);
  for (std::size_t t : scenario.window) in_window[t] = 1;
  const std::size_t window_end =
      scenario.window.empty() ? 0 : scenario.window.back() + 1;

  // Global decay-rate nuisance shared by all positions; overlaps across
  // classes so a plain mean-entropy score cannot separate them cleanly.
  const double rate = rng.uniform(0.6, 1.6);
  const double g = 2.2 / static_cast<double>(horizon);

  std::vector<double> alpha(n), phase(n), settle(n, 0.0);
  std::vector<std::size_t> top(n);
  std::vector<char> easy(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    top[i] = static_cast<std::size_t>(rng.below(v));
    phase[i] = rng.uniform(0.6, 1.4);
    if (!in_span[i] && rng.uniform01() < 0.25) {
      // A share of background tokens is easy and decodes almost immediately.
      easy[i] = 1;
      alpha[i] = rng.uniform(0.45, 0.85);
      phase[i] *= 1.5;
    } else {
      alpha[i] = rng.uniform(0.0, 0.08);
    }
  }
  double pe_cap = 1.0;
  double ig_level = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!in_span[i]) continue;
    easy[i] = 0;
    switch (pattern) {
      case Pattern::faithful:
        phase[i] *= 1.25;
        break;
      case Pattern::persistent_error:
        alpha[i] = std::clamp(0.25 + 0.15 * ci + rng.uniform(-0.04, 0.04), 0.05, 0.9);
        phase[i] *= 3.0;
        pe_cap = 1.0 - 0.3 * ci;
        break;
      case Pattern::interleaving:
        settle[i] = std::clamp(0.62 + 0.25 * ci + rng.uniform(-0.04, 0.04), 0.05, 0.97);
        alpha[i] = settle[i];
        break;
      case Pattern::inconsistent_guesses:
        phase[i] *= 0.7;
        ig_level = std::clamp(0.04 + 0.12 * (1.0 - ci), 0.005, 0.35);
        break;
    }
  }

  SimSequenceState state;
  state.tokens.assign(n, -1);
  state.dists.assign(n, std::vector<double>(v, 0.0));
  std::vector<char> decoded(n, 0);
  std::vector<double> frozen(n, 0.0);
  Tensor entropies({t_steps, n});
  std::size_t carry = 0;
  std::size_t window_rank = 0;

  for (std::size_t t = 0; t < t_steps; ++t) {
    state.step = t;
    const bool window_step = in_window[t];
    for (std::size_t i = 0; i < n; ++i) {
      if (decoded[i]) continue;
      if (in_span[i] && pattern == Pattern::persistent_error) {
        if (t > 0)
          alpha[i] = std::min(pe_cap, alpha[i] + rate * phase[i] * g * rng.uniform(0.5, 1.5));
        else
          alpha[i] = std::min(pe_cap, alpha[i]);
      } else if (in_span[i] && pattern == Pattern::interleaving) {
        if (window_step) {
          // Two low-confidence steps for every recommit step.
          if (window_rank % 3 != 2)
            alpha[i] = std::clamp(settle[i] * (1.0 - ci) * rng.uniform(0.9, 1.1), 0.005,
                                  settle[i]);
          else
            alpha[i] = settle[i];
        } else if (t >= window_end) {
          alpha[i] = std::min(1.0, alpha[i] + rate * phase[i] * 2.0 * g * rng.uniform(0.5, 1.5));
        } else {
          alpha[i] = settle[i];
        }
      } else if (in_span[i] && pattern == Pattern::inconsistent_guesses) {
        if (window_step) {
          alpha[i] = std::clamp(ig_level * rng.uniform(0.9, 1.1), 0.003, 0.4);
          top[i] = static_cast<std::size_t>(rng.below(v));  // shifting argmax
        } else if (t >= window_end) {
          alpha[i] = std::min(1.0, alpha[i] + rate * phase[i] * 2.2 * g * rng.uniform(0.5, 1.5));
        } else if (t > 0) {
          alpha[i] = std::min(1.0, alpha[i] + rate * phase[i] * g * rng.uniform(0.5, 1.5));
        }
      } else if (t > 0) {
        alpha[i] = std::min(1.0, alpha[i] + rate * phase[i] * g * rng.uniform(0.5, 1.5));
      }
      detail::mixture_dist(state.dists[i], v, top[i], alpha[i]);
    }
    if (window_step) ++window_rank;

    for (std::size_t i = 0; i < n; ++i) {
      if (decoded[i])
        entropies.at(t, i) = config.frozen_decoded_entropy ? frozen[i] : 0.0;
      else
        entropies.at(t, i) = step_entropy(state.dists[i]);
    }
    if (observer) observer(state);

    // Decode this step's quota among eligible positions. Span positions of
    // windowed patterns stay open until the window has played out.
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < n; ++i) {
      if (decoded[i]) continue;
      const bool withheld = windowed && in_span[i] && t < window_end;
      if (!withheld || t + 1 == t_steps) candidates.push_back(i);
    }
    const std::size_t target = schedule[t] + carry;
    const std::size_t keep = std::min(target, candidates.size());
    carry = target - keep;
    if (keep > 0) {
      std::vector<double> conf(candidates.size()), margin(candidates.size());
      for (std::size_t c = 0; c < candidates.size(); ++c) {
        const auto& row = state.dists[candidates[c]];
        double top1 = 0.0, top2 = 0.0;
        for (double p : row) {
          if (p > top1) {
            top2 = top1;
            top1 = p;
          } else if (p > top2) {
            top2 = p;
          }
        }
        conf[c] = top1;
        margin[c] = top1 - top2;
      }
      const std::vector<std::size_t> sel =
          remask_select(conf, margin, keep, config.remask, rng);
      for (std::size_t s : sel) {
        const std::size_t pos = candidates[s];
        decoded[pos] = 1;
        frozen[pos] = entropies.at(t, pos);
        state.tokens[pos] = static_cast<int>(top[pos]);
      }
    }
  }

  LabeledTrace out;
  out.trace.steps = t_steps;
  out.trace.positions = n;
  out.trace.vocab_size = v;
  out.trace.entropies = std::move(entropies);
  out.trace.meta.remask_strategy = to_string(config.remask);
  out.trace.meta.step_length =
      config.step_length > 0 ? config.step_length
                             : std::max<std::size_t>(1, (n + t_steps - 1) / t_steps);
  out.trace.meta.source = "sim";
  out.label = pattern == Pattern::faithful ? 0 : 1;
  if (windowed) out.planted_window = scenario.window;
  return out;
}

// Samples a contiguous window/span scenario for one synthesized example.
inline ScenarioSpec sample_scenario(const SimConfig& config, Pattern pattern, Rng& rng) {
  ScenarioSpec scenario;
  scenario.pattern = pattern;
  scenario.intensity = config.intensity;
  const std::size_t t_steps = config.steps;
  const std::size_t n = config.positions;
  const std::size_t span_len =
      std::min(n, std::max<std::size_t>(1, static_cast<std::size_t>(
                                               std::llround(config.span_frac * n))));
  const std::size_t span_off = static_cast<std::size_t>(rng.below(n - span_len + 1));
  for (std::size_t i = 0; i < span_len; ++i) scenario.answer_span.push_back(span_off + i);
  if (pattern == Pattern::interleaving || pattern == Pattern::inconsistent_guesses) {
    const std::size_t w_len =
        std::min(t_steps, std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                                       config.window_frac * t_steps))));
    const std::size_t max_off = t_steps - w_len;
    const std::size_t lo = std::min<std::size_t>(1, max_off);
    const std::size_t hi = max_off > lo ? max_off - 1 : lo;
    const std::size_t off = lo + (hi > lo ? static_cast<std::size_t>(rng.below(hi - lo + 1)) : 0);
    for (std::size_t i = 0; i < w_len; ++i) scenario.window.push_back(off + i);
  }
  return scenario;
}

// Builds a labeled dataset with the requested per-pattern counts. Splits are
// stratified per pattern: a train share first when requested, the remainder
// alternating val/test. Fully deterministic given the seed.
inline TraceDataset synthesize_dataset(const SimConfig& config,
                                       const std::map<Pattern, std::size_t>& mix,
                                       std::uint64_t seed, double train_fraction = 0.0) {
  config.validate();
  if (train_fraction < 0.0 || train_fraction >= 1.0)
    throw validation_error("synthesize_dataset: train_fraction must lie in [0,1)");
  std::size_t total = 0;
  for (const auto& [pattern, count] : mix) total += count;
  if (total == 0) throw validation_error("synthesize_dataset: mix totals zero examples");

  TraceDataset dataset;
  std::size_t example = 0;
  for (const auto& [pattern, count] : mix) {
    std::vector<std::string> block_ids;
    for (std::size_t c = 0; c < count; ++c, ++example) {
      Rng rng = Rng::stream(seed, "sim", example);
      const ScenarioSpec scenario = sample_scenario(config, pattern, rng);
      LabeledTrace item = simulate_trace(config, scenario, rng);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "sim-%06zu", example);
      item.trace.meta.example_id = buf;
      block_ids.push_back(item.trace.meta.example_id);
      dataset.items.push_back(std::move(item));
    }
    Rng split_rng = Rng::stream(seed, "split", static_cast<std::uint64_t>(pattern));
    std::vector<std::size_t> order(block_ids.size());
    std::iota(order.begin(), order.end(), 0);
    split_rng.shuffle(order);
    const std::size_t n_train =
        static_cast<std::size_t>(std::llround(train_fraction * block_ids.size()));
    std::size_t rank = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      Split s;
      if (k < n_train) {
        s = Split::train;
      } else {
        s = rank % 2 == 0 ? Split::val : Split::test;
        ++rank;
      }
      dataset.split[block_ids[order[k]]] = s;
    }
  }
  dataset.validate();
  return dataset;
}

}  // namespace tracedet
