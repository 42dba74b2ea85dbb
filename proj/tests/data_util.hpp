#pragma once

// Random dataset generator for round-trip and property tests.

#include <string>
#include <vector>

#include "tracedet/rng.hpp"
#include "tracedet/trace.hpp"

namespace tracedet::testutil {

inline TraceDataset random_dataset(Rng& rng, std::size_t max_items = 6) {
  const std::size_t t = 1 + rng.below(6);
  const std::size_t n = 1 + rng.below(5);
  const std::size_t v = 2 + rng.below(30);
  const std::size_t count = 1 + rng.below(max_items);
  TraceDataset dataset;
  const double lnv = std::log(static_cast<double>(v));
  for (std::size_t e = 0; e < count; ++e) {
    LabeledTrace item;
    item.trace.steps = t;
    item.trace.positions = n;
    item.trace.vocab_size = v;
    item.trace.entropies = Tensor({t, n});
    for (auto& x : item.trace.entropies.values()) x = rng.uniform(0.0, lnv);
    item.label = rng.below(2) == 0 ? 0 : 1;
    if (rng.below(2) == 0) {
      std::vector<std::size_t> window;
      for (std::size_t s = 0; s < t; ++s)
        if (rng.below(3) == 0) window.push_back(s);
      if (!window.empty()) item.planted_window = window;
    }
    item.trace.meta.example_id = "ex-" + std::to_string(e);
    item.trace.meta.remask_strategy = rng.below(2) ? "low_confidence" : "random";
    item.trace.meta.step_length = 1 + rng.below(4);
    item.trace.meta.source = rng.below(2) ? "sim" : "export";
    dataset.split[item.trace.meta.example_id] =
        static_cast<Split>(rng.below(3));
    dataset.items.push_back(std::move(item));
  }
  return dataset;
}

}  // namespace tracedet::testutil
