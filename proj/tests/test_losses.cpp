#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "tracedet/losses.hpp"
#include "tracedet/rng.hpp"

#include "fd_util.hpp"

using namespace tracedet;
using Catch::Approx;

namespace {

MaskProbs probs(std::size_t t, std::size_t b, double value) {
  MaskProbs m;
  m.values = Tensor::full({t, b}, value);
  return m;
}

}  // namespace

TEST_CASE("cls_loss closed-form cases") {
  SECTION("near-perfect prediction") {
    const std::vector<double> y{1.0 - 1e-6};
    const std::vector<int> labels{1};
    CHECK(cls_loss(y, labels) == Approx(1e-6).epsilon(1e-3));
  }
  SECTION("coin-flip prediction on a positive") {
    const std::vector<double> y{0.5};
    const std::vector<int> labels{1};
    CHECK(cls_loss(y, labels) == Approx(std::log(2.0)).margin(1e-9));
  }
  SECTION("mean of equal terms") {
    const std::vector<double> y{0.5, 0.5};
    const std::vector<int> labels{0, 1};
    CHECK(cls_loss(y, labels) == Approx(std::log(2.0)).margin(1e-12));
  }
  SECTION("length mismatch is rejected") {
    const std::vector<double> y{0.5, 0.5};
    const std::vector<int> labels{1};
    CHECK_THROWS_AS(cls_loss(y, labels), validation_error);
  }
}

TEST_CASE("ext_loss closed-form cases") {
  SECTION("zero exactly at the prior") {
    CHECK(ext_loss(probs(3, 4, 0.25), 0.25) == 0.0);
  }
  SECTION("single mid-point entry") {
    // 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75)
    const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(0.5 / 0.75);
    CHECK(expected == Approx(0.143841).margin(1e-6));
    CHECK(ext_loss(probs(1, 1, 0.5), 0.25) == Approx(expected).margin(1e-15));
  }
  SECTION("entry at the clamp boundary") {
    const double p = 1.0 - 1e-6;
    const double expected = p * std::log(p / 0.25) + (1.0 - p) * std::log((1.0 - p) / 0.75);
    CHECK(expected == Approx(1.386279).margin(1e-6));
    CHECK(ext_loss(probs(1, 1, p), 0.25) == Approx(expected).margin(1e-15));
  }
  SECTION("tau outside (0,1) is rejected") {
    CHECK_THROWS_AS(ext_loss(probs(1, 1, 0.5), 0.0), validation_error);
    CHECK_THROWS_AS(ext_loss(probs(1, 1, 0.5), 1.0), validation_error);
  }
  SECTION("mean over batch of the sum over steps") {
    // two identical batch columns: same value as a single column
    CHECK(ext_loss(probs(5, 2, 0.4), 0.25) == Approx(ext_loss(probs(5, 1, 0.4), 0.25)));
  }
}

TEST_CASE("ext_loss is non-negative and zero only at the prior") {
  Rng rng(31);
  for (int round = 0; round < 50; ++round) {
    const double tau = rng.uniform(0.05, 0.95);
    MaskProbs m;
    m.values = Tensor({4, 3});
    bool all_tau = true;
    for (auto& v : m.values.values()) {
      v = rng.uniform(kProbClamp, 1.0 - kProbClamp);
      if (v != tau) all_tau = false;
    }
    const double loss = ext_loss(m, tau);
    CHECK(loss >= 0.0);
    if (!all_tau) CHECK(loss > 0.0);
  }
}

TEST_CASE("ext_loss is convex in each entry") {
  Rng rng(32);
  const double h = 1e-4;
  for (int round = 0; round < 50; ++round) {
    const double tau = rng.uniform(0.1, 0.9);
    const double p = rng.uniform(0.05, 0.95);
    const double lo = ext_loss(probs(1, 1, p - h), tau);
    const double mid = ext_loss(probs(1, 1, p), tau);
    const double hi = ext_loss(probs(1, 1, p + h), tau);
    CHECK(lo + hi - 2.0 * mid > 0.0);
  }
}

TEST_CASE("total_loss composes the two terms") {
  const std::vector<double> y{0.5};
  const std::vector<int> labels{1};
  const MaskProbs m = probs(1, 1, 0.5);
  SECTION("beta zero leaves only the classification term") {
    const LossBreakdown out = total_loss(y, labels, m, LossConfig{0.0, 0.25});
    CHECK(out.total == out.cls);
    CHECK(out.ext > 0.0);
  }
  SECTION("frozen sum at beta one") {
    const LossBreakdown out = total_loss(y, labels, m, LossConfig{1.0, 0.25});
    CHECK(out.total == Approx(0.836988).margin(1e-6));
  }
  SECTION("doubling beta doubles the regularizer share") {
    const LossBreakdown one = total_loss(y, labels, m, LossConfig{0.7, 0.25});
    const LossBreakdown two = total_loss(y, labels, m, LossConfig{1.4, 0.25});
    CHECK(two.total - two.cls == Approx(2.0 * (one.total - one.cls)).margin(1e-12));
  }
  SECTION("breakdown identity holds exactly") {
    Rng rng(33);
    for (int round = 0; round < 20; ++round) {
      const LossConfig cfg{rng.uniform(0.0, 2.0), rng.uniform(0.1, 0.4)};
      const std::vector<double> yy{rng.uniform(0.01, 0.99), rng.uniform(0.01, 0.99)};
      const std::vector<int> ll{0, 1};
      const LossBreakdown out = total_loss(yy, ll, probs(2, 2, rng.uniform(0.1, 0.9)), cfg);
      CHECK(std::abs(out.total - (out.cls + cfg.beta * out.ext)) < 1e-12);
    }
  }
}

TEST_CASE("tape losses agree with the plain evaluations") {
  Rng rng(34);
  for (int round = 0; round < 10; ++round) {
    const std::size_t t = 3, b = 4;
    Tensor m({t, b});
    for (auto& v : m.values()) v = rng.uniform(0.05, 0.95);
    std::vector<double> y(b);
    std::vector<int> labels(b);
    for (std::size_t i = 0; i < b; ++i) {
      y[i] = rng.uniform(0.05, 0.95);
      labels[i] = rng.below(2) == 0 ? 0 : 1;
    }
    const double tau = rng.uniform(0.1, 0.4);
    const double beta = rng.uniform(0.0, 2.0);

    Tape tape;
    Var yv = tape.leaf(Tensor({b}, y));
    Var mv = tape.leaf(m);
    Var cls = cls_loss_node(tape, yv, labels);
    Var ext = ext_loss_node(tape, mv, tau);
    Var total = total_loss_node(tape, cls, ext, beta);

    MaskProbs mp;
    mp.values = m;
    const LossBreakdown plain = total_loss(y, labels, mp, LossConfig{beta, tau});
    CHECK(tape.value(cls).item() == Approx(plain.cls).margin(1e-14));
    CHECK(tape.value(ext).item() == Approx(plain.ext).margin(1e-14));
    CHECK(tape.value(total).item() == Approx(plain.total).margin(1e-14));
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(35);
  Tensor y({5});
  for (auto& v : y.values()) v = rng.uniform(0.1, 0.9);
  const std::vector<int> labels{1, 0, 1, 1, 0};
  auto cls_op = [&labels](Tape& t, const std::vector<Var>& v) {
    return cls_loss_node(t, v[0], labels);
  };
  CHECK(testutil::primitive_fd_check({y}, cls_op, 71).max_rel_error < 1e-6);

  Tensor m({4, 3});
  for (auto& v : m.values()) v = rng.uniform(0.1, 0.9);
  auto ext_op = [](Tape& t, const std::vector<Var>& v) {
    return ext_loss_node(t, v[0], 0.25);
  };
  CHECK(testutil::primitive_fd_check({m}, ext_op, 72).max_rel_error < 1e-6);
}
