#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tracedet/autodiff.hpp"
#include "tracedet/rng.hpp"

#include "fd_util.hpp"

using namespace tracedet;
using Catch::Approx;

TEST_CASE("softmax of equal logits is uniform") {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, {0.0, 0.0}));
  Var y = tape.softmax(x, 0);
  CHECK(tape.value(y)[0] == Approx(0.5).margin(1e-15));
  CHECK(tape.value(y)[1] == Approx(0.5).margin(1e-15));
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Rng rng(7);
  Tape tape;
  Tensor x({6, 5});
  for (auto& v : x.values()) v = rng.uniform(-4.0, 4.0);
  Tensor shifted = x;
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 5; ++c) shifted.at(r, c) += 13.25;
  Var a = tape.softmax(tape.leaf(x), 1);
  Var b = tape.softmax(tape.leaf(shifted), 1);
  for (std::size_t r = 0; r < 6; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      sum += tape.value(a).at(r, c);
      CHECK(tape.value(a).at(r, c) == Approx(tape.value(b).at(r, c)).margin(1e-12));
    }
    CHECK(sum == Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("matmul by identity returns the input") {
  Tape tape;
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Rng rng(3);
  Tensor x = testutil::random_tensor({3, 4}, rng);
  Var y = tape.matmul(tape.leaf(eye), tape.leaf(x));
  REQUIRE(tape.value(y).shape() == std::vector<std::size_t>{3, 4});
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(tape.value(y)[i] == Approx(x[i]).margin(1e-15));
}

TEST_CASE("mean over axis 0") {
  Tape tape;
  Var x = tape.leaf(Tensor({2, 2}, {1.0, 3.0, 5.0, 7.0}));
  Var m = tape.mean(x, 0);
  CHECK(tape.value(m)[0] == Approx(3.0));
  CHECK(tape.value(m)[1] == Approx(5.0));
}

TEST_CASE("matmul rejects incompatible shapes") {
  Tape tape;
  Var a = tape.leaf(Tensor({2, 3}));
  Var b = tape.leaf(Tensor({4, 2}));
  CHECK_THROWS_AS(tape.matmul(a, b), shape_error);
  CHECK_THROWS_AS(tape.add(a, b), shape_error);
  CHECK_THROWS_AS(tape.concat_last(a, b), shape_error);
}

TEST_CASE("backward of sum gives unit gradients") {
  Tape tape;
  Var x = tape.leaf(Tensor({3}, {2.0, -1.0, 0.5}));
  Var s = tape.sum_all(x);
  tape.backward(s);
  const Tensor g = tape.grad(x);
  for (std::size_t i = 0; i < 3; ++i) CHECK(g[i] == Approx(1.0));
}

TEST_CASE("backward requires a scalar root") {
  Tape tape;
  Var x = tape.leaf(Tensor({3}, {1.0, 2.0, 3.0}));
  CHECK_THROWS_AS(tape.backward(x), validation_error);
}

TEST_CASE("sigmoid gradient at zero is a quarter") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(0.0));
  Var y = tape.sigmoid(x);
  tape.backward(y);
  CHECK(tape.grad(x)[0] == Approx(0.25).margin(1e-15));
}

TEST_CASE("gradient of root with respect to itself is one") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(4.2));
  Var y = tape.scalar_mul(x, 3.0);
  tape.backward(y);
  CHECK(tape.grad(y)[0] == Approx(1.0));
  CHECK(tape.grad(x)[0] == Approx(3.0));
}

TEST_CASE("finite_diff_check on a quadratic") {
  auto f = [](const std::vector<real_t>& p) { return p[0] * p[0]; };
  const std::vector<real_t> grad{6.0};
  const FdCheckResult r = finite_diff_check(f, grad, {3.0}, 1e-5);
  CHECK(r.max_rel_error < 1e-8);
}

TEST_CASE("finite_diff_check on a constant") {
  auto f = [](const std::vector<real_t>&) { return 1.25; };
  const std::vector<real_t> grad{0.0, 0.0};
  const FdCheckResult r = finite_diff_check(f, grad, {0.3, -0.7}, 1e-5);
  CHECK(r.max_rel_error == 0.0);
}

TEST_CASE("every primitive adjoint matches central differences") {
  CHECK(testutil::all_primitive_fd_errors(2024) < 1e-6);
}

TEST_CASE("composite expression matches finite differences") {
  Rng rng(99);
  const Tensor a = testutil::random_tensor({3, 4}, rng);
  const Tensor w = testutil::random_tensor({4, 2}, rng);
  auto build = [](Tape& t, const std::vector<Var>& v) {
    Var h = t.relu(t.matmul(v[0], v[1]));
    Var s = t.softmax(t.layer_norm(h, 1e-5), 1);
    return t.mean(t.sigmoid(s), 0);
  };
  const FdCheckResult r = testutil::primitive_fd_check({a, w}, build, 5, 1e-6);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("dropout identities") {
  Rng rng(11);
  Tensor x = testutil::random_tensor({4, 4}, rng);
  Tape tape;
  Var in = tape.leaf(x);
  SECTION("rate zero is the identity") {
    Var out = tape.dropout(in, 0.0, true, rng);
    CHECK(out.id == in.id);
  }
  SECTION("train off is the identity at any rate") {
    Var out = tape.dropout(in, 0.4, false, rng);
    CHECK(out.id == in.id);
  }
  SECTION("scales surviving entries by 1/(1-rate)") {
    Var out = tape.dropout(in, 0.5, true, rng);
    const Tensor& y = tape.value(out);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const bool dropped = y[i] == 0.0;
      if (!dropped) CHECK(y[i] == Approx(2.0 * x[i]));
    }
  }
}

TEST_CASE("round_ste forwards hard values and passes gradients through") {
  Tape tape;
  Var x = tape.leaf(Tensor({4}, {0.2, 0.7, 0.5, 0.9}));
  Var y = tape.round_ste(x);
  CHECK(tape.value(y).values() == std::vector<real_t>{0.0, 1.0, 0.0, 1.0});
  tape.backward(tape.sum_all(y));
  for (std::size_t i = 0; i < 4; ++i) CHECK(tape.grad(x)[i] == Approx(1.0));
}

TEST_CASE("clamp passes gradient only strictly inside the bounds") {
  Tape tape;
  Var x = tape.leaf(Tensor({3}, {0.01, 0.5, 0.99}));
  Var y = tape.clamp(x, 0.1, 0.9);
  CHECK(tape.value(y).values() == std::vector<real_t>{0.1, 0.5, 0.9});
  tape.backward(tape.sum_all(y));
  CHECK(tape.grad(x)[0] == 0.0);
  CHECK(tape.grad(x)[1] == 1.0);
  CHECK(tape.grad(x)[2] == 0.0);
}

TEST_CASE("forward ops keep values finite on random inputs") {
  Rng rng(123);
  for (int round = 0; round < 20; ++round) {
    Tape tape;
    Var a = tape.leaf(testutil::random_tensor({4, 3, 6}, rng, -3.0, 3.0));
    Var w = tape.leaf(testutil::random_tensor({6, 6}, rng, -1.0, 1.0));
    Var h = tape.layer_norm(tape.matmul(a, w), 1e-5);
    Var s = tape.softmax(h, 2);
    Var out = tape.mean(tape.mul(s, tape.sigmoid(h)), 1);
    CHECK(tape.value(out).all_finite());
  }
}

TEST_CASE("layer_norm output has zero mean and unit variance per row") {
  Rng rng(5);
  Tape tape;
  Var x = tape.leaf(testutil::random_tensor({7, 16}, rng, -2.0, 5.0));
  Var y = tape.layer_norm(x, 1e-5);
  const Tensor& v = tape.value(y);
  for (std::size_t r = 0; r < 7; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 16; ++c) mean += v.at(r, c);
    mean /= 16.0;
    for (std::size_t c = 0; c < 16; ++c) var += (v.at(r, c) - mean) * (v.at(r, c) - mean);
    var /= 16.0;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(var == Approx(1.0).margin(1e-4));
  }
}

TEST_CASE("permute then inverse permute is the identity") {
  Rng rng(17);
  const Tensor x = testutil::random_tensor({2, 3, 4}, rng);
  Tape tape;
  Var a = tape.leaf(x);
  Var p = tape.permute(a, {2, 0, 1});
  Var back = tape.permute(p, {1, 2, 0});
  CHECK(tape.value(back).values() == x.values());
}
