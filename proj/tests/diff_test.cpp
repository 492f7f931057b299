#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hpc/ops.hpp"
#include "support/gradcheck.hpp"

using hpc::diff::Shape;
using hpc::diff::Tensor;
namespace diff = hpc::diff;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> uni(lo, hi);
  std::vector<double> v(diff::shape_size(shape));
  for (double& x : v) x = uni(rng);
  return Tensor::constant(std::move(shape), std::move(v));
}

}  // namespace

TEST(Matmul, IdentityAndOrthogonal) {
  Tensor eye = Tensor::constant({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::constant({2, 2}, {1, 2, 3, 4});
  Tensor r = diff::matmul(eye, m);
  EXPECT_EQ(std::vector<double>(r.values().begin(), r.values().end()), (std::vector<double>{1, 2, 3, 4}));

  Tensor a = Tensor::constant({1, 2}, {1, 0});
  Tensor b = Tensor::constant({2, 1}, {0, 5});
  EXPECT_EQ(diff::matmul(a, b).item(), 0.0);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(diff::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), diff::DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  auto r = hpc::testing::gradcheck([](const auto& in) { return diff::matmul(in[0], in[1]); },
                                   {random_tensor(rng, {5, 4}), random_tensor(rng, {4, 3})});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Elementwise, KnownValues) {
  Tensor x = Tensor::constant({3}, {-1, 0, 2});
  Tensor y = diff::relu(x);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 2.0);
  EXPECT_DOUBLE_EQ(diff::sigmoid(Tensor::scalar(0.0)).item(), 0.5);
}

TEST(Elementwise, SoftplusGradientAtZero) {
  auto r = hpc::testing::gradcheck([](const auto& in) { return diff::softplus(in[0]); }, {Tensor::scalar(0.0)});
  EXPECT_LT(r.max_rel_error, 1e-6);
  diff::Tape tape;
  Tensor x = Tensor::parameter({1}, {0.0});
  {
    diff::TapeScope scope(tape);
    tape.backward(diff::softplus(x));
  }
  EXPECT_NEAR(x.grad()[0], 0.5, 1e-12);
}

TEST(Elementwise, DomainErrorsReportIndex) {
  try {
    diff::log(Tensor::constant({3}, {1.0, 2.0, -1.0}));
    FAIL() << "expected NumericError";
  } catch (const diff::NumericError& e) {
    EXPECT_EQ(e.index(), 2u);
  }
  EXPECT_THROW(diff::exp(Tensor::constant({2}, {0.0, 1e6})), diff::NumericError);
}

TEST(Elementwise, BroadcastTrailingSingleton) {
  Tensor a = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor col = Tensor::constant({2, 1}, {10, 100});
  Tensor r = diff::mul(a, col);
  EXPECT_EQ(r[2], 30.0);
  EXPECT_EQ(r[3], 400.0);
  Tensor row = Tensor::constant({3}, {1, 1, 1});
  EXPECT_EQ(diff::add(a, row)[5], 7.0);
  EXPECT_THROW(diff::add(a, Tensor::zeros({3, 2})), diff::DimensionError);
}

TEST(Softmax, KnownValues) {
  Tensor s = diff::softmax(Tensor::constant({3}, {2.5, 2.5, 2.5}), 0);
  for (double v : s.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(diff::softmax(Tensor::constant({1}, {42.0}), 0).item(), 1.0);
  Tensor t = diff::softmax(Tensor::constant({2}, {0.0, std::log(3.0)}), 0);
  EXPECT_NEAR(t[0], 0.25, 1e-15);
  EXPECT_NEAR(t[1], 0.75, 1e-15);
  // Large logits stay finite thanks to max subtraction.
  Tensor big = diff::softmax(Tensor::constant({2}, {1000.0, 1000.0}), 0);
  EXPECT_NEAR(big[0], 0.5, 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor(rng, {7, 5}, -10, 10);
  Tensor s = diff::softmax(x, 1);
  for (std::size_t r = 0; r < 7; ++r) {
    double acc = 0;
    for (std::size_t c = 0; c < 5; ++c) acc += s[r * 5 + c];
    EXPECT_NEAR(acc, 1.0, 1e-12);
  }
}

TEST(GatherConcat, IdentityAndDuplicates) {
  Tensor rows = Tensor::constant({2, 2}, {1, 2, 3, 4});
  std::vector<std::uint32_t> ident{0, 1};
  Tensor same = diff::gather_concat(rows, ident, Tensor());
  EXPECT_EQ(std::vector<double>(same.values().begin(), same.values().end()), (std::vector<double>{1, 2, 3, 4}));

  std::vector<std::uint32_t> dup{0, 0, 1};
  Tensor extra = Tensor::constant({3, 1}, {9, 8, 7});
  Tensor g = diff::gather_concat(rows, dup, extra);
  EXPECT_EQ(g.shape(), (Shape{3, 3}));
  EXPECT_EQ(std::vector<double>(g.values().begin(), g.values().end()),
            (std::vector<double>{1, 2, 9, 1, 2, 8, 3, 4, 7}));

  std::vector<std::uint32_t> bad{0, 2};
  EXPECT_THROW(diff::gather_concat(rows, bad, Tensor()), diff::IndexError);
}

TEST(GatherConcat, ScatterAddGradient) {
  std::mt19937_64 rng(4);
  std::vector<std::uint32_t> idx{0, 2, 2, 1, 0, 2};
  auto r = hpc::testing::gradcheck([&](const auto& in) { return diff::gather_concat(in[0], idx, in[1]); },
                                   {random_tensor(rng, {3, 4}), random_tensor(rng, {6, 2})});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Tape, BackwardTwiceWithoutResetThrows) {
  Tensor x = Tensor::parameter({2}, {1.0, 2.0});
  diff::Tape tape;
  Tensor loss;
  {
    diff::TapeScope scope(tape);
    loss = diff::sum(diff::square(x));
  }
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), diff::TapeError);
  tape.reset();
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, GradientAccumulatesAcrossUses) {
  Tensor x = Tensor::parameter({1}, {3.0});
  diff::Tape tape;
  {
    diff::TapeScope scope(tape);
    // y = x*x + x  => dy/dx = 2x + 1 = 7
    tape.backward(diff::add(diff::mul(x, x), x));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Tape, NoRecordingWithoutActiveTape) {
  Tensor x = Tensor::parameter({1}, {3.0});
  Tensor y = diff::square(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Forward, DeterministicBitIdentical) {
  std::mt19937_64 rng(5);
  Tensor a = random_tensor(rng, {6, 5});
  Tensor b = random_tensor(rng, {5, 4});
  auto run = [&] { return diff::softmax(diff::tanh(diff::matmul(a, b)), 1); };
  Tensor r1 = run(), r2 = run();
  for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_EQ(r1[i], r2[i]);
}

// Every differentiable op over many random instances.
class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, CentralDifferences) {
  const int op = GetParam();
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(1000 * op + trial);
    std::uniform_int_distribution<int> dim(1, 4);
    const std::size_t m = dim(rng), n = dim(rng), k = dim(rng);
    hpc::testing::GradCheckResult r;
    switch (op) {
      case 0: r = hpc::testing::gradcheck([](const auto& in) { return diff::matmul(in[0], in[1]); },
                                         {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}); break;
      case 1: r = hpc::testing::gradcheck([](const auto& in) { return diff::add(in[0], in[1]); },
                                         {random_tensor(rng, {m, n}), random_tensor(rng, {1, n})}); break;
      case 2: r = hpc::testing::gradcheck([](const auto& in) { return diff::sub(in[0], in[1]); },
                                         {random_tensor(rng, {m, n}), random_tensor(rng, {m, 1})}); break;
      case 3: r = hpc::testing::gradcheck([](const auto& in) { return diff::mul(in[0], in[1]); },
                                         {random_tensor(rng, {m, n, k}), random_tensor(rng, {m, n, 1})}); break;
      case 4: r = hpc::testing::gradcheck([](const auto& in) { return diff::div(in[0], in[1]); },
                                         {random_tensor(rng, {m, n}), random_tensor(rng, {m, n}, 0.5, 2.0)}); break;
      case 5: r = hpc::testing::gradcheck([](const auto& in) { return diff::relu(in[0]); },
                                         {random_tensor(rng, {m, n})}); break;
      case 6: r = hpc::testing::gradcheck([](const auto& in) { return diff::exp(in[0]); },
                                         {random_tensor(rng, {m, n})}); break;
      case 7: r = hpc::testing::gradcheck([](const auto& in) { return diff::log(in[0]); },
                                         {random_tensor(rng, {m, n}, 0.2, 3.0)}); break;
      case 8: r = hpc::testing::gradcheck([](const auto& in) { return diff::sigmoid(in[0]); },
                                         {random_tensor(rng, {m, n}, -4, 4)}); break;
      case 9: r = hpc::testing::gradcheck([](const auto& in) { return diff::softplus(in[0]); },
                                         {random_tensor(rng, {m, n}, -4, 4)}); break;
      case 10: r = hpc::testing::gradcheck([](const auto& in) { return diff::softmax(in[0], 1); },
                                          {random_tensor(rng, {m, n + 1}, -3, 3)}); break;
      case 11: {
        std::vector<std::uint32_t> idx(k + 2);
        std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(m - 1));
        for (auto& v : idx) v = pick(rng);
        r = hpc::testing::gradcheck([&](const auto& in) { return diff::gather_concat(in[0], idx, in[1]); },
                                    {random_tensor(rng, {m, n}), random_tensor(rng, {k + 2, 2})});
        break;
      }
      case 12: r = hpc::testing::gradcheck([](const auto& in) { return diff::tanh(in[0]); },
                                          {random_tensor(rng, {m, n}, -2, 2)}); break;
      case 13: r = hpc::testing::gradcheck([](const auto& in) { return diff::sum_axis(in[0], 1); },
                                          {random_tensor(rng, {m, n, k})}); break;
      case 14: r = hpc::testing::gradcheck([](const auto& in) { return diff::linear(in[0], in[1]); },
                                          {random_tensor(rng, {m, k}), random_tensor(rng, {k + 1, n})}); break;
      case 15: r = hpc::testing::gradcheck([](const auto& in) { return diff::square(in[0]); },
                                          {random_tensor(rng, {m, n})}); break;
      case 16: r = hpc::testing::gradcheck([](const auto& in) { return diff::sqrt(in[0]); },
                                          {random_tensor(rng, {m, n}, 0.3, 3.0)}); break;
      case 17: r = hpc::testing::gradcheck([](const auto& in) { return diff::abs(in[0]); },
                                          {random_tensor(rng, {m, n}, 0.1, 2.0)}); break;
      case 18: r = hpc::testing::gradcheck(
                   [](const auto& in) { return diff::concat_cols(diff::scale(in[0], -1.5), diff::add_scalar(in[1], 2.0)); },
                   {random_tensor(rng, {m, n}), random_tensor(rng, {m, k})}); break;
      case 19: r = hpc::testing::gradcheck(
                   [n, k](const auto& in) { return diff::view(in[0], n, {k}); },
                   {random_tensor(rng, {m + 2, n + k})}); break;
      case 20: r = hpc::testing::gradcheck(
                   [](const auto& in) { return diff::add(diff::max_all(in[0]), diff::min_all(in[0])); },
                   {random_tensor(rng, {m, n})}); break;
      default: break;
    }
    worst = std::max(worst, r.max_rel_error);
  }
  EXPECT_LT(worst, 1e-4) << "op " << op;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradients, ::testing::Range(0, 21));

TEST(Composition, ChainMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto r = hpc::testing::gradcheck(
      [](const auto& in) { return diff::softmax(diff::sigmoid(diff::matmul(in[0], in[1])), 1); },
      {random_tensor(rng, {3, 4}), random_tensor(rng, {4, 5})});
  EXPECT_LT(r.max_rel_error, 1e-6);
}
