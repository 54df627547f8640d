// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "feddat/autodiff/grad_check.hpp"
#include "feddat/autodiff/ops.hpp"
#include "grad_suite.hpp"

namespace {

using namespace feddat::ad;

Tensor iota(Shape shape, double start = 0.0, double step = 1.0, bool grad = false) {
  std::vector<double> v(numel_of(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = start + step * static_cast<double>(i);
  return Tensor(std::move(shape), std::move(v), grad);
}

TEST(Tensor, ConstructionChecksValueCount) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.ndim(), 2u);
  EXPECT_THROW((void)t.item(), ContractError);
  EXPECT_EQ(Tensor::scalar(2.0).item(), 2.0);
}

TEST(Ops, MatmulValuesAgainstLoops) {
  Tensor a = iota({2, 3}), b = iota({3, 2}, 1.0);
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 2}));
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += a.at(i * 3 + k) * b.at(k * 2 + j);
      EXPECT_DOUBLE_EQ(c.at(i * 2 + j), s);
    }
  }
}

TEST(Ops, ShapeMismatchesThrow) {
  EXPECT_THROW(matmul(iota({2, 3}), iota({2, 3})), DimensionError);
  EXPECT_THROW(add(iota({2, 3}), iota({2})), DimensionError);
  EXPECT_THROW(mul(iota({2, 3}), iota({3, 2})), DimensionError);
  EXPECT_THROW(reshape(iota({2, 3}), {4, 2}), DimensionError);
  EXPECT_THROW(slice(iota({2, 3}), 1, 2, 2), DimensionError);
  EXPECT_THROW(concat({iota({2, 3}), iota({3, 3})}, 1), DimensionError);
  EXPECT_THROW(layer_norm(iota({2, 3}), iota({2}), iota({3})), DimensionError);
  const std::vector<int> bad{0, 7};
  EXPECT_THROW(embedding(iota({5, 2}), bad), DimensionError);
}

TEST(Ops, SoftmaxRowsSumToOneUnderLargeLogits) {
  Tensor z({2, 3}, std::vector<double>{1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0});
  Tensor p = softmax(z);
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_TRUE(std::isfinite(p.at(r * 3 + c)));
      s += p.at(r * 3 + c);
    }
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
  Tensor lp = log_softmax(z);
  EXPECT_NEAR(std::exp(lp.at(1)), p.at(1), 1e-12);  // z - lse cancels ~1e3
}

TEST(Ops, LayerNormHasZeroMeanUnitVariance) {
  Tensor x = iota({2, 4}, -1.0, 0.7);
  Tensor y = layer_norm(x, Tensor({4}, 1.0), Tensor({4}, 0.0));
  for (std::size_t r = 0; r < 2; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 4; ++c) m += y.at(r * 4 + c) / 4.0;
    for (std::size_t c = 0; c < 4; ++c) v += (y.at(r * 4 + c) - m) * (y.at(r * 4 + c) - m) / 4.0;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-4);  // eps inside the root
  }
}

TEST(Tape, BackwardTwiceIsAContractError) {
  Tensor x = iota({3}, 1.0, 1.0, true);
  Tape tape;
  Tape::Scope scope(&tape);
  Tensor loss = sum(mul(x, x));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), ContractError);
}

TEST(Tape, NonScalarLossIsAContractError) {
  Tensor x = iota({3}, 1.0, 1.0, true);
  Tape tape;
  Tape::Scope scope(&tape);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Tape, FrozenLeafReceivesNoGradient) {
  Tensor trained = iota({2, 2}, 0.5, 0.1, true);
  Tensor frozen = iota({2, 2}, -0.5, 0.3, false);
  Tape tape;
  Tape::Scope scope(&tape);
  tape.backward(sum(matmul(trained, frozen)));
  EXPECT_TRUE(trained.has_grad());
  EXPECT_FALSE(frozen.has_grad());
}

TEST(Tape, DetachBlocksGradient) {
  Tensor x = iota({3}, 1.0, 1.0, true);
  Tape tape;
  Tape::Scope scope(&tape);
  tape.backward(sum(mul(x, x.detach())));
  // d/dx sum(x * c) = c, not 2x.
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x.at(i));
}

TEST(Tape, GradientsAccumulateOverReuse) {
  Tensor x = iota({2}, 1.0, 1.0, true);
  Tape tape;
  Tape::Scope scope(&tape);
  tape.backward(sum(add(x, add(x, x))));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 3.0);
}

TEST(Tape, NoGradGuardRecordsNothing) {
  Tensor x = iota({3}, 1.0, 1.0, true);
  Tape tape;
  Tape::Scope scope(&tape);
  {
    NoGradGuard guard;
    (void)sum(mul(x, x));
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Ops, NonFiniteOutputIsANumericError) {
  Tensor x({2}, std::vector<double>{1.0, std::numeric_limits<double>::quiet_NaN()}, true);
  EXPECT_THROW(sum(x), NumericError);
  Tensor big({1}, std::vector<double>{1e300});
  EXPECT_THROW(mul(big, big), NumericError);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // detach() hides half the dependence, so the analytic gradient is off by 2x.
  Tensor x = iota({3}, 0.5, 0.25, true);
  const auto report = grad_check([&] { return sum(mul(x, x.detach())); }, {x});
  EXPECT_FALSE(report.passed);
  EXPECT_GT(report.max_rel_error, 0.4);
}

TEST(GradCheck, EveryOpPassesOnRandomInstances) {
  const auto cases = suite::run_grad_suite(20, 7);
  ASSERT_GE(cases.size(), 25u);
  for (const auto& c : cases) {
    EXPECT_EQ(c.instances, 20u) << c.name;
    EXPECT_EQ(c.failures, 0u) << c.name << " max rel err " << c.max_rel_error;
    EXPECT_LE(c.max_rel_error, c.tolerance) << c.name;
  }
}

}  // namespace
