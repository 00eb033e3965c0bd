#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "ptsn/numerics/gradcheck.hpp"
#include "ptsn/numerics/ops.hpp"
#include "test_util.hpp"

namespace ptsn {
namespace {

using testing::random_param;
using testing::random_tensor;
using D = double;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape<D> tape;
  Tensor<D> eye = Tensor<D>::matrix(3, 3);
  for (int i = 0; i < 3; ++i) eye(i, i) = 1;
  Rng rng(1);
  auto m = random_tensor({3, 4}, rng);
  auto out = ops::matmul(tape.constant(eye), tape.constant(m));
  EXPECT_EQ(out.value(), m);
}

TEST(Matmul, HandArithmetic) {
  Tape<D> tape;
  auto a = tape.constant(Tensor<D>::from_rows({{1, 2}, {3, 4}}));
  auto b = tape.constant(Tensor<D>::from_rows({{1}, {1}}));
  auto out = ops::matmul(a, b);
  EXPECT_EQ(out.value(), Tensor<D>::from_rows({{3}, {7}}));
}

TEST(Matmul, ShapeMismatchThrows) {
  Tape<D> tape;
  auto a = tape.constant(Tensor<D>::matrix(2, 3));
  auto b = tape.constant(Tensor<D>::matrix(2, 3));
  EXPECT_THROW(ops::matmul(a, b), ShapeError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(7);
  auto a = random_param("a", {4, 5}, rng);
  auto b = random_param("b", {5, 2}, rng);
  auto rep = gradcheck<D>([&](Tape<D>& t) { return ops::sum(ops::matmul(t.param(a), t.param(b))); }, {&a, &b},
                          {.eps = 1e-5, .tol = 1e-6});
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(Softmax, ConstantRowIsUniform) {
  Tape<D> tape;
  auto y = ops::softmax(tape.constant(Tensor<D>(Shape{1, 5}, 3.25)));
  for (double v : y.value().storage()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Softmax, AnalyticTwoClass) {
  Tape<D> tape;
  auto y = ops::softmax(tape.constant(Tensor<D>::from_rows({{0.0, std::log(3.0)}})));
  EXPECT_NEAR(y.value()[0], 0.25, 1e-15);
  EXPECT_NEAR(y.value()[1], 0.75, 1e-15);
}

TEST(Softmax, StableForLargeInputs) {
  Tape<D> tape;
  auto y = ops::softmax(tape.constant(Tensor<D>::from_rows({{1000.0, 1000.0, -1000.0}})));
  EXPECT_TRUE(y.value().all_finite());
  EXPECT_NEAR(y.value()[0], 0.5, 1e-15);
}

TEST(Softmax, CausalMaskZeroesFuture) {
  Tape<D> tape;
  Rng rng(3);
  auto y = ops::softmax(tape.constant(random_tensor({4, 4}, rng)), ops::SoftmaxMask::causal);
  for (std::size_t r = 0; r < 4; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      if (c > r) {
        EXPECT_EQ(y.value()(r, c), 0.0);
      }
      total += y.value()(r, c);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Softmax, RowsSumToOneAndGradientMatches) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto x = random_param("x", {1, 6}, rng, 2.0);
    auto w = random_tensor({1, 6}, rng);
    {
      Tape<D> tape;
      double total = ops::softmax(tape.param(x)).value().sum();
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
    auto rep = gradcheck<D>(
        [&](Tape<D>& t) { return ops::sum(ops::mul(ops::softmax(t.param(x)), t.constant(w))); }, {&x});
    EXPECT_TRUE(rep.passed) << "seed " << seed << " err " << rep.max_rel_error;
  }
}

TEST(Softmax, CausalGradient) {
  Rng rng(11);
  auto x = random_param("x", {5, 5}, rng);
  auto w = random_tensor({5, 5}, rng);
  auto rep = gradcheck<D>(
      [&](Tape<D>& t) {
        return ops::sum(ops::mul(ops::softmax(t.param(x), ops::SoftmaxMask::causal), t.constant(w)));
      },
      {&x});
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(LayerNorm, PreAffineIsStandardized) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    // Spread from 1e-3 upward; eps = 0 gives the exact normalization.
    const double spread = std::pow(10.0, -3.0 + 4.0 * rng.uniform());
    auto x = random_tensor({3, 16}, rng, spread);
    for (auto& v : x.storage()) v += 5.0 * rng.normal();
    Tape<D> tape;
    auto y = ops::layer_norm(tape.constant(x), tape.constant(Tensor<D>(Shape{16}, 1.0)),
                             tape.constant(Tensor<D>(Shape{16}, 0.0)), 0.0);
    for (std::size_t r = 0; r < 3; ++r) {
      double mean = 0, var = 0;
      for (double v : y.value().row(r)) mean += v;
      mean /= 16;
      for (double v : y.value().row(r)) var += (v - mean) * (v - mean);
      var /= 16;
      EXPECT_LE(std::abs(mean), 1e-10);
      EXPECT_LE(std::abs(var - 1.0), 1e-6);
    }
  }
}

TEST(LayerNorm, DefaultEpsShrinksVarianceAsExpected) {
  Rng rng(2);
  auto x = random_tensor({1, 32}, rng, 1e-2);
  double mean = 0, var = 0;
  for (double v : x.storage()) mean += v;
  mean /= 32;
  for (double v : x.storage()) var += (v - mean) * (v - mean);
  var /= 32;
  Tape<D> tape;
  auto y = ops::layer_norm(tape.constant(x), tape.constant(Tensor<D>(Shape{32}, 1.0)),
                           tape.constant(Tensor<D>(Shape{32}, 0.0)));
  double yv = 0;
  for (double v : y.value().storage()) yv += v * v;
  EXPECT_NEAR(yv / 32, var / (var + 1e-5), 1e-12);
}

TEST(LayerNorm, StandardizedInputIsFixedPoint) {
  Tensor<D> x = Tensor<D>::from_rows({{-1.0, 1.0, -1.0, 1.0}});
  Tape<D> tape;
  auto y = ops::layer_norm(tape.constant(x), tape.constant(Tensor<D>(Shape{4}, 1.0)),
                           tape.constant(Tensor<D>(Shape{4}, 0.0)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.value()[i], x[i], 1e-5);
}

TEST(LayerNorm, RejectsWidthOne) {
  Tape<D> tape;
  EXPECT_THROW(ops::layer_norm(tape.constant(Tensor<D>::matrix(2, 1)), tape.constant(Tensor<D>(Shape{1})),
                               tape.constant(Tensor<D>(Shape{1}))),
               ShapeError);
}

TEST(LayerNorm, GradientMatches) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    auto x = random_param("x", {2, 8}, rng);
    auto g = random_param("g", {8}, rng);
    auto b = random_param("b", {8}, rng);
    auto w = random_tensor({2, 8}, rng);
    auto rep = gradcheck<D>(
        [&](Tape<D>& t) {
          return ops::sum(ops::mul(ops::layer_norm(t.param(x), t.param(g), t.param(b)), t.constant(w)));
        },
        {&x, &g, &b});
    EXPECT_TRUE(rep.passed) << "seed " << seed << " err " << rep.max_rel_error << " at " << rep.worst_param;
  }
}

TEST(FeedForward, ZeroWeightsGiveOutputBias) {
  Tape<D> tape;
  Rng rng(5);
  auto b2 = random_tensor({4}, rng);
  auto y = ops::feed_forward(tape.constant(random_tensor({3, 4}, rng)), tape.constant(Tensor<D>::matrix(4, 8)),
                             tape.constant(Tensor<D>(Shape{8})), tape.constant(Tensor<D>::matrix(8, 4)),
                             tape.constant(b2));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.value()(r, c), b2[c]);
}

TEST(FeedForward, GeluAtZero) {
  EXPECT_EQ(ops::gelu_value(0.0), 0.0);
  EXPECT_NEAR(ops::gelu_derivative(0.0), 0.5, 1e-15);
}

TEST(FeedForward, ShapeMismatchThrows) {
  Tape<D> tape;
  EXPECT_THROW(ops::feed_forward(tape.constant(Tensor<D>::matrix(3, 4)), tape.constant(Tensor<D>::matrix(5, 8)),
                                 tape.constant(Tensor<D>(Shape{8})), tape.constant(Tensor<D>::matrix(8, 4)),
                                 tape.constant(Tensor<D>(Shape{4}))),
               ShapeError);
}

TEST(FeedForward, GradientMatches) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(200 + seed);
    auto x = random_param("x", {3, 4}, rng);
    auto w1 = random_param("w1", {4, 8}, rng, 0.5);
    auto b1 = random_param("b1", {8}, rng, 0.5);
    auto w2 = random_param("w2", {8, 4}, rng, 0.5);
    auto b2 = random_param("b2", {4}, rng, 0.5);
    auto w = random_tensor({3, 4}, rng);
    auto rep = gradcheck<D>(
        [&](Tape<D>& t) {
          auto y = ops::feed_forward(t.param(x), t.param(w1), t.param(b1), t.param(w2), t.param(b2));
          return ops::sum(ops::mul(y, t.constant(w)));
        },
        {&x, &w1, &b1, &w2, &b2});
    EXPECT_TRUE(rep.passed) << "seed " << seed << " err " << rep.max_rel_error;
  }
}

TEST(CrossEntropy, ConfidentCorrectLogitsGiveZeroLoss) {
  Tape<D> tape;
  auto l = tape.constant(Tensor<D>::from_rows({{100.0, 0.0, 0.0}, {0.0, 0.0, 100.0}}));
  EXPECT_NEAR(ops::cross_entropy(l, {0, 2}).value()[0], 0.0, 1e-30);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Tape<D> tape;
  auto l = tape.constant(Tensor<D>(Shape{4, 7}, 0.3));
  EXPECT_NEAR(ops::cross_entropy(l, {0, 3, 6, 1}).value()[0], std::log(7.0), 1e-14);
}

TEST(CrossEntropy, PaddingIsMaskedAndEmptyIsError) {
  Tape<D> tape;
  auto l = tape.constant(Tensor<D>(Shape{3, 5}, 0.0));
  EXPECT_NEAR(ops::cross_entropy(l, {0, 2, 0}, 0).value()[0], std::log(5.0), 1e-14);
  EXPECT_THROW(ops::cross_entropy(l, {0, 0, 0}, 0), DataError);
}

TEST(CrossEntropy, ExcludedClassesCarryNoMass) {
  Tape<D> tape;
  auto l = tape.constant(Tensor<D>(Shape{1, 4}, 0.0));
  std::vector<bool> excluded{true, false, false, true};
  EXPECT_NEAR(ops::cross_entropy(l, {1}, -1, excluded).value()[0], std::log(2.0), 1e-14);
}

TEST(CrossEntropy, GradientMatches) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(300 + seed);
    auto l = random_param("logits", {3, 7}, rng, 2.0);
    std::vector<int> targets{static_cast<int>(rng.below(7)), static_cast<int>(rng.below(7)),
                             static_cast<int>(rng.below(7))};
    auto rep = gradcheck<D>([&](Tape<D>& t) { return ops::cross_entropy(t.param(l), targets); }, {&l});
    EXPECT_TRUE(rep.passed) << "seed " << seed << " err " << rep.max_rel_error;
  }
}

TEST(StructuralOps, SliceConcatGatherGradients) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(400 + seed);
    auto x = random_param("x", {3, 6}, rng);
    auto table = random_param("table", {5, 6}, rng);
    auto bias = random_param("bias", {6}, rng);
    auto w = random_tensor({3, 6}, rng);
    auto rep = gradcheck<D>(
        [&](Tape<D>& t) {
          auto xv = t.param(x);
          auto swapped = ops::concat_cols<D>({ops::slice_cols(xv, 4, 2), ops::slice_cols(xv, 0, 4)});
          auto emb = ops::gather_rows(t.param(table), {4, 1, 4});
          auto y = ops::add_bias(ops::add(ops::scale(swapped, 0.5), emb), t.param(bias));
          auto z = ops::slice_rows(ops::gelu(y), 1, 2);
          return ops::sum(ops::mul(z, ops::slice_rows(t.constant(w), 0, 2)));
        },
        {&x, &table, &bias});
    EXPECT_TRUE(rep.passed) << "seed " << seed << " err " << rep.max_rel_error;
  }
}

TEST(MatmulBt, GradientMatches) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(500 + seed);
    auto a = random_param("a", {3, 4}, rng);
    auto b = random_param("b", {5, 4}, rng);
    auto w = random_tensor({3, 5}, rng);
    auto rep = gradcheck<D>(
        [&](Tape<D>& t) { return ops::sum(ops::mul(ops::matmul_bt(t.param(a), t.param(b)), t.constant(w))); },
        {&a, &b});
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  }
}

TEST(Backward, NonScalarLossThrows) {
  Tape<D> tape;
  Rng rng(1);
  auto p = random_param("p", {2, 2}, rng);
  auto y = ops::scale(tape.param(p), 2.0);
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Backward, RepeatedRunsAreBitIdentical) {
  Rng rng(9);
  auto a = random_param("a", {4, 6}, rng);
  auto b = random_param("b", {6, 3}, rng);
  auto g = random_param("g", {3}, rng);
  auto run = [&] {
    a.zero_grad();
    b.zero_grad();
    g.zero_grad();
    Tape<D> tape;
    auto h = ops::layer_norm(ops::matmul(tape.param(a), tape.param(b)), tape.param(g), tape.param(g));
    tape.backward(ops::cross_entropy(h, {0, 1, 2, 1}));
    return std::make_tuple(a.grad, b.grad, g.grad);
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, ZeroGradResetsExactly) {
  Rng rng(4);
  auto a = random_param("a", {2, 2}, rng);
  Tape<D> tape;
  tape.backward(ops::sum(ops::mul(tape.param(a), tape.param(a))));
  EXPECT_NE(a.grad.sum(), 0.0);
  a.zero_grad();
  for (double v : a.grad.storage()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(a.grad.shape(), a.value.shape());
}

TEST(Backward, FrozenParameterReceivesNoGradient) {
  Rng rng(4);
  auto a = random_param("a", {2, 2}, rng);
  a.frozen = true;
  auto b = random_param("b", {2, 2}, rng);
  Tape<D> tape;
  tape.backward(ops::sum(ops::matmul(tape.param(a), tape.param(b))));
  for (double v : a.grad.storage()) EXPECT_EQ(v, 0.0);
  EXPECT_NE(b.grad.sum(), 0.0);
}

TEST(Gradcheck, LinearFunctionIsExact) {
  Rng rng(12);
  auto x = random_param("x", {1, 5}, rng);
  auto w = random_tensor({1, 5}, rng);
  auto rep = gradcheck<D>([&](Tape<D>& t) { return ops::sum(ops::mul(t.param(x), t.constant(w))); }, {&x},
                          {.tol = 1e-8});
  EXPECT_LT(rep.max_rel_error, 1e-9);
}

TEST(Gradcheck, CorruptedRuleIsDetected) {
  Rng rng(13);
  auto x = random_param("x", {2, 3}, rng);
  // Square op whose recorded derivative is x instead of 2x.
  auto bad_square = [](Var<D> v) {
    Tensor<D> out = v.value();
    for (auto& e : out.storage()) e *= e;
    const std::size_t iv = v.id;
    return v.tape->record("bad_square", std::move(out), v.requires_grad(),
                          [iv](Tape<D>& t, std::size_t, const Tensor<D>& g) {
                            auto& gx = t.grad_of(iv);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * t.value(iv)[i];
                          });
  };
  auto rep = gradcheck<D>([&](Tape<D>& t) { return ops::sum(bad_square(t.param(x))); }, {&x});
  EXPECT_FALSE(rep.passed);
  EXPECT_GT(rep.max_rel_error, 0.4);
}

TEST(CheckedMode, NonFiniteValueRaises) {
  set_checked_mode(true);
  Tape<D> tape;
  auto x = tape.constant(Tensor<D>::from_rows({{1.0, 2.0}}));
  EXPECT_THROW(ops::scale(x, std::numeric_limits<double>::infinity()), NumericalError);
  set_checked_mode(false);
  EXPECT_NO_THROW(ops::scale(x, std::numeric_limits<double>::infinity()));
}

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor<D>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<D>(Shape{2, 2}, std::vector<D>{1, 2, 3}), ShapeError);
  Tensor<D> t(Shape{2, 3, 4});
  EXPECT_EQ(t.rows(), 6u);
  EXPECT_EQ(t.cols(), 4u);
}

TEST(Tensor, SinglePrecisionOpsWork) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>::from_rows({{1.f, 2.f}, {3.f, 4.f}}));
  auto y = ops::softmax(ops::matmul(a, a));
  EXPECT_NEAR(y.value().sum(), 2.0f, 1e-6f);
}

}  // namespace
}  // namespace ptsn
