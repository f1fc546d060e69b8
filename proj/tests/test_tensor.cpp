#include <gtest/gtest.h>

#include <cmath>

#include "m3asr/gradcheck.hpp"
#include "m3asr/random.hpp"
#include "m3asr/tensor.hpp"

using namespace m3asr;

namespace {

Tensor param(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) { return random_uniform(std::move(s), rng, lo, hi, true); }

double check(const std::function<Tensor()>& f, std::vector<Tensor> params) {
  return finite_diff_check(f, params).max_relative_error;
}

// Fixed random projection so every gradient check has a scalar loss that
// depends on all outputs non-uniformly.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
  Rng r(seed);
  return sum(mul(y, random_uniform(y.shape(), r)));
}

}  // namespace

TEST(TensorOps, SoftmaxOfZerosIsUniform) {
  const Tensor y = softmax_last(Tensor::matrix(1, 2, {0.0, 0.0}));
  EXPECT_DOUBLE_EQ(y(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(y(0, 1), 0.5);
}

TEST(TensorOps, LayernormOfConstantIsZero) {
  const Tensor y = layernorm(Tensor::matrix(1, 5, {3.0, 3.0, 3.0, 3.0, 3.0}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(TensorOps, DepthwiseConvMatchesNestedLoops) {
  Rng rng(5);
  const Tensor x = random_uniform({8, 16}, rng);
  const Tensor k = random_uniform({15, 16}, rng);
  const Tensor y = depthwise_conv1d(x, k);
  ASSERT_EQ(y.shape(), (Shape{8, 16}));
  for (int t = 0; t < 8; ++t)
    for (int c = 0; c < 16; ++c) {
      double s = 0.0;
      for (int j = 0; j < 15; ++j) {
        const int src = t + j - 7;
        if (src >= 0 && src < 8) s += k(j, c) * x(src, c);
      }
      EXPECT_NEAR(y(t, c), s, 1e-12);
    }
}

TEST(TensorOps, ShapeErrorNamesOpAndShapes) {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(depthwise_conv1d(a, Tensor::zeros({2, 3})), ShapeError);
}

TEST(TensorOps, DebugModeRejectsNonFinite) {
  const Tensor bad = Tensor::matrix(1, 2, {1.0, std::nan("")});
  EXPECT_NO_THROW(softmax_last(bad));
  set_debug_checks(true);
  EXPECT_THROW(softmax_last(bad), NumericError);
  set_debug_checks(false);
}

TEST(TensorOps, DropoutIsIdentityInEval) {
  Rng rng(1);
  const Tensor x = random_uniform({3, 4}, rng);
  const Tensor y = dropout(x, 0.5, false, &rng);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), std::vector<double>(x.data().begin(), x.data().end()));
}

TEST(TensorOps, DropoutKeepsExpectation) {
  Rng rng(2);
  const Tensor x = Tensor::full({200, 50}, 1.0);
  const Tensor y = dropout(x, 0.3, true, &rng);
  double s = 0.0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.7) < 1e-12);
    s += v;
  }
  EXPECT_NEAR(s / 10000.0, 1.0, 0.05);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Tensor x = Tensor({2}, {1.0, 2.0}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x = Tensor({2}, {1.0, 2.0}, true);
  const Tensor loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], 8.0);
}

TEST(Backward, NonScalarLossIsRejected) {
  Tensor x = Tensor({2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
}

TEST(Backward, UnreachableLeafHasZeroGrad) {
  Rng rng(3);
  Tensor a = param({2, 2}, rng), b = param({2, 2}, rng);
  const Tensor unused = mul(b, b);
  backward(sum(a));
  for (double g : b.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(b.grad().size(), b.size());
}

TEST(Backward, ThreeLayerFfnMatchesFiniteDifferences) {
  Rng rng(4);
  const Tensor x = random_uniform({5, 6}, rng);
  Tensor w1 = param({6, 8}, rng), b1 = param({8}, rng), w2 = param({8, 7}, rng), w3 = param({7, 3}, rng);
  auto f = [&] {
    Tensor h = swish(add(matmul(x, w1), b1));
    h = relu(matmul(h, w2));
    return weighted_sum(matmul(h, w3));
  };
  EXPECT_LT(check(f, {w1, b1, w2, w3}), 1e-4);
}

TEST(Backward, ConcatDoesNotLeak) {
  Rng rng(6);
  Tensor a = param({3, 2}, rng), b = param({3, 4}, rng);
  const Tensor c = concat_last({a, b});
  backward(sum(slice_cols(c, 0, 2)));
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);
  for (double g : b.grad()) EXPECT_EQ(g, 0.0);
}

TEST(GradCheck, QuadraticIsExact) {
  Rng rng(7);
  Tensor x = param({4, 3}, rng);
  const auto r = finite_diff_check([&] { return sum(square(x)); }, std::span<Tensor>(&x, 1), 1e-5);
  EXPECT_LT(r.max_relative_error, 1e-6);
  EXPECT_EQ(r.coordinates, 12u);
}

TEST(GradCheck, RejectsStepOutsideRange) {
  Tensor x = Tensor({1}, {1.0}, true);
  auto f = [&] { return sum(x); };
  EXPECT_THROW(finite_diff_check(f, std::span<Tensor>(&x, 1), 1e-2), std::invalid_argument);
  EXPECT_THROW(finite_diff_check(f, std::span<Tensor>(&x, 1), 1e-9), std::invalid_argument);
}

TEST(GradCheck, DetectsNonDeterminism) {
  Tensor x = Tensor({1}, {1.0}, true);
  int calls = 0;
  auto f = [&] { return scale(sum(x), 1.0 + 0.1 * ++calls); };
  EXPECT_THROW(finite_diff_check(f, std::span<Tensor>(&x, 1)), std::runtime_error);
}

// Every primitive against central differences on inputs of magnitude ~1.
class PrimitiveGrad : public ::testing::Test {
 protected:
  Rng rng{11};
};

TEST_F(PrimitiveGrad, Elementwise) {
  Tensor a = param({3, 4}, rng), b = param({3, 4}, rng, 0.5, 1.5), row = param({1, 4}, rng), col = param({3, 1}, rng);
  EXPECT_LT(check([&] { return weighted_sum(add(a, row)); }, {a, row}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(sub(a, col)); }, {a, col}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(mul(a, b)); }, {a, b}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(div(a, b)); }, {a, b}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(scale(a, -1.7)); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(add_scalar(a, 0.3)); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(log(b)); }, {b}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(exp(a)); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(sqrt(b)); }, {b}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(sigmoid(a)); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(swish(a)); }, {a}), 1e-4);
}

TEST_F(PrimitiveGrad, Reductions) {
  Tensor a = param({3, 4}, rng);
  EXPECT_LT(check([&] { return scale(sum(square(a)), 0.5); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return mean(exp(a)); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(sum_last(square(a))); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(sum_first(square(a))); }, {a}), 1e-4);
}

TEST_F(PrimitiveGrad, LinearAlgebraAndLayout) {
  Tensor a = param({3, 4}, rng), b = param({4, 5}, rng), c = param({3, 2}, rng);
  EXPECT_LT(check([&] { return weighted_sum(matmul(a, b)); }, {a, b}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(transpose(a)); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(reshape(a, {2, 6})); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(concat_last({a, c})); }, {a, c}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(slice_cols(a, 1, 3)); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(gather_rows(a, {2, 0, 2})); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(scatter_rows(a, {4, 0, 2}, 5)); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(pick(a, {0, 3, 1})); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(mask_fill(a, std::vector<bool>(12, false), -1.0)); }, {a}), 1e-4);
  std::vector<bool> mask(12, false);
  mask[1] = mask[7] = true;
  EXPECT_LT(check([&] { return weighted_sum(mask_fill(a, mask, -5.0)); }, {a}), 1e-4);
}

TEST_F(PrimitiveGrad, NormalisationAndActivations) {
  Tensor a = param({3, 6}, rng);
  EXPECT_LT(check([&] { return weighted_sum(softmax_last(a)); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(log_softmax_last(a)); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(layernorm(a)); }, {a}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(glu(a)); }, {a}), 1e-4);
}

TEST_F(PrimitiveGrad, Convolutions) {
  Tensor x = param({6, 4}, rng), k = param({5, 4}, rng), w = param({4, 3}, rng), b = param({3}, rng);
  EXPECT_LT(check([&] { return weighted_sum(depthwise_conv1d(x, k)); }, {x, k}), 1e-4);
  EXPECT_LT(check([&] { return weighted_sum(pointwise_conv1d(x, w, b)); }, {x, w, b}), 1e-4);
  Tensor img = param({7 * 9, 2}, rng);
  EXPECT_LT(check([&] { return weighted_sum(unfold2d(img, 7, 9, 3, 2)); }, {img}), 1e-4);
}

TEST_F(PrimitiveGrad, EmbeddingAndDropout) {
  Tensor table = param({5, 3}, rng);
  EXPECT_LT(check([&] { return weighted_sum(embedding_lookup(table, {4, 1, 1})); }, {table}), 1e-4);
  Tensor x = param({4, 5}, rng);
  // A fixed mask per evaluation keeps the function deterministic.
  auto f = [&] {
    Rng r(123);
    return weighted_sum(dropout(x, 0.4, true, &r));
  };
  EXPECT_LT(check(f, {x}), 1e-4);
}

TEST(SoftmaxProperty, RowsArePositiveAndSumToOne) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor y = softmax_last(random_uniform({6, 9}, rng, -20.0, 20.0));
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 9; ++c) {
        EXPECT_GT(y(r, c), 0.0);
        s += y(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Unfold2d, MatchesDirectIndexing) {
  Rng rng(8);
  const Tensor x = random_uniform({5 * 6, 2}, rng);
  const Tensor u = unfold2d(x, 5, 6, 3, 2);
  ASSERT_EQ(u.shape(), (Shape{2 * 2, 18}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b)
          for (std::size_t c = 0; c < 2; ++c)
            EXPECT_EQ(u(i * 2 + j, (a * 3 + b) * 2 + c), x((2 * i + a) * 6 + 2 * j + b, c));
}

TEST(NoGrad, RecordsNothing) {
  Tensor x = Tensor({2}, {1.0, 2.0}, true);
  NoGradGuard ng;
  const Tensor y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}
