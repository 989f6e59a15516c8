// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "slpt/tensor.hpp"
#include "testing.hpp"

using namespace slpt;
using slpt::testutil::check_gradients;
using slpt::testutil::random_tensor;

namespace {

void expect_values(const Tensor& t, const std::vector<double>& want, double tol = 0.0) {
  ASSERT_EQ(t.numel(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t[i], want[i], tol) << "index " << i;
}

void expect_grad_ok(const std::vector<Tensor>& params, const std::function<Tensor()>& loss) {
  auto gc = check_gradients(params, loss);
  EXPECT_EQ(gc.failures, 0u) << gc.first_failure << " (worst rel " << gc.worst_rel << ")";
}

}  // namespace

TEST(Matmul, IdentityTimesMatrix) {
  Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  expect_values(matmul(i2, a), {1, 2, 3, 4});
  expect_values(matmul(a, i2), {1, 2, 3, 4});
}

TEST(Matmul, RowTimesColumn) {
  expect_values(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})), {11});
}

TEST(Matmul, IdentityAssociatesOnRandomMatrices) {
  Rng rng(3);
  Tensor a = random_tensor({4, 5}, rng, false);
  std::vector<double> e4(16, 0.0), e5(25, 0.0);
  for (int i = 0; i < 4; ++i) e4[i * 5] = 1.0;
  for (int i = 0; i < 5; ++i) e5[i * 6] = 1.0;
  Tensor left = matmul(Tensor::from({4, 4}, e4), a), right = matmul(a, Tensor::from({5, 5}, e5));
  EXPECT_EQ(left.shape(), a.shape());
  EXPECT_EQ(right.shape(), a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_NEAR(left[i], a[i], 1e-12);
    EXPECT_NEAR(right[i], a[i], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3] x [2,3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  Rng rng(5);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  backward(sum(matmul(a, b)));
  // d/dA sum(AB) = 1 * B^T: every row equals the row sums of B.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(a.grad()[i * 4 + k], b[k * 2] + b[k * 2 + 1], 1e-12);
  auto gc = check_gradients({a, b}, [&] { return sum(matmul(a, b)); }, 1e-6, 1e-9);
  EXPECT_EQ(gc.failures, 0u) << gc.first_failure;
}

TEST(Matmul, BatchedAndBroadcastGradients) {
  Rng rng(6);
  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 2}, rng), w = random_tensor({4, 3}, rng);
  expect_grad_ok({a, b}, [&] { return sum(mul(matmul(a, b), matmul(a, b))); });
  expect_grad_ok({a, w}, [&] { return sum(mul(matmul(a, w), matmul(a, w))); });
}

TEST(Matmul, MacCounterCountsMKN) {
  Rng rng(1);
  Tensor a = random_tensor({2, 3, 4}, rng, false), b = random_tensor({4, 5}, rng, false);
  MacCounter c;
  (void)matmul(a, b);
  EXPECT_EQ(c.count(), 2u * 3 * 4 * 5);
}

TEST(Softmax, SymmetricRowsAreUniform) {
  expect_values(softmax_rows(Tensor::from({1, 2}, {0, 0})), {0.5, 0.5}, 1e-15);
  expect_values(softmax_rows(Tensor::from({1, 3}, {7.5, 7.5, 7.5})), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
}

TEST(Softmax, MatchesDirectFormula) {
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  expect_values(softmax_rows(Tensor::from({3}, {1, 2, 3})), {std::exp(1.0) / z, std::exp(2.0) / z, std::exp(3.0) / z},
                1e-12);
}

TEST(Softmax, RowsSumToOneForExtremeInputs) {
  Rng rng(9);
  for (double s : {1e-3, 1.0, 50.0, 700.0}) {
    Tensor x = random_tensor({6, 7}, rng, false, s);
    Tensor y = softmax_rows(x);
    for (std::size_t r = 0; r < 6; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(y[r * 7 + c], 0.0);
        acc += y[r * 7 + c];
      }
      EXPECT_NEAR(acc, 1.0, 1e-9);
    }
  }
}

TEST(Softmax, NonFiniteInputThrows) {
  EXPECT_THROW(softmax_rows(Tensor::from({1, 2}, {0.0, std::nan("")})), NumericError);
  EXPECT_THROW(softmax_rows(Tensor::from({1, 2}, {0.0, INFINITY})), NumericError);
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  Tensor g = Tensor::full({4}, 1.0), b = Tensor::zeros({4});
  expect_values(layernorm(Tensor::full({1, 4}, 3.25), g, b), {0, 0, 0, 0}, 0.0);
}

TEST(LayerNorm, NormalizedRowIsFixedAsEpsVanishes) {
  Tensor g = Tensor::full({2}, 1.0), b = Tensor::zeros({2});
  expect_values(layernorm(Tensor::from({1, 2}, {1, -1}), g, b, 0.0), {1, -1}, 1e-15);
  expect_values(layernorm(Tensor::from({1, 2}, {1, -1}), g, b), {1, -1}, 1e-5);
}

TEST(LayerNorm, RandomRowHasZeroMeanUnitVariance) {
  Rng rng(11);
  Tensor x = random_tensor({5, 16}, rng, false, 3.0);
  Tensor y = layernorm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}));
  for (std::size_t r = 0; r < 5; ++r) {
    double xm = 0.0, xv = 0.0;
    for (std::size_t c = 0; c < 16; ++c) xm += x[r * 16 + c] / 16;
    for (std::size_t c = 0; c < 16; ++c) xv += (x[r * 16 + c] - xm) * (x[r * 16 + c] - xm) / 16;
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 16; ++c) m += y[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m);
    v /= 16;
    EXPECT_NEAR(m, 0.0, 1e-10);
    EXPECT_NEAR(v, xv / (xv + kLayerNormEps), 1e-12);
  }
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::from({3}, {1, -2, 5}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Tensor x = Tensor::from({3}, {1, -2, 5}, true);
  backward(sum(mul(x, x)));
  expect_values(Tensor::from({3}, {x.grad()[0], x.grad()[1], x.grad()[2]}), {2, -4, 10});
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), ContractError);
}

TEST(Backward, RepeatedCallsAccumulateUntilCleared) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  backward(sum(x));
  backward(sum(x));
  EXPECT_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  backward(sum(x));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, TwoConsumersAccumulate) {
  Rng rng(2);
  Tensor x = random_tensor({3, 3}, rng), w = random_tensor({3, 3}, rng);
  expect_grad_ok({x, w}, [&] {
    Tensor y = matmul(x, w);
    return sum(add(mul(y, x), sigmoid(y)));
  });
}

TEST(Backward, EveryReachableParameterGetsGrad) {
  Rng rng(4);
  Tensor a = random_tensor({2, 2}, rng), b = random_tensor({2, 2}, rng), unused = random_tensor({2}, rng);
  backward(sum(matmul(a, b)));
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_FALSE(unused.has_grad());
}

TEST(NoGrad, GuardSkipsRecording) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = sum(mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
  backward(y);
  EXPECT_FALSE(x.has_grad());
}

// Finite-difference checks for every differentiable op.

TEST(GradCheck, Elementwise) {
  Rng rng(21);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), row = random_tensor({4}, rng);
  expect_grad_ok({a, b}, [&] { return sum(mul(add(a, b), sub(a, b))); });
  expect_grad_ok({a, row}, [&] { return sum(mul(add(a, row), mul(a, row))); });
  expect_grad_ok({a, row}, [&] { return sum(mul(sub(a, row), a)); });
  expect_grad_ok({a}, [&] { return mean(mul(scale(a, -2.5), a)); });
  expect_grad_ok({a}, [&] { return sum(mul(sigmoid(a), a)); });
  expect_grad_ok({a}, [&] { return sum(mul(gelu(a), a)); });
}

TEST(GradCheck, ReluAwayFromKink) {
  Rng rng(22);
  Tensor a = random_tensor({20}, rng);
  for (double& v : a.mutable_data()) v += v > 0 ? 0.1 : -0.1;
  expect_grad_ok({a}, [&] { return sum(mul(relu(a), a)); });
}

TEST(GradCheck, RowNorm) {
  Rng rng(23);
  Tensor a = random_tensor({5, 2}, rng);
  expect_grad_ok({a}, [&] { return sum(mul(row_norm(a), row_norm(a))); });
  expect_grad_ok({a}, [&] { return sum(row_norm(a)); });
}

TEST(GradCheck, ShapeOps) {
  Rng rng(24);
  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({4, 6}, rng), c = random_tensor({4, 2}, rng);
  Tensor w = random_tensor({3, 4}, rng);
  expect_grad_ok({a}, [&] { return sum(mul(reshape(a, {6, 4}), reshape(a, {6, 4}))); });
  expect_grad_ok({a, w}, [&] { return sum(mul(transpose(a), transpose(a))); });
  expect_grad_ok({b}, [&] { return sum(mul(split_heads(b, 3), split_heads(b, 3))); });
  expect_grad_ok({b, w}, [&] { return sum(mul(merge_heads(split_heads(b, 2)), b)); });
  expect_grad_ok({b, c}, [&] {
    Tensor k = concat({b, c}, 1);
    return sum(mul(k, k));
  });
  expect_grad_ok({a}, [&] {
    Tensor k = concat({a, a}, 0);
    return sum(mul(k, k));
  });
}

TEST(ShapeOps, SplitMergeRoundTrip) {
  Rng rng(25);
  Tensor b = random_tensor({5, 6}, rng, false);
  Tensor back = merge_heads(split_heads(b, 3));
  EXPECT_EQ(back.shape(), b.shape());
  EXPECT_EQ(back.values(), b.values());
  Tensor s = split_heads(b, 3);
  // head h, row i, column j holds b[i, h*2 + j]
  EXPECT_EQ(s[(1 * 5 + 4) * 2 + 1], b[4 * 6 + 3]);
}

TEST(GradCheck, LinearSoftmaxLayerNorm) {
  Rng rng(26);
  Tensor x = random_tensor({4, 5}, rng), w = random_tensor({3, 5}, rng), bias = random_tensor({3}, rng);
  Tensor g = random_tensor({5}, rng), be = random_tensor({5}, rng), r = random_tensor({4, 5}, rng, false);
  expect_grad_ok({x, w, bias}, [&] { return sum(mul(linear(x, w, bias), linear(x, w, bias))); });
  expect_grad_ok({x}, [&] { return sum(mul(softmax_rows(x), r)); });
  expect_grad_ok({x, g, be}, [&] { return sum(mul(layernorm(x, g, be), r)); });
}

TEST(Conv2d, MatchesDirectEvaluationWithReplicatedBorders) {
  Rng rng(31);
  const std::size_t c = 2, h = 5, w = 6, o = 3, k = 3;
  Tensor x = random_tensor({c, h, w}, rng, false), wt = random_tensor({o, c, k, k}, rng, false);
  Tensor b = random_tensor({o}, rng, false);
  for (std::size_t stride : {1u, 2u}) {
    const std::size_t pad = 1;
    Tensor y = conv2d(x, wt, b, stride, pad);
    const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{o, oh, ow}));
    for (std::size_t oi = 0; oi < o; ++oi)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b[oi];
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = std::clamp<long>(long(oy * stride + ky) - long(pad), 0, long(h) - 1);
                const long ix = std::clamp<long>(long(ox * stride + kx) - long(pad), 0, long(w) - 1);
                acc += wt[((oi * c + ci) * k + ky) * k + kx] * x[(ci * h + std::size_t(iy)) * w + std::size_t(ix)];
              }
          EXPECT_NEAR(y[(oi * oh + oy) * ow + ox], acc, 1e-12);
        }
  }
}

TEST(GradCheck, Conv2d) {
  Rng rng(32);
  Tensor x = random_tensor({2, 6, 5}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
  expect_grad_ok({x, w, b}, [&] {
    Tensor y = conv2d(x, w, b, 2, 1);
    return sum(mul(y, y));
  });
  Tensor w1 = random_tensor({2, 2, 1, 1}, rng);
  expect_grad_ok({x, w1}, [&] {
    Tensor y = conv2d(x, w1, Tensor{}, 1, 0);
    return sum(mul(y, y));
  });
}

TEST(Adam, ZeroGradientLeavesParameter) {
  Tensor p = Tensor::from({3}, {1, 2, 3}, true);
  std::vector<Tensor> ps{p};
  zero_grad(ps);
  auto st = AdamState::for_params(ps);
  adam_step(ps, st, {});
  expect_values(p, {1, 2, 3});
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // m1 = 0.1, v1 = 0.001; bias-corrected mhat = 1, vhat = 1, so the step is
  // lr / (1 + eps).
  Tensor p = Tensor::from({1}, {0.5}, true);
  std::vector<Tensor> ps{p};
  backward(sum(p));
  auto st = AdamState::for_params(ps);
  adam_step(ps, st, {});
  EXPECT_NEAR(p[0] - 0.5, -1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(p.grad()[0], 1.0);
}

TEST(Adam, IdenticalParametersGetIdenticalUpdates) {
  Tensor a = Tensor::from({2}, {0.3, -0.7}, true), b = Tensor::from({2}, {0.3, -0.7}, true);
  std::vector<Tensor> ps{a, b};
  auto st = AdamState::for_params(ps);
  for (int i = 0; i < 3; ++i) {
    zero_grad(ps);
    backward(add(sum(mul(a, a)), sum(mul(b, b))));
    adam_step(ps, st, {});
  }
  EXPECT_EQ(a.values(), b.values());
}

TEST(Adam, MissingGradientIsContractError) {
  Tensor p = Tensor::from({1}, {0.5}, true);
  std::vector<Tensor> ps{p};
  auto st = AdamState::for_params(ps);
  EXPECT_THROW(adam_step(ps, st, {}), ContractError);
}

TEST(Tensor, ShapeMustMatchValueCount) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  Tensor t = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
}
