#include <gtest/gtest.h>

#include <cmath>

#include "caac/grad_check.hpp"
#include "caac/ops.hpp"
#include "support.hpp"

using namespace caac;
using caac::testing::max_abs_diff;
using caac::testing::random_tensor;

namespace {

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a.at(i * k + p) * b.at(p * n + j);
  return out;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor::from_data({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor::from_data({2, 0}, {}), ShapeError);
}

TEST(Tensor, NonFiniteValuesRejected) {
  EXPECT_THROW(Tensor::from_data({1}, {NAN}), NumericError);
  const Tensor big = Tensor::from_data({1}, {1000.0});
  EXPECT_THROW(caac::exp(big), NumericError);
}

TEST(Elementwise, ExpOfZeros) {
  const Tensor y = caac::exp(Tensor::zeros({2}));
  EXPECT_EQ(y.at(0), 1.0);
  EXPECT_EQ(y.at(1), 1.0);
}

TEST(Elementwise, Relu) {
  const Tensor y = relu(Tensor::from_data({2}, {-2.0, 3.0}));
  EXPECT_EQ(y.at(0), 0.0);
  EXPECT_EQ(y.at(1), 3.0);
}

TEST(Elementwise, GradientOfSumOfSquares) {
  Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  EXPECT_EQ(x.grad()[2], 6.0);
}

TEST(Elementwise, BroadcastOnlyScalarOrEqual) {
  const Tensor a = Tensor::zeros({2, 3});
  EXPECT_NO_THROW(add(a, Tensor::scalar(1.0)));
  EXPECT_NO_THROW(mul(Tensor::scalar(2.0), a));
  EXPECT_THROW(add(a, Tensor::zeros({3})), ShapeError);
  EXPECT_THROW(sub(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST(Elementwise, DomainErrors) {
  EXPECT_THROW(caac::log(Tensor::from_data({2}, {1.0, 0.0})), NumericError);
  EXPECT_THROW(caac::log(Tensor::from_data({1}, {-1.0})), NumericError);
  EXPECT_THROW(div(Tensor::scalar(1.0), Tensor::from_data({2}, {1.0, 0.0})), NumericError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng, true, 0.5, 2.0);
  Tensor b = random_tensor({3, 4}, rng, true, 0.5, 2.0);
  const auto f = [&] { return sum(mul(div(caac::log(a), add(b, caac::exp(a))), relu(sub(a, scale(b, 0.3))))); };
  EXPECT_LT(grad_check(f, {a, b}).max_relative_error, 1e-4);
}

TEST(Dropout, InvertedScalingAndEvalIdentity) {
  Rng rng(3);
  const Tensor x = Tensor::full({1000}, 1.0);
  const Tensor eval = dropout(x, 0.2, rng, false);
  EXPECT_EQ(max_abs_diff(eval.data(), x.data()), 0.0);
  const Tensor train = dropout(x, 0.2, rng, true);
  std::size_t kept = 0;
  for (double v : train.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.25) < 1e-15);
    kept += v != 0.0;
  }
  EXPECT_NEAR(static_cast<double>(kept) / 1000.0, 0.8, 0.05);
}

TEST(Matmul, IdentityLeavesMatrix) {
  const Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from_data({2, 2}, {1.5, -2, 3, 7});
  EXPECT_EQ(max_abs_diff(matmul(eye, m).data(), m.data()), 0.0);
}

TEST(Matmul, HandProduct) {
  const Tensor y = matmul(Tensor::from_data({1, 2}, {1, 2}), Tensor::from_data({2, 1}, {3, 4}));
  ASSERT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_EQ(y.item(), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(5);
  const Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  EXPECT_LT(max_abs_diff(matmul(a, b).data(), naive_matmul(a, b)), 1e-12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.index(32), k = 1 + rng.index(32), n = 1 + rng.index(32);
    const Tensor x = random_tensor({m, k}, rng), y = random_tensor({k, n}, rng);
    EXPECT_LT(max_abs_diff(matmul(x, y).data(), naive_matmul(x, y)), 1e-12);
  }
}

TEST(Matmul, DimensionMismatch) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Matmul, BackwardRule) {
  Rng rng(8);
  Tensor a = random_tensor({3, 4}, rng, true), b = random_tensor({4, 2}, rng, true);
  const Tensor w = random_tensor({3, 2}, rng);
  backward(sum(mul(matmul(a, b), w)));
  // dA = W * B^T, dB = A^T * W
  const auto da = naive_matmul(w, transpose(b.detach()));
  const auto db = naive_matmul(transpose(a.detach()), w);
  EXPECT_LT(max_abs_diff(a.grad(), da), 1e-12);
  EXPECT_LT(max_abs_diff(b.grad(), db), 1e-12);
}

TEST(Softmax, UniformForEqualInputs) {
  const Tensor y = softmax(Tensor::zeros({1, 2}), 1);
  EXPECT_EQ(y.at(0), 0.5);
  EXPECT_EQ(y.at(1), 0.5);
}

TEST(Softmax, StableForLargeInputs) {
  const Tensor y = softmax(Tensor::from_data({1, 2}, {1000.0, 0.0}), 1);
  EXPECT_NEAR(y.at(0), 1.0, 1e-15);
  EXPECT_NEAR(y.at(1), 0.0, 1e-15);
}

TEST(Softmax, LogSoftmaxMatchesLogOfSoftmax) {
  Rng rng(2);
  const Tensor x = random_tensor({5, 7}, rng, false, -4, 4);
  EXPECT_LT(max_abs_diff(log_softmax(x, 1).data(), caac::log(softmax(x, 1)).data()), 1e-9);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(4);
  const Tensor x = random_tensor({6, 9}, rng, false, -5, 5);
  const Tensor y = softmax(x, 1);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 9; ++c) s += y.at(r * 9 + c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_LT(max_abs_diff(softmax(add_scalar(x, 37.5), 1).data(), y.data()), 1e-9);
  // axis 0 reduces over columns
  const Tensor z = softmax(x, 0);
  for (std::size_t c = 0; c < 9; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < 6; ++r) s += z.at(r * 9 + c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, Gradients) {
  Rng rng(9);
  const Tensor w = random_tensor({3, 5}, rng);
  const auto f0 = [&](const Tensor& x) { return sum(mul(softmax(x, 0), w)); };
  const auto f1 = [&](const Tensor& x) { return sum(mul(log_softmax(x, 1), w)); };
  EXPECT_LT(grad_check(f0, random_tensor({3, 5}, rng, true)).max_relative_error, 1e-4);
  EXPECT_LT(grad_check(f1, random_tensor({3, 5}, rng, true)).max_relative_error, 1e-4);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  const Tensor y = layer_norm(Tensor::full({1, 4}, 5.0), Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  Rng rng(6);
  const Tensor y = layer_norm(random_tensor({1, 64}, rng, false, -3, 8), Tensor::full({64}, 1.0), Tensor::zeros({64}));
  double m = 0.0, v = 0.0;
  for (double x : y.data()) m += x / 64.0;
  for (double x : y.data()) v += (x - m) * (x - m) / 64.0;
  EXPECT_NEAR(m, 0.0, 1e-6);
  EXPECT_NEAR(v, 1.0, 1e-4);  // eps = 1e-5 shrinks the variance slightly
  const Tensor y0 = layer_norm(random_tensor({1, 64}, rng, false, -3, 8), Tensor::full({64}, 1.0),
                               Tensor::zeros({64}), 0.0);
  double m0 = 0.0, v0 = 0.0;
  for (double x : y0.data()) m0 += x / 64.0;
  for (double x : y0.data()) v0 += (x - m0) * (x - m0) / 64.0;
  EXPECT_NEAR(m0, 0.0, 1e-6);
  EXPECT_NEAR(v0, 1.0, 1e-6);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  Tensor x = random_tensor({3, 6}, rng, true);
  Tensor g = random_tensor({6}, rng, true, 0.5, 1.5);
  Tensor b = random_tensor({6}, rng, true);
  const Tensor w = random_tensor({3, 6}, rng);
  const auto f = [&] { return sum(mul(layer_norm(x, g, b), w)); };
  EXPECT_LT(grad_check(f, {x, g, b}).max_relative_error, 1e-5);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::zeros({2, 3, 4}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SecondCallIsAnError) {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  const Tensor loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), GraphError);
}

TEST(Backward, NonScalarAndDetachedSeedsRejected) {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), GraphError);
  EXPECT_THROW(backward(sum(Tensor::zeros({2}))), GraphError);
  EXPECT_THROW(backward(sum(x.detach())), GraphError);
}

TEST(Backward, FanOutAccumulates) {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  backward(sum(add(mul(x, x), scale(x, 4.0))));
  EXPECT_EQ(x.grad()[0], 10.0);
}

TEST(Backward, ZeroGradRequiredBetweenSteps) {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  backward(sum(scale(x, 2.0)));
  backward(sum(scale(x, 2.0)));
  EXPECT_EQ(x.grad()[0], 4.0);
  x.zero_grad();
  backward(sum(scale(x, 2.0)));
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, NoGradGuardStopsRecording) {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Backward, ReorderedGraphGivesIdenticalGradients) {
  Rng rng(12);
  const Tensor w1 = random_tensor({4, 5}, rng), w2 = random_tensor({5, 3}, rng);
  const Tensor xin = random_tensor({2, 4}, rng);
  auto run = [&](bool reorder) {
    Tensor a = w1.detach(), b = w2.detach();
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    const Tensor h = relu(matmul(xin, a));
    const Tensor loss = sum(add(log_softmax(matmul(h, b), 1), scale(matmul(h, b), 0.5)));
    const Graph g = Graph::trace(loss);
    const Graph order = reorder ? g.kahn_order() : g;
    if (reorder) {
      bool differs = false;
      for (std::size_t i = 0; i < g.nodes().size(); ++i) differs |= g.nodes()[i] != order.nodes()[i];
      EXPECT_TRUE(differs);
    }
    order.backward();
    std::vector<double> out(a.grad().begin(), a.grad().end());
    out.insert(out.end(), b.grad().begin(), b.grad().end());
    return out;
  };
  const auto g1 = run(false), g2 = run(true);
  ASSERT_EQ(g1.size(), g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(g1[i], g2[i]);
}

TEST(Backward, ReorderRejectsNonTopologicalOrder) {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  const Graph g = Graph::trace(sum(mul(x, x)));
  std::vector<detail::Node*> rev(g.nodes().rbegin(), g.nodes().rend());
  EXPECT_THROW(g.reordered(rev), GraphError);
}

TEST(GradCheck, SumOfSquares) {
  Rng rng(1);
  const auto f = [](const Tensor& x) { return sum(mul(x, x)); };
  EXPECT_LT(grad_check(f, random_tensor({4, 3}, rng, true)).max_relative_error, 1e-8);
}

TEST(GradCheck, ConstantFunction) {
  Rng rng(1);
  const auto f = [](const Tensor& x) { return add(scale(sum(x), 0.0), Tensor::scalar(2.0)); };
  const auto r = grad_check(f, random_tensor({5}, rng, true));
  EXPECT_NEAR(r.analytic, 0.0, 1e-12);
  EXPECT_NEAR(r.numeric, 0.0, 1e-8);
}

TEST(LayerOps, ConvPoolAndNormGradients) {
  Rng rng(13);
  Tensor x = random_tensor({2, 2, 6, 5}, rng, true);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, true);
  Tensor b = random_tensor({3}, rng, true);
  Tensor gain = random_tensor({3}, rng, true, 0.5, 1.5), bias = random_tensor({3}, rng, true);
  const Tensor probe = random_tensor({2, 3}, rng);
  const std::vector<std::size_t> valid{2, 1};
  const auto f = [&] {
    Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
    Tensor h = conv2d(x, w, b, 2, 1);
    h = batch_norm2d(h, gain, bias, rm, rv, true);
    h = max_pool2d(h, 3, 2, 1);
    return sum(mul(masked_time_mean(h, valid), probe));
  };
  EXPECT_LT(grad_check(f, {x, w, b, gain, bias}).max_relative_error, 1e-4);
}

TEST(LayerOps, AttentionPathGradients) {
  Rng rng(14);
  Tensor q = random_tensor({2, 3, 4}, rng, true), k = random_tensor({2, 3, 4}, rng, true);
  Tensor table = random_tensor({6, 4}, rng, true);
  const std::vector<int> ids{1, 5, 2, 0, 3, 3};
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1};
  const Tensor probe = random_tensor({2, 4}, rng);
  const auto f = [&] {
    const Tensor e = embedding(table, ids, {2, 3});
    const Tensor heads = split_heads(add(q, e), 2);
    const Tensor att = softmax(bmm_nt(heads, split_heads(k, 2)), 2);
    const Tensor mixed = merge_heads(bmm(att, heads), 2);
    return sum(mul(masked_seq_mean(mixed, mask), probe));
  };
  EXPECT_LT(grad_check(f, {q, k, table}).max_relative_error, 1e-4);
}

TEST(LayerOps, NormalizeRowsAndSmoothedNll) {
  Rng rng(15);
  Tensor x = random_tensor({3, 5}, rng, true);
  const Tensor probe = random_tensor({3, 5}, rng);
  EXPECT_LT(grad_check([&](const Tensor& t) { return sum(mul(normalize_rows(t), probe)); }, x).max_relative_error,
            1e-4);
  Tensor logits = random_tensor({4, 6}, rng, true);
  const std::vector<int> targets{2, -1, 0, 5};
  EXPECT_LT(grad_check([&](const Tensor& t) { return smoothed_nll(log_softmax(t, 1), targets, 0.1); }, logits)
                .max_relative_error,
            1e-4);
}
