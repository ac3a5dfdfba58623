#include <gtest/gtest.h>

#include <cmath>

#include "caac/contrastive.hpp"
#include "caac/grad_check.hpp"
#include "support.hpp"

using namespace caac;
using caac::testing::random_tensor;

namespace {

// Per-pair loop over the raw rows.
std::vector<double> cosine_oracle(const Tensor& a, const Tensor& t) {
  const std::size_t b = a.dim(0), l = a.dim(1);
  std::vector<double> s(b * b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < b; ++k) {
      double dot = 0, na = 0, nt = 0;
      for (std::size_t j = 0; j < l; ++j) {
        dot += a.at(i * l + j) * t.at(k * l + j);
        na += a.at(i * l + j) * a.at(i * l + j);
        nt += t.at(k * l + j) * t.at(k * l + j);
      }
      s[i * b + k] = dot / (std::sqrt(na) * std::sqrt(nt));
    }
  return s;
}

// Direct transcription: per-row and per-column cross-entropy terms.
double loss_oracle(const std::vector<double>& s, std::size_t b, double t, double lambda) {
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double row = 0.0, col = 0.0;
    for (std::size_t k = 0; k < b; ++k) {
      row += std::exp(s[i * b + k] / t);
      col += std::exp(s[k * b + i] / t);
    }
    const double l_at = -std::log(std::exp(s[i * b + i] / t) / row);
    const double l_ta = -std::log(std::exp(s[i * b + i] / t) / col);
    total += lambda * l_at + (1.0 - lambda) * l_ta;
  }
  return total / static_cast<double>(b);
}

Tensor square(std::size_t b, Rng& rng) { return random_tensor({b, b}, rng, false, -1, 1); }

}  // namespace

TEST(Cosine, SelfSimilarityIsOne) {
  Rng rng(1);
  const Tensor a = random_tensor({5, 8}, rng);
  const Tensor s = cosine_similarity_matrix(a, a);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(s.at(i * 5 + i), 1.0, 1e-12);
}

TEST(Cosine, OrthogonalRows) {
  const Tensor a = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  const Tensor t = Tensor::from_data({2, 2}, {0, 1, 1, 0});
  const Tensor s = cosine_similarity_matrix(a, t);
  const std::vector<double> want{0, 1, 1, 0};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(s.at(i), want[i]);
}

TEST(Cosine, MatchesPairLoop) {
  Rng rng(2);
  const Tensor a = random_tensor({4, 8}, rng), t = random_tensor({4, 8}, rng);
  const Tensor s = cosine_similarity_matrix(a, t);
  const auto o = cosine_oracle(a, t);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_NEAR(s.at(i), o[i], 1e-12);
    EXPECT_LE(std::abs(s.at(i)), 1.0 + 1e-9);
  }
}

TEST(Cosine, Errors) {
  Rng rng(3);
  Tensor a = random_tensor({3, 4}, rng);
  EXPECT_THROW(cosine_similarity_matrix(a, random_tensor({3, 5}, rng)), ShapeError);
  EXPECT_THROW(cosine_similarity_matrix(a, random_tensor({2, 4}, rng)), ShapeError);
  std::vector<double> v(a.data().begin(), a.data().end());
  std::fill(v.begin(), v.begin() + 4, 0.0);
  EXPECT_THROW(cosine_similarity_matrix(Tensor::from_data({3, 4}, v), a), NumericError);
}

TEST(Cosine, RowScalingInvariance) {
  Rng rng(4);
  const Tensor a = random_tensor({4, 6}, rng), t = random_tensor({4, 6}, rng);
  std::vector<double> v(a.data().begin(), a.data().end());
  for (std::size_t j = 0; j < 6; ++j) v[6 + j] *= 17.5;
  const Tensor s1 = cosine_similarity_matrix(a, t), s2 = cosine_similarity_matrix(Tensor::from_data({4, 6}, v), t);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(s1.at(i), s2.at(i), 1e-9);
  EXPECT_NEAR(contrastive_loss(s1, {}).item(), contrastive_loss(s2, {}).item(), 1e-9);
}

TEST(ContrastiveLoss, SingletonIsZero) {
  EXPECT_EQ(contrastive_loss(Tensor::from_data({1, 1}, {0.3}), {}).item(), 0.0);
}

TEST(ContrastiveLoss, UniformGivesLogB) {
  for (double t : {0.07, 1.0, 3.0})
    for (double lambda : {0.0, 0.3, 0.5, 1.0}) {
      const double loss = contrastive_loss(Tensor::full({8, 8}, 0.4), {t, lambda}).item();
      EXPECT_NEAR(loss, std::log(8.0), 1e-9);
      EXPECT_NEAR(loss, 2.0794415, 1e-7);
    }
}

TEST(ContrastiveLoss, DefaultLambdaIsHalf) {
  EXPECT_EQ(ContrastiveConfig{}.lambda, 0.5);
  EXPECT_EQ(ContrastiveConfig{}.temperature, 0.07);
}

TEST(ContrastiveLoss, MatchesScalarTranscription) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t b = 2 + rng.index(6);
    const double lambda = rng.uniform();
    const Tensor s = square(b, rng);
    const std::vector<double> sv(s.data().begin(), s.data().end());
    EXPECT_NEAR(contrastive_loss(s, {0.07, lambda}).item(), loss_oracle(sv, b, 0.07, lambda), 1e-12);
  }
  const Tensor s4 = square(4, rng);
  EXPECT_NEAR(contrastive_loss(s4, {0.07, 0.5}).item(),
              loss_oracle(std::vector<double>(s4.data().begin(), s4.data().end()), 4, 0.07, 0.5), 1e-12);
}

TEST(ContrastiveLoss, TransposeSwapsLambda) {
  Rng rng(6);
  for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const Tensor s = square(6, rng);
    EXPECT_EQ(contrastive_loss(s, {0.07, lambda}).item(), contrastive_loss(transpose(s), {0.07, 1.0 - lambda}).item());
  }
}

TEST(ContrastiveLoss, PermutationEquivariance) {
  Rng rng(7);
  const Tensor a = random_tensor({6, 8}, rng), t = random_tensor({6, 8}, rng);
  const auto perm = rng.permutation(6);
  std::vector<double> pa, pt;
  for (std::size_t i : perm) {
    pa.insert(pa.end(), a.data().begin() + i * 8, a.data().begin() + (i + 1) * 8);
    pt.insert(pt.end(), t.data().begin() + i * 8, t.data().begin() + (i + 1) * 8);
  }
  const double l1 = contrastive_loss(cosine_similarity_matrix(a, t), {}).item();
  const double l2 =
      contrastive_loss(cosine_similarity_matrix(Tensor::from_data({6, 8}, pa), Tensor::from_data({6, 8}, pt)), {})
          .item();
  EXPECT_NEAR(l1, l2, 1e-12);
}

TEST(ContrastiveLoss, RaisingDiagonalLowersLoss) {
  Rng rng(8);
  const Tensor s = square(5, rng);
  std::vector<double> v(s.data().begin(), s.data().end());
  double prev = contrastive_loss(s, {}).item();
  for (int step = 0; step < 5; ++step) {
    for (std::size_t i = 0; i < 5; ++i) v[i * 5 + i] += 0.01;
    const double cur = contrastive_loss(Tensor::from_data({5, 5}, v), {}).item();
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(ContrastiveLoss, Errors) {
  EXPECT_THROW(contrastive_loss(Tensor::zeros({2, 3}), {}), ShapeError);
  EXPECT_THROW(contrastive_loss(Tensor::zeros({2, 2}), {0.0, 0.5}), std::invalid_argument);
  EXPECT_THROW(contrastive_loss(Tensor::zeros({2, 2}), {-1.0, 0.5}), std::invalid_argument);
  EXPECT_THROW(contrastive_loss(Tensor::zeros({2, 2}), {0.07, 1.5}), std::invalid_argument);
}

TEST(ContrastiveLoss, GradientThroughEmbeddings) {
  Rng rng(9);
  Tensor a = random_tensor({4, 8}, rng, true), t = random_tensor({4, 8}, rng, true);
  const auto f = [&] { return contrastive_loss(cosine_similarity_matrix(a, t), {}); };
  EXPECT_LT(grad_check(f, {a, t}).max_relative_error, 1e-4);
}

TEST(DiagonalDominance, UniformIsOneOverB) {
  EXPECT_NEAR(diagonal_dominance(Tensor::full({8, 8}, 0.2), 0.07), 0.125, 1e-15);
}

TEST(DiagonalDominance, StrongDiagonalNearOne) {
  std::vector<double> v(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) v[i * 4 + i] = 1.0;
  EXPECT_GT(diagonal_dominance(Tensor::from_data({4, 4}, v), 0.01), 1.0 - 1e-12);
}

TEST(DiagonalDominance, RowSoftmaxRowsSumToOne) {
  Rng rng(10);
  const auto p = row_softmax(square(5, rng), 0.07);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 5; ++k) s += p[i * 5 + k];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}
