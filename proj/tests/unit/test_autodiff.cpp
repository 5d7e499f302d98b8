#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../common/reference.hpp"
#include "gradtrace/autodiff.hpp"
#include "gradtrace/errors.hpp"

using namespace gradtrace;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Tensor, ConstructionAndShape) {
  Tensor t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
}

TEST(Tensor, CloneIsDeep) {
  Tensor a({2}, std::vector<float>{1, 2});
  Tensor b = a.clone();
  b.data()[0] = 9;
  EXPECT_EQ(a.data()[0], 1.0f);
  EXPECT_FALSE(a.same_storage(b));
}

TEST(Autodiff, MatmulIdentity) {
  ad::Tape tape;
  Tensor i({2, 2}, std::vector<float>{1, 0, 0, 1});
  Tensor m({2, 2}, std::vector<float>{3, 4, 5, 6});
  EXPECT_EQ(values(ad::matmul(tape, i, m)), (std::vector<float>{3, 4, 5, 6}));
}

TEST(Autodiff, MatmulRowByColumn) {
  ad::Tape tape;
  Tensor a({1, 2}, std::vector<float>{1, 2});
  Tensor b({2, 1}, std::vector<float>{3, 4});
  EXPECT_EQ(values(ad::matmul(tape, a, b)), (std::vector<float>{11}));
}

TEST(Autodiff, MatmulShapeMismatchThrows) {
  ad::Tape tape;
  EXPECT_THROW(ad::matmul(tape, Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Autodiff, SoftmaxOfEqualLogitsIsUniform) {
  ad::Tape tape;
  auto out = values(ad::softmax_rows(tape, Tensor({1, 2}, std::vector<float>{0, 0})));
  EXPECT_FLOAT_EQ(out[0], 0.5f);
  EXPECT_FLOAT_EQ(out[1], 0.5f);
}

TEST(Autodiff, SiluAtZero) {
  ad::Tape tape;
  EXPECT_EQ(values(ad::silu(tape, Tensor({1, 1}, std::vector<float>{0})))[0], 0.0f);
}

TEST(Autodiff, CrossEntropyOfUniformLogits) {
  ad::Tape tape;
  Tensor logits({2, 4}, std::vector<float>(8, 0.3f));
  std::vector<std::int32_t> targets{1, 3};
  EXPECT_NEAR(ad::cross_entropy_mean(tape, logits, targets).item(), std::log(4.0), 1e-6);
}

TEST(Autodiff, CrossEntropyVanishesWithMargin) {
  double previous = 1e9;
  for (float margin : {1.0f, 5.0f, 20.0f, 60.0f}) {
    ad::Tape tape;
    Tensor logits({1, 4}, std::vector<float>{margin, 0, 0, 0});
    const double loss = ad::cross_entropy_mean(tape, logits, std::vector<std::int32_t>{0}).item();
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-12);
}

TEST(Autodiff, CrossEntropyMatchesDirectLogSumExp) {
  std::mt19937_64 rng(5);
  Tensor logits = reference::random_tensor({8, 16}, rng, 3.0, false);
  std::vector<std::int32_t> targets(8);
  for (std::size_t i = 0; i < 8; ++i) targets[i] = std::int32_t((i * 5) % 16);
  ad::Tape tape;
  const double got = ad::cross_entropy_mean(tape, logits, targets).item();
  double expected = 0.0;
  const auto v = logits.data();
  for (std::size_t r = 0; r < 8; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 16; ++c) sum += std::exp(double(v[r * 16 + c]));
    expected += std::log(sum) - v[r * 16 + std::size_t(targets[r])];
  }
  EXPECT_NEAR(got, expected / 8.0, 1e-6);
}

TEST(Autodiff, CrossEntropyRejectsOutOfRangeTarget) {
  ad::Tape tape;
  EXPECT_THROW(ad::cross_entropy_mean(tape, Tensor({1, 4}), std::vector<std::int32_t>{4}), InputError);
}

TEST(Autodiff, EmbeddingRejectsOutOfRangeId) {
  ad::Tape tape;
  EXPECT_THROW(ad::embedding(tape, Tensor({4, 2}), std::vector<std::int32_t>{0, 4}), InputError);
}

TEST(Autodiff, BackwardNeedsScalarLoss) {
  ad::Tape tape;
  Tensor x({2, 2}, std::vector<float>{1, 2, 3, 4}, true);
  Tensor y = ad::scale(tape, x, 2.0f);
  EXPECT_THROW(tape.backward(y), InputError);
}

TEST(Autodiff, BackwardNeedsRecordedLoss) {
  ad::Tape tape;
  Tensor loss = Tensor::scalar(1.0f);
  EXPECT_THROW(tape.backward(loss), StateError);
}

TEST(Autodiff, LeafGradientsAccumulateAcrossBackwardCalls) {
  Tensor x({1, 1}, std::vector<float>{3}, true);
  for (int i = 0; i < 2; ++i) {
    ad::Tape tape;
    Tensor y = ad::mul(tape, x, x);
    tape.backward(y);
  }
  EXPECT_FLOAT_EQ(std::as_const(x).grad()[0], 12.0f);
}

TEST(Autodiff, UntrackedOpsAreNotRecorded) {
  ad::Tape tape;
  Tensor a({2, 2}), b({2, 2});
  ad::add(tape, a, b);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Autodiff, RandomMatmulGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  reference::GradCase c{"matmul",
                        {reference::random_tensor({3, 3}, rng), reference::random_tensor({3, 3}, rng)},
                        [](ad::Tape& t, const std::vector<Tensor>& in) { return ad::matmul(t, in[0], in[1]); },
                        [](const std::vector<reference::Mat>& in) { return reference::matmul(in[0], in[1]); }};
  EXPECT_LE(reference::check_case(c, rng).rel_error, 1e-4);
}

// A few random instances per op; the acceptance suite runs 100.
TEST(Autodiff, EveryOpMatchesFiniteDifferences) {
  std::mt19937_64 rng(2024);
  for (int instance = 0; instance < 5; ++instance) {
    for (auto& c : reference::make_op_cases(rng)) {
      const auto r = reference::check_case(c, rng);
      EXPECT_LE(r.rel_error, 1e-4) << c.name << " instance " << instance;
      EXPECT_GT(r.coordinates, 0u) << c.name;
    }
  }
}

TEST(Autodiff, RopeAtPositionZeroIsIdentity) {
  ad::Tape tape;
  Tensor x({1, 8}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8});
  EXPECT_EQ(values(ad::rope(tape, x, 1, 2)), values(x));
}

TEST(Autodiff, RopePreservesPairNorms) {
  std::mt19937_64 rng(3);
  Tensor x = reference::random_tensor({6, 8}, rng, 1.0, false);
  ad::Tape tape;
  Tensor y = ad::rope(tape, x, 6, 1);
  const auto xv = x.data(), yv = y.data();
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t i = 0; i < 4; ++i) {
      const double nx = std::hypot(xv[r * 8 + i], xv[r * 8 + i + 4]);
      const double ny = std::hypot(yv[r * 8 + i], yv[r * 8 + i + 4]);
      EXPECT_NEAR(nx, ny, 1e-5);
    }
}

TEST(Autodiff, AttentionFirstPositionCopiesValue) {
  std::mt19937_64 rng(4);
  Tensor q = reference::random_tensor({3, 4}, rng, 1.0, false);
  Tensor k = reference::random_tensor({3, 4}, rng, 1.0, false);
  Tensor v = reference::random_tensor({3, 4}, rng, 1.0, false);
  ad::Tape tape;
  Tensor o = ad::causal_attention(tape, q, k, v, {3, 1, 1, 4});
  for (std::size_t c = 0; c < 4; ++c) EXPECT_FLOAT_EQ(o.data()[c], v.data()[c]);
}
