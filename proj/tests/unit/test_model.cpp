#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../common/fixtures.hpp"
#include "../common/reference.hpp"
#include "gradtrace/errors.hpp"
#include "gradtrace/masking.hpp"
#include "gradtrace/model.hpp"

using namespace gradtrace;

namespace {

std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> d(0, std::int32_t(vocab) - 1);
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

// Exhaustive count of the weight entries a mask set keeps, tensor by tensor.
std::size_t enumerate_kept(const ModelConfig& cfg, const WidthMaskSet& masks) {
  const std::size_t d = cfg.d_model;
  std::size_t total = cfg.vocab_size * d + d;
  const bool head_mode = masks.granularity == AttentionGranularity::head;
  for (const auto& bm : masks.blocks) {
    if (!bm) continue;
    total += 2 * d;
    auto attn_kept = [&](std::size_t channel) {
      return bool(bm->attn[head_mode ? channel / cfg.d_head : channel]);
    };
    for (std::size_t row = 0; row < cfg.attn_width(); ++row)
      for (std::size_t col = 0; col < d; ++col) total += attn_kept(row);  // W_q
    for (std::size_t row = 0; row < cfg.kv_width(); ++row)
      for (std::size_t col = 0; col < d; ++col) total += cfg.grouped_query() ? 2 : 2 * attn_kept(row);  // W_k, W_v
    for (std::size_t row = 0; row < d; ++row)
      for (std::size_t col = 0; col < cfg.attn_width(); ++col) total += attn_kept(col);  // W_o
    for (std::size_t row = 0; row < cfg.d_ff; ++row)
      for (std::size_t col = 0; col < d; ++col) total += 2 * bm->mlp[row];  // W_up, W_gate
    for (std::size_t row = 0; row < d; ++row)
      for (std::size_t col = 0; col < cfg.d_ff; ++col) total += bm->mlp[col];  // W_down
  }
  return total;
}

ModelConfig toy_count_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_kv_heads = 2;
  c.d_head = 4;
  c.d_ff = 16;
  c.vocab_size = 32;
  c.context_length = 8;
  c.rounding_multiple = 4;
  return c;
}

}  // namespace

TEST(ModelConfig, RejectsInconsistentDimensions) {
  auto c = fixtures::tiny_config();
  c.d_model = 15;
  EXPECT_THROW(c.validate(), ConfigError);
  c = fixtures::tiny_config();
  c.n_kv_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = fixtures::tiny_config();
  c.d_ff = 30;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Forward, RejectsOutOfVocabularyToken) {
  auto net = SuperNetwork::random(fixtures::tiny_config(), 1);
  std::vector<std::int32_t> tokens{1, 2, 32};
  EXPECT_THROW(forward(net, tokens), InputError);
}

TEST(Forward, RejectsSequenceBeyondContext) {
  auto net = SuperNetwork::random(fixtures::tiny_config(), 1);
  EXPECT_THROW(forward(net, random_tokens(17, 32, 1)), InputError);
}

TEST(Forward, AllBlocksInactiveReducesToEmbeddingPipeline) {
  auto net = SuperNetwork::random(fixtures::tiny_config(3), 2);
  std::fill(net.block_active.begin(), net.block_active.end(), 0);
  const auto tokens = random_tokens(12, 32, 3);
  ad::Tape tape(false);
  Tensor expected = ad::linear(tape, ad::rmsnorm_rows(tape, ad::embedding(tape, net.embedding, tokens), net.final_norm),
                               net.embedding);
  EXPECT_TRUE(bit_equal(forward(net, tokens), expected));
}

TEST(Forward, InactiveBlockIsExactBypass) {
  const auto cfg = fixtures::tiny_config(3);
  auto net = SuperNetwork::random(cfg, 4);
  net.block_active[1] = 0;

  auto short_cfg = cfg;
  short_cfg.n_layers = 2;
  SuperNetwork shorter(short_cfg);
  shorter.embedding = net.embedding;
  shorter.final_norm = net.final_norm;
  shorter.blocks = {net.blocks[0], net.blocks[2]};

  const auto tokens = random_tokens(16, 32, 5);
  EXPECT_TRUE(bit_equal(forward(net, tokens), forward(shorter, tokens)));
}

TEST(Forward, AllOnesMasksLeaveLogitsBitIdentical) {
  for (auto g : {AttentionGranularity::head, AttentionGranularity::channel}) {
    const auto cfg = fixtures::tiny_config(2, 2, g);
    auto net = SuperNetwork::random(cfg, 6);
    const auto tokens = random_tokens(16, 32, 7);
    const Tensor pristine = forward(net, tokens);
    const auto stats = collect_activation_stats(net, fixtures::random_batch(2, 9, 32, 8));
    const auto enc = ArchEncoding::identity(cfg.n_layers);
    const auto masks = realize_masks(enc, compute_saliency(net, stats), cfg);
    ScopedApply applied(net, enc, masks);
    EXPECT_TRUE(bit_equal(forward(net, tokens), pristine));
  }
}

TEST(Forward, MatchesDoubleReferenceWithAdapters) {
  for (std::size_t kv : {2u, 1u}) {
    auto net = SuperNetwork::random(fixtures::tiny_config(2, kv), 9);
    net.attach_adapters(4, 10);
    // Larger adapters so their contribution is visible in the comparison.
    std::mt19937_64 rng(11);
    for (auto& b : net.blocks)
      for (auto& p : b.proj) {
        p.adapter->a = reference::random_tensor(p.adapter->a.shape(), rng, 0.2);
        p.adapter->b = reference::random_tensor(p.adapter->b.shape(), rng, 0.2);
      }
    const auto batch = fixtures::random_batch(2, 9, 32, 12);
    const std::vector<std::int32_t> ids(batch.inputs().begin(), batch.inputs().end());
    const std::vector<std::int32_t> targets(batch.targets().begin(), batch.targets().end());
    ad::Tape tape(false);
    const double got = ad::cross_entropy_mean(tape, forward(net, tape, ids, 8), targets).item();
    const double expected = reference::model_loss(reference::from_network(net), ids, targets, 8);
    EXPECT_NEAR(got, expected, 1e-5 * std::abs(expected)) << "kv heads " << kv;
  }
}

TEST(Forward, AdapterGradientMatchesFiniteDifferences) {
  auto net = SuperNetwork::random(fixtures::tiny_config(2), 13);
  net.attach_adapters(2, 14);
  std::mt19937_64 rng(15);
  for (auto& b : net.blocks)
    for (auto& p : b.proj) {
      p.adapter->a = reference::random_tensor(p.adapter->a.shape(), rng, 0.3);
      p.adapter->b = reference::random_tensor(p.adapter->b.shape(), rng, 0.3);
    }
  const auto batch = fixtures::random_batch(2, 9, 32, 16);
  const std::vector<std::int32_t> ids(batch.inputs().begin(), batch.inputs().end());
  const std::vector<std::int32_t> targets(batch.targets().begin(), batch.targets().end());
  const auto check = reference::check_model_adapters(net, ids, targets, 8, 10, rng);
  EXPECT_LE(check.rel_error, 1e-4);
}

TEST(Forward, BackwardReachesAdaptersOnly) {
  auto net = SuperNetwork::random(fixtures::tiny_config(2), 17);
  net.attach_adapters(2, 18);
  const auto batch = fixtures::random_batch(2, 9, 32, 19);
  ad::Tape tape;
  Tensor loss = ad::cross_entropy_mean(tape, forward(net, tape, batch.inputs(), 8), batch.targets());
  tape.backward(loss);
  for (const auto& [name, w] : net.named_weights()) EXPECT_FALSE(w.has_grad()) << name;
  for (const auto& b : net.blocks)
    for (const auto& p : b.proj) {
      for (const Tensor* t : {&p.adapter->a, &p.adapter->b}) {
        ASSERT_TRUE(t->has_grad());
        const auto g = t->grad();
        EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](float v) { return v != 0.0f; }));
      }
    }
}

TEST(ActivationStats, ChannelNorms) {
  const Tensor constant({9, 2}, std::vector<float>{2, 0, 2, 0, 2, 0, 2, 0, 2, 0, 2, 0, 2, 0, 2, 0, 2, 0});
  const auto c = channel_l2_norms(constant);
  EXPECT_NEAR(c[0], 2.0 * 3.0, 1e-12);
  EXPECT_EQ(c[1], 0.0);

  const auto hand = channel_l2_norms(Tensor({2, 2}, std::vector<float>{3, 0, 4, 0}));
  EXPECT_EQ(hand, (std::vector<double>{5.0, 0.0}));
}

TEST(ActivationStats, ZeroActivationsGiveZeroNorms) {
  auto net = SuperNetwork::random(fixtures::tiny_config(2), 20);
  for (auto& b : net.blocks) {
    for (auto& x : b[ProjKind::wv].weight.data()) x = 0.0f;
    for (auto& x : b[ProjKind::wup].weight.data()) x = 0.0f;
  }
  const auto stats = collect_activation_stats(net, fixtures::random_batch(3, 9, 32, 21));
  EXPECT_EQ(stats.token_count, 24u);
  for (std::size_t l = 0; l < 2; ++l) {
    for (double v : stats.attn_input_norms[l]) EXPECT_EQ(v, 0.0);
    for (double v : stats.mlp_input_norms[l]) EXPECT_EQ(v, 0.0);
  }
}

TEST(ActivationStats, EmptyBatchIsRejected) {
  auto net = SuperNetwork::random(fixtures::tiny_config(2), 22);
  EXPECT_THROW(collect_activation_stats(net, CalibrationBatch{}), InputError);
}

TEST(Adapters, SameSeedIsBitIdentical) {
  const auto cfg = fixtures::tiny_config(2);
  auto a = SuperNetwork::random(cfg, 1), b = SuperNetwork::random(cfg, 1);
  a.attach_adapters(4, 99);
  b.attach_adapters(4, 99);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t k = 0; k < kNumProjections; ++k) {
      EXPECT_TRUE(bit_equal(a.blocks[l].proj[k].adapter->a, b.blocks[l].proj[k].adapter->a));
      EXPECT_TRUE(bit_equal(a.blocks[l].proj[k].adapter->b, b.blocks[l].proj[k].adapter->b));
    }
}

TEST(Adapters, ParameterCountPerProjection) {
  auto net = SuperNetwork::random(fixtures::tiny_config(2, 1), 2);
  const std::size_t r = 3;
  net.attach_adapters(r, 5);
  for (const auto& b : net.blocks)
    for (const auto& p : b.proj) {
      const auto d_out = p.weight.dim(0), d_in = p.weight.dim(1);
      EXPECT_EQ(p.adapter->a.numel() + p.adapter->b.numel(), r * (d_in + d_out));
    }
}

TEST(Adapters, DoubleAttachIsAStateError) {
  auto net = SuperNetwork::random(fixtures::tiny_config(2), 3);
  net.attach_adapters(2, 1);
  EXPECT_THROW(net.attach_adapters(2, 1), StateError);
}

TEST(Adapters, AttachFreezesBaseWeights) {
  auto net = SuperNetwork::random(fixtures::tiny_config(2), 3);
  net.attach_adapters(2, 1);
  for (const auto& [name, w] : net.named_weights()) EXPECT_FALSE(w.requires_grad()) << name;
}

// E||BAx||^2 = sigma^4 r d_out ||x||^2 for independent Gaussian A, B.
TEST(Adapters, InitialContributionIsSmall) {
  auto net = SuperNetwork::random(fixtures::tiny_config(2), 4);
  const std::size_t r = 8;
  net.attach_adapters(r, 6);
  std::mt19937_64 rng(7);
  for (const auto& b : net.blocks)
    for (const auto& p : b.proj) {
      const auto d_in = p.weight.dim(1), d_out = p.weight.dim(0);
      const double bound = 0.01 * 0.01 * std::sqrt(double(r * d_out));
      double mean_ratio = 0.0;
      for (int trial = 0; trial < 50; ++trial) {
        Tensor x = reference::random_tensor({1, d_in}, rng, 1.0, false);
        ad::Tape tape(false);
        Tensor y = ad::linear(tape, ad::linear(tape, x, p.adapter->a), p.adapter->b);
        double ny = 0, nx = 0;
        for (float v : y.data()) ny += double(v) * v;
        for (float v : x.data()) nx += double(v) * v;
        mean_ratio += std::sqrt(ny / nx) / 50.0;
      }
      EXPECT_LE(mean_ratio, 3.0 * bound);
    }
}

TEST(ParameterCount, IdentityEncodingIsDenseSize) {
  const auto cfg = fixtures::tiny_config(2);
  auto net = SuperNetwork::random(cfg, 1);
  std::size_t dense = 0;
  for (const auto& [name, w] : net.named_weights()) dense += w.numel();
  EXPECT_EQ(parameter_count(cfg, ArchEncoding::identity(2)), dense);
  EXPECT_EQ(dense_parameter_count(cfg), dense);
}

TEST(ParameterCount, AllBlocksDroppedLeavesEmbeddingAndFinalNorm) {
  const auto cfg = fixtures::tiny_config(3);
  auto enc = ArchEncoding::identity(3);
  std::fill(enc.depth.begin(), enc.depth.end(), 0);
  EXPECT_EQ(parameter_count(cfg, enc), cfg.vocab_size * cfg.d_model + cfg.d_model);
}

TEST(ParameterCount, ToyConfigMatchesEnumeration) {
  const auto cfg = toy_count_config();
  auto net = SuperNetwork::random(cfg, 3);
  const auto sal = compute_saliency(net, collect_activation_stats(net, fixtures::random_batch(2, 8, 32, 4)));
  auto enc = ArchEncoding::identity(2);
  enc.width[0].mlp = 0.5;
  EXPECT_EQ(parameter_count(cfg, enc), enumerate_kept(cfg, realize_masks(enc, sal, cfg)));
}

TEST(ParameterCount, RandomEncodingsMatchEnumerationAndNonzeroCount) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ratio(0.05, 1.0);
  for (auto g : {AttentionGranularity::head, AttentionGranularity::channel})
    for (std::size_t kv : {2u, 1u}) {
      const auto cfg = fixtures::tiny_config(3, kv, g);
      auto net = SuperNetwork::random(cfg, 6);
      const auto sal = compute_saliency(net, collect_activation_stats(net, fixtures::random_batch(2, 9, 32, 7)));
      for (int trial = 0; trial < 20; ++trial) {
        ArchEncoding enc = ArchEncoding::identity(3);
        for (std::size_t l = 0; l < 3; ++l) {
          enc.depth[l] = std::bernoulli_distribution(0.7)(rng);
          enc.width[l] = {ratio(rng), ratio(rng)};
        }
        const auto masks = realize_masks(enc, sal, cfg);
        const auto expected = parameter_count(cfg, enc);
        EXPECT_EQ(expected, enumerate_kept(cfg, masks));
        ScopedApply applied(net, enc, masks);
        EXPECT_EQ(expected, nonzero_parameter_count(net));
      }
    }
}

TEST(Checksum, DetectsSingleWeightChange) {
  auto net = SuperNetwork::random(fixtures::tiny_config(2), 1);
  const auto before = weight_checksum(net);
  net.blocks[1][ProjKind::wdown].weight.data()[3] += 1e-3f;
  EXPECT_NE(before, weight_checksum(net));
}

TEST(Clone, IsIndependentAndBitIdentical) {
  auto net = SuperNetwork::random(fixtures::tiny_config(2), 1);
  auto copy = net.clone();
  EXPECT_EQ(weight_checksum(net), weight_checksum(copy));
  copy.embedding.data()[0] += 1.0f;
  EXPECT_NE(weight_checksum(net), weight_checksum(copy));
}
