#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "gradtrace/calibration.hpp"
#include "gradtrace/model.hpp"

namespace fixtures {

inline gradtrace::ModelConfig tiny_config(std::size_t layers = 2, std::size_t kv_heads = 2,
                                          gradtrace::AttentionGranularity g = gradtrace::AttentionGranularity::head) {
  gradtrace::ModelConfig c;
  c.n_layers = layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_kv_heads = kv_heads;
  c.d_head = 8;
  c.d_ff = 32;
  c.vocab_size = 32;
  c.context_length = 16;
  c.rounding_multiple = 4;
  c.attn_granularity = g;
  return c;
}

inline gradtrace::CalibrationBatch random_batch(std::size_t n, std::size_t len, std::size_t vocab,
                                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> tok(0, std::int32_t(vocab) - 1);
  std::vector<std::vector<std::int32_t>> seqs(n, std::vector<std::int32_t>(len));
  for (auto& s : seqs)
    for (auto& t : s) t = tok(rng);
  return gradtrace::CalibrationBatch(std::move(seqs));
}

}  // namespace fixtures
