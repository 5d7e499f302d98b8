#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradtrace/autodiff.hpp"
#include "gradtrace/encoding.hpp"
#include "gradtrace/tensor.hpp"

namespace gradtrace {

enum class AttentionGranularity : std::uint32_t { head = 0, channel = 1 };

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 4;
  std::size_t d_head = 32;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 256;
  std::size_t context_length = 128;
  std::size_t rounding_multiple = 4;
  AttentionGranularity attn_granularity = AttentionGranularity::head;

  bool grouped_query() const { return n_kv_heads < n_heads; }
  std::size_t attn_width() const { return n_heads * d_head; }
  std::size_t kv_width() const { return n_kv_heads * d_head; }

  // Throws ConfigError on inconsistent dimensions.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ProjKind : std::size_t { wq = 0, wk, wv, wo, wup, wgate, wdown };
inline constexpr std::size_t kNumProjections = 7;
inline constexpr std::array<ProjKind, 4> kAttnProjections{ProjKind::wq, ProjKind::wk, ProjKind::wv, ProjKind::wo};
inline constexpr std::array<ProjKind, 3> kMlpProjections{ProjKind::wup, ProjKind::wgate, ProjKind::wdown};

const char* proj_name(ProjKind kind);
bool is_attn_projection(ProjKind kind);

// Low-rank adapter: contributes b . (a . x) on top of the frozen weight.
struct Adapter {
  Tensor a;  // [rank x d_in]
  Tensor b;  // [d_out x rank]
};

struct Projection {
  Tensor weight;  // [d_out x d_in]
  std::optional<Adapter> adapter;
};

struct Block {
  Tensor attn_norm;  // [d_model]
  Tensor mlp_norm;   // [d_model]
  std::array<Projection, kNumProjections> proj;

  Projection& operator[](ProjKind kind) { return proj[static_cast<std::size_t>(kind)]; }
  const Projection& operator[](ProjKind kind) const { return proj[static_cast<std::size_t>(kind)]; }
};

// Multiplicative 0/1 gates on the inputs of W_o and W_down. Gating the
// activation (not only the weight) keeps adapter paths from leaking through
// pruned heads and channels.
struct ChannelGates {
  std::vector<std::vector<float>> attn;  // per block, [n_heads * d_head] or empty
  std::vector<std::vector<float>> mlp;   // per block, [d_ff] or empty
};

// Pre-norm decoder-only transformer with RMS norms, rotary attention, a
// SiLU-gated MLP and tied input/output embeddings. Every block can be
// bypassed, every projection can carry an adapter, and the mask-realization
// layer installs channel gates while a candidate is applied.
//
// Tensor members are handles; use clone() to obtain an independent replica.
class SuperNetwork {
 public:
  SuperNetwork() = default;
  explicit SuperNetwork(ModelConfig cfg);

  static SuperNetwork random(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  Tensor embedding;   // [V x d_model], also the output projection
  Tensor final_norm;  // [d_model]
  std::vector<Block> blocks;
  std::vector<std::uint8_t> block_active;
  std::optional<ChannelGates> gates;

  SuperNetwork clone() const;

  // Adapters on all seven projections of every block, A and B ~ N(0, 0.01^2)
  // from a generator seeded by `seed`.
  void attach_adapters(std::size_t rank, std::uint64_t seed);
  void detach_adapters();
  bool has_adapters() const { return adapter_rank_ > 0; }
  std::size_t adapter_rank() const { return adapter_rank_; }
  std::uint64_t adapter_seed() const { return adapter_seed_; }
  void zero_adapter_grads();

  // Base (non-adapter) tensors in canonical order with their names.
  std::vector<std::pair<std::string, Tensor>> named_weights() const;
  std::vector<Tensor> base_weights() const;
  void set_base_trainable(bool trainable);

  // Exclusive-access marker for in-place masking; see masking.hpp.
  std::optional<std::uint64_t> outstanding_restore;
  std::uint64_t instance_id() const { return instance_id_; }

 private:
  ModelConfig cfg_;
  std::size_t adapter_rank_ = 0;
  std::uint64_t adapter_seed_ = 0;
  std::uint64_t instance_id_ = 0;
};

// Inputs of W_o and W_down for every active block, captured during forward.
struct ForwardTaps {
  std::vector<Tensor> attn_out;  // per block, undefined when inactive
  std::vector<Tensor> mlp_hidden;
};

// Logits [(n_seq*seq_len) x V] for `ids`, a concatenation of sequences of
// seq_len tokens each.
Tensor forward(const SuperNetwork& net, ad::Tape& tape, std::span<const std::int32_t> ids, std::size_t seq_len,
               ForwardTaps* taps = nullptr);

// Single-sequence, no-gradient convenience.
Tensor forward(const SuperNetwork& net, std::span<const std::int32_t> tokens);

// Per-channel L2 norms of the inputs of W_o and W_down over calibration tokens.
struct ActivationStats {
  std::vector<std::vector<double>> attn_input_norms;  // per block, [n_heads * d_head]
  std::vector<std::vector<double>> mlp_input_norms;   // per block, [d_ff]
  std::size_t token_count = 0;
};

// Column-wise L2 norms of a [tokens x channels] activation matrix.
std::vector<double> channel_l2_norms(const Tensor& activations);

class CalibrationBatch;
ActivationStats collect_activation_stats(const SuperNetwork& net, const CalibrationBatch& calib);

std::size_t dense_parameter_count(const ModelConfig& cfg);
std::size_t parameter_count(const ModelConfig& cfg, const ArchEncoding& enc);
inline std::size_t parameter_count(const SuperNetwork& net, const ArchEncoding& enc) {
  return parameter_count(net.config(), enc);
}

// FNV-1a over the bytes of every base weight in canonical order.
std::uint64_t weight_checksum(const SuperNetwork& net);

}  // namespace gradtrace
