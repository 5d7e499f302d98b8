#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gradtrace/encoding.hpp"
#include "gradtrace/model.hpp"

namespace gradtrace {

// Activation-weighted saliency: channel j of a consolidating projection W
// (W_o for attention, W_down for the MLP) scores sum_i |W[i,j]| * ||X_j||_2.
struct SaliencyScores {
  std::vector<std::vector<double>> attn_channel;  // per block, [n_heads * d_head]
  std::vector<std::vector<double>> attn_head;     // per block, [n_heads]
  std::vector<std::vector<double>> mlp_channel;   // per block, [d_ff]
};

SaliencyScores compute_saliency(const SuperNetwork& net, const ActivationStats& stats);

// Retained units of one active block. `attn` is per head in head mode and per
// W_o input channel in channel mode.
struct BlockMask {
  std::vector<std::uint8_t> attn;
  std::vector<std::uint8_t> mlp;

  friend bool operator==(const BlockMask&, const BlockMask&) = default;
};

struct WidthMaskSet {
  AttentionGranularity granularity = AttentionGranularity::head;
  std::vector<std::optional<BlockMask>> blocks;  // absent for inactive blocks

  friend bool operator==(const WidthMaskSet&, const WidthMaskSet&) = default;
};

// Indices of the k largest scores, ascending by index. Equal scores prefer the
// lower index.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

WidthMaskSet realize_masks(const ArchEncoding& enc, const SaliencyScores& sal, const ModelConfig& cfg);

// Restores the weights an apply_in_place call zeroed. Move-only, single use.
class RestoreToken {
 public:
  RestoreToken() = default;
  RestoreToken(RestoreToken&& other) noexcept { *this = std::move(other); }
  RestoreToken& operator=(RestoreToken&& other) noexcept;
  RestoreToken(const RestoreToken&) = delete;
  RestoreToken& operator=(const RestoreToken&) = delete;

  bool valid() const { return epoch_ != 0; }

 private:
  friend RestoreToken apply_in_place(SuperNetwork&, const ArchEncoding&, const WidthMaskSet&);
  friend void restore(SuperNetwork&, RestoreToken&);

  struct Saved {
    Tensor target;
    std::vector<float> values;
  };
  std::uint64_t network_id_ = 0;
  std::uint64_t epoch_ = 0;
  std::vector<Saved> saved_;
};

// Zeroes pruned rows/columns, installs activation gates and the depth mask.
// The network must be pristine (no outstanding token).
RestoreToken apply_in_place(SuperNetwork& net, const ArchEncoding& enc, const WidthMaskSet& masks);

// Puts back every modified weight bit-exactly and reactivates all blocks.
void restore(SuperNetwork& net, RestoreToken& token);

// Apply for the lifetime of the guard.
class ScopedApply {
 public:
  ScopedApply(SuperNetwork& net, const ArchEncoding& enc, const WidthMaskSet& masks)
      : net_(net), token_(apply_in_place(net, enc, masks)) {}
  ~ScopedApply() {
    if (token_.valid()) restore(net_, token_);
  }
  ScopedApply(const ScopedApply&) = delete;
  ScopedApply& operator=(const ScopedApply&) = delete;

 private:
  SuperNetwork& net_;
  RestoreToken token_;
};

// Zeroes again every weight pruned by the currently installed gates. Keeps
// pruned entries at zero while a masked network is being trained.
void rezero_pruned(SuperNetwork& net);

// Number of non-zero base parameters in the network, counting only tensors
// of active blocks. Used to cross-check parameter_count after an apply.
std::size_t nonzero_parameter_count(const SuperNetwork& net);

}  // namespace gradtrace
