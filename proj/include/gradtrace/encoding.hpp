#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace gradtrace {

struct ModelConfig;

// Retention ratios of one block: fraction of attention heads (or channels)
// and MLP hidden channels that survive pruning.
struct WidthRatio {
  double attn = 1.0;
  double mlp = 1.0;

  friend bool operator==(const WidthRatio&, const WidthRatio&) = default;
};

// A candidate architecture carved from the super-network: which blocks stay
// active and how wide each surviving sub-block is.
struct ArchEncoding {
  std::vector<std::uint8_t> depth;  // 1 = block active
  std::vector<WidthRatio> width;    // one entry per block, also kept for inactive blocks

  std::size_t n_blocks() const { return depth.size(); }
  std::size_t active_blocks() const;
  bool active(std::size_t block) const { return depth[block] != 0; }

  static ArchEncoding identity(std::size_t n_layers);

  friend bool operator==(const ArchEncoding&, const ArchEncoding&) = default;
};

struct EncodingLimits {
  std::size_t min_depth = 1;
  double min_ratio = 0.05;
};

// Throws InputError when the encoding does not fit the config or violates
// the depth floor / ratio range.
void validate_encoding(const ArchEncoding& enc, const ModelConfig& cfg, const EncodingLimits& limits);

// Sizes after rounding; ties in rounding go away from zero.
std::size_t retained_heads(double ratio, std::size_t n_heads);
std::size_t retained_attn_channels(double ratio, std::size_t channels);
std::size_t retained_mlp_channels(double ratio, std::size_t d_ff, std::size_t multiple);

// Attention width unit kept by a ratio under cfg's granularity, expressed in
// channels of the W_o input (heads * d_head in head mode).
std::size_t retained_attn_width(double ratio, const ModelConfig& cfg);

}  // namespace gradtrace
