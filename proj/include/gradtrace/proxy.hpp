#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "gradtrace/calibration.hpp"
#include "gradtrace/encoding.hpp"
#include "gradtrace/masking.hpp"
#include "gradtrace/model.hpp"

namespace gradtrace {

enum class SubBlock : std::size_t { attn = 0, mlp = 1 };

const char* sub_block_name(SubBlock s);

// Flattened adapter gradients per active block and sub-block. Attention
// concatenates dL/dA, dL/dB of W_q, W_k, W_v, W_o in that order; the MLP does
// the same for W_up, W_gate, W_down. Inactive blocks are absent.
struct GradientTrace {
  std::vector<std::optional<std::array<std::vector<double>, 2>>> blocks;

  bool has(std::size_t block) const { return block < blocks.size() && blocks[block].has_value(); }
  const std::vector<double>& at(std::size_t block, SubBlock s) const;
  std::vector<double>& at(std::size_t block, SubBlock s);
};

// Single backward pass over the mean next-token loss of the whole batch.
// Requires attached adapters.
GradientTrace compute_trace(SuperNetwork& net, const CalibrationBatch& calib);

struct Correlation {
  double rho = 0.0;
  bool degenerate = false;  // one side had (near) zero variance
};

// Standardised inner product divided by the length, accumulated in double.
// Returns rho = 0 flagged degenerate when either standard deviation < 1e-12.
Correlation pearson(std::span<const double> x, std::span<const double> y);

struct SubBlockScore {
  std::size_t block = 0;
  SubBlock kind = SubBlock::attn;
  double rho = 0.0;
  double retention = 1.0;
  bool degenerate = false;
};

struct ProxyResult {
  double phi = 0.0;
  std::vector<SubBlockScore> terms;  // active sub-blocks only, block-major, attn before mlp
};

// phi = sum of retention * rho over the given terms.
double aggregate_phi(std::span<const SubBlockScore> terms);

// Correlates a candidate trace with the anchor over the encoding's active
// blocks and aggregates with retention weights.
ProxyResult correlate_traces(const GradientTrace& candidate, const GradientTrace& anchor, const ArchEncoding& enc);

// Realise masks, apply in place, trace, restore. The network is left exactly
// as it was found.
GradientTrace candidate_trace(SuperNetwork& net, const ArchEncoding& enc, const SaliencyScores& sal,
                              const CalibrationBatch& calib);

ProxyResult score(SuperNetwork& net, const ArchEncoding& enc, const SaliencyScores& sal,
                  const CalibrationBatch& calib, const GradientTrace& anchor);

}  // namespace gradtrace
