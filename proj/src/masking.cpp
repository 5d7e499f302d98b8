#include "gradtrace/masking.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>

#include "gradtrace/errors.hpp"

namespace gradtrace {

namespace {

std::uint64_t next_epoch() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

// sum_i |W[i, j]| * norms[j] for every column j of W [rows x cols].
std::vector<double> weighted_column_scores(const Tensor& w, const std::vector<double>& norms) {
  const auto rows = w.dim(0), cols = w.dim(1);
  std::vector<double> scores(cols, 0.0);
  const auto v = w.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) scores[j] += std::fabs(double(v[i * cols + j]));
  for (std::size_t j = 0; j < cols; ++j) scores[j] *= norms[j];
  return scores;
}

void zero_rows(Tensor& w, std::size_t row) {
  auto v = w.data();
  std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(row * w.dim(1)), w.dim(1), 0.0f);
}

void zero_column(Tensor& w, std::size_t col) {
  auto v = w.data();
  for (std::size_t i = 0; i < w.dim(0); ++i) v[i * w.dim(1) + col] = 0.0f;
}

}  // namespace

SaliencyScores compute_saliency(const SuperNetwork& net, const ActivationStats& stats) {
  const auto& cfg = net.config();
  if (stats.attn_input_norms.size() != cfg.n_layers || stats.mlp_input_norms.size() != cfg.n_layers) {
    throw InputError("activation statistics cover " + std::to_string(stats.attn_input_norms.size()) +
                     " blocks, model has " + std::to_string(cfg.n_layers));
  }
  SaliencyScores sal;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (stats.attn_input_norms[l].size() != cfg.attn_width() || stats.mlp_input_norms[l].size() != cfg.d_ff) {
      throw InputError("activation statistics of block " + std::to_string(l) + " do not match the model widths");
    }
    const auto& block = net.blocks[l];
    auto attn = weighted_column_scores(block[ProjKind::wo].weight, stats.attn_input_norms[l]);
    std::vector<double> heads(cfg.n_heads, 0.0);
    for (std::size_t h = 0; h < cfg.n_heads; ++h)
      for (std::size_t c = 0; c < cfg.d_head; ++c) heads[h] += attn[h * cfg.d_head + c];
    sal.attn_channel.push_back(std::move(attn));
    sal.attn_head.push_back(std::move(heads));
    sal.mlp_channel.push_back(weighted_column_scores(block[ProjKind::wdown].weight, stats.mlp_input_norms[l]));
  }
  return sal;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  k = std::min(k, order.size());
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

WidthMaskSet realize_masks(const ArchEncoding& enc, const SaliencyScores& sal, const ModelConfig& cfg) {
  if (enc.depth.size() != cfg.n_layers || enc.width.size() != cfg.n_layers) {
    throw InputError("encoding does not match model depth");
  }
  if (sal.mlp_channel.size() != cfg.n_layers) throw InputError("saliency scores do not match model depth");
  WidthMaskSet masks;
  masks.granularity = cfg.attn_granularity;
  masks.blocks.resize(cfg.n_layers);
  const bool head_mode = cfg.attn_granularity == AttentionGranularity::head;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (!enc.active(l)) continue;
    BlockMask m;
    const auto& attn_scores = head_mode ? sal.attn_head[l] : sal.attn_channel[l];
    const std::size_t attn_keep = head_mode ? retained_heads(enc.width[l].attn, cfg.n_heads)
                                            : retained_attn_channels(enc.width[l].attn, cfg.attn_width());
    m.attn.assign(attn_scores.size(), 0);
    for (auto i : top_k_indices(attn_scores, attn_keep)) m.attn[i] = 1;
    const std::size_t mlp_keep = retained_mlp_channels(enc.width[l].mlp, cfg.d_ff, cfg.rounding_multiple);
    m.mlp.assign(cfg.d_ff, 0);
    for (auto i : top_k_indices(sal.mlp_channel[l], mlp_keep)) m.mlp[i] = 1;
    masks.blocks[l] = std::move(m);
  }
  return masks;
}

RestoreToken& RestoreToken::operator=(RestoreToken&& other) noexcept {
  network_id_ = other.network_id_;
  epoch_ = other.epoch_;
  saved_ = std::move(other.saved_);
  other.epoch_ = 0;
  other.network_id_ = 0;
  other.saved_.clear();
  return *this;
}

RestoreToken apply_in_place(SuperNetwork& net, const ArchEncoding& enc, const WidthMaskSet& masks) {
  const auto& cfg = net.config();
  if (net.outstanding_restore) throw StateError("masks already applied; restore before applying again");
  if (net.gates || std::find(net.block_active.begin(), net.block_active.end(), 0) != net.block_active.end()) {
    throw StateError("network already carries baked-in masks");
  }
  if (enc.depth.size() != cfg.n_layers || masks.blocks.size() != cfg.n_layers) {
    throw InputError("encoding/masks do not match model depth");
  }
  if (masks.granularity != cfg.attn_granularity) throw InputError("mask granularity does not match the model");

  RestoreToken token;
  token.network_id_ = net.instance_id();
  token.epoch_ = next_epoch();

  ChannelGates gates;
  gates.attn.assign(cfg.n_layers, {});
  gates.mlp.assign(cfg.n_layers, {});
  const bool head_mode = cfg.attn_granularity == AttentionGranularity::head;

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    net.block_active[l] = enc.active(l) ? 1 : 0;
    if (!enc.active(l)) continue;
    if (!masks.blocks[l]) throw InputError("missing mask for active block " + std::to_string(l));
    const BlockMask& m = *masks.blocks[l];
    if (m.attn.size() != (head_mode ? cfg.n_heads : cfg.attn_width()) || m.mlp.size() != cfg.d_ff) {
      throw InputError("mask of block " + std::to_string(l) + " has the wrong width");
    }

    std::vector<float> attn_gate(cfg.attn_width());
    for (std::size_t c = 0; c < attn_gate.size(); ++c) attn_gate[c] = m.attn[head_mode ? c / cfg.d_head : c];
    std::vector<float> mlp_gate(m.mlp.begin(), m.mlp.end());

    Block& b = net.blocks[l];
    const bool attn_pruned = std::find(attn_gate.begin(), attn_gate.end(), 0.0f) != attn_gate.end();
    const bool mlp_pruned = std::find(mlp_gate.begin(), mlp_gate.end(), 0.0f) != mlp_gate.end();
    if (attn_pruned) {
      std::vector<ProjKind> touched{ProjKind::wq, ProjKind::wo};
      if (!cfg.grouped_query()) {
        touched.push_back(ProjKind::wk);
        touched.push_back(ProjKind::wv);
      }
      for (auto kind : touched) {
        auto& w = b[kind].weight;
        token.saved_.push_back({w, std::vector<float>(w.data().begin(), w.data().end())});
      }
      for (std::size_t c = 0; c < attn_gate.size(); ++c) {
        if (attn_gate[c] != 0.0f) continue;
        zero_rows(b[ProjKind::wq].weight, c);
        zero_column(b[ProjKind::wo].weight, c);
        if (!cfg.grouped_query()) {
          zero_rows(b[ProjKind::wk].weight, c);
          zero_rows(b[ProjKind::wv].weight, c);
        }
      }
      gates.attn[l] = std::move(attn_gate);
    }
    if (mlp_pruned) {
      for (auto kind : kMlpProjections) {
        auto& w = b[kind].weight;
        token.saved_.push_back({w, std::vector<float>(w.data().begin(), w.data().end())});
      }
      for (std::size_t c = 0; c < mlp_gate.size(); ++c) {
        if (mlp_gate[c] != 0.0f) continue;
        zero_rows(b[ProjKind::wup].weight, c);
        zero_rows(b[ProjKind::wgate].weight, c);
        zero_column(b[ProjKind::wdown].weight, c);
      }
      gates.mlp[l] = std::move(mlp_gate);
    }
  }
  const bool any_gate = std::any_of(gates.attn.begin(), gates.attn.end(), [](auto& g) { return !g.empty(); }) ||
                        std::any_of(gates.mlp.begin(), gates.mlp.end(), [](auto& g) { return !g.empty(); });
  if (any_gate) net.gates = std::move(gates);
  net.outstanding_restore = token.epoch_;
  return token;
}

void restore(SuperNetwork& net, RestoreToken& token) {
  if (!token.valid()) throw StateError("restore with an empty or already used token");
  if (token.network_id_ != net.instance_id() || net.outstanding_restore != token.epoch_) {
    throw StateError("restore token does not belong to this network's current apply");
  }
  for (auto& s : token.saved_) std::copy(s.values.begin(), s.values.end(), s.target.data().begin());
  std::fill(net.block_active.begin(), net.block_active.end(), 1);
  net.gates.reset();
  net.outstanding_restore.reset();
  token.saved_.clear();
  token.epoch_ = 0;
  token.network_id_ = 0;
}

void rezero_pruned(SuperNetwork& net) {
  if (!net.gates) return;
  const auto& cfg = net.config();
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Block& b = net.blocks[l];
    const auto& ag = net.gates->attn[l];
    for (std::size_t c = 0; c < ag.size(); ++c) {
      if (ag[c] != 0.0f) continue;
      zero_rows(b[ProjKind::wq].weight, c);
      zero_column(b[ProjKind::wo].weight, c);
      if (!cfg.grouped_query()) {
        zero_rows(b[ProjKind::wk].weight, c);
        zero_rows(b[ProjKind::wv].weight, c);
      }
    }
    const auto& mg = net.gates->mlp[l];
    for (std::size_t c = 0; c < mg.size(); ++c) {
      if (mg[c] != 0.0f) continue;
      zero_rows(b[ProjKind::wup].weight, c);
      zero_rows(b[ProjKind::wgate].weight, c);
      zero_column(b[ProjKind::wdown].weight, c);
    }
  }
}

std::size_t nonzero_parameter_count(const SuperNetwork& net) {
  std::size_t total = 0;
  auto count = [](const Tensor& t) {
    const auto v = t.data();
    return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0.0f; }));
  };
  total += count(net.embedding) + count(net.final_norm);
  for (std::size_t l = 0; l < net.blocks.size(); ++l) {
    if (!net.block_active[l]) continue;
    const auto& b = net.blocks[l];
    total += count(b.attn_norm) + count(b.mlp_norm);
    for (const auto& p : b.proj) total += count(p.weight);
  }
  return total;
}

}  // namespace gradtrace
