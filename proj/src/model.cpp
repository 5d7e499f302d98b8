#include "gradtrace/model.hpp"

#include <atomic>
#include <cmath>
#include <random>

#include "gradtrace/calibration.hpp"
#include "gradtrace/errors.hpp"
#include "gradtrace/hash.hpp"

namespace gradtrace {

namespace {

std::uint64_t next_instance_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

Shape proj_shape(const ModelConfig& cfg, ProjKind kind) {
  switch (kind) {
    case ProjKind::wq:
      return {cfg.attn_width(), cfg.d_model};
    case ProjKind::wk:
    case ProjKind::wv:
      return {cfg.kv_width(), cfg.d_model};
    case ProjKind::wo:
      return {cfg.d_model, cfg.attn_width()};
    case ProjKind::wup:
    case ProjKind::wgate:
      return {cfg.d_ff, cfg.d_model};
    case ProjKind::wdown:
      return {cfg.d_model, cfg.d_ff};
  }
  throw StateError("unknown projection kind");
}

void fill_normal(Tensor& t, std::mt19937_64& rng, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  for (auto& v : t.data()) v = dist(rng);
}

Tensor project(ad::Tape& tape, const Tensor& x, const Projection& p) {
  Tensor y = ad::linear(tape, x, p.weight);
  if (p.adapter) {
    Tensor low = ad::linear(tape, x, p.adapter->a);
    y = ad::add(tape, y, ad::linear(tape, low, p.adapter->b));
  }
  return y;
}

}  // namespace

const char* proj_name(ProjKind kind) {
  static constexpr std::array<const char*, kNumProjections> names{"wq", "wk", "wv", "wo", "wup", "wgate", "wdown"};
  return names[static_cast<std::size_t>(kind)];
}

bool is_attn_projection(ProjKind kind) { return static_cast<std::size_t>(kind) <= static_cast<std::size_t>(ProjKind::wo); }

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || n_kv_heads == 0 || d_head == 0 || d_ff == 0 ||
      vocab_size == 0 || context_length < 2) {
    fail("all dimensions must be positive and context_length >= 2");
  }
  if (n_kv_heads > n_heads || n_heads % n_kv_heads != 0) fail("n_heads must be a multiple of n_kv_heads");
  if (d_model != n_heads * d_head) fail("d_model must equal n_heads * d_head");
  if (d_head % 2 != 0) fail("d_head must be even for rotary embeddings");
  if (rounding_multiple == 0) fail("rounding_multiple must be >= 1");
  if (d_ff % rounding_multiple != 0) fail("d_ff must be a multiple of rounding_multiple");
}

SuperNetwork::SuperNetwork(ModelConfig cfg) : cfg_(cfg), instance_id_(next_instance_id()) {
  cfg_.validate();
  embedding = Tensor({cfg_.vocab_size, cfg_.d_model});
  final_norm = Tensor({cfg_.d_model}, std::vector<float>(cfg_.d_model, 1.0f));
  blocks.resize(cfg_.n_layers);
  for (auto& b : blocks) {
    b.attn_norm = Tensor({cfg_.d_model}, std::vector<float>(cfg_.d_model, 1.0f));
    b.mlp_norm = Tensor({cfg_.d_model}, std::vector<float>(cfg_.d_model, 1.0f));
    for (std::size_t k = 0; k < kNumProjections; ++k) b.proj[k].weight = Tensor(proj_shape(cfg_, ProjKind(k)));
  }
  block_active.assign(cfg_.n_layers, 1);
}

SuperNetwork SuperNetwork::random(const ModelConfig& cfg, std::uint64_t seed) {
  SuperNetwork net(cfg);
  std::mt19937_64 rng(seed);
  fill_normal(net.embedding, rng, 1.0f / std::sqrt(float(cfg.d_model)));
  const float residual_scale = 1.0f / std::sqrt(2.0f * float(cfg.n_layers));
  for (auto& b : net.blocks) {
    for (std::size_t k = 0; k < kNumProjections; ++k) {
      auto& w = b.proj[k].weight;
      float stddev = 1.0f / std::sqrt(float(w.dim(1)));
      if (ProjKind(k) == ProjKind::wo || ProjKind(k) == ProjKind::wdown) stddev *= residual_scale;
      fill_normal(w, rng, stddev);
    }
  }
  return net;
}

SuperNetwork SuperNetwork::clone() const {
  // Replicas start pristine; cloning mid-apply would duplicate a pending restore.
  if (outstanding_restore) throw StateError("cannot clone a network with masks applied");
  SuperNetwork out;
  out.cfg_ = cfg_;
  out.instance_id_ = next_instance_id();
  out.adapter_rank_ = adapter_rank_;
  out.adapter_seed_ = adapter_seed_;
  out.embedding = embedding.clone();
  out.final_norm = final_norm.clone();
  out.blocks.resize(blocks.size());
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    out.blocks[l].attn_norm = blocks[l].attn_norm.clone();
    out.blocks[l].mlp_norm = blocks[l].mlp_norm.clone();
    for (std::size_t k = 0; k < kNumProjections; ++k) {
      const auto& src = blocks[l].proj[k];
      auto& dst = out.blocks[l].proj[k];
      dst.weight = src.weight.clone();
      if (src.adapter) dst.adapter = Adapter{src.adapter->a.clone(), src.adapter->b.clone()};
    }
  }
  out.block_active = block_active;
  out.gates = gates;
  return out;
}

void SuperNetwork::attach_adapters(std::size_t rank, std::uint64_t seed) {
  if (has_adapters()) throw StateError("adapters already attached");
  if (rank == 0) throw ConfigError("adapter rank must be >= 1");
  std::mt19937_64 rng(seed);
  for (auto& b : blocks) {
    for (auto& p : b.proj) {
      const auto d_out = p.weight.dim(0), d_in = p.weight.dim(1);
      Adapter ad{Tensor({rank, d_in}, true), Tensor({d_out, rank}, true)};
      fill_normal(ad.a, rng, 0.01f);
      fill_normal(ad.b, rng, 0.01f);
      p.adapter = std::move(ad);
    }
  }
  adapter_rank_ = rank;
  adapter_seed_ = seed;
  set_base_trainable(false);
}

void SuperNetwork::detach_adapters() {
  for (auto& b : blocks)
    for (auto& p : b.proj) p.adapter.reset();
  adapter_rank_ = 0;
  adapter_seed_ = 0;
}

void SuperNetwork::zero_adapter_grads() {
  for (auto& b : blocks) {
    for (auto& p : b.proj) {
      if (!p.adapter) continue;
      p.adapter->a.zero_grad();
      p.adapter->b.zero_grad();
    }
  }
}

std::vector<std::pair<std::string, Tensor>> SuperNetwork::named_weights() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding", embedding);
  out.emplace_back("final_norm", final_norm);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string prefix = "block" + std::to_string(l);
    out.emplace_back(prefix + ".attn.norm", blocks[l].attn_norm);
    for (auto kind : kAttnProjections) out.emplace_back(prefix + ".attn." + proj_name(kind), blocks[l][kind].weight);
    out.emplace_back(prefix + ".mlp.norm", blocks[l].mlp_norm);
    for (auto kind : kMlpProjections) out.emplace_back(prefix + ".mlp." + proj_name(kind), blocks[l][kind].weight);
  }
  return out;
}

std::vector<Tensor> SuperNetwork::base_weights() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_weights()) out.push_back(t);
  return out;
}

void SuperNetwork::set_base_trainable(bool trainable) {
  for (auto t : base_weights()) {
    t.set_requires_grad(trainable);
    if (!trainable) t.drop_grad();
  }
}

Tensor forward(const SuperNetwork& net, ad::Tape& tape, std::span<const std::int32_t> ids, std::size_t seq_len,
               ForwardTaps* taps) {
  const auto& cfg = net.config();
  if (seq_len == 0 || seq_len > cfg.context_length) {
    throw InputError("sequence length " + std::to_string(seq_len) + " exceeds context length " +
                     std::to_string(cfg.context_length));
  }
  if (ids.empty() || ids.size() % seq_len != 0) {
    throw InputError("token count " + std::to_string(ids.size()) + " is not a positive multiple of " +
                     std::to_string(seq_len));
  }
  if (taps) {
    taps->attn_out.assign(cfg.n_layers, Tensor{});
    taps->mlp_hidden.assign(cfg.n_layers, Tensor{});
  }
  const ad::AttentionShape attn_shape{seq_len, cfg.n_heads, cfg.n_kv_heads, cfg.d_head};
  const bool channel_mode = cfg.attn_granularity == AttentionGranularity::channel;

  Tensor x = ad::embedding(tape, net.embedding, ids);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (!net.block_active[l]) continue;
    const Block& b = net.blocks[l];
    const std::vector<float>* attn_gate = nullptr;
    const std::vector<float>* mlp_gate = nullptr;
    if (net.gates) {
      if (!net.gates->attn[l].empty()) attn_gate = &net.gates->attn[l];
      if (!net.gates->mlp[l].empty()) mlp_gate = &net.gates->mlp[l];
    }

    Tensor h = ad::rmsnorm_rows(tape, x, b.attn_norm);
    Tensor q = ad::rope(tape, project(tape, h, b[ProjKind::wq]), seq_len, cfg.n_heads);
    Tensor k = ad::rope(tape, project(tape, h, b[ProjKind::wk]), seq_len, cfg.n_kv_heads);
    Tensor v = project(tape, h, b[ProjKind::wv]);
    // A single pruned channel must drop out of q.k as well as out of the output.
    if (attn_gate && channel_mode) q = ad::mask_columns(tape, q, *attn_gate);
    Tensor a = ad::causal_attention(tape, q, k, v, attn_shape);
    if (attn_gate) a = ad::mask_columns(tape, a, *attn_gate);
    if (taps) taps->attn_out[l] = a;
    x = ad::add(tape, x, project(tape, a, b[ProjKind::wo]));

    Tensor h2 = ad::rmsnorm_rows(tape, x, b.mlp_norm);
    Tensor gate = ad::silu(tape, project(tape, h2, b[ProjKind::wgate]));
    Tensor m = ad::mul(tape, gate, project(tape, h2, b[ProjKind::wup]));
    if (mlp_gate) m = ad::mask_columns(tape, m, *mlp_gate);
    if (taps) taps->mlp_hidden[l] = m;
    x = ad::add(tape, x, project(tape, m, b[ProjKind::wdown]));
  }
  x = ad::rmsnorm_rows(tape, x, net.final_norm);
  return ad::linear(tape, x, net.embedding);
}

Tensor forward(const SuperNetwork& net, std::span<const std::int32_t> tokens) {
  ad::Tape tape(false);
  return forward(net, tape, tokens, tokens.size());
}

std::vector<double> channel_l2_norms(const Tensor& activations) {
  std::vector<double> sq(activations.cols(), 0.0);
  const auto v = activations.data();
  const std::size_t cols = activations.cols();
  for (std::size_t r = 0; r < activations.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) sq[c] += double(v[r * cols + c]) * v[r * cols + c];
  for (auto& x : sq) x = std::sqrt(x);
  return sq;
}

ActivationStats collect_activation_stats(const SuperNetwork& net, const CalibrationBatch& calib) {
  if (calib.empty()) throw InputError("activation statistics need a non-empty calibration batch");
  if (net.outstanding_restore || net.gates) throw StateError("activation statistics require a pristine network");
  const auto& cfg = net.config();
  ForwardTaps taps;
  ad::Tape tape(false);
  forward(net, tape, calib.inputs(), calib.positions(), &taps);

  ActivationStats stats;
  stats.token_count = calib.inputs().size();
  stats.attn_input_norms.assign(cfg.n_layers, {});
  stats.mlp_input_norms.assign(cfg.n_layers, {});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (!net.block_active[l]) {
      stats.attn_input_norms[l].assign(cfg.attn_width(), 0.0);
      stats.mlp_input_norms[l].assign(cfg.d_ff, 0.0);
      continue;
    }
    stats.attn_input_norms[l] = channel_l2_norms(taps.attn_out[l]);
    stats.mlp_input_norms[l] = channel_l2_norms(taps.mlp_hidden[l]);
  }
  return stats;
}

std::size_t dense_parameter_count(const ModelConfig& cfg) {
  return parameter_count(cfg, ArchEncoding::identity(cfg.n_layers));
}

std::size_t parameter_count(const ModelConfig& cfg, const ArchEncoding& enc) {
  if (enc.depth.size() != cfg.n_layers || enc.width.size() != cfg.n_layers) {
    throw InputError("encoding does not match model depth");
  }
  const std::size_t d = cfg.d_model;
  std::size_t total = cfg.vocab_size * d + d;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (!enc.active(l)) continue;
    total += 2 * d;
    const std::size_t attn = retained_attn_width(enc.width[l].attn, cfg);
    total += 2 * attn * d;  // W_q rows, W_o columns
    total += cfg.grouped_query() ? 2 * cfg.kv_width() * d : 2 * attn * d;
    total += 3 * retained_mlp_channels(enc.width[l].mlp, cfg.d_ff, cfg.rounding_multiple) * d;
  }
  return total;
}

std::uint64_t weight_checksum(const SuperNetwork& net) {
  Fnv1a h;
  for (const auto& [name, t] : net.named_weights()) {
    h.update(name);
    h.update(t.data());
  }
  for (auto a : net.block_active) h.update(&a, 1);
  return h.digest();
}

}  // namespace gradtrace
