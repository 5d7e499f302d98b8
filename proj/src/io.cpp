#include "gradtrace/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <unistd.h>

#include <json.hpp>

#include "gradtrace/errors.hpp"

namespace gradtrace::io {

static_assert(std::endian::native == std::endian::little, "payloads are written in host order");

using nlohmann::json;

void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading " + path.string());
  return bytes;
}

namespace {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& bytes, const char* what) : bytes_(bytes), what_(what) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void get_bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError(std::string(what_) + " is truncated");
  }
  const std::string& bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

constexpr char kCheckpointMagic[4] = {'T', 'N', 'C', 'K'};
constexpr char kAnchorMagic[4] = {'T', 'N', 'A', 'C'};
constexpr std::uint16_t kAnchorVersion = 1;

StoredTensor stored_f32(const std::string& name, const std::vector<std::uint64_t>& dims, std::span<const float> v) {
  StoredTensor t{name, DType::f32, dims, {}};
  t.bytes.resize(v.size() * sizeof(float));
  std::memcpy(t.bytes.data(), v.data(), t.bytes.size());
  return t;
}

StoredTensor stored_i32(const std::string& name, const std::vector<std::int32_t>& v) {
  StoredTensor t{name, DType::i32, {v.size()}, {}};
  t.bytes.resize(v.size() * sizeof(std::int32_t));
  std::memcpy(t.bytes.data(), v.data(), t.bytes.size());
  return t;
}

std::vector<std::int32_t> as_i32(const StoredTensor& t) {
  if (t.dtype != DType::i32) throw IoError("tensor " + t.name + " is not int32");
  std::vector<std::int32_t> v(t.numel());
  std::memcpy(v.data(), t.bytes.data(), t.bytes.size());
  return v;
}

std::vector<float> as_f32(const StoredTensor& t) {
  if (t.dtype != DType::f32) throw IoError("tensor " + t.name + " is not float32");
  std::vector<float> v(t.numel());
  std::memcpy(v.data(), t.bytes.data(), t.bytes.size());
  return v;
}

std::vector<std::uint64_t> dims_of(const Tensor& t) {
  return std::vector<std::uint64_t>(t.shape().begin(), t.shape().end());
}

std::string block_prefix(std::size_t l, bool attn) {
  return "block" + std::to_string(l) + (attn ? ".attn." : ".mlp.");
}

}  // namespace

std::size_t StoredTensor::numel() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint16_t>(Checkpoint::kVersion);
  const auto& c = ckpt.config;
  for (std::size_t v : {c.n_layers, c.d_model, c.n_heads, c.n_kv_heads, c.d_head, c.d_ff, c.vocab_size,
                        c.context_length, c.rounding_multiple}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.attn_granularity));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (t.bytes.size() != t.numel() * 4) throw InputError("tensor " + t.name + " payload does not match its dims");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.put<std::uint64_t>(d);
    w.put<std::uint64_t>(offset);
    offset += t.bytes.size();
  }
  for (const auto& t : ckpt.tensors) w.put_bytes(t.bytes.data(), t.bytes.size());
  return std::move(w.str());
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  Reader r(bytes, "checkpoint");
  if (r.get_string(4) != std::string(kCheckpointMagic, 4)) throw IoError("not a checkpoint file (bad magic)");
  const auto version = r.get<std::uint16_t>();
  if (version != Checkpoint::kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  auto& c = ckpt.config;
  for (std::size_t* f : {&c.n_layers, &c.d_model, &c.n_heads, &c.n_kv_heads, &c.d_head, &c.d_ff, &c.vocab_size,
                         &c.context_length, &c.rounding_multiple}) {
    *f = r.get<std::uint32_t>();
  }
  const auto gran = r.get<std::uint32_t>();
  if (gran > 1) throw IoError("unknown attention granularity code " + std::to_string(gran));
  c.attn_granularity = AttentionGranularity(gran);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint holds an invalid model config: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<std::uint64_t> offsets;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.get_string(r.get<std::uint16_t>());
    if (!names.insert(t.name).second) throw IoError("duplicate tensor name " + t.name);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > 1) throw IoError("unknown dtype code for tensor " + t.name);
    t.dtype = DType(dtype);
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) t.dims.push_back(r.get<std::uint64_t>());
    offsets.push_back(r.get<std::uint64_t>());
    ckpt.tensors.push_back(std::move(t));
  }
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    auto& t = ckpt.tensors[i];
    if (offsets[i] != expected) throw IoError("tensor " + t.name + " has a non-contiguous offset");
    const std::size_t n = t.numel() * 4;
    if (n > r.remaining()) throw IoError("checkpoint payload is truncated");
    t.bytes.resize(n);
    r.get_bytes(t.bytes.data(), n);
    expected += n;
  }
  if (r.remaining() != 0) throw IoError("trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

bool is_realized(const Checkpoint& ckpt) { return ckpt.find("meta.depth") != nullptr; }

namespace {

// Appends keep-lists and the depth mask describing the network's gates.
void append_mask_meta(Checkpoint& ckpt, const SuperNetwork& net) {
  const auto& cfg = net.config();
  const bool head_mode = cfg.attn_granularity == AttentionGranularity::head;
  ckpt.tensors.push_back(stored_i32("meta.depth", std::vector<std::int32_t>(net.block_active.begin(),
                                                                            net.block_active.end())));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (!net.block_active[l]) continue;
    std::vector<std::int32_t> attn(head_mode ? cfg.n_heads : cfg.attn_width(), 1);
    std::vector<std::int32_t> mlp(cfg.d_ff, 1);
    if (net.gates) {
      const auto& ag = net.gates->attn[l];
      for (std::size_t c = 0; c < ag.size(); ++c)
        if (ag[c] == 0.0f) attn[head_mode ? c / cfg.d_head : c] = 0;
      const auto& mg = net.gates->mlp[l];
      for (std::size_t c = 0; c < mg.size(); ++c)
        if (mg[c] == 0.0f) mlp[c] = 0;
    }
    ckpt.tensors.push_back(stored_i32(block_prefix(l, true) + "keep", attn));
    ckpt.tensors.push_back(stored_i32(block_prefix(l, false) + "keep", mlp));
  }
}

bool has_masks(const SuperNetwork& net) {
  return net.gates || std::find(net.block_active.begin(), net.block_active.end(), 0) != net.block_active.end();
}

// Selects rows (or columns) of a row-major matrix whose keep flag is set.
std::vector<float> select(std::span<const float> v, std::size_t rows, std::size_t cols,
                          const std::vector<std::uint8_t>& keep, bool by_row) {
  std::vector<float> out;
  for (std::size_t i = 0; i < rows; ++i) {
    if (by_row && !keep[i]) continue;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!by_row && !keep[j]) continue;
      out.push_back(v[i * cols + j]);
    }
  }
  return out;
}

}  // namespace

Checkpoint checkpoint_from_network(const SuperNetwork& net) {
  if (net.outstanding_restore) throw StateError("cannot save a network while masks are applied in place");
  Checkpoint ckpt;
  ckpt.config = net.config();
  for (const auto& [name, t] : net.named_weights()) ckpt.tensors.push_back(stored_f32(name, dims_of(t), t.data()));
  if (has_masks(net)) append_mask_meta(ckpt, net);
  return ckpt;
}

Checkpoint realize_checkpoint(const SuperNetwork& net, const ArchEncoding& enc, const WidthMaskSet& masks,
                              RealizeMode mode) {
  SuperNetwork work = net.clone();
  if (work.has_adapters()) work.detach_adapters();
  RestoreToken token = apply_in_place(work, enc, masks);
  const auto& cfg = work.config();
  const bool head_mode = cfg.attn_granularity == AttentionGranularity::head;

  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.tensors.push_back(stored_f32("embedding", dims_of(work.embedding), work.embedding.data()));
  ckpt.tensors.push_back(stored_f32("final_norm", dims_of(work.final_norm), work.final_norm.data()));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const Block& b = work.blocks[l];
    if (mode == RealizeMode::sliced && !enc.active(l)) continue;
    std::vector<std::uint8_t> attn_keep(cfg.attn_width(), 1), mlp_keep(cfg.d_ff, 1);
    if (mode == RealizeMode::sliced) {
      const BlockMask& m = *masks.blocks[l];
      for (std::size_t c = 0; c < attn_keep.size(); ++c) attn_keep[c] = m.attn[head_mode ? c / cfg.d_head : c];
      for (std::size_t c = 0; c < mlp_keep.size(); ++c) mlp_keep[c] = m.mlp[c];
    }
    ckpt.tensors.push_back(stored_f32(block_prefix(l, true) + "norm", dims_of(b.attn_norm), b.attn_norm.data()));
    for (auto kind : kAttnProjections) {
      const Tensor& w = b[kind].weight;
      const auto name = block_prefix(l, true) + proj_name(kind);
      const bool sliced_rows = kind == ProjKind::wq || (!cfg.grouped_query() && kind != ProjKind::wo);
      if (mode == RealizeMode::zeroed) {
        ckpt.tensors.push_back(stored_f32(name, dims_of(w), w.data()));
      } else if (kind == ProjKind::wo) {
        auto v = select(w.data(), w.dim(0), w.dim(1), attn_keep, false);
        ckpt.tensors.push_back(stored_f32(name, {w.dim(0), v.size() / w.dim(0)}, v));
      } else if (sliced_rows) {
        auto v = select(w.data(), w.dim(0), w.dim(1), attn_keep, true);
        ckpt.tensors.push_back(stored_f32(name, {v.size() / w.dim(1), w.dim(1)}, v));
      } else {
        ckpt.tensors.push_back(stored_f32(name, dims_of(w), w.data()));
      }
    }
    ckpt.tensors.push_back(stored_f32(block_prefix(l, false) + "norm", dims_of(b.mlp_norm), b.mlp_norm.data()));
    for (auto kind : kMlpProjections) {
      const Tensor& w = b[kind].weight;
      const auto name = block_prefix(l, false) + proj_name(kind);
      if (mode == RealizeMode::zeroed) {
        ckpt.tensors.push_back(stored_f32(name, dims_of(w), w.data()));
      } else if (kind == ProjKind::wdown) {
        auto v = select(w.data(), w.dim(0), w.dim(1), mlp_keep, false);
        ckpt.tensors.push_back(stored_f32(name, {w.dim(0), v.size() / w.dim(0)}, v));
      } else {
        auto v = select(w.data(), w.dim(0), w.dim(1), mlp_keep, true);
        ckpt.tensors.push_back(stored_f32(name, {v.size() / w.dim(1), w.dim(1)}, v));
      }
    }
  }
  append_mask_meta(ckpt, work);
  restore(work, token);
  return ckpt;
}

namespace {

// Copies `src` into `dst`, scattering sliced rows/columns back into place.
void load_weight(Tensor& dst, const StoredTensor& src, const std::vector<std::uint8_t>* keep, bool by_row) {
  const auto v = as_f32(src);
  auto out = dst.data();
  if (src.dims == dims_of(dst)) {
    std::copy(v.begin(), v.end(), out.begin());
    return;
  }
  const bool matrix = dst.rank() == 2 && src.dims.size() == 2;
  if (!keep || !matrix) {
    throw IoError("tensor " + src.name + " has shape that does not fit the model config");
  }
  const std::size_t rows = dst.dim(0), cols = dst.dim(1);
  const auto kept = static_cast<std::size_t>(std::count(keep->begin(), keep->end(), 1));
  const bool ok = by_row ? (src.dims[0] == kept && src.dims[1] == cols) : (src.dims[0] == rows && src.dims[1] == kept);
  if (!ok) throw IoError("sliced tensor " + src.name + " does not match its keep list");
  std::fill(out.begin(), out.end(), 0.0f);
  std::size_t k = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (by_row && !(*keep)[i]) continue;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!by_row && !(*keep)[j]) continue;
      out[i * cols + j] = v[k++];
    }
  }
}

std::vector<std::uint8_t> keep_flags(const Checkpoint& ckpt, const std::string& name, std::size_t expected) {
  const auto* t = ckpt.find(name);
  if (!t) throw IoError("realized checkpoint lacks " + name);
  const auto v = as_i32(*t);
  if (v.size() != expected) throw IoError(name + " has the wrong length");
  std::vector<std::uint8_t> out;
  for (auto x : v) {
    if (x != 0 && x != 1) throw IoError(name + " must hold 0/1 flags");
    out.push_back(static_cast<std::uint8_t>(x));
  }
  return out;
}

}  // namespace

SuperNetwork network_from_checkpoint(const Checkpoint& ckpt) {
  SuperNetwork net(ckpt.config);
  const auto& cfg = net.config();
  const bool realized = is_realized(ckpt);
  const bool head_mode = cfg.attn_granularity == AttentionGranularity::head;

  std::vector<std::uint8_t> depth(cfg.n_layers, 1);
  if (realized) depth = keep_flags(ckpt, "meta.depth", cfg.n_layers);

  ChannelGates gates;
  gates.attn.assign(cfg.n_layers, {});
  gates.mlp.assign(cfg.n_layers, {});
  std::vector<std::vector<std::uint8_t>> attn_keep(cfg.n_layers), mlp_keep(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers && realized; ++l) {
    if (!depth[l]) continue;
    const auto a = keep_flags(ckpt, block_prefix(l, true) + "keep", head_mode ? cfg.n_heads : cfg.attn_width());
    attn_keep[l].resize(cfg.attn_width());
    for (std::size_t c = 0; c < cfg.attn_width(); ++c) attn_keep[l][c] = a[head_mode ? c / cfg.d_head : c];
    mlp_keep[l] = keep_flags(ckpt, block_prefix(l, false) + "keep", cfg.d_ff);
    if (std::count(attn_keep[l].begin(), attn_keep[l].end(), 0)) {
      gates.attn[l].assign(attn_keep[l].begin(), attn_keep[l].end());
    }
    if (std::count(mlp_keep[l].begin(), mlp_keep[l].end(), 0)) {
      gates.mlp[l].assign(mlp_keep[l].begin(), mlp_keep[l].end());
    }
  }

  for (auto& [name, t] : net.named_weights()) {
    const auto* src = ckpt.find(name);
    std::size_t block = cfg.n_layers;
    if (name.rfind("block", 0) == 0) block = std::stoul(name.substr(5));
    if (!src) {
      if (block < cfg.n_layers && !depth[block]) continue;  // sliced-away inactive block
      throw IoError("checkpoint lacks tensor " + name);
    }
    const std::vector<std::uint8_t>* keep = nullptr;
    bool by_row = true;
    if (realized && block < cfg.n_layers) {
      const auto leaf = name.substr(name.rfind('.') + 1);
      if (leaf == "wq" || ((leaf == "wk" || leaf == "wv") && !cfg.grouped_query())) {
        keep = &attn_keep[block];
      } else if (leaf == "wo") {
        keep = &attn_keep[block];
        by_row = false;
      } else if (leaf == "wup" || leaf == "wgate") {
        keep = &mlp_keep[block];
      } else if (leaf == "wdown") {
        keep = &mlp_keep[block];
        by_row = false;
      }
    }
    load_weight(t, *src, keep, by_row);
  }

  if (realized) {
    net.block_active = depth;
    const bool any = std::any_of(gates.attn.begin(), gates.attn.end(), [](auto& g) { return !g.empty(); }) ||
                     std::any_of(gates.mlp.begin(), gates.mlp.end(), [](auto& g) { return !g.empty(); });
    if (any) net.gates = std::move(gates);
  }
  return net;
}

// ---------------------------------------------------------------- anchor

std::string serialize_anchor(const AnchorKey& key, const GradientTrace& trace) {
  Writer w;
  w.put_bytes(kAnchorMagic, 4);
  w.put<std::uint16_t>(kAnchorVersion);
  for (auto v : {key.checkpoint_hash, key.calib_hash, key.rank, key.seed, key.n_sequences, key.seq_len}) {
    w.put<std::uint64_t>(v);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(trace.blocks.size()));
  for (const auto& b : trace.blocks) {
    w.put<std::uint8_t>(b ? 1 : 0);
    if (!b) continue;
    for (const auto& part : *b) {
      w.put<std::uint64_t>(part.size());
      w.put_bytes(part.data(), part.size() * sizeof(double));
    }
  }
  return std::move(w.str());
}

std::optional<GradientTrace> parse_anchor(const std::string& bytes, const AnchorKey& key) {
  Reader r(bytes, "anchor cache");
  if (r.get_string(4) != std::string(kAnchorMagic, 4)) throw IoError("not an anchor cache file (bad magic)");
  if (r.get<std::uint16_t>() != kAnchorVersion) throw IoError("unsupported anchor cache version");
  AnchorKey stored;
  for (auto* f : {&stored.checkpoint_hash, &stored.calib_hash, &stored.rank, &stored.seed, &stored.n_sequences,
                  &stored.seq_len}) {
    *f = r.get<std::uint64_t>();
  }
  if (!(stored == key)) return std::nullopt;
  GradientTrace trace;
  trace.blocks.resize(r.get<std::uint32_t>());
  for (auto& b : trace.blocks) {
    if (!r.get<std::uint8_t>()) continue;
    std::array<std::vector<double>, 2> parts;
    for (auto& part : parts) {
      const auto n = r.get<std::uint64_t>();
      if (n > r.remaining() / sizeof(double)) throw IoError("anchor cache is truncated");
      part.resize(n);
      r.get_bytes(part.data(), n * sizeof(double));
    }
    b = std::move(parts);
  }
  if (r.remaining() != 0) throw IoError("trailing bytes in anchor cache");
  return trace;
}

// ---------------------------------------------------------------- JSON

namespace {

double round4(double x) { return std::round(x * 1e4) / 1e4; }

json encoding_json(const ArchEncoding& enc) {
  json depth = json::array(), kappa = json::array();
  for (auto d : enc.depth) depth.push_back(int(d));
  for (const auto& w : enc.width) kappa.push_back({round4(w.attn), round4(w.mlp)});
  return {{"depth", depth}, {"kappa", kappa}};
}

json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

json terms_json(const std::vector<SubBlockScore>& terms) {
  json out = json::array();
  for (const auto& t : terms) {
    out.push_back({{"block", t.block},
                   {"sub_block", sub_block_name(t.kind)},
                   {"rho", t.rho},
                   {"retention", t.retention},
                   {"degenerate", t.degenerate}});
  }
  return out;
}

}  // namespace

std::string encoding_to_json(const ArchEncoding& enc) { return encoding_json(enc).dump(); }

ArchEncoding encoding_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InputError(std::string("encoding is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("depth") || !j.contains("kappa") || !j["depth"].is_array() ||
      !j["kappa"].is_array()) {
    throw InputError("encoding JSON needs \"depth\" and \"kappa\" arrays");
  }
  ArchEncoding enc;
  for (const auto& d : j["depth"]) {
    if (!d.is_number_integer() || (d.get<int>() != 0 && d.get<int>() != 1)) {
      throw InputError("depth entries must be 0 or 1");
    }
    enc.depth.push_back(static_cast<std::uint8_t>(d.get<int>()));
  }
  for (const auto& k : j["kappa"]) {
    if (!k.is_array() || k.size() != 2 || !k[0].is_number() || !k[1].is_number()) {
      throw InputError("kappa entries must be [attn, mlp] pairs");
    }
    enc.width.push_back({k[0].get<double>(), k[1].get<double>()});
  }
  if (enc.depth.size() != enc.width.size()) throw InputError("depth and kappa lengths differ");
  return enc;
}

std::string masks_to_json(const WidthMaskSet& masks) {
  json blocks = json::array();
  for (const auto& b : masks.blocks) {
    if (!b) {
      blocks.push_back(nullptr);
      continue;
    }
    json attn = json::array(), mlp = json::array();
    for (std::size_t i = 0; i < b->attn.size(); ++i)
      if (b->attn[i]) attn.push_back(i);
    for (std::size_t i = 0; i < b->mlp.size(); ++i)
      if (b->mlp[i]) mlp.push_back(i);
    blocks.push_back({{"attn_keep", attn}, {"mlp_keep", mlp}});
  }
  const char* gran = masks.granularity == AttentionGranularity::head ? "head" : "channel";
  return json{{"granularity", gran}, {"blocks", blocks}}.dump();
}

std::string proxy_result_to_json(const ProxyResult& r, std::size_t params) {
  return json{{"phi", number_or_null(r.phi)}, {"params", params}, {"terms", terms_json(r.terms)}}.dump();
}

std::string search_record_to_json(const SearchLogRecord& rec) {
  json j = encoding_json(rec.enc);
  j["iteration"] = rec.iteration;
  j["candidate"] = rec.candidate_id;
  j["params"] = rec.params;
  j["phi"] = number_or_null(rec.phi);
  j["terms"] = terms_json(rec.terms);
  j["cached"] = rec.cached;
  j["wall_seconds"] = rec.wall_seconds;
  return j.dump();
}

// ---------------------------------------------------------------- config

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Strips a trailing comment that is not inside a quoted string.
std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

ConfigValue parse_value(const std::string& raw, std::size_t line) {
  const auto where = " on line " + std::to_string(line);
  if (raw.empty()) throw ConfigError("missing value" + where);
  if (raw.front() == '"') {
    if (raw.size() < 2 || raw.back() != '"') throw ConfigError("unterminated string" + where);
    std::string out;
    for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
      if (raw[i] == '\\' && i + 2 < raw.size()) {
        const char c = raw[++i];
        out += c == 'n' ? '\n' : c == 't' ? '\t' : c;
      } else {
        out += raw[i];
      }
    }
    return out;
  }
  if (raw == "true") return true;
  if (raw == "false") return false;
  std::string digits;
  for (char c : raw)
    if (c != '_') digits += c;
  const bool is_float = digits.find_first_of(".eE") != std::string::npos || digits == "inf" || digits == "nan";
  try {
    std::size_t used = 0;
    if (is_float) {
      const double v = std::stod(digits, &used);
      if (used == digits.size()) return v;
    } else {
      const long long v = std::stoll(digits, &used, 10);
      if (used == digits.size()) return static_cast<std::int64_t>(v);
    }
  } catch (const std::exception&) {
  }
  throw ConfigError("cannot parse value '" + raw + "'" + where);
}

}  // namespace

std::map<std::string, ConfigValue> parse_flat_toml(const std::string& text) {
  std::map<std::string, ConfigValue> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') throw ConfigError("tables are not supported (line " + std::to_string(n) + ")");
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value on line " + std::to_string(n));
    const auto key = trim(line.substr(0, eq));
    if (key.empty() || key.find_first_not_of("abcdefghijklmnopqrstuvwxyz0123456789_") != std::string::npos) {
      throw ConfigError("invalid key '" + key + "' on line " + std::to_string(n));
    }
    if (out.count(key)) throw ConfigError("duplicate key '" + key + "' on line " + std::to_string(n));
    out.emplace(key, parse_value(trim(line.substr(eq + 1)), n));
  }
  return out;
}

namespace {

class Binder {
 public:
  explicit Binder(std::map<std::string, ConfigValue> values) : values_(std::move(values)) {}

  template <typename T>
  void bind(const std::string& key, T& field) {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    const ConfigValue v = it->second;
    values_.erase(it);
    if constexpr (std::is_same_v<T, bool>) {
      if (!std::holds_alternative<bool>(v)) fail(key, "a boolean");
      field = std::get<bool>(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!std::holds_alternative<std::string>(v)) fail(key, "a string");
      field = std::get<std::string>(v);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (auto* i = std::get_if<std::int64_t>(&v)) {
        field = static_cast<T>(*i);
      } else if (auto* d = std::get_if<double>(&v)) {
        field = static_cast<T>(*d);
      } else {
        fail(key, "a number");
      }
    } else {
      auto* i = std::get_if<std::int64_t>(&v);
      if (!i || *i < 0) fail(key, "a non-negative integer");
      field = static_cast<T>(*i);
    }
  }

  void finish() const {
    if (!values_.empty()) throw ConfigError("unknown config key '" + values_.begin()->first + "'");
  }

 private:
  [[noreturn]] static void fail(const std::string& key, const char* what) {
    throw ConfigError("config key '" + key + "' must be " + std::string(what));
  }
  std::map<std::string, ConfigValue> values_;
};

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig rc;
  Binder b(parse_flat_toml(text));
  auto& m = rc.model;
  b.bind("n_layers", m.n_layers);
  b.bind("d_model", m.d_model);
  b.bind("n_heads", m.n_heads);
  b.bind("n_kv_heads", m.n_kv_heads);
  b.bind("d_head", m.d_head);
  b.bind("d_ff", m.d_ff);
  b.bind("vocab_size", m.vocab_size);
  b.bind("context_length", m.context_length);
  b.bind("rounding_multiple", m.rounding_multiple);
  std::string granularity = "head";
  b.bind("attn_granularity", granularity);

  auto& t = rc.train;
  b.bind("train_steps", t.steps);
  b.bind("batch_size", t.batch_size);
  b.bind("seq_len", t.seq_len);
  b.bind("learning_rate", t.learning_rate);
  b.bind("momentum", t.momentum);
  b.bind("grad_clip", t.grad_clip);
  b.bind("warmup_fraction", t.warmup_fraction);
  b.bind("train_seed", t.seed);

  auto& s = rc.search;
  b.bind("population", s.population);
  b.bind("elites", s.elites);
  b.bind("crossover_rate", s.crossover_rate);
  b.bind("mutation_rate_depth", s.mutation_rate_depth);
  b.bind("mutation_rate_width", s.mutation_rate_width);
  b.bind("iterations", s.iterations);
  b.bind("budget", s.budget);
  b.bind("min_depth", s.min_depth);
  b.bind("min_ratio", s.min_ratio);
  b.bind("jitter_sigma", s.jitter_sigma);
  b.bind("search_seed", s.seed);
  b.bind("workers", s.workers);
  std::string init = "importance";
  b.bind("init", init);

  b.bind("corpus_path", rc.corpus_path);
  b.bind("synthetic_bytes", rc.synthetic_bytes);
  b.bind("corpus_seed", rc.corpus_seed);
  b.bind("train_fraction", rc.train_fraction);
  b.bind("calib_fraction", rc.calib_fraction);
  b.bind("init_seed", rc.init_seed);
  b.bind("adapter_rank", rc.adapter_rank);
  b.bind("adapter_seed", rc.adapter_seed);
  b.bind("calib_sequences", rc.calib_sequences);
  b.bind("calib_seed", rc.calib_seed);
  b.bind("heldout_sequences", rc.heldout_sequences);
  b.bind("recovery_steps", rc.recovery_steps);
  b.bind("budget_fraction", rc.budget_fraction);
  b.bind("pool_size", rc.pool_size);
  b.bind("pool_seed", rc.pool_seed);
  b.bind("metric", rc.metric);
  b.bind("checkpoint_path", rc.checkpoint_path);
  b.bind("output_dir", rc.output_dir);
  b.finish();

  if (granularity == "head") {
    m.attn_granularity = AttentionGranularity::head;
  } else if (granularity == "channel") {
    m.attn_granularity = AttentionGranularity::channel;
  } else {
    throw ConfigError("attn_granularity must be \"head\" or \"channel\"");
  }
  if (init == "importance") {
    s.init = InitStrategy::importance;
  } else if (init == "uniform") {
    s.init = InitStrategy::uniform;
  } else {
    throw ConfigError("init must be \"importance\" or \"uniform\"");
  }
  if (rc.metric != "loss" && rc.metric != "perplexity") throw ConfigError("metric must be \"loss\" or \"perplexity\"");
  m.validate();
  t.validate();
  if (rc.adapter_rank == 0) throw ConfigError("adapter_rank must be >= 1");
  if (rc.calib_sequences == 0 || rc.heldout_sequences == 0) throw ConfigError("batch sizes must be positive");
  if (rc.seq_len() < 2 || rc.seq_len() > m.context_length) {
    throw ConfigError("seq_len must lie in [2, context_length]");
  }
  if (!(rc.budget_fraction > 0.0 && rc.budget_fraction <= 1.0)) throw ConfigError("budget_fraction must lie in (0, 1]");
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_file(path)); }

CorpusSplits load_splits(const RunConfig& rc) {
  const Corpus corpus = rc.corpus_path.empty() ? corpus_from_bytes(synthesize_text(rc.synthetic_bytes, rc.corpus_seed))
                                               : load_corpus(rc.corpus_path);
  return split_corpus(corpus, rc.train_fraction, rc.calib_fraction);
}

CalibrationBatch calibration_batch(const RunConfig& rc, const CorpusSplits& splits) {
  return sample_batch(splits.calibration, rc.calib_sequences, rc.seq_len(), rc.calib_seed);
}

CalibrationBatch heldout_batch(const RunConfig& rc, const CorpusSplits& splits) {
  return tile_batch(splits.heldout, rc.seq_len(), rc.heldout_sequences);
}

GradientTrace load_or_compute_anchor(SuperNetwork& net, const CalibrationBatch& calib,
                                     const std::filesystem::path& cache) {
  if (!net.has_adapters()) throw StateError("anchor traces need adapters attached");
  AnchorKey key;
  {
    // Hash of the base weights only; adapters are covered by rank and seed.
    key.checkpoint_hash = weight_checksum(net);
    key.calib_hash = calib.content_hash();
    key.rank = net.adapter_rank();
    key.seed = net.adapter_seed();
    key.n_sequences = calib.size();
    key.seq_len = calib.sequence_length();
  }
  if (!cache.empty() && std::filesystem::exists(cache)) {
    if (auto trace = parse_anchor(read_file(cache), key)) return *trace;
  }
  GradientTrace trace = compute_trace(net, calib);
  if (!cache.empty()) write_atomic(cache, serialize_anchor(key, trace));
  return trace;
}

std::size_t resolve_budget(double value, std::size_t dense) {
  if (!(value > 0.0) || !std::isfinite(value)) throw ConfigError("budget must be positive");
  if (value <= 1.0) return static_cast<std::size_t>(std::floor(value * double(dense)));
  if (value != std::floor(value)) throw ConfigError("an absolute budget must be a whole parameter count");
  return static_cast<std::size_t>(value);
}

std::size_t resolve_budget(const std::string& text, std::size_t dense) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ConfigError("cannot parse budget '" + text + "'");
  }
  if (used != text.size()) throw ConfigError("cannot parse budget '" + text + "'");
  return resolve_budget(v, dense);
}

}  // namespace gradtrace::io
