#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "gradtrace/corpus.hpp"
#include "gradtrace/encoding.hpp"
#include "gradtrace/masking.hpp"
#include "gradtrace/model.hpp"
#include "gradtrace/oracle.hpp"
#include "gradtrace/proxy.hpp"
#include "gradtrace/search.hpp"

namespace gradtrace::io {

// Writes to a sibling temporary file and renames it over `path`.
void write_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------- checkpoint

enum class DType : std::uint8_t { f32 = 0, i32 = 1 };

struct StoredTensor {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> bytes;  // little-endian payload

  std::size_t numel() const;
};

// In-memory image of a checkpoint file. Tensor order is preserved, so
// serialize(parse(bytes)) reproduces `bytes` exactly.
struct Checkpoint {
  static constexpr std::uint16_t kVersion = 1;

  ModelConfig config;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint checkpoint_from_network(const SuperNetwork& net);

enum class RealizeMode { zeroed, sliced };

// Pruned checkpoint with the depth mask and kept-unit lists stored alongside
// the weights. Sliced mode drops pruned rows/columns and inactive blocks.
Checkpoint realize_checkpoint(const SuperNetwork& net, const ArchEncoding& enc, const WidthMaskSet& masks,
                              RealizeMode mode);

// Rebuilds a network; realized checkpoints come back with gates and depth
// installed and pruned weights zero-filled.
SuperNetwork network_from_checkpoint(const Checkpoint& ckpt);

bool is_realized(const Checkpoint& ckpt);

// ---------------------------------------------------------------- anchor cache

struct AnchorKey {
  std::uint64_t checkpoint_hash = 0;
  std::uint64_t calib_hash = 0;
  std::uint64_t rank = 0;
  std::uint64_t seed = 0;
  std::uint64_t n_sequences = 0;
  std::uint64_t seq_len = 0;

  friend bool operator==(const AnchorKey&, const AnchorKey&) = default;
};

std::string serialize_anchor(const AnchorKey& key, const GradientTrace& trace);
// Returns nullopt when the stored key differs from `key`.
std::optional<GradientTrace> parse_anchor(const std::string& bytes, const AnchorKey& key);

// ---------------------------------------------------------------- JSON

std::string encoding_to_json(const ArchEncoding& enc);
ArchEncoding encoding_from_json(const std::string& text);

std::string masks_to_json(const WidthMaskSet& masks);
std::string proxy_result_to_json(const ProxyResult& r, std::size_t params);
std::string search_record_to_json(const SearchLogRecord& rec);

// ---------------------------------------------------------------- run config

// Flat `key = value` document (TOML subset: comments, strings, integers,
// floats, booleans; no tables or arrays).
using ConfigValue = std::variant<bool, std::int64_t, double, std::string>;
std::map<std::string, ConfigValue> parse_flat_toml(const std::string& text);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SearchConfig search;

  std::string corpus_path;  // empty: synthetic corpus
  std::size_t synthetic_bytes = 1'000'000;
  std::uint64_t corpus_seed = 1;
  double train_fraction = 0.90;
  double calib_fraction = 0.05;

  std::uint64_t init_seed = 0;
  std::size_t adapter_rank = 8;
  std::uint64_t adapter_seed = 0;
  std::size_t calib_sequences = 8;
  std::uint64_t calib_seed = 0;
  std::size_t heldout_sequences = 64;
  std::size_t recovery_steps = 0;

  double budget_fraction = 0.6;  // used when search.budget is 0
  std::size_t pool_size = 30;
  std::uint64_t pool_seed = 0;
  std::string metric = "loss";  // loss | perplexity

  std::string checkpoint_path = "checkpoint.tnck";
  std::string output_dir = ".";

  // Sequence length used for calibration and heldout batches.
  std::size_t seq_len() const { return train.seq_len ? train.seq_len : model.context_length; }
};

// Unknown keys and mistyped values raise ConfigError.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

// Corpus named by the config (or the synthetic fallback), split into
// contiguous train / calibration / heldout segments.
CorpusSplits load_splits(const RunConfig& rc);
CalibrationBatch calibration_batch(const RunConfig& rc, const CorpusSplits& splits);
CalibrationBatch heldout_batch(const RunConfig& rc, const CorpusSplits& splits);

// Anchor trace for `net` (adapters attached), read from `cache` when its key
// matches and recomputed and rewritten otherwise. An empty path disables
// caching.
GradientTrace load_or_compute_anchor(SuperNetwork& net, const CalibrationBatch& calib,
                                     const std::filesystem::path& cache);

// Accepts a fraction in (0, 1] of `dense` or an absolute count > 1.
std::size_t resolve_budget(const std::string& text, std::size_t dense);
std::size_t resolve_budget(double value, std::size_t dense);

}  // namespace gradtrace::io
