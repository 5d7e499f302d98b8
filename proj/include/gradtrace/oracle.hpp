#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gradtrace/calibration.hpp"
#include "gradtrace/corpus.hpp"
#include "gradtrace/encoding.hpp"
#include "gradtrace/masking.hpp"
#include "gradtrace/model.hpp"
#include "gradtrace/proxy.hpp"

namespace gradtrace {

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 0;  // 0 selects the model context length
  double learning_rate = 0.05;
  double momentum = 0.9;
  double grad_clip = 1.0;  // global L2 norm; 0 disables clipping
  double warmup_fraction = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainReport {
  std::vector<double> losses;  // one per step
  double final_loss() const { return losses.empty() ? 0.0 : losses.back(); }
};

using TrainProgress = std::function<void(std::size_t step, double loss)>;

// SGD with momentum on every base weight, cosine decay after a linear warmup.
// Requires a pristine network without adapters. When gates are installed the
// pruned weights are re-zeroed after every step. Throws NumericalError naming
// the step on a non-finite loss.
TrainReport train_base(SuperNetwork& net, const Corpus& train, const TrainConfig& cfg,
                       const TrainProgress& progress = {});

// Mean next-token cross-entropy over `batch`, evaluated in chunks of
// `chunk` sequences. The network must not carry adapters.
double heldout_loss(const SuperNetwork& net, const CalibrationBatch& batch, std::size_t chunk = 8);

// Non-overlapping windows of `length` tokens from the start of `segment`,
// at most `max_sequences` of them.
CalibrationBatch tile_batch(const Corpus& segment, std::size_t length, std::size_t max_sequences);

enum class MetricKind { loss, perplexity };

struct RecoveryConfig {
  std::size_t steps = 0;
  TrainConfig train;  // steps field is ignored
};

// Heldout loss of the masked candidate. With recovery steps the candidate is
// fine-tuned on a private copy using `train`; otherwise masks are applied in
// place and restored, leaving `net` unchanged either way.
double true_metric(SuperNetwork& net, const ArchEncoding& enc, const SaliencyScores& sal,
                   const CalibrationBatch& heldout, const RecoveryConfig& recovery = {},
                   const Corpus* train = nullptr);

enum class ProxyVariant { dot, cosine, unweighted, full };

const char* proxy_variant_name(ProxyVariant v);
inline constexpr ProxyVariant kProxyVariants[] = {ProxyVariant::dot, ProxyVariant::cosine, ProxyVariant::unweighted,
                                                  ProxyVariant::full};

// Alternative aggregations of the same traces: raw inner product and cosine
// (both retention-weighted), unweighted mean correlation, and the full
// retention-weighted correlation sum.
double proxy_variant_score(ProxyVariant v, const GradientTrace& candidate, const GradientTrace& anchor,
                           const ArchEncoding& enc);

struct PoolEntry {
  ArchEncoding enc;
  std::size_t params = 0;
  double metric = 0.0;                   // heldout loss
  std::vector<double> proxy;             // indexed like kProxyVariants
};

struct VariantCorrelation {
  ProxyVariant variant = ProxyVariant::full;
  double spearman = 0.0;
  double kendall = 0.0;
  std::size_t n = 0;
};

struct PoolSettings {
  std::size_t adapter_rank = 8;
  std::uint64_t adapter_seed = 0;
  RecoveryConfig recovery;
  const Corpus* train = nullptr;  // required when recovery.steps > 0
  std::size_t workers = 1;
  bool with_metric = true;        // false skips the heldout evaluation
};

// Proxy variants and true metric for every encoding. `base` must be pristine
// and adapter-free; each worker scores on its own replicas, so results do
// not depend on the worker count.
std::vector<PoolEntry> evaluate_pool(const SuperNetwork& base, const std::vector<ArchEncoding>& pool,
                                     const SaliencyScores& sal, const CalibrationBatch& calib,
                                     const CalibrationBatch& heldout, const PoolSettings& settings);

// Rank agreement between each proxy variant and model quality. Quality is the
// negated loss (or negated perplexity) so a good proxy correlates positively.
std::vector<VariantCorrelation> validate_proxy(const std::vector<PoolEntry>& pool,
                                               MetricKind metric = MetricKind::loss);

std::string validation_csv(const std::vector<VariantCorrelation>& rows);

// Scatter of proxy against metric for one variant.
std::string scatter_svg(const std::vector<PoolEntry>& pool, ProxyVariant variant,
                        MetricKind metric = MetricKind::loss);

}  // namespace gradtrace
