#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "gradtrace/calibration.hpp"
#include "gradtrace/encoding.hpp"
#include "gradtrace/masking.hpp"
#include "gradtrace/model.hpp"
#include "gradtrace/proxy.hpp"

namespace gradtrace {

enum class InitStrategy { importance, uniform };

struct SearchConfig {
  std::size_t population = 30;
  std::size_t elites = 10;
  double crossover_rate = 0.7;
  double mutation_rate_depth = 0.2;
  double mutation_rate_width = 0.2;
  std::size_t iterations = 50;
  std::size_t budget = 0;     // parameter count C
  std::size_t min_depth = 0;  // 0 selects ceil(L / 2)
  double min_ratio = 0.05;
  double jitter_sigma = 0.1;
  std::uint64_t seed = 0;
  InitStrategy init = InitStrategy::importance;
  std::size_t workers = 1;

  // Throws ConfigError on inconsistent settings.
  void validate() const;
  std::size_t effective_min_depth(std::size_t n_layers) const {
    return min_depth ? min_depth : (n_layers + 1) / 2;
  }
};

// Per-block importance: mean activation-weighted saliency over all maskable
// channels of the block.
struct ImportancePrior {
  std::vector<double> block;
};

ImportancePrior compute_importance_prior(const SaliencyScores& sal);
ImportancePrior compute_importance_prior(const SuperNetwork& net, const ActivationStats& stats);

inline constexpr double kInfeasible = -std::numeric_limits<double>::infinity();

struct Candidate {
  ArchEncoding enc;
  std::size_t params = 0;
  double fitness = kInfeasible;
  std::optional<ProxyResult> proxy;
};

struct SearchLogRecord {
  std::size_t iteration = 0;  // 1-based
  std::size_t candidate_id = 0;
  ArchEncoding enc;
  std::size_t params = 0;
  double phi = kInfeasible;
  std::vector<SubBlockScore> terms;
  double wall_seconds = 0.0;
  bool cached = false;
};

struct SearchResult {
  Candidate best;
  bool feasible = false;
  std::vector<double> best_phi_by_iteration;
  std::vector<SearchLogRecord> log;
};

// Scores one encoding. Each worker owns its own instance.
using Fitness = std::function<ProxyResult(const ArchEncoding&)>;
using FitnessFactory = std::function<Fitness()>;

// Everything the operators need besides the RNG.
struct SearchSpace {
  ModelConfig model;
  ImportancePrior prior;
  std::size_t budget = 0;
  EncodingLimits limits;
};

SearchSpace make_search_space(const ModelConfig& model, const ImportancePrior& prior, const SearchConfig& cfg);

// Anchor allocation r_l = clamp(beta * I_l / max_k I_k, min_ratio, 1) with
// beta found by bisection as the largest value keeping params <= C.
ArchEncoding anchor_encoding(const SearchSpace& space, InitStrategy strategy = InitStrategy::importance);

// P copies of the anchor.
std::vector<ArchEncoding> init_population(const SearchSpace& space, const SearchConfig& cfg);

// Reactivates the most important inactive blocks until min_depth is met.
void repair_depth(std::vector<std::uint8_t>& depth, const ImportancePrior& prior, std::size_t min_depth);

// Child takes `b` on a uniformly drawn range [i, j] and `a` elsewhere.
std::vector<std::uint8_t> crossover_depth(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                                          std::mt19937_64& rng, const ImportancePrior& prior,
                                          std::size_t min_depth);

// The deterministic half of crossover_depth for a fixed range [i, j].
std::vector<std::uint8_t> crossover_depth_range(const std::vector<std::uint8_t>& a,
                                                const std::vector<std::uint8_t>& b, std::size_t i, std::size_t j,
                                                const ImportancePrior& prior, std::size_t min_depth);

// Per sub-block convex blend with independent alpha ~ U(0, 1).
std::vector<WidthRatio> crossover_width(const std::vector<WidthRatio>& a, const std::vector<WidthRatio>& b,
                                        std::mt19937_64& rng, double min_ratio);

struct MutationRates {
  double depth = 0.2;
  double width = 0.2;
  double jitter_sigma = 0.1;
};

ArchEncoding mutate(const ArchEncoding& enc, const MutationRates& rates, std::mt19937_64& rng,
                    const ImportancePrior& prior, const EncodingLimits& limits);

// Scales every ratio by the largest gamma <= 1 (20 bisection steps) that
// meets the budget. Infeasible-at-the-floor encodings are returned as-is.
ArchEncoding repair_budget(const ArchEncoding& enc, const ModelConfig& model, std::size_t budget, double min_ratio);

// Random depth (at least min_depth active) and ratios ~ U(min_ratio, 1),
// rescaled to the budget. Returns nullopt when the repair cannot reach C.
std::optional<ArchEncoding> sample_feasible_encoding(const SearchSpace& space, std::mt19937_64& rng);

// Deterministic seed for an (iteration, slot) pair.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

using LogSink = std::function<void(const SearchLogRecord&)>;

SearchResult run_search(const SearchSpace& space, const SearchConfig& cfg, const FitnessFactory& factory,
                        const LogSink& sink = {});

// Fitness backed by the gradient-trace proxy on a private replica of `net`
// (which must carry adapters). The anchor, saliency and batch are shared
// read-only and must outlive every produced Fitness.
FitnessFactory proxy_fitness(const SuperNetwork& net, const SaliencyScores& sal, const CalibrationBatch& calib,
                             const GradientTrace& anchor);

}  // namespace gradtrace
