#include "gradtrace/search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>
#include <thread>
#include <unordered_map>

#include "gradtrace/errors.hpp"

namespace gradtrace {

void SearchConfig::validate() const {
  if (population == 0) throw ConfigError("population must be positive");
  if (elites == 0 || elites > population) throw ConfigError("elites must be in [1, population]");
  auto in_unit = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!in_unit(crossover_rate) || !in_unit(mutation_rate_depth) || !in_unit(mutation_rate_width)) {
    throw ConfigError("crossover and mutation rates must lie in [0, 1]");
  }
  if (!(min_ratio > 0.0 && min_ratio <= 1.0)) throw ConfigError("min_ratio must lie in (0, 1]");
  if (!(jitter_sigma >= 0.0)) throw ConfigError("jitter_sigma must be non-negative");
  if (budget == 0) throw ConfigError("parameter budget must be positive");
  if (workers == 0) throw ConfigError("workers must be positive");
}

ImportancePrior compute_importance_prior(const SaliencyScores& sal) {
  ImportancePrior p;
  p.block.resize(sal.attn_channel.size());
  for (std::size_t l = 0; l < p.block.size(); ++l) {
    const auto& a = sal.attn_channel[l];
    const auto& m = sal.mlp_channel[l];
    const double total = std::accumulate(a.begin(), a.end(), 0.0) + std::accumulate(m.begin(), m.end(), 0.0);
    p.block[l] = total / double(a.size() + m.size());
  }
  return p;
}

ImportancePrior compute_importance_prior(const SuperNetwork& net, const ActivationStats& stats) {
  return compute_importance_prior(compute_saliency(net, stats));
}

SearchSpace make_search_space(const ModelConfig& model, const ImportancePrior& prior, const SearchConfig& cfg) {
  cfg.validate();
  if (prior.block.size() != model.n_layers) {
    throw ConfigError("importance prior has " + std::to_string(prior.block.size()) + " entries for " +
                      std::to_string(model.n_layers) + " blocks");
  }
  SearchSpace s;
  s.model = model;
  s.prior = prior;
  s.budget = cfg.budget;
  s.limits.min_depth = cfg.effective_min_depth(model.n_layers);
  s.limits.min_ratio = cfg.min_ratio;
  if (s.limits.min_depth > model.n_layers) throw ConfigError("min_depth exceeds the number of blocks");
  return s;
}

namespace {

double clamp_ratio(double r, double min_ratio) { return std::clamp(r, min_ratio, 1.0); }

ArchEncoding allocation(const std::vector<double>& rel, double beta, double min_ratio) {
  ArchEncoding e = ArchEncoding::identity(rel.size());
  for (std::size_t l = 0; l < rel.size(); ++l) {
    const double r = clamp_ratio(beta * rel[l], min_ratio);
    e.width[l] = {r, r};
  }
  return e;
}

}  // namespace

ArchEncoding anchor_encoding(const SearchSpace& space, InitStrategy strategy) {
  const std::size_t L = space.model.n_layers;
  const std::size_t dense = dense_parameter_count(space.model);
  if (space.budget >= dense) return ArchEncoding::identity(L);

  std::vector<double> rel(L, 1.0);
  if (strategy == InitStrategy::importance) {
    const double top = *std::max_element(space.prior.block.begin(), space.prior.block.end());
    if (!(top > 0.0) || !std::isfinite(top)) throw NumericalError("importance prior has no positive entry");
    for (std::size_t l = 0; l < L; ++l) rel[l] = std::max(0.0, space.prior.block[l]) / top;
  }
  const double floor = space.limits.min_ratio;
  if (parameter_count(space.model, allocation(rel, 0.0, floor)) > space.budget) {
    throw ConfigError("budget " + std::to_string(space.budget) +
                      " is below the smallest full-depth model at the minimum ratio");
  }
  // Upper end: every positive entry saturated at 1.
  double hi = 1.0;
  for (double r : rel) {
    if (r > 0.0) hi = std::max(hi, 1.0 / r);
  }
  if (parameter_count(space.model, allocation(rel, hi, floor)) <= space.budget) return allocation(rel, hi, floor);
  double lo = 0.0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (parameter_count(space.model, allocation(rel, mid, floor)) <= space.budget) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return allocation(rel, lo, floor);
}

std::vector<ArchEncoding> init_population(const SearchSpace& space, const SearchConfig& cfg) {
  return std::vector<ArchEncoding>(cfg.population, anchor_encoding(space, cfg.init));
}

void repair_depth(std::vector<std::uint8_t>& depth, const ImportancePrior& prior, std::size_t min_depth) {
  std::size_t active = static_cast<std::size_t>(std::count_if(depth.begin(), depth.end(), [](auto d) { return d; }));
  if (active >= min_depth) return;
  std::vector<std::size_t> order(depth.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return prior.block[a] > prior.block[b]; });
  for (std::size_t l : order) {
    if (active >= min_depth) break;
    if (!depth[l]) {
      depth[l] = 1;
      ++active;
    }
  }
}

std::vector<std::uint8_t> crossover_depth(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                                          std::mt19937_64& rng, const ImportancePrior& prior,
                                          std::size_t min_depth) {
  if (a.size() != b.size() || a.empty()) throw InputError("crossover_depth: parents differ in length");
  const std::size_t L = a.size();
  // Uniform over the L(L+1)/2 ordered pairs i <= j.
  std::uniform_int_distribution<std::size_t> pick(0, L * (L + 1) / 2 - 1);
  std::size_t k = pick(rng), i = 0;
  while (k >= L - i) {
    k -= L - i;
    ++i;
  }
  return crossover_depth_range(a, b, i, i + k, prior, min_depth);
}

std::vector<std::uint8_t> crossover_depth_range(const std::vector<std::uint8_t>& a,
                                                const std::vector<std::uint8_t>& b, std::size_t i, std::size_t j,
                                                const ImportancePrior& prior, std::size_t min_depth) {
  if (a.size() != b.size() || i > j || j >= a.size()) throw InputError("crossover_depth: invalid range");
  std::vector<std::uint8_t> child = a;
  for (std::size_t l = i; l <= j; ++l) child[l] = b[l];
  repair_depth(child, prior, min_depth);
  return child;
}

std::vector<WidthRatio> crossover_width(const std::vector<WidthRatio>& a, const std::vector<WidthRatio>& b,
                                        std::mt19937_64& rng, double min_ratio) {
  if (a.size() != b.size()) throw InputError("crossover_width: parents differ in length");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<WidthRatio> child(a.size());
  for (std::size_t l = 0; l < a.size(); ++l) {
    const double aa = unit(rng);
    const double am = unit(rng);
    // b + alpha (a - b) is exact when the parents agree.
    child[l].attn = clamp_ratio(b[l].attn + aa * (a[l].attn - b[l].attn), min_ratio);
    child[l].mlp = clamp_ratio(b[l].mlp + am * (a[l].mlp - b[l].mlp), min_ratio);
  }
  return child;
}

ArchEncoding mutate(const ArchEncoding& enc, const MutationRates& rates, std::mt19937_64& rng,
                    const ImportancePrior& prior, const EncodingLimits& limits) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  ArchEncoding out = enc;
  for (auto& d : out.depth) {
    if (unit(rng) < rates.depth) d = d ? 0 : 1;
  }
  repair_depth(out.depth, prior, limits.min_depth);
  auto jitter = [&](double& r) {
    if (unit(rng) < rates.width) {
      const double eps = rates.jitter_sigma * noise(rng);
      r = clamp_ratio(r * (1.0 + eps), limits.min_ratio);
    }
  };
  for (auto& w : out.width) {
    jitter(w.attn);
    jitter(w.mlp);
  }
  return out;
}

ArchEncoding repair_budget(const ArchEncoding& enc, const ModelConfig& model, std::size_t budget, double min_ratio) {
  if (parameter_count(model, enc) <= budget) return enc;
  auto scaled = [&](double gamma) {
    ArchEncoding e = enc;
    for (auto& w : e.width) {
      w.attn = clamp_ratio(gamma * w.attn, min_ratio);
      w.mlp = clamp_ratio(gamma * w.mlp, min_ratio);
    }
    return e;
  };
  if (parameter_count(model, scaled(0.0)) > budget) return enc;
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 20; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (parameter_count(model, scaled(mid)) <= budget) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return scaled(lo);
}

std::optional<ArchEncoding> sample_feasible_encoding(const SearchSpace& space, std::mt19937_64& rng) {
  const std::size_t L = space.model.n_layers;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> ratio(space.limits.min_ratio, 1.0);
  ArchEncoding e = ArchEncoding::identity(L);
  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<std::size_t> n_active(space.limits.min_depth, L);
  const std::size_t keep = n_active(rng);
  for (std::size_t i = 0; i < L; ++i) e.depth[order[i]] = i < keep ? 1 : 0;
  for (auto& w : e.width) {
    w.attn = ratio(rng);
    w.mlp = ratio(rng);
  }
  e = repair_budget(e, space.model, space.budget, space.limits.min_ratio);
  if (parameter_count(space.model, e) > space.budget) return std::nullopt;
  return e;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

namespace {

std::string cache_key(const ArchEncoding& e) {
  std::string key(reinterpret_cast<const char*>(e.depth.data()), e.depth.size());
  for (const auto& w : e.width) {
    char buf[2 * sizeof(double)];
    std::memcpy(buf, &w.attn, sizeof(double));
    std::memcpy(buf + sizeof(double), &w.mlp, sizeof(double));
    key.append(buf, sizeof(buf));
  }
  return key;
}

struct Scored {
  ProxyResult result;
  double seconds = 0.0;
};

// Scores `jobs` with one fitness per worker; slot order fixes the result
// order, so the outcome does not depend on the worker count.
std::vector<Scored> score_all(const std::vector<ArchEncoding>& jobs, std::vector<Fitness>& workers) {
  std::vector<Scored> out(jobs.size());
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < jobs.size(); i += workers.size()) {
      const auto t0 = std::chrono::steady_clock::now();
      out[i].result = workers[w](jobs[i]);
      out[i].seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  };
  if (workers.size() == 1 || jobs.size() <= 1) {
    run(0);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers.size());
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers.size(); ++w) {
    threads.emplace_back([&, w] {
      try {
        run(w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace

SearchResult run_search(const SearchSpace& space, const SearchConfig& cfg, const FitnessFactory& factory,
                        const LogSink& sink) {
  cfg.validate();
  if (!factory) throw ConfigError("run_search needs a fitness factory");
  std::vector<Fitness> workers;
  for (std::size_t w = 0; w < cfg.workers; ++w) workers.push_back(factory());

  const MutationRates rates{cfg.mutation_rate_depth, cfg.mutation_rate_width, cfg.jitter_sigma};
  std::unordered_map<std::string, ProxyResult> cache;
  std::vector<ArchEncoding> population = init_population(space, cfg);
  SearchResult result;
  result.best.enc = population.front();
  result.best.params = parameter_count(space.model, population.front());
  std::size_t next_id = 0;

  // Scores the current population, logs it, and returns per-member fitness.
  auto evaluate = [&](std::size_t iteration) {
    std::vector<double> fitness(population.size(), kInfeasible);
    std::vector<ArchEncoding> jobs;
    std::unordered_map<std::string, std::size_t> pending;
    for (const auto& e : population) {
      if (parameter_count(space.model, e) > space.budget) continue;
      const auto key = cache_key(e);
      if (cache.count(key) || pending.count(key)) continue;
      pending.emplace(key, jobs.size());
      jobs.push_back(e);
    }
    const auto scored = score_all(jobs, workers);
    std::vector<bool> fresh_logged(jobs.size(), false);
    for (std::size_t i = 0; i < population.size(); ++i) {
      const auto& e = population[i];
      SearchLogRecord rec;
      rec.iteration = iteration;
      rec.candidate_id = next_id++;
      rec.enc = e;
      rec.params = parameter_count(space.model, e);
      if (rec.params <= space.budget) {
        const auto key = cache_key(e);
        auto it = pending.find(key);
        if (it != pending.end() && !fresh_logged[it->second]) {
          fresh_logged[it->second] = true;
          const auto& s = scored[it->second];
          cache.emplace(key, s.result);
          rec.wall_seconds = s.seconds;
        } else {
          rec.cached = true;
        }
        const ProxyResult& pr = cache.at(key);
        rec.phi = pr.phi;
        rec.terms = pr.terms;
        fitness[i] = std::isfinite(pr.phi) ? pr.phi : kInfeasible;
        if (fitness[i] > result.best.fitness) {
          result.best = Candidate{e, rec.params, fitness[i], pr};
          result.feasible = true;
        }
      }
      if (sink) sink(rec);
      result.log.push_back(std::move(rec));
    }
    result.best_phi_by_iteration.push_back(result.best.fitness);
    return fitness;
  };

  if (cfg.iterations == 0) {
    evaluate(0);
    return result;
  }

  for (std::size_t t = 1; t <= cfg.iterations; ++t) {
    const auto fitness = evaluate(t);
    if (t == cfg.iterations) break;

    std::vector<std::size_t> order(population.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fitness[a] > fitness[b]; });
    std::vector<ArchEncoding> next;
    next.reserve(cfg.population);
    for (std::size_t k = 0; k < cfg.elites; ++k) next.push_back(population[order[k]]);
    const std::vector<ArchEncoding> elites(next.begin(), next.end());

    for (std::size_t slot = next.size(); slot < cfg.population; ++slot) {
      std::mt19937_64 rng(derive_seed(cfg.seed, t, slot));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      std::uniform_int_distribution<std::size_t> parent(0, elites.size() - 1);
      ArchEncoding child;
      if (unit(rng) < cfg.crossover_rate) {
        const auto& a = elites[parent(rng)];
        const auto& b = elites[parent(rng)];
        child.depth = crossover_depth(a.depth, b.depth, rng, space.prior, space.limits.min_depth);
        child.width = crossover_width(a.width, b.width, rng, space.limits.min_ratio);
      } else {
        child = elites[parent(rng)];
      }
      child = mutate(child, rates, rng, space.prior, space.limits);
      next.push_back(repair_budget(child, space.model, space.budget, space.limits.min_ratio));
    }
    population = std::move(next);
  }
  return result;
}

FitnessFactory proxy_fitness(const SuperNetwork& net, const SaliencyScores& sal, const CalibrationBatch& calib,
                             const GradientTrace& anchor) {
  if (!net.has_adapters()) throw StateError("proxy fitness needs a network with adapters attached");
  return [&net, &sal, &calib, &anchor]() -> Fitness {
    auto replica = std::make_shared<SuperNetwork>(net.clone());
    return [replica, &sal, &calib, &anchor](const ArchEncoding& enc) {
      return score(*replica, enc, sal, calib, anchor);
    };
  };
}

}  // namespace gradtrace
