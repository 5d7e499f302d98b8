#include "gradtrace/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include "gradtrace/autodiff.hpp"
#include "gradtrace/errors.hpp"
#include "gradtrace/stats.hpp"

namespace gradtrace {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train batch_size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1)");
}

namespace {

double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total) {
  const auto warmup = static_cast<std::size_t>(cfg.warmup_fraction * double(total));
  if (step < warmup) return cfg.learning_rate * double(step + 1) / double(warmup);
  const double span = double(std::max<std::size_t>(1, total - warmup));
  const double progress = double(step - warmup) / span;
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace

TrainReport train_base(SuperNetwork& net, const Corpus& train, const TrainConfig& cfg, const TrainProgress& progress) {
  cfg.validate();
  if (net.has_adapters()) throw StateError("detach adapters before training base weights");
  const std::size_t len = cfg.seq_len ? cfg.seq_len : net.config().context_length;
  if (len < 2) throw ConfigError("training sequences need at least two tokens");
  if (train.size() < len) throw InputError("training corpus is shorter than one sequence");

  auto weights = net.base_weights();
  std::vector<bool> was_trainable;
  for (auto& w : weights) {
    was_trainable.push_back(w.requires_grad());
    w.set_requires_grad(true);
    w.zero_grad();
  }
  std::vector<std::vector<float>> velocity;
  for (const auto& w : weights) velocity.emplace_back(w.numel(), 0.0f);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> offset(0, train.size() - len);
  TrainReport report;
  report.losses.reserve(cfg.steps);
  std::vector<std::int32_t> inputs, targets;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    inputs.clear();
    targets.clear();
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto start = train.tokens.begin() + static_cast<std::ptrdiff_t>(offset(rng));
      inputs.insert(inputs.end(), start, start + static_cast<std::ptrdiff_t>(len - 1));
      targets.insert(targets.end(), start + 1, start + static_cast<std::ptrdiff_t>(len));
    }
    double loss_value;
    {
      ad::Tape tape;
      Tensor logits = forward(net, tape, inputs, len - 1);
      Tensor loss = ad::cross_entropy_mean(tape, logits, targets);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericalError("non-finite training loss at step " + std::to_string(step));
      }
      tape.backward(loss);
    }
    double norm_sq = 0.0;
    for (auto& w : weights) {
      for (float g : w.grad()) norm_sq += double(g) * double(g);
    }
    if (!std::isfinite(norm_sq)) throw NumericalError("non-finite gradient at step " + std::to_string(step));
    double clip = 1.0;
    if (cfg.grad_clip > 0.0 && norm_sq > cfg.grad_clip * cfg.grad_clip) clip = cfg.grad_clip / std::sqrt(norm_sq);
    const auto lr = static_cast<float>(scheduled_lr(cfg, step, cfg.steps));
    const auto mu = static_cast<float>(cfg.momentum);
    for (std::size_t i = 0; i < weights.size(); ++i) {
      auto data = weights[i].data();
      auto grad = weights[i].grad();
      auto& v = velocity[i];
      for (std::size_t k = 0; k < v.size(); ++k) {
        v[k] = mu * v[k] + static_cast<float>(clip) * grad[k];
        data[k] -= lr * v[k];
      }
      weights[i].zero_grad();
    }
    rezero_pruned(net);
    report.losses.push_back(loss_value);
    if (progress) progress(step, loss_value);
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i].set_requires_grad(was_trainable[i]);
    if (!was_trainable[i]) weights[i].drop_grad();
  }
  return report;
}

double heldout_loss(const SuperNetwork& net, const CalibrationBatch& batch, std::size_t chunk) {
  if (net.has_adapters()) throw StateError("heldout evaluation expects a network without adapters");
  if (batch.empty()) throw InputError("heldout batch is empty");
  if (chunk == 0) chunk = batch.size();
  double weighted = 0.0;
  for (std::size_t first = 0; first < batch.size(); first += chunk) {
    const auto part = batch.slice(first, std::min(chunk, batch.size() - first));
    ad::Tape tape(false);
    Tensor logits = forward(net, tape, part.inputs(), part.positions());
    const double loss = ad::cross_entropy_mean(tape, logits, part.targets()).item();
    if (!std::isfinite(loss)) throw NumericalError("non-finite heldout loss");
    weighted += loss * double(part.size());
  }
  return weighted / double(batch.size());
}

CalibrationBatch tile_batch(const Corpus& segment, std::size_t length, std::size_t max_sequences) {
  if (length < 2 || max_sequences == 0) throw ConfigError("tile_batch needs length >= 2 and at least one sequence");
  const std::size_t n = std::min(max_sequences, segment.size() / length);
  if (n == 0) throw InputError("segment is shorter than one sequence");
  std::vector<std::vector<std::int32_t>> seqs;
  for (std::size_t i = 0; i < n; ++i) {
    const auto start = segment.tokens.begin() + static_cast<std::ptrdiff_t>(i * length);
    seqs.emplace_back(start, start + static_cast<std::ptrdiff_t>(length));
  }
  return CalibrationBatch(std::move(seqs));
}

double true_metric(SuperNetwork& net, const ArchEncoding& enc, const SaliencyScores& sal,
                   const CalibrationBatch& heldout, const RecoveryConfig& recovery, const Corpus* train) {
  const auto masks = realize_masks(enc, sal, net.config());
  if (recovery.steps == 0) {
    ScopedApply guard(net, enc, masks);
    return heldout_loss(net, heldout);
  }
  if (!train) throw ConfigError("recovery fine-tuning needs a training corpus");
  SuperNetwork copy = net.clone();
  if (copy.has_adapters()) copy.detach_adapters();
  ScopedApply guard(copy, enc, masks);
  TrainConfig tc = recovery.train;
  tc.steps = recovery.steps;
  train_base(copy, *train, tc);
  return heldout_loss(copy, heldout);
}

const char* proxy_variant_name(ProxyVariant v) {
  switch (v) {
    case ProxyVariant::dot: return "dot";
    case ProxyVariant::cosine: return "cosine";
    case ProxyVariant::unweighted: return "unweighted";
    case ProxyVariant::full: return "full";
  }
  return "?";
}

double proxy_variant_score(ProxyVariant v, const GradientTrace& candidate, const GradientTrace& anchor,
                           const ArchEncoding& enc) {
  const ProxyResult full = correlate_traces(candidate, anchor, enc);
  switch (v) {
    case ProxyVariant::full: return full.phi;
    case ProxyVariant::unweighted: {
      if (full.terms.empty()) return 0.0;
      double sum = 0.0;
      for (const auto& t : full.terms) sum += t.rho;
      return sum / double(full.terms.size());
    }
    case ProxyVariant::dot:
    case ProxyVariant::cosine: {
      double total = 0.0;
      for (const auto& t : full.terms) {
        const auto& g = candidate.at(t.block, t.kind);
        const auto& g0 = anchor.at(t.block, t.kind);
        double dot = 0.0, nn = 0.0, n0 = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          dot += g[i] * g0[i];
          nn += g[i] * g[i];
          n0 += g0[i] * g0[i];
        }
        double term = dot;
        if (v == ProxyVariant::cosine) term = (nn > 0.0 && n0 > 0.0) ? dot / std::sqrt(nn * n0) : 0.0;
        total += t.retention * term;
      }
      return total;
    }
  }
  return 0.0;
}

std::vector<PoolEntry> evaluate_pool(const SuperNetwork& base, const std::vector<ArchEncoding>& pool,
                                     const SaliencyScores& sal, const CalibrationBatch& calib,
                                     const CalibrationBatch& heldout, const PoolSettings& settings) {
  if (base.has_adapters()) throw StateError("pool evaluation expects an adapter-free base network");
  if (settings.workers == 0) throw ConfigError("workers must be positive");
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(settings.workers, pool.size()));

  SuperNetwork anchor_net = base.clone();
  anchor_net.attach_adapters(settings.adapter_rank, settings.adapter_seed);
  const GradientTrace anchor = compute_trace(anchor_net, calib);

  std::vector<PoolEntry> out(pool.size());
  std::vector<std::exception_ptr> errors(n_workers);
  auto run = [&](std::size_t w) {
    try {
      SuperNetwork scorer = w == 0 ? std::move(anchor_net) : base.clone();
      if (!scorer.has_adapters()) scorer.attach_adapters(settings.adapter_rank, settings.adapter_seed);
      SuperNetwork plain = base.clone();
      for (std::size_t i = w; i < pool.size(); i += n_workers) {
        PoolEntry& e = out[i];
        e.enc = pool[i];
        e.params = parameter_count(base.config(), pool[i]);
        const GradientTrace trace = candidate_trace(scorer, pool[i], sal, calib);
        for (ProxyVariant v : kProxyVariants) e.proxy.push_back(proxy_variant_score(v, trace, anchor, pool[i]));
        if (settings.with_metric) {
          e.metric = true_metric(plain, pool[i], sal, heldout, settings.recovery, settings.train);
        }
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (n_workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(run, w);
    for (auto& t : threads) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

namespace {

double quality(double loss, MetricKind metric) { return metric == MetricKind::loss ? -loss : -std::exp(loss); }

}  // namespace

std::vector<VariantCorrelation> validate_proxy(const std::vector<PoolEntry>& pool, MetricKind metric) {
  if (pool.size() < 2) throw InputError("proxy validation needs at least two candidates");
  std::vector<double> q;
  for (const auto& e : pool) q.push_back(quality(e.metric, metric));
  std::vector<VariantCorrelation> rows;
  for (std::size_t v = 0; v < std::size(kProxyVariants); ++v) {
    std::vector<double> p;
    for (const auto& e : pool) {
      if (e.proxy.size() != std::size(kProxyVariants)) throw InputError("pool entry lacks proxy variant scores");
      p.push_back(e.proxy[v]);
    }
    rows.push_back({kProxyVariants[v], stats::spearman_rho(p, q), stats::kendall_tau(p, q), pool.size()});
  }
  return rows;
}

std::string validation_csv(const std::vector<VariantCorrelation>& rows) {
  std::ostringstream out;
  out << "variant,spearman,kendall,n\n" << std::fixed << std::setprecision(6);
  for (const auto& r : rows) out << proxy_variant_name(r.variant) << ',' << r.spearman << ',' << r.kendall << ',' << r.n << '\n';
  return out.str();
}

std::string scatter_svg(const std::vector<PoolEntry>& pool, ProxyVariant variant, MetricKind metric) {
  const auto v = static_cast<std::size_t>(variant);
  const double W = 480, H = 360, M = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  std::vector<std::pair<double, double>> pts;
  for (const auto& e : pool) {
    const double x = e.proxy.at(v);
    const double y = metric == MetricKind::loss ? e.metric : std::exp(e.metric);
    pts.emplace_back(x, y);
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y0 = std::min(y0, y);
    y1 = std::max(y1, y);
  }
  if (pts.empty()) x0 = y0 = 0.0, x1 = y1 = 1.0;
  if (x1 == x0) x1 = x0 + 1.0;
  if (y1 == y0) y1 = y0 + 1.0;
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << M << "\" y1=\"" << M << "\" x2=\"" << M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">proxy ("
      << proxy_variant_name(variant) << ")</text>\n";
  out << "<text x=\"14\" y=\"" << H / 2 << "\" transform=\"rotate(-90 14 " << H / 2
      << ")\" text-anchor=\"middle\" font-size=\"12\">" << (metric == MetricKind::loss ? "heldout loss" : "perplexity")
      << "</text>\n";
  for (const auto& [x, y] : pts) {
    const double px = M + (x - x0) / (x1 - x0) * (W - 2 * M);
    const double py = H - M - (y - y0) / (y1 - y0) * (H - 2 * M);
    out << "<circle cx=\"" << px << "\" cy=\"" << py << "\" r=\"3\" fill=\"steelblue\"/>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace gradtrace
