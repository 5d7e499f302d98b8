#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradtrace/corpus.hpp"
#include "gradtrace/errors.hpp"
#include "gradtrace/io.hpp"
#include "gradtrace/masking.hpp"
#include "gradtrace/model.hpp"
#include "gradtrace/oracle.hpp"
#include "gradtrace/proxy.hpp"
#include "gradtrace/search.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gradtrace;

namespace {

struct Options {
  std::string config;
  std::string checkpoint;
  std::string encoding;
  std::string budget;
  std::string calib;
  std::string out;
  std::string log;
  std::string masks_out;
  std::string anchor_cache;
  std::string mode = "zeroed";
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  long recovery_steps = -1;
  bool quiet = false;
};

io::RunConfig run_config(const Options& o) {
  return o.config.empty() ? io::parse_run_config("") : io::load_run_config(o.config);
}

void progress(const Options& o, const std::string& line) {
  if (!o.quiet) std::cerr << line << '\n';
}

fs::path output_path(const io::RunConfig& rc, const std::string& explicit_path, const std::string& name) {
  if (!explicit_path.empty()) return explicit_path;
  fs::create_directories(rc.output_dir);
  return fs::path(rc.output_dir) / name;
}

SuperNetwork load_network(const Options& o, const io::RunConfig& rc) {
  const std::string path = o.checkpoint.empty() ? rc.checkpoint_path : o.checkpoint;
  return io::network_from_checkpoint(io::load_checkpoint(path));
}

void require_dense(const SuperNetwork& net, const char* what) {
  if (net.gates || std::count(net.block_active.begin(), net.block_active.end(), 0)) {
    throw ConfigError(std::string(what) + " needs a dense checkpoint, not a realized one");
  }
}

ArchEncoding load_encoding(const Options& o, const ModelConfig& cfg, const io::RunConfig& rc) {
  if (o.encoding.empty()) throw ConfigError("--encoding is required");
  ArchEncoding enc = io::encoding_from_json(io::read_file(o.encoding));
  EncodingLimits limits{1, rc.search.min_ratio};
  try {
    validate_encoding(enc, cfg, limits);
  } catch (const InputError& e) {
    throw ConfigError(std::string("invalid encoding: ") + e.what());
  }
  return enc;
}

CalibrationBatch calibration(const Options& o, const io::RunConfig& rc, const CorpusSplits& splits) {
  if (o.calib.empty()) return io::calibration_batch(rc, splits);
  return sample_batch(load_corpus(o.calib), rc.calib_sequences, rc.seq_len(), rc.calib_seed);
}

json config_echo(const io::RunConfig& rc, std::size_t budget) {
  const auto& s = rc.search;
  return {{"population", s.population},
          {"elites", s.elites},
          {"crossover_rate", s.crossover_rate},
          {"mutation_rate_depth", s.mutation_rate_depth},
          {"mutation_rate_width", s.mutation_rate_width},
          {"iterations", s.iterations},
          {"budget", budget},
          {"min_depth", s.effective_min_depth(rc.model.n_layers)},
          {"min_ratio", s.min_ratio},
          {"jitter_sigma", s.jitter_sigma},
          {"seed", s.seed},
          {"init", s.init == InitStrategy::importance ? "importance" : "uniform"},
          {"adapter_rank", rc.adapter_rank},
          {"calib_sequences", rc.calib_sequences},
          {"seq_len", rc.seq_len()}};
}

int cmd_train(const Options& o) {
  const auto rc = run_config(o);
  const auto splits = io::load_splits(rc);
  SuperNetwork net = SuperNetwork::random(rc.model, rc.init_seed);
  const fs::path ckpt_path = o.out.empty() ? fs::path(rc.checkpoint_path) : fs::path(o.out);
  const fs::path log_path = output_path(rc, o.log, "train_log.jsonl");
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = train_base(net, splits.train, rc.train, [&](std::size_t step, double loss) {
    log << json{{"step", step}, {"loss", loss}}.dump() << '\n' << std::flush;
    if (step % 100 == 0 || step + 1 == rc.train.steps) {
      progress(o, "step " + std::to_string(step) + " loss " + std::to_string(loss));
    }
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double held = heldout_loss(net, io::heldout_batch(rc, splits));
  io::save_checkpoint(ckpt_path, io::checkpoint_from_network(net));
  std::cout << json{{"checkpoint", ckpt_path.string()},
                    {"steps", rc.train.steps},
                    {"final_train_loss", report.final_loss()},
                    {"heldout_loss", held},
                    {"heldout_perplexity", std::exp(held)},
                    {"dense_params", dense_parameter_count(rc.model)},
                    {"seconds", seconds}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_search(const Options& o) {
  auto rc = run_config(o);
  SuperNetwork net = load_network(o, rc);
  require_dense(net, "search");
  const auto& cfg = net.config();
  const auto splits = io::load_splits(rc);
  const auto calib = calibration(o, rc, splits);
  const auto sal = compute_saliency(net, collect_activation_stats(net, calib));
  const std::size_t dense = dense_parameter_count(cfg);
  SearchConfig sc = rc.search;
  if (!o.budget.empty()) {
    sc.budget = io::resolve_budget(o.budget, dense);
  } else if (sc.budget == 0) {
    sc.budget = io::resolve_budget(rc.budget_fraction, dense);
  }
  sc.workers = o.workers;
  const SearchSpace space = make_search_space(cfg, compute_importance_prior(sal), sc);

  SuperNetwork scorer = net.clone();
  scorer.attach_adapters(rc.adapter_rank, rc.adapter_seed);
  const fs::path cache = o.anchor_cache.empty() ? output_path(rc, "", "anchor.tnac") : fs::path(o.anchor_cache);
  const GradientTrace anchor = io::load_or_compute_anchor(scorer, calib, cache);

  const fs::path log_path = output_path(rc, o.log, "search_log.jsonl");
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());
  std::size_t last_iteration = 0;
  double best = kInfeasible;
  const auto result = run_search(space, sc, proxy_fitness(scorer, sal, calib, anchor), [&](const SearchLogRecord& r) {
    log << io::search_record_to_json(r) << '\n' << std::flush;
    if (std::isfinite(r.phi)) best = std::max(best, r.phi);
    if (r.iteration != last_iteration) {
      last_iteration = r.iteration;
      progress(o, "iteration " + std::to_string(r.iteration) + " best phi " + std::to_string(best));
    }
  });
  if (!result.feasible) throw ConfigError("search found no candidate within the budget");
  const fs::path best_path = output_path(rc, o.out, "best_encoding.json");
  io::write_atomic(best_path, io::encoding_to_json(result.best.enc) + "\n");
  std::cout << json{{"best", json::parse(io::encoding_to_json(result.best.enc))},
                    {"phi", result.best.fitness},
                    {"params", result.best.params},
                    {"dense_params", dense},
                    {"budget", sc.budget},
                    {"encoding_path", best_path.string()},
                    {"log_path", log_path.string()},
                    {"config", config_echo(rc, sc.budget)}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_score(const Options& o) {
  const auto rc = run_config(o);
  SuperNetwork net = load_network(o, rc);
  require_dense(net, "score");
  const auto enc = load_encoding(o, net.config(), rc);
  const auto splits = io::load_splits(rc);
  const auto calib = calibration(o, rc, splits);
  const auto sal = compute_saliency(net, collect_activation_stats(net, calib));
  net.attach_adapters(rc.adapter_rank, rc.adapter_seed);
  const fs::path cache = o.anchor_cache;
  const GradientTrace anchor = io::load_or_compute_anchor(net, calib, cache);
  const ProxyResult r = score(net, enc, sal, calib, anchor);
  std::cout << io::proxy_result_to_json(r, parameter_count(net.config(), enc)) << '\n';
  return 0;
}

int cmd_realize(const Options& o) {
  const auto rc = run_config(o);
  SuperNetwork net = load_network(o, rc);
  require_dense(net, "realize");
  const auto enc = load_encoding(o, net.config(), rc);
  if (o.out.empty()) throw ConfigError("--out is required");
  io::RealizeMode mode;
  if (o.mode == "zeroed") {
    mode = io::RealizeMode::zeroed;
  } else if (o.mode == "sliced") {
    mode = io::RealizeMode::sliced;
  } else {
    throw ConfigError("--mode must be zeroed or sliced");
  }
  const auto splits = io::load_splits(rc);
  const auto calib = calibration(o, rc, splits);
  const auto sal = compute_saliency(net, collect_activation_stats(net, calib));
  const auto masks = realize_masks(enc, sal, net.config());
  io::save_checkpoint(o.out, io::realize_checkpoint(net, enc, masks, mode));
  if (!o.masks_out.empty()) io::write_atomic(o.masks_out, io::masks_to_json(masks) + "\n");
  std::cout << json{{"checkpoint", o.out},
                    {"mode", o.mode},
                    {"params", parameter_count(net.config(), enc)},
                    {"dense_params", dense_parameter_count(net.config())}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_eval(const Options& o) {
  const auto rc = run_config(o);
  SuperNetwork net = load_network(o, rc);
  const auto splits = io::load_splits(rc);
  const auto heldout = io::heldout_batch(rc, splits);
  RecoveryConfig recovery;
  recovery.steps = o.recovery_steps >= 0 ? static_cast<std::size_t>(o.recovery_steps) : rc.recovery_steps;
  recovery.train = rc.train;
  double loss;
  if (!o.encoding.empty()) {
    require_dense(net, "eval with --encoding");
    const auto enc = load_encoding(o, net.config(), rc);
    const auto calib = calibration(o, rc, splits);
    const auto sal = compute_saliency(net, collect_activation_stats(net, calib));
    loss = true_metric(net, enc, sal, heldout, recovery, &splits.train);
  } else {
    if (recovery.steps > 0) {
      TrainConfig tc = rc.train;
      tc.steps = recovery.steps;
      train_base(net, splits.train, tc);
    }
    loss = heldout_loss(net, heldout);
  }
  std::cout << json{{"loss", loss},
                    {"perplexity", std::exp(loss)},
                    {"recovery_steps", recovery.steps},
                    {"heldout_sequences", heldout.size()}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_validate(const Options& o) {
  const auto rc = run_config(o);
  SuperNetwork net = load_network(o, rc);
  require_dense(net, "validate");
  const auto& cfg = net.config();
  const auto splits = io::load_splits(rc);
  const auto calib = calibration(o, rc, splits);
  const auto heldout = io::heldout_batch(rc, splits);
  const auto sal = compute_saliency(net, collect_activation_stats(net, calib));

  SearchConfig sc = rc.search;
  sc.budget = o.budget.empty() ? io::resolve_budget(rc.budget_fraction, dense_parameter_count(cfg))
                               : io::resolve_budget(o.budget, dense_parameter_count(cfg));
  const SearchSpace space = make_search_space(cfg, compute_importance_prior(sal), sc);
  std::mt19937_64 rng(rc.pool_seed);
  std::vector<ArchEncoding> pool;
  for (std::size_t tries = 0; pool.size() < rc.pool_size; ++tries) {
    if (tries > 100 * rc.pool_size) throw ConfigError("cannot sample feasible candidates at this budget");
    if (auto e = sample_feasible_encoding(space, rng)) pool.push_back(*e);
  }
  progress(o, "evaluating " + std::to_string(pool.size()) + " candidates");

  PoolSettings ps;
  ps.adapter_rank = rc.adapter_rank;
  ps.adapter_seed = rc.adapter_seed;
  ps.recovery.steps = rc.recovery_steps;
  ps.recovery.train = rc.train;
  ps.train = &splits.train;
  ps.workers = o.workers;
  const auto entries = evaluate_pool(net, pool, sal, calib, heldout, ps);
  const MetricKind metric = rc.metric == "perplexity" ? MetricKind::perplexity : MetricKind::loss;
  const auto rows = validate_proxy(entries, metric);

  const fs::path csv_path = output_path(rc, o.out, "validation.csv");
  const fs::path svg_path = fs::path(csv_path).replace_extension(".svg");
  const fs::path pool_path = fs::path(csv_path).replace_extension(".pool.jsonl");
  io::write_atomic(csv_path, validation_csv(rows));
  io::write_atomic(svg_path, scatter_svg(entries, ProxyVariant::full, metric));
  std::string pool_lines;
  for (const auto& e : entries) {
    json j = json::parse(io::encoding_to_json(e.enc));
    j["params"] = e.params;
    j["loss"] = e.metric;
    for (std::size_t v = 0; v < e.proxy.size(); ++v) j[proxy_variant_name(kProxyVariants[v])] = e.proxy[v];
    pool_lines += j.dump() + "\n";
  }
  io::write_atomic(pool_path, pool_lines);

  json summary = {{"csv", csv_path.string()}, {"svg", svg_path.string()}, {"pool", pool_path.string()}};
  json variants = json::array();
  for (const auto& r : rows) {
    variants.push_back(
        {{"variant", proxy_variant_name(r.variant)}, {"spearman", r.spearman}, {"kendall", r.kendall}, {"n", r.n}});
  }
  summary["variants"] = variants;
  std::cout << summary.dump() << '\n';
  return 0;
}

int exit_with(int code, const std::string& message) {
  std::cerr << "E:" << code << ": " << message << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-trace architecture search over a pretrained super-network"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Flat TOML run configuration")->check(CLI::ExistingFile);
    sub->add_option("--workers", o.workers, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--quiet", o.quiet, "Suppress progress on stderr");
  };
  auto with_checkpoint = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file (default: config checkpoint_path)");
  };

  auto* train = app.add_subcommand("train", "Train the dense base model");
  common(train);
  train->add_option("--out", o.out, "Checkpoint output path");
  train->add_option("--log", o.log, "Training log (JSON lines)");

  auto* search = app.add_subcommand("search", "Evolutionary search under a parameter budget");
  common(search);
  with_checkpoint(search);
  search->add_option("--budget", o.budget, "Fraction of dense parameters in (0, 1] or an absolute count");
  search->add_option("--calib", o.calib, "Corpus to draw calibration sequences from");
  search->add_option("--out", o.out, "Best-encoding JSON path");
  search->add_option("--log", o.log, "Search log (JSON lines)");
  search->add_option("--anchor-cache", o.anchor_cache, "Anchor trace cache file");

  auto* score_cmd = app.add_subcommand("score", "Score one encoding");
  common(score_cmd);
  with_checkpoint(score_cmd);
  score_cmd->add_option("--encoding", o.encoding, "Encoding JSON")->required();
  score_cmd->add_option("--calib", o.calib, "Corpus to draw calibration sequences from");
  score_cmd->add_option("--anchor-cache", o.anchor_cache, "Anchor trace cache file");

  auto* realize = app.add_subcommand("realize", "Write a pruned checkpoint");
  common(realize);
  with_checkpoint(realize);
  realize->add_option("--encoding", o.encoding, "Encoding JSON")->required();
  realize->add_option("--out", o.out, "Output checkpoint")->required();
  realize->add_option("--mode", o.mode, "zeroed or sliced");
  realize->add_option("--masks-out", o.masks_out, "Also write the kept units as JSON");
  realize->add_option("--calib", o.calib, "Corpus to draw calibration sequences from");

  auto* eval = app.add_subcommand("eval", "Heldout loss of a checkpoint or candidate");
  common(eval);
  with_checkpoint(eval);
  eval->add_option("--encoding", o.encoding, "Encoding JSON (dense checkpoints only)");
  eval->add_option("--recovery-steps", o.recovery_steps, "Fine-tuning steps before evaluation");
  eval->add_option("--calib", o.calib, "Corpus to draw calibration sequences from");

  auto* validate = app.add_subcommand("validate", "Rank correlation of proxy variants against heldout loss");
  common(validate);
  with_checkpoint(validate);
  validate->add_option("--budget", o.budget, "Fraction of dense parameters in (0, 1] or an absolute count");
  validate->add_option("--calib", o.calib, "Corpus to draw calibration sequences from");
  validate->add_option("--out", o.out, "CSV path (SVG and pool files are written alongside)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Error& e) {
    return exit_with(1, e.what());
  }

  try {
    if (*train) return cmd_train(o);
    if (*search) return cmd_search(o);
    if (*score_cmd) return cmd_score(o);
    if (*realize) return cmd_realize(o);
    if (*eval) return cmd_eval(o);
    if (*validate) return cmd_validate(o);
  } catch (const IoError& e) {
    return exit_with(2, e.what());
  } catch (const NumericalError& e) {
    return exit_with(3, e.what());
  } catch (const Error& e) {
    return exit_with(1, e.what());
  } catch (const fs::filesystem_error& e) {
    return exit_with(2, e.what());
  }
  return 1;
}
