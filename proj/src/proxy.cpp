#include "gradtrace/proxy.hpp"

#include <algorithm>
#include <cmath>

#include "gradtrace/errors.hpp"

namespace gradtrace {

const char* sub_block_name(SubBlock s) { return s == SubBlock::attn ? "attn" : "mlp"; }

const std::vector<double>& GradientTrace::at(std::size_t block, SubBlock s) const {
  if (!has(block)) throw InputError("trace has no entry for block " + std::to_string(block));
  return (*blocks[block])[static_cast<std::size_t>(s)];
}

std::vector<double>& GradientTrace::at(std::size_t block, SubBlock s) {
  if (!has(block)) throw InputError("trace has no entry for block " + std::to_string(block));
  return (*blocks[block])[static_cast<std::size_t>(s)];
}

namespace {

void append_grad(std::vector<double>& dst, const Tensor& t) {
  if (!t.has_grad()) {
    dst.insert(dst.end(), t.numel(), 0.0);
    return;
  }
  const auto g = t.grad();
  dst.insert(dst.end(), g.begin(), g.end());
}

}  // namespace

GradientTrace compute_trace(SuperNetwork& net, const CalibrationBatch& calib) {
  if (!net.has_adapters()) throw StateError("gradient traces need adapters attached");
  if (calib.empty()) throw InputError("gradient traces need a non-empty calibration batch");
  net.zero_adapter_grads();
  {
    ad::Tape tape;
    Tensor logits = forward(net, tape, calib.inputs(), calib.positions());
    Tensor loss = ad::cross_entropy_mean(tape, logits, calib.targets());
    if (!std::isfinite(loss.item())) throw NumericalError("non-finite loss while computing a gradient trace");
    tape.backward(loss);
  }
  const auto& cfg = net.config();
  GradientTrace trace;
  trace.blocks.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    if (!net.block_active[l]) continue;
    std::array<std::vector<double>, 2> parts;
    const Block& b = net.blocks[l];
    for (auto kind : kAttnProjections) {
      append_grad(parts[0], b[kind].adapter->a);
      append_grad(parts[0], b[kind].adapter->b);
    }
    for (auto kind : kMlpProjections) {
      append_grad(parts[1], b[kind].adapter->a);
      append_grad(parts[1], b[kind].adapter->b);
    }
    trace.blocks[l] = std::move(parts);
  }
  net.zero_adapter_grads();
  return trace;
}

Correlation pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw InputError("pearson: length mismatch " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
  }
  if (x.size() < 2) throw InputError("pearson: need at least two elements");
  const double n = double(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  const double sx = std::sqrt(sxx / n), sy = std::sqrt(syy / n);
  if (sx < 1e-12 || sy < 1e-12) return {0.0, true};
  const double rho = sxy / (n * sx * sy);
  return {std::clamp(rho, -1.0, 1.0), false};
}

double aggregate_phi(std::span<const SubBlockScore> terms) {
  double phi = 0.0;
  for (const auto& t : terms) phi += t.retention * t.rho;
  return phi;
}

ProxyResult correlate_traces(const GradientTrace& candidate, const GradientTrace& anchor, const ArchEncoding& enc) {
  ProxyResult result;
  for (std::size_t l = 0; l < enc.n_blocks(); ++l) {
    if (!enc.active(l)) continue;
    for (auto s : {SubBlock::attn, SubBlock::mlp}) {
      const auto corr = pearson(candidate.at(l, s), anchor.at(l, s));
      const double r = s == SubBlock::attn ? enc.width[l].attn : enc.width[l].mlp;
      result.terms.push_back({l, s, corr.rho, r, corr.degenerate});
    }
  }
  result.phi = aggregate_phi(result.terms);
  return result;
}

GradientTrace candidate_trace(SuperNetwork& net, const ArchEncoding& enc, const SaliencyScores& sal,
                              const CalibrationBatch& calib) {
  const auto masks = realize_masks(enc, sal, net.config());
  ScopedApply applied(net, enc, masks);
  return compute_trace(net, calib);
}

ProxyResult score(SuperNetwork& net, const ArchEncoding& enc, const SaliencyScores& sal,
                  const CalibrationBatch& calib, const GradientTrace& anchor) {
  return correlate_traces(candidate_trace(net, enc, sal, calib), anchor, enc);
}

}  // namespace gradtrace
