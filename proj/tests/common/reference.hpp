#pragma once

// Double-precision reference implementations used as oracles by the tests.
// They are written independently of the library kernels (plain loops, no
// shared helpers) so that a finite difference of the reference checks the
// analytic float gradients of the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gradtrace/autodiff.hpp"
#include "gradtrace/model.hpp"
#include "gradtrace/tensor.hpp"

namespace reference {

using gradtrace::Tensor;

struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

inline Mat from_tensor(const Tensor& t) {
  Mat m(t.rank() == 2 ? t.dim(0) : 1, t.rank() == 2 ? t.dim(1) : t.numel());
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) m.v[i] = d[i];
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat o(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t k = 0; k < a.cols; ++k)
      for (std::size_t j = 0; j < b.cols; ++j) o(i, j) += a(i, k) * b(k, j);
  return o;
}

// x . w^T
inline Mat linear(const Mat& x, const Mat& w) {
  Mat o(x.rows, w.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < w.rows; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < x.cols; ++k) acc += x(i, k) * w(j, k);
      o(i, j) = acc;
    }
  return o;
}

inline Mat zip(const Mat& a, const Mat& b, const std::function<double(double, double)>& f) {
  Mat o(a.rows, a.cols);
  for (std::size_t i = 0; i < a.v.size(); ++i) o.v[i] = f(a.v[i], b.v[i]);
  return o;
}

inline Mat add(const Mat& a, const Mat& b) { return zip(a, b, [](double x, double y) { return x + y; }); }
inline Mat sub(const Mat& a, const Mat& b) { return zip(a, b, [](double x, double y) { return x - y; }); }
inline Mat mul(const Mat& a, const Mat& b) { return zip(a, b, [](double x, double y) { return x * y; }); }

inline Mat scale(const Mat& a, double f) {
  Mat o = a;
  for (auto& x : o.v) x *= f;
  return o;
}

inline Mat add_rowwise(const Mat& x, const Mat& bias) {
  Mat o = x;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) o(i, j) += bias.v[j];
  return o;
}

inline Mat silu(const Mat& x) {
  Mat o = x;
  for (auto& e : o.v) e = e / (1.0 + std::exp(-e));
  return o;
}

inline Mat softmax_rows(const Mat& x) {
  Mat o(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double peak = -1e300, total = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) peak = std::max(peak, x(i, j));
    for (std::size_t j = 0; j < x.cols; ++j) total += std::exp(x(i, j) - peak);
    for (std::size_t j = 0; j < x.cols; ++j) o(i, j) = std::exp(x(i, j) - peak) / total;
  }
  return o;
}

inline Mat rmsnorm_rows(const Mat& x, const Mat& gain, double eps = 1e-5) {
  Mat o(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) ms += x(i, j) * x(i, j);
    const double inv = 1.0 / std::sqrt(ms / double(x.cols) + eps);
    for (std::size_t j = 0; j < x.cols; ++j) o(i, j) = x(i, j) * inv * gain.v[j];
  }
  return o;
}

inline Mat mask_columns(const Mat& x, const std::vector<float>& gate) {
  Mat o = x;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) o(i, j) *= gate[j];
  return o;
}

inline Mat embedding(const Mat& table, const std::vector<std::int32_t>& ids) {
  Mat o(ids.size(), table.cols);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < table.cols; ++j) o(i, j) = table(std::size_t(ids[i]), j);
  return o;
}

// Rotation of the pair (i, i + d_head/2) by pos * theta^(-2i/d_head).
inline Mat rope(const Mat& x, std::size_t seq_len, std::size_t n_heads, double theta = 10000.0) {
  const std::size_t dh = x.cols / n_heads, half = dh / 2;
  Mat o = x;
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double pos = double(r % seq_len);
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < half; ++i) {
        const double ang = pos * std::pow(theta, -2.0 * double(i) / double(dh));
        const double a = x(r, h * dh + i), b = x(r, h * dh + i + half);
        o(r, h * dh + i) = a * std::cos(ang) - b * std::sin(ang);
        o(r, h * dh + i + half) = a * std::sin(ang) + b * std::cos(ang);
      }
    }
  }
  return o;
}

inline Mat causal_attention(const Mat& q, const Mat& k, const Mat& v, std::size_t seq_len, std::size_t n_heads,
                            std::size_t n_kv_heads, std::size_t d_head) {
  Mat o(q.rows, n_heads * d_head);
  const std::size_t group = n_heads / n_kv_heads;
  for (std::size_t s = 0; s < q.rows / seq_len; ++s) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t kh = h / group;
      for (std::size_t i = 0; i < seq_len; ++i) {
        std::vector<double> logits(i + 1);
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < d_head; ++c) {
            dot += q(s * seq_len + i, h * d_head + c) * k(s * seq_len + j, kh * d_head + c);
          }
          logits[j] = dot / std::sqrt(double(d_head));
        }
        const double peak = *std::max_element(logits.begin(), logits.end());
        double total = 0.0;
        for (auto& l : logits) total += (l = std::exp(l - peak));
        for (std::size_t c = 0; c < d_head; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= i; ++j) acc += logits[j] / total * v(s * seq_len + j, kh * d_head + c);
          o(s * seq_len + i, h * d_head + c) = acc;
        }
      }
    }
  }
  return o;
}

inline double cross_entropy_mean(const Mat& logits, const std::vector<std::int32_t>& targets) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    double peak = -1e300, acc = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) peak = std::max(peak, logits(i, j));
    for (std::size_t j = 0; j < logits.cols; ++j) acc += std::exp(logits(i, j) - peak);
    total += peak + std::log(acc) - logits(i, std::size_t(targets[i]));
  }
  return total / double(logits.rows);
}

// ---------------------------------------------------------------- toy model

// Parameters of one projection: weight plus optional adapter (a, b).
struct RefProjection {
  Mat w, a, b;
  bool adapter = false;
};

struct RefBlock {
  Mat attn_norm, mlp_norm;
  RefProjection p[gradtrace::kNumProjections];
};

struct RefModel {
  gradtrace::ModelConfig cfg;
  Mat embedding, final_norm;
  std::vector<RefBlock> blocks;
  std::vector<std::uint8_t> active;
};

inline RefModel from_network(const gradtrace::SuperNetwork& net) {
  RefModel m;
  m.cfg = net.config();
  m.embedding = from_tensor(net.embedding);
  m.final_norm = from_tensor(net.final_norm);
  m.active = net.block_active;
  for (const auto& b : net.blocks) {
    RefBlock rb;
    rb.attn_norm = from_tensor(b.attn_norm);
    rb.mlp_norm = from_tensor(b.mlp_norm);
    for (std::size_t k = 0; k < gradtrace::kNumProjections; ++k) {
      rb.p[k].w = from_tensor(b.proj[k].weight);
      if (b.proj[k].adapter) {
        rb.p[k].adapter = true;
        rb.p[k].a = from_tensor(b.proj[k].adapter->a);
        rb.p[k].b = from_tensor(b.proj[k].adapter->b);
      }
    }
    m.blocks.push_back(std::move(rb));
  }
  return m;
}

inline Mat project(const Mat& x, const RefProjection& p) {
  Mat y = linear(x, p.w);
  if (p.adapter) y = add(y, linear(linear(x, p.a), p.b));
  return y;
}

// Mean next-token loss of a dense (ungated) network.
inline double model_loss(const RefModel& m, const std::vector<std::int32_t>& ids,
                         const std::vector<std::int32_t>& targets, std::size_t seq_len) {
  using gradtrace::ProjKind;
  const auto& c = m.cfg;
  Mat x = embedding(m.embedding, ids);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    if (!m.active[l]) continue;
    const auto& b = m.blocks[l];
    auto P = [&](ProjKind k) -> const RefProjection& { return b.p[std::size_t(k)]; };
    Mat h = rmsnorm_rows(x, b.attn_norm);
    Mat q = rope(project(h, P(ProjKind::wq)), seq_len, c.n_heads);
    Mat k = rope(project(h, P(ProjKind::wk)), seq_len, c.n_kv_heads);
    Mat v = project(h, P(ProjKind::wv));
    Mat a = causal_attention(q, k, v, seq_len, c.n_heads, c.n_kv_heads, c.d_head);
    x = add(x, project(a, P(ProjKind::wo)));
    Mat h2 = rmsnorm_rows(x, b.mlp_norm);
    Mat mm = mul(silu(project(h2, P(ProjKind::wgate))), project(h2, P(ProjKind::wup)));
    x = add(x, project(mm, P(ProjKind::wdown)));
  }
  x = rmsnorm_rows(x, m.final_norm);
  return cross_entropy_mean(linear(x, m.embedding), targets);
}

// ---------------------------------------------------------------- FD harness

inline double norm_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

// Central differences of f at x for every coordinate.
inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double step) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f(x);
    x[i] = saved - step;
    const double down = f(x);
    x[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// Scalar sum(out * weights) through tape ops, so any op output can be
// reduced to a loss: ones[1 x m] . (out * W) . ones[n x 1].
inline Tensor weighted_sum(gradtrace::ad::Tape& tape, const Tensor& out, const Tensor& weights) {
  if (out.rank() != 2) return gradtrace::ad::mul(tape, out, weights);  // scalar outputs
  const auto rows = out.rank() == 2 ? out.dim(0) : 1;
  const auto cols = out.rank() == 2 ? out.dim(1) : out.numel();
  Tensor left({1, rows}, std::vector<float>(rows, 1.0f));
  Tensor right({cols, 1}, std::vector<float>(cols, 1.0f));
  return gradtrace::ad::matmul(tape, gradtrace::ad::matmul(tape, left, gradtrace::ad::mul(tape, out, weights)), right);
}

inline Tensor random_tensor(gradtrace::Shape shape, std::mt19937_64& rng, double stddev = 1.0, bool rg = true) {
  std::normal_distribution<float> nd(0.0f, float(stddev));
  std::vector<float> v(gradtrace::shape_numel(shape));
  for (auto& x : v) x = nd(rng);
  return Tensor(std::move(shape), std::move(v), rg);
}

// One gradient-check instance: analytic float gradients of every input
// against central differences of the double reference.
struct GradCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Tensor(gradtrace::ad::Tape&, const std::vector<Tensor>&)> op;
  std::function<Mat(const std::vector<Mat>&)> ref;
};

struct GradCheck {
  double rel_error = 0.0;
  std::size_t coordinates = 0;
};

inline GradCheck check_case(GradCase& c, std::mt19937_64& rng, double step = 1e-3) {
  gradtrace::ad::Tape tape;
  for (auto& t : c.inputs) t.zero_grad();
  Tensor out = c.op(tape, c.inputs);
  const auto rows = out.rank() == 2 ? out.dim(0) : 1;
  const auto cols = out.rank() == 2 ? out.dim(1) : out.numel();
  Tensor weights = random_tensor({rows, cols}, rng, 1.0, false);
  if (out.rank() != 2) weights = Tensor(out.shape(), std::vector<float>(weights.data().begin(), weights.data().end()));
  Tensor loss = weighted_sum(tape, out, weights);
  tape.backward(loss);

  const Mat wm = from_tensor(weights);
  std::vector<Mat> base;
  for (const auto& t : c.inputs) base.push_back(from_tensor(t));
  GradCheck result;
  std::vector<double> analytic, numeric;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    if (!c.inputs[i].requires_grad()) continue;
    const auto g = std::as_const(c.inputs[i]).grad();
    analytic.insert(analytic.end(), g.begin(), g.end());
    auto f = [&](const std::vector<double>& x) {
      std::vector<Mat> args = base;
      args[i].v = x;
      const Mat o = c.ref(args);
      double s = 0.0;
      for (std::size_t k = 0; k < o.v.size(); ++k) s += o.v[k] * wm.v[k];
      return s;
    };
    const auto fd = central_difference(f, base[i].v, step);
    numeric.insert(numeric.end(), fd.begin(), fd.end());
  }
  result.rel_error = norm_relative_error(analytic, numeric);
  result.coordinates = analytic.size();
  return result;
}

// Random instance of every differentiable op, seeded by `rng`.
inline std::vector<GradCase> make_op_cases(std::mt19937_64& rng) {
  namespace ad = gradtrace::ad;
  std::uniform_int_distribution<std::size_t> dim(2, 5);
  const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
  std::vector<GradCase> cases;

  cases.push_back({"matmul", {random_tensor({m, k}, rng), random_tensor({k, n}, rng)},
                   [](ad::Tape& t, const std::vector<Tensor>& in) { return ad::matmul(t, in[0], in[1]); },
                   [](const std::vector<Mat>& in) { return matmul(in[0], in[1]); }});
  cases.push_back({"linear", {random_tensor({m, k}, rng), random_tensor({n, k}, rng)},
                   [](ad::Tape& t, const std::vector<Tensor>& in) { return ad::linear(t, in[0], in[1]); },
                   [](const std::vector<Mat>& in) { return linear(in[0], in[1]); }});
  cases.push_back({"add", {random_tensor({m, n}, rng), random_tensor({m, n}, rng)},
                   [](ad::Tape& t, const std::vector<Tensor>& in) { return ad::add(t, in[0], in[1]); },
                   [](const std::vector<Mat>& in) { return add(in[0], in[1]); }});
  cases.push_back({"sub", {random_tensor({m, n}, rng), random_tensor({m, n}, rng)},
                   [](ad::Tape& t, const std::vector<Tensor>& in) { return ad::sub(t, in[0], in[1]); },
                   [](const std::vector<Mat>& in) { return sub(in[0], in[1]); }});
  cases.push_back({"mul", {random_tensor({m, n}, rng), random_tensor({m, n}, rng)},
                   [](ad::Tape& t, const std::vector<Tensor>& in) { return ad::mul(t, in[0], in[1]); },
                   [](const std::vector<Mat>& in) { return mul(in[0], in[1]); }});
  cases.push_back({"scale", {random_tensor({m, n}, rng)},
                   [](ad::Tape& t, const std::vector<Tensor>& in) { return ad::scale(t, in[0], -1.75f); },
                   [](const std::vector<Mat>& in) { return scale(in[0], -1.75); }});
  cases.push_back({"add_rowwise", {random_tensor({m, n}, rng), random_tensor({n}, rng)},
                   [](ad::Tape& t, const std::vector<Tensor>& in) { return ad::add_rowwise(t, in[0], in[1]); },
                   [](const std::vector<Mat>& in) { return add_rowwise(in[0], in[1]); }});
  cases.push_back({"silu", {random_tensor({m, n}, rng, 2.0)},
                   [](ad::Tape& t, const std::vector<Tensor>& in) { return ad::silu(t, in[0]); },
                   [](const std::vector<Mat>& in) { return silu(in[0]); }});
  cases.push_back({"softmax_rows", {random_tensor({m, n}, rng, 2.0)},
                   [](ad::Tape& t, const std::vector<Tensor>& in) { return ad::softmax_rows(t, in[0]); },
                   [](const std::vector<Mat>& in) { return softmax_rows(in[0]); }});
  cases.push_back({"rmsnorm_rows", {random_tensor({m, n}, rng), random_tensor({n}, rng)},
                   [](ad::Tape& t, const std::vector<Tensor>& in) { return ad::rmsnorm_rows(t, in[0], in[1]); },
                   [](const std::vector<Mat>& in) { return rmsnorm_rows(in[0], in[1]); }});
  {
    std::vector<float> gate(n);
    std::bernoulli_distribution keep(0.6);
    for (auto& g : gate) g = keep(rng) ? 1.0f : 0.0f;
    cases.push_back({"mask_columns", {random_tensor({m, n}, rng)},
                     [gate](ad::Tape& t, const std::vector<Tensor>& in) { return ad::mask_columns(t, in[0], gate); },
                     [gate](const std::vector<Mat>& in) { return mask_columns(in[0], gate); }});
  }
  {
    const std::size_t vocab = dim(rng) + 2;
    std::vector<std::int32_t> ids(m + 2);
    std::uniform_int_distribution<std::int32_t> id(0, std::int32_t(vocab) - 1);
    for (auto& i : ids) i = id(rng);
    cases.push_back({"embedding", {random_tensor({vocab, n}, rng)},
                     [ids](ad::Tape& t, const std::vector<Tensor>& in) { return ad::embedding(t, in[0], ids); },
                     [ids](const std::vector<Mat>& in) { return embedding(in[0], ids); }});
  }
  {
    const std::size_t seq = dim(rng), heads = 2, dh = 4;
    cases.push_back({"rope", {random_tensor({2 * seq, heads * dh}, rng)},
                     [seq](ad::Tape& t, const std::vector<Tensor>& in) { return ad::rope(t, in[0], seq, 2); },
                     [seq](const std::vector<Mat>& in) { return rope(in[0], seq, 2); }});
  }
  {
    const std::size_t seq = dim(rng), dh = 4;
    const std::size_t heads = std::bernoulli_distribution(0.5)(rng) ? 4 : 2, kv = 2;
    ad::AttentionShape s{seq, heads, kv, dh};
    cases.push_back(
        {"causal_attention",
         {random_tensor({2 * seq, heads * dh}, rng), random_tensor({2 * seq, kv * dh}, rng),
          random_tensor({2 * seq, kv * dh}, rng)},
         [s](ad::Tape& t, const std::vector<Tensor>& in) { return ad::causal_attention(t, in[0], in[1], in[2], s); },
         [s](const std::vector<Mat>& in) {
           return causal_attention(in[0], in[1], in[2], s.seq_len, s.n_heads, s.n_kv_heads, s.d_head);
         }});
  }
  {
    std::vector<std::int32_t> targets(m);
    std::uniform_int_distribution<std::int32_t> tg(0, std::int32_t(n) - 1);
    for (auto& x : targets) x = tg(rng);
    cases.push_back({"cross_entropy_mean", {random_tensor({m, n}, rng, 2.0)},
                     [targets](ad::Tape& t, const std::vector<Tensor>& in) {
                       return ad::cross_entropy_mean(t, in[0], targets);
                     },
                     [targets](const std::vector<Mat>& in) {
                       Mat o(1, 1);
                       o.v[0] = cross_entropy_mean(in[0], targets);
                       return o;
                     }});
  }
  return cases;
}

// Gradient of the full-model loss with respect to `count` randomly chosen
// adapter coordinates: analytic (library) vs central differences of the
// reference model.
struct ModelGradCheck {
  double rel_error = 0.0;
  std::vector<double> analytic, numeric;
};

inline ModelGradCheck check_model_adapters(gradtrace::SuperNetwork& net, const std::vector<std::int32_t>& ids,
                                           const std::vector<std::int32_t>& targets, std::size_t seq_len,
                                           std::size_t count, std::mt19937_64& rng, double step = 1e-3) {
  net.zero_adapter_grads();
  {
    gradtrace::ad::Tape tape;
    Tensor logits = gradtrace::forward(net, tape, ids, seq_len);
    Tensor loss = gradtrace::ad::cross_entropy_mean(tape, logits, targets);
    tape.backward(loss);
  }
  struct Coord {
    std::size_t block, proj;
    bool is_b;
    std::size_t index;
  };
  const auto& cfg = net.config();
  std::vector<Coord> coords;
  std::uniform_int_distribution<std::size_t> pick_block(0, cfg.n_layers - 1), pick_proj(0, gradtrace::kNumProjections - 1);
  for (std::size_t i = 0; i < count; ++i) {
    Coord c{pick_block(rng), pick_proj(rng), std::bernoulli_distribution(0.5)(rng), 0};
    const auto& ad = *net.blocks[c.block].proj[c.proj].adapter;
    c.index = std::uniform_int_distribution<std::size_t>(0, (c.is_b ? ad.b : ad.a).numel() - 1)(rng);
    coords.push_back(c);
  }
  ModelGradCheck out;
  RefModel ref = from_network(net);
  for (const auto& c : coords) {
    const auto& ad = *net.blocks[c.block].proj[c.proj].adapter;
    out.analytic.push_back(std::as_const(c.is_b ? ad.b : ad.a).grad()[c.index]);
    auto& slot = c.is_b ? ref.blocks[c.block].p[c.proj].b.v[c.index] : ref.blocks[c.block].p[c.proj].a.v[c.index];
    const double saved = slot;
    slot = saved + step;
    const double up = model_loss(ref, ids, targets, seq_len);
    slot = saved - step;
    const double down = model_loss(ref, ids, targets, seq_len);
    slot = saved;
    out.numeric.push_back((up - down) / (2.0 * step));
  }
  net.zero_adapter_grads();
  out.rel_error = norm_relative_error(out.analytic, out.numeric);
  return out;
}

}  // namespace reference
