#include "gradtrace/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "gradtrace/errors.hpp"

namespace gradtrace::ad {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

MatrixMap as_matrix(std::span<float> values, std::size_t rows, std::size_t cols) {
  return MatrixMap(values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

ConstMatrixMap as_matrix(std::span<const float> values, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace

bool Tape::tracks(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void Tape::record(Tensor output, std::function<void()> backward_rule) {
  output.set_requires_grad(true);
  nodes_.push_back({std::move(output), std::move(backward_rule)});
}

void Tape::backward(Tensor& loss) {
  if (loss.numel() != 1) {
    throw InputError("backward() requires a scalar loss, got " + shape_string(loss.shape()));
  }
  const auto recorded = std::any_of(nodes_.begin(), nodes_.end(),
                                    [&](const Node& n) { return n.output.same_storage(loss); });
  if (!recorded) throw StateError("backward() on a tensor that was not produced by this tape");

  for (auto& node : nodes_) {
    node.output.grad();
    node.output.zero_grad();
  }
  loss.grad()[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward_rule();
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " . " +
                         shape_string(b.shape()));
  }
  Tensor out({m, n});
  as_matrix(out.data(), m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a = a, b = b, out, m, k = k, n]() mutable {
      auto g = as_matrix(std::as_const(out).grad(), m, n);
      if (a.requires_grad()) as_matrix(a.grad(), m, k).noalias() += g * as_matrix(b.data(), k, n).transpose();
      if (b.requires_grad()) as_matrix(b.grad(), k, n).noalias() += as_matrix(a.data(), m, k).transpose() * g;
    });
  }
  return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w) {
  require_2d(x, "linear");
  require_2d(w, "linear");
  const auto m = x.dim(0), k = x.dim(1), n = w.dim(0);
  if (w.dim(1) != k) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(w.shape()));
  }
  Tensor out({m, n});
  as_matrix(out.data(), m, n).noalias() = as_matrix(x.data(), m, k) * as_matrix(w.data(), n, k).transpose();
  if (tape.tracks({&x, &w})) {
    tape.record(out, [x = x, w = w, out, m, k = k, n]() mutable {
      auto g = as_matrix(std::as_const(out).grad(), m, n);
      if (x.requires_grad()) as_matrix(x.grad(), m, k).noalias() += g * as_matrix(w.data(), n, k);
      if (w.requires_grad()) as_matrix(w.grad(), n, k).noalias() += g.transpose() * as_matrix(x.data(), m, k);
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a = a, b = b, out]() mutable {
      auto g = std::as_const(out).grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] - bv[i];
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a = a, b = b, out]() mutable {
      auto g = std::as_const(out).grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a = a, b = b, out]() mutable {
      auto g = std::as_const(out).grad();
      auto av = std::as_const(a).data(), bv = std::as_const(b).data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, float factor) {
  Tensor out(a.shape());
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * factor;
  if (tape.tracks({&a})) {
    tape.record(out, [a = a, out, factor]() mutable {
      auto g = std::as_const(out).grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor add_rowwise(Tape& tape, const Tensor& x, const Tensor& bias) {
  const auto rows = x.rows(), cols = x.cols();
  if (bias.numel() != cols) {
    throw DimensionError("add_rowwise: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  Tensor out(x.shape());
  auto o = out.data();
  auto xv = x.data(), bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = xv[r * cols + c] + bv[c];
  if (tape.tracks({&x, &bias})) {
    tape.record(out, [x = x, bias = bias, out, rows, cols]() mutable {
      auto g = std::as_const(out).grad();
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t c = 0; c < cols; ++c) {
          double acc = 0.0;
          for (std::size_t r = 0; r < rows; ++r) acc += g[r * cols + c];
          gb[c] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor silu(Tape& tape, const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] / (1.0f + std::exp(-xv[i]));
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out]() mutable {
      auto g = std::as_const(out).grad();
      auto xv = std::as_const(x).data();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float s = 1.0f / (1.0f + std::exp(-xv[i]));
        gx[i] += g[i] * s * (1.0f + xv[i] * (1.0f - s));
      }
    });
  }
  return out;
}

Tensor softmax_rows(Tape& tape, const Tensor& x) {
  const auto rows = x.rows(), cols = x.cols();
  Tensor out(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xv.data() + r * cols;
    float* dst = o.data() + r * cols;
    const float peak = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      dst[c] = std::exp(in[c] - peak);
      total += dst[c];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (std::size_t c = 0; c < cols; ++c) dst[c] *= inv;
  }
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out, rows, cols]() mutable {
      auto g = std::as_const(out).grad();
      auto y = std::as_const(out).data();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += double(g[r * cols + c]) * y[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          gx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - static_cast<float>(dot));
        }
      }
    });
  }
  return out;
}

Tensor rmsnorm_rows(Tape& tape, const Tensor& x, const Tensor& gain, float eps) {
  const auto rows = x.rows(), cols = x.cols();
  if (gain.numel() != cols) {
    throw DimensionError("rmsnorm_rows: gain " + shape_string(gain.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  Tensor out(x.shape());
  std::vector<float> inv_rms(rows);
  auto o = out.data();
  auto xv = x.data(), wv = gain.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xv.data() + r * cols;
    double ms = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ms += double(in[c]) * in[c];
    inv_rms[r] = static_cast<float>(1.0 / std::sqrt(ms / double(cols) + eps));
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = in[c] * inv_rms[r] * wv[c];
  }
  if (tape.tracks({&x, &gain})) {
    tape.record(out, [x = x, gain = gain, out, inv_rms = std::move(inv_rms), rows, cols]() mutable {
      auto g = std::as_const(out).grad();
      auto xv = std::as_const(x).data();
      auto wv = std::as_const(gain).data();
      if (gain.requires_grad()) {
        auto gw = gain.grad();
        for (std::size_t c = 0; c < cols; ++c) {
          double acc = 0.0;
          for (std::size_t r = 0; r < rows; ++r) acc += double(g[r * cols + c]) * xv[r * cols + c] * inv_rms[r];
          gw[c] += static_cast<float>(acc);
        }
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const float s = inv_rms[r];
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            dot += double(g[r * cols + c]) * wv[c] * xv[r * cols + c] * s;
          }
          const float mean_dot = static_cast<float>(dot / double(cols));
          for (std::size_t c = 0; c < cols; ++c) {
            const float xhat = xv[r * cols + c] * s;
            gx[r * cols + c] += s * (g[r * cols + c] * wv[c] - xhat * mean_dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor mask_columns(Tape& tape, const Tensor& x, std::span<const float> gate) {
  const auto rows = x.rows(), cols = x.cols();
  if (gate.size() != cols) {
    throw DimensionError("mask_columns: gate of length " + std::to_string(gate.size()) + " does not match " +
                         shape_string(x.shape()));
  }
  std::vector<float> gate_copy(gate.begin(), gate.end());
  Tensor out(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = xv[r * cols + c] * gate_copy[c];
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out, gate_copy = std::move(gate_copy), rows, cols]() mutable {
      auto g = std::as_const(out).grad();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * gate_copy[c];
    });
  }
  return out;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids) {
  require_2d(table, "embedding");
  const auto vocab = table.dim(0), width = table.dim(1);
  if (ids.empty()) throw InputError("embedding: empty id sequence");
  Tensor out({ids.size(), width});
  auto o = out.data();
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.data() + ids[i] * width, width, o.data() + i * width);
  }
  if (tape.tracks({&table})) {
    std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
    tape.record(out, [table = table, out, id_copy = std::move(id_copy), width]() mutable {
      auto g = std::as_const(out).grad();
      auto gt = table.grad();
      for (std::size_t i = 0; i < id_copy.size(); ++i) {
        float* dst = gt.data() + id_copy[i] * width;
        for (std::size_t c = 0; c < width; ++c) dst[c] += g[i * width + c];
      }
    });
  }
  return out;
}

namespace {

struct RopeTable {
  std::vector<float> cos_v;
  std::vector<float> sin_v;
};

// cos/sin indexed [position * half + i]
RopeTable make_rope_table(std::size_t seq_len, std::size_t half, float theta) {
  RopeTable t;
  t.cos_v.resize(seq_len * half);
  t.sin_v.resize(seq_len * half);
  for (std::size_t p = 0; p < seq_len; ++p) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(double(theta), -2.0 * double(i) / double(2 * half));
      const double angle = double(p) * freq;
      t.cos_v[p * half + i] = static_cast<float>(std::cos(angle));
      t.sin_v[p * half + i] = static_cast<float>(std::sin(angle));
    }
  }
  return t;
}

void rotate(std::span<const float> in, std::span<float> out, const RopeTable& table, std::size_t rows,
            std::size_t seq_len, std::size_t n_heads, std::size_t d_head, bool inverse, bool accumulate) {
  const std::size_t half = d_head / 2, cols = n_heads * d_head;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t pos = r % seq_len;
    const float* c = table.cos_v.data() + pos * half;
    const float* s = table.sin_v.data() + pos * half;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t base = r * cols + h * d_head;
      for (std::size_t i = 0; i < half; ++i) {
        const float x0 = in[base + i], x1 = in[base + i + half];
        const float sn = inverse ? -s[i] : s[i];
        const float y0 = x0 * c[i] - x1 * sn;
        const float y1 = x0 * sn + x1 * c[i];
        if (accumulate) {
          out[base + i] += y0;
          out[base + i + half] += y1;
        } else {
          out[base + i] = y0;
          out[base + i + half] = y1;
        }
      }
    }
  }
}

}  // namespace

Tensor rope(Tape& tape, const Tensor& x, std::size_t seq_len, std::size_t n_heads, float theta) {
  require_2d(x, "rope");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (n_heads == 0 || cols % n_heads != 0 || (cols / n_heads) % 2 != 0) {
    throw DimensionError("rope: " + std::to_string(cols) + " columns cannot be split into " +
                         std::to_string(n_heads) + " even-width heads");
  }
  if (seq_len == 0 || rows % seq_len != 0) {
    throw DimensionError("rope: " + std::to_string(rows) + " rows are not a multiple of seq_len " +
                         std::to_string(seq_len));
  }
  const auto d_head = cols / n_heads;
  auto table = std::make_shared<RopeTable>(make_rope_table(seq_len, d_head / 2, theta));
  Tensor out(x.shape());
  rotate(x.data(), out.data(), *table, rows, seq_len, n_heads, d_head, false, false);
  if (tape.tracks({&x})) {
    tape.record(out, [x = x, out, table = table, rows, seq_len, n_heads, d_head]() mutable {
      rotate(std::as_const(out).grad(), x.grad(), *table, rows, seq_len, n_heads, d_head, true, true);
    });
  }
  return out;
}

Tensor causal_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& s) {
  require_2d(q, "causal_attention");
  require_2d(k, "causal_attention");
  require_2d(v, "causal_attention");
  if (s.n_heads == 0 || s.n_kv_heads == 0 || s.n_heads % s.n_kv_heads != 0 || s.seq_len == 0 || s.d_head == 0) {
    throw DimensionError("causal_attention: invalid head configuration");
  }
  const auto rows = q.dim(0);
  if (q.dim(1) != s.n_heads * s.d_head || k.dim(1) != s.n_kv_heads * s.d_head ||
      v.dim(1) != s.n_kv_heads * s.d_head || k.dim(0) != rows || v.dim(0) != rows || rows % s.seq_len != 0) {
    throw DimensionError("causal_attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) +
                         ", v " + shape_string(v.shape()) + " inconsistent with heads");
  }
  const std::size_t T = s.seq_len, dh = s.d_head, H = s.n_heads;
  const std::size_t n_seq = rows / T, group = s.n_heads / s.n_kv_heads;
  const std::size_t qc = H * dh, kc = s.n_kv_heads * dh;
  const float inv_scale = 1.0f / std::sqrt(static_cast<float>(dh));

  // probs[(seq * H + h) * T * T + i * T + j], zero above the diagonal
  auto probs = std::make_shared<std::vector<float>>(n_seq * H * T * T, 0.0f);
  Tensor out({rows, qc});
  auto qv = q.data(), kv = k.data(), vv = v.data();
  auto o = out.data();
  for (std::size_t sq = 0; sq < n_seq; ++sq) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t kvh = h / group;
      float* P = probs->data() + (sq * H + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        const float* qi = qv.data() + (sq * T + i) * qc + h * dh;
        float* prow = P + i * T;
        float peak = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          const float* kj = kv.data() + (sq * T + j) * kc + kvh * dh;
          float dot = 0.0f;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          prow[j] = dot * inv_scale;
          peak = std::max(peak, prow[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          prow[j] = std::exp(prow[j] - peak);
          total += prow[j];
        }
        const float inv = static_cast<float>(1.0 / total);
        float* oi = o.data() + (sq * T + i) * qc + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          prow[j] *= inv;
          const float* vj = vv.data() + (sq * T + j) * kc + kvh * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += prow[j] * vj[c];
        }
      }
    }
  }
  if (tape.tracks({&q, &k, &v})) {
    tape.record(out, [q = q, k = k, v = v, out, probs, T, dh, H, n_seq, group, qc, kc, inv_scale]() mutable {
      auto g = std::as_const(out).grad();
      auto qv = std::as_const(q).data(), kv = std::as_const(k).data(), vv = std::as_const(v).data();
      std::vector<float> scratch_q, scratch_k, scratch_v;
      std::span<float> gq, gk, gv;
      // Inputs that do not need gradients still receive them into scratch so
      // the kernel stays branch-free.
      auto target = [](Tensor& t, std::vector<float>& scratch) -> std::span<float> {
        if (t.requires_grad()) return t.grad();
        scratch.assign(t.numel(), 0.0f);
        return scratch;
      };
      gq = target(q, scratch_q);
      gk = target(k, scratch_k);
      gv = target(v, scratch_v);
      std::vector<float> dp(T);
      for (std::size_t sq = 0; sq < n_seq; ++sq) {
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t kvh = h / group;
          const float* P = probs->data() + (sq * H + h) * T * T;
          for (std::size_t i = 0; i < T; ++i) {
            const float* gi = g.data() + (sq * T + i) * qc + h * dh;
            const float* prow = P + i * T;
            double row_dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
              const float* vj = vv.data() + (sq * T + j) * kc + kvh * dh;
              float* gvj = gv.data() + (sq * T + j) * kc + kvh * dh;
              float d = 0.0f;
              for (std::size_t c = 0; c < dh; ++c) {
                d += gi[c] * vj[c];
                gvj[c] += prow[j] * gi[c];
              }
              dp[j] = d;
              row_dot += double(d) * prow[j];
            }
            const float* qi = qv.data() + (sq * T + i) * qc + h * dh;
            float* gqi = gq.data() + (sq * T + i) * qc + h * dh;
            for (std::size_t j = 0; j <= i; ++j) {
              const float ds = prow[j] * (dp[j] - static_cast<float>(row_dot)) * inv_scale;
              const float* kj = kv.data() + (sq * T + j) * kc + kvh * dh;
              float* gkj = gk.data() + (sq * T + j) * kc + kvh * dh;
              for (std::size_t c = 0; c < dh; ++c) {
                gqi[c] += ds * kj[c];
                gkj[c] += ds * qi[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy_mean(Tape& tape, const Tensor& logits, std::span<const std::int32_t> targets) {
  require_2d(logits, "cross_entropy_mean");
  const auto rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_mean: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  for (auto t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw InputError("cross_entropy_mean: target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
  auto lv = logits.data();
  auto log_norm = std::make_shared<std::vector<double>>(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = lv.data() + r * vocab;
    const float peak = *std::max_element(row, row + vocab);
    double acc = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) acc += std::exp(double(row[c]) - peak);
    (*log_norm)[r] = double(peak) + std::log(acc);
    total += (*log_norm)[r] - double(row[targets[r]]);
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / double(rows)));
  if (tape.tracks({&logits})) {
    std::vector<std::int32_t> target_copy(targets.begin(), targets.end());
    tape.record(out, [logits = logits, out, log_norm, target_copy = std::move(target_copy), rows, vocab]() mutable {
      const float g = std::as_const(out).grad()[0];
      const double scale_factor = double(g) / double(rows);
      auto lv = std::as_const(logits).data();
      auto gl = logits.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double ln = (*log_norm)[r];
        for (std::size_t c = 0; c < vocab; ++c) {
          double p = std::exp(double(lv[r * vocab + c]) - ln);
          if (static_cast<std::int32_t>(c) == target_copy[r]) p -= 1.0;
          gl[r * vocab + c] += static_cast<float>(p * scale_factor);
        }
      }
    });
  }
  return out;
}

}  // namespace gradtrace::ad
