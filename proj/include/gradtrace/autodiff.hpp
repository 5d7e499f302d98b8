#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "gradtrace/tensor.hpp"

namespace gradtrace::ad {

// Records operations in execution order so gradients can be replayed in
// reverse. Only ops with at least one requires_grad input are recorded; with
// recording disabled the ops run as plain forward kernels.
//
// Leaf gradients accumulate across backward() calls until zero_grad(); the
// gradients of intermediate tensors are reset at the start of every replay.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // True when an op over `inputs` must be recorded.
  bool tracks(std::initializer_list<const Tensor*> inputs) const;

  void record(Tensor output, std::function<void()> backward_rule);

  void backward(Tensor& loss);
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor output;
    std::function<void()> backward_rule;
  };
  bool recording_ = true;
  std::vector<Node> nodes_;
};

// a[m x k] . b[k x n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// x[m x k] . w[n x k]^T, the layout used by every projection.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, float factor);
// x[m x n] + bias[n] broadcast over rows.
Tensor add_rowwise(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor silu(Tape& tape, const Tensor& x);
Tensor softmax_rows(Tape& tape, const Tensor& x);
// Row-wise RMS normalisation followed by a learned per-column gain.
Tensor rmsnorm_rows(Tape& tape, const Tensor& x, const Tensor& gain, float eps = 1e-5f);

// Multiplies each column j by the constant gate[j] (no gradient to the gate).
Tensor mask_columns(Tape& tape, const Tensor& x, std::span<const float> gate);

// Gathers rows of table[V x d] for each id.
Tensor embedding(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids);

// Rotary position embedding applied independently to each head of x
// [(n_seq*seq_len) x (n_heads*d_head)]; channel i pairs with i + d_head/2.
Tensor rope(Tape& tape, const Tensor& x, std::size_t seq_len, std::size_t n_heads, float theta = 10000.0f);

struct AttentionShape {
  std::size_t seq_len = 0;
  std::size_t n_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t d_head = 0;
};

// Causal scaled dot-product attention over packed sequences. Rows of q/k/v
// are grouped into consecutive sequences of seq_len tokens; query head h
// reads kv head h / (n_heads / n_kv_heads).
Tensor causal_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape);

// Mean negative log-likelihood of targets under row-wise softmax(logits).
Tensor cross_entropy_mean(Tape& tape, const Tensor& logits, std::span<const std::int32_t> targets);

}  // namespace gradtrace::ad
