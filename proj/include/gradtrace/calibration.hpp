#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace gradtrace {

// N token sequences of identical length CL. Each sequence contributes CL-1
// next-token predictions: inputs are tokens [0, CL-1), targets [1, CL).
class CalibrationBatch {
 public:
  CalibrationBatch() = default;
  explicit CalibrationBatch(std::vector<std::vector<std::int32_t>> sequences);

  std::size_t size() const { return sequences_.size(); }
  std::size_t sequence_length() const { return seq_len_; }
  std::size_t positions() const { return seq_len_ - 1; }
  bool empty() const { return sequences_.empty(); }

  const std::vector<std::vector<std::int32_t>>& sequences() const { return sequences_; }
  std::span<const std::int32_t> inputs() const { return inputs_; }
  std::span<const std::int32_t> targets() const { return targets_; }

  CalibrationBatch prefix(std::size_t n) const;
  CalibrationBatch slice(std::size_t first, std::size_t count) const;
  std::uint64_t content_hash() const;

 private:
  std::vector<std::vector<std::int32_t>> sequences_;
  std::size_t seq_len_ = 0;
  std::vector<std::int32_t> inputs_;
  std::vector<std::int32_t> targets_;
};

}  // namespace gradtrace
