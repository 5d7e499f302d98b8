#include "gradtrace/calibration.hpp"

#include <string>

#include "gradtrace/errors.hpp"
#include "gradtrace/hash.hpp"

namespace gradtrace {

CalibrationBatch::CalibrationBatch(std::vector<std::vector<std::int32_t>> sequences)
    : sequences_(std::move(sequences)) {
  if (sequences_.empty()) throw InputError("calibration batch needs at least one sequence");
  seq_len_ = sequences_.front().size();
  if (seq_len_ < 2) throw InputError("calibration sequences need at least two tokens");
  for (const auto& s : sequences_) {
    if (s.size() != seq_len_) {
      throw InputError("calibration sequences must share one length: " + std::to_string(s.size()) + " vs " +
                       std::to_string(seq_len_));
    }
    inputs_.insert(inputs_.end(), s.begin(), s.end() - 1);
    targets_.insert(targets_.end(), s.begin() + 1, s.end());
  }
}

CalibrationBatch CalibrationBatch::prefix(std::size_t n) const { return slice(0, n); }

CalibrationBatch CalibrationBatch::slice(std::size_t first, std::size_t count) const {
  if (count == 0 || first + count > sequences_.size()) {
    throw InputError("calibration slice [" + std::to_string(first) + ", " + std::to_string(first + count) +
                     ") out of range for " + std::to_string(sequences_.size()) + " sequences");
  }
  return CalibrationBatch({sequences_.begin() + static_cast<std::ptrdiff_t>(first),
                           sequences_.begin() + static_cast<std::ptrdiff_t>(first + count)});
}

std::uint64_t CalibrationBatch::content_hash() const {
  Fnv1a h;
  h.update_u64(sequences_.size());
  h.update_u64(seq_len_);
  for (const auto& s : sequences_) h.update(std::span<const std::int32_t>(s));
  return h.digest();
}

}  // namespace gradtrace
