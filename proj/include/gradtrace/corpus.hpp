#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gradtrace/calibration.hpp"

namespace gradtrace {

// Byte-level corpus: every byte is a token (vocabulary 256).
struct Corpus {
  std::vector<std::int32_t> tokens;

  std::size_t size() const { return tokens.size(); }
};

Corpus corpus_from_bytes(const std::string& bytes);
Corpus load_corpus(const std::filesystem::path& path);

// Deterministic English-like prose from a small seeded grammar. Used when no
// corpus file is given so that every run is reproducible offline.
std::string synthesize_text(std::size_t n_bytes, std::uint64_t seed);

// Contiguous train / calibration / heldout segments.
struct CorpusSplits {
  Corpus train;
  Corpus calibration;
  Corpus heldout;
};

CorpusSplits split_corpus(const Corpus& corpus, double train_fraction = 0.90, double calib_fraction = 0.05);

// n windows of `length` tokens at seeded random offsets of `segment`.
CalibrationBatch sample_batch(const Corpus& segment, std::size_t n, std::size_t length, std::uint64_t seed);

}  // namespace gradtrace
