#include "gradtrace/corpus.hpp"

#include <array>
#include <cctype>
#include <fstream>
#include <iterator>
#include <random>
#include <string_view>

#include "gradtrace/errors.hpp"

namespace gradtrace {

Corpus corpus_from_bytes(const std::string& bytes) {
  if (bytes.empty()) throw InputError("corpus is empty");
  Corpus c;
  c.tokens.reserve(bytes.size());
  for (unsigned char ch : bytes) c.tokens.push_back(static_cast<std::int32_t>(ch));
  return c;
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading corpus " + path.string());
  if (bytes.empty()) throw InputError("corpus " + path.string() + " is empty");
  return corpus_from_bytes(bytes);
}

namespace {

constexpr std::array<std::string_view, 40> kNouns{
    "river",  "garden", "sailor", "lantern", "village", "mountain", "letter",  "window", "harbor", "forest",
    "farmer", "stone",  "bridge", "market",  "candle",  "king",     "meadow",  "wagon",  "teacher", "road",
    "bell",   "storm",  "orchard", "miller", "tower",   "kitchen",  "doctor",  "field",  "shadow", "island",
    "horse",  "child",  "church", "valley",  "song",    "ship",     "traveler", "door",  "winter", "friend"};
constexpr std::array<std::string_view, 30> kVerbs{
    "watched", "carried", "followed", "found",   "remembered", "painted", "crossed", "opened", "heard", "kept",
    "mended",  "visited", "praised",  "guarded", "lifted",     "called",  "sold",    "built",  "left",  "saw",
    "answered", "feared", "loved",    "passed",  "wrote",      "counted", "missed",  "warmed", "led",   "knew"};
constexpr std::array<std::string_view, 24> kAdjectives{
    "old",   "quiet",  "bright", "small",  "narrow", "golden", "cold",  "gentle",
    "broad", "silent", "green",  "heavy",  "distant", "kind",  "wild",  "patient",
    "tired", "young",  "dark",   "simple", "proud",  "careful", "plain", "warm"};
constexpr std::array<std::string_view, 12> kAdverbs{"slowly", "often", "quietly", "again",  "early", "gladly",
                                                    "never",  "always", "softly", "twice", "late",  "still"};
constexpr std::array<std::string_view, 12> kPlaces{"by the river", "in the morning", "after the storm",
                                                   "near the harbor", "before dawn",  "under the bridge",
                                                   "at the market", "through the forest", "in the valley",
                                                   "on the road",   "beside the tower", "during the winter"};
constexpr std::array<std::string_view, 10> kNames{"Anna", "Tomas", "Elena", "Marcus", "Ruth",
                                                  "Henrik", "Clara", "Jonah", "Mira", "Pieter"};
constexpr std::array<std::string_view, 6> kConnectives{"and", "but", "while", "because", "so", "until"};

class Prose {
 public:
  explicit Prose(std::uint64_t seed) : rng_(seed) {}

  std::string paragraph() {
    std::string out;
    const int sentences = 3 + static_cast<int>(uniform(5));
    for (int i = 0; i < sentences; ++i) {
      if (i) out += ' ';
      out += sentence();
    }
    return out;
  }

 private:
  std::size_t uniform(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
  bool chance(double p) { return std::bernoulli_distribution(p)(rng_); }

  // Zipf-like pick: earlier entries are more frequent.
  template <std::size_t N>
  std::string_view pick(const std::array<std::string_view, N>& words) {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    return words[static_cast<std::size_t>(double(N) * u * u)];
  }

  std::string noun_phrase() {
    if (chance(0.2)) return std::string(pick(kNames));
    std::string head;
    if (chance(0.5)) {
      head += pick(kAdjectives);
      head += ' ';
    }
    head += pick(kNouns);
    const bool plural = chance(0.15);
    if (plural) head += 's';
    if (chance(0.6) || plural) return "the " + head;
    return (std::string_view("aeiou").find(head.front()) != std::string_view::npos ? "an " : "a ") + head;
  }

  std::string clause() {
    std::string c = noun_phrase();
    if (chance(0.25)) {
      c += ' ';
      c += pick(kAdverbs);
    }
    c += ' ';
    c += pick(kVerbs);
    c += ' ';
    c += noun_phrase();
    if (chance(0.4)) {
      c += ' ';
      c += pick(kPlaces);
    }
    return c;
  }

  std::string sentence() {
    std::string s = clause();
    if (chance(0.35)) {
      s += chance(0.5) ? ", " : " ";
      s += pick(kConnectives);
      s += ' ';
      s += clause();
    }
    if (chance(0.1)) {
      s = "\"" + s + ",\" said " + std::string(pick(kNames));
    }
    s[s[0] == '"' ? 1 : 0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[s[0] == '"' ? 1 : 0])));
    s += chance(0.9) ? "." : (chance(0.5) ? "?" : "!");
    return s;
  }

  std::mt19937_64 rng_;
};

}  // namespace

std::string synthesize_text(std::size_t n_bytes, std::uint64_t seed) {
  Prose prose(seed);
  std::string text;
  text.reserve(n_bytes + 1024);
  while (text.size() < n_bytes) {
    text += prose.paragraph();
    text += "\n\n";
  }
  text.resize(n_bytes);
  return text;
}

CorpusSplits split_corpus(const Corpus& corpus, double train_fraction, double calib_fraction) {
  if (train_fraction <= 0.0 || calib_fraction <= 0.0 || train_fraction + calib_fraction >= 1.0) {
    throw ConfigError("corpus split fractions must be positive and leave room for a heldout segment");
  }
  const std::size_t n = corpus.size();
  const auto train_end = static_cast<std::size_t>(double(n) * train_fraction);
  const auto calib_end = static_cast<std::size_t>(double(n) * (train_fraction + calib_fraction));
  if (train_end == 0 || calib_end <= train_end || calib_end >= n) {
    throw InputError("corpus of " + std::to_string(n) + " bytes is too small to split");
  }
  CorpusSplits s;
  s.train.tokens.assign(corpus.tokens.begin(), corpus.tokens.begin() + static_cast<std::ptrdiff_t>(train_end));
  s.calibration.tokens.assign(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(train_end),
                              corpus.tokens.begin() + static_cast<std::ptrdiff_t>(calib_end));
  s.heldout.tokens.assign(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(calib_end), corpus.tokens.end());
  return s;
}

CalibrationBatch sample_batch(const Corpus& segment, std::size_t n, std::size_t length, std::uint64_t seed) {
  if (n == 0 || length < 2) throw ConfigError("batch needs n >= 1 sequences of length >= 2");
  if (segment.size() < length) {
    throw InputError("segment of " + std::to_string(segment.size()) + " tokens is shorter than sequence length " +
                     std::to_string(length));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> offset(0, segment.size() - length);
  std::vector<std::vector<std::int32_t>> seqs;
  seqs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto start = segment.tokens.begin() + static_cast<std::ptrdiff_t>(offset(rng));
    seqs.emplace_back(start, start + static_cast<std::ptrdiff_t>(length));
  }
  return CalibrationBatch(std::move(seqs));
}

}  // namespace gradtrace
