#include "gradtrace/encoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gradtrace/errors.hpp"
#include "gradtrace/model.hpp"

namespace gradtrace {

std::size_t ArchEncoding::active_blocks() const {
  return static_cast<std::size_t>(std::count_if(depth.begin(), depth.end(), [](auto d) { return d != 0; }));
}

ArchEncoding ArchEncoding::identity(std::size_t n_layers) {
  ArchEncoding enc;
  enc.depth.assign(n_layers, 1);
  enc.width.assign(n_layers, WidthRatio{});
  return enc;
}

void validate_encoding(const ArchEncoding& enc, const ModelConfig& cfg, const EncodingLimits& limits) {
  if (enc.depth.size() != cfg.n_layers || enc.width.size() != cfg.n_layers) {
    throw InputError("encoding covers " + std::to_string(enc.depth.size()) + "/" + std::to_string(enc.width.size()) +
                     " blocks, model has " + std::to_string(cfg.n_layers));
  }
  if (limits.min_ratio <= 0.0 || limits.min_ratio > 1.0) {
    throw ConfigError("minimum retention ratio must lie in (0, 1]");
  }
  if (enc.active_blocks() < limits.min_depth) {
    throw InputError("encoding keeps " + std::to_string(enc.active_blocks()) + " blocks, minimum is " +
                     std::to_string(limits.min_depth));
  }
  for (std::size_t l = 0; l < enc.width.size(); ++l) {
    for (double r : {enc.width[l].attn, enc.width[l].mlp}) {
      if (!(r >= limits.min_ratio && r <= 1.0)) {
        throw InputError("retention ratio " + std::to_string(r) + " of block " + std::to_string(l) +
                         " outside [" + std::to_string(limits.min_ratio) + ", 1]");
      }
    }
  }
}

std::size_t retained_heads(double ratio, std::size_t n_heads) {
  const auto k = static_cast<std::size_t>(std::max(1L, std::lround(ratio * double(n_heads))));
  return std::min(k, n_heads);
}

std::size_t retained_attn_channels(double ratio, std::size_t channels) { return retained_heads(ratio, channels); }

std::size_t retained_mlp_channels(double ratio, std::size_t d_ff, std::size_t multiple) {
  const long groups = std::lround(ratio * double(d_ff) / double(multiple));
  const auto k = std::max(multiple, static_cast<std::size_t>(std::max(0L, groups)) * multiple);
  return std::min(k, d_ff);
}

std::size_t retained_attn_width(double ratio, const ModelConfig& cfg) {
  if (cfg.attn_granularity == AttentionGranularity::head) return retained_heads(ratio, cfg.n_heads) * cfg.d_head;
  return retained_attn_channels(ratio, cfg.attn_width());
}

}  // namespace gradtrace
