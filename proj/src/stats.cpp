#include "gradtrace/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gradtrace/errors.hpp"

namespace gradtrace::stats {

namespace {

void check_pair(std::span<const double> x, std::span<const double> y, const char* what) {
  if (x.size() != y.size()) {
    throw InputError(std::string(what) + ": length mismatch " + std::to_string(x.size()) + " vs " +
                     std::to_string(y.size()));
  }
  if (x.size() < 2) throw InputError(std::string(what) + ": need at least two observations");
}

}  // namespace

std::vector<double> fractional_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // positions i..j-1 hold ranks i+1..j
    const double shared = 0.5 * double(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) ranks[order[t]] = shared;
    i = j;
  }
  return ranks;
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, "pearson_r");
  const double n = double(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double spearman_rho(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, "spearman_rho");
  const auto rx = fractional_ranks(x);
  const auto ry = fractional_ranks(y);
  return pearson_r(rx, ry);
}

double kendall_tau(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, "kendall_tau");
  long long concordant = 0, discordant = 0, tie_x = 0, tie_y = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0.0 && dy == 0.0) continue;
      if (dx == 0.0) {
        ++tie_x;
      } else if (dy == 0.0) {
        ++tie_y;
      } else if ((dx > 0.0) == (dy > 0.0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  // pairs untied in x, pairs untied in y
  const double n1 = double(concordant + discordant + tie_y);
  const double n2 = double(concordant + discordant + tie_x);
  if (n1 == 0.0 || n2 == 0.0) return 0.0;
  return double(concordant - discordant) / std::sqrt(n1 * n2);
}

}  // namespace gradtrace::stats
