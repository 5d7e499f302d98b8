#pragma once

#include <span>
#include <vector>

namespace gradtrace::stats {

// Fractional ranks starting at 1; tied values share the average of the ranks
// they span.
std::vector<double> fractional_ranks(std::span<const double> values);

// Plain product-moment correlation; 0 when either side is constant.
double pearson_r(std::span<const double> x, std::span<const double> y);

// Pearson correlation of fractional ranks.
double spearman_rho(std::span<const double> x, std::span<const double> y);

// Kendall tau-b with tie correction, O(n^2). All-tied input on either side
// yields 0.
double kendall_tau(std::span<const double> x, std::span<const double> y);

}  // namespace gradtrace::stats
