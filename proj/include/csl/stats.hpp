#pragma once

#include "csl/common.hpp"

#include <algorithm>
#include <numeric>
#include <span>
#include <utility>

namespace csl {

/// Pearson correlation, two-pass (means first, then centered sums).
/// Throws when either input is constant.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "pearson: length mismatch");
  require(a.size() >= 2, "pearson: need at least 2 samples");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) fail_validation("pearson: constant input, correlation undefined");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double pearson(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  return pearson(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                 std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

/// 1-based ranks; tied values share the mean of the ranks they occupy.
inline std::vector<double> midranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return x[i] < x[j]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "spearman: length mismatch");
  const auto ra = midranks(a);
  const auto rb = midranks(b);
  return pearson(ra, rb);
}

/// Empirical quantile used for permutation thresholds: the order statistic
/// x_(k) with k = ceil(p * (m + 1)), clamped to [1, m]. With the observed value
/// counted as one more exchangeable draw, P(observed > x_(k)) <= 1 - p.
inline double permutation_quantile(std::vector<double> values, double p) {
  require(!values.empty(), "quantile of empty sample");
  require(p > 0.0 && p < 1.0, "quantile level must lie in (0, 1)");
  std::sort(values.begin(), values.end());
  const auto m = static_cast<double>(values.size());
  auto k = static_cast<std::size_t>(std::ceil(p * (m + 1.0) - 1e-12));
  k = std::clamp<std::size_t>(k, 1, values.size());
  return values[k - 1];
}

/// Linear-interpolation percentile (the common "type 7" definition), used for
/// bootstrap interval endpoints.
inline double percentile_linear(std::vector<double> values, double p) {
  require(!values.empty(), "percentile of empty sample");
  require(p >= 0.0 && p <= 1.0, "percentile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = p * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline double mean(std::span<const double> x) {
  require(!x.empty(), "mean of empty sample");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

struct Interval {
  double low = 0;
  double high = 0;
};

inline constexpr int kDefaultBootstrapResamples = 10000;
inline constexpr double kDefaultBootstrapLevel = 0.95;

/// Percentile bootstrap interval for the mean of `samples`.
inline Interval bootstrap_ci(std::span<const double> samples, int resamples = kDefaultBootstrapResamples,
                             double level = kDefaultBootstrapLevel, std::uint64_t seed = 0) {
  require(!samples.empty(), "bootstrap_ci: empty input");
  require(samples.size() >= 2, "bootstrap_ci: need at least 2 samples");
  require(resamples >= 1000, "bootstrap_ci: need at least 1000 resamples");
  require(level > 0.0 && level < 1.0, "bootstrap_ci: level must lie in (0, 1)");
  Rng rng = make_rng(seed, 0xb0075ULL);
  const std::size_t n = samples.size();
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += samples[uniform_index(rng, n)];
    m = s / static_cast<double>(n);
  }
  const double tail = 0.5 * (1.0 - level);
  Interval ci{percentile_linear(means, tail), percentile_linear(means, 1.0 - tail)};
  // Resampled means of constant data can differ from the sample mean by an ulp.
  const double mu = mean(samples);
  ci.low = std::min(ci.low, mu);
  ci.high = std::max(ci.high, mu);
  return ci;
}

}  // namespace csl
