#include "mus/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mus/common.hpp"

namespace mus::stats {
namespace {

struct RankInfo {
  std::vector<double> ranks;   // 1-based mid-ranks, same order as input
  bool has_ties = false;
  double tie_term = 0.0;       // sum of (t^3 - t) over tie groups
};

RankInfo rank_midties(const std::vector<double>& vals) {
  const size_t n = vals.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t i, size_t j) { return vals[i] < vals[j]; });
  RankInfo info;
  info.ranks.resize(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && vals[order[j]] == vals[order[i]]) ++j;
    const double t = static_cast<double>(j - i);
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (size_t k = i; k < j; ++k) info.ranks[order[k]] = mid;
    if (j - i > 1) {
      info.has_ties = true;
      info.tie_term += t * t * t - t;
    }
    i = j;
  }
  return info;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// One- and two-sided p-values from Phi with continuity correction +-0.5.
double approx_p(double stat, double mean, double sigma, Alternative alt) {
  if (sigma <= 0.0) return 1.0;  // degenerate null distribution
  const double p_greater = 1.0 - normal_cdf((stat - mean - 0.5) / sigma);
  const double p_less = normal_cdf((stat - mean + 0.5) / sigma);
  switch (alt) {
    case Alternative::greater: return p_greater;
    case Alternative::less: return p_less;
    case Alternative::two_sided: return std::min(1.0, 2.0 * std::min(p_greater, p_less));
  }
  return 1.0;
}

double tail_p(const std::vector<double>& counts, double total, int64_t w, Alternative alt) {
  const int64_t last = static_cast<int64_t>(counts.size()) - 1;
  double below = 0.0, above = 0.0;
  for (int64_t s = 0; s <= last; ++s) {
    if (s <= w) below += counts[static_cast<size_t>(s)];
    if (s >= w) above += counts[static_cast<size_t>(s)];
  }
  const double p_less = below / total;
  const double p_greater = above / total;
  switch (alt) {
    case Alternative::greater: return p_greater;
    case Alternative::less: return p_less;
    case Alternative::two_sided: return std::min(1.0, 2.0 * std::min(p_greater, p_less));
  }
  return 1.0;
}

} // namespace

TestResult wilcoxon_signed_rank(const std::vector<double>& a,
                                const std::vector<double>& b,
                                Alternative alt) {
  require(a.size() == b.size(), "wilcoxon: paired samples must have equal length");
  require(!a.empty(), "wilcoxon: empty sample");
  std::vector<double> diff;
  diff.reserve(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    require(std::isfinite(d), "wilcoxon: non-finite difference");
    if (d != 0.0) diff.push_back(d);
  }
  require(!diff.empty(), "wilcoxon: all differences are zero");
  const int64_t n = static_cast<int64_t>(diff.size());

  std::vector<double> mag(diff.size());
  for (size_t i = 0; i < diff.size(); ++i) mag[i] = std::fabs(diff[i]);
  const RankInfo ri = rank_midties(mag);

  double w_plus = 0.0;
  for (size_t i = 0; i < diff.size(); ++i)
    if (diff[i] > 0.0) w_plus += ri.ranks[i];

  TestResult res;
  res.statistic = w_plus;
  res.n_effective = n;

  if (n <= 25 && !ri.has_ties) {
    // Ranks are exactly 1..n; enumerate sign assignments via the polynomial
    // product of (1 + x^r): counts[s] = #assignments with W+ = s.
    const int64_t max_sum = n * (n + 1) / 2;
    std::vector<double> counts(static_cast<size_t>(max_sum) + 1, 0.0);
    counts[0] = 1.0;
    for (int64_t r = 1; r <= n; ++r)
      for (int64_t s = max_sum; s >= r; --s)
        counts[static_cast<size_t>(s)] += counts[static_cast<size_t>(s - r)];
    const double total = std::ldexp(1.0, static_cast<int>(n));
    res.exact = true;
    res.p_value = tail_p(counts, total, static_cast<int64_t>(std::llround(w_plus)), alt);
    return res;
  }

  const double nd = static_cast<double>(n);
  const double mean = nd * (nd + 1.0) / 4.0;
  const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - ri.tie_term / 48.0;
  res.exact = false;
  res.p_value = approx_p(w_plus, mean, std::sqrt(std::max(var, 0.0)), alt);
  return res;
}

TestResult mann_whitney_u(const std::vector<double>& x,
                          const std::vector<double>& y,
                          Alternative alt) {
  require(!x.empty() && !y.empty(), "mann-whitney: empty sample");
  const int64_t n = static_cast<int64_t>(x.size());
  const int64_t m = static_cast<int64_t>(y.size());
  std::vector<double> pooled;
  pooled.reserve(x.size() + y.size());
  for (double v : x) {
    require(std::isfinite(v), "mann-whitney: non-finite value");
    pooled.push_back(v);
  }
  for (double v : y) {
    require(std::isfinite(v), "mann-whitney: non-finite value");
    pooled.push_back(v);
  }
  const RankInfo ri = rank_midties(pooled);
  double rank_x = 0.0;
  for (size_t i = 0; i < x.size(); ++i) rank_x += ri.ranks[i];
  const double u = rank_x - static_cast<double>(n) * (static_cast<double>(n) + 1.0) / 2.0;

  TestResult res;
  res.statistic = u;
  res.n_effective = n + m;

  if (n + m <= 14 && !ri.has_ties) {
    const int64_t umax = n * m;
    // N(k, j, s): subsets of size k from {1..k+j} with U = s.
    // N(k, j, s) = N(k-1, j, s-j) + N(k, j-1, s).
    std::vector<std::vector<std::vector<double>>> table(
        static_cast<size_t>(n) + 1,
        std::vector<std::vector<double>>(
            static_cast<size_t>(m) + 1,
            std::vector<double>(static_cast<size_t>(umax) + 1, 0.0)));
    for (int64_t j = 0; j <= m; ++j) table[0][static_cast<size_t>(j)][0] = 1.0;
    for (int64_t k = 1; k <= n; ++k) {
      table[static_cast<size_t>(k)][0][0] = 1.0;
      for (int64_t j = 1; j <= m; ++j)
        for (int64_t s = 0; s <= umax; ++s) {
          double v = table[static_cast<size_t>(k)][static_cast<size_t>(j - 1)][static_cast<size_t>(s)];
          if (s >= j)
            v += table[static_cast<size_t>(k - 1)][static_cast<size_t>(j)][static_cast<size_t>(s - j)];
          table[static_cast<size_t>(k)][static_cast<size_t>(j)][static_cast<size_t>(s)] = v;
        }
    }
    const auto& counts = table[static_cast<size_t>(n)][static_cast<size_t>(m)];
    double total = 0.0;
    for (double c : counts) total += c;
    res.exact = true;
    res.p_value = tail_p(counts, total, static_cast<int64_t>(std::llround(u)), alt);
    return res;
  }

  const double nd = static_cast<double>(n), md = static_cast<double>(m);
  const double nt = nd + md;
  const double mean = nd * md / 2.0;
  const double var = nd * md / 12.0 * ((nt + 1.0) - ri.tie_term / (nt * (nt - 1.0)));
  res.exact = false;
  res.p_value = approx_p(u, mean, std::sqrt(std::max(var, 0.0)), alt);
  return res;
}

std::vector<double> bonferroni(const std::vector<double>& p, int64_t m) {
  if (m == 0) m = static_cast<int64_t>(p.size());
  require(m >= 1, "bonferroni: m must be >= 1");
  std::vector<double> out;
  out.reserve(p.size());
  for (double v : p) {
    require(v >= 0.0 && v <= 1.0, "bonferroni: p-values must lie in [0,1]");
    out.push_back(std::min(1.0, v * static_cast<double>(m)));
  }
  return out;
}

} // namespace mus::stats
