#pragma once

#include <cstdint>
#include <vector>

namespace mus::stats {

enum class Alternative { two_sided, greater, less };

struct TestResult {
  double statistic = 0.0;  // W+ (signed-rank) or U of the first sample
  double p_value = 1.0;
  bool exact = false;      // true when computed by enumeration, false for normal approximation
  int64_t n_effective = 0; // nonzero differences (paired) or n+m (unpaired)
};

// Paired signed-rank test on a[i] - b[i]. Zero differences are dropped; ties
// among |differences| get mid-ranks. Exact enumeration of sign assignments when
// the effective n <= 25 and there are no ties, otherwise a normal approximation
// with tie and continuity corrections. Throws if every difference is zero.
TestResult wilcoxon_signed_rank(const std::vector<double>& a,
                                const std::vector<double>& b,
                                Alternative alt = Alternative::two_sided);

// Rank-sum test for two independent samples. U = R_x - n(n+1)/2 where R_x is
// the rank sum of x in the pooled ordering (mid-ranks on ties). Exact
// enumeration of rank arrangements when n+m <= 14 and there are no ties,
// otherwise a tie-corrected normal approximation with continuity correction.
TestResult mann_whitney_u(const std::vector<double>& x,
                          const std::vector<double>& y,
                          Alternative alt = Alternative::two_sided);

// adjusted_i = min(1, p_i * m); m defaults to p.size() when 0.
std::vector<double> bonferroni(const std::vector<double>& p, int64_t m = 0);

} // namespace mus::stats
