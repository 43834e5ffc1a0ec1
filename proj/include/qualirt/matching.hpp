#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace qualirt {

// Individuals with group labels and raw covariate values (strings).
struct CovariateTable {
  std::vector<std::string> ids;
  std::vector<std::string> group;
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> values;  // N x V
};

// Every covariate mapped to category codes 0..levels-1.
struct DiscreteCovariates {
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> levels;
  Eigen::MatrixXi codes;  // N x V
};

// Numeric covariates with more than `max_numeric_levels` distinct values are
// cut at their sample quartiles; all others become sorted categorical levels.
// Covariates named in `exclude` are dropped.
DiscreteCovariates discretize(const CovariateTable& table, const std::vector<std::string>& exclude = {},
                              int max_numeric_levels = 4);

// Sorted indices of a uniform random subset of size T.
std::vector<std::size_t> draw_template(std::size_t n, std::size_t T, std::uint64_t seed);

// counts[v][p] over the given rows.
std::vector<std::vector<int>> category_counts(const DiscreteCovariates& cov,
                                              const std::vector<std::size_t>& rows);

// Template counts rescaled to a new total with largest-remainder rounding;
// each covariate still sums to `total`.
std::vector<std::vector<int>> scale_counts(const std::vector<std::vector<int>>& counts, int total);

enum class SlackMode { soft, hard };

struct MatchProblem {
  Eigen::MatrixXi candidates;               // N_r x V category codes
  std::vector<int> n_levels;                // per covariate
  std::vector<std::vector<int>> target;     // N_{v,p}; each row sums to T
  int T = 0;
  SlackMode mode = SlackMode::soft;
  int hard_bound = 0;                       // max |imbalance| per cell in hard mode
  long node_limit = 200000;
  double time_limit_seconds = 60.0;
};

struct MatchResult {
  std::vector<bool> selected;
  std::vector<std::vector<int>> achieved;
  std::vector<std::vector<int>> slack;  // |achieved - target|
  int total_slack = 0;
  bool optimal = false;
  long nodes = 0;
};

// Minimises total absolute imbalance subject to selecting exactly T
// candidates. Within a covariate profile the lowest-index candidates are
// selected.
MatchResult cardinality_match(const MatchProblem& problem);

struct BalanceRow {
  std::string covariate;
  std::string level;
  std::vector<double> pct;  // one per column
};

// Column percentages per covariate level. `columns` are row subsets of `cov`.
std::vector<BalanceRow> balance_table(const DiscreteCovariates& cov,
                                      const std::vector<std::vector<std::size_t>>& columns);

}  // namespace qualirt
