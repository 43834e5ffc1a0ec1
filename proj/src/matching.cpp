#include "qualirt/matching.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "qualirt/errors.hpp"
#include "qualirt/simplex.hpp"

namespace qualirt {

namespace {

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

bool is_missing(const std::string& s) { return s.empty() || s == "NA"; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

double quantile7(const std::vector<double>& sorted, double prob) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// Profile types: candidates sharing all category codes.
struct Types {
  std::vector<std::vector<int>> profile;
  std::vector<std::vector<std::size_t>> members;
};

Types group_types(const Eigen::MatrixXi& candidates) {
  std::map<std::vector<int>, std::size_t> index;
  Types t;
  for (Eigen::Index r = 0; r < candidates.rows(); ++r) {
    std::vector<int> key(candidates.cols());
    for (Eigen::Index v = 0; v < candidates.cols(); ++v) key[v] = candidates(r, v);
    index.emplace(key, 0);
  }
  for (auto& [key, id] : index) {
    id = t.profile.size();
    t.profile.push_back(key);
  }
  t.members.resize(t.profile.size());
  for (Eigen::Index r = 0; r < candidates.rows(); ++r) {
    std::vector<int> key(candidates.cols());
    for (Eigen::Index v = 0; v < candidates.cols(); ++v) key[v] = candidates(r, v);
    t.members[index.at(key)].push_back(static_cast<std::size_t>(r));
  }
  return t;
}

class Solver {
 public:
  Solver(const MatchProblem& p, const Types& types) : p_(p), types_(types) {
    cell_offset_.push_back(0);
    for (int levels : p.n_levels) cell_offset_.push_back(cell_offset_.back() + levels);
    n_types_ = static_cast<int>(types.profile.size());
    n_cells_ = cell_offset_.back();
    capacity_.resize(n_types_);
    for (int t = 0; t < n_types_; ++t) capacity_[t] = static_cast<int>(types.members[t].size());
  }

  int cell(int t, std::size_t v) const { return cell_offset_[v] + types_.profile[t][v]; }

  int imbalance(const std::vector<int>& x, int* worst = nullptr) const {
    std::vector<int> counts(n_cells_, 0);
    for (int t = 0; t < n_types_; ++t) {
      for (std::size_t v = 0; v < p_.n_levels.size(); ++v) counts[cell(t, v)] += x[t];
    }
    int total = 0, max_dev = 0;
    for (std::size_t v = 0; v < p_.n_levels.size(); ++v) {
      for (int l = 0; l < p_.n_levels[v]; ++l) {
        const int dev = std::abs(counts[cell_offset_[v] + l] - p_.target[v][l]);
        total += dev;
        max_dev = std::max(max_dev, dev);
      }
    }
    if (worst) *worst = max_dev;
    return total;
  }

  // Greedy fill followed by single-unit swaps.
  std::vector<int> warm_start() const {
    std::vector<int> x(n_types_, 0), counts(n_cells_, 0);
    auto flat_target = [&](int c) {
      for (std::size_t v = 0; v < p_.n_levels.size(); ++v) {
        if (c < cell_offset_[v + 1]) return p_.target[v][c - cell_offset_[v]];
      }
      return 0;
    };
    std::vector<int> target(n_cells_);
    for (int c = 0; c < n_cells_; ++c) target[c] = flat_target(c);
    auto add_delta = [&](int t, int sign) {
      int d = 0;
      for (std::size_t v = 0; v < p_.n_levels.size(); ++v) {
        const int c = cell(t, v);
        d += std::abs(counts[c] + sign - target[c]) - std::abs(counts[c] - target[c]);
      }
      return d;
    };
    auto apply = [&](int t, int sign) {
      x[t] += sign;
      for (std::size_t v = 0; v < p_.n_levels.size(); ++v) counts[cell(t, v)] += sign;
    };
    for (int k = 0; k < p_.T; ++k) {
      int best = -1, best_d = 0;
      for (int t = 0; t < n_types_; ++t) {
        if (x[t] >= capacity_[t]) continue;
        const int d = add_delta(t, 1);
        if (best < 0 || d < best_d) {
          best = t;
          best_d = d;
        }
      }
      apply(best, 1);
    }
    bool improved = true;
    while (improved) {
      improved = false;
      for (int a = 0; a < n_types_ && !improved; ++a) {
        if (x[a] == 0) continue;
        for (int b = 0; b < n_types_ && !improved; ++b) {
          if (b == a || x[b] >= capacity_[b]) continue;
          const int before = imbalance(x);
          apply(a, -1);
          apply(b, 1);
          if (imbalance(x) < before) {
            improved = true;
          } else {
            apply(b, -1);
            apply(a, 1);
          }
        }
      }
    }
    return x;
  }

  LpResult relax(const std::vector<int>& lo, const std::vector<int>& hi) const {
    const int n = n_types_ + 2 * n_cells_;
    LpProblem lp;
    lp.A = Eigen::MatrixXd::Zero(1 + n_cells_, n);
    lp.b.resize(1 + n_cells_);
    lp.c = Eigen::VectorXd::Zero(n);
    lp.lower = Eigen::VectorXd::Zero(n);
    lp.upper = Eigen::VectorXd::Constant(n, p_.mode == SlackMode::hard ? p_.hard_bound
                                                                       : std::numeric_limits<double>::infinity());
    lp.b(0) = p_.T;
    for (int t = 0; t < n_types_; ++t) {
      lp.A(0, t) = 1.0;
      for (std::size_t v = 0; v < p_.n_levels.size(); ++v) lp.A(1 + cell(t, v), t) = 1.0;
      lp.lower(t) = lo[t];
      lp.upper(t) = hi[t];
    }
    for (std::size_t v = 0; v < p_.n_levels.size(); ++v) {
      for (int l = 0; l < p_.n_levels[v]; ++l) {
        const int c = cell_offset_[v] + l;
        lp.b(1 + c) = p_.target[v][l];
        lp.A(1 + c, n_types_ + 2 * c) = -1.0;     // surplus
        lp.A(1 + c, n_types_ + 2 * c + 1) = 1.0;  // shortfall
        lp.c(n_types_ + 2 * c) = 1.0;
        lp.c(n_types_ + 2 * c + 1) = 1.0;
      }
    }
    return solve_lp(lp);
  }

  MatchResult run() {
    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    MatchResult res;
    std::vector<int> best_x;
    int best = std::numeric_limits<int>::max();
    {
      const std::vector<int> warm = warm_start();
      int worst = 0;
      const int value = imbalance(warm, &worst);
      if (p_.mode == SlackMode::soft || worst <= p_.hard_bound) {
        best = value;
        best_x = warm;
      }
    }
    struct Node {
      std::vector<int> lo, hi;
    };
    std::vector<Node> stack;
    stack.push_back({std::vector<int>(n_types_, 0), capacity_});
    bool exhausted = true;
    while (!stack.empty()) {
      if (best == 0) break;
      if (res.nodes >= p_.node_limit ||
          std::chrono::duration<double>(clock::now() - start).count() > p_.time_limit_seconds) {
        exhausted = false;
        break;
      }
      Node node = std::move(stack.back());
      stack.pop_back();
      ++res.nodes;
      const LpResult lp = relax(node.lo, node.hi);
      if (lp.status == LpStatus::infeasible) continue;
      if (lp.status != LpStatus::optimal) {
        exhausted = false;
        continue;
      }
      if (static_cast<int>(std::ceil(lp.objective - 1e-7)) >= best) continue;
      int branch = -1;
      double best_frac = 0.0;
      for (int t = 0; t < n_types_; ++t) {
        const double v = lp.x(t);
        const double frac = std::abs(v - std::round(v));
        if (frac > 1e-6 && std::min(v - std::floor(v), std::ceil(v) - v) > best_frac + 1e-12) {
          best_frac = std::min(v - std::floor(v), std::ceil(v) - v);
          branch = t;
        }
      }
      if (branch < 0) {
        std::vector<int> x(n_types_);
        for (int t = 0; t < n_types_; ++t) x[t] = static_cast<int>(std::lround(lp.x(t)));
        int worst = 0;
        const int value = imbalance(x, &worst);
        if (value < best && (p_.mode == SlackMode::soft || worst <= p_.hard_bound)) {
          best = value;
          best_x = x;
        }
        continue;
      }
      const double v = lp.x(branch);
      Node down = node, up = node;
      down.hi[branch] = static_cast<int>(std::floor(v));
      up.lo[branch] = static_cast<int>(std::ceil(v));
      // Explore the nearer side first.
      if (v - std::floor(v) < 0.5) {
        stack.push_back(std::move(up));
        stack.push_back(std::move(down));
      } else {
        stack.push_back(std::move(down));
        stack.push_back(std::move(up));
      }
    }
    if (best_x.empty()) {
      if (exhausted) throw DataError("no selection satisfies the hard balance bound");
      throw DataError("matching stopped at its node/time limit without a feasible selection");
    }
    res.optimal = exhausted || best == 0;
    res.total_slack = best;
    res.selected.assign(p_.candidates.rows(), false);
    for (int t = 0; t < n_types_; ++t) {
      for (int k = 0; k < best_x[t]; ++k) res.selected[types_.members[t][k]] = true;
    }
    res.achieved.resize(p_.n_levels.size());
    res.slack.resize(p_.n_levels.size());
    for (std::size_t v = 0; v < p_.n_levels.size(); ++v) {
      res.achieved[v].assign(p_.n_levels[v], 0);
      for (int t = 0; t < n_types_; ++t) res.achieved[v][types_.profile[t][v]] += best_x[t];
      res.slack[v].resize(p_.n_levels[v]);
      for (int l = 0; l < p_.n_levels[v]; ++l) res.slack[v][l] = std::abs(res.achieved[v][l] - p_.target[v][l]);
    }
    return res;
  }

 private:
  const MatchProblem& p_;
  const Types& types_;
  std::vector<int> cell_offset_;
  std::vector<int> capacity_;
  int n_types_ = 0;
  int n_cells_ = 0;
};

}  // namespace

DiscreteCovariates discretize(const CovariateTable& table, const std::vector<std::string>& exclude,
                              int max_numeric_levels) {
  DiscreteCovariates out;
  const std::size_t N = table.values.size();
  std::vector<std::size_t> keep;
  for (std::size_t v = 0; v < table.names.size(); ++v) {
    if (std::find(exclude.begin(), exclude.end(), table.names[v]) == exclude.end()) keep.push_back(v);
  }
  out.codes.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const std::size_t v = keep[k];
    out.names.push_back(table.names[v]);
    std::vector<double> nums;
    std::set<std::string> distinct;
    bool numeric = true;
    bool has_missing = false;
    for (std::size_t j = 0; j < N; ++j) {
      const std::string& s = table.values[j][v];
      if (is_missing(s)) {
        has_missing = true;
        continue;
      }
      distinct.insert(s);
      double x;
      if (parse_number(s, x)) {
        nums.push_back(x);
      } else {
        numeric = false;
      }
    }
    std::vector<std::string> levels;
    if (numeric && static_cast<int>(distinct.size()) > max_numeric_levels && !nums.empty()) {
      std::sort(nums.begin(), nums.end());
      std::vector<double> cuts;
      for (double prob : {0.25, 0.5, 0.75}) {
        const double c = quantile7(nums, prob);
        if (cuts.empty() || c > cuts.back()) cuts.push_back(c);
      }
      levels.push_back("<" + fmt(cuts.front()));
      for (std::size_t c = 1; c < cuts.size(); ++c) levels.push_back("[" + fmt(cuts[c - 1]) + "," + fmt(cuts[c]) + ")");
      levels.push_back(">=" + fmt(cuts.back()));
      for (std::size_t j = 0; j < N; ++j) {
        const std::string& s = table.values[j][v];
        if (is_missing(s)) {
          out.codes(j, k) = static_cast<int>(levels.size());
          continue;
        }
        double x;
        parse_number(s, x);
        out.codes(j, k) = static_cast<int>(std::upper_bound(cuts.begin(), cuts.end(), x) - cuts.begin());
      }
    } else {
      levels.assign(distinct.begin(), distinct.end());
      for (std::size_t j = 0; j < N; ++j) {
        const std::string& s = table.values[j][v];
        out.codes(j, k) = is_missing(s) ? static_cast<int>(levels.size())
                                        : static_cast<int>(std::lower_bound(levels.begin(), levels.end(), s) - levels.begin());
      }
    }
    if (has_missing) levels.push_back("missing");
    out.levels.push_back(std::move(levels));
  }
  return out;
}

std::vector<std::size_t> draw_template(std::size_t n, std::size_t T, std::uint64_t seed) {
  if (T > n) throw DataError("template size " + std::to_string(T) + " exceeds cohort size " + std::to_string(n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < T; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, n - 1);
    std::swap(idx[k], idx[pick(rng)]);
  }
  idx.resize(T);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::vector<int>> category_counts(const DiscreteCovariates& cov, const std::vector<std::size_t>& rows) {
  std::vector<std::vector<int>> counts(cov.names.size());
  for (std::size_t v = 0; v < cov.names.size(); ++v) {
    counts[v].assign(cov.levels[v].size(), 0);
    for (std::size_t r : rows) counts[v][cov.codes(r, v)] += 1;
  }
  return counts;
}

std::vector<std::vector<int>> scale_counts(const std::vector<std::vector<int>>& counts, int total) {
  std::vector<std::vector<int>> out(counts.size());
  for (std::size_t v = 0; v < counts.size(); ++v) {
    const double sum = std::accumulate(counts[v].begin(), counts[v].end(), 0.0);
    if (sum <= 0) throw DataError("cannot rescale an empty count vector");
    std::vector<double> frac(counts[v].size());
    out[v].resize(counts[v].size());
    int assigned = 0;
    for (std::size_t p = 0; p < counts[v].size(); ++p) {
      const double raw = counts[v][p] * total / sum;
      out[v][p] = static_cast<int>(std::floor(raw));
      frac[p] = raw - out[v][p];
      assigned += out[v][p];
    }
    std::vector<std::size_t> order(counts[v].size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return frac[a] > frac[b]; });
    for (int k = 0; k < total - assigned; ++k) out[v][order[k]] += 1;
  }
  return out;
}

MatchResult cardinality_match(const MatchProblem& problem) {
  const auto n = problem.candidates.rows();
  if (problem.T < 0 || problem.T > n) {
    throw DataError("cannot select " + std::to_string(problem.T) + " of " + std::to_string(n) + " candidates");
  }
  if (static_cast<Eigen::Index>(problem.n_levels.size()) != problem.candidates.cols() ||
      problem.target.size() != problem.n_levels.size()) {
    throw DataError("match problem covariate dimensions disagree");
  }
  for (std::size_t v = 0; v < problem.target.size(); ++v) {
    if (static_cast<int>(problem.target[v].size()) != problem.n_levels[v]) {
      throw DataError("target counts for covariate " + std::to_string(v) + " have the wrong number of levels");
    }
    if (std::accumulate(problem.target[v].begin(), problem.target[v].end(), 0) != problem.T) {
      throw DataError("target counts for covariate " + std::to_string(v) + " do not sum to T");
    }
    for (Eigen::Index r = 0; r < n; ++r) {
      if (problem.candidates(r, v) < 0 || problem.candidates(r, v) >= problem.n_levels[v]) {
        throw DataError("candidate " + std::to_string(r) + " has an out-of-range category");
      }
    }
  }
  const Types types = group_types(problem.candidates);
  Solver solver(problem, types);
  return solver.run();
}

std::vector<BalanceRow> balance_table(const DiscreteCovariates& cov,
                                      const std::vector<std::vector<std::size_t>>& columns) {
  std::vector<BalanceRow> rows;
  std::vector<std::vector<std::vector<int>>> counts;
  for (const auto& col : columns) counts.push_back(category_counts(cov, col));
  for (std::size_t v = 0; v < cov.names.size(); ++v) {
    for (std::size_t l = 0; l < cov.levels[v].size(); ++l) {
      BalanceRow row{cov.names[v], cov.levels[v][l], {}};
      for (std::size_t c = 0; c < columns.size(); ++c) {
        row.pct.push_back(columns[c].empty() ? 0.0 : 100.0 * counts[c][v][l] / static_cast<double>(columns[c].size()));
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace qualirt
