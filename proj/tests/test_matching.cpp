#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>
#include <random>

#include "oracles.hpp"
#include "qualirt/errors.hpp"
#include "qualirt/matching.hpp"

using namespace qualirt;

namespace {

MatchProblem random_problem(std::mt19937_64& rng, int n, int T, std::vector<int> levels) {
  MatchProblem p;
  p.n_levels = levels;
  p.T = T;
  p.candidates.resize(n, static_cast<Eigen::Index>(levels.size()));
  for (int r = 0; r < n; ++r) {
    for (std::size_t v = 0; v < levels.size(); ++v) {
      p.candidates(r, v) = std::uniform_int_distribution<int>(0, levels[v] - 1)(rng);
    }
  }
  for (int l : levels) {
    std::vector<int> t(l, 0);
    for (int k = 0; k < T; ++k) ++t[std::uniform_int_distribution<int>(0, l - 1)(rng)];
    p.target.push_back(t);
  }
  return p;
}

std::vector<std::vector<int>> codes_of(const MatchProblem& p) {
  std::vector<std::vector<int>> out(p.candidates.rows(), std::vector<int>(p.candidates.cols()));
  for (Eigen::Index r = 0; r < p.candidates.rows(); ++r) {
    for (Eigen::Index v = 0; v < p.candidates.cols(); ++v) out[r][v] = p.candidates(r, v);
  }
  return out;
}

void check_feasible(const MatchProblem& p, const MatchResult& m) {
  CHECK(std::count(m.selected.begin(), m.selected.end(), true) == p.T);
  int total = 0;
  for (std::size_t v = 0; v < p.n_levels.size(); ++v) {
    for (int l = 0; l < p.n_levels[v]; ++l) {
      int c = 0;
      for (Eigen::Index r = 0; r < p.candidates.rows(); ++r) c += m.selected[r] && p.candidates(r, v) == l;
      CHECK(m.achieved[v][l] == c);
      CHECK(m.slack[v][l] == std::abs(c - p.target[v][l]));
      total += m.slack[v][l];
    }
  }
  CHECK(m.total_slack == total);
}

}  // namespace

TEST_CASE("template draws") {
  const auto all = draw_template(10, 10, 3);
  std::vector<std::size_t> expect(10);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(all == expect);
  CHECK(draw_template(930, 240, 42) == draw_template(930, 240, 42));
  CHECK(draw_template(930, 240, 42) != draw_template(930, 240, 43));
  const auto t = draw_template(930, 240, 1);
  CHECK(t.size() == 240);
  CHECK(std::is_sorted(t.begin(), t.end()));
  CHECK(std::adjacent_find(t.begin(), t.end()) == t.end());
  CHECK_THROWS_AS(draw_template(5, 6, 1), DataError);
}

TEST_CASE("identical composition selects everyone") {
  std::mt19937_64 rng(1);
  MatchProblem p = random_problem(rng, 12, 12, {2, 3});
  for (std::size_t v = 0; v < 2; ++v) {
    std::fill(p.target[v].begin(), p.target[v].end(), 0);
    for (Eigen::Index r = 0; r < 12; ++r) ++p.target[v][p.candidates(r, v)];
  }
  const auto m = cardinality_match(p);
  CHECK(m.total_slack == 0);
  CHECK(m.optimal);
  CHECK(std::all_of(m.selected.begin(), m.selected.end(), [](bool b) { return b; }));
}

TEST_CASE("optimum equals exhaustive enumeration") {
  std::mt19937_64 rng(2024);
  for (int rep = 0; rep < 60; ++rep) {
    const int n = 6 + rep % 13;
    const int T = 1 + static_cast<int>(rng() % n);
    std::vector<int> levels = rep % 2 ? std::vector<int>{2, 2} : std::vector<int>{2, 3, 4};
    const MatchProblem p = random_problem(rng, n, T, levels);
    const auto m = cardinality_match(p);
    CHECK(m.optimal);
    CHECK(m.total_slack == oracle::exhaustive_match(codes_of(p), p.n_levels, p.target, T));
    check_feasible(p, m);
  }
}

TEST_CASE("adding a covariate never lowers the optimum") {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 30; ++rep) {
    const MatchProblem full = random_problem(rng, 15, 7, {2, 3, 2});
    MatchProblem fewer = full;
    fewer.n_levels.pop_back();
    fewer.target.pop_back();
    fewer.candidates = full.candidates.leftCols(2);
    CHECK(cardinality_match(fewer).total_slack <= cardinality_match(full).total_slack);
  }
}

TEST_CASE("tie-break and determinism") {
  MatchProblem p;
  p.n_levels = {2};
  p.T = 2;
  p.candidates.resize(5, 1);
  p.candidates << 1, 0, 1, 0, 1;
  p.target = {{1, 1}};
  const auto m = cardinality_match(p);
  CHECK(m.selected == std::vector<bool>{true, true, false, false, false});
  const auto again = cardinality_match(p);
  CHECK(again.selected == m.selected);
}

TEST_CASE("hard mode and invalid problems") {
  MatchProblem p;
  p.n_levels = {2};
  p.T = 3;
  p.candidates.resize(4, 1);
  p.candidates << 0, 0, 0, 1;
  p.target = {{0, 3}};
  p.mode = SlackMode::hard;
  p.hard_bound = 1;
  CHECK_THROWS_AS(cardinality_match(p), DataError);
  p.hard_bound = 2;
  const auto ok = cardinality_match(p);
  CHECK(ok.total_slack == 4);
  check_feasible(p, ok);

  MatchProblem big = p;
  big.T = 5;
  big.target = {{0, 5}};
  CHECK_THROWS_AS(cardinality_match(big), DataError);
  MatchProblem badsum = p;
  badsum.target = {{1, 1}};
  CHECK_THROWS_AS(cardinality_match(badsum), DataError);
}

TEST_CASE("node limit returns a feasible non-optimal selection") {
  std::mt19937_64 rng(77);
  MatchProblem p = random_problem(rng, 200, 60, {4, 4, 3, 5, 2});
  p.node_limit = 0;
  const auto m = cardinality_match(p);
  check_feasible(p, m);
}

TEST_CASE("scale_counts and category counts") {
  const auto s = scale_counts({{10, 20, 30}, {1, 59}}, 20);
  CHECK(s[0] == std::vector<int>{3, 7, 10});
  CHECK(std::accumulate(s[1].begin(), s[1].end(), 0) == 20);
  CHECK(scale_counts({{5, 5}}, 10)[0] == std::vector<int>{5, 5});
}

TEST_CASE("discretize and balance") {
  CovariateTable t;
  t.names = {"age", "sex", "state"};
  for (int j = 0; j < 20; ++j) {
    t.ids.push_back("p" + std::to_string(j));
    t.group.push_back(j < 10 ? "A" : "B");
    t.values.push_back({std::to_string(20 + j), j % 3 == 0 ? "F" : "M", "NY"});
  }
  t.values[4][1] = "NA";
  const auto d = discretize(t, {"state"});
  REQUIRE(d.names == std::vector<std::string>{"age", "sex"});
  CHECK(d.levels[0].size() == 4);
  CHECK(d.levels[1] == std::vector<std::string>{"F", "M", "missing"});
  CHECK(d.codes(4, 1) == 2);
  for (int j = 1; j < 20; ++j) CHECK(d.codes(j, 0) >= d.codes(j - 1, 0));

  std::vector<std::size_t> a(10), b(10);
  std::iota(a.begin(), a.end(), 0);
  std::iota(b.begin(), b.end(), 10);
  const auto rows = balance_table(d, {a, b});
  for (std::size_t v = 0; v < 2; ++v) {
    for (int col = 0; col < 2; ++col) {
      double sum = 0.0;
      for (const auto& r : rows) {
        if (r.covariate == d.names[v]) sum += r.pct[col];
      }
      CHECK(sum == doctest::Approx(100.0).epsilon(1e-9));
    }
  }
  // Age quartiles split the two halves completely.
  for (const auto& r : rows) {
    if (r.covariate == "age" && r.level == d.levels[0][0]) {
      CHECK(r.pct[0] == 50.0);
      CHECK(r.pct[1] == 0.0);
    }
  }
}

TEST_CASE("zero-slack match equalises group columns") {
  std::mt19937_64 rng(12);
  CovariateTable t;
  t.names = {"x", "y"};
  for (int j = 0; j < 120; ++j) {
    t.ids.push_back(std::to_string(j));
    t.group.push_back(j < 60 ? "A" : "B");
    t.values.push_back({std::to_string(rng() % 2), std::to_string(rng() % 3)});
  }
  const auto d = discretize(t);
  const auto tmpl = draw_template(120, 30, 5);
  const auto target = scale_counts(category_counts(d, tmpl), 20);
  std::vector<std::vector<std::size_t>> cols;
  for (int g = 0; g < 2; ++g) {
    MatchProblem p;
    p.n_levels = {2, 3};
    p.T = 20;
    p.target = target;
    p.candidates = d.codes.middleRows(g * 60, 60);
    const auto m = cardinality_match(p);
    REQUIRE(m.total_slack == 0);
    std::vector<std::size_t> sel;
    for (int r = 0; r < 60; ++r) {
      if (m.selected[r]) sel.push_back(g * 60 + r);
    }
    cols.push_back(sel);
  }
  for (const auto& r : balance_table(d, cols)) CHECK(r.pct[0] == r.pct[1]);
}
