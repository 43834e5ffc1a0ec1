#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>

#include "oracles.hpp"
#include "qualirt/errors.hpp"
#include "qualirt/estimation.hpp"
#include "qualirt/parameters.hpp"
#include "qualirt/patterns.hpp"
#include "qualirt/quadrature.hpp"

using namespace qualirt;

namespace {

std::vector<ItemSpec> binary_items(int n) {
  std::vector<ItemSpec> items;
  for (int i = 0; i < n; ++i) items.push_back({"i" + std::to_string(i + 1), ItemKind::binary, 2, ""});
  return items;
}

void check_ascent(const std::vector<double>& trace) {
  for (std::size_t t = 1; t < trace.size(); ++t) CHECK(trace[t] >= trace[t - 1] - 1e-8);
}

const std::vector<double> kA{1.2, 0.9, 1.6, 1.1, 0.8, 2.0, 1.3, 1.0};
const std::vector<double> kD{0.3, -0.6, 0.8, 0.0, -1.1, 0.5, -0.2, 1.2};

}  // namespace

TEST_CASE("gauss-hermite rule moments") {
  const auto r = gauss_hermite_rule(21, 1, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
  CHECK(r.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(r.expect([](const Eigen::VectorXd& t) { return t(0); })) < 1e-12);
  CHECK(r.expect([](const Eigen::VectorXd& t) { return t(0) * t(0); }) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(r.weights.minCoeff() > 0.0);

  double grid = 0.0;
  const int pts = 2001;
  const double h = 16.0 / (pts - 1);
  for (int q = 0; q < pts; ++q) {
    const double t = -8.0 + q * h;
    grid += oracle::logistic(1.2 * t - 0.4) * std::exp(-0.5 * t * t) / std::sqrt(2 * M_PI) * h;
  }
  CHECK(std::abs(r.expect([](const Eigen::VectorXd& t) { return oracle::logistic(1.2 * t(0) - 0.4); }) - grid) < 1e-8);

  Eigen::Vector2d mu(0.5, -1.0);
  Eigen::Matrix2d cov;
  cov << 2.0, 0.6, 0.6, 1.0;
  const auto r2 = gauss_hermite_rule(15, 2, mu, cov);
  CHECK(r2.expect([](const Eigen::VectorXd& t) { return t(0); }) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r2.expect([&](const Eigen::VectorXd& t) { return (t(0) - 0.5) * (t(1) + 1.0); }) ==
        doctest::Approx(0.6).epsilon(1e-10));

  CHECK_THROWS_AS(gauss_hermite_rule(5, 4, Eigen::VectorXd::Zero(4), Eigen::MatrixXd::Identity(4, 4)), ModelError);
}

TEST_CASE("qmc rule") {
  const auto r = qmc_rule(2000, 4, Eigen::VectorXd::Zero(4), Eigen::MatrixXd::Identity(4, 4), 7);
  CHECK(r.expect([](const Eigen::VectorXd&) { return 1.0; }) == 1.0);
  const auto again = qmc_rule(2000, 4, Eigen::VectorXd::Zero(4), Eigen::MatrixXd::Identity(4, 4), 7);
  CHECK(r.nodes == again.nodes);

  auto f = [](const Eigen::VectorXd& t) {
    return oracle::logistic(t(0)) * oracle::logistic(0.5 * t(1) + 0.2) * oracle::logistic(-t(2)) *
           oracle::logistic(1.5 * t(3) - 0.3);
  };
  std::mt19937_64 rng(99);
  std::normal_distribution<double> z(0, 1);
  double mc = 0.0;
  const int draws = 1000000;
  Eigen::VectorXd t(4);
  for (int k = 0; k < draws; ++k) {
    for (int s = 0; s < 4; ++s) t(s) = z(rng);
    mc += f(t);
  }
  mc /= draws;
  CHECK(std::abs(r.expect(f) - mc) < 1e-3);
}

TEST_CASE("unique patterns") {
  const auto items = binary_items(3);
  auto same = ResponseMatrix::from_rows(items, std::vector<std::vector<int>>(7, {1, 0, kMissing}));
  const auto ps = unique_patterns(same);
  CHECK(ps.size() == 1);
  CHECK(ps.counts[0] == 7.0);

  std::vector<std::vector<int>> distinct;
  for (int m = 0; m < 8; ++m) distinct.push_back({m & 1, (m >> 1) & 1, (m >> 2) & 1});
  CHECK(unique_patterns(ResponseMatrix::from_rows(items, distinct)).size() == 8);

  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> v(-1, 1);
  std::vector<std::vector<int>> rows(300, std::vector<int>(3));
  for (auto& r : rows) {
    for (auto& x : r) x = v(rng);
  }
  std::map<std::vector<int>, int> naive;
  for (const auto& r : rows) ++naive[r];
  auto shuffled = rows;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto p1 = unique_patterns(ResponseMatrix::from_rows(items, rows));
  const auto p2 = unique_patterns(ResponseMatrix::from_rows(items, shuffled));
  REQUIRE(p1.size() == static_cast<int>(naive.size()));
  CHECK(p1.patterns == p2.patterns);
  CHECK(p1.counts == p2.counts);
  CHECK(p1.total() == 300.0);
  for (int k = 0; k < p1.size(); ++k) CHECK(p1.counts[k] == naive[p1.patterns[k]]);
  for (std::size_t j = 0; j < rows.size(); ++j) CHECK(p1.patterns[p1.index[j]] == rows[j]);
}

TEST_CASE("normal EM: ascent, collapse equivalence, permutation and refinement") {
  const auto rows = oracle::simulate_2pl(kA, kD, 600, 17);
  const auto data = ResponseMatrix::from_rows(binary_items(8), rows);
  FitOptions opts;
  const FitResult fit = em_fit_normal(data, initial_normal_model(data, 1), opts);
  CHECK(fit.converged);
  CHECK(fit.n_params == 16);
  CHECK(fit.n_used == 600);
  check_ascent(fit.trace);

  FitOptions expanded = opts;
  expanded.collapse_patterns = false;
  const FitResult fe = em_fit_normal(data, initial_normal_model(data, 1), expanded);
  CHECK(std::abs(fe.loglik - fit.loglik) < 1e-10 * std::abs(fit.loglik));
  CHECK((pack_free(fe.model) - pack_free(fit.model)).cwiseAbs().maxCoeff() < 1e-8);

  auto shuffled = rows;
  std::mt19937_64 rng(2);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto data2 = ResponseMatrix::from_rows(binary_items(8), shuffled);
  const FitResult fp = em_fit_normal(data2, initial_normal_model(data2, 1), opts);
  CHECK(fp.loglik == fit.loglik);
  CHECK(pack_free(fp.model) == pack_free(fit.model));

  FitOptions fine = opts;
  fine.quad_points_per_dim = 122;
  const FitResult ff = em_fit_normal(data, initial_normal_model(data, 1), fine);
  CHECK(std::abs(ff.loglik - fit.loglik) < 1e-4);

  const FitResult again = em_fit_normal(data, initial_normal_model(data, 1), opts);
  CHECK(again.loglik == fit.loglik);
  CHECK(again.trace == fit.trace);
}

TEST_CASE("normal EM: iteration cap flags non-convergence") {
  const auto data = ResponseMatrix::from_rows(binary_items(8), oracle::simulate_2pl(kA, kD, 300, 5));
  FitOptions opts;
  opts.max_em_iters = 2;
  const FitResult fit = em_fit_normal(data, initial_normal_model(data, 1), opts);
  CHECK_FALSE(fit.converged);
  CHECK(fit.iterations == 2);
}

TEST_CASE("normal EM: single item reaches the Bernoulli saturated loglik") {
  std::vector<std::vector<int>> rows;
  for (int j = 0; j < 200; ++j) rows.push_back({j < 130 ? 1 : 0});
  const auto data = ResponseMatrix::from_rows(binary_items(1), rows);
  ModelSpec m;
  m.items = binary_items(1);
  m.params.push_back(ItemParams::binary(Eigen::VectorXd::Constant(1, 0.5), 0.0));
  m.latent = NormalLatent{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)};
  const FitResult fit = em_fit_normal(data, m, FitOptions{});
  const double p = 0.65;
  CHECK(fit.loglik == doctest::Approx(200 * (p * std::log(p) + (1 - p) * std::log(1 - p))).epsilon(1e-6));
}

TEST_CASE("normal EM: degenerate item excluded") {
  auto rows = oracle::simulate_2pl(kA, kD, 300, 8);
  for (auto& r : rows) r[2] = 1;
  const auto data = ResponseMatrix::from_rows(binary_items(8), rows);
  CHECK(degenerate_items(data) == std::vector<int>{2});
  const FitResult fit = em_fit_normal(data, initial_normal_model(data, 1), FitOptions{});
  CHECK(fit.model.item_excluded(2));
  CHECK(fit.n_params == 14);
  CHECK_FALSE(fit.warnings.empty());
}

TEST_CASE("latent-class EM") {
  const std::vector<double> a{1.0, 1.5, 0.8, 1.2, 2.0, 0.7};
  const std::vector<double> d{0.0, 0.5, -0.3, 0.2, -0.5, 0.4};
  const std::vector<double> xi{-2.0, 0.0, 2.0}, prior{0.3, 0.4, 0.3};
  const auto rows = oracle::simulate_classes(a, d, xi, prior, 3000, 12);
  const auto data = ResponseMatrix::from_rows(binary_items(6), rows);
  const std::vector<int> alloc(6, 0);
  FitOptions opts;
  opts.n_random_starts = 4;

  const FitResult one = em_fit_latent_class(data, 1, alloc, std::nullopt, opts);
  double indep = 0.0;
  for (int i = 0; i < 6; ++i) {
    double s = 0.0;
    for (const auto& r : rows) s += r[i];
    const double p = s / rows.size();
    indep += s * std::log(p) + (rows.size() - s) * std::log(1 - p);
  }
  CHECK(one.loglik == doctest::Approx(indep).epsilon(1e-8));
  CHECK(one.n_params == 6);

  const FitResult three = em_fit_latent_class(data, 3, alloc, std::nullopt, opts);
  check_ascent(three.trace);
  CHECK(three.n_params == 5 * 2 + 3 + 2);
  CHECK(three.start_logliks.size() == 5);
  CHECK(three.loglik == *std::max_element(three.start_logliks.begin(), three.start_logliks.end()));
  const auto& disc = std::get<DiscreteLatent>(three.model.latent);
  for (int c = 1; c < 3; ++c) CHECK(disc.support(c, 0) > disc.support(c - 1, 0));
  // Truth on the estimated scale: item 1 pins a=1, d=0, so xi maps unchanged.
  for (int c = 0; c < 3; ++c) {
    CHECK(std::abs(disc.support(c, 0) - xi[c]) < 0.4);
    CHECK(std::abs(disc.prior(c) - prior[c]) < 0.06);
  }

  const FitResult rerun = em_fit_latent_class(data, 3, alloc, std::nullopt, opts);
  CHECK(rerun.loglik == three.loglik);
  CHECK(pack_free(rerun.model) == pack_free(three.model));
}

TEST_CASE("latent-class template parameter counts") {
  const auto items = binary_items(8);
  const std::vector<int> alloc(8, 0);
  CHECK(count_free(latent_class_model(items, 1, alloc)) == 8);
  CHECK(count_free(latent_class_model(items, 2, alloc)) == 17);
  CHECK(count_free(latent_class_model(items, 3, alloc)) == 19);
  const std::vector<int> two{0, 0, 1, 0, 1, 1, 0, 1};
  CHECK(count_free(latent_class_model(items, 3, two)) == 20);
}

TEST_CASE("standard errors: Bernoulli closed form and stacking") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0, 1);
  const std::vector<double> p{0.3, 0.55, 0.8};
  std::vector<std::vector<int>> rows(800, std::vector<int>(3));
  for (auto& r : rows) {
    for (int i = 0; i < 3; ++i) r[i] = u(rng) < p[i] ? 1 : 0;
  }
  auto fit_fixed = [](const ResponseMatrix& data) {
    ModelSpec m = initial_normal_model(data, 1);
    for (auto& ip : m.params) {
      ip.slopes(0, 0) = 0.0;
      ip.slope_fixed(0, 0) = true;
    }
    return em_fit_normal(data, m, FitOptions{});
  };
  const auto data = ResponseMatrix::from_rows(binary_items(3), rows);
  const FitResult fit = fit_fixed(data);
  const StdErrors se = standard_errors(fit, data);
  REQUIRE(se.se.size() == 3);
  for (int i = 0; i < 3; ++i) {
    double s = 0.0;
    for (const auto& r : rows) s += r[i];
    const double ph = s / rows.size();
    CHECK(se.se(i) == doctest::Approx(1.0 / std::sqrt(rows.size() * ph * (1 - ph))).epsilon(0.02));
  }

  auto doubled = rows;
  doubled.insert(doubled.end(), rows.begin(), rows.end());
  const auto data2 = ResponseMatrix::from_rows(binary_items(3), doubled);
  const StdErrors se2 = standard_errors(fit_fixed(data2), data2);
  for (int i = 0; i < 3; ++i) CHECK(se.se(i) / se2.se(i) == doctest::Approx(std::sqrt(2.0)).epsilon(0.01));
}

TEST_CASE("identifiability schemes") {
  ModelSpec m;
  m.items = binary_items(4);
  for (int i = 0; i < 4; ++i) m.params.push_back(ItemParams::binary(Eigen::VectorXd::Constant(1, 0.7), 0.2));
  m.latent = NormalLatent{Eigen::VectorXd::Constant(1, 0.4), Eigen::MatrixXd::Constant(1, 1, 2.0)};
  const ModelSpec s1 = apply_identifiability(m, Identification::scheme1);
  const auto& n1 = std::get<NormalLatent>(s1.latent);
  CHECK(n1.mean(0) == 0.0);
  CHECK(n1.cov(0, 0) == 1.0);
  CHECK(count_free(s1) == 8);

  ModelSpec m2;
  m2.items = binary_items(6);
  for (int i = 0; i < 6; ++i) {
    Eigen::VectorXd a = Eigen::VectorXd::Zero(2);
    a(i % 2) = 0.8;
    m2.params.push_back(ItemParams::binary(a, 0.1));
    m2.params.back().slope_fixed(0, 1 - i % 2) = true;
  }
  m2.allocation = {0, 1, 0, 1, 0, 1};
  m2.latent = NormalLatent{Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)};
  const ModelSpec s2 = apply_identifiability(m2, Identification::scheme2);
  CHECK(s2.params[0].slopes(0, 0) == 1.0);
  CHECK(s2.params[0].intercepts(0) == 0.0);
  CHECK(s2.params[1].slopes(0, 1) == 1.0);
  CHECK(s2.params[1].intercepts(0) == 0.0);
  CHECK(s2.params[0].slope_fixed(0, 0));
  CHECK(s2.params[1].intercept_fixed(0));
  CHECK_FALSE(s2.params[2].slope_fixed(0, 0));

  ModelSpec small = m;
  small.items.resize(2);
  small.params.resize(2);
  CHECK_THROWS_AS(apply_identifiability(small, Identification::scheme1), ModelError);
}

TEST_CASE("fit options validation") {
  FitOptions o;
  o.loglik_tol = 0.0;
  CHECK_THROWS_AS(o.validate(), ConfigError);
  FitOptions s;
  s.n_random_starts = -1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}
