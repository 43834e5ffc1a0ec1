#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "qualirt/errors.hpp"
#include "qualirt/model_core.hpp"

using namespace qualirt;

namespace {

std::vector<ItemSpec> binary_items(int n) {
  std::vector<ItemSpec> items;
  for (int i = 0; i < n; ++i) items.push_back({"i" + std::to_string(i + 1), ItemKind::binary, 2, ""});
  return items;
}

ModelSpec normal_model(const std::vector<double>& a, const std::vector<double>& d) {
  ModelSpec m;
  m.items = binary_items(static_cast<int>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) m.params.push_back(ItemParams::binary(Eigen::VectorXd::Constant(1, a[i]), d[i]));
  m.latent = NormalLatent{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)};
  return m;
}

}  // namespace

TEST_CASE("prob_2pl") {
  CHECK(prob_2pl(1.0, 0.0, 0.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(prob_2pl(2.0, -2.0, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(prob_2pl(3.49, -3.42, 0.0) == doctest::Approx(oracle::logistic(-3.42)).epsilon(1e-14));
  CHECK(prob_2pl(3.49, -3.42, 0.0) == doctest::Approx(0.03168).epsilon(1e-3));
  CHECK(prob_2pl(1.3, 0.2, 0.5) < prob_2pl(1.3, 0.2, 0.6));
}

TEST_CASE("difficulty round trip") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int k = 0; k < 100; ++k) {
    const double a = 0.1 + std::abs(u(rng)), d = u(rng);
    CHECK(intercept_from_difficulty(a, difficulty_from_intercept(a, d)) == doctest::Approx(d).epsilon(1e-12));
  }
  CHECK_THROWS_AS(difficulty_from_intercept(0.0, 1.0), ModelError);
}

TEST_CASE("prob_graded") {
  const std::vector<double> d{1.0, -1.0};
  const double p1 = oracle::logistic(1.0), p2 = oracle::logistic(-1.0);
  CHECK(prob_graded(1.0, d, 0.0, 0) == doctest::Approx(1.0 - p1).epsilon(1e-14));
  CHECK(prob_graded(1.0, d, 0.0, 1) == doctest::Approx(p1 - p2).epsilon(1e-14));
  CHECK(prob_graded(1.0, d, 0.0, 2) == doctest::Approx(p2).epsilon(1e-14));
  CHECK(prob_graded(1.0, d, 0.0, 1) == doctest::Approx(0.4621).epsilon(1e-4));

  const std::vector<double> one{0.3};
  CHECK(prob_graded(1.7, one, 0.4, 1) == doctest::Approx(prob_2pl(1.7, 0.3, 0.4)).epsilon(1e-12));

  const std::vector<double> bad{-1.0, 1.0};
  CHECK_THROWS_AS(prob_graded(1.0, bad, 0.0, 1), ModelError);
  CHECK_THROWS_AS(ItemParams::graded(Eigen::VectorXd::Ones(1), Eigen::Vector2d(0.0, 0.0)), ModelError);
  CHECK_NOTHROW(ItemParams::graded_unchecked(Eigen::VectorXd::Ones(1), Eigen::Vector2d(0.0, 0.5)));
}

TEST_CASE("graded and nominal normalise; graded monotone") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 1);
  for (int draw = 0; draw < 100; ++draw) {
    const int K = 2 + draw % 4;
    std::vector<double> d(K - 1);
    for (auto& v : d) v = n(rng);
    std::sort(d.begin(), d.end(), std::greater<>());
    for (std::size_t k = 1; k < d.size(); ++k) {
      if (d[k] >= d[k - 1]) d[k] = d[k - 1] - 0.01;
    }
    const double a = std::abs(n(rng)) + 0.1, theta = 2 * n(rng);
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += prob_graded(a, d, theta, k);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<double> as(K, 0.0), ds(K, 0.0);
    for (int k = 1; k < K; ++k) {
      as[k] = n(rng);
      ds[k] = n(rng);
    }
    s = 0.0;
    for (int k = 0; k < K; ++k) s += prob_nominal(as, ds, theta, k);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));

    for (int k = 1; k < K; ++k) {
      double lo = 0.0, hi = 0.0;
      for (int c = k; c < K; ++c) {
        lo += prob_graded(a, d, theta, c);
        hi += prob_graded(a, d, theta + 0.5, c);
      }
      CHECK(hi >= lo);
    }
  }
}

TEST_CASE("prob_nominal") {
  const std::vector<double> a{0, 1, 2}, zero{0, 0, 0}, d{0, 1, -1};
  for (int k = 0; k < 3; ++k) CHECK(prob_nominal(a, zero, 0.0, k) == doctest::Approx(1.0 / 3).epsilon(1e-14));
  const auto p = oracle::softmax({0.0, 1.5, 0.0});
  for (int k = 0; k < 3; ++k) CHECK(prob_nominal(a, d, 0.5, k) == doctest::Approx(p[k]).epsilon(1e-14));
  const std::vector<double> a2{0, 0.7}, d2{0, -0.4};
  CHECK(prob_nominal(a2, d2, 1.1, 1) == doctest::Approx(prob_2pl(0.7, -0.4, 1.1)).epsilon(1e-12));
}

TEST_CASE("nominal_crossing_point") {
  const std::vector<double> a{0, 1}, d{0, 0};
  CHECK(nominal_crossing_point(a, d, 1) == doctest::Approx(0.0));
  const std::vector<double> a3{0, 1, 2}, d3{0, 1, -1};
  const double x = nominal_crossing_point(a3, d3, 2);
  CHECK(x == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(prob_nominal(a3, d3, x, 2) == doctest::Approx(prob_nominal(a3, d3, x, 1)).epsilon(1e-12));
  const std::vector<double> a4{0, 1, 1}, d4{0, 0, 1};
  CHECK_THROWS_AS(nominal_crossing_point(a4, d4, 2), ModelError);
}

TEST_CASE("prob_m2pl") {
  const std::vector<double> one{1.4}, t1{0.3};
  CHECK(prob_m2pl(one, -0.2, t1) == doctest::Approx(prob_2pl(1.4, -0.2, 0.3)).epsilon(1e-12));
  const std::vector<double> zero{0, 0}, th{3, -7};
  CHECK(prob_m2pl(zero, 0.8, th) == doctest::Approx(oracle::logistic(0.8)).epsilon(1e-14));
  const std::vector<double> ones{1, 1}, th2{2, -2}, th0{0, 0};
  CHECK(prob_m2pl(ones, 0.0, th2) == doctest::Approx(0.5));
  CHECK(prob_m2pl(ones, 0.0, th0) == doctest::Approx(0.5));
  const std::vector<double> bad{1, 1, 1};
  CHECK_THROWS_AS(prob_m2pl(bad, 0.0, th2), ModelError);
}

TEST_CASE("prob_lc_item") {
  const std::vector<int> alloc{0, 1};
  const std::vector<double> xi{5.0, 0.4};
  CHECK(prob_lc_item(1.3, 0.4, alloc, xi) == doctest::Approx(0.5));
  const std::vector<int> a1{1};
  const std::vector<double> x1{0.17};
  CHECK(prob_lc_item(1.0, 0.0, a1, x1) == doctest::Approx(oracle::logistic(0.17)).epsilon(1e-14));
  CHECK(prob_lc_item(1.0, 0.0, a1, x1) == doctest::Approx(0.5424).epsilon(1e-4));
  CHECK(prob_lc_item(200.0, 0.0, a1, std::vector<double>{0.5}) > 1 - 1e-12);
  const std::vector<int> two{1, 1}, none{0, 0};
  CHECK_THROWS_AS(prob_lc_item(1.0, 0.0, two, xi), ModelError);
  CHECK_THROWS_AS(prob_lc_item(1.0, 0.0, none, xi), ModelError);
}

TEST_CASE("conditional_loglik") {
  ModelSpec m = normal_model({1.0, 1.0, 0.7}, {0.0, 0.0, -0.3});
  const Eigen::VectorXd t = Eigen::VectorXd::Zero(1);
  const std::vector<int> empty{kMissing, kMissing, kMissing};
  CHECK(conditional_loglik(empty, m, t) == 0.0);
  const std::vector<int> both{1, 1, kMissing};
  CHECK(conditional_loglik(both, m, t) == doctest::Approx(std::log(0.25)).epsilon(1e-14));
  const Eigen::VectorXd t2 = Eigen::VectorXd::Constant(1, 0.6);
  const std::vector<int> pat{1, 0, 1};
  const double expect = std::log(oracle::logistic(0.6)) + std::log(1 - oracle::logistic(0.6)) +
                        std::log(oracle::logistic(0.7 * 0.6 - 0.3));
  CHECK(conditional_loglik(pat, m, t2) == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("marginal_loglik: zero slope is exact") {
  ModelSpec m = normal_model({0.0}, {0.4});
  auto data = ResponseMatrix::from_rows(m.items, {{1}, {0}, {1}});
  const double expect = 2 * std::log(oracle::logistic(0.4)) + std::log(1 - oracle::logistic(0.4));
  for (int q : {3, 11, 41}) {
    const auto rule = gauss_hermite_rule(q, 1, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
    CHECK(marginal_loglik(data, m, rule) == doctest::Approx(expect).epsilon(1e-13));
  }
}

TEST_CASE("marginal_loglik: quadrature against a grid") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  std::uniform_int_distribution<int> bit(0, 1);
  const auto rule = gauss_hermite_rule(61, 1, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> a(3), d(3);
    for (int i = 0; i < 3; ++i) {
      a[i] = 0.5 + std::abs(n(rng));
      d[i] = n(rng);
    }
    std::vector<std::vector<int>> y(50, std::vector<int>(3));
    for (auto& row : y) {
      for (auto& v : row) v = bit(rng);
    }
    ModelSpec m = normal_model(a, d);
    auto data = ResponseMatrix::from_rows(m.items, y);
    const double ref = oracle::grid_loglik_2pl(y, a, d);
    CHECK(std::abs(marginal_loglik(data, m, rule) - ref) / std::abs(ref) < 1e-6);
  }
}

TEST_CASE("marginal_loglik: discrete latent is exact") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0, 1);
  std::uniform_int_distribution<int> cat(-1, 1);
  const std::vector<double> a{1.0, 0.6, 1.8, 1.1}, d{0.0, 0.3, -0.5, 0.9}, xi{-1.3, 0.2, 1.7}, prior{0.2, 0.5, 0.3};
  ModelSpec m;
  m.items = binary_items(4);
  for (int i = 0; i < 4; ++i) m.params.push_back(ItemParams::binary(Eigen::VectorXd::Constant(1, a[i]), d[i]));
  Eigen::MatrixXd support(3, 1);
  support << xi[0], xi[1], xi[2];
  m.latent = DiscreteLatent{support, Eigen::Vector3d(prior[0], prior[1], prior[2])};
  std::vector<std::vector<int>> y(40, std::vector<int>(4));
  for (auto& row : y) {
    for (auto& v : row) v = cat(rng);
  }
  auto data = ResponseMatrix::from_rows(m.items, y);
  CHECK(marginal_loglik(data, m, ClassSum{}) == doctest::Approx(oracle::lc_loglik(y, a, d, xi, prior)).epsilon(1e-12));

  ModelSpec one = m;
  Eigen::MatrixXd s1(1, 1);
  s1 << 0.4;
  one.latent = DiscreteLatent{s1, Eigen::VectorXd::Ones(1)};
  double cond = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) cond += conditional_loglik(data.row(j), one, Eigen::VectorXd::Constant(1, 0.4));
  CHECK(marginal_loglik(data, one, ClassSum{}) == doctest::Approx(cond).epsilon(1e-12));
}

TEST_CASE("marginal_loglik: degenerate class flagged") {
  ModelSpec m;
  m.items = binary_items(1);
  m.params.push_back(ItemParams::binary(Eigen::VectorXd::Constant(1, 1.0), 0.0));
  Eigen::MatrixXd support(1, 1);
  support << std::numeric_limits<double>::infinity();
  m.latent = DiscreteLatent{support, Eigen::VectorXd::Ones(1)};
  auto data = ResponseMatrix::from_rows(m.items, {{0}});
  CHECK_THROWS_AS(marginal_loglik(data, m, ClassSum{}), NumericalError);
}

TEST_CASE("non-PD covariance rejected") {
  ModelSpec m = normal_model({1.0}, {0.0});
  Eigen::MatrixXd cov(1, 1);
  cov << -1.0;
  m.latent = NormalLatent{Eigen::VectorXd::Zero(1), cov};
  auto data = ResponseMatrix::from_rows(m.items, {{1}});
  const auto rule = gauss_hermite_rule(5, 1, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
  CHECK_THROWS_AS(marginal_loglik(data, m, rule), NumericalError);
}

TEST_CASE("response matrix invariants") {
  const auto items = binary_items(3);
  auto data = ResponseMatrix::from_rows(items, {{0, kMissing, 1}, {kMissing, kMissing, kMissing}});
  CHECK(data.n_eligible(0) == 2);
  CHECK(data.n_eligible(1) == 0);
  CHECK_FALSE(data.eligible(0, 1));
  CHECK_THROWS_AS(ResponseMatrix::from_rows(items, {{0, 2, 1}}), DataError);
  CHECK_THROWS_AS(ResponseMatrix({{"x", ItemKind::binary, 3, ""}}, 1), ModelError);
}
