#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "qualirt/disparity.hpp"
#include "qualirt/errors.hpp"
#include "qualirt/estimation.hpp"
#include "qualirt/structural.hpp"

using namespace qualirt;

namespace {

MultinomialLogit mlogit(const Eigen::MatrixXd& gamma) {
  return MultinomialLogit{Eigen::MatrixXd::Zero(1, gamma.rows()), gamma, {}};
}

// Binary 2PL responses with theta ~ N(shift * black, 1).
ResponseMatrix simulate_regression(double shift, int n, std::uint64_t seed, Eigen::MatrixXd& design) {
  const std::vector<double> a{1.2, 0.9, 1.5, 1.1, 0.8, 1.3, 1.0, 1.4};
  const std::vector<double> d{0.2, -0.5, 0.7, 0.0, -0.3, 0.4, -0.8, 0.1};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0, 1);
  std::uniform_real_distribution<double> u(0, 1);
  design = Eigen::MatrixXd::Zero(n, 1);
  std::vector<std::vector<int>> rows(n, std::vector<int>(a.size()));
  for (int j = 0; j < n; ++j) {
    design(j, 0) = j % 2;
    const double theta = shift * design(j, 0) + z(rng);
    for (std::size_t i = 0; i < a.size(); ++i) rows[j][i] = u(rng) < oracle::logistic(a[i] * theta + d[i]) ? 1 : 0;
  }
  std::vector<ItemSpec> items;
  for (std::size_t i = 0; i < a.size(); ++i) items.push_back({"i" + std::to_string(i), ItemKind::binary, 2, ""});
  return ResponseMatrix::from_rows(items, rows);
}

double fitted_shift(double shift, std::uint64_t seed) {
  Eigen::MatrixXd design;
  const ResponseMatrix data = simulate_regression(shift, 5000, seed, design);
  LatentRegression reg{design, Eigen::MatrixXd::Zero(1, 1), {"Black"}};
  FitOptions opts;
  const ModelSpec init = initial_normal_model(data, 1, Identification::scheme1, StructuralModel{reg});
  const FitResult fit = em_fit_normal(data, init, opts);
  const auto rows = disparity_from_latent_regression(fit);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].group == "Black");
  return rows[0].estimate;
}

}  // namespace

TEST_CASE("multinomial prior probabilities") {
  const Eigen::RowVectorXd w = Eigen::RowVectorXd::Ones(1);
  const Eigen::VectorXd p0 = prior_class_probs(mlogit(Eigen::MatrixXd::Zero(1, 2)), w);
  for (int c = 0; c < 3; ++c) CHECK(p0(c) == doctest::Approx(1.0 / 3).epsilon(1e-14));

  Eigen::MatrixXd g(1, 2);
  g << 0.95, 2.01;
  const Eigen::VectorXd p = prior_class_probs(mlogit(g), w);
  const auto expect = oracle::softmax({0.0, 0.95, 2.01});
  for (int c = 0; c < 3; ++c) CHECK(p(c) == doctest::Approx(expect[c]).epsilon(1e-14));
  CHECK(std::abs(p(0) - 0.0905) < 5e-4);
  CHECK(std::abs(p(1) - 0.2341) < 5e-4);
  CHECK(std::abs(p(2) - 0.6754) < 5e-4);

  Eigen::MatrixXd g2(2, 1);
  g2 << 0.3, -0.8;
  Eigen::RowVectorXd w2(2);
  w2 << 1.0, 1.0;
  const Eigen::VectorXd q = prior_class_probs(MultinomialLogit{Eigen::MatrixXd::Zero(1, 2), g2, {}}, w2);
  CHECK(q(1) == doctest::Approx(oracle::logistic(-0.5)).epsilon(1e-14));
}

TEST_CASE("class 1 is pinned: shifting all logits changes probabilities") {
  Eigen::MatrixXd g(1, 2);
  g << 0.4, -0.2;
  const Eigen::RowVectorXd w = Eigen::RowVectorXd::Ones(1);
  const Eigen::VectorXd p = prior_class_probs(mlogit(g), w);
  const Eigen::VectorXd q = prior_class_probs(mlogit(g.array() + 1.0), w);
  CHECK((p - q).cwiseAbs().maxCoeff() > 0.05);
}

TEST_CASE("simplex and cumulative monotonicity") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0, 2);
  for (int rep = 0; rep < 200; ++rep) {
    Eigen::MatrixXd g(2, 3);
    for (int k = 0; k < 6; ++k) g(k) = n(rng);
    Eigen::RowVectorXd w(2);
    w << 1.0, n(rng);
    const Eigen::VectorXd p = prior_class_probs(MultinomialLogit{Eigen::MatrixXd::Zero(1, 2), g, {}}, w);
    CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.minCoeff() > 0.0);
    CHECK(p.maxCoeff() < 1.0);

    Eigen::VectorXd cuts(3);
    cuts << n(rng), 0, 0;
    cuts(1) = cuts(0) + std::abs(n(rng)) + 0.01;
    cuts(2) = cuts(1) + std::abs(n(rng)) + 0.01;
    Eigen::VectorXd gamma(1);
    gamma << n(rng);
    const auto m = make_cumulative_logit(Eigen::MatrixXd::Zero(1, 1), cuts, gamma);
    Eigen::RowVectorXd ws(1);
    ws << n(rng);
    const Eigen::VectorXd pc = prior_class_probs(m, ws);
    CHECK(pc.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pc.minCoeff() > 0.0);
    double above_prev = 1.0;
    for (int c = 0; c < 3; ++c) {
      const double above = pc.tail(3 - c).sum();
      CHECK(above <= above_prev + 1e-15);
      above_prev = above;
    }
    CHECK(std::log(pc(3) / (1 - pc(3))) == doctest::Approx(ws(0) * gamma(0) - cuts(2)).epsilon(1e-9));
  }
}

TEST_CASE("cumulative logit construction") {
  Eigen::VectorXd bad(2);
  bad << 1.0, 0.5;
  CHECK_THROWS_AS(make_cumulative_logit(Eigen::MatrixXd::Zero(1, 1), bad, Eigen::VectorXd::Zero(1)), ModelError);
  Eigen::VectorXd tie(2);
  tie << 0.5, 0.5;
  CHECK_THROWS_AS(make_cumulative_logit(Eigen::MatrixXd::Zero(1, 1), tie, Eigen::VectorXd::Zero(1)), ModelError);
  Eigen::VectorXd one(1);
  one << 0.2;
  const auto m = make_cumulative_logit(Eigen::MatrixXd::Zero(1, 1), one, Eigen::VectorXd::Constant(1, 0.7));
  Eigen::RowVectorXd w(1);
  w << 1.0;
  CHECK(prior_class_probs(m, w)(1) == doctest::Approx(oracle::logistic(0.5)).epsilon(1e-14));
}

TEST_CASE("class-model disparity table") {
  FitResult fit;
  Eigen::MatrixXd g(3, 2);
  g << 0.95, 2.01, 0.32, -0.4, 0.0, 0.1;
  fit.model.structural = MultinomialLogit{Eigen::MatrixXd::Zero(1, 3), g, {"intercept", "Black", "Latinx"}};
  StdErrors se;
  se.names = {"gamma:Black:class2"};
  se.se = Eigen::VectorXd::Constant(1, 0.11);
  const auto rows = disparity_from_class_model(fit, &se);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].group == "intercept");
  CHECK(rows[0].contrast == "class2 vs class1");
  CHECK(rows[0].estimate == 0.95);
  CHECK(rows[2].group == "Black");
  CHECK(rows[2].estimate == 0.32);
  CHECK(rows[2].se == 0.11);
  CHECK(std::isnan(rows[3].se));
  CHECK(std::exp(rows[2].estimate) == doctest::Approx(1.38).epsilon(0.01));

  fit.model.structural = MultinomialLogit{Eigen::MatrixXd::Zero(1, 2), Eigen::MatrixXd::Zero(2, 2), {}};
  for (const auto& r : disparity_from_class_model(fit)) CHECK(std::exp(r.estimate) == 1.0);

  FitResult bare;
  CHECK_THROWS_AS(disparity_from_class_model(bare), ModelError);
  CHECK_THROWS_AS(disparity_from_latent_regression(bare), ModelError);
}

TEST_CASE("latent-regression disparity recovery and sign") {
  const double down = fitted_shift(-0.3, 101);
  CHECK(std::abs(down - (-0.3)) < 0.1);
  const double flat = fitted_shift(0.0, 101);
  CHECK(down < flat);
}
