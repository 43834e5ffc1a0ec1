#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "qualirt/diagnostics.hpp"
#include "qualirt/errors.hpp"
#include "qualirt/estimation.hpp"

using namespace qualirt;

namespace {

std::vector<ItemSpec> binary_items(int n) {
  std::vector<ItemSpec> items;
  for (int i = 0; i < n; ++i) items.push_back({"i" + std::to_string(i + 1), ItemKind::binary, 2, ""});
  return items;
}

FitResult fit_normal(const ResponseMatrix& data, int dims) {
  return em_fit_normal(data, initial_normal_model(data, dims), FitOptions{});
}

const std::vector<double> kA{1.2, 0.9, 1.6, 1.1, 0.8, 2.0, 1.3, 1.0};
const std::vector<double> kD{0.3, -0.6, 0.8, 0.0, -1.1, 0.5, -0.2, 1.2};

Eigen::MatrixXd random_loadings(std::mt19937_64& rng, int rows) {
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  Eigen::MatrixXd L(rows, 2);
  for (Eigen::Index k = 0; k < L.size(); ++k) L(k) = u(rng);
  return L;
}

}  // namespace

TEST_CASE("information criteria reproduce printed values") {
  auto [aic, bic] = information_criteria(-65675.85, 19, 24000);
  CHECK(std::abs(aic - 131389.7) < 0.1);
  CHECK(std::abs(bic - 131543.3) < 0.1);
  std::tie(aic, bic) = information_criteria(-65505.40, 20, 24000);
  CHECK(std::abs(aic - 131050.8) < 0.1);
  CHECK(std::abs(bic - 131212.5) < 0.1);
  std::tie(aic, bic) = information_criteria(0.0, 0, 1);
  CHECK(aic == 0.0);
  CHECK(bic == 0.0);
  CHECK_THROWS_AS(information_criteria(-1.0, 1, 0), ModelError);
}

TEST_CASE("likelihood ratio test") {
  auto r = likelihood_ratio_test(-65675.85, 19, -65505.40, 20);
  CHECK(std::abs(r.statistic - 340.9) < 0.1);
  CHECK(r.dof == 1);
  CHECK(r.p_value < 1e-50);
  r = likelihood_ratio_test(-65673.74, 19, -65084.60, 20);
  CHECK(std::abs(r.statistic - 1178.3) < 0.1);
  r = likelihood_ratio_test(-10.0, 3, -10.0, 5);
  CHECK(r.statistic == 0.0);
  CHECK(r.p_value == 1.0);
  r = likelihood_ratio_test(-12.0, 3, -10.0, 5);
  CHECK(r.p_value == doctest::Approx(std::exp(-2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(likelihood_ratio_test(-10.0, 3, -11.0, 5), ModelError);
  CHECK_THROWS_AS(likelihood_ratio_test(-10.0, 3, -9.0, 3), ModelError);
}

TEST_CASE("loadings from slopes") {
  ModelSpec m;
  m.items = binary_items(3);
  m.params.push_back(ItemParams::binary(Eigen::VectorXd::Constant(1, 1.0), 0.0));
  m.params.push_back(ItemParams::binary(Eigen::VectorXd::Constant(1, 0.0), 0.0));
  m.params.push_back(ItemParams::binary(Eigen::VectorXd::Constant(1, 2.0), 0.0));
  m.latent = NormalLatent{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)};
  const auto l = slopes_to_loadings(m);
  CHECK(l.loadings(0, 0) == doctest::Approx(1.0 / std::sqrt(1.0 + M_PI * M_PI / 3.0)).epsilon(1e-14));
  CHECK(std::abs(l.loadings(0, 0) - 0.4835) < 1e-3);
  CHECK(l.loadings(1, 0) == 0.0);
  CHECK(l.loadings(2, 0) > l.loadings(0, 0));
  const double expect = 100.0 * l.loadings.col(0).squaredNorm() / 3.0;
  CHECK(l.cumulative_variance_pct(0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("varimax against an angle search") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::MatrixXd L = random_loadings(rng, 6 + rep % 5);
    const auto r = varimax_rotate(L);
    CHECK((r.rotation.transpose() * r.rotation - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((r.loadings - L * r.rotation).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(varimax_criterion(r.loadings) >= varimax_criterion(L) - 1e-12);
    CHECK(std::abs(varimax_criterion(r.loadings) - oracle::varimax_angle_search(L)) < 1e-6);
    CHECK((r.loadings.rowwise().squaredNorm() - L.rowwise().squaredNorm()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(varimax_criterion(L) == doctest::Approx(oracle::varimax_value(L)).epsilon(1e-12));
  }
}

TEST_CASE("varimax leaves simple structure alone") {
  Eigen::MatrixXd L(4, 2);
  L << 0.7, 0, 0.5, 0, 0, 0.6, 0, 0.8;
  const auto r = varimax_rotate(L);
  CHECK((r.loadings.cwiseAbs() - L.cwiseAbs()).cwiseAbs().maxCoeff() < 1e-8);
  Eigen::MatrixXd one(3, 1);
  one << 0.2, 0.4, 0.6;
  const auto r1 = varimax_rotate(one);
  CHECK(r1.rotation == Eigen::MatrixXd::Identity(1, 1));
  CHECK(r1.loadings == one);
}

TEST_CASE("qq data") {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> z(0, 1);
  Eigen::VectorXd e(10000);
  for (Eigen::Index k = 0; k < e.size(); ++k) e(k) = z(rng);
  const auto q = qq_data(e);
  // Sample extremes are too noisy to compare; the central 98% is not.
  CHECK((q.empirical - q.theoretical).segment(100, 9800).cwiseAbs().maxCoeff() < 0.1);
  CHECK(std::is_sorted(q.empirical.data(), q.empirical.data() + q.empirical.size()));

  const auto flat = qq_data(Eigen::VectorXd::Constant(20, 0.3));
  CHECK(flat.empirical.isConstant(0.3));

  Eigen::VectorXd bi(10000);
  for (Eigen::Index k = 0; k < bi.size(); ++k) bi(k) = (k % 2 ? 1.5 : -1.5) + 0.3 * z(rng);
  const auto qb = qq_data(bi);
  CHECK((qb.empirical - qb.theoretical).cwiseAbs().maxCoeff() > 0.3);
  CHECK_THROWS_AS(qq_data(Eigen::VectorXd::Zero(9)), DataError);
}

TEST_CASE("residual correlations under local independence and with a duplicate") {
  auto rows = oracle::simulate_2pl(kA, kD, 5000, 41);
  const auto data = ResponseMatrix::from_rows(binary_items(8), rows);
  const FitResult fit = fit_normal(data, 1);
  const Eigen::MatrixXd r = residual_item_correlations(data, fit);
  CHECK((r - r.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(r.diagonal().isOnes(1e-12));
  CHECK((r.cwiseAbs().sum() - 8.0) / 56.0 < 0.05);

  for (auto& row : rows) row[7] = row[0];
  const auto dup = ResponseMatrix::from_rows(binary_items(8), rows);
  const Eigen::MatrixXd rd = residual_item_correlations(dup, fit_normal(dup, 1));
  CHECK(rd(0, 7) > 0.5);
}

TEST_CASE("residual correlation undefined for sparse pairs") {
  std::vector<std::vector<int>> rows;
  for (int j = 0; j < 60; ++j) rows.push_back({j % 2, (j / 2) % 2, j < 30 ? kMissing : j % 3 == 0, j < 30 ? 1 - j % 2 : kMissing});
  const auto data = ResponseMatrix::from_rows(binary_items(4), rows);
  const FitResult fit = fit_normal(data, 1);
  const Eigen::MatrixXd r = residual_item_correlations(data, fit);
  CHECK(std::isnan(r(2, 3)));
  CHECK(std::isnan(r(3, 2)));
}

TEST_CASE("M2 and RMSEA") {
  const auto data = ResponseMatrix::from_rows(binary_items(8), oracle::simulate_2pl(kA, kD, 3000, 43));
  const FitResult fit = fit_normal(data, 1);
  const M2Result m2 = rmsea_m2(data, fit);
  REQUIRE(m2.defined);
  CHECK(m2.df == 36 - 16);
  CHECK(m2.rmsea >= 0.0);
  CHECK(m2.rmsea < 0.05);
  CHECK(m2.rmsea == doctest::Approx(std::sqrt(std::max(m2.m2 - m2.df, 0.0) / (m2.df * 3000.0))));

  const auto two = ResponseMatrix::from_rows(binary_items(2), oracle::simulate_2pl(std::vector<double>{1.0, 1.0},
                                                                                    {0.0, 0.5}, 500, 1));
  ModelSpec m;
  m.items = binary_items(2);
  for (int i = 0; i < 2; ++i) m.params.push_back(ItemParams::binary(Eigen::VectorXd::Constant(1, 1.0), 0.0));
  m.latent = NormalLatent{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)};
  const FitResult f2 = em_fit_normal(two, m, FitOptions{});
  const M2Result small = rmsea_m2(two, f2);
  CHECK_FALSE(small.defined);
  CHECK_FALSE(small.note.empty());
}

TEST_CASE("M2 separates a misspecified dimensionality") {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(8, 2);
  for (int i = 0; i < 8; ++i) a(i, i % 2) = 1.8;
  const auto rows = oracle::simulate_2pl(a, kD, 3000, 44, 0.1);
  const auto data = ResponseMatrix::from_rows(binary_items(8), rows);
  const M2Result one = rmsea_m2(data, fit_normal(data, 1));
  const M2Result two = rmsea_m2(data, fit_normal(data, 2));
  REQUIRE(one.defined);
  REQUIRE(two.defined);
  CHECK(one.rmsea > two.rmsea);
  CHECK(one.rmsea > 0.05);
}

TEST_CASE("class scan selects the generating count") {
  const std::vector<double> a{1.0, 1.5, 0.8, 1.2, 2.0, 0.7, 1.1, 1.3};
  const std::vector<double> d{0.0, 0.5, -0.3, 0.2, -0.5, 0.4, 0.1, -0.2};
  const auto rows = oracle::simulate_classes(a, d, {-2.5, 0.0, 2.5}, {0.3, 0.4, 0.3}, 3000, 5);
  const auto data = ResponseMatrix::from_rows(binary_items(8), rows);
  FitOptions opts;
  opts.n_random_starts = 3;
  const ClassScan scan = class_scan(data, 1, 4, std::vector<int>(8, 0), opts);
  REQUIRE(scan.classes == std::vector<int>{1, 2, 3, 4});
  CHECK(scan.bic_choice == 3);
  CHECK(scan.stats[0].n_params == 8);
  CHECK(scan.stats[2].n_params == 19);
  for (const auto& s : scan.stats) {
    CHECK(s.aic == doctest::Approx(-2 * s.loglik + 2 * s.n_params));
    CHECK(s.bic == doctest::Approx(-2 * s.loglik + s.n_params * std::log(3000.0)));
  }
  CHECK_THROWS_AS(class_scan(data, 0, 2, std::vector<int>(8, 0), opts), ConfigError);
}

TEST_CASE("held-out validation") {
  std::vector<double> a = kA, d = kD;
  a.push_back(1.0);
  d.push_back(0.0);
  a.push_back(0.0);
  d.push_back(0.2);
  const auto rows = oracle::simulate_2pl(a, d, 5000, 77);
  std::vector<std::vector<int>> fitted;
  std::vector<int> related, unrelated, constant(5000, 1);
  for (const auto& r : rows) {
    fitted.emplace_back(r.begin(), r.begin() + 8);
    related.push_back(r[8]);
    unrelated.push_back(r[9]);
  }
  const auto data = ResponseMatrix::from_rows(binary_items(8), fitted);
  const FitResult fit = fit_normal(data, 1);
  const auto v1 = validate_heldout(fit, data, related);
  REQUIRE(v1.defined);
  CHECK(v1.mean_eap_difference(0) > 0.3);
  const auto v0 = validate_heldout(fit, data, unrelated);
  CHECK(std::abs(v0.mean_eap_difference(0)) < 0.05);
  CHECK_FALSE(validate_heldout(fit, data, constant).defined);
  CHECK_THROWS_AS(validate_heldout(fit, data, std::vector<int>(3, 0)), DataError);
}

TEST_CASE("held-out validation by class allows non-monotone rates") {
  const std::vector<double> a{1.0, 1.5, 0.8, 1.2, 2.0, 0.7};
  const std::vector<double> d{0.0, 0.5, -0.3, 0.2, -0.5, 0.4};
  std::vector<int> labels;
  const auto rows = oracle::simulate_classes(a, d, {-3.0, 0.0, 3.0}, {0.3, 0.4, 0.3}, 3000, 6, &labels);
  const auto data = ResponseMatrix::from_rows(binary_items(6), rows);
  FitOptions opts;
  opts.n_random_starts = 2;
  const FitResult fit = em_fit_latent_class(data, 3, std::vector<int>(6, 0), std::nullopt, opts);
  const double rate[3] = {0.39, 0.08, 0.55};
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<int> heldout;
  for (int c : labels) heldout.push_back(u(rng) < rate[c] ? 1 : 0);
  const auto v = validate_heldout(fit, data, heldout);
  REQUIRE(v.defined);
  REQUIRE(v.class_success_rate.size() == 3);
  CHECK(v.class_counts.sum() == 3000.0);
  CHECK(v.class_success_rate(1) < v.class_success_rate(0));
  CHECK(v.class_success_rate(1) < v.class_success_rate(2));
  CHECK(v.class_success_rate(2) > v.class_success_rate(0));
}
