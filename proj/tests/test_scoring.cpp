#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "qualirt/errors.hpp"
#include "qualirt/scoring.hpp"

using namespace qualirt;

namespace {

constexpr double kNA = std::numeric_limits<double>::quiet_NaN();

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

QuadratureRule rule61() {
  return gauss_hermite_rule(61, 1, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
}

double grid_eap(const std::vector<int>& y, const std::vector<double>& a, const std::vector<double>& d) {
  const int pts = 2001;
  const double h = 16.0 / (pts - 1);
  double num = 0.0, den = 0.0;
  for (int q = 0; q < pts; ++q) {
    const double t = -8.0 + q * h;
    double l = std::exp(-0.5 * t * t);
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] < 0) continue;
      const double p = oracle::logistic(a[i] * t + d[i]);
      l *= y[i] ? p : 1 - p;
    }
    num += t * l;
    den += l;
  }
  return num / den;
}

ModelSpec class_model(const std::vector<double>& prior) {
  ModelSpec m;
  m.items = binary_items(2);
  m.params.push_back(ItemParams::binary(Eigen::VectorXd::Constant(1, 1.0), 0.0));
  m.params.push_back(ItemParams::binary(Eigen::VectorXd::Constant(1, 0.5), 0.3));
  Eigen::MatrixXd support(2, 1);
  support << -1.0, 1.5;
  m.latent = DiscreteLatent{support, Eigen::Vector2d(prior[0], prior[1])};
  return m;
}

}  // namespace

TEST_CASE("opportunity scores") {
  Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(4, 3);
  CHECK_THROWS_AS(opportunity_scores(ones), NumericalError);

  Eigen::MatrixXd two(2, 1);
  two << 0, 1;
  const auto s = opportunity_scores(two);
  CHECK(s.z(0) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(s.z(1) == doctest::Approx(1.0).epsilon(1e-15));

  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> c(0, 2);
  Eigen::MatrixXd m(300, 5);
  for (Eigen::Index k = 0; k < m.size(); ++k) {
    const int v = c(rng);
    m(k) = v == 2 ? kNA : v;
  }
  for (int i = 0; i < 5; ++i) m(7, i) = kNA;
  const auto o = opportunity_scores(m);
  CHECK(o.included.size() == 299);
  CHECK(std::find(o.included.begin(), o.included.end(), 7u) == o.included.end());
  CHECK_FALSE(o.diagnostics.empty());
  CHECK(std::abs(o.z.mean()) < 1e-12);
  CHECK(std::sqrt(o.z.squaredNorm() / o.z.size()) == doctest::Approx(1.0).epsilon(1e-12));
  double manual = 0.0;
  int n = 0;
  for (int i = 0; i < 5; ++i) {
    if (!std::isnan(m(0, i))) {
      manual += m(0, i);
      ++n;
    }
  }
  CHECK(o.mean_score(0) == doctest::Approx(manual / n));
}

TEST_CASE("naive disparity and its regression equivalent") {
  Eigen::VectorXd z(6);
  z << -0.3, 0.1, -0.1, 0.2, 0.0, 0.1;
  const std::vector<int> x{1, 1, 1, 0, 0, 0};
  CHECK(naive_disparity(z, x) == doctest::Approx(-0.1 - 0.1));
  Eigen::VectorXd same(4);
  same << 1, 2, 1, 2;
  CHECK(naive_disparity(same, {1, 1, 0, 0}) == 0.0);
  CHECK_THROWS(naive_disparity(z, std::vector<int>(6, 1)));

  Eigen::MatrixXd w(6, 1);
  for (int j = 0; j < 6; ++j) w(j, 0) = x[j];
  const auto reg = common_regression(z, w, {"minority"});
  REQUIRE(reg.names == std::vector<std::string>{"intercept", "minority"});
  CHECK(reg.estimate(1) == doctest::Approx(naive_disparity(z, x)).epsilon(1e-12));
  CHECK(reg.n == 6);
  // Two-sample pooled-variance standard error.
  const double m1 = z.head(3).mean(), m0 = z.tail(3).mean();
  const double ss = (z.head(3).array() - m1).square().sum() + (z.tail(3).array() - m0).square().sum();
  CHECK(reg.se(1) == doctest::Approx(std::sqrt(ss / 4 * (1.0 / 3 + 1.0 / 3))).epsilon(1e-10));
}

TEST_CASE("regression adjustment removes confounding") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> e(0, 1);
  std::uniform_real_distribution<double> u(0, 1);
  const int n = 4000;
  Eigen::VectorXd z(n);
  Eigen::MatrixXd w(n, 1), v(n, 1);
  for (int j = 0; j < n; ++j) {
    w(j, 0) = u(rng) < 0.5;
    v(j, 0) = u(rng) < (w(j, 0) ? 0.7 : 0.3);
    z(j) = -0.2 * w(j, 0) - 0.8 * v(j, 0) + e(rng);
  }
  const auto crude = common_regression(z, w, {"g"});
  const auto adj = common_regression(z, w, {"g"}, v, {"sick"});
  CHECK(std::abs(adj.estimate(1) + 0.2) < std::abs(crude.estimate(1) + 0.2));
  CHECK(std::abs(adj.estimate(1) + 0.2) < 0.1);
  CHECK(adj.names.back() == "sick");

  Eigen::MatrixXd dup(n, 2);
  dup << w, w;
  CHECK_THROWS(common_regression(z, dup, {"a", "b"}));
}

TEST_CASE("EAP") {
  const auto rule = rule61();
  const ModelSpec flat = normal_model({0, 0, 0}, {0.5, -0.3, 1.0});
  const std::vector<int> p{1, 0, 1};
  CHECK(std::abs(eap(p, flat, rule)(0)) < 1e-12);

  const ModelSpec rasch = normal_model({1, 1}, {0.0, 0.0});
  const std::vector<int> p10{1, 0}, p01{0, 1}, p11{1, 1}, p00{0, 0};
  CHECK(eap(p10, rasch, rule)(0) == doctest::Approx(eap(p01, rasch, rule)(0)).epsilon(1e-12));
  CHECK(eap(p11, rasch, rule)(0) > eap(p00, rasch, rule)(0));

  const std::vector<double> a{1.3, 0.6, 2.1}, d{-0.4, 0.8, 0.2};
  const ModelSpec m = normal_model(a, d);
  for (int mask = 0; mask < 27; ++mask) {
    std::vector<int> y{mask % 3 - 1, (mask / 3) % 3 - 1, mask / 9 - 1};
    CHECK(std::abs(eap(y, m, rule)(0) - grid_eap(y, a, d)) < 1e-6);
  }
}

TEST_CASE("EAP monotone in single flips") {
  const ModelSpec m = normal_model({1.3, 0.6, 2.1, 0.9}, {-0.4, 0.8, 0.2, 0.0});
  const auto rule = rule61();
  for (int mask = 0; mask < 16; ++mask) {
    std::vector<int> y(4);
    for (int i = 0; i < 4; ++i) y[i] = (mask >> i) & 1;
    for (int i = 0; i < 4; ++i) {
      if (y[i]) continue;
      auto up = y;
      up[i] = 1;
      CHECK(eap(up, m, rule)(0) > eap(y, m, rule)(0));
    }
  }
}

TEST_CASE("eap_scores flags prior-only individuals") {
  const ModelSpec m = normal_model({1.0, 1.0, 1.0}, {0.0, 0.0, 0.0});
  FitResult fit;
  fit.model = m;
  fit.integrator = rule61();
  const auto data = ResponseMatrix::from_rows(m.items, {{1, 1, 0}, {kMissing, kMissing, kMissing}});
  const auto s = eap_scores(data, fit);
  CHECK_FALSE(s.prior_only[0]);
  CHECK(s.prior_only[1]);
  CHECK(std::abs(s.mean(1, 0)) < 1e-12);
}

TEST_CASE("class posteriors") {
  const ModelSpec degenerate = class_model({1.0, 0.0});
  const std::vector<int> y11{1, 1}, y00{0, 0}, y10{1, kMissing};
  CHECK(class_posteriors_and_map(y11, degenerate).map == 0);
  CHECK(class_posteriors_and_map(y00, degenerate).map == 0);

  const ModelSpec m = class_model({0.4, 0.6});
  for (const auto& y : {y11, y00, y10}) {
    double l[2];
    const double xi[2] = {-1.0, 1.5};
    for (int c = 0; c < 2; ++c) {
      l[c] = c == 0 ? 0.4 : 0.6;
      const double p1 = oracle::logistic(xi[c]), p2 = oracle::logistic(0.5 * xi[c] + 0.3);
      l[c] *= y[0] ? p1 : 1 - p1;
      if (y[1] != kMissing) l[c] *= y[1] ? p2 : 1 - p2;
    }
    const auto post = class_posteriors_and_map(y, m);
    CHECK(post.posterior.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(post.posterior(1) == doctest::Approx(l[1] / (l[0] + l[1])).epsilon(1e-12));
    CHECK(post.map == (l[1] > l[0] ? 1 : 0));
  }

  const ModelSpec tie = class_model({0.5, 0.5});
  ModelSpec flat = tie;
  flat.params[0].slopes(0, 0) = 0.0;
  flat.params[1].slopes(0, 0) = 0.0;
  CHECK(class_posteriors_and_map(y11, flat).map == 0);
}

TEST_CASE("class posteriors ignore item order") {
  ModelSpec m = class_model({0.3, 0.7});
  ModelSpec swapped = m;
  std::swap(swapped.items[0], swapped.items[1]);
  std::swap(swapped.params[0], swapped.params[1]);
  const std::vector<int> y{1, 0}, ys{0, 1};
  const auto a = class_posteriors_and_map(y, m);
  const auto b = class_posteriors_and_map(ys, swapped);
  CHECK((a.posterior - b.posterior).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(a.map == b.map);
}

TEST_CASE("class distribution by group") {
  ClassPosteriors post;
  post.posterior.resize(4, 2);
  post.posterior << 0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7;
  post.map = {0, 1, 0, 1};
  const auto one = class_distribution_by_group(post, {"A", "A", "A", "A"});
  REQUIRE(one.size() == 1);
  CHECK(one[0].n == 4);
  CHECK(one[0].mean_posterior(0) == doctest::Approx(0.5));
  CHECK(one[0].map_share(1) == doctest::Approx(0.5));

  const auto two = class_distribution_by_group(post, {"W", "B", "W", "B"});
  REQUIRE(two.size() == 2);
  CHECK(two[0].group == "B");
  CHECK(two[0].mean_posterior(1) == doctest::Approx(0.75));
  CHECK(two[1].mean_posterior(1) == doctest::Approx(0.25));
  for (const auto& g : two) CHECK(g.mean_posterior.sum() == doctest::Approx(1.0).epsilon(1e-12));
}
