#include "qualirt/quadrature.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include <boost/math/distributions/normal.hpp>

#include "qualirt/errors.hpp"

namespace qualirt {

namespace {

// Golub-Welsch for the probabilists' Hermite weight exp(-x^2/2)/sqrt(2 pi).
void hermite_1d(int n, Eigen::VectorXd& x, Eigen::VectorXd& w) {
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    jacobi(k, k - 1) = std::sqrt(static_cast<double>(k));
    jacobi(k - 1, k) = jacobi(k, k - 1);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  x = eig.eigenvalues();
  w = eig.eigenvectors().row(0).array().square().transpose();
  w /= w.sum();
}

constexpr int kPrimes[] = {2,  3,  5,  7,  11, 13, 17, 19, 23, 29, 31, 37, 41,
                           43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97};

double radical_inverse(std::uint64_t index, int base) {
  double result = 0.0;
  double f = 1.0 / base;
  while (index > 0) {
    result += f * static_cast<double>(index % base);
    index /= base;
    f /= base;
  }
  return result;
}

void map_nodes(QuadratureRule& rule, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  const int dims = static_cast<int>(rule.standard.cols());
  if (mean.size() != dims || cov.rows() != dims || cov.cols() != dims) {
    throw ModelError("quadrature: mean/cov dimension does not match rule dimension");
  }
  const Eigen::MatrixXd chol = checked_cholesky(cov);
  rule.nodes = (rule.standard * chol.transpose()).rowwise() + mean.transpose();
}

}  // namespace

double QuadratureRule::expect(const std::function<double(const Eigen::VectorXd&)>& f) const {
  double total = 0.0;
  if (kind == QuadratureKind::qmc) {
    for (int q = 0; q < size(); ++q) total += f(nodes.row(q).transpose());
    return total / static_cast<double>(size());
  }
  for (int q = 0; q < size(); ++q) total += weights(q) * f(nodes.row(q).transpose());
  return total;
}

Eigen::MatrixXd checked_cholesky(const Eigen::MatrixXd& cov) {
  if (cov.rows() != cov.cols()) throw NumericalError("covariance is not square");
  if (!cov.isApprox(cov.transpose(), 1e-12)) throw NumericalError("covariance is not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericalError("covariance is not positive definite");
  return llt.matrixL();
}

int default_points_per_dim(int dims) {
  switch (dims) {
    case 1: return 61;
    case 2: return 15;
    default: return 9;
  }
}

QuadratureRule gauss_hermite_rule(int points_per_dim, int dims, const Eigen::VectorXd& mean,
                                  const Eigen::MatrixXd& cov) {
  if (dims < 1) throw ModelError("quadrature: dims must be >= 1");
  if (dims > 3) {
    throw ModelError("gauss_hermite_rule: " + std::to_string(dims) +
                     " traits exceeds the tensor-product limit of 3; use qmc_rule");
  }
  if (points_per_dim < 2) throw ModelError("gauss_hermite_rule: need at least 2 points per dim");

  Eigen::VectorXd x, w;
  hermite_1d(points_per_dim, x, w);

  int total = 1;
  for (int s = 0; s < dims; ++s) total *= points_per_dim;

  QuadratureRule rule;
  rule.kind = QuadratureKind::gauss_hermite_tensor;
  rule.standard.resize(total, dims);
  rule.weights.resize(total);
  for (int q = 0; q < total; ++q) {
    int rem = q;
    double weight = 1.0;
    for (int s = dims - 1; s >= 0; --s) {
      const int k = rem % points_per_dim;
      rem /= points_per_dim;
      rule.standard(q, s) = x(k);
      weight *= w(k);
    }
    rule.weights(q) = weight;
  }
  map_nodes(rule, mean, cov);
  return rule;
}

QuadratureRule qmc_rule(int n_points, int dims, const Eigen::VectorXd& mean,
                        const Eigen::MatrixXd& cov, std::uint64_t seed) {
  if (dims < 1) throw ModelError("qmc_rule: dims must be >= 1");
  if (dims > static_cast<int>(std::size(kPrimes))) {
    throw ModelError("qmc_rule: at most " + std::to_string(std::size(kPrimes)) + " dimensions");
  }
  if (n_points < 1) throw ModelError("qmc_rule: need at least one point");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::VectorXd shift(dims);
  for (int s = 0; s < dims; ++s) shift(s) = unif(rng);

  const boost::math::normal_distribution<double> std_normal;
  QuadratureRule rule;
  rule.kind = QuadratureKind::qmc;
  rule.standard.resize(n_points, dims);
  rule.weights = Eigen::VectorXd::Constant(n_points, 1.0 / n_points);
  for (int q = 0; q < n_points; ++q) {
    for (int s = 0; s < dims; ++s) {
      double u = radical_inverse(static_cast<std::uint64_t>(q) + 1, kPrimes[s]) + shift(s);
      u -= std::floor(u);
      u = std::clamp(u, 1e-12, 1.0 - 1e-12);
      rule.standard(q, s) = boost::math::quantile(std_normal, u);
    }
  }
  map_nodes(rule, mean, cov);
  return rule;
}

QuadratureRule standard_rule(int dims, int points_per_dim, int qmc_points, std::uint64_t seed) {
  const Eigen::VectorXd mean = Eigen::VectorXd::Zero(dims);
  const Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(dims, dims);
  if (dims <= 3) {
    return gauss_hermite_rule(points_per_dim > 0 ? points_per_dim : default_points_per_dim(dims),
                              dims, mean, cov);
  }
  return qmc_rule(qmc_points, dims, mean, cov, seed);
}

}  // namespace qualirt
