#pragma once

#include <cstdint>
#include <functional>

#include <Eigen/Dense>

namespace qualirt {

enum class QuadratureKind { gauss_hermite_tensor, qmc };

// Integration rule against a multivariate Normal N(mean, cov).
//
// `standard` holds the nodes for N(0, I); `nodes` are the same points mapped
// through mean + chol(cov) * z. Models whose latent mean varies by individual
// (latent regression) re-map `standard` themselves.
struct QuadratureRule {
  QuadratureKind kind = QuadratureKind::gauss_hermite_tensor;
  Eigen::MatrixXd standard;  // Q x S
  Eigen::MatrixXd nodes;     // Q x S
  Eigen::VectorXd weights;   // Q, positive, sum to 1

  int size() const { return static_cast<int>(weights.size()); }
  int dims() const { return static_cast<int>(nodes.cols()); }

  // Sum_q w_q f(node_q). Equal-weight rules divide the plain sum by Q, so a
  // constant integrand reproduces itself exactly.
  double expect(const std::function<double(const Eigen::VectorXd&)>& f) const;
};

// Default points per dimension for tensor rules: 61 (S=1), 15 (S=2), 9 (S=3).
int default_points_per_dim(int dims);

// Tensor-product Gauss-Hermite rule for N(mean, cov); refuses dims > 3.
QuadratureRule gauss_hermite_rule(int points_per_dim, int dims, const Eigen::VectorXd& mean,
                                  const Eigen::MatrixXd& cov);

// Randomly shifted Halton points pushed through the Normal inverse CDF and
// the Cholesky factor of cov. Deterministic in `seed`.
QuadratureRule qmc_rule(int n_points, int dims, const Eigen::VectorXd& mean,
                        const Eigen::MatrixXd& cov, std::uint64_t seed);

// Rule for N(0, I_S) appropriate for the dimension: tensor Gauss-Hermite for
// S <= 3, QMC otherwise.
QuadratureRule standard_rule(int dims, int points_per_dim, int qmc_points, std::uint64_t seed);

// Lower Cholesky factor; throws NumericalError when cov is not symmetric PD.
Eigen::MatrixXd checked_cholesky(const Eigen::MatrixXd& cov);

}  // namespace qualirt
