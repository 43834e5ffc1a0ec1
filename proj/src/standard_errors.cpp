#include <cmath>
#include <limits>
#include <string>

#include "qualirt/estimation.hpp"
#include "qualirt/parameters.hpp"
#include "qualirt/patterns.hpp"

namespace qualirt {

StdErrors standard_errors(const FitResult& fit, const ResponseMatrix& data) {
  StdErrors out;
  out.names = free_parameter_names(fit.model);
  const Eigen::VectorXd theta = pack_free(fit.model);
  const Eigen::Index n = theta.size();
  out.se = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::quiet_NaN());
  if (n == 0) return out;
  if (!fit.converged) out.diagnostics.push_back("fit did not converge; standard errors are unreliable");

  const PatternSet patterns = patterns_for(data, fit.model);
  Eigen::MatrixXd scores(patterns.size(), n);
  Eigen::VectorXd x = theta;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double h = 1e-5 * std::max(1.0, std::abs(theta(k)));
    x(k) = theta(k) + h;
    const Eigen::VectorXd up = pattern_logliks(fit.model, x, data, fit.integrator);
    x(k) = theta(k) - h;
    const Eigen::VectorXd down = pattern_logliks(fit.model, x, data, fit.integrator);
    x(k) = theta(k);
    scores.col(k) = (up - down) / (2.0 * h);
  }
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(n, n);
  for (int p = 0; p < patterns.size(); ++p) {
    info += patterns.counts[p] * scores.row(p).transpose() * scores.row(p);
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(info);
  const Eigen::VectorXd& values = eig.eigenvalues();
  const Eigen::MatrixXd& vectors = eig.eigenvectors();
  const double top = std::max(values.cwiseAbs().maxCoeff(), 1e-300);
  std::vector<bool> undefined(n, false);
  Eigen::VectorXd inv_values = Eigen::VectorXd::Zero(n);
  for (Eigen::Index e = 0; e < n; ++e) {
    if (values(e) > 1e-10 * top) {
      inv_values(e) = 1.0 / values(e);
      continue;
    }
    for (Eigen::Index k = 0; k < n; ++k) {
      if (std::abs(vectors(k, e)) > 1e-6) undefined[k] = true;
    }
  }
  const Eigen::MatrixXd cov = vectors * inv_values.asDiagonal() * vectors.transpose();
  for (Eigen::Index k = 0; k < n; ++k) {
    if (undefined[k]) {
      out.diagnostics.push_back("information matrix is singular along '" + out.names[k] +
                                "'; standard error undefined");
      continue;
    }
    out.se(k) = std::sqrt(std::max(cov(k, k), 0.0));
  }
  return out;
}

}  // namespace qualirt
