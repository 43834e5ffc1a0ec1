#pragma once

#include <functional>

#include <Eigen/Dense>

namespace qualirt {

// Objective value at x; writes the gradient when `grad` is non-null.
using SmoothObjective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

struct NewtonOptions {
  int max_iter = 50;
  double grad_tol = 1e-9;
  double step_tol = 1e-12;
};

struct NewtonResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Damped Newton ascent. The Hessian is a central difference of the analytic
// gradient, shifted by a ridge until negative definite. Steps are halved
// until the objective does not decrease, so value(result) >= value(x0).
NewtonResult maximize_newton(const SmoothObjective& f, const Eigen::VectorXd& x0,
                             const NewtonOptions& opts = {});

// Central-difference Jacobian of a vector function.
Eigen::MatrixXd numeric_jacobian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                                 const Eigen::VectorXd& x, double rel_step = 1e-5);

}  // namespace qualirt
