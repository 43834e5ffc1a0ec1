#include "qualirt/optimize.hpp"

#include <algorithm>
#include <cmath>

namespace qualirt {

Eigen::MatrixXd numeric_jacobian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                                 const Eigen::VectorXd& x, double rel_step) {
  Eigen::MatrixXd jac;
  Eigen::VectorXd xp = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double h = rel_step * std::max(1.0, std::abs(x(k)));
    xp(k) = x(k) + h;
    const Eigen::VectorXd up = f(xp);
    xp(k) = x(k) - h;
    const Eigen::VectorXd down = f(xp);
    xp(k) = x(k);
    if (k == 0) jac.resize(up.size(), x.size());
    jac.col(k) = (up - down) / (2.0 * h);
  }
  return jac;
}

NewtonResult maximize_newton(const SmoothObjective& f, const Eigen::VectorXd& x0,
                             const NewtonOptions& opts) {
  NewtonResult res;
  res.x = x0;
  const Eigen::Index n = x0.size();
  Eigen::VectorXd grad(n);
  res.value = f(res.x, &grad);
  if (n == 0) {
    res.converged = true;
    return res;
  }
  auto gradient_at = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd g(n);
    f(x, &g);
    return g;
  };
  for (int it = 0; it < opts.max_iter; ++it) {
    res.iterations = it + 1;
    if (!grad.allFinite()) break;
    if (grad.lpNorm<Eigen::Infinity>() < opts.grad_tol) {
      res.converged = true;
      break;
    }
    Eigen::MatrixXd hess = numeric_jacobian(gradient_at, res.x);
    hess = 0.5 * (hess + hess.transpose()).eval();
    Eigen::MatrixXd neg = -hess;
    double ridge = 0.0;
    Eigen::LLT<Eigen::MatrixXd> llt;
    const double scale = std::max(1e-8, neg.diagonal().cwiseAbs().maxCoeff());
    for (int attempt = 0; attempt < 60; ++attempt) {
      llt.compute(neg + ridge * Eigen::MatrixXd::Identity(n, n));
      if (llt.info() == Eigen::Success && neg.allFinite()) break;
      ridge = ridge == 0.0 ? 1e-8 * scale : ridge * 10.0;
    }
    if (llt.info() != Eigen::Success) break;
    Eigen::VectorXd step = llt.solve(grad);
    if (!step.allFinite()) break;
    // Keep single steps bounded so the logistic tails cannot blow up.
    const double longest = step.lpNorm<Eigen::Infinity>();
    if (longest > 5.0) step *= 5.0 / longest;

    double t = 1.0;
    bool accepted = false;
    Eigen::VectorXd trial_grad(n);
    for (int half = 0; half < 40; ++half) {
      const Eigen::VectorXd trial = res.x + t * step;
      const double v = f(trial, &trial_grad);
      if (std::isfinite(v) && v >= res.value) {
        const double gain = v - res.value;
        res.x = trial;
        res.value = v;
        grad = trial_grad;
        accepted = true;
        if (t * step.lpNorm<Eigen::Infinity>() < opts.step_tol || gain == 0.0) res.converged = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      // No ascent direction left at working precision.
      res.converged = grad.lpNorm<Eigen::Infinity>() < 1e-5;
      break;
    }
    if (res.converged) break;
  }
  return res;
}

}  // namespace qualirt
