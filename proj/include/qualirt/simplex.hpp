#pragma once

#include <Eigen/Dense>

namespace qualirt {

// min c'x  s.t.  A x = b,  lower <= x <= upper (upper may be +inf).
struct LpProblem {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  Eigen::VectorXd c;
  Eigen::VectorXd lower;  // empty: all zero
  Eigen::VectorXd upper;  // empty: all +inf
};

enum class LpStatus { optimal, infeasible, unbounded, iteration_limit };

struct LpResult {
  LpStatus status = LpStatus::infeasible;
  Eigen::VectorXd x;
  double objective = 0.0;
};

// Two-phase bounded-variable tableau simplex with Bland's rule.
LpResult solve_lp(const LpProblem& lp, int max_pivots = 100000);

}  // namespace qualirt
