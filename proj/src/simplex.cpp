#include "qualirt/simplex.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "qualirt/errors.hpp"

namespace qualirt {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kEps = 1e-9;

// Tableau over n structural + m artificial columns, all with lower bound 0.
class Tableau {
 public:
  Tableau(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, const Eigen::VectorXd& upper)
      : m_(A.rows()), n_(A.cols()), T_(A.rows(), A.cols() + A.rows()), upper_(A.cols() + A.rows()) {
    T_.leftCols(n_) = A;
    T_.rightCols(m_).setIdentity();
    upper_.head(n_) = upper;
    upper_.tail(m_).setConstant(kInf);
    at_upper_.assign(n_ + m_, false);
    basis_.resize(m_);
    in_basis_.assign(n_ + m_, -1);
    for (Eigen::Index r = 0; r < m_; ++r) {
      basis_[r] = n_ + r;
      in_basis_[n_ + r] = static_cast<int>(r);
    }
    beta_ = b;
  }

  // Runs the simplex for cost vector `c` (length n + m); `pivots` counts down.
  LpStatus optimise(const Eigen::VectorXd& c, int& pivots) {
    while (true) {
      if (pivots-- <= 0) return LpStatus::iteration_limit;
      Eigen::VectorXd cb(m_);
      for (Eigen::Index r = 0; r < m_; ++r) cb(r) = c(basis_[r]);
      Eigen::Index enter = -1;
      double dir = 0.0;
      for (Eigen::Index j = 0; j < n_ + m_; ++j) {
        if (in_basis_[j] >= 0 || upper_(j) == 0.0) continue;
        const double d = c(j) - cb.dot(T_.col(j));
        if (!at_upper_[j] && d < -kEps) {
          enter = j;
          dir = 1.0;
          break;
        }
        if (at_upper_[j] && d > kEps) {
          enter = j;
          dir = -1.0;
          break;
        }
      }
      if (enter < 0) return LpStatus::optimal;

      const Eigen::VectorXd alpha = T_.col(enter);
      double step = upper_(enter);
      Eigen::Index leave = -1;
      bool leave_to_upper = false;
      for (Eigen::Index r = 0; r < m_; ++r) {
        const double a = dir * alpha(r);
        double limit = kInf;
        bool to_upper = false;
        if (a > kEps) {
          limit = beta_(r) / a;
        } else if (a < -kEps && upper_(basis_[r]) < kInf) {
          limit = (upper_(basis_[r]) - beta_(r)) / -a;
          to_upper = true;
        } else {
          continue;
        }
        limit = std::max(limit, 0.0);
        if (limit < step - 1e-12 || (leave >= 0 && std::abs(limit - step) <= 1e-12 && basis_[r] < basis_[leave])) {
          step = limit;
          leave = r;
          leave_to_upper = to_upper;
        }
      }
      if (step == kInf) return LpStatus::unbounded;
      beta_ -= (dir * step) * alpha;
      if (leave < 0) {
        at_upper_[enter] = !at_upper_[enter];  // bound flip
        continue;
      }
      const Eigen::Index out = basis_[leave];
      const double entering_value = (at_upper_[enter] ? upper_(enter) : 0.0) + dir * step;
      at_upper_[out] = leave_to_upper;
      at_upper_[enter] = false;
      pivot(leave, enter);
      beta_(leave) = entering_value;
      in_basis_[out] = -1;
      in_basis_[enter] = static_cast<int>(leave);
      basis_[leave] = enter;
    }
  }

  void freeze_artificials() {
    for (Eigen::Index j = n_; j < n_ + m_; ++j) upper_(j) = 0.0;
  }

  Eigen::VectorXd values() const {
    Eigen::VectorXd x(n_ + m_);
    for (Eigen::Index j = 0; j < n_ + m_; ++j) x(j) = at_upper_[j] ? upper_(j) : 0.0;
    for (Eigen::Index r = 0; r < m_; ++r) x(basis_[r]) = beta_(r);
    return x;
  }

 private:
  // Basic values are moved along the edge by the caller; the pivot only
  // updates B^-1 A.
  void pivot(Eigen::Index row, Eigen::Index col) {
    T_.row(row) /= T_(row, col);
    for (Eigen::Index r = 0; r < m_; ++r) {
      if (r == row) continue;
      const double f = T_(r, col);
      if (f != 0.0) T_.row(r) -= f * T_.row(row);
    }
  }

  Eigen::Index m_, n_;
  Eigen::MatrixXd T_;
  Eigen::VectorXd upper_;
  Eigen::VectorXd beta_;
  std::vector<bool> at_upper_;
  std::vector<Eigen::Index> basis_;
  std::vector<int> in_basis_;
};

}  // namespace

LpResult solve_lp(const LpProblem& lp, int max_pivots) {
  const Eigen::Index m = lp.A.rows(), n = lp.A.cols();
  if (lp.b.size() != m || lp.c.size() != n) throw ModelError("solve_lp: inconsistent dimensions");
  const Eigen::VectorXd lower = lp.lower.size() == 0 ? Eigen::VectorXd::Zero(n) : lp.lower;
  const Eigen::VectorXd upper = lp.upper.size() == 0 ? Eigen::VectorXd::Constant(n, kInf) : lp.upper;
  LpResult res;
  if (((upper - lower).array() < -kEps).any()) return res;

  // Shift to zero lower bounds and make the right-hand side nonnegative.
  Eigen::MatrixXd A = lp.A;
  Eigen::VectorXd b = lp.b - lp.A * lower;
  for (Eigen::Index r = 0; r < m; ++r) {
    if (b(r) < 0) {
      A.row(r) *= -1.0;
      b(r) *= -1.0;
    }
  }
  Tableau tab(A, b, upper - lower);
  int pivots = max_pivots;
  Eigen::VectorXd phase1 = Eigen::VectorXd::Zero(n + m);
  phase1.tail(m).setOnes();
  LpStatus st = tab.optimise(phase1, pivots);
  if (st == LpStatus::iteration_limit) {
    res.status = st;
    return res;
  }
  Eigen::VectorXd x = tab.values();
  if (x.tail(m).sum() > 1e-7 * std::max(1.0, b.lpNorm<Eigen::Infinity>())) {
    res.status = LpStatus::infeasible;
    return res;
  }
  tab.freeze_artificials();
  Eigen::VectorXd phase2 = Eigen::VectorXd::Zero(n + m);
  phase2.head(n) = lp.c;
  st = tab.optimise(phase2, pivots);
  res.status = st;
  if (st != LpStatus::optimal) return res;
  res.x = tab.values().head(n) + lower;
  res.objective = lp.c.dot(res.x);
  return res;
}

}  // namespace qualirt
