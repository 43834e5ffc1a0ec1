#include "em_common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qualirt/optimize.hpp"

namespace qualirt::detail {

namespace {

double softplus(double u) { return u > 30 ? u : std::log1p(std::exp(u)); }
double softplus_inv(double a) {
  a = std::max(a, 1e-4);
  return a > 30 ? a : std::log(std::expm1(a));
}

struct Cell {
  Eigen::Index r, c;
};

// Maps unconstrained coordinates u to the item's free parameters.
class ItemTransform {
 public:
  ItemTransform(const ItemParams& p, bool positive) : positive_(positive && p.kind != ItemKind::nominal) {
    for (Eigen::Index r = 0; r < p.slopes.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.slopes.cols(); ++c) {
        if (!p.slope_fixed(r, c)) slopes_.push_back({r, c});
      }
    }
    for (Eigen::Index k = 0; k < p.intercepts.size(); ++k) {
      if (!p.intercept_fixed(k)) intercepts_.push_back(k);
    }
    ordered_ = p.kind == ItemKind::ordinal;
  }

  Eigen::Index size() const { return static_cast<Eigen::Index>(slopes_.size() + intercepts_.size()); }

  Eigen::VectorXd to_u(const ItemParams& p) const {
    Eigen::VectorXd u(size());
    Eigen::Index pos = 0;
    for (const auto& cell : slopes_) {
      const double a = p.slopes(cell.r, cell.c);
      u(pos++) = positive_ ? softplus_inv(a) : a;
    }
    for (auto k : intercepts_) {
      if (ordered_ && k > 0) {
        u(pos++) = std::log(std::max(p.intercepts(k - 1) - p.intercepts(k), 1e-8));
      } else {
        u(pos++) = p.intercepts(k);
      }
    }
    return u;
  }

  void apply(const Eigen::VectorXd& u, ItemParams& p) const {
    Eigen::Index pos = 0;
    for (const auto& cell : slopes_) {
      p.slopes(cell.r, cell.c) = positive_ ? softplus(u(pos)) : u(pos);
      ++pos;
    }
    const Eigen::Index first = pos;
    for (auto k : intercepts_) p.intercepts(k) = u(pos++);
    if (ordered_) {
      pos = first;
      for (auto k : intercepts_) {
        if (k > 0) p.intercepts(k) = p.intercepts(k - 1) - std::exp(u(pos));
        ++pos;
      }
    }
  }

  // Chain rule from natural gradients to u.
  Eigen::VectorXd pull_back(const Eigen::VectorXd& u, const ItemParams& p,
                            const Eigen::MatrixXd& g_slopes, const Eigen::VectorXd& g_int) const {
    Eigen::VectorXd g(size());
    Eigen::Index pos = 0;
    for (const auto& cell : slopes_) {
      const double ga = g_slopes(cell.r, cell.c);
      g(pos) = positive_ ? ga * logistic(u(pos)) : ga;
      ++pos;
    }
    const Eigen::Index first = pos;
    if (!ordered_) {
      for (auto k : intercepts_) g(pos++) = g_int(k);
      return g;
    }
    // d_k depends on u_j (j <= k in free order) through the cumulative map:
    // d_k = d_{k-1} - exp(u_k), so d d_m / d u_j = 1 for the leading free
    // intercept at index 0 and -exp(u_j) for m >= k_j otherwise.
    const Eigen::Index K1 = p.intercepts.size();
    Eigen::VectorXd tail_sum(K1 + 1);
    tail_sum(K1) = 0.0;
    for (Eigen::Index m = K1 - 1; m >= 0; --m) tail_sum(m) = tail_sum(m + 1) + g_int(m);
    for (auto k : intercepts_) {
      g(pos) = k == 0 ? tail_sum(0) : -std::exp(u(pos)) * tail_sum(k);
      ++pos;
    }
    (void)first;
    return g;
  }

 private:
  bool positive_;
  bool ordered_ = false;
  std::vector<Cell> slopes_;
  std::vector<Eigen::Index> intercepts_;
};

}  // namespace

double node_terms(const ItemParams& p, const Eigen::Ref<const Eigen::VectorXd>& x, const double* r,
                  double* g_lin, double* g_d) {
  const int K = p.categories;
  if (p.kind == ItemKind::nominal) {
    double lp[64];
    std::vector<double> big;
    double* z = lp;
    if (K > 64) {
      big.resize(K);
      z = big.data();
    }
    p.log_probs(x, z);
    double total = 0.0, rsum = 0.0;
    for (int k = 0; k < K; ++k) {
      rsum += r[k];
      if (r[k] != 0.0) total += r[k] * z[k];
    }
    for (int k = 0; k < K; ++k) {
      const double g = r[k] - rsum * std::exp(z[k]);
      g_lin[k] = g;
      g_d[k] = g;
    }
    return total;
  }
  const double base = p.slopes.row(0).dot(x);
  if (K == 2) {
    const double eta = base + p.intercepts(0);
    const double prob = logistic(eta);
    double total = 0.0;
    if (r[1] != 0.0) total += r[1] * log_logistic(eta);
    if (r[0] != 0.0) total += r[0] * log_logistic(-eta);
    g_lin[0] = r[1] - (r[0] + r[1]) * prob;
    g_d[0] = g_lin[0];
    return total;
  }
  // Graded: F_k = P(Y >= k), f_k = F_k (1 - F_k).
  std::vector<double> F(K + 1), f(K + 1), lp(K);
  F[0] = 1.0;
  f[0] = 0.0;
  F[K] = 0.0;
  f[K] = 0.0;
  for (int k = 1; k < K; ++k) {
    F[k] = logistic(base + p.intercepts(k - 1));
    f[k] = F[k] * (1.0 - F[k]);
  }
  p.log_probs(x, lp.data());
  double total = 0.0;
  g_lin[0] = 0.0;
  for (int j = 0; j < K - 1; ++j) g_d[j] = 0.0;
  for (int k = 0; k < K; ++k) {
    if (r[k] == 0.0) continue;
    total += r[k] * lp[k];
    const double pk = std::exp(lp[k]);
    const double w = r[k] / pk;
    g_lin[0] += w * (f[k] - f[k + 1]);
    if (k >= 1) g_d[k - 1] += w * f[k];
    if (k + 1 <= K - 1) g_d[k] -= w * f[k + 1];
  }
  return total;
}

double item_expected_loglik(const ItemParams& p, const std::vector<CountBlock>& blocks,
                            Eigen::MatrixXd* g_slopes, Eigen::VectorXd* g_intercepts) {
  const int K = p.categories;
  const bool nominal = p.kind == ItemKind::nominal;
  if (g_slopes) *g_slopes = Eigen::MatrixXd::Zero(p.slopes.rows(), p.slopes.cols());
  if (g_intercepts) *g_intercepts = Eigen::VectorXd::Zero(p.intercepts.size());
  std::vector<double> g_lin(nominal ? K : 1), g_d(p.intercepts.size()), r(K);
  double total = 0.0;
  for (const auto& block : blocks) {
    const Eigen::MatrixXd& nodes = *block.nodes;
    for (Eigen::Index q = 0; q < nodes.rows(); ++q) {
      bool any = false;
      for (int k = 0; k < K; ++k) {
        r[k] = block.counts(q, k);
        any = any || r[k] != 0.0;
      }
      if (!any) continue;
      total += node_terms(p, nodes.row(q).transpose(), r.data(), g_lin.data(), g_d.data());
      if (g_slopes) {
        if (nominal) {
          for (int k = 0; k < K; ++k) g_slopes->row(k) += g_lin[k] * nodes.row(q);
        } else {
          g_slopes->row(0) += g_lin[0] * nodes.row(q);
        }
      }
      if (g_intercepts) {
        for (Eigen::Index j = 0; j < p.intercepts.size(); ++j) (*g_intercepts)(j) += g_d[j];
      }
    }
  }
  return total;
}

void fit_item(ItemParams& p, const std::vector<CountBlock>& blocks, bool positive) {
  const ItemTransform transform(p, positive);
  if (transform.size() == 0) return;
  ItemParams work = p;
  auto objective = [&](const Eigen::VectorXd& u, Eigen::VectorXd* grad) {
    transform.apply(u, work);
    if (!grad) return item_expected_loglik(work, blocks, nullptr, nullptr);
    Eigen::MatrixXd gs;
    Eigen::VectorXd gi;
    const double v = item_expected_loglik(work, blocks, &gs, &gi);
    *grad = transform.pull_back(u, work, gs, gi);
    return v;
  };
  NewtonOptions opts;
  opts.max_iter = 25;
  const Eigen::VectorXd u0 = transform.to_u(p);
  const NewtonResult res = maximize_newton(objective, u0);
  if (res.x.allFinite()) transform.apply(res.x, p);
}

std::vector<Eigen::MatrixXd> expected_counts(const ModelSpec& model, const PatternSet& patterns,
                                             const Eigen::MatrixXd& post, int n_nodes,
                                             std::vector<int>& offsets) {
  offsets.assign(model.n_items() + 1, 0);
  for (int i = 0; i < model.n_items(); ++i) offsets[i + 1] = offsets[i] + model.params[i].categories;
  std::vector<Eigen::MatrixXd> tables(patterns.n_groups(),
                                      Eigen::MatrixXd::Zero(n_nodes, offsets.back()));
  for (int p = 0; p < patterns.size(); ++p) {
    const auto& y = patterns.patterns[p];
    auto& table = tables[patterns.group[p]];
    for (int i = 0; i < model.n_items(); ++i) {
      if (y[i] == kMissing) continue;
      table.col(offsets[i] + y[i]) += patterns.counts[p] * post.row(p).transpose();
    }
  }
  return tables;
}

double max_abs_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  if (a.size() == 0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace qualirt::detail
