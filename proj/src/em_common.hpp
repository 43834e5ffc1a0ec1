#pragma once

#include <vector>

#include <Eigen/Dense>

#include "qualirt/model_core.hpp"
#include "qualirt/patterns.hpp"

namespace qualirt::detail {

// Expected category counts for one item at a set of latent nodes.
struct CountBlock {
  const Eigen::MatrixXd* nodes;  // Q x S
  Eigen::MatrixXd counts;        // Q x K
};

// Sum_k r_k log P(Y = k | x) with derivatives: `g_lin` receives d/d(linear
// predictor) (one entry for binary/graded, K for nominal) and `g_d` the
// intercept derivatives.
double node_terms(const ItemParams& p, const Eigen::Ref<const Eigen::VectorXd>& x, const double* r,
                  double* g_lin, double* g_d);

// Expected complete-data log-likelihood of one item and its gradient with
// respect to slopes and intercepts.
double item_expected_loglik(const ItemParams& p, const std::vector<CountBlock>& blocks,
                            Eigen::MatrixXd* g_slopes, Eigen::VectorXd* g_intercepts);

// Maximises the item's expected log-likelihood over its free parameters.
// `positive` keeps binary/graded slopes positive through a softplus map;
// graded intercept order is kept through log-gap coordinates.
void fit_item(ItemParams& p, const std::vector<CountBlock>& blocks, bool positive);

// Expected counts per group: tables[g] is Q x sum_i K_i.
std::vector<Eigen::MatrixXd> expected_counts(const ModelSpec& model, const PatternSet& patterns,
                                             const Eigen::MatrixXd& post, int n_nodes,
                                             std::vector<int>& offsets);

double max_abs_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace qualirt::detail
