#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "qualirt/model_core.hpp"

namespace qualirt {

// Unique (design row, response pattern) combinations with multiplicities.
// Patterns are sorted by (group, responses), so the layout does not depend
// on the order of rows in the data.
struct PatternSet {
  std::vector<std::vector<int>> patterns;
  std::vector<int> group;
  std::vector<double> counts;
  std::vector<std::size_t> index;  // individual -> pattern
  Eigen::MatrixXd group_design;    // G x q unique design rows (q may be 0)
  std::vector<double> group_counts;

  int size() const { return static_cast<int>(patterns.size()); }
  int n_groups() const { return static_cast<int>(group_counts.size()); }
  double total() const;
};

PatternSet unique_patterns(const ResponseMatrix& data);
PatternSet unique_patterns(const ResponseMatrix& data, const Eigen::MatrixXd& design);

// One pattern per individual in row order, each with count 1.
PatternSet expanded_patterns(const ResponseMatrix& data, const Eigen::MatrixXd& design);

// Patterns keyed by the model's structural design when it has one.
PatternSet patterns_for(const ResponseMatrix& data, const ModelSpec& model, bool collapse = true);

// Latent support seen by each design group: nodes and log prior weights.
struct LatentGrid {
  std::vector<Eigen::MatrixXd> nodes;        // per group: Q x S
  std::vector<Eigen::VectorXd> log_weights;  // per group: Q
  int size() const { return nodes.empty() ? 0 : static_cast<int>(nodes.front().rows()); }
};

LatentGrid build_grid(const ModelSpec& model, const Eigen::MatrixXd& group_design,
                      const Integrator& integrator);

// Per group, a Q x (sum_i K_i) table of log P(Y_i = k | node_q). Column
// offsets per item are returned through `offsets`.
std::vector<Eigen::MatrixXd> item_log_prob_tables(const ModelSpec& model, const LatentGrid& grid,
                                                  std::vector<int>& offsets);

// P x Q matrix of log prior weight + conditional log-likelihood.
Eigen::MatrixXd log_joint(const ModelSpec& model, const PatternSet& patterns,
                          const LatentGrid& grid);

// Row-wise log-sum-exp; -inf rows stay -inf.
Eigen::VectorXd row_logsumexp(const Eigen::MatrixXd& m);

// Normalised posterior weights over nodes per pattern (rows sum to 1).
Eigen::MatrixXd posterior_weights(const Eigen::MatrixXd& log_joint, const Eigen::VectorXd& lse);

}  // namespace qualirt
