#pragma once

#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace qualirt {

// theta_j = w_j * gamma + eps_j, eps_j ~ N(0, Sigma) with Sigma held fixed.
// The design carries no intercept: the reference group has latent mean 0.
struct LatentRegression {
  Eigen::MatrixXd design;  // N x q
  Eigen::MatrixXd gamma;   // q x S
  std::vector<std::string> covariate_names;
};

// Class 1 is the reference: pi_c = exp(w gamma_c) / (1 + sum_{c*>=2} exp(w gamma_c*)).
struct MultinomialLogit {
  Eigen::MatrixXd design;  // N x q, usually with an intercept column
  Eigen::MatrixXd gamma;   // q x (C-1), column c-2 holds gamma_c
  std::vector<std::string> covariate_names;
};

// Proportional odds over ordered classes:
//   logit P(class > c | w) = w* gamma* - cutpoint_c,  c = 1..C-1,
// with strictly increasing cutpoints, so P(class > c) falls as c grows.
struct CumulativeLogit {
  Eigen::MatrixXd design;     // N x (q-1), no intercept column
  Eigen::VectorXd cutpoints;  // C-1, strictly increasing
  Eigen::VectorXd gamma;      // q-1
  std::vector<std::string> covariate_names;
};

using StructuralModel = std::variant<LatentRegression, MultinomialLogit, CumulativeLogit>;

// Validating constructor; throws ModelError on unordered cutpoints or shape
// mismatch.
CumulativeLogit make_cumulative_logit(Eigen::MatrixXd design, Eigen::VectorXd cutpoints,
                                      Eigen::VectorXd gamma,
                                      std::vector<std::string> covariate_names = {});

int n_classes(const MultinomialLogit& m);
int n_classes(const CumulativeLogit& m);

Eigen::VectorXd prior_class_probs(const MultinomialLogit& m, const Eigen::RowVectorXd& w);
Eigen::VectorXd prior_class_probs(const CumulativeLogit& m, const Eigen::RowVectorXd& w);

// Log prior class probabilities, for callers working in the log domain.
Eigen::VectorXd log_prior_class_probs(const MultinomialLogit& m, const Eigen::RowVectorXd& w);
Eigen::VectorXd log_prior_class_probs(const CumulativeLogit& m, const Eigen::RowVectorXd& w);

const Eigen::MatrixXd& design_of(const StructuralModel& m);
Eigen::MatrixXd& design_of(StructuralModel& m);
const std::vector<std::string>& covariate_names_of(const StructuralModel& m);

}  // namespace qualirt
