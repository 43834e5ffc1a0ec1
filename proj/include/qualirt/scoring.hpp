#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qualirt/estimation.hpp"

namespace qualirt {

// Opportunity scores: per-individual mean of eligible numeric item scores,
// standardised by the cohort mean and the divide-by-N spread.
struct ObservedScores {
  std::vector<std::size_t> included;  // rows of the score matrix with n_j >= 1
  Eigen::VectorXd mean_score;         // one per included individual
  Eigen::VectorXd z;
  double grand_mean = 0.0;
  double spread = 0.0;
  std::vector<std::string> diagnostics;
};

// `scores` is N x I with NaN for ineligible cells. Throws NumericalError when
// the spread is zero.
ObservedScores opportunity_scores(const Eigen::MatrixXd& scores);

// Mean z among x = 1 minus mean z among x = 0.
double naive_disparity(const Eigen::VectorXd& z, const std::vector<int>& x);

struct RegressionTable {
  std::vector<std::string> names;  // "intercept" first
  Eigen::VectorXd estimate;
  Eigen::VectorXd se;
  double sigma2 = 0.0;
  int n = 0;
};

// OLS of z on [1, w, v] with classical standard errors.
RegressionTable common_regression(const Eigen::VectorXd& z, const Eigen::MatrixXd& w,
                                  const std::vector<std::string>& w_names,
                                  const Eigen::MatrixXd& v = Eigen::MatrixXd(),
                                  const std::vector<std::string>& v_names = {});

// Posterior mean of a Normal trait for one pattern. `w` is the individual's
// design row when the model has a latent regression.
Eigen::VectorXd eap(std::span<const int> pattern, const ModelSpec& model, const QuadratureRule& rule,
                    const Eigen::RowVectorXd& w = Eigen::RowVectorXd());

struct EapScores {
  Eigen::MatrixXd mean;          // N x S
  std::vector<bool> prior_only;  // individuals with no eligible items
};

// EAPs for every individual. With `marginal_prior` a latent regression is
// replaced by the population mixture of its group means.
EapScores eap_scores(const ResponseMatrix& data, const FitResult& fit, bool marginal_prior = false);

struct ClassPosterior {
  Eigen::VectorXd posterior;
  int map = 0;  // lowest index among ties
};

ClassPosterior class_posteriors_and_map(std::span<const int> pattern, const ModelSpec& model,
                                        const Eigen::RowVectorXd& w = Eigen::RowVectorXd());

struct ClassPosteriors {
  Eigen::MatrixXd posterior;  // N x C
  std::vector<int> map;
};

ClassPosteriors class_posteriors(const ResponseMatrix& data, const FitResult& fit,
                                 bool marginal_prior = false);

struct GroupClassSummary {
  std::string group;
  int n = 0;
  Eigen::VectorXd mean_posterior;
  Eigen::VectorXd map_share;
};

// Groups are reported in sorted order.
std::vector<GroupClassSummary> class_distribution_by_group(const ClassPosteriors& post,
                                                           const std::vector<std::string>& groups);

}  // namespace qualirt
