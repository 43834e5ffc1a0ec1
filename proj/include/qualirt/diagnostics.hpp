#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qualirt/estimation.hpp"

namespace qualirt {

struct FitStatistics {
  double loglik = 0.0;
  int n_params = 0;
  int n_individuals = 0;
  double aic = 0.0;
  double bic = 0.0;
  std::optional<double> m2;
  std::optional<int> m2_df;
  std::optional<double> rmsea;
};

// (aic, bic) = (-2 ll + 2 p, -2 ll + p ln N).
std::pair<double, double> information_criteria(double loglik, int n_params, int n);
FitStatistics fit_statistics(const FitResult& fit);

struct LrtResult {
  double statistic = 0.0;
  int dof = 0;
  double p_value = 1.0;
};

// Throws ModelError when the restricted model fits better by more than 1e-6
// or when the parameter difference is below one.
LrtResult likelihood_ratio_test(double loglik_restricted, int p_restricted, double loglik_full, int p_full);
LrtResult likelihood_ratio_test(const FitResult& restricted, const FitResult& full);

struct M2Result {
  bool defined = false;
  double m2 = 0.0;
  int df = 0;
  double rmsea = 0.0;
  int n_margins = 0;
  int n_complete = 0;
  std::string note;
};

// Limited-information fit from univariate and bivariate category margins of
// individuals who are eligible for every item in the model.
M2Result rmsea_m2(const ResponseMatrix& data, const FitResult& fit);

// I x I correlations of posterior-integrated residual products; NaN where a
// pair has fewer than two joint observations.
Eigen::MatrixXd residual_item_correlations(const ResponseMatrix& data, const FitResult& fit);

struct LoadingMatrix {
  Eigen::MatrixXd loadings;  // I x S
  Eigen::MatrixXd rotation;  // S x S, loadings = unrotated * rotation
  Eigen::VectorXd cumulative_variance_pct;
};

// lambda_is = a_is / sqrt(sum_s a_is^2 + pi^2 / 3). Nominal items use the
// slopes of their highest category.
LoadingMatrix slopes_to_loadings(const ModelSpec& model);

// Raw varimax criterion: sum over factors of the variance of squared loadings.
double varimax_criterion(const Eigen::MatrixXd& loadings);
LoadingMatrix varimax_rotate(const Eigen::MatrixXd& loadings);

struct QQData {
  Eigen::VectorXd theoretical;
  Eigen::VectorXd empirical;
};

// Sorted estimates against standard Normal quantiles at (i - 0.5) / n.
QQData qq_data(const Eigen::VectorXd& estimates);

struct ClassScan {
  std::vector<int> classes;
  std::vector<FitStatistics> stats;
  std::vector<FitResult> fits;
  int bic_choice = 0;
  int aic_choice = 0;
};

ClassScan class_scan(const ResponseMatrix& data, int c_min, int c_max, const std::vector<int>& allocation,
                     const FitOptions& opts);

struct HeldoutValidation {
  bool defined = false;
  std::string note;
  Eigen::VectorXd mean_eap_difference;  // Normal: per trait, successes minus failures
  Eigen::VectorXd class_success_rate;   // latent class: per MAP class, NaN if empty
  Eigen::VectorXd class_counts;
};

// `heldout` holds one code per individual (kMissing allowed); success is any
// category above 0.
HeldoutValidation validate_heldout(const FitResult& fit, const ResponseMatrix& data,
                                   const std::vector<int>& heldout);

}  // namespace qualirt
