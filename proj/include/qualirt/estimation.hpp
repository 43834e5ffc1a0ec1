#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qualirt/model_core.hpp"
#include "qualirt/quadrature.hpp"

namespace qualirt {

struct FitOptions {
  int max_em_iters = 500;
  double loglik_tol = 1e-6;
  double param_tol = 1e-4;
  int quad_points_per_dim = 0;  // 0: 61 / 15 / 9 for one to three traits
  int qmc_points = 2000;
  int n_random_starts = 10;
  std::uint64_t seed = 1;
  Identification identification = Identification::scheme1;
  bool positive_slopes = true;    // Normal fits: a >= 0 on binary/graded items
  bool collapse_patterns = true;  // false fits one pattern per individual
  int order_by_trait = 0;         // latent-class output sorted by support on this trait
  double support_bound = 12.0;    // |xi| cap for latent-class support points

  // Throws ConfigError on nonpositive tolerances or negative counts.
  void validate() const;
};

struct FitResult {
  ModelSpec model;
  double loglik = 0.0;
  int n_params = 0;
  std::vector<double> trace;
  std::optional<Eigen::VectorXd> std_errors;
  std::vector<std::string> param_names;
  bool converged = false;
  int iterations = 0;
  int n_used = 0;
  Integrator integrator = ClassSum{};
  std::vector<std::string> warnings;
  std::vector<double> start_logliks;  // latent class: one per start, deterministic first
  int best_start = 0;
};

// Items whose eligible responses show a single category (or none).
std::vector<int> degenerate_items(const ResponseMatrix& data);

Integrator integrator_for(const ModelSpec& model, const FitOptions& opts);

// Marks the scheme's constraints as fixed and sets pinned values.
// Scheme 1: latent mean 0 and unit variances; exploratory multi-trait models
// also fix slope a_is = 0 for s > i. Scheme 2: per trait, the first item
// allocated to it gets slope 1 and first intercept 0; latent mean and
// covariance become free.
ModelSpec apply_identifiability(ModelSpec model, Identification scheme);

// Normal-trait starting model from marginal frequencies (and principal
// components of item correlations when dims > 1). Degenerate items are
// marked excluded.
ModelSpec initial_normal_model(const ResponseMatrix& data, int dims,
                               Identification scheme = Identification::scheme1,
                               std::optional<StructuralModel> structural = std::nullopt);

FitResult em_fit_normal(const ResponseMatrix& data, const ModelSpec& init, const FitOptions& opts);

// Latent-class IRT template: binary items, one trait per item, first item per
// trait pinned at a = 1, b = 0. With one class only intercepts are free.
ModelSpec latent_class_model(const std::vector<ItemSpec>& items, int classes,
                             const std::vector<int>& allocation,
                             std::optional<StructuralModel> structural = std::nullopt,
                             const std::vector<bool>& excluded = {});

FitResult em_fit_latent_class(const ResponseMatrix& data, int classes,
                              const std::vector<int>& allocation,
                              std::optional<StructuralModel> structural, const FitOptions& opts);

// EM from a supplied starting model, no restarts. Used by the multi-start
// driver and by callers that need control over the start.
FitResult em_run_latent_class(const ResponseMatrix& data, const ModelSpec& start,
                              const FitOptions& opts);

// Per-pattern marginal log-likelihood for the given free parameter vector.
Eigen::VectorXd pattern_logliks(const ModelSpec& model, const Eigen::VectorXd& free_params,
                                const ResponseMatrix& data, const Integrator& integrator,
                                bool collapse = true);

struct StdErrors {
  Eigen::VectorXd se;  // NaN where undefined
  std::vector<std::string> names;
  std::vector<std::string> diagnostics;
};

// Outer product of per-individual score vectors, scores by central
// differences of the per-individual marginal log-likelihood.
StdErrors standard_errors(const FitResult& fit, const ResponseMatrix& data);

}  // namespace qualirt
