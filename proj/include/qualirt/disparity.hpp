#pragma once

#include <string>
#include <vector>

#include "qualirt/estimation.hpp"

namespace qualirt {

struct DisparityRow {
  std::string group;     // covariate name, e.g. "Black"; the intercept row is the reference
  std::string contrast;  // "trait1", "class2 vs class1", "higher class"
  double estimate = 0.0;
  double se = 0.0;  // NaN when unavailable
};

// One row per covariate per trait; negative values mean lower quality.
std::vector<DisparityRow> disparity_from_latent_regression(const FitResult& fit,
                                                           const StdErrors* se = nullptr);

// Multinomial prior: per covariate, log-odds of class c versus class 1.
// Cumulative prior: per covariate, log-odds of a higher class.
std::vector<DisparityRow> disparity_from_class_model(const FitResult& fit,
                                                     const StdErrors* se = nullptr);

}  // namespace qualirt
