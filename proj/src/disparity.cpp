#include "qualirt/disparity.hpp"

#include <limits>

#include "qualirt/errors.hpp"

namespace qualirt {

namespace {

double lookup_se(const StdErrors* se, const std::string& name) {
  if (se == nullptr) return std::numeric_limits<double>::quiet_NaN();
  for (std::size_t k = 0; k < se->names.size(); ++k) {
    if (se->names[k] == name) return se->se(static_cast<Eigen::Index>(k));
  }
  return std::numeric_limits<double>::quiet_NaN();
}

std::string covariate_name(const std::vector<std::string>& names, Eigen::Index r) {
  return r < static_cast<Eigen::Index>(names.size()) ? names[r] : "w" + std::to_string(r + 1);
}

}  // namespace

std::vector<DisparityRow> disparity_from_latent_regression(const FitResult& fit, const StdErrors* se) {
  const auto* reg = fit.model.structural ? std::get_if<LatentRegression>(&*fit.model.structural) : nullptr;
  if (reg == nullptr) throw ModelError("fit has no latent-regression structural model");
  std::vector<DisparityRow> rows;
  for (Eigen::Index r = 0; r < reg->gamma.rows(); ++r) {
    const std::string cov = covariate_name(reg->covariate_names, r);
    for (Eigen::Index s = 0; s < reg->gamma.cols(); ++s) {
      const std::string trait = "trait" + std::to_string(s + 1);
      rows.push_back({cov, trait, reg->gamma(r, s), lookup_se(se, "gamma:" + cov + ":" + trait)});
    }
  }
  return rows;
}

std::vector<DisparityRow> disparity_from_class_model(const FitResult& fit, const StdErrors* se) {
  if (!fit.model.structural) throw ModelError("fit has no class-prior structural model");
  std::vector<DisparityRow> rows;
  if (const auto* m = std::get_if<MultinomialLogit>(&*fit.model.structural)) {
    for (Eigen::Index r = 0; r < m->gamma.rows(); ++r) {
      const std::string cov = covariate_name(m->covariate_names, r);
      for (Eigen::Index c = 0; c < m->gamma.cols(); ++c) {
        const std::string cls = "class" + std::to_string(c + 2);
        rows.push_back({cov, cls + " vs class1", m->gamma(r, c), lookup_se(se, "gamma:" + cov + ":" + cls)});
      }
    }
    return rows;
  }
  if (const auto* m = std::get_if<CumulativeLogit>(&*fit.model.structural)) {
    for (Eigen::Index c = 0; c < m->cutpoints.size(); ++c) {
      const std::string name = "cut" + std::to_string(c + 1);
      rows.push_back({"cutpoint", "above class" + std::to_string(c + 1), m->cutpoints(c), lookup_se(se, name)});
    }
    for (Eigen::Index r = 0; r < m->gamma.size(); ++r) {
      const std::string cov = covariate_name(m->covariate_names, r);
      rows.push_back({cov, "higher class", m->gamma(r), lookup_se(se, "gamma:" + cov)});
    }
    return rows;
  }
  throw ModelError("fit has no class-prior structural model");
}

}  // namespace qualirt
