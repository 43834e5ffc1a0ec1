#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qualirt/model_core.hpp"

namespace qualirt {

// Free parameters in a fixed order: per non-excluded item its free slopes
// then free intercepts; latent mean and lower-triangular covariance when
// free; discrete support when free; class-prior logits log(pi_c / pi_1) when
// no class structural model is present; structural coefficients.
Eigen::VectorXd pack_free(const ModelSpec& model);
void unpack_free(const Eigen::VectorXd& values, ModelSpec& model);
std::vector<std::string> free_parameter_names(const ModelSpec& model);
int count_free(const ModelSpec& model);

}  // namespace qualirt
