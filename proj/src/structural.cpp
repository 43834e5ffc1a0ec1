#include "qualirt/structural.hpp"

#include <cmath>

#include "qualirt/errors.hpp"

namespace qualirt {

namespace {

double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

// log(sigmoid(a) - sigmoid(b)) for a > b.
double log_sigmoid_diff(double a, double b) {
  // sigma(a) - sigma(b) = sigma(a) * (1 - sigma(b)) * (1 - exp(b - a))
  return log_sigmoid(a) + log_sigmoid(-b) + std::log1p(-std::exp(b - a));
}

}  // namespace

CumulativeLogit make_cumulative_logit(Eigen::MatrixXd design, Eigen::VectorXd cutpoints,
                                      Eigen::VectorXd gamma,
                                      std::vector<std::string> covariate_names) {
  if (cutpoints.size() < 1) throw ModelError("cumulative logit needs at least 2 classes");
  for (Eigen::Index c = 1; c < cutpoints.size(); ++c) {
    if (!(cutpoints(c) > cutpoints(c - 1))) {
      throw ModelError("cumulative logit cutpoints must be strictly increasing");
    }
  }
  if (design.cols() != gamma.size()) {
    throw ModelError("cumulative logit: design has " + std::to_string(design.cols()) +
                     " columns but gamma has " + std::to_string(gamma.size()));
  }
  return CumulativeLogit{std::move(design), std::move(cutpoints), std::move(gamma),
                         std::move(covariate_names)};
}

int n_classes(const MultinomialLogit& m) { return static_cast<int>(m.gamma.cols()) + 1; }
int n_classes(const CumulativeLogit& m) { return static_cast<int>(m.cutpoints.size()) + 1; }

Eigen::VectorXd log_prior_class_probs(const MultinomialLogit& m, const Eigen::RowVectorXd& w) {
  if (w.size() != m.gamma.rows()) throw ModelError("design row does not match gamma rows");
  const int classes = n_classes(m);
  Eigen::VectorXd eta(classes);
  eta(0) = 0.0;
  eta.tail(classes - 1) = (w * m.gamma).transpose();
  const double top = eta.maxCoeff();
  const double lse = top + std::log((eta.array() - top).exp().sum());
  return eta.array() - lse;
}

Eigen::VectorXd prior_class_probs(const MultinomialLogit& m, const Eigen::RowVectorXd& w) {
  return log_prior_class_probs(m, w).array().exp();
}

Eigen::VectorXd log_prior_class_probs(const CumulativeLogit& m, const Eigen::RowVectorXd& w) {
  if (w.size() != m.gamma.size()) throw ModelError("design row does not match gamma size");
  const int classes = n_classes(m);
  const double eta = w.dot(m.gamma);
  Eigen::VectorXd out(classes);
  // P(class > c) = sigmoid(eta - cut_c); P(class > 0) = 1, P(class > C) = 0.
  out(0) = log_sigmoid(-(eta - m.cutpoints(0)));
  for (int c = 1; c < classes - 1; ++c) {
    out(c) = log_sigmoid_diff(eta - m.cutpoints(c - 1), eta - m.cutpoints(c));
  }
  out(classes - 1) = log_sigmoid(eta - m.cutpoints(classes - 2));
  return out;
}

Eigen::VectorXd prior_class_probs(const CumulativeLogit& m, const Eigen::RowVectorXd& w) {
  return log_prior_class_probs(m, w).array().exp();
}

const Eigen::MatrixXd& design_of(const StructuralModel& m) {
  return std::visit([](const auto& s) -> const Eigen::MatrixXd& { return s.design; }, m);
}

Eigen::MatrixXd& design_of(StructuralModel& m) {
  return std::visit([](auto& s) -> Eigen::MatrixXd& { return s.design; }, m);
}

const std::vector<std::string>& covariate_names_of(const StructuralModel& m) {
  return std::visit([](const auto& s) -> const std::vector<std::string>& { return s.covariate_names; },
                    m);
}

}  // namespace qualirt
