#include "qualirt/scoring.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "qualirt/errors.hpp"
#include "qualirt/patterns.hpp"

namespace qualirt {

namespace {

int argmax_lowest(const Eigen::VectorXd& v) {
  int best = 0;
  for (Eigen::Index c = 1; c < v.size(); ++c) {
    if (v(c) > v(best)) best = static_cast<int>(c);
  }
  return best;
}

Eigen::VectorXd normalise_log(const Eigen::VectorXd& log_w) {
  const double top = log_w.maxCoeff();
  if (!std::isfinite(top)) throw NumericalError("posterior mass underflowed to zero");
  Eigen::VectorXd w = (log_w.array() - top).exp();
  return w / w.sum();
}

// Single-group grid for one design row (or the model's own prior).
LatentGrid grid_for_row(const ModelSpec& model, const Integrator& integrator, const Eigen::RowVectorXd& w) {
  Eigen::MatrixXd design(1, w.size());
  if (w.size() > 0) design.row(0) = w;
  if (model.structural && design_of(*model.structural).cols() != w.size()) {
    throw ModelError("design row does not match the structural model");
  }
  return build_grid(model, design, integrator);
}

// Population mixture prior: every group's grid concatenated with weights n_g / N.
LatentGrid mixture_grid(const LatentGrid& grid, const PatternSet& patterns) {
  LatentGrid mix;
  const int G = patterns.n_groups();
  const int Q = grid.size();
  const int S = static_cast<int>(grid.nodes.front().cols());
  Eigen::MatrixXd nodes(G * Q, S);
  Eigen::VectorXd logw(G * Q);
  for (int g = 0; g < G; ++g) {
    nodes.middleRows(g * Q, Q) = grid.nodes[g];
    logw.segment(g * Q, Q) = grid.log_weights[g].array() + std::log(patterns.group_counts[g] / patterns.total());
  }
  mix.nodes.assign(G, nodes);
  mix.log_weights.assign(G, logw);
  return mix;
}

// Discrete mixture prior: average class probabilities over groups.
LatentGrid mixture_classes(const LatentGrid& grid, const PatternSet& patterns) {
  Eigen::VectorXd prior = Eigen::VectorXd::Zero(grid.size());
  for (int g = 0; g < patterns.n_groups(); ++g) {
    prior += (patterns.group_counts[g] / patterns.total()) * grid.log_weights[g].array().exp().matrix();
  }
  LatentGrid mix = grid;
  for (auto& lw : mix.log_weights) lw = prior.array().log();
  return mix;
}

}  // namespace

ObservedScores opportunity_scores(const Eigen::MatrixXd& scores) {
  ObservedScores out;
  std::vector<double> means;
  for (Eigen::Index j = 0; j < scores.rows(); ++j) {
    double sum = 0.0;
    int n = 0;
    for (Eigen::Index i = 0; i < scores.cols(); ++i) {
      if (std::isnan(scores(j, i))) continue;
      sum += scores(j, i);
      ++n;
    }
    if (n == 0) {
      out.diagnostics.push_back("row " + std::to_string(j) + " has no eligible items and was excluded");
      continue;
    }
    out.included.push_back(static_cast<std::size_t>(j));
    means.push_back(sum / n);
  }
  if (means.empty()) throw DataError("no individual has an eligible item");
  out.mean_score = Eigen::Map<Eigen::VectorXd>(means.data(), static_cast<Eigen::Index>(means.size()));
  out.grand_mean = out.mean_score.mean();
  out.spread = std::sqrt((out.mean_score.array() - out.grand_mean).square().mean());
  if (!(out.spread > 0.0)) {
    throw NumericalError("observed scores have zero spread; standardised scores are undefined");
  }
  out.z = (out.mean_score.array() - out.grand_mean) / out.spread;
  return out;
}

double naive_disparity(const Eigen::VectorXd& z, const std::vector<int>& x) {
  if (static_cast<Eigen::Index>(x.size()) != z.size()) throw DataError("indicator length mismatch");
  double s1 = 0, s0 = 0;
  int n1 = 0, n0 = 0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (x[j] == 1) {
      s1 += z(j);
      ++n1;
    } else {
      s0 += z(j);
      ++n0;
    }
  }
  if (n1 == 0 || n0 == 0) throw DataError("naive disparity needs both groups to be nonempty");
  return s1 / n1 - s0 / n0;
}

RegressionTable common_regression(const Eigen::VectorXd& z, const Eigen::MatrixXd& w,
                                  const std::vector<std::string>& w_names, const Eigen::MatrixXd& v,
                                  const std::vector<std::string>& v_names) {
  const Eigen::Index n = z.size();
  const Eigen::Index vc = v.size() == 0 ? 0 : v.cols();
  if (w.rows() != n || (vc > 0 && v.rows() != n)) throw DataError("design rows do not match scores");
  const Eigen::Index p = 1 + w.cols() + vc;
  Eigen::MatrixXd X(n, p);
  X.col(0).setOnes();
  X.middleCols(1, w.cols()) = w;
  if (vc > 0) X.rightCols(vc) = v;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < p || n <= p) {
    throw NumericalError("regression design is rank deficient (rank " + std::to_string(qr.rank()) +
                         " of " + std::to_string(p) + " columns)");
  }
  RegressionTable out;
  out.names.push_back("intercept");
  for (Eigen::Index c = 0; c < w.cols(); ++c) {
    out.names.push_back(c < static_cast<Eigen::Index>(w_names.size()) ? w_names[c] : "w" + std::to_string(c + 1));
  }
  for (Eigen::Index c = 0; c < vc; ++c) {
    out.names.push_back(c < static_cast<Eigen::Index>(v_names.size()) ? v_names[c] : "v" + std::to_string(c + 1));
  }
  out.estimate = qr.solve(z);
  const Eigen::VectorXd resid = z - X * out.estimate;
  out.n = static_cast<int>(n);
  out.sigma2 = resid.squaredNorm() / static_cast<double>(n - p);
  const Eigen::MatrixXd xtx_inv = (X.transpose() * X).inverse();
  out.se = (out.sigma2 * xtx_inv.diagonal()).array().sqrt();
  return out;
}

Eigen::VectorXd eap(std::span<const int> pattern, const ModelSpec& model, const QuadratureRule& rule,
                    const Eigen::RowVectorXd& w) {
  if (model.is_discrete()) throw ModelError("eap needs a Normal-trait model");
  const LatentGrid grid = grid_for_row(model, rule, w);
  const Eigen::MatrixXd& nodes = grid.nodes[0];
  Eigen::VectorXd log_w = grid.log_weights[0];
  for (Eigen::Index q = 0; q < nodes.rows(); ++q) {
    log_w(q) += conditional_loglik(pattern, model, nodes.row(q).transpose());
  }
  return nodes.transpose() * normalise_log(log_w);
}

EapScores eap_scores(const ResponseMatrix& data, const FitResult& fit, bool marginal_prior) {
  const ModelSpec& model = fit.model;
  if (model.is_discrete()) throw ModelError("eap_scores needs a Normal-trait model");
  const PatternSet patterns = patterns_for(data, model);
  LatentGrid grid = build_grid(model, patterns.group_design, fit.integrator);
  if (marginal_prior && model.structural) grid = mixture_grid(grid, patterns);
  const Eigen::MatrixXd joint = log_joint(model, patterns, grid);
  const Eigen::MatrixXd post = posterior_weights(joint, row_logsumexp(joint));
  EapScores out;
  out.mean.resize(static_cast<Eigen::Index>(data.n_individuals()), model.dims());
  out.prior_only.resize(data.n_individuals());
  for (std::size_t j = 0; j < data.n_individuals(); ++j) {
    const std::size_t p = patterns.index[j];
    out.mean.row(j) = post.row(p) * grid.nodes[patterns.group[p]];
    bool any = false;
    for (int i = 0; i < model.n_items(); ++i) {
      any = any || (data.eligible(j, i) && !model.item_excluded(i));
    }
    out.prior_only[j] = !any;
  }
  return out;
}

ClassPosterior class_posteriors_and_map(std::span<const int> pattern, const ModelSpec& model,
                                        const Eigen::RowVectorXd& w) {
  if (!model.is_discrete()) throw ModelError("class posteriors need a latent-class model");
  const LatentGrid grid = grid_for_row(model, ClassSum{}, w);
  Eigen::VectorXd log_w = grid.log_weights[0];
  for (Eigen::Index c = 0; c < log_w.size(); ++c) {
    if (log_w(c) == -std::numeric_limits<double>::infinity()) continue;
    log_w(c) += conditional_loglik(pattern, model, grid.nodes[0].row(c).transpose());
  }
  ClassPosterior out;
  out.posterior = normalise_log(log_w);
  out.map = argmax_lowest(out.posterior);
  return out;
}

ClassPosteriors class_posteriors(const ResponseMatrix& data, const FitResult& fit, bool marginal_prior) {
  const ModelSpec& model = fit.model;
  if (!model.is_discrete()) throw ModelError("class posteriors need a latent-class model");
  const PatternSet patterns = patterns_for(data, model);
  LatentGrid grid = build_grid(model, patterns.group_design, ClassSum{});
  if (marginal_prior && model.structural) grid = mixture_classes(grid, patterns);
  const Eigen::MatrixXd joint = log_joint(model, patterns, grid);
  const Eigen::MatrixXd post = posterior_weights(joint, row_logsumexp(joint));
  ClassPosteriors out;
  out.posterior.resize(static_cast<Eigen::Index>(data.n_individuals()), model.n_classes());
  out.map.resize(data.n_individuals());
  for (std::size_t j = 0; j < data.n_individuals(); ++j) {
    out.posterior.row(j) = post.row(patterns.index[j]);
    out.map[j] = argmax_lowest(out.posterior.row(j).transpose());
  }
  return out;
}

std::vector<GroupClassSummary> class_distribution_by_group(const ClassPosteriors& post,
                                                           const std::vector<std::string>& groups) {
  if (static_cast<Eigen::Index>(groups.size()) != post.posterior.rows()) {
    throw DataError("group labels do not match posterior rows");
  }
  const Eigen::Index C = post.posterior.cols();
  std::map<std::string, GroupClassSummary> acc;
  for (std::size_t j = 0; j < groups.size(); ++j) {
    auto& s = acc[groups[j]];
    if (s.n == 0) {
      s.group = groups[j];
      s.mean_posterior = Eigen::VectorXd::Zero(C);
      s.map_share = Eigen::VectorXd::Zero(C);
    }
    ++s.n;
    s.mean_posterior += post.posterior.row(j).transpose();
    s.map_share(post.map[j]) += 1.0;
  }
  std::vector<GroupClassSummary> out;
  for (auto& [name, s] : acc) {
    s.mean_posterior /= s.n;
    s.map_share /= s.n;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace qualirt
