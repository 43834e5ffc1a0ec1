#include <cmath>
#include <string>

#include "em_common.hpp"
#include "qualirt/errors.hpp"
#include "qualirt/estimation.hpp"
#include "qualirt/parameters.hpp"
#include "qualirt/patterns.hpp"

namespace qualirt {

namespace {

using detail::CountBlock;

struct EStep {
  double loglik = 0.0;
  Eigen::MatrixXd post;
  LatentGrid grid;
};

EStep e_step(const ModelSpec& model, const PatternSet& patterns, const QuadratureRule& rule) {
  EStep e;
  e.grid = build_grid(model, patterns.group_design, rule);
  const Eigen::MatrixXd joint = log_joint(model, patterns, e.grid);
  const Eigen::VectorXd lse = row_logsumexp(joint);
  for (int p = 0; p < patterns.size(); ++p) e.loglik += patterns.counts[p] * lse(p);
  e.post = posterior_weights(joint, lse);
  return e;
}

void m_step(ModelSpec& model, const PatternSet& patterns, const EStep& e, bool positive) {
  std::vector<int> offsets;
  const auto tables = detail::expected_counts(model, patterns, e.post, e.grid.size(), offsets);
  for (int i = 0; i < model.n_items(); ++i) {
    if (model.item_excluded(i)) continue;
    const int K = model.params[i].categories;
    std::vector<CountBlock> blocks;
    for (std::size_t g = 0; g < tables.size(); ++g) {
      blocks.push_back({&e.grid.nodes[g], tables[g].middleCols(offsets[i], K)});
    }
    detail::fit_item(model.params[i], blocks, positive);
  }

  const int S = model.dims();
  // Posterior trait means per pattern.
  Eigen::MatrixXd means(patterns.size(), S);
  for (int p = 0; p < patterns.size(); ++p) {
    means.row(p) = e.post.row(p) * e.grid.nodes[patterns.group[p]];
  }

  if (model.structural) {
    auto& reg = std::get<LatentRegression>(*model.structural);
    const Eigen::MatrixXd& W = patterns.group_design;
    Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(W.cols(), W.cols());
    Eigen::MatrixXd xty = Eigen::MatrixXd::Zero(W.cols(), S);
    for (int g = 0; g < patterns.n_groups(); ++g) {
      xtx += patterns.group_counts[g] * W.row(g).transpose() * W.row(g);
    }
    for (int p = 0; p < patterns.size(); ++p) {
      xty += patterns.counts[p] * W.row(patterns.group[p]).transpose() * means.row(p);
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(xtx);
    if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-12) {
      throw NumericalError("latent regression design is rank deficient");
    }
    reg.gamma = ldlt.solve(xty);
    return;
  }

  auto& normal = std::get<NormalLatent>(model.latent);
  if (!normal.mean_free && !normal.cov_free) return;
  const double n = patterns.total();
  Eigen::VectorXd mu = normal.mean;
  if (normal.mean_free) {
    mu.setZero();
    for (int p = 0; p < patterns.size(); ++p) mu += patterns.counts[p] * means.row(p).transpose();
    mu /= n;
  }
  if (normal.cov_free) {
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(S, S);
    for (int p = 0; p < patterns.size(); ++p) {
      const Eigen::MatrixXd& nodes = e.grid.nodes[patterns.group[p]];
      const Eigen::MatrixXd centered = nodes.rowwise() - mu.transpose();
      cov += patterns.counts[p] *
             (centered.transpose() * e.post.row(p).transpose().asDiagonal() * centered);
    }
    normal.cov = cov / n;
  }
  normal.mean = mu;
}

}  // namespace

FitResult em_fit_normal(const ResponseMatrix& data, const ModelSpec& init, const FitOptions& opts) {
  opts.validate();
  if (init.is_discrete()) throw ModelError("em_fit_normal needs a Normal latent");
  if (init.structural && !std::holds_alternative<LatentRegression>(*init.structural)) {
    throw ModelError("Normal latents take a latent-regression structural model only");
  }
  validate(init);
  ModelSpec model = init;
  if (model.excluded.empty()) model.excluded.assign(model.n_items(), false);
  FitResult result;
  for (int i : degenerate_items(data)) {
    model.excluded[i] = true;
    result.warnings.push_back("item '" + model.items[i].id +
                              "' has no variation among eligible responses and was excluded");
  }

  const QuadratureRule rule =
      standard_rule(model.dims(), opts.quad_points_per_dim, opts.qmc_points, opts.seed);
  const PatternSet patterns = patterns_for(data, model, opts.collapse_patterns);

  Eigen::VectorXd prev_params = pack_free(model);
  double last_delta = std::numeric_limits<double>::infinity();
  double prev_ll = -std::numeric_limits<double>::infinity();
  EStep e;
  for (int it = 0; it < opts.max_em_iters; ++it) {
    e = e_step(model, patterns, rule);
    result.trace.push_back(e.loglik);
    result.iterations = it;
    if (it > 0 && std::abs(e.loglik - prev_ll) < opts.loglik_tol && last_delta < opts.param_tol) {
      result.converged = true;
      break;
    }
    prev_ll = e.loglik;
    m_step(model, patterns, e, opts.positive_slopes);
    const Eigen::VectorXd params = pack_free(model);
    last_delta = detail::max_abs_diff(params, prev_params);
    prev_params = params;
  }
  if (!result.converged) {
    e = e_step(model, patterns, rule);
    result.trace.push_back(e.loglik);
    result.iterations = opts.max_em_iters;
    result.warnings.push_back("EM did not converge within " + std::to_string(opts.max_em_iters) +
                              " iterations");
  }
  result.loglik = e.loglik;
  result.model = std::move(model);
  result.n_params = count_free(result.model);
  result.param_names = free_parameter_names(result.model);
  result.n_used = static_cast<int>(data.n_individuals());
  result.integrator = rule;
  return result;
}

}  // namespace qualirt
