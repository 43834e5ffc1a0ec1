#include "qualirt/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "qualirt/errors.hpp"
#include "qualirt/parameters.hpp"
#include "qualirt/patterns.hpp"
#include "qualirt/scoring.hpp"

namespace qualirt {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using Margin = std::vector<std::pair<int, int>>;  // (item, category), items ascending

// Latent nodes of the whole population with mixture weights, plus per-node
// category probabilities for every item (columns at `offsets`).
struct PopulationGrid {
  Eigen::VectorXd weights;  // sum to 1
  Eigen::MatrixXd probs;    // nodes x sum_i K_i
  std::vector<int> offsets;
};

PopulationGrid population_grid(const ModelSpec& model, const PatternSet& patterns, const Integrator& integrator) {
  const LatentGrid grid = build_grid(model, patterns.group_design, integrator);
  std::vector<int> offsets;
  const auto tables = item_log_prob_tables(model, grid, offsets);
  const int G = patterns.n_groups();
  const int Q = grid.size();
  PopulationGrid out;
  out.offsets = offsets;
  out.weights.resize(G * Q);
  out.probs.resize(G * Q, offsets.back());
  for (int g = 0; g < G; ++g) {
    const double share = patterns.group_counts[g] / patterns.total();
    out.weights.segment(g * Q, Q) = share * grid.log_weights[g].array().exp();
    out.probs.middleRows(g * Q, Q) = tables[g].array().exp();
  }
  return out;
}

double margin_prob(const PopulationGrid& pg, const Margin& m) {
  Eigen::VectorXd prod = pg.weights;
  for (const auto& [i, k] : m) prod.array() *= pg.probs.col(pg.offsets[i] + k).array();
  return prod.sum();
}

// Indicator product of two margins as one margin, or nullopt when they
// disagree on an item's category.
std::optional<Margin> merge(const Margin& a, const Margin& b) {
  Margin out = a;
  for (const auto& [i, k] : b) {
    bool found = false;
    for (const auto& [i2, k2] : out) {
      if (i2 == i) {
        if (k2 != k) return std::nullopt;
        found = true;
      }
    }
    if (!found) out.emplace_back(i, k);
  }
  return out;
}

Eigen::VectorXd model_margins(const ModelSpec& model, const PatternSet& patterns, const Integrator& integrator,
                              const std::vector<Margin>& margins) {
  const PopulationGrid pg = population_grid(model, patterns, integrator);
  Eigen::VectorXd pi(static_cast<Eigen::Index>(margins.size()));
  for (std::size_t a = 0; a < margins.size(); ++a) pi(a) = margin_prob(pg, margins[a]);
  return pi;
}

Eigen::MatrixXd pseudo_inverse(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  const double top = std::max(eig.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
  Eigen::VectorXd inv(eig.eigenvalues().size());
  for (Eigen::Index k = 0; k < inv.size(); ++k) {
    const double v = eig.eigenvalues()(k);
    inv(k) = v > 1e-12 * top ? 1.0 / v : 0.0;
  }
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

std::pair<double, double> information_criteria(double loglik, int n_params, int n) {
  if (n < 1) throw ModelError("information criteria need N >= 1");
  return {-2.0 * loglik + 2.0 * n_params, -2.0 * loglik + n_params * std::log(static_cast<double>(n))};
}

FitStatistics fit_statistics(const FitResult& fit) {
  FitStatistics s;
  s.loglik = fit.loglik;
  s.n_params = fit.n_params;
  s.n_individuals = fit.n_used;
  std::tie(s.aic, s.bic) = information_criteria(fit.loglik, fit.n_params, fit.n_used);
  return s;
}

LrtResult likelihood_ratio_test(double loglik_restricted, int p_restricted, double loglik_full, int p_full) {
  LrtResult r;
  r.dof = p_full - p_restricted;
  if (r.dof < 1) throw ModelError("likelihood ratio test needs the full model to have more parameters");
  r.statistic = -2.0 * (loglik_restricted - loglik_full);
  if (r.statistic < -1e-6) {
    throw ModelError("restricted model fits better than the full model; the models are not nested");
  }
  r.statistic = std::max(r.statistic, 0.0);
  const boost::math::chi_squared_distribution<double> chi(r.dof);
  r.p_value = r.statistic == 0.0 ? 1.0 : boost::math::cdf(boost::math::complement(chi, r.statistic));
  return r;
}

LrtResult likelihood_ratio_test(const FitResult& restricted, const FitResult& full) {
  return likelihood_ratio_test(restricted.loglik, restricted.n_params, full.loglik, full.n_params);
}

M2Result rmsea_m2(const ResponseMatrix& data, const FitResult& fit) {
  const ModelSpec& model = fit.model;
  M2Result out;
  std::vector<int> items;
  for (int i = 0; i < model.n_items(); ++i) {
    if (!model.item_excluded(i)) items.push_back(i);
  }
  std::vector<std::size_t> complete;
  for (std::size_t j = 0; j < data.n_individuals(); ++j) {
    bool ok = true;
    for (int i : items) ok = ok && data.eligible(j, i);
    if (ok) complete.push_back(j);
  }
  out.n_complete = static_cast<int>(complete.size());
  if (complete.empty()) {
    out.note = "no individual is eligible for every item";
    return out;
  }
  const ResponseMatrix cc = data.select_rows(complete);
  ModelSpec cc_model = model;
  if (cc_model.structural) {
    Eigen::MatrixXd& design = design_of(*cc_model.structural);
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(complete.size()), design.cols());
    for (std::size_t r = 0; r < complete.size(); ++r) sub.row(r) = design.row(complete[r]);
    design = sub;
  }
  const PatternSet patterns = patterns_for(cc, cc_model);
  const double N = static_cast<double>(complete.size());

  std::vector<Margin> all;
  for (std::size_t a = 0; a < items.size(); ++a) {
    for (int k = 1; k < model.params[items[a]].categories; ++k) all.push_back({{items[a], k}});
  }
  for (std::size_t a = 0; a < items.size(); ++a) {
    for (std::size_t b = a + 1; b < items.size(); ++b) {
      for (int k = 1; k < model.params[items[a]].categories; ++k) {
        for (int l = 1; l < model.params[items[b]].categories; ++l) {
          all.push_back({{items[a], k}, {items[b], l}});
        }
      }
    }
  }
  const Eigen::VectorXd pi_all = model_margins(cc_model, patterns, fit.integrator, all);
  std::vector<Margin> margins;
  std::vector<double> pi_kept;
  for (std::size_t a = 0; a < all.size(); ++a) {
    if (N * pi_all(a) >= 1.0) {
      margins.push_back(all[a]);
      pi_kept.push_back(pi_all(a));
    }
  }
  const auto M = static_cast<Eigen::Index>(margins.size());
  out.n_margins = static_cast<int>(M);
  out.df = static_cast<int>(M) - fit.n_params;
  if (out.df <= 0) {
    out.note = "degrees of freedom " + std::to_string(out.df) + " <= 0; M2 undefined";
    return out;
  }
  const Eigen::VectorXd pi = Eigen::Map<Eigen::VectorXd>(pi_kept.data(), M);

  Eigen::VectorXd p = Eigen::VectorXd::Zero(M);
  for (Eigen::Index a = 0; a < M; ++a) {
    double hits = 0.0;
    for (std::size_t j = 0; j < cc.n_individuals(); ++j) {
      bool all_match = true;
      for (const auto& [i, k] : margins[a]) all_match = all_match && cc.response(j, i) == k;
      hits += all_match ? 1.0 : 0.0;
    }
    p(a) = hits / N;
  }

  const PopulationGrid pg = population_grid(cc_model, patterns, fit.integrator);
  Eigen::MatrixXd xi(M, M);
  for (Eigen::Index a = 0; a < M; ++a) {
    for (Eigen::Index b = a; b < M; ++b) {
      const auto joint = merge(margins[a], margins[b]);
      const double both = joint ? margin_prob(pg, *joint) : 0.0;
      xi(a, b) = xi(b, a) = both - pi(a) * pi(b);
    }
  }

  const Eigen::VectorXd theta = pack_free(cc_model);
  auto margins_at = [&](const Eigen::VectorXd& x) {
    ModelSpec m = cc_model;
    unpack_free(x, m);
    return model_margins(m, patterns, fit.integrator, margins);
  };
  Eigen::MatrixXd delta(M, theta.size());
  Eigen::VectorXd x = theta;
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    const double h = 1e-5 * std::max(1.0, std::abs(theta(k)));
    x(k) = theta(k) + h;
    const Eigen::VectorXd up = margins_at(x);
    x(k) = theta(k) - h;
    const Eigen::VectorXd down = margins_at(x);
    x(k) = theta(k);
    delta.col(k) = (up - down) / (2.0 * h);
  }

  const Eigen::MatrixXd xi_inv = pseudo_inverse(xi);
  const Eigen::MatrixXd xd = xi_inv * delta;
  const Eigen::MatrixXd c2 = xi_inv - xd * pseudo_inverse(delta.transpose() * xd) * xd.transpose();
  const Eigen::VectorXd e = p - pi;
  out.m2 = N * e.dot(c2 * e);
  out.rmsea = std::sqrt(std::max(out.m2 - out.df, 0.0) / (out.df * N));
  out.defined = true;
  if (static_cast<Eigen::Index>(all.size()) != M) {
    out.note = std::to_string(all.size() - margins.size()) + " margins with expected count < 1 dropped";
  }
  return out;
}

Eigen::MatrixXd residual_item_correlations(const ResponseMatrix& data, const FitResult& fit) {
  const ModelSpec& model = fit.model;
  const int I = model.n_items();
  const PatternSet patterns = patterns_for(data, model);
  const LatentGrid grid = build_grid(model, patterns.group_design, fit.integrator);
  const Eigen::MatrixXd joint = log_joint(model, patterns, grid);
  const Eigen::MatrixXd post = posterior_weights(joint, row_logsumexp(joint));
  const int Q = grid.size();

  // Expected item score at every node, per group.
  std::vector<Eigen::MatrixXd> expected(patterns.n_groups(), Eigen::MatrixXd(Q, I));
  for (int g = 0; g < patterns.n_groups(); ++g) {
    for (int q = 0; q < Q; ++q) {
      for (int i = 0; i < I; ++i) expected[g](q, i) = model.params[i].expected_score(grid.nodes[g].row(q).transpose());
    }
  }
  Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(I, I);
  Eigen::MatrixXd left = Eigen::MatrixXd::Zero(I, I);   // sum of E r_i^2 over pairs (i, k)
  Eigen::MatrixXd count = Eigen::MatrixXd::Zero(I, I);
  Eigen::MatrixXd resid(Q, I);
  for (int p = 0; p < patterns.size(); ++p) {
    const auto& y = patterns.patterns[p];
    const auto& ex = expected[patterns.group[p]];
    for (int i = 0; i < I; ++i) {
      if (y[i] != kMissing) resid.col(i) = y[i] - ex.col(i).array();
    }
    const double n = patterns.counts[p];
    for (int i = 0; i < I; ++i) {
      if (y[i] == kMissing || model.item_excluded(i)) continue;
      const Eigen::ArrayXd wi = post.row(p).transpose().array() * resid.col(i).array();
      const double sq = (wi * resid.col(i).array()).sum();
      for (int k = 0; k < I; ++k) {
        if (k == i || y[k] == kMissing || model.item_excluded(k)) continue;
        cross(i, k) += n * (wi * resid.col(k).array()).sum();
        left(i, k) += n * sq;
        count(i, k) += n;
      }
    }
  }
  Eigen::MatrixXd r = Eigen::MatrixXd::Constant(I, I, kNaN);
  for (int i = 0; i < I; ++i) {
    r(i, i) = 1.0;
    for (int k = 0; k < I; ++k) {
      if (k == i || count(i, k) < 2) continue;
      const double denom = std::sqrt(left(i, k) * left(k, i));
      r(i, k) = denom > 0 ? cross(i, k) / denom : kNaN;
    }
  }
  return r;
}

LoadingMatrix slopes_to_loadings(const ModelSpec& model) {
  const int I = model.n_items();
  const int S = model.dims();
  LoadingMatrix out;
  out.loadings = Eigen::MatrixXd::Zero(I, S);
  const double logistic_var = std::numbers::pi * std::numbers::pi / 3.0;
  int active = 0;
  for (int i = 0; i < I; ++i) {
    if (model.item_excluded(i)) continue;
    ++active;
    const auto& p = model.params[i];
    const Eigen::RowVectorXd a = p.slopes.row(p.slopes.rows() - 1);
    out.loadings.row(i) = a / std::sqrt(a.squaredNorm() + logistic_var);
  }
  out.rotation = Eigen::MatrixXd::Identity(S, S);
  out.cumulative_variance_pct.resize(S);
  double acc = 0.0;
  for (int s = 0; s < S; ++s) {
    acc += out.loadings.col(s).squaredNorm() / std::max(active, 1) * 100.0;
    out.cumulative_variance_pct(s) = acc;
  }
  return out;
}

double varimax_criterion(const Eigen::MatrixXd& loadings) {
  const double I = static_cast<double>(loadings.rows());
  double total = 0.0;
  for (Eigen::Index s = 0; s < loadings.cols(); ++s) {
    const Eigen::ArrayXd sq = loadings.col(s).array().square();
    total += sq.square().sum() / I - std::pow(sq.sum() / I, 2);
  }
  return total;
}

LoadingMatrix varimax_rotate(const Eigen::MatrixXd& loadings) {
  const Eigen::Index S = loadings.cols();
  const double I = static_cast<double>(loadings.rows());
  LoadingMatrix out;
  out.loadings = loadings;
  out.rotation = Eigen::MatrixXd::Identity(S, S);
  if (S >= 2 && loadings.rows() > 0) {
    for (int sweep = 0; sweep < 1000; ++sweep) {
      double largest = 0.0;
      for (Eigen::Index s = 0; s < S - 1; ++s) {
        for (Eigen::Index t = s + 1; t < S; ++t) {
          const Eigen::ArrayXd x = out.loadings.col(s).array(), y = out.loadings.col(t).array();
          const Eigen::ArrayXd u = x.square() - y.square(), v = 2.0 * x * y;
          const double A = u.sum(), B = v.sum();
          const double C = (u.square() - v.square()).sum(), D = 2.0 * (u * v).sum();
          const double phi = 0.25 * std::atan2(D - 2.0 * A * B / I, C - (A * A - B * B) / I);
          largest = std::max(largest, std::abs(phi));
          if (std::abs(phi) < 1e-15) continue;
          const double c = std::cos(phi), sn = std::sin(phi);
          Eigen::MatrixXd plane = Eigen::MatrixXd::Identity(S, S);
          plane(s, s) = c;
          plane(t, s) = sn;
          plane(s, t) = -sn;
          plane(t, t) = c;
          out.loadings = out.loadings * plane;
          out.rotation = out.rotation * plane;
        }
      }
      if (largest < 1e-13) break;
    }
  }
  out.cumulative_variance_pct.resize(S);
  double acc = 0.0;
  for (Eigen::Index s = 0; s < S; ++s) {
    acc += out.loadings.col(s).squaredNorm() / std::max(I, 1.0) * 100.0;
    out.cumulative_variance_pct(s) = acc;
  }
  return out;
}

QQData qq_data(const Eigen::VectorXd& estimates) {
  const Eigen::Index n = estimates.size();
  if (n < 10) throw DataError("QQ data need at least 10 estimates");
  QQData out;
  out.empirical = estimates;
  std::sort(out.empirical.data(), out.empirical.data() + n);
  out.theoretical.resize(n);
  const boost::math::normal_distribution<double> std_normal;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.theoretical(i) = boost::math::quantile(std_normal, (static_cast<double>(i) + 0.5) / static_cast<double>(n));
  }
  return out;
}

ClassScan class_scan(const ResponseMatrix& data, int c_min, int c_max, const std::vector<int>& allocation,
                     const FitOptions& opts) {
  if (c_min < 1 || c_max < c_min) throw ConfigError("class range must satisfy 1 <= min <= max");
  ClassScan scan;
  for (int c = c_min; c <= c_max; ++c) {
    FitResult fit = em_fit_latent_class(data, c, allocation, std::nullopt, opts);
    scan.classes.push_back(c);
    scan.stats.push_back(fit_statistics(fit));
    scan.fits.push_back(std::move(fit));
  }
  std::size_t bic = 0, aic = 0;
  for (std::size_t k = 1; k < scan.stats.size(); ++k) {
    if (scan.stats[k].bic < scan.stats[bic].bic) bic = k;
    if (scan.stats[k].aic < scan.stats[aic].aic) aic = k;
  }
  scan.bic_choice = scan.classes[bic];
  scan.aic_choice = scan.classes[aic];
  return scan;
}

HeldoutValidation validate_heldout(const FitResult& fit, const ResponseMatrix& data,
                                   const std::vector<int>& heldout) {
  if (heldout.size() != data.n_individuals()) throw DataError("held-out responses do not match individuals");
  HeldoutValidation out;
  int successes = 0, failures = 0;
  for (int y : heldout) {
    if (y == kMissing) continue;
    (y > 0 ? successes : failures) += 1;
  }
  if (successes == 0 || failures == 0) {
    out.note = "held-out item is constant among eligible individuals; validation undefined";
    return out;
  }
  out.defined = true;
  if (!fit.model.is_discrete()) {
    const EapScores scores = eap_scores(data, fit);
    const Eigen::Index S = scores.mean.cols();
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(S), s0 = Eigen::VectorXd::Zero(S);
    for (std::size_t j = 0; j < heldout.size(); ++j) {
      if (heldout[j] == kMissing) continue;
      (heldout[j] > 0 ? s1 : s0) += scores.mean.row(j).transpose();
    }
    out.mean_eap_difference = s1 / successes - s0 / failures;
    return out;
  }
  const ClassPosteriors post = class_posteriors(data, fit);
  const int C = fit.model.n_classes();
  Eigen::VectorXd hits = Eigen::VectorXd::Zero(C);
  out.class_counts = Eigen::VectorXd::Zero(C);
  for (std::size_t j = 0; j < heldout.size(); ++j) {
    if (heldout[j] == kMissing) continue;
    out.class_counts(post.map[j]) += 1.0;
    hits(post.map[j]) += heldout[j] > 0 ? 1.0 : 0.0;
  }
  out.class_success_rate.resize(C);
  for (int c = 0; c < C; ++c) {
    out.class_success_rate(c) = out.class_counts(c) > 0 ? hits(c) / out.class_counts(c) : kNaN;
  }
  return out;
}

}  // namespace qualirt
