#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "em_common.hpp"
#include "qualirt/errors.hpp"
#include "qualirt/estimation.hpp"
#include "qualirt/optimize.hpp"
#include "qualirt/parameters.hpp"
#include "qualirt/patterns.hpp"
#include "qualirt/rng.hpp"

namespace qualirt {

namespace {

using detail::CountBlock;

constexpr double kEmptyClass = 1e-10;

struct EStep {
  double loglik = 0.0;
  Eigen::MatrixXd post;       // P x C
  Eigen::MatrixXd by_group;   // G x C expected class counts
};

EStep e_step(const ModelSpec& model, const PatternSet& patterns) {
  EStep e;
  const LatentGrid grid = build_grid(model, patterns.group_design, ClassSum{});
  const Eigen::MatrixXd joint = log_joint(model, patterns, grid);
  const Eigen::VectorXd lse = row_logsumexp(joint);
  for (int p = 0; p < patterns.size(); ++p) {
    if (!std::isfinite(lse(p))) {
      throw NumericalError("response pattern " + std::to_string(p) +
                           " has zero probability under every class");
    }
    e.loglik += patterns.counts[p] * lse(p);
  }
  e.post = posterior_weights(joint, lse);
  e.by_group = Eigen::MatrixXd::Zero(patterns.n_groups(), model.n_classes());
  for (int p = 0; p < patterns.size(); ++p) {
    e.by_group.row(patterns.group[p]) += patterns.counts[p] * e.post.row(p);
  }
  return e;
}

void update_support(ModelSpec& model, const Eigen::MatrixXd& R, const std::vector<int>& offsets,
                    double bound) {
  auto& latent = std::get<DiscreteLatent>(model.latent);
  if (!latent.support_free) return;
  const int C = static_cast<int>(latent.support.rows());
  const int S = static_cast<int>(latent.support.cols());
  std::vector<double> g_lin, g_d, counts;
  for (int c = 0; c < C; ++c) {
    for (int s = 0; s < S; ++s) {
      Eigen::VectorXd point = latent.support.row(c).transpose();
      auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
        point(s) = x(0);
        double value = 0.0, g = 0.0;
        for (int i = 0; i < model.n_items(); ++i) {
          if (model.item_excluded(i)) continue;
          const auto& p = model.params[i];
          bool loads = false;
          for (Eigen::Index r = 0; r < p.slopes.rows(); ++r) loads = loads || p.slopes(r, s) != 0.0;
          if (!loads) continue;
          g_lin.resize(p.categories);
          g_d.resize(p.intercepts.size());
          counts.resize(p.categories);
          for (int k = 0; k < p.categories; ++k) counts[k] = R(c, offsets[i] + k);
          value += detail::node_terms(p, point, counts.data(), g_lin.data(), g_d.data());
          if (p.kind == ItemKind::nominal) {
            for (int k = 0; k < p.categories; ++k) g += g_lin[k] * p.slopes(k, s);
          } else {
            g += g_lin[0] * p.slopes(0, s);
          }
        }
        if (grad) *grad = Eigen::VectorXd::Constant(1, g);
        return value;
      };
      Eigen::VectorXd x0 = Eigen::VectorXd::Constant(1, latent.support(c, s));
      const NewtonResult res = maximize_newton(objective, x0);
      double v = res.x(0);
      if (std::isfinite(v)) latent.support(c, s) = std::clamp(v, -bound, bound);
    }
  }
}

void update_multinomial(MultinomialLogit& m, const Eigen::MatrixXd& W, const Eigen::MatrixXd& by_group) {
  const Eigen::Index q = m.gamma.rows(), C1 = m.gamma.cols();
  auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    const Eigen::Map<const Eigen::MatrixXd> gamma(x.data(), q, C1);
    double value = 0.0;
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(q, C1);
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      Eigen::VectorXd eta(C1 + 1);
      eta(0) = 0.0;
      eta.tail(C1) = (W.row(r) * gamma).transpose();
      const double top = eta.maxCoeff();
      const double lse = top + std::log((eta.array() - top).exp().sum());
      const double n = by_group.row(r).sum();
      for (Eigen::Index c = 0; c <= C1; ++c) value += by_group(r, c) * (eta(c) - lse);
      for (Eigen::Index c = 1; c <= C1; ++c) {
        g.col(c - 1) += (by_group(r, c) - n * std::exp(eta(c) - lse)) * W.row(r).transpose();
      }
    }
    if (grad) *grad = Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
    return value;
  };
  Eigen::VectorXd x0 = Eigen::Map<const Eigen::VectorXd>(m.gamma.data(), m.gamma.size());
  const NewtonResult res = maximize_newton(objective, x0);
  if (res.x.allFinite()) m.gamma = Eigen::Map<const Eigen::MatrixXd>(res.x.data(), q, C1);
}

void update_cumulative(CumulativeLogit& m, const Eigen::MatrixXd& W, const Eigen::MatrixXd& by_group) {
  const Eigen::Index C1 = m.cutpoints.size(), q = m.gamma.size();
  auto unpack = [&](const Eigen::VectorXd& x, CumulativeLogit& out) {
    out.cutpoints(0) = x(0);
    for (Eigen::Index c = 1; c < C1; ++c) out.cutpoints(c) = out.cutpoints(c - 1) + std::exp(x(c));
    out.gamma = x.tail(q);
  };
  CumulativeLogit work = m;
  auto value_at = [&](const Eigen::VectorXd& x) {
    unpack(x, work);
    double value = 0.0;
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      const Eigen::VectorXd lp = log_prior_class_probs(work, W.row(r));
      for (Eigen::Index c = 0; c <= C1; ++c) {
        if (by_group(r, c) != 0.0) value += by_group(r, c) * lp(c);
      }
    }
    return value;
  };
  auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    if (grad) {
      grad->resize(x.size());
      Eigen::VectorXd xp = x;
      for (Eigen::Index k = 0; k < x.size(); ++k) {
        const double h = 1e-6 * std::max(1.0, std::abs(x(k)));
        xp(k) = x(k) + h;
        const double up = value_at(xp);
        xp(k) = x(k) - h;
        const double down = value_at(xp);
        xp(k) = x(k);
        (*grad)(k) = (up - down) / (2 * h);
      }
    }
    return value_at(x);
  };
  Eigen::VectorXd x0(C1 + q);
  x0(0) = m.cutpoints(0);
  for (Eigen::Index c = 1; c < C1; ++c) x0(c) = std::log(m.cutpoints(c) - m.cutpoints(c - 1));
  x0.tail(q) = m.gamma;
  NewtonOptions opts;
  opts.grad_tol = 1e-6;
  const NewtonResult res = maximize_newton(objective, x0, opts);
  if (res.x.allFinite()) unpack(res.x, m);
}

void m_step(ModelSpec& model, const PatternSet& patterns, const EStep& e, double bound) {
  std::vector<int> offsets;
  const int C = model.n_classes();
  const auto tables = detail::expected_counts(model, patterns, e.post, C, offsets);
  Eigen::MatrixXd R = Eigen::MatrixXd::Zero(C, offsets.back());
  for (const auto& t : tables) R += t;
  const auto& latent = std::get<DiscreteLatent>(model.latent);

  for (int i = 0; i < model.n_items(); ++i) {
    if (model.item_excluded(i)) continue;
    std::vector<CountBlock> blocks{{&latent.support, R.middleCols(offsets[i], model.params[i].categories)}};
    detail::fit_item(model.params[i], blocks, false);
  }
  update_support(model, R, offsets, bound);

  if (!model.structural) {
    auto& d = std::get<DiscreteLatent>(model.latent);
    Eigen::VectorXd mass = e.by_group.colwise().sum().transpose();
    mass = mass.cwiseMax(1e-300);
    d.prior = mass / mass.sum();
    return;
  }
  std::visit(
      [&](auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, MultinomialLogit>) {
          update_multinomial(s, patterns.group_design, e.by_group);
        } else if constexpr (std::is_same_v<T, CumulativeLogit>) {
          update_cumulative(s, patterns.group_design, e.by_group);
        } else {
          throw ModelError("latent regression requires a Normal latent");
        }
      },
      *model.structural);
}

double logit(double p) { return std::log(p / (1.0 - p)); }

// Quantile split of individuals by standardised mean item score.
ModelSpec deterministic_start(const ResponseMatrix& data, ModelSpec model) {
  const int C = model.n_classes();
  const int S = model.dims();
  const std::size_t N = data.n_individuals();
  std::vector<double> score(N, 0.0);
  for (std::size_t j = 0; j < N; ++j) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < data.n_items(); ++i) {
      if (model.item_excluded(static_cast<int>(i)) || !data.eligible(j, i)) continue;
      sum += data.response(j, i);
      ++n;
    }
    score[j] = n > 0 ? sum / n : 0.0;
  }
  const double mean = std::accumulate(score.begin(), score.end(), 0.0) / std::max<std::size_t>(N, 1);
  double var = 0.0;
  for (double v : score) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / std::max<std::size_t>(N, 1));
  for (double& v : score) v = sd > 0 ? (v - mean) / sd : 0.0;
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] < score[b]; });

  Eigen::MatrixXd hits = Eigen::MatrixXd::Zero(C, S), seen = Eigen::MatrixXd::Zero(C, S);
  Eigen::VectorXd sizes = Eigen::VectorXd::Zero(C);
  for (std::size_t rank = 0; rank < N; ++rank) {
    const int c = static_cast<int>(rank * C / std::max<std::size_t>(N, 1));
    const std::size_t j = order[rank];
    sizes(c) += 1;
    for (std::size_t i = 0; i < data.n_items(); ++i) {
      if (model.item_excluded(static_cast<int>(i)) || !data.eligible(j, i)) continue;
      const int s = model.allocation[i];
      hits(c, s) += data.response(j, i);
      seen(c, s) += 1;
    }
  }
  auto& latent = std::get<DiscreteLatent>(model.latent);
  if (latent.support_free) {
    for (int c = 0; c < C; ++c) {
      for (int s = 0; s < S; ++s) {
        const double p = seen(c, s) > 0 ? hits(c, s) / seen(c, s) : 0.5;
        latent.support(c, s) = logit(std::clamp(p, 0.02, 0.98));
      }
    }
  }
  latent.prior = Eigen::VectorXd::Constant(C, 1.0 / C);

  // Intercepts relative to the pinned item of each trait.
  std::vector<double> pinned_logit(S, 0.0);
  std::vector<double> item_logit(data.n_items(), 0.0);
  for (std::size_t i = 0; i < data.n_items(); ++i) {
    double y = 0, n = 0;
    for (std::size_t j = 0; j < N; ++j) {
      if (!data.eligible(j, i)) continue;
      y += data.response(j, i);
      n += 1;
    }
    item_logit[i] = logit(std::clamp(n > 0 ? y / n : 0.5, 0.02, 0.98));
    const auto& p = model.params[i];
    if (p.intercept_fixed(0) && p.slope_fixed(0, model.allocation[i])) {
      pinned_logit[model.allocation[i]] = item_logit[i];
    }
  }
  for (std::size_t i = 0; i < data.n_items(); ++i) {
    auto& p = model.params[i];
    if (!p.intercept_fixed(0)) {
      p.intercepts(0) = C == 1 ? item_logit[i] : item_logit[i] - pinned_logit[model.allocation[i]];
    }
  }
  if (model.structural) {
    std::visit(
        [&](auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, MultinomialLogit>) {
            s.gamma.setZero();
          } else if constexpr (std::is_same_v<T, CumulativeLogit>) {
            for (int c = 0; c < C - 1; ++c) s.cutpoints(c) = logit(static_cast<double>(c + 1) / C);
            s.gamma.setZero();
          }
        },
        *model.structural);
  }
  return model;
}

ModelSpec random_start(ModelSpec model, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int C = model.n_classes();
  auto& latent = std::get<DiscreteLatent>(model.latent);
  Eigen::VectorXd prior(C);
  for (int c = 0; c < C; ++c) prior(c) = unif(rng);
  latent.prior = prior / prior.sum();
  if (latent.support_free) {
    for (Eigen::Index c = 0; c < latent.support.rows(); ++c) {
      for (Eigen::Index s = 0; s < latent.support.cols(); ++s) latent.support(c, s) = normal(rng);
    }
  }
  for (int i = 0; i < model.n_items(); ++i) {
    auto& p = model.params[i];
    const int s = model.allocation[i];
    const double a = normal(rng);
    const double b = normal(rng);
    if (!p.slope_fixed(0, s)) p.slopes(0, s) = a;
    if (!p.intercept_fixed(0)) p.intercepts(0) = -p.slopes(0, s) * b;
  }
  if (model.structural) {
    std::visit(
        [&](auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, MultinomialLogit>) {
            for (Eigen::Index k = 0; k < s.gamma.size(); ++k) s.gamma.data()[k] = normal(rng);
          } else if constexpr (std::is_same_v<T, CumulativeLogit>) {
            std::vector<double> cuts(s.cutpoints.size());
            for (double& v : cuts) v = normal(rng);
            std::sort(cuts.begin(), cuts.end());
            for (std::size_t c = 0; c < cuts.size(); ++c) {
              s.cutpoints(c) = cuts[c] + 1e-3 * static_cast<double>(c);
            }
            for (Eigen::Index k = 0; k < s.gamma.size(); ++k) s.gamma(k) = normal(rng);
          }
        },
        *model.structural);
  }
  return model;
}

double smallest_class_share(const ModelSpec& model, const ResponseMatrix& data) {
  const PatternSet patterns = patterns_for(data, model);
  const EStep e = e_step(model, patterns);
  const Eigen::VectorXd mass = e.by_group.colwise().sum().transpose();
  return mass.minCoeff() / std::max(1.0, mass.sum());
}

// Orders classes by ascending support on `trait`; class 1 stays the
// reference of a multinomial prior by re-expressing gamma.
void canonicalize(ModelSpec& model, int trait) {
  auto& latent = std::get<DiscreteLatent>(model.latent);
  const int C = static_cast<int>(latent.support.rows());
  if (C < 2 || trait < 0 || trait >= latent.support.cols()) return;
  if (model.structural && std::holds_alternative<CumulativeLogit>(*model.structural)) return;
  std::vector<int> perm(C);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](int a, int b) { return latent.support(a, trait) < latent.support(b, trait); });
  Eigen::MatrixXd support(latent.support.rows(), latent.support.cols());
  Eigen::VectorXd prior(C);
  for (int k = 0; k < C; ++k) {
    support.row(k) = latent.support.row(perm[k]);
    prior(k) = latent.prior(perm[k]);
  }
  latent.support = support;
  latent.prior = prior;
  if (model.structural) {
    auto& m = std::get<MultinomialLogit>(*model.structural);
    Eigen::MatrixXd full = Eigen::MatrixXd::Zero(m.gamma.rows(), C);
    full.rightCols(C - 1) = m.gamma;
    Eigen::MatrixXd out(m.gamma.rows(), C - 1);
    for (int k = 1; k < C; ++k) out.col(k - 1) = full.col(perm[k]) - full.col(perm[0]);
    m.gamma = out;
  }
}

}  // namespace

FitResult em_run_latent_class(const ResponseMatrix& data, const ModelSpec& start,
                              const FitOptions& opts) {
  opts.validate();
  if (!start.is_discrete()) throw ModelError("em_run_latent_class needs a discrete latent");
  validate(start);
  ModelSpec model = start;
  FitResult result;
  const PatternSet patterns = patterns_for(data, model, opts.collapse_patterns);
  Eigen::VectorXd prev_params = pack_free(model);
  double last_delta = std::numeric_limits<double>::infinity();
  double prev_ll = -std::numeric_limits<double>::infinity();
  EStep e;
  for (int it = 0; it < opts.max_em_iters; ++it) {
    e = e_step(model, patterns);
    result.trace.push_back(e.loglik);
    result.iterations = it;
    if (it > 0 && std::abs(e.loglik - prev_ll) < opts.loglik_tol && last_delta < opts.param_tol) {
      result.converged = true;
      break;
    }
    prev_ll = e.loglik;
    m_step(model, patterns, e, opts.support_bound);
    const Eigen::VectorXd params = pack_free(model);
    last_delta = detail::max_abs_diff(params, prev_params);
    prev_params = params;
  }
  if (!result.converged) {
    e = e_step(model, patterns);
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
  result.integrator = ClassSum{};
  return result;
}

FitResult em_fit_latent_class(const ResponseMatrix& data, int classes,
                              const std::vector<int>& allocation,
                              std::optional<StructuralModel> structural, const FitOptions& opts) {
  opts.validate();
  std::vector<bool> excluded(data.n_items(), false);
  std::vector<std::string> warnings;
  for (int i : degenerate_items(data)) {
    excluded[i] = true;
    warnings.push_back("item '" + data.items()[i].id +
                       "' has no variation among eligible responses and was excluded");
  }
  const ModelSpec tmpl = latent_class_model(data.items(), classes, allocation, std::move(structural), excluded);

  const int n_starts = classes > 1 ? 1 + opts.n_random_starts : 1;
  FitResult best;
  std::vector<double> logliks;
  int best_index = -1;
  for (int start = 0; start < n_starts; ++start) {
    std::mt19937_64 rng(derive_seed(opts.seed, static_cast<std::uint64_t>(start)));
    ModelSpec init = start == 0 ? deterministic_start(data, tmpl) : random_start(tmpl, rng);
    FitResult fit;
    try {
      fit = em_run_latent_class(data, init, opts);
      if (classes > 1 && smallest_class_share(fit.model, data) < kEmptyClass) {
        std::mt19937_64 retry(derive_seed(opts.seed, "restart-" + std::to_string(start)));
        fit = em_run_latent_class(data, random_start(tmpl, retry), opts);
        if (smallest_class_share(fit.model, data) < kEmptyClass) {
          fit.warnings.push_back("start " + std::to_string(start) +
                                 " ended with an empty class after a perturbed restart");
        }
      }
    } catch (const NumericalError& err) {
      logliks.push_back(-std::numeric_limits<double>::infinity());
      warnings.push_back("start " + std::to_string(start) + " failed: " + err.what());
      continue;
    }
    logliks.push_back(fit.loglik);
    if (best_index < 0 || fit.loglik > best.loglik) {
      best = std::move(fit);
      best_index = start;
    }
  }
  if (best_index < 0) throw NumericalError("every latent-class start failed");
  canonicalize(best.model, opts.order_by_trait);
  best.start_logliks = std::move(logliks);
  best.best_start = best_index;
  const auto& support = std::get<DiscreteLatent>(best.model.latent).support;
  if (classes > 1 && support.cwiseAbs().maxCoeff() >= opts.support_bound - 1e-8) {
    warnings.push_back("a support point sits at the bound of " + std::to_string(opts.support_bound) +
                       "; that class responds near-deterministically");
  }
  best.warnings.insert(best.warnings.begin(), warnings.begin(), warnings.end());
  best.param_names = free_parameter_names(best.model);
  return best;
}

}  // namespace qualirt
