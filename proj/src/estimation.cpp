#include "qualirt/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "qualirt/errors.hpp"
#include "qualirt/parameters.hpp"
#include "qualirt/patterns.hpp"

namespace qualirt {

namespace {

double clamped_logit(double p) {
  p = std::clamp(p, 1e-3, 1.0 - 1e-3);
  return std::log(p / (1.0 - p));
}

std::vector<double> category_freqs(const ResponseMatrix& data, std::size_t i) {
  std::vector<double> counts(data.items()[i].categories, 0.0);
  for (std::size_t j = 0; j < data.n_individuals(); ++j) {
    const int y = data.response(j, i);
    if (y != kMissing) counts[y] += 1.0;
  }
  return counts;
}

// Pearson correlations of item codes over pairwise-complete individuals.
Eigen::MatrixXd item_correlations(const ResponseMatrix& data) {
  const auto I = static_cast<Eigen::Index>(data.n_items());
  Eigen::MatrixXd r = Eigen::MatrixXd::Identity(I, I);
  for (Eigen::Index a = 0; a < I; ++a) {
    for (Eigen::Index b = a + 1; b < I; ++b) {
      double n = 0, sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t j = 0; j < data.n_individuals(); ++j) {
        const int ya = data.response(j, a), yb = data.response(j, b);
        if (ya == kMissing || yb == kMissing) continue;
        n += 1;
        sa += ya;
        sb += yb;
        saa += double(ya) * ya;
        sbb += double(yb) * yb;
        sab += double(ya) * yb;
      }
      double c = 0.0;
      if (n >= 2) {
        const double va = saa - sa * sa / n, vb = sbb - sb * sb / n;
        if (va > 0 && vb > 0) c = (sab - sa * sb / n) / std::sqrt(va * vb);
      }
      r(a, b) = r(b, a) = c;
    }
  }
  return r;
}

int first_item_for_trait(const ModelSpec& model, int s) {
  int seen = 0;
  for (int i = 0; i < model.n_items(); ++i) {
    if (model.item_excluded(i)) continue;
    if (!model.allocation.empty()) {
      if (model.allocation[i] == s) return i;
    } else if (seen++ == s) {
      return i;
    }
  }
  throw ModelError("no item available to anchor trait " + std::to_string(s + 1));
}

}  // namespace

void FitOptions::validate() const {
  if (max_em_iters < 1) throw ConfigError("max_em_iters must be >= 1");
  if (!(loglik_tol > 0) || !(param_tol > 0)) throw ConfigError("tolerances must be > 0");
  if (n_random_starts < 0) throw ConfigError("n_random_starts must be >= 0");
  if (quad_points_per_dim < 0 || quad_points_per_dim == 1) {
    throw ConfigError("quad_points_per_dim must be 0 (default) or >= 2");
  }
  if (qmc_points < 1) throw ConfigError("qmc_points must be >= 1");
  if (!(support_bound > 0)) throw ConfigError("support_bound must be > 0");
}

std::vector<int> degenerate_items(const ResponseMatrix& data) {
  std::vector<int> out;
  for (std::size_t i = 0; i < data.n_items(); ++i) {
    const auto freqs = category_freqs(data, i);
    const auto used = std::count_if(freqs.begin(), freqs.end(), [](double c) { return c > 0; });
    if (used < 2) out.push_back(static_cast<int>(i));
  }
  return out;
}

Integrator integrator_for(const ModelSpec& model, const FitOptions& opts) {
  if (model.is_discrete()) return ClassSum{};
  return standard_rule(model.dims(), opts.quad_points_per_dim, opts.qmc_points, opts.seed);
}

ModelSpec apply_identifiability(ModelSpec model, Identification scheme) {
  const int dims = model.dims();
  int active = 0;
  for (int i = 0; i < model.n_items(); ++i) active += model.item_excluded(i) ? 0 : 1;
  const bool one_class = model.is_discrete() && model.n_classes() == 1;
  if (dims == 1 && active < 3 && !one_class) {
    throw ModelError("a unidimensional model needs at least 3 items to be identified (have " +
                     std::to_string(active) + ")");
  }
  model.identification = scheme;
  if (scheme == Identification::scheme1) {
    auto* normal = std::get_if<NormalLatent>(&model.latent);
    if (normal == nullptr) {
      throw ModelError("identification scheme 1 applies to Normal latents; latent-class models pin items");
    }
    normal->mean.setZero();
    normal->cov = Eigen::MatrixXd::Identity(dims, dims);
    normal->mean_free = false;
    normal->cov_free = false;
    if (dims > 1 && model.allocation.empty()) {
      int row = 0;
      for (int i = 0; i < model.n_items(); ++i) {
        if (model.item_excluded(i)) continue;
        auto& p = model.params[i];
        for (int s = row + 1; s < dims; ++s) {
          for (Eigen::Index r = 0; r < p.slopes.rows(); ++r) {
            p.slopes(r, s) = 0.0;
            p.slope_fixed(r, s) = true;
          }
        }
        ++row;
      }
    }
    return model;
  }
  for (int s = 0; s < dims; ++s) {
    auto& p = model.params[first_item_for_trait(model, s)];
    const Eigen::Index r = p.kind == ItemKind::nominal ? p.slopes.rows() - 1 : 0;
    p.slopes(r, s) = 1.0;
    p.slope_fixed(r, s) = true;
    const Eigen::Index k = p.kind == ItemKind::nominal ? p.intercepts.size() - 1 : 0;
    p.intercepts(k) = 0.0;
    p.intercept_fixed(k) = true;
    if (p.kind == ItemKind::ordinal) {
      // Keep the remaining intercepts below the pinned one.
      for (Eigen::Index m = 1; m < p.intercepts.size(); ++m) {
        if (!(p.intercepts(m) < p.intercepts(m - 1))) p.intercepts(m) = p.intercepts(m - 1) - 0.5;
      }
    }
  }
  if (auto* normal = std::get_if<NormalLatent>(&model.latent)) {
    normal->mean_free = true;
    normal->cov_free = true;
  } else {
    std::get<DiscreteLatent>(model.latent).support_free = true;
  }
  return model;
}

ModelSpec initial_normal_model(const ResponseMatrix& data, int dims, Identification scheme,
                               std::optional<StructuralModel> structural) {
  if (dims < 1) throw ModelError("dims must be >= 1");
  ModelSpec model;
  model.items = data.items();
  model.latent = NormalLatent{Eigen::VectorXd::Zero(dims), Eigen::MatrixXd::Identity(dims, dims)};
  model.structural = std::move(structural);
  const auto I = data.n_items();
  model.excluded.assign(I, false);
  for (int i : degenerate_items(data)) model.excluded[i] = true;

  Eigen::MatrixXd slopes = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(I), dims);
  if (dims > 1) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(item_correlations(data));
    const auto n = eig.eigenvalues().size();
    for (int s = 0; s < dims; ++s) {
      const double lambda = std::max(eig.eigenvalues()(n - 1 - s), 1e-3);
      Eigen::VectorXd v = eig.eigenvectors().col(n - 1 - s) * std::sqrt(lambda);
      if (v.sum() < 0) v = -v;
      slopes.col(s) = v;
    }
    for (Eigen::Index i = 0; i < slopes.rows(); ++i) {
      const double h2 = std::min(slopes.row(i).squaredNorm(), 0.9);
      slopes.row(i) = (1.7 * slopes.row(i).cwiseAbs() / std::sqrt(1.0 - h2)).cwiseMax(0.1).cwiseMin(4.0);
    }
  }

  for (std::size_t i = 0; i < I; ++i) {
    const auto& spec = model.items[i];
    auto freqs = category_freqs(data, i);
    double total = 0.0;
    for (double& f : freqs) {
      f += 0.5;
      total += f;
    }
    const Eigen::VectorXd a = slopes.row(static_cast<Eigen::Index>(i)).transpose();
    const int K = spec.categories;
    if (spec.kind == ItemKind::nominal) {
      Eigen::MatrixXd as = Eigen::MatrixXd::Zero(K, dims);
      Eigen::VectorXd ds(K);
      for (int k = 0; k < K; ++k) {
        as.row(k) = a.transpose() * (static_cast<double>(k) / (K - 1));
        ds(k) = std::log(freqs[k] / freqs[0]);
      }
      ds(0) = 0.0;
      model.params.push_back(ItemParams::nominal(as, ds));
      continue;
    }
    Eigen::VectorXd ds(K - 1);
    double above = total;
    for (int k = 1; k < K; ++k) {
      above -= freqs[k - 1];
      ds(k - 1) = clamped_logit(above / total);
      if (k > 1 && !(ds(k - 1) < ds(k - 2))) ds(k - 1) = ds(k - 2) - 0.1;
    }
    model.params.push_back(K == 2 ? ItemParams::binary(a, ds(0))
                                  : ItemParams::graded(a, ds));
  }
  return apply_identifiability(std::move(model), scheme);
}

ModelSpec latent_class_model(const std::vector<ItemSpec>& items, int classes,
                             const std::vector<int>& allocation,
                             std::optional<StructuralModel> structural,
                             const std::vector<bool>& excluded) {
  if (classes < 1) throw ModelError("need at least one class");
  if (allocation.size() != items.size()) {
    throw ModelError("allocation must assign every item to exactly one trait");
  }
  int dims = 0;
  for (int s : allocation) {
    if (s < 0) throw ModelError("allocation entries must be >= 0");
    dims = std::max(dims, s + 1);
  }
  for (int s = 0; s < dims; ++s) {
    if (std::find(allocation.begin(), allocation.end(), s) == allocation.end()) {
      throw ModelError("trait " + std::to_string(s + 1) + " has no items allocated");
    }
  }
  ModelSpec model;
  model.items = items;
  model.allocation = allocation;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].categories != 2) {
      throw ModelError("latent-class IRT items must be binary; item '" + items[i].id + "' has " +
                       std::to_string(items[i].categories) + " categories");
    }
    Eigen::VectorXd a = Eigen::VectorXd::Zero(dims);
    a(allocation[i]) = 1.0;
    auto p = ItemParams::binary(a, 0.0);
    p.slope_fixed.setConstant(true);
    if (classes > 1) p.slope_fixed(0, allocation[i]) = false;
    model.params.push_back(std::move(p));
  }
  DiscreteLatent latent;
  latent.support = Eigen::MatrixXd::Zero(classes, dims);
  latent.prior = Eigen::VectorXd::Constant(classes, 1.0 / classes);
  latent.support_free = classes > 1;
  model.latent = latent;
  model.structural = std::move(structural);
  model.excluded = excluded.empty() ? std::vector<bool>(items.size(), false) : excluded;
  if (model.excluded.size() != items.size()) throw ModelError("excluded mask size does not match items");
  if (classes == 1) {
    model.identification = Identification::scheme2;
    return model;
  }
  return apply_identifiability(std::move(model), Identification::scheme2);
}

Eigen::VectorXd pattern_logliks(const ModelSpec& model, const Eigen::VectorXd& free_params,
                                const ResponseMatrix& data, const Integrator& integrator,
                                bool collapse) {
  ModelSpec m = model;
  unpack_free(free_params, m);
  const PatternSet patterns = patterns_for(data, m, collapse);
  const LatentGrid grid = build_grid(m, patterns.group_design, integrator);
  return row_logsumexp(log_joint(m, patterns, grid));
}

}  // namespace qualirt
