#include "qualirt/patterns.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>

#include "qualirt/errors.hpp"

namespace qualirt {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> design_row(const Eigen::MatrixXd& design, std::size_t j) {
  std::vector<double> row(static_cast<std::size_t>(design.cols()));
  for (Eigen::Index c = 0; c < design.cols(); ++c) row[c] = design(j, c);
  return row;
}

// Unique design rows in sorted order plus the group of every individual.
void assign_groups(const Eigen::MatrixXd& design, std::size_t n, PatternSet& out,
                   std::vector<int>& group_of) {
  std::map<std::vector<double>, int> groups;
  for (std::size_t j = 0; j < n; ++j) groups.emplace(design_row(design, j), 0);
  int g = 0;
  out.group_design.resize(static_cast<Eigen::Index>(groups.size()), design.cols());
  for (auto& [row, id] : groups) {
    id = g;
    for (std::size_t c = 0; c < row.size(); ++c) out.group_design(g, c) = row[c];
    ++g;
  }
  out.group_counts.assign(groups.size(), 0.0);
  group_of.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    group_of[j] = groups.at(design_row(design, j));
    out.group_counts[group_of[j]] += 1.0;
  }
}

void check_design(const ResponseMatrix& data, const Eigen::MatrixXd& design) {
  if (static_cast<std::size_t>(design.rows()) != data.n_individuals()) {
    throw DataError("design has " + std::to_string(design.rows()) + " rows for " +
                    std::to_string(data.n_individuals()) + " individuals");
  }
}

bool has_latent_regression(const ModelSpec& model) {
  return model.structural && std::holds_alternative<LatentRegression>(*model.structural);
}

}  // namespace

double PatternSet::total() const { return std::accumulate(counts.begin(), counts.end(), 0.0); }

PatternSet unique_patterns(const ResponseMatrix& data) {
  return unique_patterns(data, Eigen::MatrixXd(data.n_individuals(), 0));
}

PatternSet unique_patterns(const ResponseMatrix& data, const Eigen::MatrixXd& design) {
  check_design(data, design);
  PatternSet out;
  std::vector<int> group_of;
  assign_groups(design, data.n_individuals(), out, group_of);

  std::map<std::pair<int, std::vector<int>>, std::size_t> keyed;
  for (std::size_t j = 0; j < data.n_individuals(); ++j) {
    const auto r = data.row(j);
    keyed.emplace(std::make_pair(group_of[j], std::vector<int>(r.begin(), r.end())), 0);
  }
  std::size_t p = 0;
  for (auto& [key, id] : keyed) {
    id = p++;
    out.group.push_back(key.first);
    out.patterns.push_back(key.second);
  }
  out.counts.assign(out.patterns.size(), 0.0);
  out.index.resize(data.n_individuals());
  for (std::size_t j = 0; j < data.n_individuals(); ++j) {
    const auto r = data.row(j);
    const std::size_t id = keyed.at({group_of[j], std::vector<int>(r.begin(), r.end())});
    out.index[j] = id;
    out.counts[id] += 1.0;
  }
  return out;
}

PatternSet expanded_patterns(const ResponseMatrix& data, const Eigen::MatrixXd& design) {
  check_design(data, design);
  PatternSet out;
  std::vector<int> group_of;
  assign_groups(design, data.n_individuals(), out, group_of);
  for (std::size_t j = 0; j < data.n_individuals(); ++j) {
    const auto r = data.row(j);
    out.patterns.emplace_back(r.begin(), r.end());
    out.group.push_back(group_of[j]);
    out.counts.push_back(1.0);
    out.index.push_back(j);
  }
  return out;
}

PatternSet patterns_for(const ResponseMatrix& data, const ModelSpec& model, bool collapse) {
  if (static_cast<int>(data.n_items()) != model.n_items()) {
    throw ModelError("data has " + std::to_string(data.n_items()) + " items, model has " +
                     std::to_string(model.n_items()));
  }
  const Eigen::MatrixXd design =
      model.structural ? design_of(*model.structural) : Eigen::MatrixXd(data.n_individuals(), 0);
  return collapse ? unique_patterns(data, design) : expanded_patterns(data, design);
}

LatentGrid build_grid(const ModelSpec& model, const Eigen::MatrixXd& group_design,
                      const Integrator& integrator) {
  LatentGrid grid;
  const auto n_groups = static_cast<std::size_t>(group_design.rows());
  if (const auto* normal = std::get_if<NormalLatent>(&model.latent)) {
    const auto* rule = std::get_if<QuadratureRule>(&integrator);
    if (rule == nullptr) throw ModelError("a Normal latent needs a quadrature rule");
    if (rule->standard.cols() != model.dims()) {
      throw ModelError("quadrature dimension does not match the latent dimension");
    }
    const Eigen::MatrixXd chol = checked_cholesky(normal->cov);
    const Eigen::MatrixXd mapped = rule->standard * chol.transpose();
    const Eigen::VectorXd log_w = rule->weights.array().log();
    const auto* regression =
        model.structural ? std::get_if<LatentRegression>(&*model.structural) : nullptr;
    for (std::size_t g = 0; g < n_groups; ++g) {
      Eigen::VectorXd mean = normal->mean;
      if (regression != nullptr) mean = (group_design.row(g) * regression->gamma).transpose();
      grid.nodes.push_back(mapped.rowwise() + mean.transpose());
      grid.log_weights.push_back(log_w);
    }
    return grid;
  }
  const auto& discrete = std::get<DiscreteLatent>(model.latent);
  for (std::size_t g = 0; g < n_groups; ++g) {
    grid.nodes.push_back(discrete.support);
    if (!model.structural) {
      grid.log_weights.push_back(discrete.prior.array().log());
      continue;
    }
    const Eigen::RowVectorXd w = group_design.row(g);
    grid.log_weights.push_back(std::visit(
        [&](const auto& s) -> Eigen::VectorXd {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, LatentRegression>) {
            throw ModelError("latent regression requires a Normal latent");
          } else {
            return log_prior_class_probs(s, w);
          }
        },
        *model.structural));
  }
  return grid;
}

std::vector<Eigen::MatrixXd> item_log_prob_tables(const ModelSpec& model, const LatentGrid& grid,
                                                  std::vector<int>& offsets) {
  offsets.assign(model.n_items() + 1, 0);
  for (int i = 0; i < model.n_items(); ++i) offsets[i + 1] = offsets[i] + model.params[i].categories;
  const bool shared = !has_latent_regression(model);
  std::vector<Eigen::MatrixXd> tables;
  tables.reserve(grid.nodes.size());
  std::vector<double> lp;
  for (std::size_t g = 0; g < grid.nodes.size(); ++g) {
    if (shared && g > 0) {
      tables.push_back(tables.front());
      continue;
    }
    const Eigen::MatrixXd& nodes = grid.nodes[g];
    Eigen::MatrixXd table(nodes.rows(), offsets.back());
    for (int i = 0; i < model.n_items(); ++i) {
      const auto& p = model.params[i];
      lp.resize(p.categories);
      for (Eigen::Index q = 0; q < nodes.rows(); ++q) {
        p.log_probs(nodes.row(q).transpose(), lp.data());
        for (int k = 0; k < p.categories; ++k) table(q, offsets[i] + k) = lp[k];
      }
    }
    tables.push_back(std::move(table));
  }
  return tables;
}

Eigen::MatrixXd log_joint(const ModelSpec& model, const PatternSet& patterns,
                          const LatentGrid& grid) {
  std::vector<int> offsets;
  const auto tables = item_log_prob_tables(model, grid, offsets);
  Eigen::MatrixXd out(patterns.size(), grid.size());
  for (int p = 0; p < patterns.size(); ++p) {
    const int g = patterns.group[p];
    Eigen::VectorXd acc = grid.log_weights[g];
    const auto& y = patterns.patterns[p];
    for (int i = 0; i < model.n_items(); ++i) {
      if (y[i] == kMissing || model.item_excluded(i)) continue;
      acc += tables[g].col(offsets[i] + y[i]);
    }
    out.row(p) = acc.transpose();
  }
  return out;
}

Eigen::VectorXd row_logsumexp(const Eigen::MatrixXd& m) {
  Eigen::VectorXd out(m.rows());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double top = m.row(r).maxCoeff();
    if (top == kNegInf) {
      out(r) = kNegInf;
      continue;
    }
    out(r) = top + std::log((m.row(r).array() - top).exp().sum());
  }
  return out;
}

Eigen::MatrixXd posterior_weights(const Eigen::MatrixXd& log_joint, const Eigen::VectorXd& lse) {
  Eigen::MatrixXd post(log_joint.rows(), log_joint.cols());
  for (Eigen::Index r = 0; r < log_joint.rows(); ++r) {
    if (!std::isfinite(lse(r))) {
      throw NumericalError("zero posterior mass for response pattern " + std::to_string(r));
    }
    post.row(r) = (log_joint.row(r).array() - lse(r)).exp();
  }
  return post;
}

}  // namespace qualirt
