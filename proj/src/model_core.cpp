#include "qualirt/model_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "qualirt/errors.hpp"
#include "qualirt/patterns.hpp"

namespace qualirt {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log(sigmoid(a) - sigmoid(b)), a > b.
double log_logistic_diff(double a, double b) {
  if (!(a > b)) return a == b ? kNegInf : std::numeric_limits<double>::quiet_NaN();
  return log_logistic(a) + log_logistic(-b) + std::log1p(-std::exp(b - a));
}

void check_category(int k, int categories) {
  if (k < 0 || k >= categories) {
    throw ModelError("category " + std::to_string(k) + " outside 0.." +
                     std::to_string(categories - 1));
  }
}

void require_strictly_decreasing(std::span<const double> d) {
  for (std::size_t k = 1; k < d.size(); ++k) {
    if (!(d[k] < d[k - 1])) {
      throw ModelError("graded intercepts must be strictly decreasing (d^" + std::to_string(k) +
                       " >= d^" + std::to_string(k + 1) + " fails)");
    }
  }
}

}  // namespace

const char* to_string(ItemKind kind) {
  switch (kind) {
    case ItemKind::binary: return "binary";
    case ItemKind::ordinal: return "ordinal";
    case ItemKind::nominal: return "nominal";
  }
  return "?";
}

ItemKind item_kind_from_string(const std::string& s) {
  if (s == "binary") return ItemKind::binary;
  if (s == "ordinal" || s == "graded") return ItemKind::ordinal;
  if (s == "nominal") return ItemKind::nominal;
  throw DataError("unknown item kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// ResponseMatrix

ResponseMatrix::ResponseMatrix(std::vector<ItemSpec> items, std::size_t n_individuals)
    : items_(std::move(items)), n_(n_individuals), codes_(n_individuals * items_.size(), kMissing) {
  for (const auto& item : items_) {
    if (item.categories < 2) throw ModelError("item '" + item.id + "' needs at least 2 categories");
    if (item.kind == ItemKind::binary && item.categories != 2) {
      throw ModelError("binary item '" + item.id + "' must have exactly 2 categories");
    }
  }
  ids_.reserve(n_);
  for (std::size_t j = 0; j < n_; ++j) ids_.push_back(std::to_string(j + 1));
}

ResponseMatrix ResponseMatrix::from_rows(std::vector<ItemSpec> items,
                                         const std::vector<std::vector<int>>& rows) {
  ResponseMatrix m(std::move(items), rows.size());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    if (rows[j].size() != m.n_items()) {
      throw DataError("row " + std::to_string(j) + " has " + std::to_string(rows[j].size()) +
                      " responses, expected " + std::to_string(m.n_items()));
    }
    for (std::size_t i = 0; i < rows[j].size(); ++i) m.set_response(j, i, rows[j][i]);
  }
  return m;
}

void ResponseMatrix::set_individual_ids(std::vector<std::string> ids) {
  if (ids.size() != n_) throw DataError("individual id count does not match rows");
  ids_ = std::move(ids);
}

int ResponseMatrix::n_eligible(std::size_t j) const {
  const auto r = row(j);
  return static_cast<int>(std::count_if(r.begin(), r.end(), [](int c) { return c != kMissing; }));
}

void ResponseMatrix::set_response(std::size_t j, std::size_t i, int code) {
  if (j >= n_ || i >= items_.size()) throw DataError("response index out of range");
  if (code != kMissing && (code < 0 || code >= items_[i].categories)) {
    throw DataError("response " + std::to_string(code) + " for item '" + items_[i].id +
                    "' outside 0.." + std::to_string(items_[i].categories - 1));
  }
  codes_[j * items_.size() + i] = code;
}

ResponseMatrix ResponseMatrix::select_rows(std::span<const std::size_t> rows) const {
  ResponseMatrix out(items_, rows.size());
  std::vector<std::string> ids;
  ids.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = row(rows[r]);
    std::copy(src.begin(), src.end(), out.codes_.begin() + r * items_.size());
    ids.push_back(ids_[rows[r]]);
  }
  out.ids_ = std::move(ids);
  return out;
}

ResponseMatrix ResponseMatrix::select_items(std::span<const std::size_t> items) const {
  std::vector<ItemSpec> specs;
  for (auto i : items) specs.push_back(items_.at(i));
  ResponseMatrix out(std::move(specs), n_);
  for (std::size_t j = 0; j < n_; ++j) {
    for (std::size_t c = 0; c < items.size(); ++c) {
      out.codes_[j * items.size() + c] = response(j, items[c]);
    }
  }
  out.ids_ = ids_;
  return out;
}

std::optional<std::size_t> ResponseMatrix::item_index(const std::string& id) const {
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].id == id) return i;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Scalar item response functions

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_logistic(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

double prob_2pl(double a, double d, double theta) { return logistic(a * theta + d); }

double difficulty_from_intercept(double a, double d) {
  if (a == 0.0) throw ModelError("difficulty undefined for a zero slope");
  return -d / a;
}

double intercept_from_difficulty(double a, double b) { return -a * b; }

double prob_graded(double a, std::span<const double> intercepts, double theta, int k) {
  require_strictly_decreasing(intercepts);
  const int categories = static_cast<int>(intercepts.size()) + 1;
  check_category(k, categories);
  auto at_least = [&](int c) {
    if (c <= 0) return 1.0;
    if (c >= categories) return 0.0;
    return logistic(a * theta + intercepts[c - 1]);
  };
  return at_least(k) - at_least(k + 1);
}

double prob_nominal(std::span<const double> slopes, std::span<const double> intercepts,
                    double theta, int k) {
  if (slopes.size() != intercepts.size() || slopes.size() < 2) {
    throw ModelError("nominal item needs matching slope/intercept vectors of length >= 2");
  }
  if (slopes[0] != 0.0 || intercepts[0] != 0.0) {
    throw ModelError("nominal item: category 0 parameters must be zero");
  }
  check_category(k, static_cast<int>(slopes.size()));
  double top = -std::numeric_limits<double>::infinity();
  std::vector<double> z(slopes.size());
  for (std::size_t c = 0; c < slopes.size(); ++c) {
    z[c] = slopes[c] * theta + intercepts[c];
    top = std::max(top, z[c]);
  }
  double denom = 0.0;
  for (double v : z) denom += std::exp(v - top);
  return std::exp(z[k] - top) / denom;
}

double nominal_crossing_point(std::span<const double> slopes, std::span<const double> intercepts,
                              int k) {
  if (slopes.size() != intercepts.size()) throw ModelError("nominal: slope/intercept size mismatch");
  if (k < 1 || k >= static_cast<int>(slopes.size())) {
    throw ModelError("nominal_crossing_point: k must be in 1..K-1");
  }
  const double da = slopes[k] - slopes[k - 1];
  if (da == 0.0) {
    throw ModelError("nominal_crossing_point: adjacent categories " + std::to_string(k - 1) +
                     " and " + std::to_string(k) + " have equal slopes; no crossing exists");
  }
  return (intercepts[k - 1] - intercepts[k]) / da;
}

double prob_m2pl(std::span<const double> slopes, double intercept, std::span<const double> theta) {
  if (slopes.size() != theta.size()) {
    throw ModelError("prob_m2pl: " + std::to_string(slopes.size()) + " slopes for a " +
                     std::to_string(theta.size()) + "-dimensional trait");
  }
  double eta = intercept;
  for (std::size_t s = 0; s < slopes.size(); ++s) eta += slopes[s] * theta[s];
  return logistic(eta);
}

double prob_lc_item(double a, double b, std::span<const int> allocation, std::span<const double> xi) {
  if (allocation.size() != xi.size()) throw ModelError("prob_lc_item: allocation/support size mismatch");
  int chosen = -1;
  for (std::size_t s = 0; s < allocation.size(); ++s) {
    if (allocation[s] != 0 && allocation[s] != 1) throw ModelError("allocation entries must be 0/1");
    if (allocation[s] == 1) {
      if (chosen >= 0) throw ModelError("allocation is not one-hot: item loads on several traits");
      chosen = static_cast<int>(s);
    }
  }
  if (chosen < 0) throw ModelError("allocation is not one-hot: item loads on no trait");
  return logistic(a * (xi[chosen] - b));
}

// ---------------------------------------------------------------------------
// ItemParams

namespace {

ItemParams make_params(ItemKind kind, int categories, Eigen::MatrixXd slopes,
                       Eigen::VectorXd intercepts) {
  ItemParams p;
  p.kind = kind;
  p.categories = categories;
  p.slopes = std::move(slopes);
  p.intercepts = std::move(intercepts);
  p.slope_fixed = decltype(p.slope_fixed)::Constant(p.slopes.rows(), p.slopes.cols(), false);
  p.intercept_fixed = decltype(p.intercept_fixed)::Constant(p.intercepts.size(), false);
  if (kind == ItemKind::nominal) {
    p.slope_fixed.row(0).setConstant(true);
    p.intercept_fixed(0) = true;
  }
  return p;
}

}  // namespace

ItemParams ItemParams::binary(const Eigen::VectorXd& slopes, double intercept) {
  Eigen::VectorXd d(1);
  d(0) = intercept;
  return make_params(ItemKind::binary, 2, slopes.transpose(), d);
}

ItemParams ItemParams::graded(const Eigen::VectorXd& slopes, const Eigen::VectorXd& intercepts) {
  require_strictly_decreasing({intercepts.data(), static_cast<std::size_t>(intercepts.size())});
  return graded_unchecked(slopes, intercepts);
}

ItemParams ItemParams::graded_unchecked(const Eigen::VectorXd& slopes,
                                        const Eigen::VectorXd& intercepts) {
  if (intercepts.size() < 1) throw ModelError("graded item needs at least one intercept");
  const int categories = static_cast<int>(intercepts.size()) + 1;
  return make_params(categories == 2 ? ItemKind::binary : ItemKind::ordinal, categories,
                     slopes.transpose(), intercepts);
}

ItemParams ItemParams::nominal(const Eigen::MatrixXd& slopes, const Eigen::VectorXd& intercepts) {
  if (slopes.rows() != intercepts.size() || slopes.rows() < 2) {
    throw ModelError("nominal item needs K x S slopes and K intercepts, K >= 2");
  }
  if (!slopes.row(0).isZero(0.0) || intercepts(0) != 0.0) {
    throw ModelError("nominal item: category 0 parameters must be zero");
  }
  return make_params(ItemKind::nominal, static_cast<int>(slopes.rows()), slopes, intercepts);
}

void ItemParams::log_probs(const Eigen::Ref<const Eigen::VectorXd>& theta, double* out) const {
  if (kind == ItemKind::nominal) {
    double top = kNegInf;
    for (int k = 0; k < categories; ++k) {
      out[k] = slopes.row(k).dot(theta) + intercepts(k);
      top = std::max(top, out[k]);
    }
    double denom = 0.0;
    for (int k = 0; k < categories; ++k) denom += std::exp(out[k] - top);
    const double lse = top + std::log(denom);
    for (int k = 0; k < categories; ++k) out[k] -= lse;
    return;
  }
  const double base = slopes.row(0).dot(theta);
  if (categories == 2) {
    const double eta = base + intercepts(0);
    out[0] = log_logistic(-eta);
    out[1] = log_logistic(eta);
    return;
  }
  out[0] = log_logistic(-(base + intercepts(0)));
  for (int k = 1; k < categories - 1; ++k) {
    out[k] = log_logistic_diff(base + intercepts(k - 1), base + intercepts(k));
  }
  out[categories - 1] = log_logistic(base + intercepts(categories - 2));
}

double ItemParams::prob(int k, const Eigen::Ref<const Eigen::VectorXd>& theta) const {
  check_category(k, categories);
  std::vector<double> lp(categories);
  log_probs(theta, lp.data());
  return std::exp(lp[k]);
}

double ItemParams::expected_score(const Eigen::Ref<const Eigen::VectorXd>& theta) const {
  std::vector<double> lp(categories);
  log_probs(theta, lp.data());
  double e = 0.0;
  for (int k = 1; k < categories; ++k) e += k * std::exp(lp[k]);
  return e;
}

// ---------------------------------------------------------------------------
// ModelSpec

int ModelSpec::dims() const {
  return std::visit(
      [](const auto& l) -> int {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, NormalLatent>) {
          return static_cast<int>(l.mean.size());
        } else {
          return static_cast<int>(l.support.cols());
        }
      },
      latent);
}

int ModelSpec::n_classes() const {
  if (const auto* d = std::get_if<DiscreteLatent>(&latent)) return static_cast<int>(d->support.rows());
  return 0;
}

void validate(const ModelSpec& model) {
  const int dims = model.dims();
  if (dims < 1) throw ModelError("model needs at least one latent trait");
  if (model.items.size() != model.params.size()) {
    throw ModelError("model has " + std::to_string(model.items.size()) + " item specs but " +
                     std::to_string(model.params.size()) + " parameter blocks");
  }
  if (!model.excluded.empty() && model.excluded.size() != model.params.size()) {
    throw ModelError("excluded mask size does not match items");
  }
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const auto& p = model.params[i];
    const auto& spec = model.items[i];
    const std::string tag = "item '" + spec.id + "': ";
    if (p.categories != spec.categories) throw ModelError(tag + "category count mismatch");
    if (p.slopes.cols() != dims) throw ModelError(tag + "slope dimension does not match latent");
    if (p.kind == ItemKind::nominal) {
      if (p.slopes.rows() != p.categories || p.intercepts.size() != p.categories) {
        throw ModelError(tag + "nominal parameter shape");
      }
      if (!p.slopes.row(0).isZero(0.0) || p.intercepts(0) != 0.0) {
        throw ModelError(tag + "nominal category-0 parameters must be zero");
      }
    } else {
      if (p.slopes.rows() != 1 || p.intercepts.size() != p.categories - 1) {
        throw ModelError(tag + "graded/binary parameter shape");
      }
      require_strictly_decreasing({p.intercepts.data(), static_cast<std::size_t>(p.intercepts.size())});
    }
  }
  if (!model.allocation.empty()) {
    if (model.allocation.size() != model.params.size()) {
      throw ModelError("allocation must assign every item to exactly one trait");
    }
    for (int s : model.allocation) {
      if (s < 0 || s >= dims) throw ModelError("allocation references trait " + std::to_string(s));
    }
  }
  if (const auto* n = std::get_if<NormalLatent>(&model.latent)) {
    if (n->cov.rows() != dims || n->cov.cols() != dims) throw ModelError("covariance shape");
  } else {
    const auto& d = std::get<DiscreteLatent>(model.latent);
    if (d.support.rows() < 1) throw ModelError("discrete latent needs at least one class");
    const bool class_structural =
        model.structural && !std::holds_alternative<LatentRegression>(*model.structural);
    if (!class_structural) {
      if (d.prior.size() != d.support.rows()) throw ModelError("prior length does not match classes");
      if ((d.prior.array() < 0.0).any() || std::abs(d.prior.sum() - 1.0) > 1e-9) {
        throw ModelError("class prior must be nonnegative and sum to 1");
      }
    }
  }
  if (model.structural) {
    const int classes = model.n_classes();
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, LatentRegression>) {
            if (model.is_discrete()) throw ModelError("latent regression requires a Normal latent");
            if (s.gamma.cols() != dims || s.gamma.rows() != s.design.cols()) {
              throw ModelError("latent regression gamma must be q x S");
            }
          } else if constexpr (std::is_same_v<T, MultinomialLogit>) {
            if (!model.is_discrete()) throw ModelError("multinomial class prior requires a discrete latent");
            if (n_classes(s) != classes || s.gamma.rows() != s.design.cols()) {
              throw ModelError("multinomial gamma must be q x (C-1)");
            }
          } else {
            if (!model.is_discrete()) throw ModelError("cumulative class prior requires a discrete latent");
            if (dims > 1) throw ModelError("cumulative logit prior needs a unidimensional latent");
            if (n_classes(s) != classes || s.gamma.size() != s.design.cols()) {
              throw ModelError("cumulative logit shape does not match classes/design");
            }
            for (Eigen::Index c = 1; c < s.cutpoints.size(); ++c) {
              if (!(s.cutpoints(c) > s.cutpoints(c - 1))) throw ModelError("cutpoints must increase");
            }
          }
        },
        *model.structural);
  }
}

double conditional_loglik(std::span<const int> pattern, const ModelSpec& model,
                          const Eigen::Ref<const Eigen::VectorXd>& theta) {
  if (static_cast<int>(pattern.size()) != model.n_items()) {
    throw ModelError("pattern length does not match model items");
  }
  double total = 0.0;
  std::vector<double> lp;
  for (int i = 0; i < model.n_items(); ++i) {
    if (pattern[i] == kMissing || model.item_excluded(i)) continue;
    const auto& p = model.params[i];
    check_category(pattern[i], p.categories);
    lp.resize(p.categories);
    p.log_probs(theta, lp.data());
    total += lp[pattern[i]];
  }
  return total;
}

double marginal_loglik(const ResponseMatrix& data, const ModelSpec& model,
                       const Integrator& integrator) {
  validate(model);
  const PatternSet patterns = patterns_for(data, model);
  const LatentGrid grid = build_grid(model, patterns.group_design, integrator);
  const Eigen::MatrixXd joint = log_joint(model, patterns, grid);
  const Eigen::VectorXd lse = row_logsumexp(joint);
  double total = 0.0;
  for (int p = 0; p < patterns.size(); ++p) {
    if (!std::isfinite(lse(p))) {
      throw NumericalError("response pattern " + std::to_string(p) +
                           " has zero probability under the model (degenerate class?)");
    }
    total += patterns.counts[p] * lse(p);
  }
  return total;
}

}  // namespace qualirt
