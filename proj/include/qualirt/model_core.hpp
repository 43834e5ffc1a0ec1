#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "qualirt/quadrature.hpp"
#include "qualirt/structural.hpp"

namespace qualirt {

inline constexpr int kMissing = -1;

enum class ItemKind { binary, ordinal, nominal };

const char* to_string(ItemKind kind);
ItemKind item_kind_from_string(const std::string& s);

struct ItemSpec {
  std::string id;
  ItemKind kind = ItemKind::binary;
  int categories = 2;
  std::string label;
};

// N x I categorical responses. A cell is eligible iff it holds a category in
// {0..K_i-1}; ineligible cells hold kMissing.
class ResponseMatrix {
 public:
  ResponseMatrix() = default;
  ResponseMatrix(std::vector<ItemSpec> items, std::size_t n_individuals);

  // Rows are individuals; validates every code against its item.
  static ResponseMatrix from_rows(std::vector<ItemSpec> items,
                                  const std::vector<std::vector<int>>& rows);

  std::size_t n_individuals() const { return n_; }
  std::size_t n_items() const { return items_.size(); }
  const std::vector<ItemSpec>& items() const { return items_; }
  const std::vector<std::string>& individual_ids() const { return ids_; }
  void set_individual_ids(std::vector<std::string> ids);

  int response(std::size_t j, std::size_t i) const { return codes_[j * items_.size() + i]; }
  bool eligible(std::size_t j, std::size_t i) const { return response(j, i) != kMissing; }
  int n_eligible(std::size_t j) const;
  std::span<const int> row(std::size_t j) const {
    return {codes_.data() + j * items_.size(), items_.size()};
  }

  void set_response(std::size_t j, std::size_t i, int code);

  ResponseMatrix select_rows(std::span<const std::size_t> rows) const;
  ResponseMatrix select_items(std::span<const std::size_t> items) const;
  std::optional<std::size_t> item_index(const std::string& id) const;

 private:
  std::vector<ItemSpec> items_;
  std::size_t n_ = 0;
  std::vector<int> codes_;
  std::vector<std::string> ids_;
};

double logistic(double x);
double log_logistic(double x);

// Single-trait 2PL in slope/intercept form; b = -d/a.
double prob_2pl(double a, double d, double theta);
double difficulty_from_intercept(double a, double d);
double intercept_from_difficulty(double a, double b);

// Graded model: P(Y >= k) = logistic(a theta + d^k) with d^1 > d^2 > ...
double prob_graded(double a, std::span<const double> intercepts, double theta, int k);

// Nominal model; a[0] and d[0] must be zero.
double prob_nominal(std::span<const double> slopes, std::span<const double> intercepts,
                    double theta, int k);

// Trait value where categories k-1 and k are equally likely.
double nominal_crossing_point(std::span<const double> slopes, std::span<const double> intercepts,
                              int k);

// Compensatory multidimensional 2PL.
double prob_m2pl(std::span<const double> slopes, double intercept, std::span<const double> theta);

// Latent-class item: logistic(a (xi[s*] - b)) for the single allocated trait s*.
double prob_lc_item(double a, double b, std::span<const int> allocation, std::span<const double> xi);

// Parameters for one item. Slopes are stored as rows x S:
//   binary / ordinal: 1 x S, intercepts length 1 or K-1 (strictly decreasing)
//   nominal:          K x S with row 0 zero, intercepts length K with [0] = 0
struct ItemParams {
  ItemKind kind = ItemKind::binary;
  int categories = 2;
  Eigen::MatrixXd slopes;
  Eigen::VectorXd intercepts;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> slope_fixed;
  Eigen::Array<bool, Eigen::Dynamic, 1> intercept_fixed;

  static ItemParams binary(const Eigen::VectorXd& slopes, double intercept);
  // Throws ModelError unless intercepts are strictly decreasing.
  static ItemParams graded(const Eigen::VectorXd& slopes, const Eigen::VectorXd& intercepts);
  // No ordering check; for diagnostics on estimates that violate the ordinal assumption.
  static ItemParams graded_unchecked(const Eigen::VectorXd& slopes,
                                     const Eigen::VectorXd& intercepts);
  static ItemParams nominal(const Eigen::MatrixXd& slopes, const Eigen::VectorXd& intercepts);

  int dims() const { return static_cast<int>(slopes.cols()); }

  // Category log-probabilities at theta, written to out[0..K-1].
  void log_probs(const Eigen::Ref<const Eigen::VectorXd>& theta, double* out) const;
  double prob(int k, const Eigen::Ref<const Eigen::VectorXd>& theta) const;
  // E[Y | theta] with categories scored 0..K-1.
  double expected_score(const Eigen::Ref<const Eigen::VectorXd>& theta) const;
};

struct NormalLatent {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  bool mean_free = false;
  bool cov_free = false;
};

struct DiscreteLatent {
  Eigen::MatrixXd support;  // C x S
  Eigen::VectorXd prior;    // C; ignored when a class-prior structural model is present
  bool support_free = true;
};

using LatentSpec = std::variant<NormalLatent, DiscreteLatent>;

enum class Identification { scheme1, scheme2 };

struct ModelSpec {
  std::vector<ItemSpec> items;
  std::vector<ItemParams> params;
  LatentSpec latent;
  std::optional<StructuralModel> structural;
  Identification identification = Identification::scheme1;
  std::vector<int> allocation;  // trait index per item; empty for unrestricted slopes
  std::vector<bool> excluded;   // items left out of the likelihood (e.g. no variation)

  int dims() const;
  int n_items() const { return static_cast<int>(params.size()); }
  bool is_discrete() const { return std::holds_alternative<DiscreteLatent>(latent); }
  int n_classes() const;
  bool item_excluded(int i) const { return !excluded.empty() && excluded[i]; }
};

// Throws ModelError on any violated invariant (shapes, ordering, allocation,
// prior simplex, structural dimensions).
void validate(const ModelSpec& model);

// Sum over eligible cells of log P(Y_i = y_i | theta). `pattern` holds one
// code per item, kMissing for ineligible items.
double conditional_loglik(std::span<const int> pattern, const ModelSpec& model,
                          const Eigen::Ref<const Eigen::VectorXd>& theta);

struct ClassSum {};
using Integrator = std::variant<QuadratureRule, ClassSum>;

// Total marginal log-likelihood. Normal latents integrate with the rule's
// standard nodes mapped through the model's mean (or w_j gamma) and
// covariance; discrete latents sum exactly over classes.
double marginal_loglik(const ResponseMatrix& data, const ModelSpec& model,
                       const Integrator& integrator);

}  // namespace qualirt
