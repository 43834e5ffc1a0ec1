#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qualirt/estimation.hpp"
#include "qualirt/matching.hpp"
#include "qualirt/model_core.hpp"

namespace qualirt {

// Item declarations: CSV with header item_id,kind,categories[,label].
std::vector<ItemSpec> load_items(const std::string& path);
void save_items(const std::string& path, const std::vector<ItemSpec>& items);

// Raw response codes as written in the long file, "NA" for not applicable.
// Individuals appear in order of first mention; absent (individual, item)
// rows read as "NA".
struct RawResponses {
  std::vector<std::string> individual_ids;
  std::vector<std::string> item_ids;
  std::vector<std::vector<std::string>> codes;  // N x I
  std::vector<std::vector<int>> lines;           // source line per cell, 0 if absent
  std::string source;
};

// Columns individual_id,item_id,response. Errors carry line numbers.
RawResponses load_raw_responses(const std::string& path, const std::vector<ItemSpec>& items);

// Codes must be category indices 0..K-1 or "NA".
ResponseMatrix to_response_matrix(const RawResponses& raw, const std::vector<ItemSpec>& items);

struct CohortPaths {
  std::string items;
  std::string responses;
  std::string covariates;  // optional: individual_id,covariate,value
  std::string groups;      // optional: individual_id,group
};

struct Cohort {
  ResponseMatrix responses;
  CovariateTable covariates;  // rows aligned with responses
};

Cohort load_cohort(const CohortPaths& paths);
void save_cohort(const CohortPaths& paths, const Cohort& cohort);

// A covariate-only table keyed by the given individual ids. Missing
// (individual, covariate) pairs read as "NA".
CovariateTable load_covariates(const std::string& covariates_path, const std::string& groups_path,
                               const std::vector<std::string>& ids);

struct ScoringRule {
  std::string item_id;
  std::map<std::string, std::optional<double>> score;  // nullopt: not applicable
  std::map<std::string, std::string> meaning;
};

// Columns item_id,code,score,meaning; score "NA" marks the cell ineligible.
std::vector<ScoringRule> load_scoring_rules(const std::string& path);
void save_scoring_rules(const std::string& path, const std::vector<ScoringRule>& rules);

// Code k scores k for k = 0..K-1; "NA" is not applicable.
std::vector<ScoringRule> identity_rules(const std::vector<ItemSpec>& items);

// N x I numeric scores with NaN for not-applicable cells. Throws DataError for
// any code its rule does not cover or any item without a rule.
Eigen::MatrixXd apply_scoring_rules(const RawResponses& raw, const std::vector<ScoringRule>& rules);
Eigen::MatrixXd apply_scoring_rules(const ResponseMatrix& data, const std::vector<ScoringRule>& rules);

struct CollapseResult {
  ResponseMatrix data;
  std::vector<std::string> log;
  std::vector<std::string> eliminated;
  // Per input item: new category for each old category, empty if eliminated.
  std::vector<std::vector<int>> category_map;
};

// Categories seen in fewer than `threshold` of an item's eligible responses
// are merged into the adjacent category with the higher frequency (ordinal,
// binary) or into the modal category (nominal). Items left with one category
// are eliminated; items left with two become binary.
CollapseResult collapse_rare(const ResponseMatrix& data, double threshold = 0.02);

// New item taking the maximum eligible code of its sources; not applicable
// when every source is. Sources are removed.
struct ItemMerge {
  std::vector<std::string> sources;
  std::string id;
  std::string label;
};
ResponseMatrix merge_items(const ResponseMatrix& data, const ItemMerge& merge);

struct SimCovariate {
  std::string name;
  std::vector<std::string> levels;  // empty: numeric
  Eigen::MatrixXd level_probs;      // G x L for categorical covariates
  Eigen::VectorXd mean;             // G, numeric covariates
  Eigen::VectorXd sd;               // G, numeric covariates
  // Effect on the latent: Normal models shift trait means (D = S), class
  // models shift class log-priors (D = C). L x D for categorical, 1 x D per
  // unit for numeric. Empty means no effect.
  Eigen::MatrixXd effect;
};

struct SimulationSpec {
  ModelSpec model;  // no structural part; group and covariate effects come from here
  std::size_t n = 0;
  std::vector<std::string> groups;
  std::vector<double> group_share;  // sums to 1
  Eigen::MatrixXd group_effect;     // G x D, same convention as SimCovariate::effect
  std::vector<SimCovariate> covariates;
  std::vector<double> eligibility;  // per item probability of eligibility; empty = 1
  std::uint64_t seed = 1;
};

struct SimulationTruth {
  std::vector<int> group;
  Eigen::MatrixXd theta;    // N x S drawn traits (class support for class models)
  std::vector<int> klass;   // class models: drawn class, otherwise empty
};

struct SimulatedCohort {
  Cohort cohort;
  SimulationTruth truth;
};

SimulatedCohort simulate_cohort(const SimulationSpec& spec);

struct LoadedModel {
  FitResult fit;
  std::vector<std::string> warnings;
};

inline constexpr int kModelSchemaVersion = 1;

std::string model_to_json(const FitResult& fit);
// Throws DataError on parse failure or unsupported schema version.
LoadedModel model_from_json(const std::string& text);
void save_model(const std::string& path, const FitResult& fit);
LoadedModel load_model(const std::string& path);

// Plain CSV helpers. Numbers are written with 17 significant digits.
std::string format_double(double x);
std::vector<std::vector<std::string>> read_csv(const std::string& path);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

}  // namespace qualirt
