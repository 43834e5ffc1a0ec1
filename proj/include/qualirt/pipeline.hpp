#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qualirt/data_io.hpp"
#include "qualirt/estimation.hpp"
#include "qualirt/matching.hpp"

namespace qualirt {

using Json = nlohmann::json;

// Built-in desk-scale configuration: a simulated cohort of 930 individuals in
// three groups answering eight binary items, matched to a 240-person template.
Json default_config();

// Reads a JSON file and merges it over the defaults. Throws ConfigError.
Json load_config(const std::string& path);

// "a.b.c=value"; value is parsed as JSON when possible, else kept as a string.
void apply_override(Json& config, const std::string& assignment);

// FNV-1a of the canonical serialisation without "out" and "threads", as 16
// hex digits.
std::string config_hash(const Json& config);

struct PipelineConfig {
  Json raw;
  std::uint64_t seed = 1;
  std::string out = "qualirt-out";
  int threads = 1;

  SimulationSpec simulation;
  std::string heldout_item;
  std::map<std::string, int> simulated_allocation;  // item -> trait

  CohortPaths input;  // defaults to the simulated cohort under `out`
  std::string scoring_rules;
  double collapse_threshold = 0.02;
  std::vector<ItemMerge> merges;

  std::vector<std::string> match_exclude;
  std::vector<std::string> match_covariates;  // empty: all remaining
  int template_size = 240;
  int per_group = 80;
  SlackMode slack_mode = SlackMode::soft;
  int hard_bound = 0;
  long node_limit = 200000;
  double time_limit_seconds = 60.0;
  bool fit_on_matched = true;

  std::string family = "latent_class";   // or "normal"
  std::vector<int> efa_dims;             // exploratory Normal fits
  int c_min = 1, c_max = 4;
  std::optional<int> fixed_classes;      // skips BIC selection
  bool allocation_from_efa = false;
  int efa_allocation_dims = 2;
  std::map<std::string, int> allocation;  // item -> trait (0-based)
  int normal_dims = 1;                    // latent regression for family "normal"
  std::string class_prior = "multinomial";  // or "cumulative"
  bool standard_errors = true;
  FitOptions fit;

  std::string reference_group;  // empty: last group in sorted order
};

// Validates and converts; throws ConfigError with the offending key.
PipelineConfig parse_config(const Json& config);

// Stage seeds derive from the root seed by name.
std::uint64_t stage_seed(const PipelineConfig& cfg, const std::string& stage);

void cmd_simulate(const PipelineConfig& cfg);
void cmd_preprocess(const PipelineConfig& cfg);
void cmd_match(const PipelineConfig& cfg);
void cmd_fit(const PipelineConfig& cfg);
void cmd_disparity(const PipelineConfig& cfg);
// Returns the number of missing inputs; the report is written regardless.
int cmd_report(const PipelineConfig& cfg);
// simulate (when the input is the simulated cohort), preprocess, match, fit,
// disparity, report.
int cmd_run(const PipelineConfig& cfg);

}  // namespace qualirt
