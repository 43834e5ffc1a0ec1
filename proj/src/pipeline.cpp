#include "qualirt/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "qualirt/diagnostics.hpp"
#include "qualirt/disparity.hpp"
#include "qualirt/errors.hpp"
#include "qualirt/rng.hpp"
#include "qualirt/scoring.hpp"

namespace qualirt {

namespace fs = std::filesystem;

namespace {

constexpr const char* kDefaultConfig = R"({
  "seed": 20231101,
  "out": "qualirt-out",
  "threads": 1,
  "simulate": {
    "n": 930,
    "family": "latent_class",
    "groups": ["Black", "Latinx", "White"],
    "shares": [0.3333333333333333, 0.3333333333333333, 0.3333333333333334],
    "classes": {"support": [[-1.5, -1.2], [0.0, 0.2], [1.5, 1.4]], "prior": [0.3, 0.4, 0.3]},
    "normal": {"cov": [[1.0, 0.4], [0.4, 1.0]]},
    "items": [
      {"id": "a", "label": "Any antipsychotic", "trait": 1, "slope": 1.6, "intercept": 0.8},
      {"id": "b", "label": "AP adherence at least 80%", "trait": 1, "slope": 1.4, "intercept": -0.3},
      {"id": "c", "label": "Ambulatory MH care", "trait": 2, "slope": 1.8, "intercept": 0.4},
      {"id": "d", "label": "No polypharmacy", "trait": 1, "slope": 1.2, "intercept": 0.5},
      {"id": "e", "label": "Any clozapine", "trait": 1, "slope": 1.5, "intercept": -0.8},
      {"id": "f", "label": "No MH hospitalization", "trait": 2, "slope": 1.6, "intercept": 1.0},
      {"id": "g", "label": "No excessive MH acute care", "trait": 2, "slope": 1.3, "intercept": 0.9},
      {"id": "h", "label": "Any psychosocial", "trait": 1, "slope": 1.4, "intercept": -0.5}
    ],
    "eligibility": {},
    "group_effect": [[0, 0, 0], [0, 0, 0], [0, 0, 0]],
    "covariates": [
      {"name": "female", "levels": ["0", "1"], "probs": [[0.52, 0.48], [0.5, 0.5], [0.58, 0.42]]},
      {"name": "age", "mean": [40, 37, 45], "sd": [12, 12, 12]},
      {"name": "index_year", "levels": ["2010", "2011", "2012"],
       "probs": [[0.5, 0.3, 0.2], [0.55, 0.25, 0.2], [0.6, 0.2, 0.2]]},
      {"name": "comorbidity", "levels": ["0", "1"], "probs": [[0.6, 0.4], [0.7, 0.3], [0.75, 0.25]],
       "effect": [[0, 0, 0], [0, -0.4, -0.8]]},
      {"name": "state", "levels": ["A", "B"], "probs": [[0.7, 0.3], [0.3, 0.7], [0.5, 0.5]]}
    ]
  },
  "input": {"items": "", "responses": "", "covariates": "", "groups": ""},
  "preprocess": {"threshold": 0.02, "heldout_item": "h", "scoring_rules": "", "merges": []},
  "match": {
    "exclude": ["state"],
    "covariates": [],
    "template_size": 240,
    "per_group": 80,
    "mode": "soft",
    "hard_bound": 0,
    "node_limit": 200000,
    "time_limit_seconds": 60
  },
  "model": {
    "family": "latent_class",
    "fit_on_matched": true,
    "efa_dims": [1, 2],
    "classes": {"min": 1, "max": 4, "fixed": null},
    "allocation": {"a": 1, "b": 1, "d": 1, "e": 1, "h": 1, "c": 2, "f": 2, "g": 2},
    "efa_allocation_dims": 2,
    "normal_dims": 1,
    "class_prior": "multinomial",
    "standard_errors": true,
    "starts": 10,
    "max_iters": 500,
    "loglik_tol": 1e-6,
    "param_tol": 1e-4,
    "quad_points": 0,
    "qmc_points": 2000
  },
  "disparity": {"reference_group": "White"}
})";

// Keys whose values are user-keyed maps or free-form.
bool free_form(const std::string& path) {
  return path == "model.allocation" || path == "simulate.eligibility" || path == "simulate.classes" ||
         path == "simulate.normal";
}

void check_unknown(const Json& user, const Json& defaults, const std::string& path) {
  if (!user.is_object() || !defaults.is_object()) return;
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    if (!free_form(key)) check_unknown(it.value(), defaults.at(it.key()), key);
  }
}

const Json& at_path(const Json& j, const std::string& path) {
  const Json* cur = &j;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!cur->is_object() || !cur->contains(part)) throw ConfigError("missing config key '" + path + "'");
    cur = &cur->at(part);
  }
  return *cur;
}

template <typename T>
T get(const Json& j, const std::string& path) {
  try {
    return at_path(j, path).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError("config key '" + path + "': " + e.what());
  }
}

Eigen::MatrixXd get_matrix(const Json& j, const std::string& path) {
  const auto rows = get<std::vector<std::vector<double>>>(j, path);
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw ConfigError("config key '" + path + "' is not rectangular");
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(r, c) = rows[r][c];
  }
  return m;
}

Eigen::VectorXd to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

SimulationSpec simulation_from(const Json& j, std::map<std::string, int>& allocation) {
  SimulationSpec spec;
  spec.n = get<std::size_t>(j, "n");
  spec.groups = get<std::vector<std::string>>(j, "groups");
  spec.group_share = get<std::vector<double>>(j, "shares");
  const std::string family = get<std::string>(j, "family");
  const Json& items = at_path(j, "items");
  if (!items.is_array() || items.empty()) throw ConfigError("simulate.items must be a non-empty list");
  int S = 0;
  for (const auto& it : items) S = std::max(S, get<int>(it, "trait"));
  if (S < 1) throw ConfigError("simulate.items traits start at 1");
  ModelSpec& m = spec.model;
  for (const auto& it : items) {
    ItemSpec item{get<std::string>(it, "id"), ItemKind::binary, 2, it.value("label", std::string())};
    const int trait = get<int>(it, "trait") - 1;
    if (trait < 0) throw ConfigError("simulate.items: trait must be at least 1");
    Eigen::VectorXd a = Eigen::VectorXd::Zero(S);
    a(trait) = get<double>(it, "slope");
    m.items.push_back(item);
    m.params.push_back(ItemParams::binary(a, get<double>(it, "intercept")));
    allocation[item.id] = trait;
  }
  int D = S;
  if (family == "latent_class") {
    const Eigen::MatrixXd support = get_matrix(j, "classes.support");
    if (support.cols() != S) throw ConfigError("simulate.classes.support needs one column per trait");
    m.latent = DiscreteLatent{support, to_vec(get<std::vector<double>>(j, "classes.prior")), true};
    D = static_cast<int>(support.rows());
  } else if (family == "normal") {
    Eigen::MatrixXd cov = get_matrix(j, "normal.cov");
    if (cov.rows() != S) {
      if (S != 1) throw ConfigError("simulate.normal.cov must be S x S");
      cov = Eigen::MatrixXd::Identity(1, 1);
    }
    m.latent = NormalLatent{Eigen::VectorXd::Zero(S), cov};
  } else {
    throw ConfigError("simulate.family must be 'latent_class' or 'normal'");
  }
  try {
    validate(m);
  } catch (const ModelError& e) {
    throw ConfigError(std::string("simulate: ") + e.what());
  }
  spec.group_effect = get_matrix(j, "group_effect");
  if (spec.group_effect.size() != 0 &&
      (spec.group_effect.rows() != static_cast<Eigen::Index>(spec.groups.size()) || spec.group_effect.cols() != D)) {
    throw ConfigError("simulate.group_effect must be groups x " + std::to_string(D));
  }
  for (const auto& c : at_path(j, "covariates")) {
    SimCovariate cov;
    cov.name = get<std::string>(c, "name");
    if (c.contains("levels")) {
      cov.levels = get<std::vector<std::string>>(c, "levels");
      cov.level_probs = get_matrix(c, "probs");
    } else {
      cov.mean = to_vec(get<std::vector<double>>(c, "mean"));
      cov.sd = to_vec(get<std::vector<double>>(c, "sd"));
    }
    if (c.contains("effect")) cov.effect = get_matrix(c, "effect");
    spec.covariates.push_back(std::move(cov));
  }
  const Json& elig = at_path(j, "eligibility");
  if (!elig.empty()) {
    spec.eligibility.assign(m.items.size(), 1.0);
    for (auto it = elig.begin(); it != elig.end(); ++it) {
      auto pos = std::find_if(m.items.begin(), m.items.end(), [&](const ItemSpec& s) { return s.id == it.key(); });
      if (pos == m.items.end()) throw ConfigError("simulate.eligibility: unknown item '" + it.key() + "'");
      spec.eligibility[pos - m.items.begin()] = it.value().get<double>();
    }
  }
  return spec;
}

fs::path out_path(const PipelineConfig& cfg, const std::string& rel) { return fs::path(cfg.out) / rel; }

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw DataError("cannot create directory '" + p.string() + "': " + ec.message());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string s;
  for (const auto& l : lines) s += l + "\n";
  return s;
}

CohortPaths input_paths(const PipelineConfig& cfg) {
  CohortPaths p = cfg.input;
  const fs::path dir = out_path(cfg, "cohort");
  if (p.items.empty()) p.items = (dir / "items.csv").string();
  if (p.responses.empty()) p.responses = (dir / "responses.csv").string();
  if (p.covariates.empty()) p.covariates = (dir / "covariates.csv").string();
  if (p.groups.empty()) p.groups = (dir / "groups.csv").string();
  return p;
}

std::string fmt(double x) { return format_double(x); }

FitOptions fit_options(const PipelineConfig& cfg, const std::string& stage) {
  FitOptions o = cfg.fit;
  o.seed = stage_seed(cfg, stage);
  return o;
}

// Preprocessed responses, restricted to the matched sample when configured,
// plus each individual's group and held-out response.
struct AnalysisData {
  ResponseMatrix data;
  std::vector<std::string> groups;
  std::vector<int> heldout;
  bool has_heldout = false;
};

AnalysisData analysis_data(const PipelineConfig& cfg) {
  const fs::path pre = out_path(cfg, "preprocess");
  CohortPaths p{(pre / "items.csv").string(), (pre / "responses.csv").string(), "", ""};
  if (!fs::exists(p.items)) throw DataError("missing '" + p.items + "'; run preprocess first");
  Cohort cohort = load_cohort(p);
  ResponseMatrix data = std::move(cohort.responses);
  if (!cfg.heldout_item.empty() && data.item_index(cfg.heldout_item)) {
    throw DataError("held-out item '" + cfg.heldout_item + "' is present in the fitted item list");
  }
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t j = 0; j < data.n_individuals(); ++j) row_of.emplace(data.individual_ids()[j], j);

  std::vector<std::size_t> rows;
  if (cfg.fit_on_matched) {
    const fs::path matched = out_path(cfg, "match/matched.csv");
    if (!fs::exists(matched)) throw DataError("missing '" + matched.string() + "'; run match first");
    const auto csv = read_csv(matched.string());
    for (std::size_t r = 1; r < csv.size(); ++r) {
      const auto it = row_of.find(csv[r].at(0));
      if (it == row_of.end()) throw DataError("matched individual '" + csv[r].at(0) + "' has no responses");
      rows.push_back(it->second);
    }
  } else {
    for (std::size_t j = 0; j < data.n_individuals(); ++j) rows.push_back(j);
  }
  AnalysisData out;
  out.data = data.select_rows(rows);

  const CohortPaths in = input_paths(cfg);
  const CovariateTable cov = load_covariates("", in.groups, data.individual_ids());
  for (std::size_t r : rows) out.groups.push_back(cov.group[r]);

  out.heldout.assign(rows.size(), kMissing);
  const fs::path held = pre / "heldout.csv";
  if (fs::exists(held)) {
    out.has_heldout = true;
    std::unordered_map<std::string, int> code;
    const auto csv = read_csv(held.string());
    for (std::size_t r = 1; r < csv.size(); ++r) {
      code[csv[r].at(0)] = csv[r].at(1) == "NA" ? kMissing : std::stoi(csv[r].at(1));
    }
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto it = code.find(out.data.individual_ids()[k]);
      if (it != code.end()) out.heldout[k] = it->second;
    }
  }
  return out;
}

// Non-reference groups in sorted order and the reference.
std::pair<std::vector<std::string>, std::string> group_contrasts(const PipelineConfig& cfg,
                                                                 const std::vector<std::string>& groups) {
  std::set<std::string> uniq(groups.begin(), groups.end());
  if (uniq.size() < 2) throw DataError("disparity estimation needs at least two groups");
  std::string ref = cfg.reference_group.empty() ? *uniq.rbegin() : cfg.reference_group;
  if (!uniq.count(ref)) throw ConfigError("reference group '" + ref + "' does not occur in the data");
  std::vector<std::string> others;
  for (const auto& g : uniq) {
    if (g != ref) others.push_back(g);
  }
  return {others, ref};
}

Eigen::MatrixXd dummies(const std::vector<std::string>& groups, const std::vector<std::string>& levels,
                        bool intercept) {
  const int off = intercept ? 1 : 0;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(groups.size()),
                                            static_cast<Eigen::Index>(levels.size()) + off);
  for (std::size_t j = 0; j < groups.size(); ++j) {
    if (intercept) w(j, 0) = 1.0;
    for (std::size_t l = 0; l < levels.size(); ++l) {
      if (groups[j] == levels[l]) w(j, l + off) = 1.0;
    }
  }
  return w;
}

double se_of(const StdErrors* se, const std::string& name) {
  if (se == nullptr) return std::nan("");
  for (std::size_t k = 0; k < se->names.size(); ++k) {
    if (se->names[k] == name) return se->se(static_cast<Eigen::Index>(k));
  }
  return std::nan("");
}

// Compact trait numbering over the items actually present.
std::vector<int> allocation_for(const ResponseMatrix& data, const std::map<std::string, int>& alloc) {
  std::vector<int> out;
  for (const auto& item : data.items()) {
    const auto it = alloc.find(item.id);
    if (it == alloc.end()) throw ConfigError("model.allocation has no trait for item '" + item.id + "'");
    out.push_back(it->second);
  }
  std::set<int> used(out.begin(), out.end());
  std::map<int, int> remap;
  for (int t : used) remap.emplace(t, static_cast<int>(remap.size()));
  for (int& t : out) t = remap.at(t);
  return out;
}

std::vector<std::string> warnings_of(const std::string& what, const FitResult& fit) {
  std::vector<std::string> out;
  for (const auto& w : fit.warnings) out.push_back(what + ": " + w);
  if (!fit.converged) out.push_back(what + ": did not converge");
  return out;
}

void write_efa(const PipelineConfig& cfg, const AnalysisData& ad, int dims, const FitResult& fit,
               std::vector<std::vector<std::string>>& summary, std::vector<std::string>& warnings) {
  const fs::path dir = out_path(cfg, "fit");
  const std::string tag = "efa_S" + std::to_string(dims);
  const ResponseMatrix& data = ad.data;
  const FitStatistics st = fit_statistics(fit);
  const M2Result m2 = rmsea_m2(data, fit);
  summary.push_back({std::to_string(dims), std::to_string(fit.n_params), fmt(fit.loglik), fmt(st.aic), fmt(st.bic),
                     m2.defined ? fmt(m2.m2) : "NA", m2.defined ? std::to_string(m2.df) : "NA",
                     m2.defined ? fmt(m2.rmsea) : "NA", fit.converged ? "1" : "0"});
  if (!m2.defined) warnings.push_back(tag + ": M2 undefined: " + m2.note);
  for (const auto& w : warnings_of(tag, fit)) warnings.push_back(w);

  LoadingMatrix lm = slopes_to_loadings(fit.model);
  if (dims > 1) lm = varimax_rotate(lm.loadings);
  std::vector<std::string> header{"item", "label"};
  for (int s = 0; s < dims; ++s) header.push_back("trait" + std::to_string(s + 1));
  std::vector<std::vector<std::string>> rows;
  for (int i = 0; i < fit.model.n_items(); ++i) {
    std::vector<std::string> row{data.items()[i].id, data.items()[i].label};
    for (int s = 0; s < dims; ++s) row.push_back(fit.model.item_excluded(i) ? "NA" : fmt(lm.loadings(i, s)));
    rows.push_back(row);
  }
  std::vector<std::string> cum{"cumulative_variance_pct", ""};
  for (int s = 0; s < dims; ++s) cum.push_back(fmt(lm.cumulative_variance_pct(s)));
  rows.push_back(cum);
  write_csv((dir / (tag + "_loadings.csv")).string(), header, rows);

  const Eigen::MatrixXd rc = residual_item_correlations(data, fit);
  header = {"item"};
  for (const auto& it : data.items()) header.push_back(it.id);
  rows.clear();
  for (int i = 0; i < rc.rows(); ++i) {
    std::vector<std::string> row{data.items()[i].id};
    for (int k = 0; k < rc.cols(); ++k) row.push_back(fmt(rc(i, k)));
    rows.push_back(row);
  }
  write_csv((dir / (tag + "_residual_correlations.csv")).string(), header, rows);

  const EapScores eaps = eap_scores(data, fit);
  rows.clear();
  for (int s = 0; s < dims; ++s) {
    if (eaps.mean.rows() < 10) break;
    const QQData qq = qq_data(eaps.mean.col(s));
    for (Eigen::Index q = 0; q < qq.theoretical.size(); ++q) {
      rows.push_back({std::to_string(s + 1), fmt(qq.theoretical(q)), fmt(qq.empirical(q))});
    }
  }
  write_csv((dir / (tag + "_qq.csv")).string(), {"trait", "theoretical", "empirical"}, rows);

  if (ad.has_heldout) {
    const HeldoutValidation v = validate_heldout(fit, data, ad.heldout);
    rows.clear();
    if (v.defined) {
      for (Eigen::Index s = 0; s < v.mean_eap_difference.size(); ++s) {
        rows.push_back({std::to_string(s + 1), fmt(v.mean_eap_difference(s))});
      }
    } else {
      warnings.push_back(tag + ": " + v.note);
    }
    write_csv((dir / (tag + "_validation.csv")).string(), {"trait", "mean_eap_success_minus_failure"}, rows);
  }
}

std::vector<int> allocation_from_loadings(const LoadingMatrix& lm) {
  std::vector<int> out;
  for (Eigen::Index i = 0; i < lm.loadings.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index s = 1; s < lm.loadings.cols(); ++s) {
      if (std::abs(lm.loadings(i, s)) > std::abs(lm.loadings(i, best))) best = s;
    }
    out.push_back(static_cast<int>(best));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report helpers

std::string short_num(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) return s;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string markdown_table(const fs::path& csv) {
  const auto rows = read_csv(csv.string());
  if (rows.empty()) return "(empty)\n";
  std::string out = "|";
  for (const auto& h : rows[0]) out += " " + h + " |";
  out += "\n|";
  for (std::size_t c = 0; c < rows[0].size(); ++c) out += " --- |";
  out += "\n";
  for (std::size_t r = 1; r < rows.size(); ++r) {
    out += "|";
    for (const auto& f : rows[r]) out += " " + short_num(f) + " |";
    out += "\n";
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

Json default_config() { return Json::parse(kDefaultConfig); }

Json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  Json user;
  try {
    user = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("config '" + path + "' does not parse: " + e.what());
  }
  if (!user.is_object()) throw ConfigError("config '" + path + "' must hold a JSON object");
  Json cfg = default_config();
  check_unknown(user, cfg, "");
  cfg.merge_patch(user);
  return cfg;
}

void apply_override(Json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::exception&) {
    value = text;
  }
  Json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = Json{{*it, patch}};
  check_unknown(patch, default_config(), "");
  // Arrays and scalars replace; merge_patch would treat null as deletion.
  Json* cur = &config;
  for (std::size_t k = 0; k + 1 < parts.size(); ++k) cur = &(*cur)[parts[k]];
  (*cur)[parts.back()] = value;
}

std::string config_hash(const Json& config) {
  Json analysis = config;
  if (analysis.is_object()) {
    analysis.erase("out");
    analysis.erase("threads");
  }
  const std::string text = analysis.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

PipelineConfig parse_config(const Json& j) {
  PipelineConfig c;
  c.raw = j;
  c.seed = get<std::uint64_t>(j, "seed");
  c.out = get<std::string>(j, "out");
  c.threads = get<int>(j, "threads");
  if (c.threads < 1) throw ConfigError("threads must be at least 1");

  c.simulation = simulation_from(at_path(j, "simulate"), c.simulated_allocation);
  c.simulation.seed = derive_seed(c.seed, std::string_view("simulate"));

  c.input = CohortPaths{get<std::string>(j, "input.items"), get<std::string>(j, "input.responses"),
                        get<std::string>(j, "input.covariates"), get<std::string>(j, "input.groups")};
  c.collapse_threshold = get<double>(j, "preprocess.threshold");
  if (!(c.collapse_threshold > 0 && c.collapse_threshold < 1)) throw ConfigError("preprocess.threshold must lie in (0, 1)");
  c.heldout_item = get<std::string>(j, "preprocess.heldout_item");
  c.scoring_rules = get<std::string>(j, "preprocess.scoring_rules");
  for (const auto& m : at_path(j, "preprocess.merges")) {
    c.merges.push_back(ItemMerge{get<std::vector<std::string>>(m, "sources"), get<std::string>(m, "id"),
                                 m.value("label", std::string())});
  }

  c.match_exclude = get<std::vector<std::string>>(j, "match.exclude");
  c.match_covariates = get<std::vector<std::string>>(j, "match.covariates");
  c.template_size = get<int>(j, "match.template_size");
  c.per_group = get<int>(j, "match.per_group");
  if (c.template_size < 1 || c.per_group < 1) throw ConfigError("match sizes must be positive");
  const auto mode = get<std::string>(j, "match.mode");
  if (mode != "soft" && mode != "hard") throw ConfigError("match.mode must be 'soft' or 'hard'");
  c.slack_mode = mode == "soft" ? SlackMode::soft : SlackMode::hard;
  c.hard_bound = get<int>(j, "match.hard_bound");
  c.node_limit = get<long>(j, "match.node_limit");
  c.time_limit_seconds = get<double>(j, "match.time_limit_seconds");

  c.family = get<std::string>(j, "model.family");
  if (c.family != "latent_class" && c.family != "normal") throw ConfigError("model.family must be 'latent_class' or 'normal'");
  c.fit_on_matched = get<bool>(j, "model.fit_on_matched");
  c.efa_dims = get<std::vector<int>>(j, "model.efa_dims");
  for (int d : c.efa_dims) {
    if (d < 1) throw ConfigError("model.efa_dims entries must be positive");
  }
  c.c_min = get<int>(j, "model.classes.min");
  c.c_max = get<int>(j, "model.classes.max");
  const Json& fixed = at_path(j, "model.classes.fixed");
  if (!fixed.is_null()) c.fixed_classes = get<int>(j, "model.classes.fixed");
  if (c.fixed_classes && *c.fixed_classes < 1) throw ConfigError("model.classes.fixed must be positive");
  if (!c.fixed_classes && (c.c_min < 1 || c.c_max < c.c_min)) throw ConfigError("model.classes needs 1 <= min <= max");
  const Json& alloc = at_path(j, "model.allocation");
  if (alloc.is_string()) {
    if (alloc.get<std::string>() != "from-efa") throw ConfigError("model.allocation must be a map or 'from-efa'");
    c.allocation_from_efa = true;
  } else {
    for (auto it = alloc.begin(); it != alloc.end(); ++it) {
      if (!it.value().is_number_integer() || it.value().get<int>() < 1) {
        throw ConfigError("model.allocation." + it.key() + " must be a trait number >= 1");
      }
      c.allocation[it.key()] = it.value().get<int>() - 1;
    }
  }
  c.efa_allocation_dims = get<int>(j, "model.efa_allocation_dims");
  c.normal_dims = get<int>(j, "model.normal_dims");
  c.class_prior = get<std::string>(j, "model.class_prior");
  if (c.class_prior != "multinomial" && c.class_prior != "cumulative") {
    throw ConfigError("model.class_prior must be 'multinomial' or 'cumulative'");
  }
  c.standard_errors = get<bool>(j, "model.standard_errors");
  c.fit.n_random_starts = get<int>(j, "model.starts");
  c.fit.max_em_iters = get<int>(j, "model.max_iters");
  c.fit.loglik_tol = get<double>(j, "model.loglik_tol");
  c.fit.param_tol = get<double>(j, "model.param_tol");
  c.fit.quad_points_per_dim = get<int>(j, "model.quad_points");
  c.fit.qmc_points = get<int>(j, "model.qmc_points");
  c.fit.validate();
  c.reference_group = get<std::string>(j, "disparity.reference_group");
  return c;
}

std::uint64_t stage_seed(const PipelineConfig& cfg, const std::string& stage) {
  return derive_seed(cfg.seed, std::string_view(stage));
}

// ---------------------------------------------------------------------------
// Stages

void cmd_simulate(const PipelineConfig& cfg) {
  const SimulatedCohort sim = simulate_cohort(cfg.simulation);
  const fs::path dir = out_path(cfg, "cohort");
  ensure_dir(dir);
  save_cohort(CohortPaths{(dir / "items.csv").string(), (dir / "responses.csv").string(),
                          (dir / "covariates.csv").string(), (dir / "groups.csv").string()},
              sim.cohort);
  const bool discrete = cfg.simulation.model.is_discrete();
  std::vector<std::string> header{"individual_id", "group"};
  if (discrete) header.push_back("class");
  for (Eigen::Index s = 0; s < sim.truth.theta.cols(); ++s) header.push_back("theta" + std::to_string(s + 1));
  std::vector<std::vector<std::string>> rows;
  for (std::size_t j = 0; j < sim.truth.group.size(); ++j) {
    std::vector<std::string> row{sim.cohort.covariates.ids[j], sim.cohort.covariates.group[j]};
    if (discrete) row.push_back(std::to_string(sim.truth.klass[j] + 1));
    for (Eigen::Index s = 0; s < sim.truth.theta.cols(); ++s) row.push_back(fmt(sim.truth.theta(j, s)));
    rows.push_back(row);
  }
  write_csv((dir / "truth.csv").string(), header, rows);
}

void cmd_preprocess(const PipelineConfig& cfg) {
  const CohortPaths in = input_paths(cfg);
  Cohort cohort = load_cohort(CohortPaths{in.items, in.responses, "", ""});
  ResponseMatrix data = std::move(cohort.responses);
  std::vector<std::string> log;
  const fs::path dir = out_path(cfg, "preprocess");
  ensure_dir(dir);

  std::vector<std::vector<std::string>> dist;
  for (std::size_t i = 0; i < data.n_items(); ++i) {
    std::vector<int> count(data.items()[i].categories, 0);
    int eligible = 0;
    for (std::size_t j = 0; j < data.n_individuals(); ++j) {
      const int k = data.response(j, i);
      if (k == kMissing) continue;
      ++count[k];
      ++eligible;
    }
    for (std::size_t k = 0; k < count.size(); ++k) {
      dist.push_back({data.items()[i].id, data.items()[i].label, std::to_string(k), std::to_string(count[k]),
                      std::to_string(eligible), eligible ? fmt(100.0 * count[k] / eligible) : "NA"});
    }
  }
  write_csv((dir / "item_distribution.csv").string(),
            {"item", "label", "category", "count", "eligible", "pct_of_eligible"}, dist);

  for (const auto& m : cfg.merges) {
    data = merge_items(data, m);
    std::string src;
    for (const auto& s : m.sources) src += (src.empty() ? "" : ",") + s;
    log.push_back("merged items {" + src + "} into " + m.id);
  }
  std::vector<std::vector<std::string>> held;
  if (!cfg.heldout_item.empty()) {
    const auto hi = data.item_index(cfg.heldout_item);
    if (!hi) throw DataError("held-out item '" + cfg.heldout_item + "' is not in the cohort");
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < data.n_items(); ++i) {
      if (i != *hi) keep.push_back(i);
    }
    for (std::size_t j = 0; j < data.n_individuals(); ++j) {
      const int k = data.response(j, *hi);
      held.push_back({data.individual_ids()[j], k == kMissing ? "NA" : std::to_string(k)});
    }
    data = data.select_items(keep);
    log.push_back("held out item " + cfg.heldout_item + " for validation");
    write_csv((dir / "heldout.csv").string(), {"individual_id", "response"}, held);
  } else {
    std::error_code ec;
    fs::remove(dir / "heldout.csv", ec);
  }
  CollapseResult collapsed = collapse_rare(data, cfg.collapse_threshold);
  for (const auto& l : collapsed.log) log.push_back(l);
  if (collapsed.data.n_items() == 0) throw DataError("preprocessing eliminated every item");
  Cohort out;
  out.responses = std::move(collapsed.data);
  save_cohort(CohortPaths{(dir / "items.csv").string(), (dir / "responses.csv").string(), "", ""}, out);
  write_text(dir / "log.txt", join_lines(log));
}

void cmd_match(const PipelineConfig& cfg) {
  const CohortPaths in = input_paths(cfg);
  const auto items = load_items(in.items);
  const RawResponses raw = load_raw_responses(in.responses, items);
  const CovariateTable table = load_covariates(in.covariates, in.groups, raw.individual_ids);
  std::vector<std::string> exclude = cfg.match_exclude;
  if (!cfg.match_covariates.empty()) {
    for (const auto& n : cfg.match_covariates) {
      if (std::find(table.names.begin(), table.names.end(), n) == table.names.end()) {
        throw DataError("matching covariate '" + n + "' is not in the covariate file");
      }
    }
    for (const auto& n : table.names) {
      if (std::find(cfg.match_covariates.begin(), cfg.match_covariates.end(), n) == cfg.match_covariates.end()) {
        exclude.push_back(n);
      }
    }
  }
  const DiscreteCovariates cov = discretize(table, exclude);
  if (cov.names.empty()) throw DataError("no covariates left to match on");
  const std::size_t N = table.ids.size();
  if (static_cast<std::size_t>(cfg.template_size) > N) {
    throw DataError("template size " + std::to_string(cfg.template_size) + " exceeds the cohort size " + std::to_string(N));
  }
  const auto tmpl = draw_template(N, static_cast<std::size_t>(cfg.template_size), stage_seed(cfg, "template"));
  const auto target = scale_counts(category_counts(cov, tmpl), cfg.per_group);

  std::set<std::string> groups(table.group.begin(), table.group.end());
  if (groups.count("")) throw DataError("every individual needs a group for matching");
  std::vector<std::vector<std::size_t>> full_cols{tmpl}, post_cols{tmpl};
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> summary;
  std::vector<std::pair<std::size_t, std::string>> matched;
  std::vector<int> n_levels;
  for (const auto& l : cov.levels) n_levels.push_back(static_cast<int>(l.size()));
  for (const auto& g : groups) {
    std::vector<std::size_t> rows;
    for (std::size_t j = 0; j < N; ++j) {
      if (table.group[j] == g) rows.push_back(j);
    }
    if (static_cast<int>(rows.size()) < cfg.per_group) {
      throw DataError("group '" + g + "' has " + std::to_string(rows.size()) + " individuals, fewer than the per-group size " +
                      std::to_string(cfg.per_group));
    }
    MatchProblem prob;
    prob.candidates.resize(static_cast<Eigen::Index>(rows.size()), cov.codes.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) prob.candidates.row(r) = cov.codes.row(rows[r]);
    prob.n_levels = n_levels;
    prob.target = target;
    prob.T = cfg.per_group;
    prob.mode = cfg.slack_mode;
    prob.hard_bound = cfg.hard_bound;
    prob.node_limit = cfg.node_limit;
    prob.time_limit_seconds = cfg.time_limit_seconds;
    const MatchResult res = cardinality_match(prob);
    std::vector<std::size_t> chosen;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (res.selected[r]) {
        chosen.push_back(rows[r]);
        matched.emplace_back(rows[r], g);
      }
    }
    names.push_back(g);
    full_cols.push_back(rows);
    post_cols.push_back(chosen);
    summary.push_back({g, std::to_string(rows.size()), std::to_string(chosen.size()), std::to_string(res.total_slack),
                       res.optimal ? "1" : "0", std::to_string(res.nodes)});
  }
  std::sort(matched.begin(), matched.end());
  const fs::path dir = out_path(cfg, "match");
  ensure_dir(dir);
  std::vector<std::vector<std::string>> rows;
  for (const auto& [r, g] : matched) rows.push_back({table.ids[r], g});
  write_csv((dir / "matched.csv").string(), {"individual_id", "group"}, rows);
  std::vector<std::string> header{"covariate", "level", "template"};
  header.insert(header.end(), names.begin(), names.end());
  auto write_balance = [&](const std::string& file, const std::vector<std::vector<std::size_t>>& cols) {
    rows.clear();
    std::vector<std::string> count_row{"number", ""};
    for (const auto& c : cols) count_row.push_back(std::to_string(c.size()));
    rows.push_back(count_row);
    for (const auto& b : balance_table(cov, cols)) {
      std::vector<std::string> row{b.covariate, b.level};
      for (double p : b.pct) row.push_back(fmt(p));
      rows.push_back(row);
    }
    write_csv((dir / file).string(), header, rows);
  };
  write_balance("balance_pre.csv", full_cols);
  write_balance("balance_post.csv", post_cols);
  write_csv((dir / "summary.csv").string(), {"group", "candidates", "selected", "total_slack", "optimal", "nodes"},
            summary);
  std::string excluded;
  for (const auto& e : exclude) excluded += (excluded.empty() ? "" : ", ") + e;
  write_text(dir / "excluded_covariates.txt", excluded + "\n");
}

void cmd_fit(const PipelineConfig& cfg) {
  const AnalysisData ad = analysis_data(cfg);
  const ResponseMatrix& data = ad.data;
  const fs::path dir = out_path(cfg, "fit");
  ensure_dir(dir);
  std::vector<std::string> warnings;
  const FitOptions opts = fit_options(cfg, "fit");

  // Exploratory Normal fits.
  std::map<int, FitResult> efa;
  std::vector<std::vector<std::string>> efa_summary;
  std::vector<int> dims_to_fit = cfg.efa_dims;
  if (cfg.family == "latent_class" && cfg.allocation_from_efa &&
      std::find(dims_to_fit.begin(), dims_to_fit.end(), cfg.efa_allocation_dims) == dims_to_fit.end()) {
    dims_to_fit.push_back(cfg.efa_allocation_dims);
  }
  if (cfg.family == "normal" &&
      std::find(dims_to_fit.begin(), dims_to_fit.end(), cfg.normal_dims) == dims_to_fit.end()) {
    dims_to_fit.push_back(cfg.normal_dims);
  }
  for (int d : dims_to_fit) {
    FitOptions o = opts;
    o.seed = derive_seed(opts.seed, static_cast<std::uint64_t>(d));
    FitResult fit = em_fit_normal(data, initial_normal_model(data, d), o);
    write_efa(cfg, ad, d, fit, efa_summary, warnings);
    efa.emplace(d, std::move(fit));
  }
  if (!efa_summary.empty()) {
    write_csv((dir / "efa_fit.csv").string(),
              {"dims", "n_params", "loglik", "aic", "bic", "m2", "m2_df", "rmsea", "converged"}, efa_summary);
  }

  if (cfg.family == "normal") {
    const FitResult& fit = efa.at(cfg.normal_dims);
    save_model((dir / "model.json").string(), fit);
    write_text(dir / "warnings.txt", join_lines(warnings));
    return;
  }

  std::vector<int> allocation;
  if (cfg.allocation_from_efa) {
    const FitResult& e = efa.at(cfg.efa_allocation_dims);
    LoadingMatrix lm = slopes_to_loadings(e.model);
    if (cfg.efa_allocation_dims > 1) lm = varimax_rotate(lm.loadings);
    std::map<std::string, int> alloc;
    const auto raw = allocation_from_loadings(lm);
    for (std::size_t i = 0; i < data.n_items(); ++i) alloc[data.items()[i].id] = raw[i];
    allocation = allocation_for(data, alloc);
  } else {
    allocation = allocation_for(data, cfg.allocation);
  }
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < data.n_items(); ++i) rows.push_back({data.items()[i].id, std::to_string(allocation[i] + 1)});
  write_csv((dir / "allocation.csv").string(), {"item", "trait"}, rows);

  FitResult selected;
  int C = 0;
  rows.clear();
  if (cfg.fixed_classes) {
    C = *cfg.fixed_classes;
    selected = em_fit_latent_class(data, C, allocation, std::nullopt, opts);
    const FitStatistics st = fit_statistics(selected);
    rows.push_back({std::to_string(C), std::to_string(selected.n_params), fmt(selected.loglik), fmt(st.aic),
                    fmt(st.bic), selected.converged ? "1" : "0"});
  } else {
    ClassScan scan = class_scan(data, cfg.c_min, cfg.c_max, allocation, opts);
    for (std::size_t k = 0; k < scan.classes.size(); ++k) {
      rows.push_back({std::to_string(scan.classes[k]), std::to_string(scan.stats[k].n_params),
                      fmt(scan.stats[k].loglik), fmt(scan.stats[k].aic), fmt(scan.stats[k].bic),
                      scan.fits[k].converged ? "1" : "0"});
      for (const auto& w : warnings_of("classes=" + std::to_string(scan.classes[k]), scan.fits[k])) warnings.push_back(w);
    }
    C = scan.bic_choice;
    selected = std::move(scan.fits[static_cast<std::size_t>(C - cfg.c_min)]);
  }
  write_csv((dir / "class_scan.csv").string(), {"classes", "n_params", "loglik", "aic", "bic", "converged"}, rows);

  const int S = *std::max_element(allocation.begin(), allocation.end()) + 1;
  rows.clear();
  if (S > 1) {
    FitResult uni = em_fit_latent_class(data, C, std::vector<int>(data.n_items(), 0), std::nullopt, opts);
    for (const auto& w : warnings_of("unidimensional", uni)) warnings.push_back(w);
    const FitStatistics su = fit_statistics(uni), sm = fit_statistics(selected);
    rows.push_back({std::to_string(C), "1", std::to_string(uni.n_params), fmt(uni.loglik), fmt(su.aic), fmt(su.bic),
                    "NA", "NA", "NA"});
    std::vector<std::string> row{std::to_string(C), std::to_string(S), std::to_string(selected.n_params),
                                 fmt(selected.loglik), fmt(sm.aic), fmt(sm.bic)};
    try {
      const LrtResult lrt = likelihood_ratio_test(uni, selected);
      row.insert(row.end(), {fmt(lrt.statistic), std::to_string(lrt.dof), fmt(lrt.p_value)});
    } catch (const ModelError& e) {
      warnings.push_back(std::string("dimensionality test: ") + e.what());
      row.insert(row.end(), {"NA", "NA", "NA"});
    }
    rows.push_back(row);
  }
  write_csv((dir / "dimensionality.csv").string(),
            {"classes", "dims", "n_params", "loglik", "aic", "bic", "lrt_statistic", "lrt_dof", "lrt_p_value"}, rows);

  std::optional<StdErrors> se;
  if (cfg.standard_errors) {
    se = standard_errors(selected, data);
    selected.std_errors = se->se;
    for (const auto& d : se->diagnostics) warnings.push_back("standard errors: " + d);
  }
  const StdErrors* sep = se ? &*se : nullptr;
  const auto& latent = std::get<DiscreteLatent>(selected.model.latent);
  std::vector<std::string> header{"class", "prior", "prior_se"};
  for (int s = 0; s < S; ++s) header.push_back("trait" + std::to_string(s + 1));
  for (int s = 0; s < S; ++s) header.push_back("trait" + std::to_string(s + 1) + "_se");
  rows.clear();
  for (int c = 0; c < C; ++c) {
    std::vector<std::string> row{std::to_string(c + 1), fmt(latent.prior(c)), "NA"};
    for (int s = 0; s < S; ++s) row.push_back(fmt(latent.support(c, s)));
    for (int s = 0; s < S; ++s) {
      row.push_back(fmt(se_of(sep, "xi" + std::to_string(c + 1) + (S > 1 ? "_" + std::to_string(s + 1) : ""))));
    }
    rows.push_back(row);
  }
  write_csv((dir / "support.csv").string(), header, rows);

  rows.clear();
  for (int i = 0; i < selected.model.n_items(); ++i) {
    const auto& p = selected.model.params[i];
    const int s = selected.model.allocation.empty() ? 0 : selected.model.allocation[i];
    const std::string base = "item:" + data.items()[i].id + ":";
    const double a = p.slopes(0, s), d = p.intercepts(0);
    rows.push_back({data.items()[i].id, data.items()[i].label, std::to_string(s + 1),
                    selected.model.item_excluded(i) ? "1" : "0", fmt(a), fmt(se_of(sep, base + "a" + (S > 1 ? std::to_string(s + 1) : ""))),
                    fmt(d), fmt(se_of(sep, base + "d")), fmt(a != 0.0 ? difficulty_from_intercept(a, d) : std::nan(""))});
  }
  write_csv((dir / "item_parameters.csv").string(),
            {"item", "label", "trait", "excluded", "slope", "slope_se", "intercept", "intercept_se", "difficulty"}, rows);

  const FitStatistics st = fit_statistics(selected);
  const M2Result m2 = rmsea_m2(data, selected);
  if (!m2.defined) warnings.push_back("selected model M2 undefined: " + m2.note);
  write_csv((dir / "selected_fit.csv").string(),
            {"classes", "dims", "n_params", "n", "loglik", "aic", "bic", "m2", "m2_df", "rmsea"},
            {{std::to_string(C), std::to_string(S), std::to_string(selected.n_params), std::to_string(selected.n_used),
              fmt(selected.loglik), fmt(st.aic), fmt(st.bic), m2.defined ? fmt(m2.m2) : "NA",
              m2.defined ? std::to_string(m2.df) : "NA", m2.defined ? fmt(m2.rmsea) : "NA"}});

  if (ad.has_heldout) {
    const HeldoutValidation v = validate_heldout(selected, data, ad.heldout);
    rows.clear();
    if (v.defined) {
      for (Eigen::Index c = 0; c < v.class_success_rate.size(); ++c) {
        rows.push_back({std::to_string(c + 1), fmt(v.class_counts(c)), fmt(v.class_success_rate(c))});
      }
    } else {
      warnings.push_back("validation: " + v.note);
    }
    write_csv((dir / "validation.csv").string(), {"class", "n", "heldout_success_rate"}, rows);
  }
  for (const auto& w : warnings_of("selected model", selected)) warnings.push_back(w);
  save_model((dir / "model.json").string(), selected);
  write_text(dir / "warnings.txt", join_lines(warnings));
}

void cmd_disparity(const PipelineConfig& cfg) {
  const AnalysisData ad = analysis_data(cfg);
  const ResponseMatrix& data = ad.data;
  const fs::path model_file = out_path(cfg, "fit/model.json");
  if (!fs::exists(model_file)) throw DataError("missing '" + model_file.string() + "'; run fit first");
  const LoadedModel loaded = load_model(model_file.string());
  const FitResult& base = loaded.fit;
  const fs::path dir = out_path(cfg, "disparity");
  ensure_dir(dir);
  std::vector<std::string> warnings = loaded.warnings;
  const auto [levels, ref] = group_contrasts(cfg, ad.groups);

  std::vector<std::vector<std::string>> table;
  // Observed-score approach on the raw cohort codes.
  {
    const CohortPaths in = input_paths(cfg);
    const auto items = load_items(in.items);
    const RawResponses raw = load_raw_responses(in.responses, items);
    const auto rules = cfg.scoring_rules.empty() ? identity_rules(items) : load_scoring_rules(cfg.scoring_rules);
    Eigen::MatrixXd scores = apply_scoring_rules(raw, rules);
    std::unordered_map<std::string, std::size_t> row_of;
    for (std::size_t j = 0; j < raw.individual_ids.size(); ++j) row_of.emplace(raw.individual_ids[j], j);
    std::vector<Eigen::Index> keep_items;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].id != cfg.heldout_item) keep_items.push_back(static_cast<Eigen::Index>(i));
    }
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(data.n_individuals()), static_cast<Eigen::Index>(keep_items.size()));
    for (std::size_t j = 0; j < data.n_individuals(); ++j) {
      const auto it = row_of.find(data.individual_ids()[j]);
      if (it == row_of.end()) throw DataError("individual '" + data.individual_ids()[j] + "' missing from the cohort");
      for (std::size_t k = 0; k < keep_items.size(); ++k) sub(j, k) = scores(it->second, keep_items[k]);
    }
    const ObservedScores obs = opportunity_scores(sub);
    for (const auto& d : obs.diagnostics) warnings.push_back("observed score: " + d);
    std::vector<std::string> inc_groups;
    for (auto r : obs.included) inc_groups.push_back(ad.groups[r]);
    const Eigen::MatrixXd w = dummies(inc_groups, levels, false);
    const RegressionTable reg = common_regression(obs.z, w, levels);
    for (std::size_t k = 0; k < reg.names.size(); ++k) {
      table.push_back({"observed_score", reg.names[k], "standardized score", fmt(reg.estimate(k)), fmt(reg.se(k))});
    }
  }

  FitOptions opts = fit_options(cfg, "disparity");
  FitResult fit;
  if (base.model.is_discrete()) {
    const int C = base.model.n_classes();
    std::vector<int> allocation = base.model.allocation;
    if (allocation.empty()) allocation.assign(data.n_items(), 0);
    std::optional<StructuralModel> structural;
    std::vector<std::string> names{"intercept"};
    names.insert(names.end(), levels.begin(), levels.end());
    if (cfg.class_prior == "multinomial") {
      structural = MultinomialLogit{dummies(ad.groups, levels, true), Eigen::MatrixXd::Zero(names.size(), C - 1), names};
    } else {
      Eigen::VectorXd cuts(C - 1);
      for (int c = 0; c < C - 1; ++c) cuts(c) = static_cast<double>(c) - 0.5 * (C - 2);
      structural = make_cumulative_logit(dummies(ad.groups, levels, false), cuts, Eigen::VectorXd::Zero(levels.size()), levels);
    }
    if (C < 2) throw DataError("the selected model has one class; class-prior disparities are undefined");
    fit = em_fit_latent_class(data, C, allocation, structural, opts);
  } else {
    const int S = base.model.dims();
    StructuralModel structural =
        LatentRegression{dummies(ad.groups, levels, false), Eigen::MatrixXd::Zero(levels.size(), S), levels};
    fit = em_fit_normal(data, initial_normal_model(data, S, Identification::scheme1, structural), opts);
  }
  for (const auto& w : warnings_of("disparity model", fit)) warnings.push_back(w);
  std::optional<StdErrors> se;
  if (cfg.standard_errors) {
    se = standard_errors(fit, data);
    fit.std_errors = se->se;
    for (const auto& d : se->diagnostics) warnings.push_back("standard errors: " + d);
  }
  const StdErrors* sep = se ? &*se : nullptr;
  const auto rows = fit.model.is_discrete() ? disparity_from_class_model(fit, sep)
                                            : disparity_from_latent_regression(fit, sep);
  const std::string approach = fit.model.is_discrete() ? "latent_class" : "latent_trait";
  for (const auto& r : rows) table.push_back({approach, r.group, r.contrast, fmt(r.estimate), fmt(r.se)});
  write_csv((dir / "table.csv").string(), {"approach", "term", "contrast", "estimate", "se"}, table);

  std::vector<std::vector<std::string>> out;
  if (fit.model.is_discrete()) {
    const ClassPosteriors post = class_posteriors(data, fit);
    for (const auto& g : class_distribution_by_group(post, ad.groups)) {
      for (Eigen::Index c = 0; c < g.map_share.size(); ++c) {
        out.push_back({g.group, std::to_string(g.n), std::to_string(c + 1), fmt(g.map_share(c)), fmt(g.mean_posterior(c))});
      }
    }
    write_csv((dir / "class_distribution.csv").string(), {"group", "n", "class", "map_share", "mean_posterior"}, out);
    out.clear();
    const auto& latent = std::get<DiscreteLatent>(fit.model.latent);
    for (int c = 0; c < latent.support.rows(); ++c) {
      for (int i = 0; i < fit.model.n_items(); ++i) {
        if (fit.model.item_excluded(i)) continue;
        const Eigen::VectorXd x = latent.support.row(c).transpose();
        out.push_back({std::to_string(c + 1), data.items()[i].id, data.items()[i].label,
                       fmt(1.0 - fit.model.params[i].prob(0, x))});
      }
    }
    write_csv((dir / "class_profiles.csv").string(), {"class", "item", "label", "prob_positive"}, out);
  } else {
    const EapScores eaps = eap_scores(data, fit);
    std::map<std::string, std::pair<int, Eigen::VectorXd>> acc;
    for (std::size_t j = 0; j < ad.groups.size(); ++j) {
      auto& a = acc[ad.groups[j]];
      if (a.first == 0) a.second = Eigen::VectorXd::Zero(eaps.mean.cols());
      ++a.first;
      a.second += eaps.mean.row(j).transpose();
    }
    for (const auto& [g, a] : acc) {
      for (Eigen::Index s = 0; s < a.second.size(); ++s) {
        out.push_back({g, std::to_string(a.first), std::to_string(s + 1), fmt(a.second(s) / a.first)});
      }
    }
    write_csv((dir / "eap_by_group.csv").string(), {"group", "n", "trait", "mean_eap"}, out);
  }
  save_model((dir / "model.json").string(), fit);
  write_text(dir / "warnings.txt", join_lines(warnings));
}

int cmd_report(const PipelineConfig& cfg) {
  struct Section {
    std::string title;
    std::string file;
    bool required;
  };
  const bool lc = cfg.family == "latent_class";
  std::vector<Section> sections{
      {"Item distribution", "preprocess/item_distribution.csv", true},
      {"Balance before matching (column %)", "match/balance_pre.csv", true},
      {"Balance after matching (column %)", "match/balance_post.csv", true},
      {"Matching summary", "match/summary.csv", true},
      {"Exploratory Normal fits", "fit/efa_fit.csv", !cfg.efa_dims.empty()},
  };
  for (int d : cfg.efa_dims) {
    sections.push_back({"Loadings, " + std::to_string(d) + " trait(s)", "fit/efa_S" + std::to_string(d) + "_loadings.csv", true});
  }
  if (lc) {
    sections.push_back({"Class scan", "fit/class_scan.csv", true});
    sections.push_back({"Dimensionality", "fit/dimensionality.csv", true});
    sections.push_back({"Selected model fit", "fit/selected_fit.csv", true});
    sections.push_back({"Support points and priors", "fit/support.csv", true});
    sections.push_back({"Item parameters", "fit/item_parameters.csv", true});
    sections.push_back({"Held-out item by class", "fit/validation.csv", !cfg.heldout_item.empty()});
  }
  sections.push_back({"Disparities", "disparity/table.csv", true});
  if (lc) {
    sections.push_back({"Class distribution by group", "disparity/class_distribution.csv", true});
    sections.push_back({"Class response profiles", "disparity/class_profiles.csv", true});
  } else {
    sections.push_back({"Mean EAP by group", "disparity/eap_by_group.csv", true});
  }

  std::ostringstream md;
  md << "# Quality measurement report\n\n";
  md << "## Provenance\n\n";
  md << "- config hash: " << config_hash(cfg.raw) << "\n";
  md << "- root seed: " << cfg.seed << "\n";
  for (const char* stage : {"simulate", "template", "fit", "disparity"}) {
    md << "- " << stage << " seed: " << stage_seed(cfg, stage) << "\n";
  }
  md << "- model family: " << cfg.family << "\n";
  md << "- held-out item: " << (cfg.heldout_item.empty() ? "none" : cfg.heldout_item) << "\n\n";

  std::vector<std::string> missing;
  for (const auto& s : sections) {
    const fs::path p = out_path(cfg, s.file);
    md << "## " << s.title << "\n\n";
    if (!fs::exists(p)) {
      if (s.required) {
        missing.push_back(s.file);
        md << "**Missing input:** `" << s.file << "`\n\n";
      } else {
        md << "(not produced)\n\n";
      }
      continue;
    }
    md << "Source: `" << s.file << "`\n\n" << markdown_table(p) << "\n";
  }
  for (const char* w : {"fit/warnings.txt", "disparity/warnings.txt", "preprocess/log.txt"}) {
    const fs::path p = out_path(cfg, w);
    if (!fs::exists(p)) continue;
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    if (ss.str().empty()) continue;
    md << "## Notes from `" << w << "`\n\n";
    std::string line;
    while (std::getline(ss, line)) md << "- " << line << "\n";
    md << "\n";
  }
  if (!missing.empty()) {
    md << "## Missing inputs\n\n";
    for (const auto& m : missing) md << "- `" << m << "`\n";
  }
  ensure_dir(cfg.out);
  write_text(out_path(cfg, "report.md"), md.str());
  return static_cast<int>(missing.size());
}

int cmd_run(const PipelineConfig& cfg) {
  if (cfg.input.items.empty()) cmd_simulate(cfg);
  cmd_preprocess(cfg);
  cmd_match(cfg);
  cmd_fit(cfg);
  cmd_disparity(cfg);
  return cmd_report(cfg);
}

}  // namespace qualirt
