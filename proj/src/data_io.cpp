#include "qualirt/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "qualirt/errors.hpp"
#include "qualirt/rng.hpp"

namespace qualirt {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct CsvRecord {
  std::vector<std::string> fields;
  int line = 0;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// RFC 4180 style: quoted fields may contain commas, doubled quotes and newlines.
std::vector<CsvRecord> parse_csv(const std::string& text, const std::string& source) {
  std::vector<CsvRecord> out;
  CsvRecord rec;
  std::string field;
  bool quoted = false, field_started = false;
  int line = 1;
  rec.line = 1;
  auto end_field = [&] {
    rec.fields.push_back(field);
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    const bool blank = rec.fields.size() == 1 && rec.fields[0].empty();
    if (!blank) out.push_back(std::move(rec));
    rec = CsvRecord{};
  };
  for (std::size_t k = 0; k < text.size(); ++k) {
    const char ch = text[k];
    if (quoted) {
      if (ch == '"') {
        if (k + 1 < text.size() && text[k + 1] == '"') {
          field += '"';
          ++k;
        } else {
          quoted = false;
        }
      } else {
        if (ch == '\n') ++line;
        field += ch;
      }
      continue;
    }
    if (ch == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (ch == ',') {
      end_field();
    } else if (ch == '\n') {
      end_record();
      ++line;
      rec.line = line;
    } else if (ch != '\r') {
      field += ch;
      field_started = true;
    }
  }
  if (quoted) throw DataError(source + ": unterminated quoted field");
  if (!field.empty() || !rec.fields.empty()) end_record();
  return out;
}

std::vector<CsvRecord> load_records(const std::string& path) { return parse_csv(read_file(path), path); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

// Maps header names to column positions; throws if a required one is absent.
std::vector<int> header_columns(const CsvRecord& header, const std::vector<std::string>& required,
                                const std::vector<std::string>& optional, const std::string& source) {
  std::vector<int> cols;
  auto find = [&](const std::string& name) {
    for (std::size_t c = 0; c < header.fields.size(); ++c) {
      if (trim(header.fields[c]) == name) return static_cast<int>(c);
    }
    return -1;
  };
  for (const auto& name : required) {
    const int c = find(name);
    if (c < 0) throw DataError(source + ": missing column '" + name + "'");
    cols.push_back(c);
  }
  for (const auto& name : optional) cols.push_back(find(name));
  return cols;
}

std::string field_at(const CsvRecord& rec, int col, const std::string& source) {
  if (col < 0) return "";
  if (col >= static_cast<int>(rec.fields.size())) {
    throw DataError(source + ":" + std::to_string(rec.line) + ": expected at least " +
                    std::to_string(col + 1) + " fields, found " + std::to_string(rec.fields.size()));
  }
  return trim(rec.fields[col]);
}

std::string where(const std::string& source, int line) { return source + ":" + std::to_string(line); }

bool is_na(const std::string& s) { return s.empty() || s == "NA"; }

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

int parse_int(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    throw DataError(what + ": '" + s + "' is not an integer");
  }
  if (used != s.size()) throw DataError(what + ": '" + s + "' is not an integer");
  return v;
}

double parse_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw DataError(what + ": '" + s + "' is not a number");
  }
  if (used != s.size()) throw DataError(what + ": '" + s + "' is not a number");
  return v;
}

int sample_categorical(const double* probs, int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  double acc = 0.0;
  for (int k = 0; k < n; ++k) {
    acc += probs[k];
    if (u < acc) return k;
  }
  return n - 1;
}

// ---------------------------------------------------------------------------
// JSON encoding

json num(double x) {
  if (std::isnan(x)) return "NaN";
  if (std::isinf(x)) return x > 0 ? "Infinity" : "-Infinity";
  return x;
}

double from_num(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "NaN") return kNaN;
    if (s == "Infinity") return std::numeric_limits<double>::infinity();
    if (s == "-Infinity") return -std::numeric_limits<double>::infinity();
  }
  if (j.is_null()) return kNaN;
  throw DataError("expected a number, found " + j.dump());
}

json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) a.push_back(num(v(k)));
  return a;
}

Eigen::VectorXd json_vec(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t k = 0; k < j.size(); ++k) v(k) = from_num(j[k]);
  return v;
}

json mat_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(num(m(r, c)));
    rows.push_back(std::move(row));
  }
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

Eigen::MatrixXd json_mat(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const json& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows) throw DataError("matrix row count mismatch");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(data[r].size()) != cols) throw DataError("matrix column count mismatch");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = from_num(data[r][c]);
  }
  return m;
}

template <typename Mask>
json mask_json(const Mask& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(static_cast<bool>(m(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& context,
                std::vector<std::string>& warnings) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) warnings.push_back("ignored unknown field '" + it.key() + "' in " + context);
  }
}

json structural_json(const StructuralModel& s) {
  return std::visit(
      [](const auto& m) -> json {
        using T = std::decay_t<decltype(m)>;
        json j{{"design", mat_json(m.design)}, {"covariate_names", m.covariate_names}};
        if constexpr (std::is_same_v<T, LatentRegression>) {
          j["type"] = "latent_regression";
          j["gamma"] = mat_json(m.gamma);
        } else if constexpr (std::is_same_v<T, MultinomialLogit>) {
          j["type"] = "multinomial_logit";
          j["gamma"] = mat_json(m.gamma);
        } else {
          j["type"] = "cumulative_logit";
          j["gamma"] = vec_json(m.gamma);
          j["cutpoints"] = vec_json(m.cutpoints);
        }
        return j;
      },
      s);
}

StructuralModel json_structural(const json& j, std::vector<std::string>& warnings) {
  check_keys(j, {"type", "design", "covariate_names", "gamma", "cutpoints"}, "structural", warnings);
  const auto type = j.at("type").get<std::string>();
  const Eigen::MatrixXd design = json_mat(j.at("design"));
  const auto names = j.at("covariate_names").get<std::vector<std::string>>();
  if (type == "latent_regression") return LatentRegression{design, json_mat(j.at("gamma")), names};
  if (type == "multinomial_logit") return MultinomialLogit{design, json_mat(j.at("gamma")), names};
  if (type == "cumulative_logit") {
    return make_cumulative_logit(design, json_vec(j.at("cutpoints")), json_vec(j.at("gamma")), names);
  }
  throw DataError("unknown structural type '" + type + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double x) {
  if (std::isnan(x)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  for (auto& rec : load_records(path)) rows.push_back(std::move(rec.fields));
  return rows;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  auto write_row = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) out << ',';
      out << quote_csv(r[c]);
    }
    out << '\n';
  };
  write_row(header);
  for (const auto& r : rows) write_row(r);
  if (!out) throw DataError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Items and responses

std::vector<ItemSpec> load_items(const std::string& path) {
  const auto recs = load_records(path);
  if (recs.empty()) throw DataError(path + ": empty file");
  const auto cols = header_columns(recs[0], {"item_id", "kind", "categories"}, {"label"}, path);
  std::vector<ItemSpec> items;
  std::unordered_map<std::string, int> seen;
  for (std::size_t r = 1; r < recs.size(); ++r) {
    const auto& rec = recs[r];
    const std::string at = where(path, rec.line);
    ItemSpec item;
    item.id = field_at(rec, cols[0], path);
    if (item.id.empty()) throw DataError(at + ": empty item_id");
    if (auto [it, fresh] = seen.emplace(item.id, rec.line); !fresh) {
      throw DataError(at + ": item '" + item.id + "' already declared on line " + std::to_string(it->second));
    }
    try {
      item.kind = item_kind_from_string(field_at(rec, cols[1], path));
    } catch (const DataError& e) {
      throw DataError(at + ": " + e.what());
    }
    item.categories = parse_int(field_at(rec, cols[2], path), at + ": categories");
    if (item.categories < 2 || (item.kind == ItemKind::binary && item.categories != 2)) {
      throw DataError(at + ": item '" + item.id + "' has an invalid category count");
    }
    item.label = field_at(rec, cols[3], path);
    items.push_back(std::move(item));
  }
  return items;
}

void save_items(const std::string& path, const std::vector<ItemSpec>& items) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& it : items) rows.push_back({it.id, to_string(it.kind), std::to_string(it.categories), it.label});
  write_csv(path, {"item_id", "kind", "categories", "label"}, rows);
}

RawResponses load_raw_responses(const std::string& path, const std::vector<ItemSpec>& items) {
  const auto recs = load_records(path);
  if (recs.empty()) throw DataError(path + ": empty file");
  const auto cols = header_columns(recs[0], {"individual_id", "item_id", "response"}, {}, path);
  RawResponses raw;
  raw.source = path;
  std::unordered_map<std::string, std::size_t> item_pos, person_pos;
  for (std::size_t i = 0; i < items.size(); ++i) {
    item_pos.emplace(items[i].id, i);
    raw.item_ids.push_back(items[i].id);
  }
  for (std::size_t r = 1; r < recs.size(); ++r) {
    const auto& rec = recs[r];
    const std::string at = where(path, rec.line);
    const std::string person = field_at(rec, cols[0], path);
    const std::string item = field_at(rec, cols[1], path);
    const std::string code = field_at(rec, cols[2], path);
    if (person.empty()) throw DataError(at + ": empty individual_id");
    const auto it = item_pos.find(item);
    if (it == item_pos.end()) throw DataError(at + ": unknown item '" + item + "'");
    auto [pp, fresh] = person_pos.emplace(person, raw.individual_ids.size());
    if (fresh) {
      raw.individual_ids.push_back(person);
      raw.codes.emplace_back(items.size(), "NA");
      raw.lines.emplace_back(items.size(), 0);
    }
    const std::size_t j = pp->second, i = it->second;
    if (raw.lines[j][i] != 0) {
      throw DataError(at + ": duplicate response for individual '" + person + "', item '" + item +
                      "' (first on line " + std::to_string(raw.lines[j][i]) + ", again on line " +
                      std::to_string(rec.line) + ")");
    }
    raw.codes[j][i] = code.empty() ? "NA" : code;
    raw.lines[j][i] = rec.line;
  }
  return raw;
}

ResponseMatrix to_response_matrix(const RawResponses& raw, const std::vector<ItemSpec>& items) {
  if (raw.item_ids.size() != items.size()) throw DataError("raw responses and item list disagree");
  ResponseMatrix m(items, raw.individual_ids.size());
  m.set_individual_ids(raw.individual_ids);
  for (std::size_t j = 0; j < raw.codes.size(); ++j) {
    for (std::size_t i = 0; i < items.size(); ++i) {
      const std::string& code = raw.codes[j][i];
      if (is_na(code)) continue;
      const std::string at = where(raw.source, raw.lines[j][i]);
      const int k = parse_int(code, at + ": response");
      if (k < 0 || k >= items[i].categories) {
        throw DataError(at + ": response " + code + " for item '" + items[i].id + "' outside 0.." +
                        std::to_string(items[i].categories - 1));
      }
      m.set_response(j, i, k);
    }
  }
  return m;
}

CovariateTable load_covariates(const std::string& covariates_path, const std::string& groups_path,
                               const std::vector<std::string>& ids) {
  CovariateTable table;
  table.ids = ids;
  table.group.assign(ids.size(), "");
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t j = 0; j < ids.size(); ++j) pos.emplace(ids[j], j);
  if (!covariates_path.empty()) {
    const auto recs = load_records(covariates_path);
    if (recs.empty()) throw DataError(covariates_path + ": empty file");
    const auto cols = header_columns(recs[0], {"individual_id", "covariate", "value"}, {}, covariates_path);
    std::unordered_map<std::string, std::size_t> cov_pos;
    std::vector<std::vector<int>> lines;
    for (std::size_t r = 1; r < recs.size(); ++r) {
      const auto& rec = recs[r];
      const std::string at = where(covariates_path, rec.line);
      const std::string person = field_at(rec, cols[0], covariates_path);
      const std::string name = field_at(rec, cols[1], covariates_path);
      const auto pj = pos.find(person);
      if (pj == pos.end()) throw DataError(at + ": individual '" + person + "' has no responses");
      auto [cp, fresh] = cov_pos.emplace(name, table.names.size());
      if (fresh) {
        table.names.push_back(name);
        for (auto& row : table.values) row.push_back("NA");
        for (auto& row : lines) row.push_back(0);
      }
      if (table.values.empty()) {
        table.values.assign(ids.size(), std::vector<std::string>(table.names.size(), "NA"));
        lines.assign(ids.size(), std::vector<int>(table.names.size(), 0));
      }
      int& seen = lines[pj->second][cp->second];
      if (seen != 0) {
        throw DataError(at + ": duplicate covariate '" + name + "' for individual '" + person +
                        "' (first on line " + std::to_string(seen) + ")");
      }
      seen = rec.line;
      table.values[pj->second][cp->second] = field_at(rec, cols[2], covariates_path);
    }
  }
  if (table.values.empty()) table.values.assign(ids.size(), {});
  if (!groups_path.empty()) {
    const auto recs = load_records(groups_path);
    if (recs.empty()) throw DataError(groups_path + ": empty file");
    const auto cols = header_columns(recs[0], {"individual_id", "group"}, {}, groups_path);
    std::vector<int> lines(ids.size(), 0);
    for (std::size_t r = 1; r < recs.size(); ++r) {
      const auto& rec = recs[r];
      const std::string at = where(groups_path, rec.line);
      const std::string person = field_at(rec, cols[0], groups_path);
      const auto pj = pos.find(person);
      if (pj == pos.end()) throw DataError(at + ": individual '" + person + "' has no responses");
      if (lines[pj->second] != 0) {
        throw DataError(at + ": duplicate group for individual '" + person + "' (first on line " +
                        std::to_string(lines[pj->second]) + ")");
      }
      lines[pj->second] = rec.line;
      table.group[pj->second] = field_at(rec, cols[1], groups_path);
    }
  }
  return table;
}

Cohort load_cohort(const CohortPaths& paths) {
  const auto items = load_items(paths.items);
  const auto raw = load_raw_responses(paths.responses, items);
  Cohort cohort;
  cohort.responses = to_response_matrix(raw, items);
  cohort.covariates = load_covariates(paths.covariates, paths.groups, raw.individual_ids);
  return cohort;
}

void save_cohort(const CohortPaths& paths, const Cohort& cohort) {
  const auto& data = cohort.responses;
  save_items(paths.items, data.items());
  std::vector<std::vector<std::string>> rows;
  rows.reserve(data.n_individuals() * data.n_items());
  for (std::size_t j = 0; j < data.n_individuals(); ++j) {
    for (std::size_t i = 0; i < data.n_items(); ++i) {
      const int k = data.response(j, i);
      rows.push_back({data.individual_ids()[j], data.items()[i].id, k == kMissing ? "NA" : std::to_string(k)});
    }
  }
  write_csv(paths.responses, {"individual_id", "item_id", "response"}, rows);
  const auto& cov = cohort.covariates;
  if (!paths.covariates.empty()) {
    rows.clear();
    for (std::size_t j = 0; j < cov.ids.size(); ++j) {
      for (std::size_t v = 0; v < cov.names.size(); ++v) rows.push_back({cov.ids[j], cov.names[v], cov.values[j][v]});
    }
    write_csv(paths.covariates, {"individual_id", "covariate", "value"}, rows);
  }
  if (!paths.groups.empty()) {
    rows.clear();
    for (std::size_t j = 0; j < cov.ids.size(); ++j) rows.push_back({cov.ids[j], cov.group[j]});
    write_csv(paths.groups, {"individual_id", "group"}, rows);
  }
}

// ---------------------------------------------------------------------------
// Scoring rules

std::vector<ScoringRule> load_scoring_rules(const std::string& path) {
  const auto recs = load_records(path);
  if (recs.empty()) throw DataError(path + ": empty file");
  const auto cols = header_columns(recs[0], {"item_id", "code", "score"}, {"meaning"}, path);
  std::vector<ScoringRule> rules;
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t r = 1; r < recs.size(); ++r) {
    const auto& rec = recs[r];
    const std::string at = where(path, rec.line);
    const std::string item = field_at(rec, cols[0], path);
    const std::string code = field_at(rec, cols[1], path);
    const std::string score = field_at(rec, cols[2], path);
    auto [it, fresh] = pos.emplace(item, rules.size());
    if (fresh) rules.push_back(ScoringRule{item, {}, {}});
    auto& rule = rules[it->second];
    if (rule.score.count(code)) throw DataError(at + ": code '" + code + "' repeated for item '" + item + "'");
    rule.score[code] = is_na(score) ? std::nullopt : std::optional<double>(parse_double(score, at + ": score"));
    rule.meaning[code] = field_at(rec, cols[3], path);
  }
  return rules;
}

void save_scoring_rules(const std::string& path, const std::vector<ScoringRule>& rules) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& rule : rules) {
    for (const auto& [code, score] : rule.score) {
      const auto m = rule.meaning.find(code);
      rows.push_back({rule.item_id, code, score ? format_double(*score) : "NA", m == rule.meaning.end() ? "" : m->second});
    }
  }
  write_csv(path, {"item_id", "code", "score", "meaning"}, rows);
}

std::vector<ScoringRule> identity_rules(const std::vector<ItemSpec>& items) {
  std::vector<ScoringRule> rules;
  for (const auto& item : items) {
    ScoringRule rule{item.id, {}, {}};
    for (int k = 0; k < item.categories; ++k) rule.score[std::to_string(k)] = k;
    rule.score["NA"] = std::nullopt;
    rules.push_back(std::move(rule));
  }
  return rules;
}

Eigen::MatrixXd apply_scoring_rules(const RawResponses& raw, const std::vector<ScoringRule>& rules) {
  std::unordered_map<std::string, const ScoringRule*> by_item;
  for (const auto& r : rules) by_item.emplace(r.item_id, &r);
  const auto n = static_cast<Eigen::Index>(raw.codes.size());
  Eigen::MatrixXd out(n, static_cast<Eigen::Index>(raw.item_ids.size()));
  for (std::size_t i = 0; i < raw.item_ids.size(); ++i) {
    const auto it = by_item.find(raw.item_ids[i]);
    if (it == by_item.end()) throw DataError("no scoring rule for item '" + raw.item_ids[i] + "'");
    const ScoringRule& rule = *it->second;
    for (Eigen::Index j = 0; j < n; ++j) {
      const std::string code = is_na(raw.codes[j][i]) ? "NA" : raw.codes[j][i];
      const auto s = rule.score.find(code);
      if (s == rule.score.end()) {
        const int line = raw.lines.empty() ? 0 : raw.lines[j][i];
        throw DataError((line ? where(raw.source, line) + ": " : std::string()) + "code '" + code +
                        "' not covered by the scoring rule for item '" + rule.item_id + "'");
      }
      out(j, i) = s->second ? *s->second : kNaN;
    }
  }
  return out;
}

Eigen::MatrixXd apply_scoring_rules(const ResponseMatrix& data, const std::vector<ScoringRule>& rules) {
  RawResponses raw;
  raw.individual_ids = data.individual_ids();
  for (const auto& it : data.items()) raw.item_ids.push_back(it.id);
  raw.codes.resize(data.n_individuals());
  for (std::size_t j = 0; j < data.n_individuals(); ++j) {
    for (std::size_t i = 0; i < data.n_items(); ++i) {
      const int k = data.response(j, i);
      raw.codes[j].push_back(k == kMissing ? "NA" : std::to_string(k));
    }
  }
  return apply_scoring_rules(raw, rules);
}

// ---------------------------------------------------------------------------
// Preprocessing

CollapseResult collapse_rare(const ResponseMatrix& data, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("collapse threshold must lie in (0, 1)");
  CollapseResult res;
  std::vector<ItemSpec> kept_items;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < data.n_items(); ++i) {
    const ItemSpec& item = data.items()[i];
    std::vector<double> count(item.categories, 0.0);
    double total = 0.0;
    for (std::size_t j = 0; j < data.n_individuals(); ++j) {
      const int k = data.response(j, i);
      if (k == kMissing) continue;
      count[k] += 1.0;
      total += 1.0;
    }
    if (total == 0.0) {
      res.log.push_back("item " + item.id + ": no eligible responses, eliminated");
      res.eliminated.push_back(item.id);
      res.category_map.emplace_back();
      continue;
    }
    // Current categories as runs of original ones, in order.
    std::vector<std::vector<int>> cats;
    std::vector<double> freq;
    for (int k = 0; k < item.categories; ++k) {
      cats.push_back({k});
      freq.push_back(count[k]);
    }
    while (cats.size() > 1) {
      std::size_t rare = cats.size();
      for (std::size_t c = 0; c < cats.size(); ++c) {
        if (freq[c] / total < threshold && (rare == cats.size() || freq[c] < freq[rare])) rare = c;
      }
      if (rare == cats.size()) break;
      std::size_t into;
      if (item.kind == ItemKind::nominal) {
        into = rare == 0 ? 1 : 0;
        for (std::size_t c = 0; c < cats.size(); ++c) {
          if (c != rare && freq[c] > freq[into]) into = c;
        }
      } else if (rare == 0) {
        into = 1;
      } else if (rare + 1 == cats.size()) {
        into = rare - 1;
      } else {
        into = freq[rare + 1] > freq[rare - 1] ? rare + 1 : rare - 1;
      }
      char buf[160];
      std::snprintf(buf, sizeof buf, "item %s: category {%s} (%.2f%%) merged into {%s}", item.id.c_str(),
                    [&] {
                      std::string s;
                      for (int k : cats[rare]) s += (s.empty() ? "" : ",") + std::to_string(k);
                      return s;
                    }().c_str(),
                    100.0 * freq[rare] / total,
                    [&] {
                      std::string s;
                      for (int k : cats[into]) s += (s.empty() ? "" : ",") + std::to_string(k);
                      return s;
                    }().c_str());
      res.log.push_back(buf);
      cats[into].insert(cats[into].end(), cats[rare].begin(), cats[rare].end());
      std::sort(cats[into].begin(), cats[into].end());
      freq[into] += freq[rare];
      cats.erase(cats.begin() + static_cast<std::ptrdiff_t>(rare));
      freq.erase(freq.begin() + static_cast<std::ptrdiff_t>(rare));
    }
    if (cats.size() < 2) {
      res.log.push_back("item " + item.id + ": no variation after merging, eliminated");
      res.eliminated.push_back(item.id);
      res.category_map.emplace_back();
      continue;
    }
    std::vector<int> map(item.categories, -1);
    for (std::size_t c = 0; c < cats.size(); ++c) {
      for (int k : cats[c]) map[k] = static_cast<int>(c);
    }
    ItemSpec out = item;
    out.categories = static_cast<int>(cats.size());
    if (out.categories == 2 && item.kind != ItemKind::binary) {
      out.kind = ItemKind::binary;
      res.log.push_back("item " + item.id + ": now binary");
    }
    res.category_map.push_back(map);
    kept_items.push_back(out);
    kept.push_back(i);
  }
  ResponseMatrix out(kept_items, data.n_individuals());
  out.set_individual_ids(data.individual_ids());
  for (std::size_t c = 0; c < kept.size(); ++c) {
    const auto& map = res.category_map[kept[c]];
    for (std::size_t j = 0; j < data.n_individuals(); ++j) {
      const int k = data.response(j, kept[c]);
      out.set_response(j, c, k == kMissing ? kMissing : map[k]);
    }
  }
  res.data = std::move(out);
  return res;
}

ResponseMatrix merge_items(const ResponseMatrix& data, const ItemMerge& merge) {
  if (merge.sources.empty()) throw ConfigError("item merge '" + merge.id + "' has no sources");
  std::vector<std::size_t> src;
  for (const auto& id : merge.sources) {
    const auto i = data.item_index(id);
    if (!i) throw DataError("item merge '" + merge.id + "': unknown item '" + id + "'");
    src.push_back(*i);
  }
  int k_max = 0;
  for (auto i : src) k_max = std::max(k_max, data.items()[i].categories);
  ItemSpec merged{merge.id, k_max == 2 ? ItemKind::binary : ItemKind::ordinal, k_max, merge.label};
  std::vector<ItemSpec> items;
  std::vector<int> from;  // source column or -1 for the merged item
  const std::size_t first = *std::min_element(src.begin(), src.end());
  for (std::size_t i = 0; i < data.n_items(); ++i) {
    if (i == first) {
      items.push_back(merged);
      from.push_back(-1);
    }
    if (std::find(src.begin(), src.end(), i) == src.end()) {
      items.push_back(data.items()[i]);
      from.push_back(static_cast<int>(i));
    }
  }
  ResponseMatrix out(items, data.n_individuals());
  out.set_individual_ids(data.individual_ids());
  for (std::size_t j = 0; j < data.n_individuals(); ++j) {
    for (std::size_t c = 0; c < items.size(); ++c) {
      if (from[c] >= 0) {
        out.set_response(j, c, data.response(j, from[c]));
        continue;
      }
      int best = kMissing;
      for (auto i : src) best = std::max(best, data.response(j, i));
      out.set_response(j, c, best);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Simulation

SimulatedCohort simulate_cohort(const SimulationSpec& spec) {
  const ModelSpec& model = spec.model;
  validate(model);
  if (model.structural) throw ModelError("simulation takes group and covariate effects, not a structural model");
  const std::size_t G = spec.groups.size();
  if (G == 0 || spec.group_share.size() != G) throw ModelError("simulation needs groups with matching shares");
  double share_sum = 0.0;
  for (double s : spec.group_share) {
    if (s < 0) throw ModelError("group shares must be nonnegative");
    share_sum += s;
  }
  if (std::abs(share_sum - 1.0) > 1e-9) throw ModelError("group shares must sum to 1");
  const bool discrete = model.is_discrete();
  const int S = model.dims();
  const int D = discrete ? model.n_classes() : S;
  if (spec.group_effect.size() != 0 && (spec.group_effect.rows() != static_cast<Eigen::Index>(G) ||
                                        spec.group_effect.cols() != D)) {
    throw ModelError("group effect must be G x " + std::to_string(D));
  }
  for (const auto& cov : spec.covariates) {
    const bool numeric = cov.levels.empty();
    if (numeric && (cov.mean.size() != static_cast<Eigen::Index>(G) || cov.sd.size() != static_cast<Eigen::Index>(G))) {
      throw ModelError("numeric covariate '" + cov.name + "' needs a mean and sd per group");
    }
    if (!numeric && (cov.level_probs.rows() != static_cast<Eigen::Index>(G) ||
                     cov.level_probs.cols() != static_cast<Eigen::Index>(cov.levels.size()))) {
      throw ModelError("categorical covariate '" + cov.name + "' needs G x L level probabilities");
    }
    const Eigen::Index rows = numeric ? 1 : static_cast<Eigen::Index>(cov.levels.size());
    if (cov.effect.size() != 0 && (cov.effect.rows() != rows || cov.effect.cols() != D)) {
      throw ModelError("covariate '" + cov.name + "' effect has the wrong shape");
    }
  }
  if (!spec.eligibility.empty() && static_cast<int>(spec.eligibility.size()) != model.n_items()) {
    throw ModelError("eligibility needs one probability per item");
  }

  SimulatedCohort out;
  ResponseMatrix data(model.items, spec.n);
  CovariateTable& table = out.cohort.covariates;
  for (const auto& cov : spec.covariates) table.names.push_back(cov.name);
  table.values.assign(spec.n, std::vector<std::string>(spec.covariates.size()));
  table.group.resize(spec.n);
  table.ids.resize(spec.n);
  out.truth.group.resize(spec.n);
  out.truth.theta.resize(static_cast<Eigen::Index>(spec.n), S);
  if (discrete) out.truth.klass.resize(spec.n);

  Eigen::MatrixXd chol;
  Eigen::VectorXd log_prior;
  if (discrete) {
    log_prior = std::get<DiscreteLatent>(model.latent).prior.array().log();
  } else {
    chol = checked_cholesky(std::get<NormalLatent>(model.latent).cov);
  }
  std::vector<double> probs;
  std::vector<double> lp;
  for (std::size_t j = 0; j < spec.n; ++j) {
    std::mt19937_64 rng(derive_seed(spec.seed, static_cast<std::uint64_t>(j)));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const int g = sample_categorical(spec.group_share.data(), static_cast<int>(G), rng);
    out.truth.group[j] = g;
    table.group[j] = spec.groups[g];
    table.ids[j] = std::to_string(j + 1);
    Eigen::VectorXd shift = Eigen::VectorXd::Zero(D);
    if (spec.group_effect.size() != 0) shift += spec.group_effect.row(g).transpose();
    for (std::size_t v = 0; v < spec.covariates.size(); ++v) {
      const SimCovariate& cov = spec.covariates[v];
      if (cov.levels.empty()) {
        const double x = cov.mean(g) + cov.sd(g) * normal(rng);
        table.values[j][v] = format_double(x);
        if (cov.effect.size() != 0) shift += x * cov.effect.row(0).transpose();
      } else {
        probs.resize(cov.levels.size());
        for (std::size_t l = 0; l < cov.levels.size(); ++l) probs[l] = cov.level_probs(g, l);
        const int l = sample_categorical(probs.data(), static_cast<int>(probs.size()), rng);
        table.values[j][v] = cov.levels[l];
        if (cov.effect.size() != 0) shift += cov.effect.row(l).transpose();
      }
    }
    Eigen::VectorXd theta(S);
    if (discrete) {
      const auto& latent = std::get<DiscreteLatent>(model.latent);
      Eigen::VectorXd w = log_prior + shift;
      w = (w.array() - w.maxCoeff()).exp();
      w /= w.sum();
      const int c = sample_categorical(w.data(), static_cast<int>(w.size()), rng);
      out.truth.klass[j] = c;
      theta = latent.support.row(c).transpose();
    } else {
      const auto& latent = std::get<NormalLatent>(model.latent);
      Eigen::VectorXd z(S);
      for (int s = 0; s < S; ++s) z(s) = normal(rng);
      theta = latent.mean + shift + chol * z;
    }
    out.truth.theta.row(static_cast<Eigen::Index>(j)) = theta.transpose();
    for (int i = 0; i < model.n_items(); ++i) {
      const double u = unif(rng);
      if (!spec.eligibility.empty() && u >= spec.eligibility[i]) continue;
      const auto& p = model.params[i];
      lp.resize(p.categories);
      probs.resize(p.categories);
      p.log_probs(theta, lp.data());
      for (int k = 0; k < p.categories; ++k) probs[k] = std::exp(lp[k]);
      data.set_response(j, i, sample_categorical(probs.data(), p.categories, rng));
    }
  }
  data.set_individual_ids(table.ids);
  out.cohort.responses = std::move(data);
  return out;
}

// ---------------------------------------------------------------------------
// Model serialisation

std::string model_to_json(const FitResult& fit) {
  const ModelSpec& m = fit.model;
  json items = json::array();
  for (const auto& it : m.items) {
    items.push_back({{"id", it.id}, {"kind", to_string(it.kind)}, {"categories", it.categories}, {"label", it.label}});
  }
  json params = json::array();
  for (const auto& p : m.params) {
    json ip{{"kind", to_string(p.kind)},
            {"categories", p.categories},
            {"slopes", mat_json(p.slopes)},
            {"intercepts", vec_json(p.intercepts)},
            {"slope_fixed", mask_json(p.slope_fixed)},
            {"intercept_fixed", mask_json(p.intercept_fixed)}};
    params.push_back(std::move(ip));
  }
  json latent;
  if (const auto* n = std::get_if<NormalLatent>(&m.latent)) {
    latent = {{"type", "normal"}, {"mean", vec_json(n->mean)}, {"cov", mat_json(n->cov)},
              {"mean_free", n->mean_free}, {"cov_free", n->cov_free}};
  } else {
    const auto& d = std::get<DiscreteLatent>(m.latent);
    latent = {{"type", "discrete"}, {"support", mat_json(d.support)}, {"prior", vec_json(d.prior)},
              {"support_free", d.support_free}};
  }
  json model{{"items", items},
             {"params", params},
             {"latent", latent},
             {"identification", m.identification == Identification::scheme1 ? "scheme1" : "scheme2"},
             {"allocation", m.allocation},
             {"excluded", m.excluded}};
  if (m.structural) model["structural"] = structural_json(*m.structural);

  json integrator;
  if (const auto* rule = std::get_if<QuadratureRule>(&fit.integrator)) {
    integrator = {{"type", "quadrature"},
                  {"kind", rule->kind == QuadratureKind::qmc ? "qmc" : "gauss_hermite_tensor"},
                  {"standard", mat_json(rule->standard)},
                  {"nodes", mat_json(rule->nodes)},
                  {"weights", vec_json(rule->weights)}};
  } else {
    integrator = {{"type", "class_sum"}};
  }
  json trace = json::array();
  for (double x : fit.trace) trace.push_back(num(x));
  json starts = json::array();
  for (double x : fit.start_logliks) starts.push_back(num(x));
  json f{{"loglik", num(fit.loglik)},
         {"n_params", fit.n_params},
         {"trace", trace},
         {"param_names", fit.param_names},
         {"converged", fit.converged},
         {"iterations", fit.iterations},
         {"n_used", fit.n_used},
         {"warnings", fit.warnings},
         {"start_logliks", starts},
         {"best_start", fit.best_start},
         {"integrator", integrator}};
  if (fit.std_errors) f["std_errors"] = vec_json(*fit.std_errors);
  json doc{{"schema_version", kModelSchemaVersion}, {"model", model}, {"fit", f}};
  return doc.dump(1);
}

LoadedModel model_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("model file does not parse: ") + e.what());
  }
  LoadedModel out;
  try {
    if (!doc.is_object() || !doc.contains("schema_version")) throw DataError("model file has no schema_version");
    const int version = doc.at("schema_version").get<int>();
    if (version != kModelSchemaVersion) {
      throw DataError("model schema version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kModelSchemaVersion) + ")");
    }
    auto& warnings = out.warnings;
    check_keys(doc, {"schema_version", "model", "fit"}, "document", warnings);
    const json& jm = doc.at("model");
    check_keys(jm, {"items", "params", "latent", "identification", "allocation", "excluded", "structural"}, "model",
               warnings);
    ModelSpec m;
    for (const auto& it : jm.at("items")) {
      check_keys(it, {"id", "kind", "categories", "label"}, "item", warnings);
      m.items.push_back(ItemSpec{it.at("id").get<std::string>(), item_kind_from_string(it.at("kind").get<std::string>()),
                                 it.at("categories").get<int>(), it.value("label", std::string())});
    }
    for (const auto& jp : jm.at("params")) {
      check_keys(jp, {"kind", "categories", "slopes", "intercepts", "slope_fixed", "intercept_fixed"}, "item params",
                 warnings);
      ItemParams p;
      p.kind = item_kind_from_string(jp.at("kind").get<std::string>());
      p.categories = jp.at("categories").get<int>();
      p.slopes = json_mat(jp.at("slopes"));
      p.intercepts = json_vec(jp.at("intercepts"));
      const json& sf = jp.at("slope_fixed");
      p.slope_fixed.resize(p.slopes.rows(), p.slopes.cols());
      if (static_cast<Eigen::Index>(sf.size()) != p.slopes.rows()) throw DataError("slope_fixed shape mismatch");
      for (Eigen::Index r = 0; r < p.slopes.rows(); ++r) {
        if (static_cast<Eigen::Index>(sf[r].size()) != p.slopes.cols()) throw DataError("slope_fixed shape mismatch");
        for (Eigen::Index c = 0; c < p.slopes.cols(); ++c) p.slope_fixed(r, c) = sf[r][c].get<bool>();
      }
      const json& itf = jp.at("intercept_fixed");
      if (static_cast<Eigen::Index>(itf.size()) != p.intercepts.size()) throw DataError("intercept_fixed shape mismatch");
      p.intercept_fixed.resize(p.intercepts.size());
      for (Eigen::Index k = 0; k < p.intercepts.size(); ++k) p.intercept_fixed(k) = itf[k][0].get<bool>();
      m.params.push_back(std::move(p));
    }
    const json& jl = jm.at("latent");
    const auto type = jl.at("type").get<std::string>();
    if (type == "normal") {
      check_keys(jl, {"type", "mean", "cov", "mean_free", "cov_free"}, "latent", warnings);
      m.latent = NormalLatent{json_vec(jl.at("mean")), json_mat(jl.at("cov")), jl.at("mean_free").get<bool>(),
                              jl.at("cov_free").get<bool>()};
    } else if (type == "discrete") {
      check_keys(jl, {"type", "support", "prior", "support_free"}, "latent", warnings);
      m.latent = DiscreteLatent{json_mat(jl.at("support")), json_vec(jl.at("prior")), jl.at("support_free").get<bool>()};
    } else {
      throw DataError("unknown latent type '" + type + "'");
    }
    const auto ident = jm.at("identification").get<std::string>();
    if (ident != "scheme1" && ident != "scheme2") throw DataError("unknown identification '" + ident + "'");
    m.identification = ident == "scheme1" ? Identification::scheme1 : Identification::scheme2;
    m.allocation = jm.at("allocation").get<std::vector<int>>();
    m.excluded = jm.at("excluded").get<std::vector<bool>>();
    if (jm.contains("structural")) m.structural = json_structural(jm.at("structural"), warnings);
    validate(m);

    const json& jf = doc.at("fit");
    check_keys(jf, {"loglik", "n_params", "trace", "param_names", "converged", "iterations", "n_used", "warnings",
                    "start_logliks", "best_start", "integrator", "std_errors"},
               "fit", warnings);
    FitResult& fit = out.fit;
    fit.model = std::move(m);
    fit.loglik = from_num(jf.at("loglik"));
    fit.n_params = jf.at("n_params").get<int>();
    for (const auto& x : jf.at("trace")) fit.trace.push_back(from_num(x));
    fit.param_names = jf.at("param_names").get<std::vector<std::string>>();
    fit.converged = jf.at("converged").get<bool>();
    fit.iterations = jf.at("iterations").get<int>();
    fit.n_used = jf.at("n_used").get<int>();
    fit.warnings = jf.at("warnings").get<std::vector<std::string>>();
    for (const auto& x : jf.at("start_logliks")) fit.start_logliks.push_back(from_num(x));
    fit.best_start = jf.at("best_start").get<int>();
    if (jf.contains("std_errors")) fit.std_errors = json_vec(jf.at("std_errors"));
    const json& ji = jf.at("integrator");
    if (ji.at("type").get<std::string>() == "quadrature") {
      check_keys(ji, {"type", "kind", "standard", "nodes", "weights"}, "integrator", warnings);
      QuadratureRule rule;
      rule.kind = ji.at("kind").get<std::string>() == "qmc" ? QuadratureKind::qmc : QuadratureKind::gauss_hermite_tensor;
      rule.standard = json_mat(ji.at("standard"));
      rule.nodes = json_mat(ji.at("nodes"));
      rule.weights = json_vec(ji.at("weights"));
      fit.integrator = std::move(rule);
    } else {
      fit.integrator = ClassSum{};
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("model file is malformed: ") + e.what());
  } catch (const ModelError& e) {
    throw DataError(std::string("model file holds an invalid model: ") + e.what());
  }
  return out;
}

void save_model(const std::string& path, const FitResult& fit) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << model_to_json(fit) << '\n';
  if (!out) throw DataError("write failed for '" + path + "'");
}

LoadedModel load_model(const std::string& path) { return model_from_json(read_file(path)); }

}  // namespace qualirt
