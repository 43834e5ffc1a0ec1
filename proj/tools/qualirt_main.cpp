#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qualirt/errors.hpp"
#include "qualirt/pipeline.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> threads;
  std::vector<std::string> overrides;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-variable quality measurement and disparity estimation"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Root random seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--set", g.overrides, "Config override key.path=value (repeatable)");
  app.fallthrough();

  std::optional<std::size_t> sim_n;
  auto* simulate = app.add_subcommand("simulate", "Simulate a synthetic cohort");
  simulate->add_option("--n", sim_n, "Cohort size");
  auto* preprocess = app.add_subcommand("preprocess", "Hold out the validation item and collapse rare categories");
  std::optional<int> template_size, per_group;
  auto* match = app.add_subcommand("match", "Template matching of each group");
  match->add_option("--template-size", template_size, "Template sample size");
  match->add_option("--per-group", per_group, "Matched individuals per group");
  std::optional<std::string> family;
  std::optional<int> classes;
  auto* fit = app.add_subcommand("fit", "Fit exploratory and latent-class models");
  fit->add_option("--family", family, "latent_class or normal");
  fit->add_option("--classes", classes, "Fix the number of classes");
  auto* disparity = app.add_subcommand("disparity", "Estimate group disparities");
  auto* report = app.add_subcommand("report", "Write the summary report");
  auto* run = app.add_subcommand("run", "Run every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    qualirt::Json cfg = g.config.empty() ? qualirt::default_config() : qualirt::load_config(g.config);
    for (const auto& o : g.overrides) qualirt::apply_override(cfg, o);
    if (g.seed) cfg["seed"] = *g.seed;
    if (!g.out.empty()) cfg["out"] = g.out;
    if (g.threads) cfg["threads"] = *g.threads;
    if (sim_n) cfg["simulate"]["n"] = *sim_n;
    if (template_size) cfg["match"]["template_size"] = *template_size;
    if (per_group) cfg["match"]["per_group"] = *per_group;
    if (family) cfg["model"]["family"] = *family;
    if (classes) cfg["model"]["classes"]["fixed"] = *classes;
    const qualirt::PipelineConfig pc = qualirt::parse_config(cfg);

    if (simulate->parsed()) qualirt::cmd_simulate(pc);
    if (preprocess->parsed()) qualirt::cmd_preprocess(pc);
    if (match->parsed()) qualirt::cmd_match(pc);
    if (fit->parsed()) qualirt::cmd_fit(pc);
    if (disparity->parsed()) qualirt::cmd_disparity(pc);
    if (report->parsed() || run->parsed()) {
      const int missing = report->parsed() ? qualirt::cmd_report(pc) : qualirt::cmd_run(pc);
      if (missing > 0) {
        std::cerr << "report written with " << missing << " missing input(s)\n";
        return kData;
      }
    }
  } catch (const qualirt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const qualirt::ModelError& e) {
    std::cerr << "model error: " << e.what() << "\n";
    return kUsage;
  } catch (const qualirt::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const qualirt::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  }
  return kOk;
}
