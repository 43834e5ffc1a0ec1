#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qualirt/data_io.hpp"

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("qualirt_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& sub = "") const { return (path / sub).string(); }
};

int run(const std::string& args) {
  const std::string cmd = std::string(QUALIRT_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("simulate is fast and reproducible under a seed") {
  TempDir a, b, c;
  const auto t0 = std::chrono::steady_clock::now();
  CHECK(run("--out " + a.str() + " --seed 5 simulate") == 0);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 5.0);
  CHECK(run("--out " + b.str() + " --seed 5 simulate") == 0);
  CHECK(run("--out " + c.str() + " --seed 6 simulate") == 0);
  const auto resp = fs::path("cohort") / "responses.csv";
  CHECK(slurp(a.path / resp) == slurp(b.path / resp));
  CHECK(slurp(a.path / resp) != slurp(c.path / resp));
  CHECK(fs::exists(a.path / "cohort" / "truth.csv"));
}

TEST_CASE("usage and configuration errors exit with 1") {
  TempDir t;
  CHECK(run("") == 1);
  CHECK(run("--out " + t.str() + " frobnicate") == 1);
  CHECK(run("--out " + t.str() + " --set model.no_such_key=3 simulate") == 1);
  CHECK(run("--out " + t.str() + " --set match.template_size=abc simulate") == 1);
  std::ofstream(t.path / "bad.json") << "{\"seed\": ";
  CHECK(run("--config " + t.str("bad.json") + " --out " + t.str() + " simulate") == 1);
  CHECK(run("--help") == 0);
}

TEST_CASE("matching more individuals than a group holds is a data error") {
  TempDir t;
  REQUIRE(run("--out " + t.str() + " simulate") == 0);
  REQUIRE(run("--out " + t.str() + " preprocess") == 0);
  CHECK(run("--out " + t.str() + " match --per-group 5000") == 2);
}

TEST_CASE("stages before their inputs exist fail with a data error") {
  TempDir t;
  CHECK(run("--out " + t.str() + " fit") == 2);
  CHECK(run("--out " + t.str() + " report") == 2);
  const std::string report = slurp(t.path / "report.md");
  CHECK(report.find("Missing input") != std::string::npos);
}

TEST_CASE("full pipeline: outputs, determinism, held-out item and report idempotence") {
  TempDir a, b;
  REQUIRE(run("--out " + a.str() + " run") == 0);
  REQUIRE(run("--out " + b.str() + " run") == 0);
  const auto fa = files_under(a.path), fb = files_under(b.path);
  REQUIRE(fa == fb);
  for (const auto& f : fa) CHECK_MESSAGE(slurp(a.path / f) == slurp(b.path / f), f.string());

  for (const char* f : {"match/balance_post.csv", "fit/class_scan.csv", "fit/dimensionality.csv", "fit/support.csv",
                        "fit/item_parameters.csv", "disparity/table.csv", "disparity/class_distribution.csv",
                        "disparity/class_profiles.csv", "report.md"}) {
    CHECK_MESSAGE(fs::exists(a.path / f), f);
  }

  const auto loaded = qualirt::load_model((a.path / "fit" / "model.json").string());
  for (const auto& item : loaded.fit.model.items) CHECK(item.id != "h");
  const auto disp = qualirt::load_model((a.path / "disparity" / "model.json").string());
  for (const auto& item : disp.fit.model.items) CHECK(item.id != "h");

  // Every group column of the post-match balance equals the template column
  // when no slack remains.
  const auto summary = qualirt::read_csv((a.path / "match" / "summary.csv").string());
  bool zero_slack = true;
  for (std::size_t r = 1; r < summary.size(); ++r) zero_slack = zero_slack && summary[r][3] == "0";
  if (zero_slack) {
    const auto bal = qualirt::read_csv((a.path / "match" / "balance_post.csv").string());
    for (std::size_t r = 2; r < bal.size(); ++r) {
      for (std::size_t c = 4; c < bal[r].size(); ++c) CHECK(bal[r][c] == bal[r][3]);
    }
  }

  const std::string before = slurp(a.path / "report.md");
  CHECK(run("--out " + a.str() + " report") == 0);
  CHECK(slurp(a.path / "report.md") == before);
}

TEST_CASE("normal family fit") {
  TempDir t;
  REQUIRE(run("--out " + t.str() + " simulate") == 0);
  REQUIRE(run("--out " + t.str() + " preprocess") == 0);
  REQUIRE(run("--out " + t.str() + " match") == 0);
  CHECK(run("--out " + t.str() + " fit --family normal") == 0);
  CHECK(run("--out " + t.str() + " --set model.family=normal disparity") == 0);
  CHECK(fs::exists(t.path / "disparity" / "eap_by_group.csv"));
}
