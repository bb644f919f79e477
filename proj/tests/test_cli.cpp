#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ptensor/runner.hpp"

namespace fs = std::filesystem;
using ptensor::list_tasks;

namespace {

const fs::path kSource = PTENSOR_SOURCE_DIR;
const std::string kCli = PTENSOR_CLI_PATH;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ptensor_cli_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  return p;
}

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome cli(const std::string& args) {
  Outcome r;
  FILE* p = ::popen((kCli + " " + args + " 2>/dev/null").c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int st = ::pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

fs::path write_config(const std::string& name, const nlohmann::json& j) {
  const fs::path dir = scratch("configs_" + name);
  fs::create_directories(dir);
  const fs::path p = dir / (name + ".json");
  std::ofstream(p) << j.dump(2);
  return p;
}

nlohmann::json bundled(const std::string& name) { return nlohmann::json::parse(slurp(kSource / "configs" / (name + ".json"))); }

bool has_path(const nlohmann::json& j, const std::string& dotted) {
  const nlohmann::json* cur = &j;
  std::stringstream ss(dotted);
  std::string key;
  while (std::getline(ss, key, '.')) {
    if (!cur->is_object() || !cur->contains(key)) return false;
    cur = &(*cur)[key];
  }
  return true;
}

}  // namespace

TEST(ListTasks, CatalogueOrderAndRequiredFields) {
  const auto r = cli("list-tasks");
  ASSERT_EQ(r.code, 0);
  const std::vector<std::string> names{"tensors", "properties", "vanish_search", "equivalence", "convergence",
                                       "helmholtz_convergence"};
  ASSERT_EQ(list_tasks().size(), names.size());
  std::size_t pos = 0;
  for (std::size_t k = 0; k < names.size(); ++k) {
    EXPECT_EQ(list_tasks()[k].name, names[k]);
    const auto at = r.out.find(names[k] + "\t", pos);
    ASSERT_NE(at, std::string::npos) << names[k];
    pos = at + 1;
    EXPECT_FALSE(list_tasks()[k].required.empty());
  }
  EXPECT_EQ(r.out, ptensor::list_tasks_text());
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("run").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("--threads -3 list-tasks").code, 2);
  EXPECT_EQ(cli("--help").code, 0);
  EXPECT_EQ(cli("run /nonexistent/config.json").code, 2);
}

TEST(Cli, SchemaErrorsExitTwoWithReport) {
  auto cfg = bundled("tensors_zero");
  cfg.erase("task");
  const auto out = scratch("missing_task");
  EXPECT_EQ(cli("--output-dir " + out.string() + " run " + write_config("missing_task", cfg).string()).code, 2);
  const auto rep = nlohmann::json::parse(slurp(out / "report.json"));
  EXPECT_EQ(rep["status"], "config_error");
  EXPECT_EQ(rep["field"], "task");

  auto bad_dim = bundled("convergence");
  bad_dim["dimension"] = 3;
  EXPECT_EQ(cli("--output-dir " + scratch("bad_dim").string() + " run " + write_config("bad_dim", bad_dim).string()).code, 2);

  auto bad_profile = bundled("tensors_zero");
  bad_profile["inclusion"]["profile"] = {{"family", "no_such_family"}};
  const auto outp = scratch("bad_profile");
  EXPECT_EQ(cli("--output-dir " + outp.string() + " run " + write_config("bad_profile", bad_profile).string()).code, 2);
  EXPECT_EQ(nlohmann::json::parse(slurp(outp / "report.json"))["status"], "config_error");

  const fs::path garbage = scratch("garbage");
  fs::create_directories(garbage);
  std::ofstream(garbage / "g.json") << "{ not json";
  EXPECT_EQ(cli("run " + (garbage / "g.json").string()).code, 2);
}

TEST(Cli, ZeroTensorRunPassesAndWritesArtifacts) {
  const auto out = scratch("zero");
  const auto r = cli("--output-dir " + out.string() + " run " + (kSource / "configs/tensors_zero.json").string());
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"report.json", "tensors.json", "rates.csv", "timings.json"}) EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_TRUE(fs::is_directory(out / "traces"));
  const auto rep = nlohmann::json::parse(slurp(out / "report.json"));
  EXPECT_TRUE(rep["all_pass"].get<bool>());
  EXPECT_EQ(rep["status"], "pass");
  EXPECT_FALSE(rep["checks"].empty());
  EXPECT_NE(r.out.find("PASS "), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL "), std::string::npos);
  bool dump = false;
  for (const auto& e : fs::directory_iterator(out)) dump = dump || e.path().extension() == ".txt";
  EXPECT_TRUE(dump);
}

TEST(Cli, ThresholdFailureExitsOne) {
  auto cfg = bundled("tensors_disk");
  cfg["inclusion"]["mesh"]["rings"] = 4;
  cfg["tensors"]["expected_first_order"] = {{10.0, 0.0}, {0.0, 10.0}};
  const auto out = scratch("threshold");
  const auto r = cli("--output-dir " + out.string() + " run " + write_config("threshold", cfg).string());
  EXPECT_EQ(r.code, 1);
  const auto rep = nlohmann::json::parse(slurp(out / "report.json"));
  EXPECT_EQ(rep["status"], "threshold_failure");
  EXPECT_NE(r.out.find("FAIL "), std::string::npos);
}

TEST(Cli, OutputsAreBitwiseReproducible) {
  auto cfg = bundled("properties");
  cfg["inclusion"]["mesh"]["rings"] = 4;
  const auto path = write_config("repro", cfg).string();
  const auto a = scratch("repro_a"), b = scratch("repro_b");
  ASSERT_EQ(cli("--output-dir " + a.string() + " run " + path).code, 0);
  ASSERT_EQ(cli("--threads 1 --output-dir " + b.string() + " run " + path).code, 0);
  for (const char* f : {"report.json", "tensors.json", "rates.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

TEST(Cli, SeedOverrideChangesRandomizedChecks) {
  auto cfg = bundled("properties");
  cfg["inclusion"]["mesh"]["rings"] = 4;
  const auto path = write_config("seed", cfg).string();
  const auto a = scratch("seed_a"), b = scratch("seed_b");
  ASSERT_EQ(cli("--output-dir " + a.string() + " run " + path).code, 0);
  ASSERT_EQ(cli("--seed 99 --output-dir " + b.string() + " run " + path).code, 0);
  const auto ra = nlohmann::json::parse(slurp(a / "report.json")), rb = nlohmann::json::parse(slurp(b / "report.json"));
  EXPECT_EQ(ra["seed"], 11);
  EXPECT_EQ(rb["seed"], 99);
  EXPECT_NE(ra["config_hash"], rb["config_hash"]);
  EXPECT_NE(ra["results"].dump(), rb["results"].dump());
}

TEST(BundledConfigs, KnownTasksWithRequiredFields) {
  std::size_t count = 0;
  for (const auto& e : fs::directory_iterator(kSource / "configs")) {
    if (e.path().extension() != ".json") continue;
    ++count;
    const auto cfg = nlohmann::json::parse(slurp(e.path()));
    const std::string task = cfg.at("task");
    const auto it = std::find_if(list_tasks().begin(), list_tasks().end(), [&](const auto& t) { return t.name == task; });
    ASSERT_NE(it, list_tasks().end()) << e.path();
    for (const auto& req : it->required) {
      // "dimension" and "background" have defaults; the rest must be spelled out.
      if (req == "dimension" || req == "background") continue;
      EXPECT_TRUE(has_path(cfg, req)) << e.path() << " lacks " << req;
    }
  }
  EXPECT_GE(count, list_tasks().size());
}

TEST(BundledConfigs, EveryConfigRunsAndPasses) {
  for (const auto& e : fs::directory_iterator(kSource / "configs")) {
    if (e.path().extension() != ".json") continue;
    ptensor::RunOptions ro;
    ro.output_dir = scratch("bundled_" + e.path().stem().string()).string();
    const auto rr = ptensor::run_file(e.path().string(), ro);
    EXPECT_EQ(rr.exit_code, 0) << e.path() << ": " << rr.message << "\n" << rr.report["checks"].dump(1);
    EXPECT_TRUE(fs::exists(fs::path(ro.output_dir) / "report.json")) << e.path();
  }
}
