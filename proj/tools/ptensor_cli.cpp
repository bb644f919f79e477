// Command-line front end of the experiment runner.
#include <iostream>

#include <omp.h>

#include <CLI11.hpp>

#include "ptensor/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"ptensor: polarization tensors of smooth small inclusions"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config, output_dir;
  int threads = 0;
  long long seed = -1;
  app.add_option("--output-dir", output_dir, "directory for all artifacts (overrides the config)");
  app.add_option("--threads", threads, "OpenMP threads (0: runtime default)")->check(CLI::NonNegativeNumber);
  app.add_option("--seed", seed, "seed for randomized checks (overrides the config)")->check(CLI::NonNegativeNumber);
  auto* run = app.add_subcommand("run", "run one experiment config");
  run->add_option("config", config, "JSON config file")->required();
  app.add_subcommand("list-tasks", "print the task catalogue");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (threads > 0) omp_set_num_threads(threads);
  if (app.got_subcommand("list-tasks")) {
    std::cout << ptensor::list_tasks_text();
    return 0;
  }
  ptensor::RunOptions ro;
  ro.output_dir = output_dir;
  ro.threads = threads;
  ro.seed = seed;
  const auto rr = ptensor::run_file(config, ro);
  if (rr.exit_code == 2) {
    std::cerr << "error: " << rr.message << "\n";
    return 2;
  }
  for (const auto& c : rr.report["checks"]) std::cout << (c["pass"].get<bool>() ? "PASS " : "FAIL ") << c["name"].get<std::string>() << "\n";
  std::cout << "artifacts: " << rr.output_dir.string() << "\n";
  return rr.exit_code;
}
