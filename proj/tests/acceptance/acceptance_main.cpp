#include <CLI11.hpp>

#include <iostream>

#include "acceptance.hpp"
#include "commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Runs the acceptance criteria and prints one PASS/FAIL line per criterion."};
  std::vector<int> only;
  std::string artifacts;
  bool quiet = false;
  app.add_option("--only", only, "Criterion ids to run (default: all)")->check(CLI::Range(1, bdl::app::kCriterionCount));
  app.add_option("--artifacts", artifacts, "Directory for experiment tables and plots");
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : bdl::app::kExitConfig;
  }

  bdl::app::AcceptanceOptions opts;
  opts.only.insert(only.begin(), only.end());
  if (!artifacts.empty()) opts.artifacts_dir = artifacts;
  if (!quiet) opts.log = &std::cerr;
  return bdl::app::guarded([&] { return bdl::app::cmd_accept(opts, std::cout); }, std::cerr);
}
