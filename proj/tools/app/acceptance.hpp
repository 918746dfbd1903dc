#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace bdl::app {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
  double budget_seconds = 0.0;
};

struct AcceptanceOptions {
  // Criteria to run; empty runs all ten.
  std::set<int> only;
  // Plots and CSV tables of the experiments are written here when set.
  std::optional<std::filesystem::path> artifacts_dir;
  // Progress messages; null silences them.
  std::ostream* log = nullptr;
};

constexpr int kCriterionCount = 10;

std::string criterion_name(int id);

// Runs one criterion at its stated tolerances. The runtime budget counts
// toward the verdict.
CriterionResult run_criterion(int id, const AcceptanceOptions& opts);

// Runs the selected criteria, printing one PASS/FAIL line per criterion to out.
std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& opts, std::ostream& out);

std::string format_result(const CriterionResult& r);

}  // namespace bdl::app
