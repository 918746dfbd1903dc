#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdl/bootstrap.hpp"
#include "bdl/bounds.hpp"
#include "bdl/evalkit.hpp"
#include "bdl/synthdata.hpp"

namespace bdl::app {

struct KlSection {
  bool enabled = true;
  KlOptions options;
};

struct SampleSection {
  std::size_t count = 16;
  int steps = 64;
  bool stochastic = false;
  // "combined" or "baseline".
  std::string denoiser = "combined";
  std::uint64_t seed = 0;
};

struct BoundsSection {
  BoundInputs inputs;
  CoveringParams cover;
  std::vector<long long> N{100};
  std::vector<long long> K{1};
  BoundContext context = BoundContext::denoiser;
};

// One experiment: the synthetic spec, the bootstrap pipeline and the settings
// of the downstream commands. The pipeline seed is the top-level seed.
struct ExperimentConfig {
  SyntheticSpecParams spec;
  PipelineConfig pipeline;
  EvalOptions eval;
  KlSection kl;
  SampleSection sample;
  BoundsSection bounds;
  std::string output_dir = "run";

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

// Dotted key path (list items as [i]) to the 1-based source line.
using LineMap = std::map<std::string, int>;

// Parses YAML text into JSON. Quoted scalars stay strings; unquoted ones are
// read as null, bool, integer or floating point when they parse as such.
nlohmann::json yaml_to_json(const std::string& text, LineMap* lines = nullptr);

// Applies "a.b.c=value" overrides; the value is parsed as a YAML scalar or flow node.
void apply_overrides(nlohmann::json& j, const std::vector<std::string>& overrides);

// Reads, overrides and validates a config file. Schema errors are rethrown as
// ConfigError prefixed with "file:line:" when the offending key can be located.
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

// Same, from text; `origin` names the source in error messages.
ExperimentConfig parse_experiment_config(const std::string& text, const std::string& origin,
                                         const std::vector<std::string>& overrides = {});

}  // namespace bdl::app
