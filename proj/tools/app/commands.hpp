#pragma once

#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "acceptance.hpp"
#include "config.hpp"

namespace bdl::app {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitAcceptance = 4;

// Shared inputs of every subcommand.
struct CommandContext {
  // Empty means built-in defaults (still subject to overrides).
  std::filesystem::path config;
  std::vector<std::string> overrides;
  // Replaces output_dir from the config.
  std::optional<std::filesystem::path> out_dir;
  // Dataset location for gen; falls back to BDL_DATA_DIR, then <output_dir>/data.
  std::optional<std::filesystem::path> data_dir;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

ExperimentConfig resolve_config(const CommandContext& ctx);
std::filesystem::path output_dir(const CommandContext& ctx, const ExperimentConfig& cfg);
std::filesystem::path data_dir(const CommandContext& ctx, const ExperimentConfig& cfg);

// Maps library errors to exit codes: configuration, input and missing-artifact
// problems give 2, numerical and domain failures give 3.
int exit_code_for(const std::exception& e);

// Runs fn, printing any error to err and returning its exit code.
int guarded(const std::function<int()>& fn, std::ostream& err);

// Writes the datasets of the experiment (S0, calibration set, one per view group).
int cmd_gen(const CommandContext& ctx);

// Trains the view denoisers only; writes views_manifest.json.
int cmd_train_views(const CommandContext& ctx);

// Runs the full pipeline; writes manifest.json and the artifacts it lists.
int cmd_bootstrap(const CommandContext& ctx);

// Reruns the pipeline recorded in a manifest and compares artifact hashes.
int cmd_bootstrap_rerun(const std::filesystem::path& manifest, const std::filesystem::path& out_dir,
                        std::ostream& out);

// Bootstrap and baseline R over a list of full-resolution set sizes.
int cmd_bootstrap_sweep(const CommandContext& ctx, const std::vector<std::size_t>& n0_values);

struct SampleRequest {
  std::filesystem::path manifest;
  std::optional<std::size_t> count;
  std::optional<int> steps;
  std::optional<std::string> denoiser;
  std::optional<std::filesystem::path> csv;
  bool trajectory = false;
};

int cmd_sample(const CommandContext& ctx, const SampleRequest& req);

// L, R, V per sigma bin and the path KL against the oracle score.
int cmd_eval(const CommandContext& ctx, const std::filesystem::path& manifest, bool csv);

// Bound sweep over the N x K grid of the bounds section; CSV goes to ctx.out.
int cmd_bounds(const CommandContext& ctx);

int cmd_accept(const AcceptanceOptions& opts, std::ostream& out);

}  // namespace bdl::app
