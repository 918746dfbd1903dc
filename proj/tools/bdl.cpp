#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bdl/parallel.hpp"
#include "commands.hpp"

namespace {

constexpr const char* kEvalColumns =
    "CSV columns (report_<denoiser>.csv, --csv): denoiser,sigma_lo,sigma_hi,L,L_se,R,R_se,V,V_se,gap,gap_se.\n"
    "One row per log-sigma bin; L = E||f-x0||^2, R = E||f-E[x0|x_t]||^2, V = E||E[x0|x_t]-x0||^2.";
constexpr const char* kBoundsColumns =
    "CSV columns: context,N,K,m,U,delta_b,delta_v,rho,gamma,epsilon,EV,rademacher,L_bar,W,C,log_covering,\n"
    "p_e1,p_e2,p_e3,R_bound,p_fail. One row per (N, K); the covering N is N*K.";
constexpr const char* kTrainColumns =
    "CSV columns (curves/*.csv): step,epoch,loss,loss_q1,loss_q2,loss_q3,loss_q4; the q columns are the mean\n"
    "loss in the four log-sigma quartiles of the schedule (NaN when a quartile saw no draws).";
constexpr const char* kSampleColumns =
    "CSV columns: sample,x0,...,x{m-1} (one generated sample per row). With --trajectory each\n"
    "trajectory_<denoiser>_<i>.csv has step,t,sigma,norm.";
constexpr const char* kSweepColumns = "CSV columns (r_vs_n0.csv): n0,R_bootstrap,R_bootstrap_se,R_baseline,R_baseline_se.";
constexpr const char* kGenColumns =
    "Writes <data-dir>/s0.bin, calibration.bin and view_<id>.bin with JSON sidecars, spec.json and\n"
    "data_manifest.json. Binary layout: 16-byte header then little-endian float64 samples.";

void add_config_options(CLI::App* cmd, bdl::app::CommandContext& ctx, bool required) {
  auto* opt = cmd->add_option("-c,--config", ctx.config, "experiment config (YAML)");
  if (required) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", ctx.overrides, "override a config key, e.g. --set residual.lambda=0.1")
      ->allow_extra_args(false);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace bdl::app;
  CLI::App app{"Bootstrapped diffusion on synthetic Gaussian-mixture data"};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 ok, 2 configuration or missing-artifact error, 3 numeric failure, 4 acceptance failure.");

  int threads = 0;
  std::string data_dir;
  app.add_option("--threads", threads, "worker threads (0 = all cores; results do not depend on the count)")
      ->check(CLI::NonNegativeNumber);
  app.add_option("--data-dir", data_dir, "dataset directory for gen (default: $BDL_DATA_DIR, then <output_dir>/data)");

  CommandContext ctx;
  std::string out_dir;

  auto* gen = app.add_subcommand("gen", "generate the experiment datasets");
  add_config_options(gen, ctx, true);
  gen->add_option("-o,--out", out_dir, "output directory (replaces output_dir)");
  gen->footer(kGenColumns);

  auto* views = app.add_subcommand("train-views", "train the view denoisers only");
  add_config_options(views, ctx, true);
  views->add_option("-o,--out", out_dir, "output directory (replaces output_dir)");
  views->footer(kTrainColumns);

  auto* boot = app.add_subcommand("bootstrap", "run or reproduce the bootstrap pipeline");
  boot->require_subcommand(1);
  auto* run = boot->add_subcommand("run", "run the full pipeline and write manifest.json");
  add_config_options(run, ctx, true);
  run->add_option("-o,--out", out_dir, "output directory (replaces output_dir)");
  run->footer(kTrainColumns);
  std::string manifest;
  std::string rerun_out;
  auto* rerun = boot->add_subcommand("rerun", "rerun from a manifest and compare artifact hashes");
  rerun->add_option("-m,--manifest", manifest, "manifest.json of the run to reproduce")->required();
  rerun->add_option("-o,--out", rerun_out, "directory for the rerun")->required();
  std::vector<std::size_t> n0_values;
  auto* sweep = boot->add_subcommand("sweep", "bootstrap and baseline R over several N0");
  add_config_options(sweep, ctx, true);
  sweep->add_option("--n0", n0_values, "full-resolution set sizes")->required()->delimiter(',');
  sweep->add_option("-o,--out", out_dir, "output directory (replaces output_dir)");
  sweep->footer(kSweepColumns);

  SampleRequest sreq;
  std::string sample_manifest;
  std::string sample_csv;
  std::size_t sample_count = 0;
  int sample_steps = 0;
  std::string sample_denoiser;
  auto* sample = app.add_subcommand("sample", "draw samples with the probability-flow ODE");
  sample->add_option("-m,--manifest", sample_manifest, "pipeline manifest.json")->required()->check(CLI::ExistingFile);
  add_config_options(sample, ctx, false);
  sample->add_option("-n,--count", sample_count, "number of samples (default: sample.count)");
  sample->add_option("--steps", sample_steps, "solver steps (default: sample.steps)");
  sample->add_option("--denoiser", sample_denoiser, "combined or baseline")->check(CLI::IsMember({"combined", "baseline"}));
  sample->add_option("--csv", sample_csv, "output CSV path");
  sample->add_flag("--trajectory", sreq.trajectory, "also write per-sample solver trajectories");
  sample->add_option("-o,--out", out_dir, "output directory (default: <manifest dir>/samples)");
  sample->footer(kSampleColumns);

  std::string eval_manifest;
  bool eval_csv = false;
  auto* eval = app.add_subcommand("eval", "estimate L, R, V and the path KL against the exact oracle");
  eval->add_option("-m,--manifest", eval_manifest, "pipeline manifest.json")->required()->check(CLI::ExistingFile);
  add_config_options(eval, ctx, false);
  eval->add_flag("--csv", eval_csv, "print per-bin CSV rows instead of the text table");
  eval->add_option("-o,--out", out_dir, "output directory (default: <manifest dir>/eval)");
  eval->footer(kEvalColumns);

  auto* bounds = app.add_subcommand("bounds", "generalization-bound sweep over N and K");
  add_config_options(bounds, ctx, false);
  bounds->add_option("-o,--out", out_dir, "also write bounds.csv and plots here");
  bounds->footer(kBoundsColumns);
  auto* bounds_sweep = bounds->add_subcommand("sweep", "same as 'bounds'");
  add_config_options(bounds_sweep, ctx, false);
  bounds_sweep->add_option("-o,--out", out_dir, "also write bounds.csv and plots here");
  bounds_sweep->footer(kBoundsColumns);

  AcceptanceOptions acc;
  std::vector<int> only;
  std::string artifacts;
  bool quiet = false;
  auto* accept = app.add_subcommand("accept", "run the acceptance experiment suite");
  accept->add_option("--only", only, "criterion numbers to run (1-10)")->check(CLI::Range(1, kCriterionCount));
  accept->add_option("--artifacts", artifacts, "write experiment plots and tables here");
  accept->add_flag("-q,--quiet", quiet, "suppress progress messages");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  bdl::set_thread_count(threads);
  if (!data_dir.empty()) ctx.data_dir = data_dir;
  if (!out_dir.empty()) ctx.out_dir = out_dir;

  return guarded(
      [&]() -> int {
        if (gen->parsed()) return cmd_gen(ctx);
        if (views->parsed()) return cmd_train_views(ctx);
        if (run->parsed()) return cmd_bootstrap(ctx);
        if (rerun->parsed()) return cmd_bootstrap_rerun(manifest, rerun_out, std::cout);
        if (sweep->parsed()) return cmd_bootstrap_sweep(ctx, n0_values);
        if (sample->parsed()) {
          sreq.manifest = sample_manifest;
          if (sample_count > 0) sreq.count = sample_count;
          if (sample_steps > 0) sreq.steps = sample_steps;
          if (!sample_denoiser.empty()) sreq.denoiser = sample_denoiser;
          if (!sample_csv.empty()) sreq.csv = sample_csv;
          return cmd_sample(ctx, sreq);
        }
        if (eval->parsed()) return cmd_eval(ctx, eval_manifest, eval_csv);
        if (bounds->parsed()) return cmd_bounds(ctx);
        if (accept->parsed()) {
          acc.only.insert(only.begin(), only.end());
          if (!artifacts.empty()) acc.artifacts_dir = artifacts;
          if (!quiet) acc.log = &std::cerr;
          return cmd_accept(acc, std::cout);
        }
        return kExitConfig;
      },
      std::cerr);
}
