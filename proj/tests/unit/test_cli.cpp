#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bdl/error.hpp"
#include "bdl/hash.hpp"
#include "commands.hpp"
#include "config.hpp"
#include "svg.hpp"

using namespace bdl;
using namespace bdl::app;
namespace fs = std::filesystem;

namespace {

// A unique scratch directory removed at scope exit.
struct ScratchDir {
  fs::path path;
  explicit ScratchDir(const std::string& name) {
    path = fs::temp_directory_path() /
           ("bdl-cli-" + name + "-" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~ScratchDir() { fs::remove_all(path); }
};

const char* kTinyConfig = R"(seed: 4
spec:
  grid: {height: 8, width: 8, channels: 1}
  block: 4
  global_rank: 2
views:
  - id: patch
    family: patch_tiling
    patch: 4
    samples: 200
    arch: {hidden: [16]}
    train: {epochs: 2, batch_size: 32}
  - id: down
    family: downsample
    factor: 2
    samples: 200
    arch: {hidden: [16]}
    train: {epochs: 2, batch_size: 32}
residual_arch: {hidden: [16]}
residual:
  train: {epochs: 5, batch_size: 32}
eval: {n_mc: 16, bins: 2}
kl: {n_mc: 8, t_quadrature: 4}
)";

CommandContext quiet_context(const fs::path& config, std::ostringstream& sink) {
  CommandContext ctx;
  ctx.config = config;
  ctx.out = &sink;
  ctx.err = &sink;
  return ctx;
}

fs::path write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
  return path;
}

std::string config_error(const std::string& text) {
  try {
    parse_experiment_config(text, "cfg.yaml");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Yaml, ScalarTyping) {
  const auto j = yaml_to_json("a: 1\nb: 2.5\nc: '7'\nd: true\ne: ~\nf: text\ng: -3\nh: 1e-3\ni: [1, x]\n");
  EXPECT_TRUE(j["a"].is_number_integer());
  EXPECT_EQ(j["a"].get<int>(), 1);
  EXPECT_DOUBLE_EQ(j["b"].get<double>(), 2.5);
  EXPECT_TRUE(j["c"].is_string());
  EXPECT_EQ(j["d"], true);
  EXPECT_TRUE(j["e"].is_null());
  EXPECT_EQ(j["f"], "text");
  EXPECT_EQ(j["g"].get<int>(), -3);
  EXPECT_DOUBLE_EQ(j["h"].get<double>(), 1e-3);
  EXPECT_EQ(j["i"][1], "x");
}

TEST(Yaml, LineMapAndDuplicates) {
  LineMap lines;
  yaml_to_json("a: 1\nb:\n  c: 2\n  d: [3]\n", &lines);
  EXPECT_EQ(lines.at("a"), 1);
  EXPECT_EQ(lines.at("b.c"), 3);
  EXPECT_EQ(lines.at("b.d[0]"), 4);
  EXPECT_THROW(yaml_to_json("a: 1\na: 2\n"), ConfigError);
  EXPECT_THROW(yaml_to_json("a: [1\n"), ConfigError);
}

TEST(Config, DefaultsValidate) {
  const auto cfg = parse_experiment_config("", "<empty>");
  EXPECT_EQ(cfg.spec.grid.size(), 1024u);
  EXPECT_EQ(cfg.pipeline.n0, 64u);
  EXPECT_TRUE(cfg.pipeline.views.empty());
}

TEST(Config, UnknownKeysNameTheLine) {
  EXPECT_EQ(config_error("seed: 1\nfoo: 2\n"), "cfg.yaml:2: foo: unknown key");
  EXPECT_EQ(config_error("seed: 1\nviews:\n  - id: a\n    patchh: 3\n"), "cfg.yaml:4: views.patchh: unknown key");
  EXPECT_EQ(config_error("spec:\n  grid: {height: 8, width: 8, depth: 1}\n"), "cfg.yaml:2: grid.depth: unknown key");
}

TEST(Config, TypeAndRangeErrorsNameTheField) {
  EXPECT_EQ(config_error("residual:\n  train: {lr: abc}\n"),
            "cfg.yaml:2: residual.train.lr: type must be number, but is string");
  const std::string range = config_error("seed: 1\nresidual:\n  lambda: -1\n");
  EXPECT_NE(range.find("cfg.yaml:3: residual.lambda"), std::string::npos) << range;
  EXPECT_NE(config_error("sample: {denoiser: other}\n").find("sample.denoiser"), std::string::npos);
  EXPECT_NE(config_error("bounds: {N: [0]}\n").find("bounds.N"), std::string::npos);
}

TEST(Config, ResolvedConfigRoundTrips) {
  const auto cfg = parse_experiment_config(kTinyConfig, "tiny");
  const auto j = to_json(cfg);
  const auto again = experiment_config_from_json(j);
  EXPECT_EQ(to_json(again), j);
  // The JSON dump is itself valid config text.
  EXPECT_EQ(to_json(parse_experiment_config(j.dump(2), "resolved")), j);
}

TEST(Config, Overrides) {
  const auto cfg = parse_experiment_config(
      kTinyConfig, "tiny", {"residual.lambda=0.5", "views.1.factor=4", "spec.grid={height: 16, width: 16}"});
  EXPECT_DOUBLE_EQ(cfg.pipeline.residual.lambda, 0.5);
  EXPECT_EQ(cfg.pipeline.views[1].factor, 4);
  EXPECT_EQ(cfg.spec.grid.height, 16);
  EXPECT_THROW(parse_experiment_config(kTinyConfig, "tiny", {"residual.lambda"}), ConfigError);
  EXPECT_THROW(parse_experiment_config(kTinyConfig, "tiny", {"views.7.factor=4"}), ConfigError);
  EXPECT_THROW(parse_experiment_config(kTinyConfig, "tiny", {"seed.x=1"}), ConfigError);
}

TEST(ExitCodes, Categories) {
  EXPECT_EQ(exit_code_for(ConfigError("x")), kExitConfig);
  EXPECT_EQ(exit_code_for(IoError("x")), kExitConfig);
  EXPECT_EQ(exit_code_for(NumericError("x")), kExitNumeric);
  EXPECT_EQ(exit_code_for(DivergenceError("x", 3)), kExitNumeric);
  EXPECT_EQ(exit_code_for(StageError("train_residual", DivergenceError("loss exploded", 5))), kExitNumeric);
  EXPECT_EQ(exit_code_for(DomainError("x")), kExitNumeric);
  std::ostringstream err;
  EXPECT_EQ(guarded([]() -> int { throw StageError("calibrate", NumericError("nan")); }, err), kExitNumeric);
  EXPECT_NE(err.str().find("[calibrate] nan"), std::string::npos);
}

TEST(DataDir, FlagThenEnvironmentThenOutputDir) {
  const auto cfg = parse_experiment_config("output_dir: runs/a\n", "x");
  CommandContext ctx;
  ::unsetenv("BDL_DATA_DIR");
  EXPECT_EQ(data_dir(ctx, cfg), fs::path("runs/a/data"));
  ::setenv("BDL_DATA_DIR", "/tmp/from-env", 1);
  EXPECT_EQ(data_dir(ctx, cfg), fs::path("/tmp/from-env"));
  ctx.data_dir = "flag";
  EXPECT_EQ(data_dir(ctx, cfg), fs::path("flag"));
  ::unsetenv("BDL_DATA_DIR");
}

TEST(Bounds, WorkedRowCsv) {
  ScratchDir dir("bounds");
  const auto cfg = write_text(dir.path / "b.yaml",
                              "output_dir: " + (dir.path / "out").string() +
                                  "\nbounds:\n  inputs: {N: 100, K: 1, m: 1, U: 1, delta_v: 1}\n  N: [100]\n  K: [1]\n");
  std::ostringstream out;
  auto ctx = quiet_context(cfg, out);
  EXPECT_EQ(cmd_bounds(ctx), kExitOk);
  EXPECT_NE(out.str().find("0.08208"), std::string::npos) << out.str();
  EXPECT_TRUE(fs::exists(dir.path / "out" / "bounds.csv"));
  EXPECT_TRUE(fs::exists(dir.path / "out" / "plots" / "bound_R.svg"));
  EXPECT_TRUE(fs::exists(dir.path / "out" / "resolved_config.json"));
}

TEST(Gen, WritesDatasetsAndManifest) {
  ScratchDir dir("gen");
  const auto cfg = write_text(dir.path / "c.yaml", kTinyConfig);
  std::ostringstream out;
  auto ctx = quiet_context(cfg, out);
  ctx.data_dir = dir.path / "data";
  ASSERT_EQ(cmd_gen(ctx), kExitOk);
  for (const char* f : {"s0.bin", "s0.bin.json", "calibration.bin", "view_patch.bin", "view_down.bin", "spec.json",
                        "data_manifest.json", "resolved_config.json"})
    EXPECT_TRUE(fs::exists(dir.path / "data" / f)) << f;
  const auto ds = read_dataset(dir.path / "data" / "view_patch.bin");
  EXPECT_EQ(ds.dim, 16u);
  EXPECT_EQ(ds.size(), 200u * 4u);
}

TEST(Bootstrap, NoViewsGivesBaselineManifest) {
  ScratchDir dir("noviews");
  const auto cfg = write_text(dir.path / "c.yaml", "seed: 2\nspec: {grid: {height: 4, width: 4}, block: 2}\n"
                                                   "residual_arch: {hidden: [8]}\nresidual: {train: {epochs: 2}}\n");
  std::ostringstream out;
  auto ctx = quiet_context(cfg, out);
  ctx.out_dir = dir.path / "run";
  ASSERT_EQ(cmd_bootstrap(ctx), kExitOk);
  std::ifstream is(dir.path / "run" / "manifest.json");
  const auto man = nlohmann::json::parse(is);
  EXPECT_TRUE(man.at("groups").empty());
  EXPECT_EQ(man.at("residual").at("precond"), "edm");
  EXPECT_NE(out.str().find("baseline-only"), std::string::npos);
}

TEST(Bootstrap, IdempotentAndReproducibleFromManifest) {
  ScratchDir dir("rerun");
  const auto cfg = write_text(dir.path / "c.yaml", kTinyConfig);
  std::ostringstream out;
  auto ctx = quiet_context(cfg, out);
  ctx.out_dir = dir.path / "a";
  ASSERT_EQ(cmd_bootstrap(ctx), kExitOk);
  ctx.out_dir = dir.path / "b";
  ASSERT_EQ(cmd_bootstrap(ctx), kExitOk);
  auto hash_of = [](const fs::path& p) {
    std::ifstream is(p);
    return nlohmann::json::parse(is).at("content_hash").get<std::string>();
  };
  EXPECT_EQ(hash_of(dir.path / "a" / "manifest.json"), hash_of(dir.path / "b" / "manifest.json"));

  std::ostringstream report;
  EXPECT_EQ(cmd_bootstrap_rerun(dir.path / "a" / "manifest.json", dir.path / "rerun", report), kExitOk);
  EXPECT_NE(report.str().find("reproduced"), std::string::npos) << report.str();
  EXPECT_THROW(cmd_bootstrap_rerun(dir.path / "a" / "manifest.json", dir.path / "a", report), ConfigError);
}

TEST(Eval, ReportsAndMissingArtifact) {
  ScratchDir dir("eval");
  const auto cfg = write_text(dir.path / "c.yaml", kTinyConfig);
  std::ostringstream out;
  auto ctx = quiet_context(cfg, out);
  ctx.out_dir = dir.path / "run";
  ASSERT_EQ(cmd_bootstrap(ctx), kExitOk);
  ctx.out_dir = dir.path / "eval";
  ASSERT_EQ(cmd_eval(ctx, dir.path / "run" / "manifest.json", true), kExitOk);
  EXPECT_NE(out.str().find("sigma_lo"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir.path / "eval" / "report.json"));
  EXPECT_TRUE(fs::exists(dir.path / "eval" / "plots" / "r_by_sigma.svg"));

  ctx.out_dir = dir.path / "samples";
  SampleRequest req;
  req.manifest = dir.path / "run" / "manifest.json";
  req.count = 3;
  req.steps = 4;
  ASSERT_EQ(cmd_sample(ctx, req), kExitOk);
  std::ifstream samples(dir.path / "samples" / "samples_combined.csv");
  std::string line;
  int rows = 0;
  while (std::getline(samples, line)) ++rows;
  EXPECT_EQ(rows, 4);
  req.denoiser = "baseline";
  EXPECT_THROW(cmd_sample(ctx, req), ConfigError);

  fs::remove(dir.path / "run" / "nets" / "residual.bdlp");
  std::ostringstream err;
  const int code = guarded([&] { return cmd_eval(ctx, dir.path / "run" / "manifest.json", false); }, err);
  EXPECT_EQ(code, kExitConfig);
  EXPECT_NE(err.str().find((dir.path / "run" / "nets" / "residual.bdlp").string()), std::string::npos) << err.str();
}

TEST(TrainViews, WritesViewsManifest) {
  ScratchDir dir("views");
  const auto cfg = write_text(dir.path / "c.yaml", kTinyConfig);
  std::ostringstream out;
  auto ctx = quiet_context(cfg, out);
  ctx.out_dir = dir.path / "v";
  ASSERT_EQ(cmd_train_views(ctx), kExitOk);
  std::ifstream is(dir.path / "v" / "views_manifest.json");
  const auto man = nlohmann::json::parse(is);
  EXPECT_EQ(man.at("groups").size(), 2u);
  EXPECT_TRUE(fs::exists(dir.path / "v" / "nets" / "view_patch.bdlp"));
  EXPECT_FALSE(fs::exists(dir.path / "v" / "nets" / "residual.bdlp"));
}

TEST(Svg, RendersSeriesAndSkipsBadPoints) {
  LinePlot p{"a < b", "x", "y", true, true, {{"s1", {1, 10, 100}, {1, 0, 5}}, {"s2", {1, 2}, {3, NAN}}}};
  const auto svg = render_svg(p);
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("a &lt; b"), std::string::npos);
  EXPECT_NE(svg.find("polyline"), std::string::npos);
  EXPECT_EQ(svg.find("nan"), std::string::npos);
  EXPECT_EQ(svg.find("inf"), std::string::npos);
  p.series[0].y.pop_back();
  EXPECT_THROW(render_svg(p), ShapeError);
}

TEST(Acceptance, CriterionNamesAndRange) {
  EXPECT_EQ(criterion_name(3), "bound arithmetic");
  EXPECT_THROW(criterion_name(11), ConfigError);
  AcceptanceOptions opts;
  opts.only = {3};
  std::ostringstream out;
  const auto results = run_acceptance(opts, out);
  ASSERT_EQ(results.size(), 1u);
  EXPECT_TRUE(results[0].passed) << results[0].detail;
  EXPECT_NE(out.str().find("criterion  3 PASS"), std::string::npos) << out.str();
}
