#include "commands.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "bdl/diffusion.hpp"
#include "bdl/error.hpp"
#include "bdl/hash.hpp"
#include "bdl/parallel.hpp"
#include "svg.hpp"

namespace bdl::app {

namespace fs = std::filesystem;

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing artifact: expected " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_resolved(const fs::path& dir, const ExperimentConfig& cfg) {
  write_json(dir / "resolved_config.json", to_json(cfg));
}

std::string config_hash(const ExperimentConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

void write_curve_plots(const fs::path& dir, const std::map<std::string, TrainingCurve>& curves) {
  for (const auto& [name, curve] : curves) {
    PlotSeries s{"loss", {}, {}};
    for (const auto& p : curve.points) {
      s.x.push_back(static_cast<double>(p.step));
      s.y.push_back(p.loss);
    }
    std::string file = name;
    for (char& c : file)
      if (c == '/') c = '_';
    write_svg(dir / "plots" / (file + "_loss.svg"),
              LinePlot{"training loss: " + name, "optimizer step", "weighted loss", false, true, {s}});
  }
}

BatchDenoiseFn net_batch_fn(const DenoiserNet& net) {
  return [&net](std::span<const double> x, std::span<const double> s) { return net.forward_batch(x, s); };
}

LinePlot loss_plot(const std::string& title, const std::vector<std::pair<std::string, LossEstimates>>& runs) {
  LinePlot plot{title, "sigma (bin center, geometric)", "R per bin", true, true, {}};
  for (const auto& [name, est] : runs) {
    PlotSeries s{name, {}, {}};
    for (const auto& b : est.bins) {
      s.x.push_back(std::sqrt(b.sigma_lo * b.sigma_hi));
      s.y.push_back(b.R.mean);
    }
    plot.series.push_back(std::move(s));
  }
  return plot;
}

}  // namespace

ExperimentConfig resolve_config(const CommandContext& ctx) {
  if (ctx.config.empty()) return parse_experiment_config("{}", "<defaults>", ctx.overrides);
  return load_experiment_config(ctx.config, ctx.overrides);
}

fs::path output_dir(const CommandContext& ctx, const ExperimentConfig& cfg) {
  return ctx.out_dir ? *ctx.out_dir : fs::path(cfg.output_dir);
}

fs::path data_dir(const CommandContext& ctx, const ExperimentConfig& cfg) {
  if (ctx.data_dir) return *ctx.data_dir;
  if (const char* env = std::getenv("BDL_DATA_DIR"); env && *env) return env;
  return output_dir(ctx, cfg) / "data";
}

int exit_code_for(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    switch (err->category()) {
      case Error::Category::config:
      case Error::Category::io:
      case Error::Category::shape:
        return kExitConfig;
      case Error::Category::range:
      case Error::Category::domain:
      case Error::Category::numeric:
        return kExitNumeric;
    }
  }
  if (dynamic_cast<const nlohmann::json::exception*>(&e)) return kExitConfig;
  return kExitNumeric;
}

int guarded(const std::function<int()>& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    err << (code == kExitConfig ? "config error: " : "numeric failure: ") << e.what() << '\n';
    return code;
  }
}

int cmd_gen(const CommandContext& ctx) {
  const ExperimentConfig cfg = resolve_config(ctx);
  const DataSpec spec = make_synthetic_spec(cfg.spec);
  const fs::path dir = data_dir(ctx, cfg);
  fs::create_directories(dir);
  nlohmann::json hashes = nlohmann::json::object();
  auto save = [&](const std::string& rel, const Dataset& ds) {
    write_dataset(dir / rel, ds);
    hashes[rel] = sha256_file(dir / rel);
    hashes[rel + ".json"] = sha256_file(dir / (rel + ".json"));
    *ctx.out << rel << ": " << ds.size() << " x " << ds.dim << '\n';
  };
  write_json(dir / "spec.json", to_json(spec));
  hashes["spec.json"] = sha256_file(dir / "spec.json");
  save("s0.bin", sample_dataset(spec, cfg.pipeline.n0, "s0"));
  if (!cfg.pipeline.calibrate_on_s0)
    save("calibration.bin", sample_dataset(spec, cfg.pipeline.n_calibration, "calibration"));
  for (const auto& v : cfg.pipeline.views)
    save("view_" + v.id + ".bin", view_dataset(spec, v, cfg.pipeline.duplicate_fraction));
  write_resolved(dir, cfg);
  nlohmann::json man = {{"format", "bdl-data-manifest/1"}, {"spec_id", spec.id}, {"artifacts", hashes}};
  man["content_hash"] = sha256_hex(man.dump());
  write_json(dir / "data_manifest.json", man);
  *ctx.out << "data written to " << dir.string() << '\n';
  return kExitOk;
}

int cmd_train_views(const CommandContext& ctx) {
  const ExperimentConfig cfg = resolve_config(ctx);
  const DataSpec spec = make_synthetic_spec(cfg.spec);
  const fs::path dir = output_dir(ctx, cfg);
  fs::create_directories(dir);
  write_resolved(dir, cfg);
  const auto result = run_algorithm1(spec, cfg.pipeline, dir, PipelineStop::after_views);
  write_curve_plots(dir, result.curves);
  for (const auto& [name, curve] : result.curves)
    if (!curve.points.empty())
      *ctx.out << name << ": final loss " << curve.points.back().loss << '\n';
  *ctx.out << "views manifest: " << (dir / "views_manifest.json").string() << '\n';
  return kExitOk;
}

int cmd_bootstrap(const CommandContext& ctx) {
  const ExperimentConfig cfg = resolve_config(ctx);
  const DataSpec spec = make_synthetic_spec(cfg.spec);
  const fs::path dir = output_dir(ctx, cfg);
  fs::create_directories(dir);
  write_resolved(dir, cfg);
  const auto result = run_algorithm1(spec, cfg.pipeline, dir);
  write_curve_plots(dir, result.curves);
  for (const auto& w : result.warnings) *ctx.err << "warning: " << w << '\n';
  *ctx.out << "groups: " << result.combined.groups.size() << (result.combined.groups.empty() ? " (baseline-only)" : "")
           << '\n';
  *ctx.out << "content hash: " << result.manifest.at("content_hash").get<std::string>() << '\n';
  *ctx.out << "manifest: " << (dir / "manifest.json").string() << '\n';
  return kExitOk;
}

int cmd_bootstrap_rerun(const fs::path& manifest, const fs::path& out_dir, std::ostream& out) {
  const nlohmann::json man = read_json(manifest);
  DataSpec spec;
  PipelineConfig cfg;
  try {
    spec = data_spec_from_json(man.at("spec"));
    cfg = pipeline_config_from_json(man.at("resolved_config"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + manifest.string() + ": " + e.what());
  }
  if (fs::weakly_canonical(out_dir) == fs::weakly_canonical(manifest.parent_path()))
    throw ConfigError("rerun output directory must differ from the manifest directory");
  fs::create_directories(out_dir);
  const auto result = run_algorithm1(spec, cfg, out_dir);
  const auto& before = man.at("artifacts");
  const auto& after = result.manifest.at("artifacts");
  std::vector<std::string> differing;
  for (const auto& [rel, hash] : before.items())
    if (!after.contains(rel) || after.at(rel) != hash) differing.push_back(rel);
  for (const auto& [rel, hash] : after.items())
    if (!before.contains(rel)) differing.push_back(rel);
  const bool same_hash = man.value("content_hash", std::string()) == result.manifest.at("content_hash");
  if (differing.empty() && same_hash) {
    out << "reproduced: " << before.size() << " artifacts identical, content hash "
        << result.manifest.at("content_hash").get<std::string>() << '\n';
    return kExitOk;
  }
  out << "not reproduced:";
  for (const auto& d : differing) out << ' ' << d;
  if (!same_hash) out << " (content hash differs)";
  out << '\n';
  return kExitAcceptance;
}

int cmd_bootstrap_sweep(const CommandContext& ctx, const std::vector<std::size_t>& n0_values) {
  if (n0_values.empty()) throw ConfigError("sweep: no N0 values given");
  const ExperimentConfig cfg = resolve_config(ctx);
  const DataSpec spec = make_synthetic_spec(cfg.spec);
  const PosteriorOracle oracle(spec);
  const fs::path dir = output_dir(ctx, cfg);
  fs::create_directories(dir);
  write_resolved(dir, cfg);
  PlotSeries boot{"bootstrap", {}, {}};
  PlotSeries base{"baseline", {}, {}};
  std::ofstream csv(dir / "r_vs_n0.csv");
  if (!csv) throw IoError("cannot write " + (dir / "r_vs_n0.csv").string());
  csv << "n0,R_bootstrap,R_bootstrap_se,R_baseline,R_baseline_se\n" << std::setprecision(10);
  for (std::size_t n0 : n0_values) {
    PipelineConfig pc = cfg.pipeline;
    pc.n0 = n0;
    pc.train_baseline = true;
    const auto result = run_algorithm1(spec, pc);
    const auto rb = eval_R(result.combined.as_batch_fn(), oracle, result.schedule, cfg.eval);
    const auto rn = eval_R(net_batch_fn(*result.baseline), oracle, result.schedule, cfg.eval);
    csv << n0 << ',' << rb.R.mean << ',' << rb.R.std_err << ',' << rn.R.mean << ',' << rn.R.std_err << '\n';
    *ctx.out << "N0=" << n0 << "  R bootstrap " << rb.R.mean << "  R baseline " << rn.R.mean << '\n';
    boot.x.push_back(static_cast<double>(n0));
    boot.y.push_back(rb.R.mean);
    base.x.push_back(static_cast<double>(n0));
    base.y.push_back(rn.R.mean);
  }
  write_svg(dir / "plots" / "r_vs_n0.svg", LinePlot{"R vs full-resolution set size", "N0", "R (sigma-averaged)",
                                                     true, true, {boot, base}});
  return kExitOk;
}

int cmd_sample(const CommandContext& ctx, const SampleRequest& req) {
  const ExperimentConfig cfg = resolve_config(ctx);
  const LoadedPipeline p = load_pipeline(req.manifest);
  const std::size_t count = req.count.value_or(cfg.sample.count);
  const int steps = req.steps.value_or(cfg.sample.steps);
  const std::string which = req.denoiser.value_or(cfg.sample.denoiser);
  DenoiseFn fn;
  if (which == "combined") {
    fn = p.combined.as_fn();
  } else if (which == "baseline") {
    if (!p.baseline) throw ConfigError("sample.denoiser: manifest " + req.manifest.string() + " has no baseline");
    fn = p.baseline->as_fn();
  } else {
    throw ConfigError("sample.denoiser: expected combined or baseline");
  }
  const fs::path dir = ctx.out_dir ? *ctx.out_dir : req.manifest.parent_path() / "samples";
  fs::create_directories(dir);
  write_resolved(dir, cfg);
  const std::size_t m = p.spec.m;
  std::vector<Vec> samples(count);
  std::vector<std::string> traces(count);
  parallel_for(count, [&](std::size_t i) {
    SamplerOptions so;
    so.stochastic = cfg.sample.stochastic;
    std::ostringstream trace;
    if (req.trajectory) so.trajectory_csv = &trace;
    samples[i] = sample_reverse(fn, p.schedule, m, steps, cfg.sample.seed, which == "combined" ? 1u : 2u, i, so);
    traces[i] = trace.str();
  });
  const fs::path csv_path = req.csv ? *req.csv : dir / ("samples_" + which + ".csv");
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  csv << "sample";
  for (std::size_t j = 0; j < m; ++j) csv << ",x" << j;
  csv << '\n' << std::setprecision(10);
  double mean = 0.0;
  double sq = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    csv << i;
    for (double v : samples[i]) {
      csv << ',' << v;
      mean += v;
      sq += v * v;
    }
    csv << '\n';
    if (req.trajectory) {
      std::ofstream t(dir / ("trajectory_" + which + "_" + std::to_string(i) + ".csv"));
      t << traces[i];
    }
  }
  const double n = static_cast<double>(count * m);
  mean /= n;
  const double sd = std::sqrt(std::max(0.0, sq / n - mean * mean));
  *ctx.out << count << " samples (" << which << ", " << steps << " steps) -> " << csv_path.string() << '\n';
  *ctx.out << "coordinate mean " << mean << ", std " << sd << "; data std " << p.spec.data_std() << '\n';
  return kExitOk;
}

int cmd_eval(const CommandContext& ctx, const fs::path& manifest, bool csv) {
  const ExperimentConfig cfg = resolve_config(ctx);
  const LoadedPipeline p = load_pipeline(manifest);
  const PosteriorOracle oracle(p.spec);
  const fs::path dir = ctx.out_dir ? *ctx.out_dir : manifest.parent_path() / "eval";
  fs::create_directories(dir);
  write_resolved(dir, cfg);

  std::vector<std::pair<std::string, BatchDenoiseFn>> denoisers{{"combined", p.combined.as_batch_fn()}};
  if (p.baseline) denoisers.emplace_back("baseline", net_batch_fn(*p.baseline));

  std::vector<std::pair<std::string, LossEstimates>> runs;
  nlohmann::json reports = nlohmann::json::array();
  for (const auto& [name, fn] : denoisers) {
    EvalReport report;
    report.denoiser_id = name;
    report.config_hash = config_hash(cfg);
    report.losses = eval_losses(&fn, oracle, p.schedule, cfg.eval);
    if (cfg.kl.enabled) {
      report.kl = eval_kl(oracle_score_fn(oracle), denoiser_score_fn(fn), p.spec, p.schedule, cfg.kl.options);
      if (report.kl->coarse_grid_warning)
        report.warnings.push_back("KL changes by more than " + std::to_string(cfg.kl.options.refine_tolerance) +
                                  " relative on the coarse grid; increase kl.t_quadrature");
    }
    std::ofstream txt(dir / ("report_" + name + ".txt"));
    write_report_text(txt, report);
    std::ofstream rows(dir / ("report_" + name + ".csv"));
    write_report_csv(rows, report);
    if (csv) {
      write_report_csv(*ctx.out, report);
    } else {
      write_report_text(*ctx.out, report);
    }
    reports.push_back(to_json(report));
    runs.emplace_back(name, report.losses);
  }
  write_json(dir / "report.json", {{"manifest", manifest.string()},
                                   {"content_hash", p.manifest.value("content_hash", std::string())},
                                   {"reports", reports}});
  write_svg(dir / "plots" / "r_by_sigma.svg", loss_plot("R by noise level", runs));
  return kExitOk;
}

int cmd_bounds(const CommandContext& ctx) {
  const ExperimentConfig cfg = resolve_config(ctx);
  const auto& b = cfg.bounds;
  const auto rows = bound_sweep(b.inputs, b.cover, b.N, b.K, b.context);
  write_sweep_csv(*ctx.out, rows);
  if (ctx.out_dir || !ctx.config.empty()) {
    const fs::path dir = output_dir(ctx, cfg);
    fs::create_directories(dir);
    write_resolved(dir, cfg);
    std::ofstream csv(dir / "bounds.csv");
    if (!csv) throw IoError("cannot write " + (dir / "bounds.csv").string());
    write_sweep_csv(csv, rows);
    LinePlot rb{"bound on R vs N", "N", "R bound", true, true, {}};
    LinePlot pf{"failure probability vs N", "N", "p_fail", true, true, {}};
    for (long long K : b.K) {
      PlotSeries sr{"K=" + std::to_string(K), {}, {}};
      PlotSeries sp = sr;
      for (const auto& r : rows) {
        if (r.inputs.K != K) continue;
        sr.x.push_back(static_cast<double>(r.inputs.N));
        sr.y.push_back(r.result.R_bound);
        sp.x.push_back(static_cast<double>(r.inputs.N));
        sp.y.push_back(r.result.failure_prob);
      }
      rb.series.push_back(std::move(sr));
      pf.series.push_back(std::move(sp));
    }
    write_svg(dir / "plots" / "bound_R.svg", rb);
    write_svg(dir / "plots" / "bound_pfail.svg", pf);
  }
  return kExitOk;
}

int cmd_accept(const AcceptanceOptions& opts, std::ostream& out) {
  const auto results = run_acceptance(opts, out);
  for (const auto& r : results)
    if (!r.passed) return kExitAcceptance;
  return kExitOk;
}

}  // namespace bdl::app
