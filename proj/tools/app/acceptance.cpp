#include "acceptance.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <unistd.h>

#include "bdl/bootstrap.hpp"
#include "bdl/bounds.hpp"
#include "bdl/diffusion.hpp"
#include "bdl/error.hpp"
#include "bdl/evalkit.hpp"
#include "bdl/neural.hpp"
#include "bdl/parallel.hpp"
#include "bdl/rng.hpp"
#include "commands.hpp"
#include "support/oracles.hpp"
#include "svg.hpp"

namespace bdl::app {

namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool passed = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void note(const AcceptanceOptions& opts, const std::string& msg) {
  if (opts.log) *opts.log << "  " << msg << std::endl;
}

BatchDenoiseFn net_fn(const DenoiserNet& net) {
  return [&net](std::span<const double> x, std::span<const double> s) { return net.forward_batch(x, s); };
}

// Restores the worker count on scope exit.
struct ThreadScope {
  int saved = thread_count();
  explicit ThreadScope(int threads) { set_thread_count(threads); }
  ~ThreadScope() { set_thread_count(saved); }
};

TrainConfig adam(int epochs, std::size_t batch, double lr) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch;
  t.lr = lr;
  t.lr_schedule = LrSchedule::cosine;
  return t;
}

// Patch tiling plus one downsampling view at the sizes used throughout the
// desk-scale experiments.
PipelineConfig desk_pipeline(std::uint64_t seed, int patch, int factor, int view_epochs, int residual_epochs) {
  PipelineConfig cfg;
  cfg.seed = seed;
  ViewGroupConfig p;
  p.id = "patch";
  p.family = ViewFamily::patch_tiling;
  p.patch = patch;
  p.samples = 5000;
  p.arch.hidden = {128, 128};
  p.train = adam(view_epochs, 64, 2e-3);
  ViewGroupConfig d = p;
  d.id = "down";
  d.family = ViewFamily::downsample;
  d.factor = factor;
  cfg.views = {p, d};
  cfg.n0 = 64;
  cfg.residual_arch.hidden = {256, 256};
  cfg.residual_arch.final_scale = 0.1;
  cfg.residual.train = adam(residual_epochs, 64, 1e-3);
  return cfg;
}

// ------------------------------------------------------------------ criteria

Verdict gradient_correctness(const AcceptanceOptions& opts) {
  double worst = 0.0;
  std::ostringstream shapes;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CounterRng r(seed, "accept/gradient-shape", 0);
    const std::size_t dim = 1 + r.below(5);
    std::vector<std::size_t> hidden(1 + r.below(3));
    for (auto& h : hidden) h = 3 + r.below(6);
    NetArchitecture arch;
    arch.hidden = hidden;
    arch.activation = r.below(2) == 0 ? Activation::silu : Activation::relu;
    arch.embed_dim = 4;
    const PrecondKind kinds[] = {PrecondKind::edm, PrecondKind::residual, PrecondKind::none};
    Preconditioner pre;
    pre.kind = kinds[r.below(3)];
    DenoiserNet net = make_denoiser(dim, arch, pre, 1e3, 1000 + seed);
    for (std::size_t l = 0; l < net.mlp.layer_count(); ++l)
      for (double& b : net.mlp.bias(l)) b = 0.1 * r.normal();
    const std::size_t B = 4;
    Vec x(B * dim), y(B * dim), s(B), w(B);
    r.fill_normal(x);
    r.fill_normal(y);
    for (std::size_t b = 0; b < B; ++b) {
      s[b] = std::exp(r.uniform(std::log(0.05), std::log(5.0)));
      w[b] = r.uniform(0.5, 2.0);
    }
    const auto lg = denoiser_mse(net, x, s, y, w);
    const double err =
        oracle::gradient_check(net.mlp.params(), lg.grad, [&] { return denoiser_mse(net, x, s, y, w).loss; });
    worst = std::max(worst, err);
    shapes << (seed ? " " : "") << dim;
    for (auto h : hidden) shapes << "-" << h;
    shapes << "-" << dim << "/" << to_string(arch.activation);
    note(opts, "shape " + std::to_string(seed) + ": max rel err " + fmt(err));
  }
  return {worst < 1e-4, "max relative error " + fmt(worst) + " < 1e-4 over shapes " + shapes.str()};
}

Verdict oracle_fidelity(const AcceptanceOptions& opts) {
  double worst = 0.0;
  int queries = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto spec = oracle::random_2d_mixture(500 + seed);
    const PosteriorOracle o(spec);
    CounterRng r(seed, "accept/oracle-queries", 0);
    for (int q = 0; q < 10; ++q, ++queries) {
      const double sigma = std::exp(r.uniform(std::log(0.1), std::log(3.0)));
      const Vec x{r.uniform(-2.5, 2.5), r.uniform(-2.5, 2.5)};
      const Vec a = o.posterior_mean(x, sigma);
      const Vec b = oracle::quadrature_posterior_mean_2d(spec, x, sigma, 1201);
      const double scale = std::max(1.0, std::max(std::abs(b[0]), std::abs(b[1])));
      worst = std::max(worst, std::max(std::abs(a[0] - b[0]), std::abs(a[1] - b[1])) / scale);
    }
    note(opts, "spec " + std::to_string(seed) + " done, worst so far " + fmt(worst));
  }
  return {worst <= 1e-6, std::to_string(queries) + " queries, max relative error " + fmt(worst) + " <= 1e-6"};
}

Verdict bound_arithmetic(const AcceptanceOptions&) {
  std::vector<std::string> failures;
  BoundInputs b;
  b.N = 100;
  b.delta_v = 1.0;
  const double e1 = prob_event_e1(b);
  if (std::abs(e1 - std::exp(-2.5)) > 1e-12) failures.push_back("p_e1=" + fmt(e1, 17));
  const double lc = log_covering_bound({1, 1, 1, 1, 1});
  if (std::abs(lc - std::log(2.0)) > 1e-12) failures.push_back("log_cover=" + fmt(lc, 17));

  BoundInputs z;
  z.N = 100;
  z.EV = 1.3;
  z.delta_b = 0.3;
  const double collapsed = generalization_bound(z, std::log(2.0)).R_bound;
  if (std::abs(collapsed - 0.09) > 1e-12) failures.push_back("collapse=" + fmt(collapsed, 17));

  BoundInputs base;
  base.EV = 1.0;
  base.delta_b = 0.1;
  base.delta_v = 0.2;
  base.epsilon = 0.05;
  base.rho = 0.1;
  base.gamma = 0.05;
  base.rademacher = 0.05;
  const CoveringParams cover{1, 1, 1, 1, 1};
  std::vector<long long> Ns;
  for (int i = 0; i < 100; ++i) Ns.push_back(static_cast<long long>(std::llround(10.0 * std::pow(1e5, i / 99.0))));
  const auto rows = bound_sweep(base, cover, Ns, {1});
  int p_violations = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].result.failure_prob > rows[i - 1].result.failure_prob) ++p_violations;
  int r_violations = 0;
  double prev = -1.0;
  for (int i = 0; i < 100; ++i) {
    BoundInputs q = base;
    q.rademacher = 0.5 * i / 99.0;
    const double r = generalization_bound(q, cover).R_bound;
    if (r < prev) ++r_violations;
    prev = r;
  }
  if (p_violations) failures.push_back(std::to_string(p_violations) + " p_fail increases along N");
  if (r_violations) failures.push_back(std::to_string(r_violations) + " R_bound decreases along Rademacher");
  std::string detail = "p_e1=" + fmt(e1, 12) + ", log-cover=" + fmt(lc, 12) + ", collapse=" + fmt(collapsed, 12) +
                       ", 100-point sweeps monotone";
  for (const auto& f : failures) detail += "; FAILED " + f;
  return {failures.empty(), detail};
}

Verdict residual_identity(const AcceptanceOptions& opts) {
  int ok = 0;
  double worst_ratio = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    CounterRng rng(s, "accept/identity", 0);
    const std::size_t m = 2 + rng.below(7);
    const std::size_t K = 1 + rng.below(3);
    const auto spec = oracle::random_small_spec(700 + s, m, K);
    const std::size_t r = 1 + rng.below(m);
    DenseMatrix A(r, m);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < m; ++j) A(i, j) = rng.normal();
    DenseMatrix M(m, m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t k = 0; k < r; ++k) M(i, j) += A(k, i) * A(k, j);
    const auto res = check_residual_identity(spec, M, rng.uniform(0.1, 2.0), 100000, s);
    const double ratio = std::abs(res.gap) / res.combined_stderr;
    worst_ratio = std::max(worst_ratio, ratio);
    ok += ratio <= 3.0 ? 1 : 0;
    note(opts, "spec " + std::to_string(s) + " (m=" + std::to_string(m) + ", rank " + std::to_string(res.rank) +
                   "): |gap|/stderr = " + fmt(ratio));
  }
  return {ok == 20, std::to_string(ok) + "/20 specs within 3 combined stderr (worst " + fmt(worst_ratio) +
                        ") at n_mc=1e5"};
}

Verdict kl_estimator(const AcceptanceOptions&) {
  auto shifted = [](double mu) -> ScoreFn {
    return [mu](std::span<const double> x, std::span<const double> s) {
      std::vector<double> out(x.size());
      for (std::size_t r = 0; r < s.size(); ++r) out[r] = -(x[r] - mu) / (1.0 + s[r] * s[r]);
      return out;
    };
  };
  const auto gauss = oracle::gaussian_spec(1, Vec{0.0}, Vec{1.0});
  KlOptions o;
  o.n_mc = 256;
  o.t_quadrature = 128;
  const auto shift = eval_kl(shifted(0.0), shifted(0.1), gauss, DiffusionSchedule::edm(1.0, 0.5), o);
  const bool shift_ok = std::abs(shift.kl - 0.005) <= 0.05 * 0.005;

  SyntheticSpecParams p;
  p.grid = {4, 4, 1};
  p.block = 2;
  const auto spec = make_synthetic_spec(p);
  const PosteriorOracle oracle(spec);
  KlOptions z;
  z.n_mc = 128;
  z.t_quadrature = 32;
  const auto same = eval_kl(oracle_score_fn(oracle), oracle_score_fn(oracle), spec,
                            DiffusionSchedule::edm(spec.U, spec.data_std()), z);
  const bool zero_ok = std::abs(same.kl) <= 3.0 * same.std_err;
  return {shift_ok && zero_ok, "N(0,1)||N(0.1,1): " + fmt(shift.kl, 6) + " vs 0.005 (5%); identical scores: " +
                                   fmt(same.kl) + " with stderr " + fmt(same.std_err)};
}

Verdict loss_decomposition(const AcceptanceOptions& opts) {
  SyntheticSpecParams p;
  p.grid = {4, 4, 1};
  p.block = 2;
  const auto spec = make_synthetic_spec(p);
  const PosteriorOracle oracle(spec);
  const Dataset train = sample_dataset(spec, 256, "accept/decomposition");
  const double sd = std::max(1e-3, empirical_std(train));
  const auto sched = DiffusionSchedule::edm(spec.U, sd);
  NetArchitecture arch;
  arch.hidden = {64, 64};
  DenoiserNet init = make_denoiser(spec.m, arch, Preconditioner{PrecondKind::edm, sd}, spec.U, 11);
  const auto trained = train_denoiser(train, sched, adam(150, 64, 2e-3), std::move(init));
  note(opts, "trained denoiser, final loss " + fmt(trained.curve.points.back().loss));
  const auto fn = net_fn(trained.net);
  EvalOptions eo;
  eo.n_mc = 2000;
  eo.bins = 5;
  eo.seed = 3;
  const auto res = eval_losses(&fn, oracle, sched, eo);
  const double gap = res.L.mean - res.R.mean - res.V.mean;
  const bool ok = std::abs(gap) <= 3.0 * res.gap.std_err && res.R.mean > 0.0;
  return {ok, "L=" + fmt(res.L.mean, 6) + " R=" + fmt(res.R.mean, 6) + " V=" + fmt(res.V.mean, 6) +
                  ", |L-(R+V)|=" + fmt(std::abs(gap)) + " <= 3*" + fmt(res.gap.std_err)};
}

Verdict data_efficiency(const AcceptanceOptions& opts) {
  std::vector<double> gains;
  std::ostringstream detail;
  std::vector<std::pair<std::string, LossEstimates>> curves;
  std::ofstream csv;
  if (opts.artifacts_dir) {
    fs::create_directories(*opts.artifacts_dir);
    csv.open(*opts.artifacts_dir / "criterion7.csv");
    csv << "seed,R_bootstrap,R_bootstrap_se,R_stage1,R_baseline,R_baseline_se,relative_gain\n";
  }
  for (std::uint64_t seed : {1, 2, 3}) {
    SyntheticSpecParams sp;
    sp.seed = seed;
    const auto spec = make_synthetic_spec(sp);
    PipelineConfig cfg = desk_pipeline(seed, 8, 4, 20, 2000);
    cfg.train_baseline = true;
    const auto result = run_algorithm1(spec, cfg);
    const PosteriorOracle oracle(spec);
    EvalOptions eo;
    eo.n_mc = 64;
    eo.bins = 10;
    eo.seed = 1000 + seed;
    const auto boot = eval_R(result.combined.as_batch_fn(), oracle, result.schedule, eo);
    const auto base = eval_R(net_fn(*result.baseline), oracle, result.schedule, eo);
    CombinedDenoiser stage1 = result.combined;
    stage1.residual.reset();
    const auto s1 = eval_R(stage1.as_batch_fn(), oracle, result.schedule, eo);
    const double gain = 1.0 - boot.R.mean / base.R.mean;
    gains.push_back(gain);
    note(opts, "seed " + std::to_string(seed) + ": R bootstrap " + fmt(boot.R.mean) + ", stage-1 " +
                   fmt(s1.R.mean) + ", baseline " + fmt(base.R.mean) + ", gain " + fmt(gain));
    detail << (seed == 1 ? "" : ", ") << fmt(boot.R.mean) << "/" << fmt(base.R.mean);
    if (csv.is_open())
      csv << seed << ',' << boot.R.mean << ',' << boot.R.std_err << ',' << s1.R.mean << ',' << base.R.mean << ','
          << base.R.std_err << ',' << gain << '\n';
    if (seed == 1) {
      curves.emplace_back("bootstrap", boot);
      curves.emplace_back("stage-1 views", s1);
      curves.emplace_back("baseline", base);
    }
  }
  if (opts.artifacts_dir) {
    LinePlot plot{"R by noise level (m=1024, N0=64, seed 1)", "sigma", "R per bin", true, true, {}};
    for (const auto& [name, est] : curves) {
      PlotSeries s{name, {}, {}};
      for (const auto& b : est.bins) {
        s.x.push_back(std::sqrt(b.sigma_lo * b.sigma_hi));
        s.y.push_back(b.R.mean);
      }
      plot.series.push_back(std::move(s));
    }
    write_svg(*opts.artifacts_dir / "criterion7_r_by_sigma.svg", plot);
  }
  const double med = median(gains);
  return {med >= 0.2, "R bootstrap/baseline per seed " + detail.str() + "; median relative gain " + fmt(med) +
                          " (required >= 0.2)"};
}

// Stage 1 uses exact view posterior means, so the residual alone carries the
// difficulty and its optimum is zero when rho_g = 0.
Verdict difficulty_scaling(const AcceptanceOptions& opts) {
  const std::vector<double> rhos{0.0, 0.005, 0.015};
  std::vector<double> med_r;
  std::vector<double> ratios;
  for (double rho : rhos) {
    std::vector<double> rs;
    for (std::uint64_t seed : {1, 2, 3}) {
      SyntheticSpecParams sp;
      sp.grid = {16, 16, 1};
      sp.components = 1;
      sp.global_strength = rho;
      sp.seed = seed;
      const auto spec = make_synthetic_spec(sp);
      const PipelineConfig cfg = desk_pipeline(seed, 8, 4, 0, 1500);

      const Dataset s0 = sample_dataset(spec, cfg.n0, "s0");
      const double sd0 = std::max(empirical_std(s0), 1e-3 * spec.U);
      const auto sched = DiffusionSchedule::edm(spec.U, sd0);
      CombinedDenoiser stage1;
      stage1.dim = spec.m;
      stage1.U = spec.U;
      for (const auto& v : cfg.views) {
        ViewGroup g;
        g.id = v.id;
        g.ops = make_view_operators(spec.grid, v);
        g.fn = oracle_view_fn(spec, g.ops);
        stage1.groups.push_back(std::move(g));
      }
      CalibrationOptions copts = cfg.calibration;
      copts.seed = derive_seed(seed, "calibration");
      const auto stats = collect_calibration_stats(stage1, sample_dataset(spec, cfg.n_calibration, "calibration"),
                                                   SigmaBins::for_schedule(sched, copts.bins), nullptr, copts);
      stage1.weights = calibrate_combiner(stats, copts.ridge).weights;
      const auto adapter = fit_range_adapter(stats, stage1.weights);

      ResidualTrainConfig rc = cfg.residual;
      rc.train.seed = derive_seed(seed, "train/residual");
      DenoiserNet init = make_denoiser(spec.m, cfg.residual_arch, Preconditioner{PrecondKind::residual, sd0}, spec.U,
                                       derive_seed(seed, "init/residual"));
      const auto trained = train_residual(stage1, s0, sched, rc, std::move(init), adapter);

      const PosteriorOracle oracle(spec);
      EvalOptions eo;
      eo.n_mc = 64;
      eo.bins = 10;
      eo.seed = 2000 + seed;
      const double r = eval_R(trained.combined.as_batch_fn(), oracle, sched, eo).R.mean;
      rs.push_back(r);
      std::string extra;
      if (rho == 0.0) {
        TrainConfig tc = rc.train;
        tc.seed = derive_seed(seed, "train/baseline");
        const auto baseline =
            train_baseline(s0, sched, tc,
                           make_denoiser(spec.m, cfg.residual_arch, Preconditioner{PrecondKind::edm, sd0}, spec.U,
                                         derive_seed(seed, "init/baseline")))
                .net;
        const Dataset probe = sample_dataset(spec, 256, "accept/second-moment");
        const NoisyDraws draws = make_noisy_draws(probe, sched, 1, seed, "accept/second-moment/noise");
        const double residual_moment = residual_energy(*trained.combined.residual, draws, 1);
        const auto out = baseline.forward_batch(draws.x_t, draws.sigma);
        double baseline_moment = 0.0;
        for (double v : out) baseline_moment += v * v;
        baseline_moment /= static_cast<double>(draws.size());
        ratios.push_back(residual_moment / baseline_moment);
        extra = ", residual/baseline second moment " + fmt(ratios.back());
      }
      note(opts, "rho_g=" + fmt(rho) + " seed " + std::to_string(seed) + ": R " + fmt(r) + extra);
    }
    med_r.push_back(median(rs));
  }
  if (opts.artifacts_dir) {
    fs::create_directories(*opts.artifacts_dir);
    write_svg(*opts.artifacts_dir / "criterion8_r_vs_rho.svg",
              LinePlot{"residual R vs global correlation", "rho_g", "median R", false, false, {{"R", rhos, med_r}}});
  }
  const bool monotone = med_r[0] <= med_r[1] && med_r[1] <= med_r[2];
  const double ratio = median(ratios);
  return {monotone && ratio <= 0.05, "median R at rho_g {0, 0.005, 0.015}: " + fmt(med_r[0]) + ", " + fmt(med_r[1]) +
                                         ", " + fmt(med_r[2]) + (monotone ? " (nondecreasing)" : " (NOT monotone)") +
                                         "; second-moment ratio at rho_g=0: " + fmt(ratio) + " (required <= 0.05)"};
}

Verdict regularization(const AcceptanceOptions& opts) {
  SyntheticSpecParams sp;
  sp.grid = {16, 16, 1};
  sp.global_strength = 0.02;
  const auto spec = make_synthetic_spec(sp);
  PipelineConfig cfg = desk_pipeline(5, 8, 4, 20, 1);
  cfg.residual.mode = ResidualMode::penalty;
  const auto stage = run_algorithm1(spec, cfg);
  CombinedDenoiser stage1 = stage.combined;
  stage1.residual.reset();
  const double sd0 = std::max(empirical_std(stage.s0), 1e-3 * spec.U);
  auto train = [&](double lambda, std::optional<double> cap) {
    ResidualTrainConfig rc;
    rc.mode = ResidualMode::penalty;
    rc.lambda = lambda;
    rc.hard_cap = cap;
    rc.train = adam(600, 64, 1e-3);
    rc.train.seed = 77;
    DenoiserNet init = make_denoiser(spec.m, cfg.residual_arch, Preconditioner{PrecondKind::residual, sd0}, spec.U, 78);
    return train_residual(stage1, stage.s0, stage.schedule, rc, std::move(init)).energy /
           static_cast<double>(stage.s0.size());
  };
  std::vector<double> energies;
  std::ostringstream list;
  for (double lambda : {0.0, 0.1, 1.0, 10.0}) {
    energies.push_back(train(lambda, std::nullopt));
    list << (energies.size() > 1 ? ", " : "") << fmt(energies.back());
    note(opts, "lambda " + fmt(lambda) + ": sum||f0||^2/N0 = " + fmt(energies.back()));
  }
  bool monotone = true;
  for (std::size_t i = 1; i < energies.size(); ++i) monotone = monotone && energies[i] <= energies[i - 1];
  // A binding cap at half the unregularized energy, in the summed form.
  const double N0 = static_cast<double>(stage.s0.size());
  const double M = 0.5 * energies[0] * N0;
  const double capped = train(0.0, M) * N0;
  const bool cap_ok = capped <= M * (1.0 + 1e-3);
  note(opts, "hard cap M=" + fmt(M) + ": energy " + fmt(capped));
  return {monotone && cap_ok, "sum||f0||^2/N0 at lambda {0, 0.1, 1, 10}: " + list.str() +
                                  (monotone ? " (nonincreasing)" : " (NOT monotone)") + "; capped energy " +
                                  fmt(capped / M) + " M <= 1.001 M"};
}

Verdict reproducibility(const AcceptanceOptions& opts) {
  ThreadScope serial(1);
  const fs::path root = opts.artifacts_dir ? *opts.artifacts_dir / "criterion10"
                                           : fs::temp_directory_path() / ("bdl-accept-" + std::to_string(getpid()));
  fs::remove_all(root);
  CommandContext ctx;
  ctx.overrides = {"spec.grid={height: 8, width: 8, channels: 1}",
                   "spec.block=4",
                   "spec.global_rank=2",
                   "views=[{id: patch, family: patch_tiling, patch: 4, samples: 400, arch: {hidden: [32]}, "
                   "train: {epochs: 3, batch_size: 32}}, {id: down, family: downsample, factor: 2, samples: 400, "
                   "arch: {hidden: [32]}, train: {epochs: 3, batch_size: 32}}]",
                   "residual_arch={hidden: [32, 32]}",
                   "residual.train={epochs: 20, batch_size: 32}",
                   "train_baseline=true",
                   "seed=9"};
  ctx.out_dir = root / "first";
  std::ostringstream sink;
  ctx.out = &sink;
  ctx.err = &sink;
  if (cmd_bootstrap(ctx) != kExitOk) return {false, "first run failed: " + sink.str()};
  std::ostringstream report;
  const int code = cmd_bootstrap_rerun(root / "first" / "manifest.json", root / "rerun", report);
  std::string line = report.str();
  if (!line.empty() && line.back() == '\n') line.pop_back();
  if (!opts.artifacts_dir) fs::remove_all(root);
  return {code == kExitOk, "serial rerun from manifest: " + line};
}

struct CriterionDef {
  const char* name;
  double budget;
  Verdict (*run)(const AcceptanceOptions&);
};

const CriterionDef kCriteria[kCriterionCount] = {
    {"gradient correctness", 30.0, gradient_correctness},
    {"oracle fidelity", 60.0, oracle_fidelity},
    {"bound arithmetic", 5.0, bound_arithmetic},
    {"residual-variance identity", 180.0, residual_identity},
    {"KL estimator", 60.0, kl_estimator},
    {"loss decomposition", 60.0, loss_decomposition},
    {"data-efficiency direction", 1800.0, data_efficiency},
    {"difficulty scaling", 1800.0, difficulty_scaling},
    {"regularization behavior", 1200.0, regularization},
    {"reproducibility", 600.0, reproducibility},
};

}  // namespace

std::string criterion_name(int id) {
  if (id < 1 || id > kCriterionCount) throw ConfigError("acceptance criterion " + std::to_string(id) + " does not exist");
  return kCriteria[id - 1].name;
}

CriterionResult run_criterion(int id, const AcceptanceOptions& opts) {
  criterion_name(id);
  const auto& def = kCriteria[id - 1];
  CriterionResult r;
  r.id = id;
  r.name = def.name;
  r.budget_seconds = def.budget;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const Verdict v = def.run(opts);
    r.passed = v.passed;
    r.detail = v.detail;
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("error: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (r.seconds > r.budget_seconds) {
    r.passed = false;
    r.detail += "; over the runtime budget";
  }
  return r;
}

std::string format_result(const CriterionResult& r) {
  std::ostringstream os;
  os << "criterion " << std::setw(2) << r.id << " " << (r.passed ? "PASS" : "FAIL") << "  [" << r.name << "] "
     << std::fixed << std::setprecision(1) << r.seconds << " s of " << r.budget_seconds << " s; " << r.detail;
  return os.str();
}

std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& opts, std::ostream& out) {
  for (int id : opts.only) criterion_name(id);
  std::vector<CriterionResult> results;
  for (int id = 1; id <= kCriterionCount; ++id) {
    if (!opts.only.empty() && !opts.only.count(id)) continue;
    if (opts.log) *opts.log << "criterion " << id << ": " << criterion_name(id) << std::endl;
    results.push_back(run_criterion(id, opts));
    out << format_result(results.back()) << std::endl;
  }
  return results;
}

}  // namespace bdl::app
