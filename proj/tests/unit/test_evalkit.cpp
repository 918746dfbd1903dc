#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "bdl/error.hpp"
#include "bdl/evalkit.hpp"
#include "support/oracles.hpp"

using namespace bdl;

namespace {

DataSpec standard_normal(std::size_t m) { return oracle::gaussian_spec(m, Vec(m, 0.0), Vec(m, 1.0)); }

BatchDenoiseFn zero_fn() {
  return [](std::span<const double> x, std::span<const double>) { return std::vector<double>(x.size(), 0.0); };
}

BatchDenoiseFn oracle_fn(const PosteriorOracle& oracle) {
  return [&oracle](std::span<const double> x, std::span<const double> s) {
    const std::size_t m = oracle.dim();
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < s.size(); ++r) {
      const Vec mu = oracle.posterior_mean(x.subspan(r * m, m), s[r]);
      std::copy(mu.begin(), mu.end(), out.begin() + static_cast<std::ptrdiff_t>(r * m));
    }
    return out;
  };
}

ScoreFn shifted_normal_score(double mu) {
  return [mu](std::span<const double> x, std::span<const double> s) {
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < s.size(); ++r) out[r] = -(x[r] - mu) / (1.0 + s[r] * s[r]);
    return out;
  };
}

}  // namespace

TEST(EvalLosses, OracleDenoiserHasZeroR) {
  SyntheticSpecParams p;
  p.grid = {4, 4, 1};
  p.block = 2;
  const auto spec = make_synthetic_spec(p);
  const PosteriorOracle oracle(spec);
  const auto sched = DiffusionSchedule::edm(1.0, spec.data_std());
  EvalOptions opts;
  opts.n_mc = 64;
  opts.bins = 4;
  const auto res = eval_R(oracle_fn(oracle), oracle, sched, opts);
  EXPECT_EQ(res.R.mean, 0.0);
  EXPECT_EQ(res.bins.size(), 4u);
  EXPECT_NEAR(res.L.mean, res.V.mean, 1e-12);
}

TEST(EvalLosses, ZeroDenoiserOnStandardNormal) {
  const std::size_t m = 4;
  const auto spec = standard_normal(m);
  const PosteriorOracle oracle(spec);
  const auto sched = DiffusionSchedule::edm(1.0, 0.5);
  for (double sigma : {0.3, 1.0, 2.5}) {
    EvalOptions opts;
    opts.n_mc = 20000;
    opts.fixed_sigma = sigma;
    const auto res = eval_R(zero_fn(), oracle, sched, opts);
    const double expect = static_cast<double>(m) / (1.0 + sigma * sigma);
    EXPECT_NEAR(res.R.mean, expect, 3.0 * res.R.std_err) << "sigma " << sigma;
    EXPECT_NEAR(res.L.mean, static_cast<double>(m), 3.0 * res.L.std_err) << "sigma " << sigma;
  }
}

TEST(EvalLosses, PosteriorVarianceOfStandardNormal) {
  const std::size_t m = 3;
  const auto spec = standard_normal(m);
  const PosteriorOracle oracle(spec);
  const auto sched = DiffusionSchedule::edm(1.0, 0.5);
  for (double sigma : {0.1, 0.7, 4.0}) {
    EvalOptions opts;
    opts.n_mc = 20000;
    opts.fixed_sigma = sigma;
    const auto res = eval_V(oracle, sched, opts);
    const double expect = static_cast<double>(m) * sigma * sigma / (1.0 + sigma * sigma);
    EXPECT_NEAR(res.V.mean, expect, 3.0 * res.V.std_err + 1e-12) << "sigma " << sigma;
  }
}

TEST(EvalLosses, PointMassHasNoPosteriorVariance) {
  const auto spec = oracle::gaussian_spec(3, Vec{0.2, -0.1, 0.4}, Vec(3, 0.0));
  const PosteriorOracle oracle(spec);
  EvalOptions opts;
  opts.n_mc = 100;
  opts.bins = 3;
  const auto res = eval_V(oracle, DiffusionSchedule::edm(1.0, 0.5), opts);
  EXPECT_LT(res.V.mean, 1e-20);
}

TEST(EvalLosses, VarianceShrinksWithNoise) {
  SyntheticSpecParams p;
  p.grid = {4, 4, 1};
  p.block = 2;
  const auto spec = make_synthetic_spec(p);
  const PosteriorOracle oracle(spec);
  EvalOptions opts;
  opts.n_mc = 400;
  opts.bins = 6;
  const auto res = eval_V(oracle, DiffusionSchedule::edm(1.0, spec.data_std()), opts);
  for (std::size_t b = 1; b < res.bins.size(); ++b) EXPECT_GT(res.bins[b].V.mean, res.bins[b - 1].V.mean);
}

TEST(EvalLosses, DecompositionHoldsOnSharedDraws) {
  SyntheticSpecParams p;
  p.grid = {4, 4, 1};
  p.block = 2;
  const auto spec = make_synthetic_spec(p);
  const PosteriorOracle oracle(spec);
  const BatchDenoiseFn biased = [&oracle](std::span<const double> x, std::span<const double> s) {
    auto out = oracle_fn(oracle)(x, s);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = 0.8 * out[k] + 0.05 * std::sin(3.0 * x[k]);
    return out;
  };
  EvalOptions opts;
  opts.n_mc = 1000;
  opts.bins = 5;
  const auto res = eval_losses(&biased, oracle, DiffusionSchedule::edm(1.0, spec.data_std()), opts);
  EXPECT_GT(res.R.mean, 0.0);
  EXPECT_LE(std::abs(res.L.mean - res.R.mean - res.V.mean), 3.0 * res.gap.std_err);
  EXPECT_NEAR(res.gap.mean, res.L.mean - res.R.mean - res.V.mean, 1e-12);
}

TEST(EvalLosses, Deterministic) {
  const auto spec = standard_normal(2);
  const PosteriorOracle oracle(spec);
  EvalOptions opts;
  opts.n_mc = 50;
  opts.bins = 2;
  const auto sched = DiffusionSchedule::edm(10.0, 1.0);
  const auto a = eval_R(zero_fn(), oracle, sched, opts);
  const auto b = eval_R(zero_fn(), oracle, sched, opts);
  EXPECT_EQ(a.R.mean, b.R.mean);
  opts.seed = 1;
  EXPECT_NE(eval_R(zero_fn(), oracle, sched, opts).R.mean, a.R.mean);
}

TEST(Kl, ShiftedGaussianMatchesClosedForm) {
  const auto spec = oracle::gaussian_spec(1, Vec{0.0}, Vec{1.0});
  const auto sched = DiffusionSchedule::edm(1.0, 0.5);
  KlOptions opts;
  opts.n_mc = 64;
  opts.t_quadrature = 128;
  const auto est = eval_kl(shifted_normal_score(0.0), shifted_normal_score(0.1), spec, sched, opts);
  EXPECT_NEAR(est.kl, 0.005, 0.05 * 0.005);
  EXPECT_FALSE(est.coarse_grid_warning);
}

TEST(Kl, IdenticalScoresGiveZero) {
  SyntheticSpecParams p;
  p.grid = {2, 2, 1};
  p.block = 1;
  const auto spec = make_synthetic_spec(p);
  const PosteriorOracle oracle(spec);
  KlOptions opts;
  opts.n_mc = 32;
  opts.t_quadrature = 16;
  const auto est =
      eval_kl(oracle_score_fn(oracle), oracle_score_fn(oracle), spec, DiffusionSchedule::edm(1.0, 0.2), opts, &spec);
  EXPECT_EQ(est.kl, 0.0);
  EXPECT_EQ(est.std_err, 0.0);
  ASSERT_TRUE(est.terminal_mean_gap.has_value());
  EXPECT_EQ(*est.terminal_mean_gap, 0.0);
}

TEST(Kl, DenoiserScoreMatchesOracleScore) {
  SyntheticSpecParams p;
  p.grid = {2, 2, 1};
  p.block = 1;
  const auto spec = make_synthetic_spec(p);
  const PosteriorOracle oracle(spec);
  KlOptions opts;
  opts.n_mc = 16;
  opts.t_quadrature = 8;
  const auto est = eval_kl(oracle_score_fn(oracle), denoiser_score_fn(oracle_fn(oracle)), spec,
                           DiffusionSchedule::edm(1.0, 0.2), opts);
  EXPECT_LT(est.kl, 1e-12);
}

TEST(Kl, NonnegativeAndFlagsCoarseGrid) {
  const auto spec = oracle::gaussian_spec(1, Vec{0.0}, Vec{1.0});
  // A score gap concentrated at small noise is badly resolved by three nodes.
  const ScoreFn bumpy = [](std::span<const double> x, std::span<const double> s) {
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < s.size(); ++r) out[r] = -x[r] / (1.0 + s[r] * s[r]) + 1.0 / (s[r] + 0.01);
    return out;
  };
  KlOptions opts;
  opts.n_mc = 8;
  opts.t_quadrature = 5;
  const auto est = eval_kl(shifted_normal_score(0.0), bumpy, spec, DiffusionSchedule::edm(1.0, 0.5), opts);
  EXPECT_GE(est.kl, -3.0 * est.std_err);
  EXPECT_TRUE(est.coarse_grid_warning);
}

TEST(LinearStatistic, MatchesHandConditioningOnGaussian) {
  DenseMatrix S(2, 2);
  S(0, 0) = 1.3;
  S(0, 1) = S(1, 0) = 0.4;
  S(1, 1) = 0.6;
  auto spec = oracle::gaussian_spec(2, Vec{0.3, -0.2}, Vec{0.0, 0.0});
  spec.components[0].dense_cov = S;
  const Vec v{2.0, -1.0};
  DenseMatrix M(2, 2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) M(i, j) = 3.0 * v[i] * v[j];
  const double sigma = 0.7;
  const LinearStatisticOracle cond(spec, M, sigma);
  EXPECT_EQ(cond.rank(), 1u);
  const double nv = std::hypot(v[0], v[1]);
  const Vec u{v[0] / nv, v[1] / nv};
  const double Su0 = S(0, 0) * u[0] + S(0, 1) * u[1];
  const double Su1 = S(1, 0) * u[0] + S(1, 1) * u[1];
  const double uSu = u[0] * Su0 + u[1] * Su1;
  for (const Vec& x : {Vec{0.0, 0.0}, Vec{1.0, 2.0}, Vec{-3.0, 0.5}}) {
    const double proj = u[0] * (x[0] - 0.3) + u[1] * (x[1] + 0.2);
    const Vec got = cond.posterior_mean(x);
    EXPECT_NEAR(got[0], 0.3 + Su0 * proj / (uSu + sigma * sigma), 1e-12);
    EXPECT_NEAR(got[1], -0.2 + Su1 * proj / (uSu + sigma * sigma), 1e-12);
  }
}

TEST(Identity, ClosedFormTermsOnGaussian2d) {
  DenseMatrix S(2, 2);
  S(0, 0) = 0.9;
  S(0, 1) = S(1, 0) = -0.3;
  S(1, 1) = 0.5;
  auto spec = oracle::gaussian_spec(2, Vec{0.1, 0.2}, Vec{0.0, 0.0});
  spec.components[0].dense_cov = S;
  const Vec v{1.0, 0.5};
  DenseMatrix M(2, 2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) M(i, j) = v[i] * v[j];
  const double sigma = 0.6;
  const auto exact = oracle::gaussian_identity_2d(S, v, sigma);
  EXPECT_NEAR(exact.lhs, exact.rhs1 + exact.rhs2, 1e-12);
  const auto mc = check_residual_identity(spec, M, sigma, 40000, 3);
  EXPECT_NEAR(mc.lhs.mean, exact.lhs, 4.0 * mc.lhs.std_err);
  EXPECT_NEAR(mc.rhs1.mean, exact.rhs1, 4.0 * mc.rhs1.std_err);
  EXPECT_NEAR(mc.rhs2.mean, exact.rhs2, 4.0 * mc.rhs2.std_err);
  EXPECT_TRUE(mc.passed);
}

TEST(Identity, FullInformationAndNoInformation) {
  const auto spec = oracle::random_small_spec(4, 3, 2);
  const auto full = check_residual_identity(spec, DenseMatrix::identity(3), 0.5, 2000, 1);
  EXPECT_LT(full.rhs2.mean, 1e-18);
  EXPECT_NEAR(full.lhs.mean, full.rhs1.mean, 1e-9);
  const auto none = check_residual_identity(spec, DenseMatrix(3, 3), 0.5, 20000, 1);
  EXPECT_EQ(none.rank, 0u);
  double total_var = 0.0;
  const Vec mean = spec.mixture_mean();
  for (const auto& c : spec.components)
    for (std::size_t j = 0; j < 3; ++j)
      total_var += c.weight * (c.dense_cov.value()(j, j) + (c.mean[j] - mean[j]) * (c.mean[j] - mean[j]));
  EXPECT_NEAR(none.lhs.mean, total_var, 4.0 * none.lhs.std_err);
  EXPECT_TRUE(none.passed);
}

TEST(Identity, HoldsOnRandomSpecs) {
  int passed = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    CounterRng rng(s, "test/identity", 0);
    const std::size_t m = 2 + rng.below(7);
    const std::size_t K = 1 + rng.below(3);
    const auto spec = oracle::random_small_spec(100 + s, m, K);
    const std::size_t r = 1 + rng.below(m);
    DenseMatrix A(r, m);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < m; ++j) A(i, j) = rng.normal();
    DenseMatrix M(m, m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t k = 0; k < r; ++k) M(i, j) += A(k, i) * A(k, j);
    const auto res = check_residual_identity(spec, M, rng.uniform(0.1, 2.0), 4000, s);
    EXPECT_LE(std::abs(res.gap), 3.0 * res.combined_stderr) << "spec " << s;
    EXPECT_LE(res.paired_stderr, res.combined_stderr * 1.0001);
    passed += res.passed ? 1 : 0;
  }
  EXPECT_EQ(passed, 20);
}

TEST(Identity, PatchStatisticIsIdentity) {
  const GridShape grid{4, 4, 1};
  const auto M = statistic_matrix({make_patch_tiling(grid, 2, 2)}, 16);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(M(i, j), i == j ? 1.0 : 0.0);
}

TEST(Report, JsonTextAndCsv) {
  const auto spec = standard_normal(2);
  const PosteriorOracle oracle(spec);
  EvalOptions opts;
  opts.n_mc = 20;
  opts.bins = 3;
  EvalReport rep;
  rep.denoiser_id = "zero";
  rep.losses = eval_R(zero_fn(), oracle, DiffusionSchedule::edm(10.0, 1.0), opts);
  rep.kl = KlEstimate{};
  const auto j = to_json(rep);
  EXPECT_EQ(j.at("bins").size(), 3u);
  EXPECT_EQ(j.at("R").at("mean").get<double>(), rep.losses.R.mean);
  std::ostringstream text, csv;
  write_report_text(text, rep);
  write_report_csv(csv, rep);
  EXPECT_NE(text.str().find("sigma-averaged"), std::string::npos);
  int lines = 0;
  for (char c : csv.str()) lines += c == '\n';
  EXPECT_EQ(lines, 4);
}

TEST(EvalOptions, JsonRejectsUnknownKeys) {
  EvalOptions o;
  o.fixed_sigma = 0.5;
  const auto back = eval_options_from_json(to_json(o));
  EXPECT_EQ(back.fixed_sigma, o.fixed_sigma);
  EXPECT_THROW(eval_options_from_json(nlohmann::json{{"nmc", 3}}), ConfigError);
  EXPECT_THROW(eval_options_from_json(nlohmann::json{{"n_mc", 1}}), ConfigError);
}
