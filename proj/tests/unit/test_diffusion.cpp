#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "bdl/diffusion.hpp"
#include "bdl/error.hpp"
#include "support/oracles.hpp"

using namespace bdl;
using bdl::oracle::gaussian_spec;

TEST(Schedule, EdmDefaults) {
  const auto s = DiffusionSchedule::edm(1.0, 0.5);
  EXPECT_DOUBLE_EQ(s.sigma_min, 0.002);
  EXPECT_DOUBLE_EQ(s.sigma_max, 80.0);
  EXPECT_DOUBLE_EQ(DiffusionSchedule::edm(2.0, 0.25).sigma_max, 40.0);
  EXPECT_DOUBLE_EQ(DiffusionSchedule::edm(2.0, 0.25).sigma_min, 0.004);
}

TEST(Schedule, StrictlyIncreasingGridAndPositiveG2) {
  for (auto rule : {NodeRule::log, NodeRule::karras}) {
    DiffusionSchedule s;
    s.rule = rule;
    const Vec t = s.t_grid();
    ASSERT_EQ(t.size(), static_cast<std::size_t>(s.Q));
    EXPECT_NEAR(t.front(), s.sigma_min, 1e-15);
    EXPECT_NEAR(t.back(), s.sigma_max, 1e-12);
    for (std::size_t i = 1; i < t.size(); ++i) {
      EXPECT_GT(s.sigma(t[i]), s.sigma(t[i - 1]));
      EXPECT_GE(s.g2(t[i]), 0.0);
    }
  }
}

TEST(Schedule, VarianceMatchesIntegratedG2) {
  DiffusionSchedule s;
  const Vec t = s.t_grid();
  for (std::size_t i = 0; i + 1 < t.size(); ++i) {
    const double a = t[i], b = t[i + 1];
    // Simpson's rule is exact for the linear g^2.
    const double integral = (b - a) / 6.0 * (s.g2(a) + 4.0 * s.g2(0.5 * (a + b)) + s.g2(b));
    const double diff = s.sigma(b) * s.sigma(b) - s.sigma(a) * s.sigma(a);
    EXPECT_NEAR(integral, diff, 1e-6 * diff);
  }
}

TEST(Schedule, OutOfRangeTime) {
  DiffusionSchedule s;
  EXPECT_THROW(s.sigma(0.0), RangeError);
  EXPECT_THROW(s.sigma(s.sigma_max * 1.01), RangeError);
}

TEST(Schedule, JsonRoundTrip) {
  DiffusionSchedule s;
  s.sigma_min = 0.01;
  s.Q = 33;
  s.rule = NodeRule::karras;
  const auto back = schedule_from_json(nlohmann::json::parse(to_json(s).dump()));
  EXPECT_EQ(to_json(back), to_json(s));
}

TEST(AddNoise, VanishingNoise) {
  DiffusionSchedule s;
  s.sigma_min = 1e-4;
  const auto n = add_noise(Vec{1.0, 2.0}, s.sigma_min, s, 1, stream_id("noise"), 0);
  EXPECT_NEAR(n.x_t[0], 1.0, 1e-3);
  EXPECT_NEAR(n.x_t[1], 2.0, 1e-3);
  EXPECT_DOUBLE_EQ(n.sigma, s.sigma(n.t));
}

TEST(AddNoise, Deterministic) {
  DiffusionSchedule s;
  const auto a = add_noise(Vec{0.5, -0.5}, 1.0, s, 4, 9, 17);
  const auto b = add_noise(Vec{0.5, -0.5}, 1.0, s, 4, 9, 17);
  EXPECT_EQ(a.x_t, b.x_t);
}

TEST(AddNoise, EmpiricalVariance) {
  DiffusionSchedule s;
  const std::size_t n = 100000;
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = add_noise(Vec{0.3}, 2.0, s, 2, 5, i).x_t[0] - 0.3;
    sum += e;
    sum2 += e * e;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  // Var of the sample variance of N(0, 4) is 2 * 16 / n.
  EXPECT_NEAR(var, 4.0, 3.0 * std::sqrt(32.0 / n));
}

TEST(AddNoise, OutOfRange) {
  DiffusionSchedule s;
  EXPECT_THROW(add_noise(Vec{0.0}, 0.0, s, 1, 1, 0), RangeError);
}

TEST(Oracle, ConjugateShrinkage) {
  PosteriorOracle o(gaussian_spec(1, {0.0}, {1.0}));
  EXPECT_NEAR(o.posterior_mean(Vec{2.0}, 1.0)[0], 1.0, 1e-14);
}

TEST(Oracle, SymmetricComponentsGiveZero) {
  DataSpec spec;
  spec.id = "sym";
  spec.grid = GridShape{1, 3, 1};
  spec.m = 3;
  spec.U = 10.0;
  for (double sign : {1.0, -1.0}) {
    MixtureComponent c;
    c.weight = 0.5;
    c.mean = Vec(3, sign);
    c.diag = Vec(3, 0.2);
    c.global_factors = DenseMatrix(3, 0);
    spec.components.push_back(c);
  }
  PosteriorOracle o(spec);
  for (double sigma : {0.01, 0.5, 3.0}) {
    const Vec m = o.posterior_mean(Vec(3, 0.0), sigma);
    for (double v : m) EXPECT_NEAR(v, 0.0, 1e-14);
  }
}

TEST(Oracle, MatchesQuadratureOn2dMixtures) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto spec = bdl::oracle::random_2d_mixture(seed);
    PosteriorOracle o(spec);
    CounterRng r(seed, "test/queries", 0);
    for (int q = 0; q < 3; ++q) {
      const double sigma = std::exp(r.uniform(std::log(0.1), std::log(3.0)));
      const Vec x{r.uniform(-2.5, 2.5), r.uniform(-2.5, 2.5)};
      const Vec a = o.posterior_mean(x, sigma);
      const Vec b = bdl::oracle::quadrature_posterior_mean_2d(spec, x, sigma, 601);
      const double scale = std::max(1.0, std::max(std::abs(b[0]), std::abs(b[1])));
      EXPECT_NEAR(a[0], b[0], 1e-6 * scale);
      EXPECT_NEAR(a[1], b[1], 1e-6 * scale);
    }
  }
}

TEST(Oracle, ResponsibilitiesSumToOne) {
  SyntheticSpecParams p;
  p.grid = GridShape{8, 8, 1};
  p.block = 4;
  p.components = 3;
  const auto spec = make_synthetic_spec(p);
  PosteriorOracle o(spec);
  for (std::size_t i = 0; i < 20; ++i) {
    Vec x(spec.m);
    CounterRng r(1, "test/resp", i);
    r.fill_normal(x);
    const Vec w = o.responsibilities(x, 0.05 + 0.1 * static_cast<double>(i));
    double s = 0.0;
    for (double v : w) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Oracle, WoodburyMatchesDenseFactorization) {
  SyntheticSpecParams p;
  p.grid = GridShape{8, 8, 1};
  p.block = 4;
  p.global_rank = 3;
  p.global_strength = 0.012;
  const auto spec = make_synthetic_spec(p);
  DataSpec dense = spec;
  for (auto& c : dense.components) {
    c.dense_cov = c.covariance(spec.global_strength);
    c.global_factors = DenseMatrix(spec.m, 0);
  }
  PosteriorOracle lowrank(spec), full(dense);
  for (std::size_t i = 0; i < 10; ++i) {
    Vec x(spec.m);
    sample_mixture(spec, 5, 6, i, x);
    const double sigma = 0.01 * std::pow(2.0, static_cast<double>(i));
    CounterRng r(2, "test/wb", i);
    for (double& v : x) v += sigma * r.normal();
    const Vec a = lowrank.posterior_mean(x, sigma);
    const Vec b = full.posterior_mean(x, sigma);
    for (std::size_t j = 0; j < spec.m; ++j) EXPECT_NEAR(a[j], b[j], 1e-10);
    EXPECT_NEAR(lowrank.log_density(x, sigma), full.log_density(x, sigma), 1e-8);
  }
}

TEST(Oracle, CachedAndFreshAgree) {
  const auto spec = make_synthetic_spec({});
  PosteriorOracle cached(spec), fresh(spec);
  const Vec sig{0.05, 0.5};
  cached.cache_sigmas(sig);
  Vec x(spec.m);
  sample_mixture(spec, 1, 2, 3, x);
  for (double s : sig) {
    EXPECT_EQ(cached.posterior_mean(x, s), fresh.posterior_mean(x, s));
    EXPECT_EQ(cached.posterior_mean(x, s), cached.posterior_mean(x, s));
  }
}

TEST(Oracle, BoundedOnModelDraws) {
  const auto spec = make_synthetic_spec({});
  PosteriorOracle o(spec);
  DiffusionSchedule sched = DiffusionSchedule::edm(spec.U, 0.5);
  for (std::size_t i = 0; i < 30; ++i) {
    CounterRng r(3, "test/bounded", i);
    const double sigma = sched.sample_sigma(r);
    Vec x(spec.m);
    sample_mixture(spec, 3, 4, i, x);
    for (double& v : x) v += sigma * r.normal();
    for (double v : o.posterior_mean(x, sigma)) {
      EXPECT_LE(v, spec.U + 1e-6);
      EXPECT_GE(v, -spec.U - 1e-6);
    }
  }
}

TEST(Oracle, NonFiniteInput) {
  PosteriorOracle o(gaussian_spec(2, {0.0, 0.0}, {1.0, 1.0}));
  EXPECT_THROW(o.posterior_mean(Vec{std::numeric_limits<double>::quiet_NaN(), 0.0}, 1.0), NumericError);
  EXPECT_THROW(o.posterior_mean(Vec{0.0}, 1.0), ShapeError);
}

TEST(Score, FromDenoiserExamples) {
  EXPECT_EQ(score_from_denoiser(Vec{2.0}, Vec{2.0}, 0.7), (Vec{0.0}));
  EXPECT_EQ(score_from_denoiser(Vec{1.0}, Vec{2.0}, 1.0), (Vec{-1.0}));
  EXPECT_THROW(score_from_denoiser(Vec{1.0}, Vec{2.0}, 0.0), DomainError);
}

TEST(Score, StandardGaussianAcrossGrid) {
  PosteriorOracle o(gaussian_spec(1, {0.0}, {1.0}));
  DiffusionSchedule s;
  for (double sigma : s.t_grid(32)) {
    for (double x : {-3.0, -0.4, 0.0, 1.7}) {
      const double expect = -x / (1.0 + sigma * sigma);
      EXPECT_NEAR(o.score(Vec{x}, sigma)[0], expect, 1e-13 * std::max(1.0, std::abs(expect)));
    }
  }
}

TEST(Score, TweedieMatchesDiagonalClosedForm) {
  const Vec mu{0.2, -0.1, 0.05};
  const Vec d{0.03, 0.01, 0.02};
  PosteriorOracle o(gaussian_spec(3, mu, d));
  for (double sigma : {0.003, 0.05, 1.0, 20.0}) {
    const Vec x{0.4, -0.3, 0.1};
    const Vec s = score_from_denoiser(o.posterior_mean(x, sigma), x, sigma);
    for (std::size_t j = 0; j < 3; ++j) {
      const double expect = -(x[j] - mu[j]) / (d[j] + sigma * sigma);
      EXPECT_NEAR(s[j], expect, 1e-8 * std::abs(expect));
    }
  }
}

TEST(Score, MixtureScoreMatchesLogDensityDifferences) {
  const auto spec = bdl::oracle::random_2d_mixture(7);
  PosteriorOracle o(spec);
  const Vec x{0.3, -0.8};
  for (double sigma : {0.2, 1.0}) {
    const Vec s = o.score(x, sigma);
    const double h = 1e-5;
    for (std::size_t j = 0; j < 2; ++j) {
      Vec up = x, dn = x;
      up[j] += h;
      dn[j] -= h;
      const double fd = (o.log_density(up, sigma) - o.log_density(dn, sigma)) / (2 * h);
      EXPECT_NEAR(s[j], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(Sampler, PointMassContracts) {
  const Vec c{0.3, -0.2, 0.1};
  PosteriorOracle o(gaussian_spec(3, c, Vec(3, 0.0)));
  DiffusionSchedule s;
  const Vec x = sample_reverse(o.denoiser(), s, 3, 64, 1, 2, 0);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(x[j], c[j], 1e-3);
}

TEST(Sampler, StandardGaussianCovariance) {
  PosteriorOracle o(gaussian_spec(2, {0.0, 0.0}, {1.0, 1.0}));
  DiffusionSchedule s;
  const auto den = o.denoiser();
  const std::size_t n = 10000;
  double c00 = 0, c11 = 0, c01 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec x = sample_reverse(den, s, 2, 24, 11, 3, i);
    c00 += x[0] * x[0] / n;
    c11 += x[1] * x[1] / n;
    c01 += x[0] * x[1] / n;
  }
  EXPECT_NEAR(c00, 1.0, 0.05);
  EXPECT_NEAR(c11, 1.0, 0.05);
  EXPECT_NEAR(c01, 0.0, 0.05);
}

TEST(Sampler, SingleStepIdentityDenoiser) {
  DiffusionSchedule s;
  const DenoiseFn identity = [](std::span<const double> x, double) { return Vec(x.begin(), x.end()); };
  CounterRng r(1, 2, 0);
  const Vec x_T{s.sigma_max * r.normal(), s.sigma_max * r.normal()};
  EXPECT_EQ(sample_reverse(identity, s, 2, 1, 1, 2, 0), x_T);
}

TEST(Sampler, SingleStepLinearDenoiserHandComputed) {
  // Euler to sigma = 0: x1 = x0 + (0 - s0) (x0 - 0.5 x0) / s0 = 0.5 x0.
  DiffusionSchedule s;
  const DenoiseFn half = [](std::span<const double> x, double) {
    Vec out(x.begin(), x.end());
    for (double& v : out) v *= 0.5;
    return out;
  };
  const Vec x = integrate_reverse(half, s, Vec{80.0, -40.0}, 1, nullptr);
  EXPECT_EQ(x, (Vec{40.0, -20.0}));
}

TEST(Sampler, TwoStepZeroDenoiserHandComputed) {
  // Heun from sigma_max to sigma_min keeps x proportional to sigma; the final step returns D = 0.
  DiffusionSchedule s;
  std::vector<double> seen;
  const DenoiseFn zero = [&](std::span<const double> x, double sigma) {
    seen.push_back(x[0] / sigma);
    return Vec(x.size(), 0.0);
  };
  const Vec x = integrate_reverse(zero, s, Vec{80.0}, 2, nullptr);
  EXPECT_EQ(x, (Vec{0.0}));
  ASSERT_EQ(seen.size(), 3u);
  for (double r : seen) EXPECT_NEAR(r, 1.0, 1e-6);
}

TEST(Sampler, SecondOrderConvergence) {
  PosteriorOracle o(gaussian_spec(1, {0.0}, {0.25}));
  DiffusionSchedule s;
  const auto den = o.denoiser();
  const Vec x_T{s.sigma_max * 0.7};
  const double ref = integrate_reverse(den, s, x_T, 1024, nullptr)[0];
  double prev = std::abs(integrate_reverse(den, s, x_T, 8, nullptr)[0] - ref);
  for (int steps : {16, 32}) {
    const double err = std::abs(integrate_reverse(den, s, x_T, steps, nullptr)[0] - ref);
    EXPECT_GE(prev / err, 3.0) << "steps " << steps;
    prev = err;
  }
}

TEST(Sampler, ExactGaussianFlow) {
  // For N(0, v) data the flow is x(sigma) = x_T sqrt((v + sigma^2) / (v + sigma_max^2)).
  PosteriorOracle o(gaussian_spec(1, {0.0}, {0.25}));
  DiffusionSchedule s;
  const double xT = 50.0;
  const double x = integrate_reverse(o.denoiser(), s, Vec{xT}, 512, nullptr)[0];
  const double at_min = xT * std::sqrt((0.25 + s.sigma_min * s.sigma_min) / (0.25 + s.sigma_max * s.sigma_max));
  // The final step maps x(sigma_min) to the posterior mean v x / (v + sigma_min^2).
  const double expect = at_min * 0.25 / (0.25 + s.sigma_min * s.sigma_min);
  EXPECT_NEAR(x, expect, 1e-4 * std::abs(expect));
}

TEST(Sampler, DivergenceCarriesStep) {
  DiffusionSchedule s;
  int calls = 0;
  const DenoiseFn bad = [&](std::span<const double> x, double) {
    ++calls;
    return Vec(x.size(), calls > 5 ? std::numeric_limits<double>::quiet_NaN() : 0.0);
  };
  try {
    sample_reverse(bad, s, 2, 10, 1, 1, 0);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 2u);
  }
}

TEST(Sampler, StochasticIsDeterministicPerStream) {
  PosteriorOracle o(gaussian_spec(2, {0.0, 0.0}, {1.0, 1.0}));
  DiffusionSchedule s;
  SamplerOptions opt;
  opt.stochastic = true;
  const Vec a = sample_reverse(o.denoiser(), s, 2, 32, 5, 6, 7, opt);
  const Vec b = sample_reverse(o.denoiser(), s, 2, 32, 5, 6, 7, opt);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, sample_reverse(o.denoiser(), s, 2, 32, 5, 6, 7));
}

TEST(Sampler, TrajectoryCsv) {
  PosteriorOracle o(gaussian_spec(2, {0.0, 0.0}, {1.0, 1.0}));
  DiffusionSchedule s;
  std::ostringstream csv;
  SamplerOptions opt;
  opt.trajectory_csv = &csv;
  sample_reverse(o.denoiser(), s, 2, 5, 1, 1, 0, opt);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,t,sigma,norm");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 6);
}
