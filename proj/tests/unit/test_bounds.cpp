#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "bdl/bounds.hpp"
#include "bdl/error.hpp"

using namespace bdl;

namespace {

// Reference values from a 50-digit evaluation of the same closed forms.
constexpr double kExpMinus2_5 = 0.082084998623898795169528674467159807;
constexpr double kTwoExpMinus2_5 = 0.16416999724779759034;
constexpr double kExpMinus5 = 0.0067379469990854670966;
constexpr double kWorkedRow = 0.676000917322165844953676;

BoundInputs unit_inputs() {
  BoundInputs b;
  b.N = 100;
  b.K = 1;
  b.m = 1.0;
  b.U = 1.0;
  return b;
}

BoundInputs worked_row() {
  BoundInputs b = unit_inputs();
  b.EV = 1.0;
  b.delta_b = 0.1;
  b.delta_v = 0.2;
  b.epsilon = 0.05;
  b.rho = 0.1;
  b.rademacher = 0.05;
  b.gamma = 0.05;
  return b;
}

// Exact expectation over all 2^J sign vectors.
double exhaustive_rademacher(const DenseMatrix& losses) {
  const std::size_t J = losses.cols();
  double total = 0.0;
  for (std::uint64_t mask = 0; mask < (1ull << J); ++mask) {
    double best = -INFINITY;
    for (std::size_t h = 0; h < losses.rows(); ++h) {
      double acc = 0.0;
      for (std::size_t j = 0; j < J; ++j) acc += ((mask >> j) & 1u ? 1.0 : -1.0) * losses(h, j);
      best = std::max(best, acc / static_cast<double>(J));
    }
    total += best;
  }
  return total / static_cast<double>(1ull << J);
}

DenseMatrix random_losses(std::size_t H, std::size_t J, std::uint64_t seed) {
  DenseMatrix L(H, J);
  CounterRng rng(seed, "test/losses", 0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t j = 0; j < J; ++j) L(h, j) = rng.uniform(0.0, 2.0);
  return L;
}

}  // namespace

TEST(Covering, UnitInputsGiveLogTwo) {
  EXPECT_NEAR(log_covering_bound({1, 1, 1, 1, 1}), std::log(2.0), 1e-12);
}

TEST(Covering, VanishingLipschitzConstantGivesUnitCover) {
  EXPECT_LT(log_covering_bound({1, 1, 1e-300, 1, 1}), 1e-250);
}

TEST(Covering, LinearInWidth) {
  const CoveringParams p{2.0, 3.0, 0.7, 0.1, 50.0};
  CoveringParams q = p;
  q.W *= 2.0;
  EXPECT_EQ(log_covering_bound(q), 2.0 * log_covering_bound(p));
}

TEST(Covering, RejectsNonpositive) {
  EXPECT_THROW(log_covering_bound({0, 1, 1, 1, 1}), DomainError);
  EXPECT_THROW(log_covering_bound({1, 1, 1, -1, 1}), DomainError);
  EXPECT_THROW(log_covering_bound({1, 1, 0, 1, 1}), DomainError);
}

TEST(EventE1, WorkedValue) {
  BoundInputs b = unit_inputs();
  b.delta_v = 1.0;
  EXPECT_NEAR(prob_event_e1(b), kExpMinus2_5, 1e-12);
}

TEST(EventE1, Limits) {
  BoundInputs b = unit_inputs();
  EXPECT_EQ(prob_event_e1(b), 1.0);
  b.delta_v = 1.0;
  b.N = 1000000;
  EXPECT_LT(prob_event_e1(b), 1e-300);
}

TEST(EventE2, WorkedValueAndReduction) {
  BoundInputs b = unit_inputs();
  b.rho = 1.0;
  EXPECT_NEAR(prob_event_e2(b, std::log(2.0)), kTwoExpMinus2_5, 1e-12);
  BoundInputs e1 = unit_inputs();
  e1.delta_v = 1.0;
  EXPECT_NEAR(prob_event_e2(b, CoveringParams{1, 1, 1e-300, 1, 1}), prob_event_e1(e1), 1e-15);
  b.rho = 0.0;
  EXPECT_EQ(prob_event_e2(b, std::log(2.0)), 1.0);
}

TEST(EventE3, WorkedValueAndLimits) {
  BoundInputs b = unit_inputs();
  b.gamma = 1.0;
  b.N = 320;
  EXPECT_NEAR(prob_event_e3(b), kExpMinus5, 1e-12);
  b.K = 1000000000;
  EXPECT_NEAR(prob_event_e3(b), std::exp(-320.0 / 32.0), 1e-12);
  b.gamma = 0.0;
  EXPECT_EQ(prob_event_e3(b), 1.0);
}

TEST(GeneralizationBound, GoldenWorkedRow) {
  const auto r = generalization_bound(worked_row(), std::log(2.0));
  EXPECT_NEAR(r.R_bound, kWorkedRow, 1e-12);
  EXPECT_GE(r.failure_prob, 0.0);
  EXPECT_LE(r.failure_prob, 1.0);
}

TEST(GeneralizationBound, ZeroSlackCollapsesToBias) {
  for (double EV : {0.0, 0.3, 2.0}) {
    BoundInputs b = unit_inputs();
    b.EV = EV;
    b.delta_b = 0.25;
    EXPECT_NEAR(generalization_bound(b, 0.0).R_bound, 0.0625, 1e-14);
  }
}

TEST(GeneralizationBound, ResidualContextUsesTheSameExpression) {
  const auto a = generalization_bound(worked_row(), 0.5, BoundContext::denoiser);
  const auto b = generalization_bound(worked_row(), 0.5, BoundContext::residual);
  EXPECT_EQ(a.R_bound, b.R_bound);
  EXPECT_EQ(a.failure_prob, b.failure_prob);
  EXPECT_EQ(b.context, BoundContext::residual);
}

TEST(Monotonicity, SweepOverSampleCount) {
  BoundInputs b = worked_row();
  double prev = 2.0;
  for (int i = 0; i < 100; ++i) {
    b.N = static_cast<long long>(std::llround(std::pow(10.0, 1.0 + 5.0 * i / 99.0)));
    const double p = generalization_bound(b, CoveringParams{1, 10, 1, 0.05, static_cast<double>(b.N)}).failure_prob;
    EXPECT_LE(p, prev) << "N " << b.N;
    EXPECT_GE(p, 0.0);
    prev = p;
    BoundInputs c = b;
    c.delta_v = 0.3;
    EXPECT_LE(prob_event_e1(c), prob_event_e1(b));
  }
}

TEST(Monotonicity, SweepOverSlack) {
  const BoundInputs base = worked_row();
  double prev_rad = -INFINITY;
  for (int i = 0; i < 100; ++i) {
    const double v = 0.01 * i;
    BoundInputs b = base;
    b.rademacher = v;
    const double r = generalization_bound(b, 1.0).R_bound;
    EXPECT_GT(r, prev_rad);
    prev_rad = r;
    for (double BoundInputs::*field : {&BoundInputs::epsilon, &BoundInputs::rho, &BoundInputs::gamma}) {
      BoundInputs lo = base;
      BoundInputs hi = base;
      lo.*field = v;
      hi.*field = v + 0.01;
      EXPECT_LE(generalization_bound(lo, 1.0).R_bound, generalization_bound(hi, 1.0).R_bound);
    }
    EXPECT_LE(prob_event_e2(base, v), prob_event_e2(base, v + 0.5));
  }
}

TEST(Monotonicity, ProbabilitiesStayInUnitInterval) {
  CounterRng rng(7, "test/bounds", 0);
  for (int i = 0; i < 500; ++i) {
    BoundInputs b;
    b.N = 1 + static_cast<long long>(rng.below(100000));
    b.K = 1 + static_cast<long long>(rng.below(50));
    b.m = rng.uniform(0.1, 2000.0);
    b.U = rng.uniform(0.1, 3.0);
    b.delta_v = rng.uniform(0.0, 5.0);
    b.rho = rng.uniform(0.0, 5.0);
    b.gamma = rng.uniform(0.0, 5.0);
    const auto r = generalization_bound(b, rng.uniform(0.0, 100.0));
    for (double p : {r.p_e1, r.p_e2, r.p_e3, r.failure_prob}) {
      EXPECT_GE(p, 0.0);
      EXPECT_LE(p, 1.0);
    }
  }
}

TEST(BoundInputs, ValidationAndJson) {
  BoundInputs b = worked_row();
  const auto back = bound_inputs_from_json(to_json(b));
  EXPECT_EQ(to_json(back).dump(), to_json(b).dump());
  b.N = 0;
  EXPECT_THROW(b.validate(), DomainError);
  EXPECT_THROW(bound_inputs_from_json(nlohmann::json{{"Delta_v", 1.0}}), ConfigError);
  BoundInputs c = worked_row();
  c.rho = std::nan("");
  EXPECT_THROW(generalization_bound(c, 0.0), DomainError);
}

TEST(Sweep, CsvCarriesWorkedProbability) {
  BoundInputs b = unit_inputs();
  b.delta_v = 1.0;
  const auto rows = bound_sweep(b, CoveringParams{}, {100}, {1});
  ASSERT_EQ(rows.size(), 1u);
  std::ostringstream os;
  write_sweep_csv(os, rows);
  EXPECT_NE(os.str().find("0.08208"), std::string::npos) << os.str();
}

TEST(Rademacher, ZeroFunctionOnZeroTargets) {
  Dataset ds;
  ds.dim = 3;
  ds.values.assign(3 * 10, 0.0);
  const auto sched = DiffusionSchedule::edm(1.0, 0.5);
  RademacherOptions opts;
  opts.K = 2;
  opts.trials = 50;
  const std::vector<BatchDenoiseFn> grid{
      [](std::span<const double> x, std::span<const double>) { return std::vector<double>(x.size(), 0.0); }};
  const auto L = rademacher_loss_matrix(grid, ds, sched, opts);
  const auto est = empirical_rademacher(L, opts.trials, 1);
  EXPECT_EQ(est.mean, 0.0);
  EXPECT_EQ(est.std_err, 0.0);
}

TEST(Rademacher, MatchesExhaustiveEnumeration) {
  for (std::size_t J : {4u, 8u, 12u}) {
    const auto L = random_losses(3, J, J);
    const double exact = exhaustive_rademacher(L);
    const auto est = empirical_rademacher(L, 20000, 5);
    EXPECT_NEAR(est.mean, exact, 4.0 * est.std_err + 1e-12) << "J " << J;
  }
}

TEST(Rademacher, ConstantLossPairMatchesClosedForm) {
  // Losses 0 and c per sample: sup = c * max(0, mean sign), enumerated exactly.
  const double c = 1.5;
  const std::size_t J = 10;
  DenseMatrix L(2, J);
  for (std::size_t j = 0; j < J; ++j) L(1, j) = c;
  double exact = 0.0;
  for (std::size_t k = 0; k <= J; ++k) {
    const double binom = std::tgamma(J + 1.0) / (std::tgamma(k + 1.0) * std::tgamma(J - k + 1.0));
    exact += binom * c * std::max(0.0, (2.0 * k - J) / J);
  }
  exact /= std::pow(2.0, J);
  EXPECT_NEAR(exhaustive_rademacher(L), exact, 1e-12);
  const auto est = empirical_rademacher(L, 20000, 6);
  EXPECT_NEAR(est.mean, exact, 4.0 * est.std_err);
}

TEST(Rademacher, SupersetGridNeverLower) {
  const auto big = random_losses(6, 40, 3);
  DenseMatrix small(3, 40);
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t j = 0; j < 40; ++j) small(h, j) = big(h, j);
  EXPECT_LE(empirical_rademacher(small, 500, 9).mean, empirical_rademacher(big, 500, 9).mean);
}

TEST(Rademacher, ShrinksLikeInverseRootN) {
  SyntheticSpecParams p;
  p.grid = {2, 2, 1};
  p.block = 1;
  p.global_rank = 0;
  const auto spec = make_synthetic_spec(p);
  const auto sched = DiffusionSchedule::edm(1.0, 0.2);
  const std::vector<BatchDenoiseFn> grid{
      [](std::span<const double> x, std::span<const double>) { return std::vector<double>(x.size(), 0.0); },
      [](std::span<const double> x, std::span<const double>) { return std::vector<double>(x.begin(), x.end()); },
      [](std::span<const double> x, std::span<const double> s) {
        std::vector<double> out(x.begin(), x.end());
        const std::size_t m = x.size() / s.size();
        for (std::size_t b = 0; b < s.size(); ++b)
          for (std::size_t i = 0; i < m; ++i) out[b * m + i] /= 1.0 + s[b] * s[b];
        return out;
      }};
  RademacherOptions opts;
  opts.trials = 400;
  std::vector<double> est;
  for (std::size_t N : {16u, 64u, 256u}) {
    const auto ds = sample_dataset(spec, N, "rademacher-test");
    est.push_back(empirical_rademacher(rademacher_loss_matrix(grid, ds, sched, opts), opts.trials, 2).mean);
  }
  EXPECT_GT(est[0], est[1]);
  EXPECT_GT(est[1], est[2]);
  const double slope = std::log(est[2] / est[0]) / std::log(16.0);
  EXPECT_GT(slope, -0.8);
  EXPECT_LT(slope, -0.25);
}

TEST(HypothesisGrid, SnapshotsAndPerturbations) {
  NetArchitecture a;
  a.hidden = {8};
  const auto n0 = make_denoiser(3, a, Preconditioner{}, 1.0, 1);
  const auto n1 = make_denoiser(3, a, Preconditioner{}, 1.0, 2);
  const auto grid = make_hypothesis_grid({n0, n1}, 3, 0.1, 4);
  EXPECT_EQ(grid.size(), 8u);
  EXPECT_EQ(grid.provenance.size(), 8u);
  const auto same = make_hypothesis_grid({n0}, 1, 0.0, 4);
  const auto p = same.members[0].mlp.params();
  const auto q = same.members[1].mlp.params();
  for (std::size_t k = 0; k < p.size(); ++k) EXPECT_EQ(p[k], q[k]);
  NetArchitecture b;
  b.hidden = {4};
  FiniteHypothesisGrid mixed{{n0, make_denoiser(3, b, Preconditioner{}, 1.0, 1)}, {}};
  EXPECT_THROW(mixed.validate(), ShapeError);
  EXPECT_THROW(FiniteHypothesisGrid{}.validate(), ConfigError);
}

TEST(HypothesisGrid, LossKindRNeedsOracle) {
  SyntheticSpecParams p;
  p.grid = {2, 2, 1};
  p.block = 1;
  const auto spec = make_synthetic_spec(p);
  const auto ds = sample_dataset(spec, 8, "g");
  NetArchitecture a;
  a.hidden = {8};
  const auto grid = make_hypothesis_grid({make_denoiser(4, a, Preconditioner{}, 1.0, 1)}, 2, 0.1, 1);
  RademacherOptions opts;
  opts.kind = LossKind::R;
  opts.trials = 20;
  const auto sched = DiffusionSchedule::edm(1.0, 0.2);
  EXPECT_THROW(empirical_rademacher(grid, ds, sched, opts), ConfigError);
  const PosteriorOracle oracle(spec);
  const auto est = empirical_rademacher(grid, ds, sched, opts, &oracle);
  EXPECT_TRUE(std::isfinite(est.mean));
  EXPECT_EQ(est.n, 20u);
}
