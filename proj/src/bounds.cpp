#include "bdl/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "bdl/error.hpp"
#include "bdl/json_util.hpp"
#include "bdl/parallel.hpp"

namespace bdl {

namespace {

void require_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) throw DomainError(std::string("covering.") + name + ": must be positive and finite");
}

void require_slack(double v, const char* name) {
  if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError(std::string("bounds.") + name + ": must be finite and >= 0");
}

double clamp_prob(double p) { return std::clamp(p, 0.0, 1.0); }

// (64 + 16K) m^2 U^4
double azuma_denominator(const BoundInputs& b) {
  const double K = static_cast<double>(b.K);
  return (64.0 + 16.0 * K) * b.m * b.m * std::pow(b.U, 4);
}

}  // namespace

void CoveringParams::validate() const {
  require_positive(L_bar, "L_bar");
  require_positive(W, "W");
  require_positive(C, "C");
  require_positive(epsilon, "epsilon");
  require_positive(N, "N");
}

nlohmann::json to_json(const CoveringParams& p) {
  return {{"L_bar", p.L_bar}, {"W", p.W}, {"C", p.C}, {"epsilon", p.epsilon}, {"N", p.N}};
}

CoveringParams covering_params_from_json(const nlohmann::json& j) {
  require_known_keys(j, {"L_bar", "W", "C", "epsilon", "N"}, "cover");
  CoveringParams p;
  p.L_bar = j.value("L_bar", p.L_bar);
  p.W = j.value("W", p.W);
  p.C = j.value("C", p.C);
  p.epsilon = j.value("epsilon", p.epsilon);
  p.N = j.value("N", p.N);
  p.validate();
  return p;
}

double log_covering_bound(const CoveringParams& p) {
  p.validate();
  return p.L_bar * p.W * std::log1p(p.L_bar * p.C * p.N / p.epsilon);
}

void BoundInputs::validate() const {
  if (N < 1) throw DomainError("bounds.N: must be >= 1");
  if (K < 1) throw DomainError("bounds.K: must be >= 1");
  if (!(m > 0.0) || !std::isfinite(m)) throw DomainError("bounds.m: must be positive");
  if (!(U > 0.0) || !std::isfinite(U)) throw DomainError("bounds.U: must be positive");
  require_slack(delta_b, "delta_b");
  require_slack(delta_v, "delta_v");
  require_slack(rho, "rho");
  require_slack(gamma, "gamma");
  require_slack(epsilon, "epsilon");
  require_slack(EV, "EV");
  require_slack(rademacher, "rademacher");
}

nlohmann::json to_json(const BoundInputs& b) {
  return {{"N", b.N},         {"K", b.K},         {"m", b.m},     {"U", b.U},
          {"delta_b", b.delta_b}, {"delta_v", b.delta_v}, {"rho", b.rho}, {"gamma", b.gamma},
          {"epsilon", b.epsilon}, {"EV", b.EV},   {"rademacher", b.rademacher}};
}

BoundInputs bound_inputs_from_json(const nlohmann::json& j) {
  require_known_keys(j, {"N", "K", "m", "U", "delta_b", "delta_v", "rho", "gamma", "epsilon", "EV", "rademacher"},
                     "bounds");
  BoundInputs b;
  b.N = j.value("N", b.N);
  b.K = j.value("K", b.K);
  b.m = j.value("m", b.m);
  b.U = j.value("U", b.U);
  b.delta_b = j.value("delta_b", b.delta_b);
  b.delta_v = j.value("delta_v", b.delta_v);
  b.rho = j.value("rho", b.rho);
  b.gamma = j.value("gamma", b.gamma);
  b.epsilon = j.value("epsilon", b.epsilon);
  b.EV = j.value("EV", b.EV);
  b.rademacher = j.value("rademacher", b.rademacher);
  b.validate();
  return b;
}

double prob_event_e1(const BoundInputs& b) {
  b.validate();
  const double NK = static_cast<double>(b.N) * static_cast<double>(b.K);
  return clamp_prob(std::exp(-2.0 * b.delta_v * b.delta_v * NK / azuma_denominator(b)));
}

double prob_event_e2(const BoundInputs& b, double log_covering) {
  b.validate();
  if (!(log_covering >= 0.0)) throw DomainError("log covering number must be >= 0");
  const double NK = static_cast<double>(b.N) * static_cast<double>(b.K);
  const double exponent = log_covering - 2.0 * b.rho * b.rho * NK / azuma_denominator(b);
  return exponent >= 0.0 ? 1.0 : clamp_prob(std::exp(exponent));
}

double prob_event_e2(const BoundInputs& b, const CoveringParams& cover) {
  return prob_event_e2(b, log_covering_bound(cover));
}

double prob_event_e3(const BoundInputs& b) {
  b.validate();
  const double K = static_cast<double>(b.K);
  const double denom = 32.0 * b.m * b.m * std::pow(b.U, 4) * (1.0 + 1.0 / K);
  return clamp_prob(std::exp(-b.gamma * b.gamma * static_cast<double>(b.N) / denom));
}

std::string to_string(BoundContext c) { return c == BoundContext::denoiser ? "denoiser" : "residual"; }

BoundContext bound_context_from_string(const std::string& s) {
  if (s == "denoiser") return BoundContext::denoiser;
  if (s == "residual") return BoundContext::residual;
  throw ConfigError("bounds.context: unknown value '" + s + "' (expected denoiser or residual)");
}

BoundResult generalization_bound(const BoundInputs& b, double log_covering, BoundContext context) {
  b.validate();
  BoundResult r;
  r.context = context;
  r.log_covering = log_covering;
  const double inner = std::sqrt(b.EV + b.delta_b * b.delta_b + b.delta_v * b.delta_v) + b.epsilon;
  const double radicand = inner * inner + b.rho + 2.0 * b.rademacher + b.gamma;
  if (!(radicand >= 0.0)) throw NumericError("generalization bound: negative radicand");
  const double outer = std::sqrt(radicand) + b.epsilon;
  r.R_bound = outer * outer + 2.0 * b.rademacher + b.gamma - b.EV;
  r.p_e1 = prob_event_e1(b);
  r.p_e2 = prob_event_e2(b, log_covering);
  r.p_e3 = prob_event_e3(b);
  r.failure_prob = clamp_prob(r.p_e1 + r.p_e2 + r.p_e3);
  return r;
}

BoundResult generalization_bound(const BoundInputs& b, const CoveringParams& cover, BoundContext context) {
  return generalization_bound(b, log_covering_bound(cover), context);
}

void FiniteHypothesisGrid::validate() const {
  if (members.empty()) throw ConfigError("hypothesis grid is empty");
  if (!provenance.empty() && provenance.size() != members.size())
    throw ShapeError("hypothesis grid provenance does not match its members");
  const auto& ref = members.front();
  for (const auto& h : members)
    if (h.dim != ref.dim || h.mlp.sizes() != ref.mlp.sizes() || h.mlp.activation() != ref.mlp.activation())
      throw ShapeError("hypothesis grid members do not share one topology");
}

FiniteHypothesisGrid make_hypothesis_grid(const std::vector<DenoiserNet>& snapshots, int perturbations, double scale,
                                          std::uint64_t seed) {
  if (perturbations < 0) throw ConfigError("perturbation count must be >= 0");
  if (!(scale >= 0.0)) throw ConfigError("perturbation scale must be >= 0");
  FiniteHypothesisGrid grid;
  for (std::size_t s = 0; s < snapshots.size(); ++s) {
    grid.members.push_back(snapshots[s]);
    grid.provenance.push_back("snapshot " + std::to_string(s));
    const auto base = snapshots[s].mlp.params();
    double rms = 0.0;
    for (double p : base) rms += p * p;
    rms = base.empty() ? 0.0 : std::sqrt(rms / static_cast<double>(base.size()));
    for (int q = 0; q < perturbations; ++q) {
      DenoiserNet h = snapshots[s];
      CounterRng rng(seed, "grid/" + std::to_string(s), static_cast<std::uint64_t>(q));
      for (double& p : h.mlp.params()) p += scale * rms * rng.normal();
      grid.members.push_back(std::move(h));
      grid.provenance.push_back("snapshot " + std::to_string(s) + " perturbation " + std::to_string(q));
    }
  }
  grid.validate();
  return grid;
}

std::string to_string(LossKind k) { return k == LossKind::L ? "L" : "R"; }

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "L") return LossKind::L;
  if (s == "R") return LossKind::R;
  throw ConfigError("loss kind: unknown value '" + s + "' (expected L or R)");
}

DenseMatrix rademacher_loss_matrix(const std::vector<BatchDenoiseFn>& hypotheses, const Dataset& s0,
                                   const DiffusionSchedule& schedule, const RademacherOptions& opts,
                                   const PosteriorOracle* oracle) {
  if (hypotheses.empty()) throw ConfigError("hypothesis grid is empty");
  if (opts.K < 1) throw ConfigError("rademacher.K: must be >= 1");
  if (opts.kind == LossKind::R && oracle == nullptr)
    throw ConfigError("rademacher: loss kind R needs a posterior oracle");
  const std::size_t N = s0.size();
  const std::size_t m = s0.dim;
  const std::size_t J = N * static_cast<std::size_t>(opts.K);
  if (J == 0) throw ConfigError("rademacher: dataset is empty");

  std::vector<double> xt(J * m), y(J * m), sig(J);
  const std::uint32_t sid = stream_id(opts.stream);
  for (std::size_t j = 0; j < J; ++j) {
    CounterRng rng(opts.seed, sid, j);
    sig[j] = schedule.sample_sigma(rng);
    const auto x0 = s0.sample(j % N);
    for (std::size_t i = 0; i < m; ++i) {
      xt[j * m + i] = x0[i] + sig[j] * rng.normal();
      y[j * m + i] = x0[i];
    }
  }
  if (opts.kind == LossKind::R) {
    parallel_for(J, [&](std::size_t j) {
      const Vec mean = oracle->posterior_mean(std::span<const double>(xt).subspan(j * m, m), sig[j]);
      std::copy(mean.begin(), mean.end(), y.begin() + static_cast<std::ptrdiff_t>(j * m));
    });
  }

  DenseMatrix losses(hypotheses.size(), J);
  for (std::size_t h = 0; h < hypotheses.size(); ++h) {
    const auto f = hypotheses[h](xt, sig);
    if (f.size() != J * m) throw ShapeError("hypothesis prediction has the wrong size");
    for (std::size_t j = 0; j < J; ++j) {
      double l = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double r = f[j * m + i] - y[j * m + i];
        l += r * r;
      }
      losses(h, j) = l;
    }
  }
  return losses;
}

Estimate empirical_rademacher(const DenseMatrix& losses, int trials, std::uint64_t seed) {
  if (trials < 1) throw ConfigError("rademacher.trials: must be >= 1");
  const std::size_t H = losses.rows();
  const std::size_t J = losses.cols();
  if (H == 0 || J == 0) throw ConfigError("rademacher: empty loss matrix");
  std::vector<double> values(static_cast<std::size_t>(trials));
  parallel_for(values.size(), [&](std::size_t t) {
    CounterRng rng(seed, "rademacher/signs", t);
    std::vector<double> signs(J);
    for (auto& s : signs) s = rng.below(2) == 0 ? -1.0 : 1.0;
    double best = -INFINITY;
    for (std::size_t h = 0; h < H; ++h) {
      double acc = 0.0;
      for (std::size_t j = 0; j < J; ++j) acc += signs[j] * losses(h, j);
      best = std::max(best, acc / static_cast<double>(J));
    }
    values[t] = best;
  });
  return summarize(values).estimate();
}

Estimate empirical_rademacher(const FiniteHypothesisGrid& grid, const Dataset& s0, const DiffusionSchedule& schedule,
                              const RademacherOptions& opts, const PosteriorOracle* oracle) {
  grid.validate();
  std::vector<BatchDenoiseFn> fns;
  fns.reserve(grid.size());
  for (const auto& h : grid.members)
    fns.emplace_back([&h](std::span<const double> x, std::span<const double> s) { return h.forward_batch(x, s); });
  return empirical_rademacher(rademacher_loss_matrix(fns, s0, schedule, opts, oracle), opts.trials, opts.seed);
}

std::vector<SweepRow> bound_sweep(const BoundInputs& base, const CoveringParams& cover,
                                  const std::vector<long long>& Ns, const std::vector<long long>& Ks,
                                  BoundContext context) {
  std::vector<SweepRow> rows;
  for (long long N : Ns)
    for (long long K : Ks) {
      SweepRow row;
      row.inputs = base;
      row.inputs.N = N;
      row.inputs.K = K;
      row.cover = cover;
      row.cover.N = static_cast<double>(N) * static_cast<double>(K);
      row.result = generalization_bound(row.inputs, row.cover, context);
      rows.push_back(row);
    }
  return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "context,N,K,m,U,delta_b,delta_v,rho,gamma,epsilon,EV,rademacher,L_bar,W,C,log_covering,p_e1,p_e2,p_e3,"
        "R_bound,p_fail\n";
  const auto flags = os.flags();
  const auto prec = os.precision();
  os << std::setprecision(10);
  for (const auto& r : rows) {
    const auto& b = r.inputs;
    os << to_string(r.result.context) << ',' << b.N << ',' << b.K << ',' << b.m << ',' << b.U << ',' << b.delta_b
       << ',' << b.delta_v << ',' << b.rho << ',' << b.gamma << ',' << b.epsilon << ',' << b.EV << ','
       << b.rademacher << ',' << r.cover.L_bar << ',' << r.cover.W << ',' << r.cover.C << ','
       << r.result.log_covering << ',' << r.result.p_e1 << ',' << r.result.p_e2 << ',' << r.result.p_e3 << ','
       << r.result.R_bound << ',' << r.result.failure_prob << '\n';
  }
  os.flags(flags);
  os.precision(prec);
}

}  // namespace bdl
