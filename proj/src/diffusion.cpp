#include "bdl/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "bdl/error.hpp"
#include "bdl/json_util.hpp"

namespace bdl {

std::string to_string(NodeRule rule) { return rule == NodeRule::log ? "log" : "karras"; }

NodeRule node_rule_from_string(const std::string& s) {
  if (s == "log") return NodeRule::log;
  if (s == "karras") return NodeRule::karras;
  throw ConfigError("unknown schedule rule '" + s + "' (expected log or karras)");
}

DiffusionSchedule DiffusionSchedule::edm(double U, double sigma_data) {
  DiffusionSchedule s;
  s.sigma_min = 0.002 * U;
  // 80 at the reference data std of 0.5.
  s.sigma_max = 80.0 * sigma_data / 0.5;
  return s;
}

void DiffusionSchedule::validate() const {
  if (!(sigma_min > 0.0) || !(sigma_max > sigma_min) || !std::isfinite(sigma_max))
    throw ConfigError("schedule requires 0 < sigma_min < sigma_max");
  if (Q < 2) throw ConfigError("schedule.Q must be >= 2");
}

double DiffusionSchedule::sigma(double t) const {
  if (!(t >= sigma_min * (1.0 - 1e-12)) || !(t <= sigma_max * (1.0 + 1e-12)))
    throw RangeError("diffusion time " + std::to_string(t) + " outside [" + std::to_string(sigma_min) + ", " +
                     std::to_string(sigma_max) + "]");
  return t;
}

Vec DiffusionSchedule::t_grid() const { return t_grid(Q); }

Vec DiffusionSchedule::t_grid(int q) const {
  Vec s = sampling_sigmas(q - 1);
  std::reverse(s.begin(), s.end());
  return s;
}

Vec DiffusionSchedule::sampling_sigmas(int steps) const {
  if (steps < 1) throw DomainError("sampling requires steps >= 1");
  Vec s(static_cast<std::size_t>(steps) + 1);
  const double n = steps;
  for (int i = 0; i <= steps; ++i) {
    const double frac = i / n;
    if (rule == NodeRule::log) {
      s[i] = std::exp(std::log(sigma_max) + frac * (std::log(sigma_min) - std::log(sigma_max)));
    } else {
      constexpr double rho = 7.0;
      const double a = std::pow(sigma_max, 1.0 / rho);
      const double b = std::pow(sigma_min, 1.0 / rho);
      s[i] = std::pow(a + frac * (b - a), rho);
    }
  }
  s.front() = sigma_max;
  s.back() = sigma_min;
  return s;
}

double DiffusionSchedule::sample_sigma(CounterRng& rng) const {
  return std::exp(rng.uniform(std::log(sigma_min), std::log(sigma_max)));
}

nlohmann::json to_json(const DiffusionSchedule& schedule) {
  return {{"sigma_min", schedule.sigma_min},
          {"sigma_max", schedule.sigma_max},
          {"Q", schedule.Q},
          {"rule", to_string(schedule.rule)}};
}

DiffusionSchedule schedule_from_json(const nlohmann::json& j) {
  require_known_keys(j, {"sigma_min", "sigma_max", "Q", "rule"}, "schedule");
  DiffusionSchedule s;
  s.sigma_min = j.at("sigma_min").get<double>();
  s.sigma_max = j.at("sigma_max").get<double>();
  s.Q = j.at("Q").get<int>();
  s.rule = node_rule_from_string(j.at("rule").get<std::string>());
  s.validate();
  return s;
}

NoisySample add_noise(std::span<const double> x0, double t, const DiffusionSchedule& schedule,
                      std::uint64_t seed, std::uint32_t stream, std::uint64_t index) {
  NoisySample out;
  out.t = t;
  out.sigma = schedule.sigma(t);
  CounterRng rng(seed, stream, index);
  out.x_t.resize(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out.x_t[i] = x0[i] + out.sigma * rng.normal();
  return out;
}

struct PosteriorOracle::Factor {
  struct Component {
    // Structured: covariance + sigma^2 I = C + L L^T with C diagonal.
    Vec inv_c;
    std::optional<Cholesky> capacitance;  // I + L^T C^-1 L
    // Dense fallback.
    std::optional<Cholesky> full;
    double log_det = 0.0;
  };
  std::vector<Component> components;
};

PosteriorOracle::PosteriorOracle(DataSpec spec) : spec_(std::move(spec)) {
  if (spec_.m == 0 || spec_.components.empty()) throw DomainError("posterior oracle: empty spec");
}

PosteriorOracle::~PosteriorOracle() = default;

void PosteriorOracle::cache_sigmas(std::span<const double> sigmas) {
  std::lock_guard lock(mutex_);
  cached_sigmas_.insert(sigmas.begin(), sigmas.end());
}

namespace {

bool has_low_rank(const DataSpec& spec, const MixtureComponent& c) {
  return spec.global_strength > 0.0 && !c.global_factors.empty();
}

}  // namespace

std::shared_ptr<const PosteriorOracle::Factor> PosteriorOracle::factor(double sigma) const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw NumericError("posterior oracle: sigma must be positive");
  {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(sigma); it != cache_.end()) return it->second;
  }
  auto f = std::make_shared<Factor>();
  const double s2 = sigma * sigma;
  const std::size_t m = spec_.m;
  for (const auto& c : spec_.components) {
    Factor::Component fc;
    if (c.dense_cov) {
      DenseMatrix cov = *c.dense_cov;
      for (std::size_t i = 0; i < m; ++i) cov(i, i) += s2;
      fc.full.emplace(cov);
      fc.log_det = fc.full->log_det();
    } else {
      fc.inv_c.resize(m);
      for (std::size_t i = 0; i < m; ++i) {
        fc.inv_c[i] = 1.0 / (c.diag[i] + s2);
        fc.log_det -= std::log(fc.inv_c[i]);
      }
      if (has_low_rank(spec_, c)) {
        const std::size_t r = c.global_factors.cols();
        DenseMatrix cap = DenseMatrix::identity(r);
        for (std::size_t i = 0; i < m; ++i) {
          const auto row = c.global_factors.row(i);
          const double w = spec_.global_strength * fc.inv_c[i];
          for (std::size_t a = 0; a < r; ++a)
            for (std::size_t b = 0; b < r; ++b) cap(a, b) += w * row[a] * row[b];
        }
        fc.capacitance.emplace(cap);
        fc.log_det += fc.capacitance->log_det();
      }
    }
    f->components.push_back(std::move(fc));
  }
  std::lock_guard lock(mutex_);
  if (cached_sigmas_.count(sigma)) cache_.emplace(sigma, f);
  return f;
}

std::vector<double> PosteriorOracle::component_terms(const Factor& f, std::span<const double> x_t, double sigma,
                                                     std::vector<Vec>* precisions) const {
  const std::size_t m = spec_.m;
  if (x_t.size() != m)
    throw ShapeError("posterior oracle: query has dimension " + std::to_string(x_t.size()) + ", spec has " +
                     std::to_string(m));
  for (double v : x_t)
    if (!std::isfinite(v)) throw NumericError("posterior oracle: non-finite query");
  const double log2pi = std::log(2.0 * std::numbers::pi);
  std::vector<double> terms(spec_.components.size());
  if (precisions) precisions->assign(spec_.components.size(), Vec{});
  Vec diff(m);
  for (std::size_t k = 0; k < spec_.components.size(); ++k) {
    const auto& c = spec_.components[k];
    const auto& fc = f.components[k];
    for (std::size_t i = 0; i < m; ++i) diff[i] = x_t[i] - c.mean[i];
    // prec = (Sigma + sigma^2 I)^-1 diff
    Vec prec;
    if (fc.full) {
      prec = fc.full->solve(diff);
    } else {
      prec.resize(m);
      for (std::size_t i = 0; i < m; ++i) prec[i] = fc.inv_c[i] * diff[i];
      if (fc.capacitance) {
        const double s = std::sqrt(spec_.global_strength);
        const Vec proj = matvec_transposed(c.global_factors, prec);
        Vec t(proj.size());
        for (std::size_t a = 0; a < proj.size(); ++a) t[a] = s * proj[a];
        const Vec solved = fc.capacitance->solve(t);
        const Vec back = matvec(c.global_factors, solved);
        for (std::size_t i = 0; i < m; ++i) prec[i] -= fc.inv_c[i] * s * back[i];
      }
    }
    const double quad = dot(diff, prec);
    terms[k] = (c.weight > 0.0 ? std::log(c.weight) : -INFINITY) - 0.5 * (m * log2pi + fc.log_det + quad);
    if (precisions) (*precisions)[k] = std::move(prec);
  }
  return terms;
}

namespace {

// Normalizes log-weights in place; returns log-sum-exp.
double normalize_log_weights(std::vector<double>& terms) {
  const double peak = *std::max_element(terms.begin(), terms.end());
  double total = 0.0;
  for (double& t : terms) {
    t = std::exp(t - peak);
    total += t;
  }
  for (double& t : terms) t /= total;
  return peak + std::log(total);
}

}  // namespace

Vec PosteriorOracle::posterior_mean(std::span<const double> x_t, double sigma) const {
  const auto f = factor(sigma);
  std::vector<Vec> precs;
  auto w = component_terms(*f, x_t, sigma, &precs);
  normalize_log_weights(w);
  // Component means are x_t - sigma^2 prec_k.
  const double s2 = sigma * sigma;
  Vec out(spec_.m, 0.0);
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (w[k] <= 0.0) continue;
    for (std::size_t i = 0; i < spec_.m; ++i) out[i] += w[k] * (x_t[i] - s2 * precs[k][i]);
  }
  return out;
}

Vec PosteriorOracle::responsibilities(std::span<const double> x_t, double sigma) const {
  const auto f = factor(sigma);
  auto w = component_terms(*f, x_t, sigma, nullptr);
  normalize_log_weights(w);
  return w;
}

double PosteriorOracle::log_density(std::span<const double> x_t, double sigma) const {
  const auto f = factor(sigma);
  auto w = component_terms(*f, x_t, sigma, nullptr);
  return normalize_log_weights(w);
}

Vec PosteriorOracle::score(std::span<const double> x_t, double sigma) const {
  const auto f = factor(sigma);
  std::vector<Vec> precs;
  auto w = component_terms(*f, x_t, sigma, &precs);
  normalize_log_weights(w);
  Vec out(spec_.m, 0.0);
  for (std::size_t k = 0; k < w.size(); ++k)
    if (w[k] > 0.0) axpy(-w[k], precs[k], out);
  return out;
}

DenoiseFn PosteriorOracle::denoiser() const {
  return [this](std::span<const double> x, double sigma) { return posterior_mean(x, sigma); };
}

Vec score_from_denoiser(std::span<const double> denoised, std::span<const double> x_t, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("score_from_denoiser: sigma must be positive");
  if (denoised.size() != x_t.size()) throw ShapeError("score_from_denoiser: dimension mismatch");
  const double inv = 1.0 / (sigma * sigma);
  Vec s(x_t.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = (denoised[i] - x_t[i]) * inv;
  return s;
}

namespace {

void check_finite(const Vec& x, std::size_t step) {
  for (double v : x)
    if (!std::isfinite(v)) throw DivergenceError("reverse sampler produced a non-finite state", step);
}

void log_state(const SamplerOptions& options, std::size_t step, double sigma, const Vec& x) {
  if (options.trajectory_csv)
    *options.trajectory_csv << step << ',' << sigma << ',' << sigma << ',' << std::sqrt(squared_norm(x)) << '\n';
}

}  // namespace

Vec integrate_reverse(const DenoiseFn& denoise, const DiffusionSchedule& schedule, Vec x, int steps,
                      CounterRng* noise_rng, const SamplerOptions& options) {
  if (steps < 1) throw DomainError("reverse sampling requires steps >= 1");
  if (options.stochastic && noise_rng == nullptr) throw ConfigError("stochastic sampling needs a noise stream");
  // `steps` noise levels from sigma_max down to sigma_min, then a final step to zero.
  Vec sigmas = steps == 1 ? Vec{schedule.sigma_max} : schedule.sampling_sigmas(steps - 1);
  sigmas.push_back(0.0);
  const std::size_t n = x.size();
  if (options.trajectory_csv) *options.trajectory_csv << "step,t,sigma,norm\n";
  log_state(options, 0, sigmas[0], x);
  Vec d(n), x_next(n);
  for (int i = 0; i < steps; ++i) {
    const double s_cur = sigmas[i];
    const double s_next = sigmas[i + 1];
    const double h = s_next - s_cur;  // negative
    const Vec den = denoise(x, s_cur);
    if (den.size() != n) throw ShapeError("denoiser returned wrong dimension");
    if (s_next == 0.0) {
      // Euler step to sigma = 0 lands on the denoised estimate.
      x = den;
    } else if (options.stochastic) {
      // Euler-Maruyama on dx = -2 sigma score dsigma + sqrt(2 sigma) dW, score = (D - x) / sigma^2.
      const double dt = -h;
      const double drift = 2.0 * dt / s_cur;
      const double diffusion = std::sqrt(2.0 * s_cur * dt);
      for (std::size_t j = 0; j < n; ++j) x[j] += drift * (den[j] - x[j]) + diffusion * noise_rng->normal();
    } else {
      for (std::size_t j = 0; j < n; ++j) {
        d[j] = (x[j] - den[j]) / s_cur;
        x_next[j] = x[j] + h * d[j];
      }
      const Vec den2 = denoise(x_next, s_next);
      if (den2.size() != n) throw ShapeError("denoiser returned wrong dimension");
      for (std::size_t j = 0; j < n; ++j) x[j] += 0.5 * h * (d[j] + (x_next[j] - den2[j]) / s_next);
    }
    check_finite(x, static_cast<std::size_t>(i));
    log_state(options, static_cast<std::size_t>(i) + 1, s_next, x);
  }
  return x;
}

Vec sample_reverse(const DenoiseFn& denoise, const DiffusionSchedule& schedule, std::size_t dim, int steps,
                   std::uint64_t seed, std::uint32_t stream, std::uint64_t index, const SamplerOptions& options) {
  if (steps < 1) throw DomainError("sample_reverse: steps must be >= 1");
  CounterRng rng(seed, stream, index);
  Vec x(dim);
  for (double& v : x) v = schedule.sigma_max * rng.normal();
  return integrate_reverse(denoise, schedule, std::move(x), steps, &rng, options);
}

}  // namespace bdl
