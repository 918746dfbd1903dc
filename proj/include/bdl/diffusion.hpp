#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "bdl/linops.hpp"
#include "bdl/rng.hpp"
#include "bdl/synthdata.hpp"

namespace bdl {

// A denoiser maps (x_t, sigma) to an estimate of E[x_0 | x_t].
using DenoiseFn = std::function<Vec(std::span<const double>, double)>;

enum class NodeRule { log, karras };

std::string to_string(NodeRule rule);
NodeRule node_rule_from_string(const std::string& s);

// Variance-exploding schedule with sigma(t) = t on [sigma_min, sigma_max],
// hence g(t)^2 = d sigma^2 / dt = 2t.
struct DiffusionSchedule {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  int Q = 256;
  NodeRule rule = NodeRule::log;

  static DiffusionSchedule edm(double U, double sigma_data);

  void validate() const;
  double T() const { return sigma_max; }
  double t_min() const { return sigma_min; }
  double sigma(double t) const;
  double g2(double t) const { return 2.0 * t; }

  // Q quadrature nodes in t, ascending from t_min to T.
  Vec t_grid() const;
  Vec t_grid(int q) const;
  // steps + 1 noise levels for the reverse process, descending.
  Vec sampling_sigmas(int steps) const;
  // Log-uniform draw on [sigma_min, sigma_max].
  double sample_sigma(CounterRng& rng) const;
};

nlohmann::json to_json(const DiffusionSchedule& schedule);
DiffusionSchedule schedule_from_json(const nlohmann::json& j);

struct NoisySample {
  Vec x_t;
  double t = 0.0;
  double sigma = 0.0;
  std::optional<std::size_t> x0_ref;
};

// x_t = x0 + sigma(t) eps with eps from the counter stream (seed, stream, index).
NoisySample add_noise(std::span<const double> x0, double t, const DiffusionSchedule& schedule,
                      std::uint64_t seed, std::uint32_t stream, std::uint64_t index);

// Exact posterior quantities for a Gaussian-mixture spec observed through
// x_t = x_0 + sigma eps. Factorizations are cached for registered sigmas.
class PosteriorOracle {
 public:
  explicit PosteriorOracle(DataSpec spec);
  ~PosteriorOracle();
  PosteriorOracle(const PosteriorOracle&) = delete;
  PosteriorOracle& operator=(const PosteriorOracle&) = delete;

  const DataSpec& spec() const { return spec_; }
  std::size_t dim() const { return spec_.m; }

  // Sigmas that get a cached factorization; other sigmas factor fresh.
  void cache_sigmas(std::span<const double> sigmas);

  Vec posterior_mean(std::span<const double> x_t, double sigma) const;
  Vec responsibilities(std::span<const double> x_t, double sigma) const;
  // log p_sigma(x_t), the density of the noised mixture.
  double log_density(std::span<const double> x_t, double sigma) const;
  // grad log p_sigma(x_t) = -sum_k w_k (Sigma_k + sigma^2 I)^-1 (x_t - mu_k).
  Vec score(std::span<const double> x_t, double sigma) const;

  DenoiseFn denoiser() const;

  struct Factor;

 private:
  std::shared_ptr<const Factor> factor(double sigma) const;
  // Returns log(pi_k N_k(x_t)) per component and, if requested, (Sigma_k + sigma^2 I)^-1 (x_t - mu_k).
  std::vector<double> component_terms(const Factor& f, std::span<const double> x_t, double sigma,
                                      std::vector<Vec>* precisions) const;

  DataSpec spec_;
  std::set<double> cached_sigmas_;
  mutable std::mutex mutex_;
  mutable std::map<double, std::shared_ptr<const Factor>> cache_;
};

// (denoised - x_t) / sigma^2.
Vec score_from_denoiser(std::span<const double> denoised, std::span<const double> x_t, double sigma);

struct SamplerOptions {
  bool stochastic = false;
  // Receives "step,t,sigma,norm" rows when set.
  std::ostream* trajectory_csv = nullptr;
};

// Integrates the probability-flow ODE dx/dsigma = (x - D(x, sigma)) / sigma
// over `steps` noise levels from sigma_max down to sigma_min with Heun steps,
// then takes a final Euler step to sigma = 0 (which returns D(x, sigma_min)).
// steps = 1 is a single Euler step from sigma_max. The stochastic option
// replaces the Heun steps with Euler-Maruyama steps of the reverse SDE.
Vec sample_reverse(const DenoiseFn& denoise, const DiffusionSchedule& schedule, std::size_t dim, int steps,
                   std::uint64_t seed, std::uint32_t stream, std::uint64_t index,
                   const SamplerOptions& options = {});

// Same integrator starting from a given x at sigma_max.
Vec integrate_reverse(const DenoiseFn& denoise, const DiffusionSchedule& schedule, Vec x, int steps,
                      CounterRng* noise_rng, const SamplerOptions& options = {});

}  // namespace bdl
