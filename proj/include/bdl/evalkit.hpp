#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdl/bootstrap.hpp"
#include "bdl/diffusion.hpp"
#include "bdl/neural.hpp"
#include "bdl/stats.hpp"
#include "bdl/synthdata.hpp"

namespace bdl {

struct EvalOptions {
  // Monte-Carlo draws per sigma bin.
  std::size_t n_mc = 512;
  int bins = 10;
  std::uint64_t seed = 0;
  std::string stream = "eval";
  // Evaluate at this single noise level instead of the binned schedule range.
  std::optional<double> fixed_sigma;
  std::size_t chunk = 256;

  void validate() const;
};

nlohmann::json to_json(const EvalOptions& o);
EvalOptions eval_options_from_json(const nlohmann::json& j);

struct BinLosses {
  double sigma_lo = 0.0;
  double sigma_hi = 0.0;
  Estimate L;
  Estimate R;
  Estimate V;
  // Per-draw L - R - V; its mean is zero when targets share the draws.
  Estimate gap;
};

// Losses with the bin estimates averaged uniformly over bins, i.e. with sigma
// log-uniform on the schedule range.
struct LossEstimates {
  std::vector<BinLosses> bins;
  Estimate L;
  Estimate R;
  Estimate V;
  Estimate gap;
  std::size_t draws = 0;
};

// L = E||f - x0||^2, R = E||f - E[x0|x_t]||^2 and V = E||E[x0|x_t] - x0||^2 on one
// shared set of draws x0 ~ spec, x_t = x0 + sigma eps. A null denoiser skips L and R.
LossEstimates eval_losses(const BatchDenoiseFn* denoise, const PosteriorOracle& oracle,
                          const DiffusionSchedule& schedule, const EvalOptions& opts);

LossEstimates eval_R(const BatchDenoiseFn& denoise, const PosteriorOracle& oracle, const DiffusionSchedule& schedule,
                     const EvalOptions& opts);
LossEstimates eval_L(const BatchDenoiseFn& denoise, const PosteriorOracle& oracle, const DiffusionSchedule& schedule,
                     const EvalOptions& opts);
LossEstimates eval_V(const PosteriorOracle& oracle, const DiffusionSchedule& schedule, const EvalOptions& opts);

// Batched score: rows of x_t with one sigma per row.
using ScoreFn = std::function<std::vector<double>(std::span<const double>, std::span<const double>)>;

ScoreFn oracle_score_fn(const PosteriorOracle& oracle);
ScoreFn denoiser_score_fn(BatchDenoiseFn denoise);

struct KlOptions {
  std::size_t n_mc = 256;
  int t_quadrature = 64;
  std::uint64_t seed = 0;
  std::string stream = "kl";
  // Relative change on halving the grid above which the result is flagged.
  double refine_tolerance = 0.05;
};

struct KlEstimate {
  double kl = 0.0;
  double std_err = 0.0;
  // Estimate on the coarser grid (every other node) for the refinement check.
  double kl_coarse = 0.0;
  bool coarse_grid_warning = false;
  int nodes = 0;
  std::size_t n_mc = 0;
  // Mismatch of the terminal marginals at sigma_max, when a second spec is given:
  // ||mean_a - mean_b|| and |var_a - var_b| / var_a for the mean coordinate variance.
  std::optional<double> terminal_mean_gap;
  std::optional<double> terminal_var_gap;
};

// KL(path_A || path_B) ~ int_{t_min}^{T} g(t)^2 / 2 E_{x_t ~ p_t^A} ||s_A - s_B||^2 dt, trapezoidal on the
// schedule's t grid with x_t drawn from the marginals of spec_a. The terminal KL is dropped and
// reported as a diagnostic when spec_b is given.
KlEstimate eval_kl(const ScoreFn& score_a, const ScoreFn& score_b, const DataSpec& spec_a,
                   const DiffusionSchedule& schedule, const KlOptions& opts, const DataSpec* spec_b = nullptr);

// E[x0 | M x_t] for a Gaussian mixture, via Gaussian conditioning on an
// orthonormal basis of the row space of M with responsibility reweighting.
class LinearStatisticOracle {
 public:
  LinearStatisticOracle(const DataSpec& spec, const DenseMatrix& M, double sigma, double rank_tol = 1e-10);

  Vec posterior_mean(std::span<const double> x_t) const;
  std::size_t rank() const;
  bool jittered() const;

  struct Impl;

 private:
  std::shared_ptr<const Impl> impl_;
};

// Sum_op B_op A_op over all operators of all groups (unweighted).
DenseMatrix statistic_matrix(const std::vector<std::vector<ViewOperator>>& groups, std::size_t m);

struct IdentityCheck {
  double sigma = 0.0;
  Estimate lhs;   // E||x0 - E[x0 | M x_t]||^2
  Estimate rhs1;  // E||x0 - E[x0 | x_t]||^2
  Estimate rhs2;  // E||E[x0 | x_t] - E[x0 | M x_t]||^2
  double gap = 0.0;
  double combined_stderr = 0.0;
  double paired_stderr = 0.0;
  std::size_t rank = 0;
  bool jittered = false;
  bool passed = false;
};

// Draws x0 ~ spec without clamping, so the analytic oracles are exact.
IdentityCheck check_residual_identity(const DataSpec& spec, const DenseMatrix& M, double sigma, std::size_t n_mc,
                                      std::uint64_t seed, const std::string& stream = "identity");

// n draws from the mixture without clamping to [-U, U].
Dataset sample_unclamped(const DataSpec& spec, std::size_t n, const std::string& stream);

struct EvalReport {
  std::string denoiser_id;
  std::string config_hash;
  LossEstimates losses;
  std::optional<KlEstimate> kl;
  std::vector<std::string> warnings;
};

nlohmann::json to_json(const Estimate& e);
nlohmann::json to_json(const EvalReport& r);
void write_report_text(std::ostream& os, const EvalReport& r);
// One row per sigma bin.
void write_report_csv(std::ostream& os, const EvalReport& r);

}  // namespace bdl
