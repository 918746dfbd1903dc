#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdl/diffusion.hpp"
#include "bdl/linops.hpp"
#include "bdl/neural.hpp"
#include "bdl/stats.hpp"
#include "bdl/synthdata.hpp"

namespace bdl {

// Constants of the covering-number assumption for the denoiser class.
struct CoveringParams {
  double L_bar = 1.0;
  double W = 1.0;
  double C = 1.0;
  double epsilon = 1.0;
  double N = 1.0;

  void validate() const;
};

nlohmann::json to_json(const CoveringParams& p);
CoveringParams covering_params_from_json(const nlohmann::json& j);

// L_bar W log(1 + L_bar C N / epsilon), the log of the covering-number bound.
double log_covering_bound(const CoveringParams& p);

// Inputs shared by the event probabilities and the composite bound. The slack
// terms delta_v, rho, gamma and epsilon are free choices; zero slack is allowed
// and makes the matching event probability vacuous (1).
struct BoundInputs {
  long long N = 1;
  long long K = 1;
  double m = 1.0;
  double U = 1.0;
  double delta_b = 0.0;
  double delta_v = 0.0;
  double rho = 0.0;
  double gamma = 0.0;
  double epsilon = 0.0;
  double EV = 0.0;
  double rademacher = 0.0;

  void validate() const;
};

nlohmann::json to_json(const BoundInputs& b);
BoundInputs bound_inputs_from_json(const nlohmann::json& j);

double prob_event_e1(const BoundInputs& b);
double prob_event_e2(const BoundInputs& b, double log_covering);
double prob_event_e2(const BoundInputs& b, const CoveringParams& cover);
double prob_event_e3(const BoundInputs& b);

// Which loss the bound is read for: the plain denoiser or the residual network
// with its redefined bias, variance and complexity inputs. The formula is shared.
enum class BoundContext { denoiser, residual };

std::string to_string(BoundContext c);
BoundContext bound_context_from_string(const std::string& s);

struct BoundResult {
  BoundContext context = BoundContext::denoiser;
  double R_bound = 0.0;
  double failure_prob = 0.0;
  double p_e1 = 0.0;
  double p_e2 = 0.0;
  double p_e3 = 0.0;
  double log_covering = 0.0;
};

// R <= (sqrt((sqrt(EV + db^2 + dv^2) + eps)^2 + rho + 2 Rad + gamma) + eps)^2 + 2 Rad + gamma - EV,
// failing with probability at most p_e1 + p_e2 + p_e3 (clamped to 1).
BoundResult generalization_bound(const BoundInputs& b, double log_covering,
                                 BoundContext context = BoundContext::denoiser);
BoundResult generalization_bound(const BoundInputs& b, const CoveringParams& cover,
                                 BoundContext context = BoundContext::denoiser);

// Finite stand-in for the parameter class: snapshots along a training run and
// random perturbations of them. The supremum over this grid lower-bounds the
// supremum over the full class.
struct FiniteHypothesisGrid {
  std::vector<DenoiserNet> members;
  std::vector<std::string> provenance;

  void validate() const;
  std::size_t size() const { return members.size(); }
};

// Each snapshot plus `perturbations` copies with parameters p + scale * rms(p) * z.
FiniteHypothesisGrid make_hypothesis_grid(const std::vector<DenoiserNet>& snapshots, int perturbations,
                                          double scale, std::uint64_t seed);

enum class LossKind { L, R };

std::string to_string(LossKind k);
LossKind loss_kind_from_string(const std::string& s);

struct RademacherOptions {
  LossKind kind = LossKind::L;
  // Noisy draws per training sample.
  int K = 1;
  int trials = 200;
  std::uint64_t seed = 0;
  std::string stream = "rademacher";
};

// losses(h, j) = ||f_h(x_t,j) - y_j||^2 over the N*K draws j, with y = x0 for L
// and the oracle posterior mean for R. Row j = k*N + n.
DenseMatrix rademacher_loss_matrix(const std::vector<BatchDenoiseFn>& hypotheses, const Dataset& s0,
                                   const DiffusionSchedule& schedule, const RademacherOptions& opts,
                                   const PosteriorOracle* oracle = nullptr);

// Mean over sign trials of max_h (1/NK) sum_j s_j losses(h, j), with its standard error.
Estimate empirical_rademacher(const DenseMatrix& losses, int trials, std::uint64_t seed);

Estimate empirical_rademacher(const FiniteHypothesisGrid& grid, const Dataset& s0, const DiffusionSchedule& schedule,
                              const RademacherOptions& opts, const PosteriorOracle* oracle = nullptr);

// One row of a bound sweep.
struct SweepRow {
  BoundInputs inputs;
  CoveringParams cover;
  BoundResult result;
};

// Cartesian sweep over N and K; other inputs are held at `base`. The covering
// parameters use cover.N = N * K.
std::vector<SweepRow> bound_sweep(const BoundInputs& base, const CoveringParams& cover,
                                  const std::vector<long long>& Ns, const std::vector<long long>& Ks,
                                  BoundContext context = BoundContext::denoiser);

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

}  // namespace bdl
