#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bdl/aligned.hpp"
#include "bdl/diffusion.hpp"
#include "bdl/linops.hpp"
#include "bdl/synthdata.hpp"

namespace bdl {

enum class Activation { relu, silu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Fully connected network with all parameters in one flat buffer. Layer l
// stores its weight as a row-major (out x in) block followed by its bias.
class Mlp {
 public:
  Mlp() = default;
  // Zero-initialized parameters.
  Mlp(std::vector<std::size_t> sizes, Activation activation);

  // Normal initialization with variance gain/fan_in (gain 2 for relu, 1 for silu);
  // the last layer is additionally scaled by final_scale.
  static Mlp initialized(std::vector<std::size_t> sizes, Activation activation, std::uint64_t seed,
                         double final_scale = 1.0);

  const std::vector<std::size_t>& sizes() const { return sizes_; }
  Activation activation() const { return activation_; }
  std::size_t layer_count() const { return sizes_.empty() ? 0 : sizes_.size() - 1; }
  std::size_t input_dim() const { return sizes_.front(); }
  std::size_t output_dim() const { return sizes_.back(); }
  std::size_t parameter_count() const { return params_.size(); }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  std::span<double> weight(std::size_t layer);
  std::span<const double> weight(std::size_t layer) const;
  std::span<double> bias(std::size_t layer);
  std::span<const double> bias(std::size_t layer) const;
  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const { return offsets_[layer] + sizes_[layer] * sizes_[layer + 1]; }

  bool all_finite() const;

 private:
  std::vector<std::size_t> sizes_;
  Activation activation_ = Activation::silu;
  AlignedVec params_;
  std::vector<std::size_t> offsets_;
};

// Activations kept from a batched forward pass for the backward pass.
struct MlpTape {
  std::size_t batch = 0;
  // pre[l] and post[l] are (batch x sizes[l+1]) row-major; post of the last layer is the output.
  std::vector<AlignedVec> pre;
  std::vector<AlignedVec> post;
  AlignedVec input;
};

// inputs: (batch x d_in) row-major. Returns (batch x d_out).
std::vector<double> mlp_forward(const Mlp& net, std::span<const double> inputs, std::size_t batch,
                                MlpTape* tape = nullptr);

// Accumulates d loss / d params into grad (size parameter_count) given
// d loss / d outputs (batch x d_out). Optionally returns d loss / d inputs.
void mlp_backward(const Mlp& net, const MlpTape& tape, std::span<const double> d_out, std::span<double> grad,
                  std::vector<double>* d_in = nullptr);

enum class PrecondKind { edm, residual, none };

std::string to_string(PrecondKind k);
PrecondKind precond_kind_from_string(const std::string& s);

// Input/output scalings around the raw network F:
// D(x, sigma) = c_skip x + c_out F(c_in x, embed(c_noise)).
struct Preconditioner {
  PrecondKind kind = PrecondKind::edm;
  double sigma_data = 0.5;

  double c_skip(double sigma) const;
  double c_out(double sigma) const;
  double c_in(double sigma) const;
  double c_noise(double sigma) const;
  // 1 / c_out^2: (sigma^2 + sigma_data^2) / (sigma sigma_data)^2 for EDM scaling, 1 for direct outputs.
  double loss_weight(double sigma) const;
};

// Sinusoidal features of c_noise: sin(f_j c), cos(f_j c) with geometric f_j.
void time_embedding(double c_noise, std::span<double> out);

struct DenoiserNet {
  std::size_t dim = 0;
  std::size_t embed_dim = 16;
  double clamp_U = 1.0;
  Preconditioner precond;
  Mlp mlp;

  // Single query.
  Vec operator()(std::span<const double> x_t, double sigma) const;
  // Batched query; x_t is (batch x dim) row-major with one sigma per row.
  std::vector<double> forward_batch(std::span<const double> x_t, std::span<const double> sigmas) const;
  DenoiseFn as_fn() const;
};

struct NetArchitecture {
  std::vector<std::size_t> hidden{256, 256};
  Activation activation = Activation::silu;
  std::size_t embed_dim = 16;
  double final_scale = 1.0;
};

nlohmann::json to_json(const NetArchitecture& arch);
NetArchitecture net_architecture_from_json(const nlohmann::json& j);

DenoiserNet make_denoiser(std::size_t dim, const NetArchitecture& arch, const Preconditioner& precond, double U,
                          std::uint64_t seed);

// Outputs and intermediate values of a batched forward pass, for backprop.
struct DenoiserTape {
  MlpTape mlp;
  std::vector<double> raw;  // unclamped c_skip x + c_out F
  std::vector<double> out;  // clamped output
  std::vector<double> c_out;
};

std::vector<double> denoiser_forward(const DenoiserNet& net, std::span<const double> x_t,
                                     std::span<const double> sigmas, DenoiserTape* tape);

// Backprop of d loss / d output through the clamp and preconditioning.
void denoiser_backward(const DenoiserNet& net, const DenoiserTape& tape, std::span<const double> d_out,
                       std::span<double> grad);

struct LossAndGrad {
  double loss = 0.0;
  AlignedVec grad;
};

// Batch-mean weighted MSE: (1/B) sum_b w_b ||D(x_b, sigma_b) - y_b||^2 and its exact gradient.
LossAndGrad denoiser_mse(const DenoiserNet& net, std::span<const double> x_t, std::span<const double> sigmas,
                         std::span<const double> targets, std::span<const double> weights);

enum class OptimizerKind { sgd, adam };
enum class SigmaRule { log_uniform, lognormal };
enum class LrSchedule { constant, cosine };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);
std::string to_string(SigmaRule r);
SigmaRule sigma_rule_from_string(const std::string& s);
std::string to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(const std::string& s);

struct TrainConfig {
  int epochs = 10;
  std::size_t batch_size = 64;
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double momentum = 0.0;
  // cosine decays the learning rate to zero over the run.
  LrSchedule lr_schedule = LrSchedule::constant;
  SigmaRule sigma_rule = SigmaRule::log_uniform;
  double p_mean = -1.2;
  double p_std = 1.2;
  std::uint64_t seed = 0;
  std::string stream = "train";
  // Gradient shards have this fixed size regardless of thread count.
  std::size_t shard_size = 32;
  double divergence_factor = 1e3;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t n_params);
  void step(std::span<double> params, std::span<const double> grad, double lr_scale = 1.0);

 private:
  TrainConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  long long t_ = 0;
};

double draw_training_sigma(const TrainConfig& cfg, const DiffusionSchedule& schedule, CounterRng& rng);

struct CurvePoint {
  std::size_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  // Mean loss in four sigma quartile buckets (log scale over the schedule range); NaN when empty.
  std::array<double, 4> bucket_loss{};
};

struct TrainingCurve {
  std::vector<CurvePoint> points;
  void write_csv(std::ostream& os) const;
};

// Batched stage-1 prediction added in front of the trained network.
using BatchDenoiseFn = std::function<std::vector<double>(std::span<const double>, std::span<const double>)>;

// Training objective (1/B) sum_b w(sigma_b) [ ||base_b + a(sigma_b) D_b - x0_b||^2 + penalty ||a(sigma_b) D_b||^2 ].
// Defaults give plain denoising score matching with EDM weighting.
struct Objective {
  BatchDenoiseFn base;
  std::function<double(double)> output_scale;
  double penalty = 0.0;
  std::function<double(double)> weight;
};

// Runs after each epoch; may modify state captured by the objective.
using EpochHook = std::function<void(int epoch, const DenoiserNet& net)>;

struct TrainResult {
  DenoiserNet net;
  TrainingCurve curve;
};

TrainResult train_denoiser(const Dataset& data, const DiffusionSchedule& schedule, const TrainConfig& cfg,
                           DenoiserNet init, const Objective& objective = {}, const EpochHook& hook = {});

// Plain training on a view dataset.
TrainResult train_view_denoiser(const Dataset& ds, const DiffusionSchedule& schedule, const TrainConfig& cfg,
                                DenoiserNet init);

nlohmann::json denoiser_header(const DenoiserNet& net);
void write_denoiser(const std::filesystem::path& path, const DenoiserNet& net, const nlohmann::json& provenance);
DenoiserNet read_denoiser(const std::filesystem::path& path, nlohmann::json* provenance = nullptr);

}  // namespace bdl
