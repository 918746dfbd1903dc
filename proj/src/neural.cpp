#include "bdl/neural.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "bdl/error.hpp"
#include "bdl/json_util.hpp"
#include "bdl/parallel.hpp"
#include "bdl/rng.hpp"

namespace bdl {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;
using MapVec = Eigen::Map<Eigen::VectorXd>;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double activate(Activation a, double z) {
  if (a == Activation::relu) return z > 0.0 ? z : 0.0;
  return z * sigmoid(z);
}

double activate_grad(Activation a, double z) {
  if (a == Activation::relu) return z > 0.0 ? 1.0 : 0.0;
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

// Sums buffers[0..n) into buffers[0] pairwise in a fixed order.
void tree_reduce(std::vector<AlignedVec>& buffers) {
  for (std::size_t stride = 1; stride < buffers.size(); stride *= 2) {
    for (std::size_t i = 0; i + stride < buffers.size(); i += 2 * stride) {
      auto& dst = buffers[i];
      const auto& src = buffers[i + stride];
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "silu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "silu") return Activation::silu;
  throw ConfigError("unknown activation '" + s + "' (expected relu or silu)");
}

Mlp::Mlp(std::vector<std::size_t> sizes, Activation activation)
    : sizes_(std::move(sizes)), activation_(activation) {
  if (sizes_.size() < 2) throw ConfigError("an MLP needs at least an input and an output size");
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    if (sizes_[l] == 0 || sizes_[l + 1] == 0) throw ConfigError("MLP layer sizes must be positive");
    offsets_.push_back(total);
    total += sizes_[l] * sizes_[l + 1] + sizes_[l + 1];
  }
  params_.assign(total, 0.0);
}

Mlp Mlp::initialized(std::vector<std::size_t> sizes, Activation activation, std::uint64_t seed, double final_scale) {
  Mlp net(std::move(sizes), activation);
  const double gain = activation == Activation::relu ? 2.0 : 1.0;
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    CounterRng rng(seed, stream_id("mlp_init"), l);
    double scale = std::sqrt(gain / static_cast<double>(net.sizes_[l]));
    if (l + 1 == net.layer_count()) scale *= final_scale;
    for (double& w : net.weight(l)) w = scale * rng.normal();
  }
  return net;
}

std::span<double> Mlp::weight(std::size_t layer) {
  return std::span<double>(params_).subspan(offsets_[layer], sizes_[layer] * sizes_[layer + 1]);
}
std::span<const double> Mlp::weight(std::size_t layer) const {
  return std::span<const double>(params_).subspan(offsets_[layer], sizes_[layer] * sizes_[layer + 1]);
}
std::span<double> Mlp::bias(std::size_t layer) {
  return std::span<double>(params_).subspan(bias_offset(layer), sizes_[layer + 1]);
}
std::span<const double> Mlp::bias(std::size_t layer) const {
  return std::span<const double>(params_).subspan(bias_offset(layer), sizes_[layer + 1]);
}

bool Mlp::all_finite() const {
  return std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); });
}

std::vector<double> mlp_forward(const Mlp& net, std::span<const double> inputs, std::size_t batch, MlpTape* tape) {
  const auto& sizes = net.sizes();
  if (inputs.size() != batch * net.input_dim())
    throw ShapeError("MLP input has " + std::to_string(inputs.size()) + " values, expected " +
                     std::to_string(batch * net.input_dim()));
  const std::size_t L = net.layer_count();
  AlignedVec current(inputs.begin(), inputs.end());
  if (tape) {
    tape->batch = batch;
    tape->input = current;
    tape->pre.assign(L, {});
    tape->post.assign(L, {});
  }
  for (std::size_t l = 0; l < L; ++l) {
    const auto in = static_cast<Eigen::Index>(sizes[l]);
    const auto out = static_cast<Eigen::Index>(sizes[l + 1]);
    const auto B = static_cast<Eigen::Index>(batch);
    CMapMat X(current.data(), B, in);
    CMapMat W(net.weight(l).data(), out, in);
    CMapVec b(net.bias(l).data(), out);
    AlignedVec z(static_cast<std::size_t>(B * out));
    MapMat Z(z.data(), B, out);
    Z.noalias() = X * W.transpose();
    Z.rowwise() += b.transpose();
    if (l + 1 < L) {
      AlignedVec a(z.size());
      for (std::size_t k = 0; k < z.size(); ++k) a[k] = activate(net.activation(), z[k]);
      if (tape) tape->pre[l] = std::move(z);
      current = std::move(a);
    } else {
      if (tape) tape->pre[l] = z;
      current = std::move(z);
    }
    if (tape) tape->post[l] = current;
  }
  return std::vector<double>(current.begin(), current.end());
}

void mlp_backward(const Mlp& net, const MlpTape& tape, std::span<const double> d_out, std::span<double> grad,
                  std::vector<double>* d_in) {
  const auto& sizes = net.sizes();
  const std::size_t L = net.layer_count();
  const auto B = static_cast<Eigen::Index>(tape.batch);
  if (d_out.size() != tape.batch * net.output_dim()) throw ShapeError("MLP output gradient has the wrong size");
  if (grad.size() != net.parameter_count()) throw ShapeError("gradient buffer has the wrong size");
  AlignedVec g(d_out.begin(), d_out.end());
  for (std::size_t l = L; l-- > 0;) {
    const auto in = static_cast<Eigen::Index>(sizes[l]);
    const auto out = static_cast<Eigen::Index>(sizes[l + 1]);
    if (l + 1 < L) {
      const auto& z = tape.pre[l];
      for (std::size_t k = 0; k < g.size(); ++k) g[k] *= activate_grad(net.activation(), z[k]);
    }
    const AlignedVec& x = l == 0 ? tape.input : tape.post[l - 1];
    CMapMat X(x.data(), B, in);
    CMapMat G(g.data(), B, out);
    MapMat dW(grad.data() + net.weight_offset(l), out, in);
    MapVec db(grad.data() + net.bias_offset(l), out);
    dW.noalias() += G.transpose() * X;
    db += G.colwise().sum().transpose();
    if (l > 0 || d_in) {
      CMapMat W(net.weight(l).data(), out, in);
      AlignedVec next(static_cast<std::size_t>(B * in));
      MapMat N(next.data(), B, in);
      N.noalias() = G * W;
      g = std::move(next);
    }
  }
  if (d_in) d_in->assign(g.begin(), g.end());
}

std::string to_string(PrecondKind k) {
  switch (k) {
    case PrecondKind::edm: return "edm";
    case PrecondKind::residual: return "residual";
    case PrecondKind::none: return "none";
  }
  return "edm";
}

PrecondKind precond_kind_from_string(const std::string& s) {
  if (s == "edm") return PrecondKind::edm;
  if (s == "residual") return PrecondKind::residual;
  if (s == "none") return PrecondKind::none;
  throw ConfigError("unknown preconditioner '" + s + "' (expected edm, residual or none)");
}

double Preconditioner::c_skip(double sigma) const {
  if (kind != PrecondKind::edm) return 0.0;
  const double sd2 = sigma_data * sigma_data;
  return sd2 / (sigma * sigma + sd2);
}

double Preconditioner::c_out(double sigma) const {
  if (kind != PrecondKind::edm) return 1.0;
  return sigma * sigma_data / std::sqrt(sigma * sigma + sigma_data * sigma_data);
}

double Preconditioner::c_in(double sigma) const {
  if (kind == PrecondKind::none) return 1.0;
  return 1.0 / std::sqrt(sigma * sigma + sigma_data * sigma_data);
}

double Preconditioner::c_noise(double sigma) const { return 0.25 * std::log(sigma); }

double Preconditioner::loss_weight(double sigma) const {
  if (kind != PrecondKind::edm) return 1.0;
  const double s2 = sigma * sigma;
  const double sd2 = sigma_data * sigma_data;
  return (s2 + sd2) / (s2 * sd2);
}

void time_embedding(double c_noise, std::span<double> out) {
  const std::size_t half = out.size() / 2;
  if (out.size() % 2 != 0) throw ConfigError("time embedding dimension must be even");
  for (std::size_t j = 0; j < half; ++j) {
    const double freq = half > 1 ? std::exp(std::log(100.0) * static_cast<double>(j) / static_cast<double>(half - 1))
                                 : 1.0;
    out[j] = std::sin(freq * c_noise);
    out[half + j] = std::cos(freq * c_noise);
  }
}

DenoiserNet make_denoiser(std::size_t dim, const NetArchitecture& arch, const Preconditioner& precond, double U,
                          std::uint64_t seed) {
  if (dim == 0) throw ConfigError("denoiser dimension must be positive");
  if (arch.embed_dim % 2 != 0) throw ConfigError("embed_dim must be even");
  DenoiserNet net;
  net.dim = dim;
  net.embed_dim = arch.embed_dim;
  net.clamp_U = U;
  net.precond = precond;
  std::vector<std::size_t> sizes{dim + arch.embed_dim};
  sizes.insert(sizes.end(), arch.hidden.begin(), arch.hidden.end());
  sizes.push_back(dim);
  net.mlp = Mlp::initialized(std::move(sizes), arch.activation, seed, arch.final_scale);
  return net;
}

std::vector<double> denoiser_forward(const DenoiserNet& net, std::span<const double> x_t,
                                     std::span<const double> sigmas, DenoiserTape* tape) {
  const std::size_t B = sigmas.size();
  const std::size_t m = net.dim;
  const std::size_t E = net.embed_dim;
  if (x_t.size() != B * m)
    throw ShapeError("denoiser input has " + std::to_string(x_t.size()) + " values, expected " +
                     std::to_string(B * m));
  if (net.mlp.input_dim() != m + E || net.mlp.output_dim() != m)
    throw ShapeError("denoiser network topology does not match its dimension");
  if (!net.mlp.all_finite()) throw NumericError("denoiser parameters contain non-finite values");
  AlignedVec input(B * (m + E));
  for (std::size_t b = 0; b < B; ++b) {
    const double s = sigmas[b];
    if (!(s > 0.0) || !std::isfinite(s)) throw DomainError("denoiser sigma must be positive and finite");
    const double cin = net.precond.c_in(s);
    double* row = input.data() + b * (m + E);
    for (std::size_t j = 0; j < m; ++j) row[j] = cin * x_t[b * m + j];
    time_embedding(net.precond.c_noise(s), std::span<double>(row + m, E));
  }
  MlpTape local;
  MlpTape* mt = tape ? &tape->mlp : nullptr;
  std::vector<double> F = mlp_forward(net.mlp, input, B, mt ? mt : &local);
  std::vector<double> raw(B * m);
  std::vector<double> out(B * m);
  std::vector<double> couts(B);
  const double U = net.clamp_U;
  for (std::size_t b = 0; b < B; ++b) {
    const double cskip = net.precond.c_skip(sigmas[b]);
    const double cout = net.precond.c_out(sigmas[b]);
    couts[b] = cout;
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t k = b * m + j;
      raw[k] = cskip * x_t[k] + cout * F[k];
      out[k] = std::clamp(raw[k], -U, U);
    }
  }
  if (tape) {
    tape->raw = std::move(raw);
    tape->out = out;
    tape->c_out = std::move(couts);
  }
  return out;
}

void denoiser_backward(const DenoiserNet& net, const DenoiserTape& tape, std::span<const double> d_out,
                       std::span<double> grad) {
  const std::size_t m = net.dim;
  const std::size_t B = tape.c_out.size();
  if (d_out.size() != B * m) throw ShapeError("denoiser output gradient has the wrong size");
  const double U = net.clamp_U;
  std::vector<double> dF(B * m);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t k = b * m + j;
      const bool inside = tape.raw[k] > -U && tape.raw[k] < U;
      dF[k] = inside ? d_out[k] * tape.c_out[b] : 0.0;
    }
  }
  mlp_backward(net.mlp, tape.mlp, dF, grad);
}

Vec DenoiserNet::operator()(std::span<const double> x_t, double sigma) const {
  const double s[1] = {sigma};
  return denoiser_forward(*this, x_t, s, nullptr);
}

std::vector<double> DenoiserNet::forward_batch(std::span<const double> x_t, std::span<const double> sigmas) const {
  return denoiser_forward(*this, x_t, sigmas, nullptr);
}

DenoiseFn DenoiserNet::as_fn() const {
  auto snapshot = std::make_shared<const DenoiserNet>(*this);
  return [snapshot](std::span<const double> x, double sigma) { return (*snapshot)(x, sigma); };
}

LossAndGrad denoiser_mse(const DenoiserNet& net, std::span<const double> x_t, std::span<const double> sigmas,
                         std::span<const double> targets, std::span<const double> weights) {
  const std::size_t B = sigmas.size();
  if (B == 0) throw ShapeError("loss batch is empty");
  if (targets.size() != B * net.dim || weights.size() != B) throw ShapeError("loss batch shapes disagree");
  DenoiserTape tape;
  const auto out = denoiser_forward(net, x_t, sigmas, &tape);
  LossAndGrad result;
  std::vector<double> d_out(out.size());
  for (std::size_t b = 0; b < B; ++b) {
    double e = 0.0;
    for (std::size_t j = 0; j < net.dim; ++j) {
      const std::size_t k = b * net.dim + j;
      const double r = out[k] - targets[k];
      e += r * r;
      d_out[k] = 2.0 * weights[b] * r / static_cast<double>(B);
    }
    const double term = weights[b] * e;
    if (!std::isfinite(term)) throw NumericError("non-finite loss at batch index " + std::to_string(b));
    result.loss += term;
  }
  result.loss /= static_cast<double>(B);
  result.grad.assign(net.mlp.parameter_count(), 0.0);
  denoiser_backward(net, tape, d_out, result.grad);
  return result;
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

std::string to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  throw ConfigError("unknown lr schedule '" + s + "' (expected constant or cosine)");
}

std::string to_string(SigmaRule r) { return r == SigmaRule::lognormal ? "lognormal" : "log_uniform"; }

SigmaRule sigma_rule_from_string(const std::string& s) {
  if (s == "log_uniform") return SigmaRule::log_uniform;
  if (s == "lognormal") return SigmaRule::lognormal;
  throw ConfigError("unknown sigma rule '" + s + "' (expected log_uniform or lognormal)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (shard_size < 1) throw ConfigError("shard_size must be at least 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(p_std > 0.0)) throw ConfigError("p_std must be positive");
  if (!(divergence_factor > 1.0)) throw ConfigError("divergence_factor must exceed 1");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"optimizer", to_string(c.optimizer)},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"momentum", c.momentum},
          {"lr_schedule", to_string(c.lr_schedule)},
          {"sigma_rule", to_string(c.sigma_rule)},
          {"p_mean", c.p_mean},
          {"p_std", c.p_std},
          {"seed", c.seed},
          {"stream", c.stream},
          {"shard_size", c.shard_size},
          {"divergence_factor", c.divergence_factor}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"epochs", "batch_size", "optimizer", "lr", "beta1", "beta2", "adam_eps", "momentum",
                      "lr_schedule", "sigma_rule", "p_mean", "p_std", "seed", "stream", "shard_size",
                      "divergence_factor"},
                     "train");
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.optimizer = optimizer_from_string(j.value("optimizer", to_string(c.optimizer)));
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.momentum = j.value("momentum", c.momentum);
  c.lr_schedule = lr_schedule_from_string(j.value("lr_schedule", to_string(c.lr_schedule)));
  c.sigma_rule = sigma_rule_from_string(j.value("sigma_rule", to_string(c.sigma_rule)));
  c.p_mean = j.value("p_mean", c.p_mean);
  c.p_std = j.value("p_std", c.p_std);
  c.seed = j.value("seed", c.seed);
  c.stream = j.value("stream", c.stream);
  c.shard_size = j.value("shard_size", c.shard_size);
  c.divergence_factor = j.value("divergence_factor", c.divergence_factor);
  c.validate();
  return c;
}

nlohmann::json to_json(const NetArchitecture& a) {
  return {{"hidden", a.hidden},
          {"activation", to_string(a.activation)},
          {"embed_dim", a.embed_dim},
          {"final_scale", a.final_scale}};
}

NetArchitecture net_architecture_from_json(const nlohmann::json& j) {
  require_known_keys(j, {"hidden", "activation", "embed_dim", "final_scale"}, "arch");
  NetArchitecture a;
  a.hidden = j.value("hidden", a.hidden);
  a.activation = activation_from_string(j.value("activation", to_string(a.activation)));
  a.embed_dim = j.value("embed_dim", a.embed_dim);
  a.final_scale = j.value("final_scale", a.final_scale);
  if (a.embed_dim % 2 != 0) throw ConfigError("arch.embed_dim: must be even");
  return a;
}

Optimizer::Optimizer(const TrainConfig& cfg, std::size_t n_params)
    : cfg_(cfg), m_(n_params, 0.0), v_(cfg.optimizer == OptimizerKind::adam ? n_params : 0, 0.0) {}

void Optimizer::step(std::span<double> params, std::span<const double> grad, double lr_scale) {
  ++t_;
  const double lr = cfg_.lr * lr_scale;
  if (cfg_.optimizer == OptimizerKind::sgd) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      m_[k] = cfg_.momentum * m_[k] + grad[k];
      params[k] -= lr * m_[k];
    }
    return;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * grad[k];
    v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * grad[k] * grad[k];
    params[k] -= lr * (m_[k] / bc1) / (std::sqrt(v_[k] / bc2) + cfg_.adam_eps);
  }
}

double draw_training_sigma(const TrainConfig& cfg, const DiffusionSchedule& schedule, CounterRng& rng) {
  if (cfg.sigma_rule == SigmaRule::log_uniform) return schedule.sample_sigma(rng);
  const double s = std::exp(cfg.p_mean + cfg.p_std * rng.normal());
  return std::clamp(s, schedule.sigma_min, schedule.sigma_max);
}

void TrainingCurve::write_csv(std::ostream& os) const {
  os << "step,epoch,loss,loss_q1,loss_q2,loss_q3,loss_q4\n";
  os.precision(10);
  for (const auto& p : points) {
    os << p.step << ',' << p.epoch << ',' << p.loss;
    for (double b : p.bucket_loss) os << ',' << b;
    os << '\n';
  }
}

TrainResult train_denoiser(const Dataset& data, const DiffusionSchedule& schedule, const TrainConfig& cfg,
                           DenoiserNet init, const Objective& objective, const EpochHook& hook) {
  cfg.validate();
  schedule.validate();
  const std::size_t N = data.size();
  const std::size_t m = data.dim;
  if (N == 0) throw ConfigError("training dataset is empty");
  if (init.dim != m)
    throw ShapeError("network dimension " + std::to_string(init.dim) + " does not match data dimension " +
                     std::to_string(m));
  if (objective.penalty < 0.0) throw ConfigError("penalty must be nonnegative");

  TrainResult result{std::move(init), {}};
  DenoiserNet& net = result.net;
  Optimizer opt(cfg, net.mlp.parameter_count());
  const std::uint32_t noise_stream = stream_id(cfg.stream + "/noise");
  const std::uint32_t perm_stream = stream_id(cfg.stream + "/perm");
  const double log_lo = std::log(schedule.sigma_min);
  const double log_span = std::log(schedule.sigma_max) - log_lo;
  std::size_t step = 0;
  const std::size_t total_steps = static_cast<std::size_t>(cfg.epochs) * ((N + cfg.batch_size - 1) / cfg.batch_size);
  double reference_loss = std::numeric_limits<double>::quiet_NaN();

  std::vector<std::size_t> order(N);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng perm_rng(cfg.seed, perm_stream, static_cast<std::uint64_t>(epoch));
    shuffle(std::span<std::size_t>(order), perm_rng);

    double epoch_loss = 0.0;
    std::array<double, 4> bucket_sum{};
    std::array<std::size_t, 4> bucket_n{};

    for (std::size_t start = 0; start < N; start += cfg.batch_size) {
      const std::size_t B = std::min(cfg.batch_size, N - start);
      std::vector<double> xt(B * m), x0(B * m), sig(B);
      for (std::size_t b = 0; b < B; ++b) {
        const auto src = data.sample(order[start + b]);
        std::copy(src.begin(), src.end(), x0.begin() + static_cast<std::ptrdiff_t>(b * m));
        CounterRng rng(cfg.seed, noise_stream, static_cast<std::uint64_t>(epoch) * N + start + b);
        sig[b] = draw_training_sigma(cfg, schedule, rng);
        for (std::size_t j = 0; j < m; ++j) xt[b * m + j] = x0[b * m + j] + sig[b] * rng.normal();
      }
      std::vector<double> base;
      if (objective.base) {
        base = objective.base(xt, sig);
        if (base.size() != B * m) throw ShapeError("base prediction has the wrong size");
      }

      const std::size_t shard = cfg.shard_size;
      const std::size_t n_shards = (B + shard - 1) / shard;
      std::vector<AlignedVec> grads(n_shards);
      std::vector<std::vector<double>> sample_loss(n_shards);
      parallel_for(n_shards, [&](std::size_t s) {
        const std::size_t lo = s * shard;
        const std::size_t hi = std::min(B, lo + shard);
        const std::size_t n = hi - lo;
        const auto xs = std::span<const double>(xt).subspan(lo * m, n * m);
        const auto ss = std::span<const double>(sig).subspan(lo, n);
        DenoiserTape tape;
        const auto out = denoiser_forward(net, xs, ss, &tape);
        std::vector<double> d_out(n * m);
        auto& losses = sample_loss[s];
        losses.assign(n, 0.0);
        for (std::size_t b = 0; b < n; ++b) {
          const double sigma = ss[b];
          const double a = objective.output_scale ? objective.output_scale(sigma) : 1.0;
          const double w = objective.weight ? objective.weight(sigma) : net.precond.loss_weight(sigma);
          double err = 0.0;
          double energy = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            const std::size_t k = b * m + j;
            const double f = a * out[k];
            const double pred = (base.empty() ? 0.0 : base[(lo + b) * m + j]) + f;
            const double r = pred - x0[(lo + b) * m + j];
            err += r * r;
            energy += f * f;
            d_out[k] = w * (2.0 * a * r + 2.0 * objective.penalty * a * f) / static_cast<double>(B);
          }
          losses[b] = w * (err + objective.penalty * energy);
        }
        grads[s].assign(net.mlp.parameter_count(), 0.0);
        denoiser_backward(net, tape, d_out, grads[s]);
      });

      double batch_loss = 0.0;
      for (std::size_t s = 0; s < n_shards; ++s) {
        for (std::size_t b = 0; b < sample_loss[s].size(); ++b) {
          const double l = sample_loss[s][b];
          const std::size_t idx = s * shard + b;
          if (!std::isfinite(l))
            throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch index " +
                                      std::to_string(idx),
                                  static_cast<int>(step));
          batch_loss += l;
          const double pos = (std::log(sig[idx]) - log_lo) / log_span;
          const auto q = static_cast<std::size_t>(std::clamp(pos * 4.0, 0.0, 3.0));
          bucket_sum[q] += l;
          ++bucket_n[q];
        }
      }
      epoch_loss += batch_loss;
      tree_reduce(grads);
      double lr_scale = 1.0;
      if (cfg.lr_schedule == LrSchedule::cosine)
        lr_scale = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
      opt.step(net.mlp.params(), grads[0], lr_scale);
      ++step;
    }

    CurvePoint point;
    point.step = step;
    point.epoch = epoch;
    point.loss = epoch_loss / static_cast<double>(N);
    for (std::size_t q = 0; q < 4; ++q)
      point.bucket_loss[q] =
          bucket_n[q] ? bucket_sum[q] / static_cast<double>(bucket_n[q]) : std::numeric_limits<double>::quiet_NaN();
    result.curve.points.push_back(point);
    if (epoch == 0) reference_loss = point.loss;
    if (!std::isfinite(point.loss) || !net.mlp.all_finite() ||
        (reference_loss > 0.0 && point.loss > cfg.divergence_factor * reference_loss)) {
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ": loss " +
                                std::to_string(point.loss) + " vs initial " + std::to_string(reference_loss),
                            static_cast<int>(step));
    }
    if (hook) hook(epoch, net);
  }
  return result;
}

TrainResult train_view_denoiser(const Dataset& ds, const DiffusionSchedule& schedule, const TrainConfig& cfg,
                                DenoiserNet init) {
  if (ds.kind != DatasetKind::view)
    throw ConfigError("train_view_denoiser expects a view dataset, got a full-resolution one");
  return train_denoiser(ds, schedule, cfg, std::move(init));
}

nlohmann::json denoiser_header(const DenoiserNet& net) {
  return {{"dim", net.dim},
          {"embed_dim", net.embed_dim},
          {"clamp_U", net.clamp_U},
          {"preconditioner", {{"kind", to_string(net.precond.kind)}, {"sigma_data", net.precond.sigma_data}}},
          {"topology", net.mlp.sizes()},
          {"activation", to_string(net.mlp.activation())},
          {"parameter_count", net.mlp.parameter_count()}};
}

void write_denoiser(const std::filesystem::path& path, const DenoiserNet& net, const nlohmann::json& provenance) {
  nlohmann::json header = denoiser_header(net);
  header["provenance"] = provenance;
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write("BDLP", 4);
  const auto len = static_cast<std::uint32_t>(text.size());
  unsigned char len_bytes[4];
  for (int i = 0; i < 4; ++i) len_bytes[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char*>(len_bytes), 4);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  static_assert(std::endian::native == std::endian::little, "parameter files assume a little-endian host");
  const auto params = net.mlp.params();
  os.write(reinterpret_cast<const char*>(params.data()), static_cast<std::streamsize>(params.size() * sizeof(double)));
  if (!os) throw IoError("failed writing " + path.string());
}

DenoiserNet read_denoiser(const std::filesystem::path& path, nlohmann::json* provenance) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open parameter file " + path.string());
  char magic[4];
  unsigned char len_bytes[4];
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(len_bytes), 4);
  if (!is || std::memcmp(magic, "BDLP", 4) != 0) throw IoError(path.string() + " is not a parameter file");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(len_bytes[i]) << (8 * i);
  std::string text(len, '\0');
  is.read(text.data(), len);
  const auto header = nlohmann::json::parse(text);
  DenoiserNet net;
  net.dim = header.at("dim").get<std::size_t>();
  net.embed_dim = header.at("embed_dim").get<std::size_t>();
  net.clamp_U = header.at("clamp_U").get<double>();
  net.precond.kind = precond_kind_from_string(header.at("preconditioner").at("kind").get<std::string>());
  net.precond.sigma_data = header.at("preconditioner").at("sigma_data").get<double>();
  net.mlp = Mlp(header.at("topology").get<std::vector<std::size_t>>(),
                activation_from_string(header.at("activation").get<std::string>()));
  auto params = net.mlp.params();
  is.read(reinterpret_cast<char*>(params.data()), static_cast<std::streamsize>(params.size() * sizeof(double)));
  if (!is) throw IoError(path.string() + " is truncated");
  if (provenance) *provenance = header.value("provenance", nlohmann::json::object());
  return net;
}

}  // namespace bdl
