#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdl/diffusion.hpp"
#include "bdl/linops.hpp"
#include "bdl/neural.hpp"
#include "bdl/synthdata.hpp"

namespace bdl {

// Log-spaced noise-level bins over [lo, hi]. Per-bin values are interpolated
// piecewise-linearly in log sigma between bin centers and held constant
// outside the outermost centers.
struct SigmaBins {
  double lo = 0.002;
  double hi = 80.0;
  int count = 100;

  static SigmaBins for_schedule(const DiffusionSchedule& schedule, int count = 100);

  void validate() const;
  std::size_t size() const { return static_cast<std::size_t>(count); }
  // Bin containing sigma; values outside [lo, hi] map to the end bins.
  std::size_t index(double sigma) const;
  double lower(std::size_t b) const;
  double upper(std::size_t b) const;
  double center(std::size_t b) const;
  double interpolate(std::span<const double> values, double sigma) const;
  // Log-uniform draw inside bin b.
  double sample(std::size_t b, CounterRng& rng) const;
};

nlohmann::json to_json(const SigmaBins& bins);
SigmaBins sigma_bins_from_json(const nlohmann::json& j);

// Fills entries with present[b] == false by linear interpolation between the
// nearest present neighbours (constant beyond the ends).
void fill_missing_bins(std::span<double> values, const std::vector<bool>& present);

// View-space prediction for one operator of a group: rows of x_view are A_op x_t
// and sigmas are the matching view-space noise levels.
using ViewFn = std::function<std::vector<double>(std::size_t op, std::span<const double> x_view,
                                                 std::span<const double> sigmas)>;

// Operators sharing one view denoiser (a patch tiling shares one network and
// never sees the patch location).
struct ViewGroup {
  std::string id;
  std::vector<ViewOperator> ops;
  std::optional<DenoiserNet> net;
  // Used when no network is set.
  ViewFn fn;

  std::size_t view_dim() const { return ops.empty() ? 0 : ops.front().view_dim(); }
  // sum_op B_op f(A_op x_t, sigma * noise_scale_op), batch x m row-major.
  std::vector<double> predict(std::span<const double> x_t, std::span<const double> sigmas) const;
};

// Exact view posterior means through the pushforward of spec under each operator.
ViewFn oracle_view_fn(const DataSpec& spec, const std::vector<ViewOperator>& ops);

// Per-group scalar weights per sigma bin. No values means weight 1.
struct CombinerWeights {
  SigmaBins bins;
  std::vector<Vec> values;

  double weight(std::size_t group, double sigma) const;
};

// Nonnegative piecewise-linear envelope s(sigma) over the residual output.
struct RangeAdapter {
  SigmaBins bins;
  Vec values;

  double operator()(double sigma) const { return bins.interpolate(values, sigma); }
};

// f0(x_t, sigma) = gain * s(sigma) * g(x_t, sigma), with s = 1 when no adapter is set.
struct ResidualDenoiser {
  DenoiserNet net;
  std::optional<RangeAdapter> adapter;
  double gain = 1.0;

  double scale(double sigma) const;
  std::vector<double> forward_batch(std::span<const double> x_t, std::span<const double> sigmas) const;
};

struct CombinedDenoiser {
  std::size_t dim = 0;
  double U = 1.0;
  std::vector<ViewGroup> groups;
  CombinerWeights weights;
  std::optional<ResidualDenoiser> residual;

  void validate() const;
  // sum_g w_g(sigma) sum_op B_op f_g(A_op x_t), not clamped.
  std::vector<double> view_prediction(std::span<const double> x_t, std::span<const double> sigmas) const;
  // View prediction plus residual, clamped to [-U, U].
  std::vector<double> denoise_batch(std::span<const double> x_t, std::span<const double> sigmas) const;
  Vec operator()(std::span<const double> x_t, double sigma) const;
  DenoiseFn as_fn() const;
  BatchDenoiseFn as_batch_fn() const;
};

Vec combined_denoise(const CombinedDenoiser& combined, std::span<const double> x_t, double sigma);

enum class CalibrationTarget { oracle, data };

std::string to_string(CalibrationTarget t);
CalibrationTarget calibration_target_from_string(const std::string& s);

struct CalibrationOptions {
  int bins = 100;
  // Noisy draws per calibration sample and bin.
  int draws_per_bin = 1;
  double ridge = 1e-6;
  CalibrationTarget target = CalibrationTarget::data;
  std::uint64_t seed = 0;
  std::string stream = "calibration";

  void validate() const;
};

nlohmann::json to_json(const CalibrationOptions& o);
CalibrationOptions calibration_options_from_json(const nlohmann::json& j);

// Inner products of the target y (posterior mean or x0) with the unweighted
// group predictions h_g, one record per noisy draw. Weighted residual norms
// follow from these without re-running the view networks.
struct CalibrationStats {
  SigmaBins bins;
  std::size_t groups = 0;
  std::vector<std::size_t> bin;
  Vec sigma;
  Vec yy;
  Vec hy;  // draws x groups
  Vec hh;  // draws x groups x groups
  // ||y - sum_g h_g||^2 and <h_g, y - sum_g h_g>, kept so that residual norms
  // near unit weights do not suffer from cancellation.
  Vec ee;
  Vec he;  // draws x groups

  std::size_t size() const { return bin.size(); }
  // ||y - sum_g w_g h_g||^2 for draw d.
  double residual_norm2(std::size_t d, std::span<const double> w) const;
};

CalibrationStats collect_calibration_stats(const CombinedDenoiser& stage1, const Dataset& calib,
                                           const SigmaBins& bins, const PosteriorOracle* oracle,
                                           const CalibrationOptions& opts);

struct CalibrationResult {
  CombinerWeights weights;
  std::vector<std::string> warnings;
};

// Per-bin ridge least squares for the group weights.
CalibrationResult calibrate_combiner(const CalibrationStats& stats, double ridge);

// Convenience: collect statistics and solve.
CalibrationResult calibrate_combiner(const CombinedDenoiser& stage1, const Dataset& calib,
                                     const DiffusionSchedule& schedule, const PosteriorOracle* oracle,
                                     const CalibrationOptions& opts);

// s_b = sqrt(mean ||y - sum_g w_g h_g||^2) over the draws in bin b, at least 1e-8.
RangeAdapter fit_range_adapter(const CalibrationStats& stats, const CombinerWeights& weights);

enum class ResidualMode { penalty, adapter, both };

std::string to_string(ResidualMode mode);
ResidualMode residual_mode_from_string(const std::string& s);

struct ResidualTrainConfig {
  double lambda = 0.01;
  std::optional<double> hard_cap;
  ResidualMode mode = ResidualMode::both;
  // Fixed noisy draws per training sample used to measure sum ||f0||^2.
  int energy_draws = 8;
  TrainConfig train;

  bool uses_adapter() const { return mode != ResidualMode::penalty; }
  bool regularized() const { return lambda > 0.0 || hard_cap.has_value() || uses_adapter(); }
  void validate() const;
};

nlohmann::json to_json(const ResidualTrainConfig& c);
ResidualTrainConfig residual_config_from_json(const nlohmann::json& j);

// Fixed noisy copies of a dataset: draws x N rows, one sigma per row.
struct NoisyDraws {
  std::size_t dim = 0;
  std::vector<double> x_t;
  Vec sigma;
  std::vector<double> x0;

  std::size_t size() const { return sigma.size(); }
};

// Row d*N + n uses counter index d*N + n of (seed, stream); sigma log-uniform on the schedule.
NoisyDraws make_noisy_draws(const Dataset& data, const DiffusionSchedule& schedule, int draws, std::uint64_t seed,
                            const std::string& stream);

// (1/draws) sum over rows of ||gain * s(sigma) * g(x_t, sigma)||^2, i.e. sum_n ||f0||^2 per draw.
double residual_energy(const DenoiserNet& net, const std::function<double(double)>& scale,
                       const NoisyDraws& draws, std::size_t samples_per_draw);
double residual_energy(const ResidualDenoiser& residual, const NoisyDraws& draws, std::size_t samples_per_draw);

struct ResidualTrainResult {
  CombinedDenoiser combined;
  TrainingCurve curve;
  // Final sum_n ||f0||^2 on the energy draws.
  double energy = 0.0;
  // Gain after each epoch's cap projection.
  std::vector<double> gains;
};

// Trains f0 on x0 ~ s0 with loss ||x0 - f0 - view_prediction||^2 + lambda ||f0||^2;
// the view groups stay frozen. The hard cap rescales the output gain at the end
// of every epoch so that the energy does not exceed M.
ResidualTrainResult train_residual(const CombinedDenoiser& stage1, const Dataset& s0,
                                   const DiffusionSchedule& schedule, const ResidualTrainConfig& cfg,
                                   DenoiserNet init, std::optional<RangeAdapter> adapter = std::nullopt,
                                   const EpochHook& on_epoch = {});

// Plain denoising score matching on the full-resolution set.
TrainResult train_baseline(const Dataset& s0, const DiffusionSchedule& schedule, const TrainConfig& cfg,
                           DenoiserNet init);

// Root mean per-coordinate variance of a dataset.
double empirical_std(const Dataset& ds);

// Independent 64-bit seed derived from a base seed and a label.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& label);

enum class ViewFamily { patch_tiling, downsample };

std::string to_string(ViewFamily f);
ViewFamily view_family_from_string(const std::string& s);

struct ViewGroupConfig {
  std::string id;
  ViewFamily family = ViewFamily::patch_tiling;
  int patch = 8;
  int factor = 4;
  // Full-resolution sources behind this view dataset.
  std::size_t samples = 5000;
  NetArchitecture arch;
  TrainConfig train;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::vector<ViewGroupConfig> views;
  std::size_t n0 = 64;
  std::size_t n_calibration = 64;
  bool calibrate_on_s0 = false;
  double duplicate_fraction = 0.0;
  std::optional<DiffusionSchedule> schedule;
  CalibrationOptions calibration;
  ResidualTrainConfig residual;
  NetArchitecture residual_arch;
  bool train_baseline = false;

  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& c);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

// Operators of one configured view group on the given grid.
std::vector<ViewOperator> make_view_operators(const GridShape& grid, const ViewGroupConfig& v);

// The projected view dataset the pipeline trains group v on. The first
// round(duplicate_fraction * samples) sources are shared by all groups.
Dataset view_dataset(const DataSpec& spec, const ViewGroupConfig& v, double duplicate_fraction);

struct PipelineResult {
  CombinedDenoiser combined;
  std::optional<DenoiserNet> baseline;
  Dataset s0;
  DiffusionSchedule schedule;
  std::vector<std::string> warnings;
  std::map<std::string, TrainingCurve> curves;
  nlohmann::json manifest;
};

enum class PipelineStop { complete, after_views };

// Generates the datasets, trains each view denoiser, calibrates the combiner,
// fits the range adapter and trains the residual. With a non-empty out_dir all
// artifacts and manifest.json are written there. Stopping after the views
// writes views_manifest.json instead and leaves the combiner uncalibrated.
PipelineResult run_algorithm1(const DataSpec& spec, const PipelineConfig& cfg,
                              const std::filesystem::path& out_dir = {},
                              PipelineStop stop = PipelineStop::complete);

// Rebuilds the combined denoiser (and baseline, if present) from a manifest.
struct LoadedPipeline {
  DataSpec spec;
  DiffusionSchedule schedule;
  CombinedDenoiser combined;
  std::optional<DenoiserNet> baseline;
  nlohmann::json manifest;
};
LoadedPipeline load_pipeline(const std::filesystem::path& manifest_path);

// SHA-256 of the manifest with the "created" field removed.
std::string manifest_content_hash(const nlohmann::json& manifest);

}  // namespace bdl
