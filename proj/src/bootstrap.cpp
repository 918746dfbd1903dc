#include "bdl/bootstrap.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "bdl/error.hpp"
#include "bdl/hash.hpp"
#include "bdl/json_util.hpp"
#include "bdl/parallel.hpp"

namespace bdl {

namespace {

constexpr std::size_t kChunkRows = 64;

// Applies fn to fixed row chunks of a batch; chunk boundaries do not depend on
// the thread count, so results are identical for any number of workers.
std::vector<double> map_row_chunks(
    std::span<const double> x, std::span<const double> sigmas, std::size_t in_dim, std::size_t out_dim,
    const std::function<std::vector<double>(std::span<const double>, std::span<const double>)>& fn) {
  const std::size_t B = sigmas.size();
  if (x.size() != B * in_dim)
    throw ShapeError("batch has " + std::to_string(x.size()) + " values, expected " + std::to_string(B * in_dim));
  std::vector<double> out(B * out_dim);
  const std::size_t chunks = (B + kChunkRows - 1) / kChunkRows;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * kChunkRows;
    const std::size_t n = std::min(kChunkRows, B - lo);
    const auto part = fn(x.subspan(lo * in_dim, n * in_dim), sigmas.subspan(lo, n));
    if (part.size() != n * out_dim) throw ShapeError("chunk prediction has the wrong size");
    std::copy(part.begin(), part.end(), out.begin() + static_cast<std::ptrdiff_t>(lo * out_dim));
  });
  return out;
}

std::string timestamp_utc() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

template <typename F>
auto run_stage(const std::string& name, F&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  }
}

}  // namespace

// ---------------------------------------------------------------- SigmaBins

SigmaBins SigmaBins::for_schedule(const DiffusionSchedule& schedule, int count) {
  SigmaBins b{schedule.sigma_min, schedule.sigma_max, count};
  b.validate();
  return b;
}

void SigmaBins::validate() const {
  if (!(lo > 0.0) || !(hi > lo) || !std::isfinite(hi)) throw ConfigError("sigma bins need 0 < lo < hi");
  if (count < 1) throw ConfigError("sigma bins need count >= 1");
}

std::size_t SigmaBins::index(double sigma) const {
  const double width = (std::log(hi) - std::log(lo)) / count;
  const double u = (std::log(sigma) - std::log(lo)) / width;
  if (!(u > 0.0)) return 0;
  return std::min(static_cast<std::size_t>(u), size() - 1);
}

double SigmaBins::lower(std::size_t b) const {
  return std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * static_cast<double>(b) / count);
}

double SigmaBins::upper(std::size_t b) const {
  return b + 1 == size() ? hi : lower(b + 1);
}

double SigmaBins::center(std::size_t b) const {
  return std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * (static_cast<double>(b) + 0.5) / count);
}

double SigmaBins::interpolate(std::span<const double> values, double sigma) const {
  if (values.size() != size()) throw ShapeError("bin values do not match the bin count");
  const double width = (std::log(hi) - std::log(lo)) / count;
  const double u = (std::log(sigma) - std::log(lo)) / width - 0.5;
  if (!(u > 0.0)) return values.front();
  if (u >= static_cast<double>(count - 1)) return values.back();
  const auto i = static_cast<std::size_t>(u);
  const double f = u - static_cast<double>(i);
  return (1.0 - f) * values[i] + f * values[i + 1];
}

double SigmaBins::sample(std::size_t b, CounterRng& rng) const {
  return std::exp(rng.uniform(std::log(lower(b)), std::log(upper(b))));
}

nlohmann::json to_json(const SigmaBins& bins) {
  return {{"lo", bins.lo}, {"hi", bins.hi}, {"count", bins.count}};
}

SigmaBins sigma_bins_from_json(const nlohmann::json& j) {
  SigmaBins b{j.at("lo").get<double>(), j.at("hi").get<double>(), j.at("count").get<int>()};
  b.validate();
  return b;
}

void fill_missing_bins(std::span<double> values, const std::vector<bool>& present) {
  if (present.size() != values.size()) throw ShapeError("fill_missing_bins: mask size mismatch");
  std::vector<std::size_t> known;
  for (std::size_t b = 0; b < values.size(); ++b)
    if (present[b]) known.push_back(b);
  if (known.empty()) throw NumericError("no populated bins to interpolate from");
  for (std::size_t b = 0; b < values.size(); ++b) {
    if (present[b]) continue;
    const auto it = std::lower_bound(known.begin(), known.end(), b);
    if (it == known.begin()) {
      values[b] = values[known.front()];
    } else if (it == known.end()) {
      values[b] = values[known.back()];
    } else {
      const std::size_t hi = *it;
      const std::size_t lo = *(it - 1);
      const double f = static_cast<double>(b - lo) / static_cast<double>(hi - lo);
      values[b] = (1.0 - f) * values[lo] + f * values[hi];
    }
  }
}

// ---------------------------------------------------------------- views

std::vector<double> ViewGroup::predict(std::span<const double> x_t, std::span<const double> sigmas) const {
  if (ops.empty()) throw ConfigError("view group '" + id + "' has no operators");
  const std::size_t B = sigmas.size();
  const std::size_t m = ops.front().full_dim();
  const std::size_t mi = view_dim();
  if (x_t.size() != B * m) throw ShapeError("view group '" + id + "': input does not match dimension " +
                                            std::to_string(m));
  std::vector<double> out(B * m, 0.0);
  const std::size_t P = ops.size();
  if (net) {
    std::vector<double> xv(P * B * mi);
    std::vector<double> sv(P * B);
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t b = 0; b < B; ++b) {
        ops[p].apply_A(x_t.subspan(b * m, m), std::span<double>(xv).subspan((p * B + b) * mi, mi));
        sv[p * B + b] = sigmas[b] * ops[p].noise_scale();
      }
    const auto f = net->forward_batch(xv, sv);
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t b = 0; b < B; ++b)
        ops[p].accumulate_B(std::span<const double>(f).subspan((p * B + b) * mi, mi),
                            std::span<double>(out).subspan(b * m, m));
    return out;
  }
  if (!fn) throw ConfigError("view group '" + id + "' has neither a network nor a prediction function");
  std::vector<double> xv(B * mi);
  std::vector<double> sv(B);
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t b = 0; b < B; ++b) {
      ops[p].apply_A(x_t.subspan(b * m, m), std::span<double>(xv).subspan(b * mi, mi));
      sv[b] = sigmas[b] * ops[p].noise_scale();
    }
    const auto f = fn(p, xv, sv);
    if (f.size() != B * mi) throw ShapeError("view group '" + id + "': prediction function returned wrong size");
    for (std::size_t b = 0; b < B; ++b)
      ops[p].accumulate_B(std::span<const double>(f).subspan(b * mi, mi), std::span<double>(out).subspan(b * m, m));
  }
  return out;
}

ViewFn oracle_view_fn(const DataSpec& spec, const std::vector<ViewOperator>& ops) {
  std::vector<std::shared_ptr<const PosteriorOracle>> oracles;
  oracles.reserve(ops.size());
  for (const auto& op : ops) oracles.push_back(std::make_shared<const PosteriorOracle>(view_spec(spec, op)));
  return [oracles](std::size_t op, std::span<const double> x, std::span<const double> sigmas) {
    const auto& oracle = *oracles.at(op);
    const std::size_t d = oracle.dim();
    std::vector<double> out(x.size());
    for (std::size_t b = 0; b < sigmas.size(); ++b) {
      const Vec mean = oracle.posterior_mean(x.subspan(b * d, d), sigmas[b]);
      std::copy(mean.begin(), mean.end(), out.begin() + static_cast<std::ptrdiff_t>(b * d));
    }
    return out;
  };
}

double CombinerWeights::weight(std::size_t group, double sigma) const {
  if (values.empty()) return 1.0;
  return bins.interpolate(values.at(group), sigma);
}

double ResidualDenoiser::scale(double sigma) const { return gain * (adapter ? (*adapter)(sigma) : 1.0); }

std::vector<double> ResidualDenoiser::forward_batch(std::span<const double> x_t,
                                                    std::span<const double> sigmas) const {
  auto g = net.forward_batch(x_t, sigmas);
  const std::size_t m = net.dim;
  for (std::size_t b = 0; b < sigmas.size(); ++b) {
    const double a = scale(sigmas[b]);
    for (std::size_t j = 0; j < m; ++j) g[b * m + j] *= a;
  }
  return g;
}

void CombinedDenoiser::validate() const {
  if (dim == 0) throw ConfigError("combined denoiser has zero dimension");
  for (const auto& g : groups) {
    if (g.ops.empty()) throw ConfigError("view group '" + g.id + "' has no operators");
    for (const auto& op : g.ops) {
      if (op.full_dim() != dim)
        throw ShapeError("operator '" + op.id() + "' maps from dimension " + std::to_string(op.full_dim()) +
                         ", combined denoiser has " + std::to_string(dim));
      if (op.view_dim() != g.view_dim())
        throw ShapeError("view group '" + g.id + "' mixes view dimensions");
    }
    if (g.net) {
      if (g.net->dim != g.view_dim())
        throw ShapeError("view group '" + g.id + "': network dimension " + std::to_string(g.net->dim) +
                         " does not match view dimension " + std::to_string(g.view_dim()));
    } else if (!g.fn) {
      throw ConfigError("view group '" + g.id + "' has neither a network nor a prediction function");
    }
  }
  if (!weights.values.empty()) {
    if (weights.values.size() != groups.size()) throw ShapeError("combiner weights do not match the view groups");
    for (const auto& v : weights.values) {
      if (v.size() != weights.bins.size()) throw ShapeError("combiner weights do not match the bin count");
      for (double w : v)
        if (!std::isfinite(w)) throw NumericError("combiner weights must be finite");
    }
  }
  if (residual) {
    if (residual->net.dim != dim) throw ShapeError("residual network dimension does not match");
    if (!std::isfinite(residual->gain) || residual->gain < 0.0)
      throw NumericError("residual gain must be finite and nonnegative");
    if (residual->adapter) {
      if (residual->adapter->values.size() != residual->adapter->bins.size())
        throw ShapeError("range adapter values do not match the bin count");
      for (double s : residual->adapter->values)
        if (!std::isfinite(s) || s < 0.0) throw NumericError("range adapter values must be finite and nonnegative");
    }
  }
}

std::vector<double> CombinedDenoiser::view_prediction(std::span<const double> x_t,
                                                      std::span<const double> sigmas) const {
  return map_row_chunks(x_t, sigmas, dim, dim, [&](std::span<const double> x, std::span<const double> s) {
    std::vector<double> out(x.size(), 0.0);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto h = groups[g].predict(x, s);
      for (std::size_t b = 0; b < s.size(); ++b)
        axpy(weights.weight(g, s[b]), std::span<const double>(h).subspan(b * dim, dim),
             std::span<double>(out).subspan(b * dim, dim));
    }
    return out;
  });
}

std::vector<double> CombinedDenoiser::denoise_batch(std::span<const double> x_t,
                                                    std::span<const double> sigmas) const {
  return map_row_chunks(x_t, sigmas, dim, dim, [&](std::span<const double> x, std::span<const double> s) {
    std::vector<double> out(x.size(), 0.0);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto h = groups[g].predict(x, s);
      for (std::size_t b = 0; b < s.size(); ++b)
        axpy(weights.weight(g, s[b]), std::span<const double>(h).subspan(b * dim, dim),
             std::span<double>(out).subspan(b * dim, dim));
    }
    if (residual) {
      const auto f0 = residual->forward_batch(x, s);
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += f0[k];
    }
    for (double& v : out) v = std::clamp(v, -U, U);
    return out;
  });
}

Vec CombinedDenoiser::operator()(std::span<const double> x_t, double sigma) const {
  const double s[1] = {sigma};
  return denoise_batch(x_t, s);
}

DenoiseFn CombinedDenoiser::as_fn() const {
  auto snapshot = std::make_shared<const CombinedDenoiser>(*this);
  return [snapshot](std::span<const double> x, double sigma) { return (*snapshot)(x, sigma); };
}

BatchDenoiseFn CombinedDenoiser::as_batch_fn() const {
  auto snapshot = std::make_shared<const CombinedDenoiser>(*this);
  return [snapshot](std::span<const double> x, std::span<const double> s) { return snapshot->denoise_batch(x, s); };
}

Vec combined_denoise(const CombinedDenoiser& combined, std::span<const double> x_t, double sigma) {
  if (x_t.size() != combined.dim)
    throw ShapeError("combined_denoise: input has dimension " + std::to_string(x_t.size()) + ", expected " +
                     std::to_string(combined.dim));
  return combined(x_t, sigma);
}

// ---------------------------------------------------------------- calibration

std::string to_string(CalibrationTarget t) { return t == CalibrationTarget::oracle ? "oracle" : "data"; }

CalibrationTarget calibration_target_from_string(const std::string& s) {
  if (s == "oracle") return CalibrationTarget::oracle;
  if (s == "data") return CalibrationTarget::data;
  throw ConfigError("calibration.target: unknown value '" + s + "' (expected oracle or data)");
}

void CalibrationOptions::validate() const {
  if (bins < 1) throw ConfigError("calibration.bins: must be >= 1");
  if (draws_per_bin < 1) throw ConfigError("calibration.draws_per_bin: must be >= 1");
  if (!(ridge >= 0.0)) throw ConfigError("calibration.ridge: must be nonnegative");
}

nlohmann::json to_json(const CalibrationOptions& o) {
  return {{"bins", o.bins},     {"draws_per_bin", o.draws_per_bin}, {"ridge", o.ridge},
          {"target", to_string(o.target)}, {"seed", o.seed},         {"stream", o.stream}};
}

CalibrationOptions calibration_options_from_json(const nlohmann::json& j) {
  require_known_keys(j, {"bins", "draws_per_bin", "ridge", "target", "seed", "stream"}, "calibration");
  CalibrationOptions o;
  o.bins = j.value("bins", o.bins);
  o.draws_per_bin = j.value("draws_per_bin", o.draws_per_bin);
  o.ridge = j.value("ridge", o.ridge);
  o.target = calibration_target_from_string(j.value("target", to_string(o.target)));
  o.seed = j.value("seed", o.seed);
  o.stream = j.value("stream", o.stream);
  o.validate();
  return o;
}

double CalibrationStats::residual_norm2(std::size_t d, std::span<const double> w) const {
  // y - sum w h = e + sum (1 - w) h with e the unit-weight residual.
  double r = ee[d];
  for (std::size_t g = 0; g < groups; ++g) {
    const double u = 1.0 - w[g];
    r += 2.0 * u * he[d * groups + g];
    for (std::size_t h = 0; h < groups; ++h) r += u * (1.0 - w[h]) * hh[(d * groups + g) * groups + h];
  }
  return std::max(r, 0.0);
}

CalibrationStats collect_calibration_stats(const CombinedDenoiser& stage1, const Dataset& calib,
                                           const SigmaBins& bins, const PosteriorOracle* oracle,
                                           const CalibrationOptions& opts) {
  opts.validate();
  bins.validate();
  stage1.validate();
  if (calib.kind != DatasetKind::full) throw ConfigError("calibration set must be full-resolution");
  if (calib.size() == 0) throw ConfigError("calibration set is empty");
  if (calib.dim != stage1.dim) throw ShapeError("calibration set dimension does not match the combiner");
  if (opts.target == CalibrationTarget::oracle && oracle == nullptr)
    throw ConfigError("calibration.target: oracle targets need a posterior oracle");

  const std::size_t m = stage1.dim;
  const std::size_t N = calib.size();
  const auto D = static_cast<std::size_t>(opts.draws_per_bin);
  const std::size_t G = stage1.groups.size();
  const std::uint32_t sid = stream_id(opts.stream);

  CalibrationStats stats;
  stats.bins = bins;
  stats.groups = G;
  const std::size_t rows = N * D;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    std::vector<double> xt(rows * m);
    std::vector<double> sig(rows);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t r = n * D + d;
        CounterRng rng(opts.seed, sid, (b * N + n) * D + d);
        sig[r] = bins.sample(b, rng);
        const auto x0 = calib.sample(n);
        for (std::size_t j = 0; j < m; ++j) xt[r * m + j] = x0[j] + sig[r] * rng.normal();
      }
    std::vector<std::vector<double>> h(G);
    for (std::size_t g = 0; g < G; ++g)
      h[g] = map_row_chunks(xt, sig, m, m, [&](std::span<const double> x, std::span<const double> s) {
        return stage1.groups[g].predict(x, s);
      });
    std::vector<double> y(rows * m);
    if (opts.target == CalibrationTarget::oracle) {
      parallel_for(rows, [&](std::size_t r) {
        const Vec mean = oracle->posterior_mean(std::span<const double>(xt).subspan(r * m, m), sig[r]);
        std::copy(mean.begin(), mean.end(), y.begin() + static_cast<std::ptrdiff_t>(r * m));
      });
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        const auto x0 = calib.sample(r / D);
        std::copy(x0.begin(), x0.end(), y.begin() + static_cast<std::ptrdiff_t>(r * m));
      }
    }
    std::vector<double> e(y);
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t k = 0; k < e.size(); ++k) e[k] -= h[g][k];
    for (std::size_t r = 0; r < rows; ++r) {
      const auto yr = std::span<const double>(y).subspan(r * m, m);
      const auto er = std::span<const double>(e).subspan(r * m, m);
      stats.ee.push_back(squared_norm(er));
      for (std::size_t g = 0; g < G; ++g) stats.he.push_back(dot(std::span<const double>(h[g]).subspan(r * m, m), er));
      stats.bin.push_back(b);
      stats.sigma.push_back(sig[r]);
      stats.yy.push_back(squared_norm(yr));
      for (std::size_t g = 0; g < G; ++g) stats.hy.push_back(dot(std::span<const double>(h[g]).subspan(r * m, m), yr));
      for (std::size_t g = 0; g < G; ++g)
        for (std::size_t k = 0; k < G; ++k)
          stats.hh.push_back(dot(std::span<const double>(h[g]).subspan(r * m, m),
                                 std::span<const double>(h[k]).subspan(r * m, m)));
    }
  }
  return stats;
}

CalibrationResult calibrate_combiner(const CalibrationStats& stats, double ridge) {
  if (!(ridge >= 0.0)) throw ConfigError("calibration.ridge: must be nonnegative");
  CalibrationResult result;
  result.weights.bins = stats.bins;
  const std::size_t G = stats.groups;
  if (G == 0) return result;
  const std::size_t K = stats.bins.size();

  std::vector<DenseMatrix> gram(K, DenseMatrix(G, G));
  std::vector<Vec> rhs(K, Vec(G, 0.0));
  std::vector<std::size_t> count(K, 0);
  for (std::size_t d = 0; d < stats.size(); ++d) {
    const std::size_t b = stats.bin[d];
    ++count[b];
    for (std::size_t g = 0; g < G; ++g) {
      rhs[b][g] += stats.hy[d * G + g];
      for (std::size_t h = 0; h < G; ++h) gram[b](g, h) += stats.hh[(d * G + g) * G + h];
    }
  }

  result.weights.values.assign(G, Vec(K, 1.0));
  std::vector<bool> present(K, false);
  for (std::size_t b = 0; b < K; ++b) {
    if (count[b] == 0) continue;
    present[b] = true;
    const double inv = 1.0 / static_cast<double>(count[b]);
    double trace = 0.0;
    for (std::size_t g = 0; g < G; ++g) {
      rhs[b][g] *= inv;
      for (std::size_t h = 0; h < G; ++h) gram[b](g, h) *= inv;
      trace += gram[b](g, g);
    }
    if (!(trace > 0.0)) {
      result.warnings.push_back("sigma bin " + std::to_string(b) +
                                ": all view predictions are zero; using unit weights");
      continue;
    }
    try {
      const Vec w = solve_normal_equations(gram[b], rhs[b], ridge);
      bool finite = true;
      for (double v : w) finite = finite && std::isfinite(v);
      if (!finite) throw NumericError("non-finite combiner weights");
      for (std::size_t g = 0; g < G; ++g) result.weights.values[g][b] = w[g];
    } catch (const NumericError& e) {
      result.warnings.push_back("sigma bin " + std::to_string(b) + ": degenerate design (" + e.what() +
                                "); using unit weights");
    }
  }
  if (std::none_of(present.begin(), present.end(), [](bool p) { return p; })) {
    result.warnings.push_back("no calibration draws; using unit weights");
    return result;
  }
  for (auto& v : result.weights.values) fill_missing_bins(v, present);
  return result;
}

CalibrationResult calibrate_combiner(const CombinedDenoiser& stage1, const Dataset& calib,
                                     const DiffusionSchedule& schedule, const PosteriorOracle* oracle,
                                     const CalibrationOptions& opts) {
  const auto bins = SigmaBins::for_schedule(schedule, opts.bins);
  return calibrate_combiner(collect_calibration_stats(stage1, calib, bins, oracle, opts), opts.ridge);
}

RangeAdapter fit_range_adapter(const CalibrationStats& stats, const CombinerWeights& weights) {
  const std::size_t K = stats.bins.size();
  const std::size_t G = stats.groups;
  if (!weights.values.empty() && weights.values.size() != G)
    throw ShapeError("combiner weights do not match the calibration groups");
  Vec sum(K, 0.0);
  std::vector<std::size_t> count(K, 0);
  Vec w(G);
  for (std::size_t d = 0; d < stats.size(); ++d) {
    for (std::size_t g = 0; g < G; ++g) w[g] = weights.weight(g, stats.sigma[d]);
    sum[stats.bin[d]] += stats.residual_norm2(d, w);
    ++count[stats.bin[d]];
  }
  RangeAdapter adapter;
  adapter.bins = stats.bins;
  adapter.values.assign(K, 0.0);
  std::vector<bool> present(K, false);
  for (std::size_t b = 0; b < K; ++b) {
    if (count[b] == 0) continue;
    present[b] = true;
    adapter.values[b] = std::max(1e-8, std::sqrt(sum[b] / static_cast<double>(count[b])));
  }
  fill_missing_bins(adapter.values, present);
  return adapter;
}

// ---------------------------------------------------------------- residual training

std::string to_string(ResidualMode mode) {
  switch (mode) {
    case ResidualMode::penalty: return "penalty";
    case ResidualMode::adapter: return "adapter";
    case ResidualMode::both: return "both";
  }
  return "both";
}

ResidualMode residual_mode_from_string(const std::string& s) {
  if (s == "penalty") return ResidualMode::penalty;
  if (s == "adapter") return ResidualMode::adapter;
  if (s == "both") return ResidualMode::both;
  throw ConfigError("residual.mode: unknown value '" + s + "' (expected penalty, adapter or both)");
}

void ResidualTrainConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("residual.lambda: must be a nonnegative number");
  if (mode == ResidualMode::adapter && lambda != 0.0)
    throw ConfigError("residual.lambda: adapter mode has no penalty term; use mode 'both' to combine them");
  if (hard_cap && !(*hard_cap >= 0.0)) throw ConfigError("residual.hard_cap: must be nonnegative");
  if (energy_draws < 1) throw ConfigError("residual.energy_draws: must be >= 1");
  train.validate();
}

nlohmann::json to_json(const ResidualTrainConfig& c) {
  nlohmann::json j = {{"lambda", c.lambda},
                      {"mode", to_string(c.mode)},
                      {"energy_draws", c.energy_draws},
                      {"train", to_json(c.train)}};
  j["hard_cap"] = c.hard_cap ? nlohmann::json(*c.hard_cap) : nlohmann::json(nullptr);
  return j;
}

ResidualTrainConfig residual_config_from_json(const nlohmann::json& j) {
  require_known_keys(j, {"lambda", "hard_cap", "mode", "energy_draws", "train"}, "residual");
  ResidualTrainConfig c;
  c.mode = residual_mode_from_string(j.value("mode", to_string(c.mode)));
  if (c.mode == ResidualMode::adapter) c.lambda = 0.0;
  c.lambda = j.value("lambda", c.lambda);
  if (j.contains("hard_cap") && !j.at("hard_cap").is_null()) c.hard_cap = j.at("hard_cap").get<double>();
  c.energy_draws = j.value("energy_draws", c.energy_draws);
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  c.validate();
  return c;
}

NoisyDraws make_noisy_draws(const Dataset& data, const DiffusionSchedule& schedule, int draws, std::uint64_t seed,
                            const std::string& stream) {
  if (draws < 1) throw ConfigError("draw count must be >= 1");
  NoisyDraws out;
  out.dim = data.dim;
  const std::size_t N = data.size();
  const std::size_t rows = N * static_cast<std::size_t>(draws);
  out.x_t.resize(rows * data.dim);
  out.x0.resize(rows * data.dim);
  out.sigma.resize(rows);
  const std::uint32_t sid = stream_id(stream);
  for (std::size_t r = 0; r < rows; ++r) {
    CounterRng rng(seed, sid, r);
    out.sigma[r] = schedule.sample_sigma(rng);
    const auto x0 = data.sample(r % N);
    for (std::size_t j = 0; j < data.dim; ++j) {
      out.x0[r * data.dim + j] = x0[j];
      out.x_t[r * data.dim + j] = x0[j] + out.sigma[r] * rng.normal();
    }
  }
  return out;
}

double residual_energy(const DenoiserNet& net, const std::function<double(double)>& scale, const NoisyDraws& draws,
                       std::size_t samples_per_draw) {
  if (draws.dim != net.dim) throw ShapeError("energy draws do not match the residual dimension");
  if (samples_per_draw == 0 || draws.size() % samples_per_draw != 0)
    throw ShapeError("energy draws are not a whole number of dataset copies");
  const std::size_t m = net.dim;
  const std::size_t rows = draws.size();
  const std::size_t chunks = (rows + kChunkRows - 1) / kChunkRows;
  Vec partial(chunks, 0.0);
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * kChunkRows;
    const std::size_t n = std::min(kChunkRows, rows - lo);
    const auto s = std::span<const double>(draws.sigma).subspan(lo, n);
    const auto g = net.forward_batch(std::span<const double>(draws.x_t).subspan(lo * m, n * m), s);
    double acc = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const double a = scale ? scale(s[b]) : 1.0;
      acc += a * a * squared_norm(std::span<const double>(g).subspan(b * m, m));
    }
    partial[c] = acc;
  });
  const double total = std::accumulate(partial.begin(), partial.end(), 0.0);
  return total / static_cast<double>(rows / samples_per_draw);
}

double residual_energy(const ResidualDenoiser& residual, const NoisyDraws& draws, std::size_t samples_per_draw) {
  return residual_energy(
      residual.net, [&](double s) { return residual.scale(s); }, draws, samples_per_draw);
}

ResidualTrainResult train_residual(const CombinedDenoiser& stage1, const Dataset& s0,
                                   const DiffusionSchedule& schedule, const ResidualTrainConfig& cfg,
                                   DenoiserNet init, std::optional<RangeAdapter> adapter, const EpochHook& on_epoch) {
  cfg.validate();
  schedule.validate();
  stage1.validate();
  if (s0.kind != DatasetKind::full) throw ConfigError("train_residual: the residual set must be full-resolution");
  if (s0.dim != stage1.dim) throw ShapeError("train_residual: data dimension does not match the combiner");
  if (init.dim != stage1.dim) throw ShapeError("train_residual: residual network dimension does not match");
  if (cfg.uses_adapter() && !adapter)
    throw ConfigError("residual.mode: '" + to_string(cfg.mode) + "' needs a fitted range adapter");
  if (!cfg.uses_adapter()) adapter.reset();

  auto state = std::make_shared<ResidualDenoiser>();
  state->adapter = std::move(adapter);
  const auto scale = [state](double sigma) { return state->scale(sigma); };

  Objective objective;
  if (!stage1.groups.empty())
    objective.base = [&stage1](std::span<const double> x, std::span<const double> s) {
      return stage1.view_prediction(x, s);
    };
  if (state->adapter || cfg.hard_cap) objective.output_scale = scale;
  objective.penalty = cfg.lambda;

  const NoisyDraws energy_draws =
      make_noisy_draws(s0, schedule, cfg.energy_draws, cfg.train.seed, cfg.train.stream + "/energy");
  ResidualTrainResult result;
  const EpochHook hook = [&](int epoch, const DenoiserNet& net) {
    if (cfg.hard_cap) {
      const double e = residual_energy(net, scale, energy_draws, s0.size());
      if (e > *cfg.hard_cap) state->gain *= std::sqrt(*cfg.hard_cap / e);
    }
    result.gains.push_back(state->gain);
    if (on_epoch) on_epoch(epoch, net);
  };

  auto trained = train_denoiser(s0, schedule, cfg.train, std::move(init), objective, hook);
  result.curve = std::move(trained.curve);
  result.combined = stage1;
  state->net = std::move(trained.net);
  result.combined.residual = *state;
  result.energy = residual_energy(*result.combined.residual, energy_draws, s0.size());
  return result;
}

TrainResult train_baseline(const Dataset& s0, const DiffusionSchedule& schedule, const TrainConfig& cfg,
                           DenoiserNet init) {
  if (s0.kind != DatasetKind::full) throw ConfigError("baseline training expects a full-resolution dataset");
  return train_denoiser(s0, schedule, cfg, std::move(init));
}

double empirical_std(const Dataset& ds) {
  const std::size_t N = ds.size();
  const std::size_t m = ds.dim;
  if (N == 0) throw ConfigError("empirical_std: dataset is empty");
  Vec mean(m, 0.0);
  for (std::size_t n = 0; n < N; ++n) axpy(1.0 / static_cast<double>(N), ds.sample(n), mean);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const auto x = ds.sample(n);
    for (std::size_t j = 0; j < m; ++j) total += (x[j] - mean[j]) * (x[j] - mean[j]);
  }
  return std::sqrt(total / static_cast<double>(N * m));
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& label) {
  CounterRng rng(seed, "seed/" + label, 0);
  return rng.next_u64();
}

// ---------------------------------------------------------------- pipeline config

std::string to_string(ViewFamily f) { return f == ViewFamily::patch_tiling ? "patch_tiling" : "downsample"; }

ViewFamily view_family_from_string(const std::string& s) {
  if (s == "patch_tiling") return ViewFamily::patch_tiling;
  if (s == "downsample") return ViewFamily::downsample;
  throw ConfigError("views.family: unknown value '" + s + "' (expected patch_tiling or downsample)");
}

void PipelineConfig::validate() const {
  if (n0 < 1) throw ConfigError("n0: must be >= 1");
  if (!calibrate_on_s0 && n_calibration < 1) throw ConfigError("n_calibration: must be >= 1");
  if (!(duplicate_fraction >= 0.0 && duplicate_fraction <= 1.0))
    throw ConfigError("duplicate_fraction: must lie in [0, 1]");
  std::set<std::string> ids;
  for (const auto& v : views) {
    if (v.id.empty()) throw ConfigError("views.id: must be non-empty");
    if (!ids.insert(v.id).second) throw ConfigError("views.id: duplicate id '" + v.id + "'");
    if (v.samples < 1) throw ConfigError("views." + v.id + ".samples: must be >= 1");
    if (v.family == ViewFamily::patch_tiling && v.patch < 1) throw ConfigError("views." + v.id + ".patch: must be >= 1");
    if (v.family == ViewFamily::downsample && v.factor < 1)
      throw ConfigError("views." + v.id + ".factor: must be >= 1");
    v.train.validate();
  }
  if (schedule) schedule->validate();
  calibration.validate();
  residual.validate();
}

nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json views = nlohmann::json::array();
  for (const auto& v : c.views)
    views.push_back({{"id", v.id},
                     {"family", to_string(v.family)},
                     {"patch", v.patch},
                     {"factor", v.factor},
                     {"samples", v.samples},
                     {"arch", to_json(v.arch)},
                     {"train", to_json(v.train)}});
  return {{"seed", c.seed},
          {"views", views},
          {"n0", c.n0},
          {"n_calibration", c.n_calibration},
          {"calibrate_on_s0", c.calibrate_on_s0},
          {"duplicate_fraction", c.duplicate_fraction},
          {"schedule", c.schedule ? to_json(*c.schedule) : nlohmann::json(nullptr)},
          {"calibration", to_json(c.calibration)},
          {"residual", to_json(c.residual)},
          {"residual_arch", to_json(c.residual_arch)},
          {"train_baseline", c.train_baseline}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"seed", "views", "n0", "n_calibration", "calibrate_on_s0", "duplicate_fraction", "schedule",
                      "calibration", "residual", "residual_arch", "train_baseline"},
                     "");
  PipelineConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("views")) {
    for (const auto& jv : j.at("views")) {
      require_known_keys(jv, {"id", "family", "patch", "factor", "samples", "arch", "train"}, "views");
      ViewGroupConfig v;
      v.id = jv.at("id").get<std::string>();
      v.family = view_family_from_string(jv.value("family", to_string(v.family)));
      v.patch = jv.value("patch", v.patch);
      v.factor = jv.value("factor", v.factor);
      v.samples = jv.value("samples", v.samples);
      if (jv.contains("arch")) v.arch = net_architecture_from_json(jv.at("arch"));
      if (jv.contains("train")) v.train = train_config_from_json(jv.at("train"));
      c.views.push_back(std::move(v));
    }
  }
  c.n0 = j.value("n0", c.n0);
  c.n_calibration = j.value("n_calibration", c.n_calibration);
  c.calibrate_on_s0 = j.value("calibrate_on_s0", c.calibrate_on_s0);
  c.duplicate_fraction = j.value("duplicate_fraction", c.duplicate_fraction);
  if (j.contains("schedule") && !j.at("schedule").is_null()) c.schedule = schedule_from_json(j.at("schedule"));
  if (j.contains("calibration")) c.calibration = calibration_options_from_json(j.at("calibration"));
  if (j.contains("residual")) c.residual = residual_config_from_json(j.at("residual"));
  if (j.contains("residual_arch")) c.residual_arch = net_architecture_from_json(j.at("residual_arch"));
  c.train_baseline = j.value("train_baseline", c.train_baseline);
  c.validate();
  return c;
}

std::vector<ViewOperator> make_view_operators(const GridShape& grid, const ViewGroupConfig& v) {
  if (v.family == ViewFamily::patch_tiling) return make_patch_tiling(grid, v.patch, v.patch);
  return {make_downsample_operator(grid, v.factor)};
}

// ---------------------------------------------------------------- pipeline

namespace {

nlohmann::json combiner_json(const CombinedDenoiser& c) {
  nlohmann::json j;
  j["bins"] = to_json(c.weights.bins);
  j["weights"] = c.weights.values;
  if (c.residual) {
    j["gain"] = c.residual->gain;
    if (c.residual->adapter) {
      j["adapter"] = {{"bins", to_json(c.residual->adapter->bins)}, {"values", c.residual->adapter->values}};
    } else {
      j["adapter"] = nullptr;
    }
  }
  return j;
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing artifact: expected " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cannot parse " + path.string() + ": " + e.what());
  }
}

class ArtifactWriter {
 public:
  explicit ArtifactWriter(std::filesystem::path root) : root_(std::move(root)) {}

  bool enabled() const { return !root_.empty(); }

  void dataset(const std::string& rel, const Dataset& ds) {
    if (!enabled()) return;
    write_dataset(root_ / rel, ds);
    record(rel);
    record(rel + ".json");
  }
  void network(const std::string& rel, const DenoiserNet& net, const nlohmann::json& provenance) {
    if (!enabled()) return;
    std::filesystem::create_directories((root_ / rel).parent_path());
    write_denoiser(root_ / rel, net, provenance);
    record(rel);
  }
  void curve(const std::string& rel, const TrainingCurve& curve) {
    if (!enabled()) return;
    std::filesystem::create_directories((root_ / rel).parent_path());
    std::ofstream os(root_ / rel);
    if (!os) throw IoError("cannot write " + (root_ / rel).string());
    curve.write_csv(os);
    os.close();
    record(rel);
  }
  void json(const std::string& rel, const nlohmann::json& j) {
    if (!enabled()) return;
    write_json_file(root_ / rel, j);
    record(rel);
  }
  const nlohmann::json& hashes() const { return hashes_; }

 private:
  void record(const std::string& rel) { hashes_[rel] = sha256_file(root_ / rel); }

  std::filesystem::path root_;
  nlohmann::json hashes_ = nlohmann::json::object();
};

Dataset view_source(const DataSpec& spec, const ViewGroupConfig& v, double duplicate_fraction) {
  const auto n_dup = static_cast<std::size_t>(std::llround(duplicate_fraction * static_cast<double>(v.samples)));
  Dataset out;
  if (n_dup < v.samples) {
    out = sample_dataset(spec, v.samples - n_dup, "view/" + v.id);
  } else {
    out.spec_id = spec.id;
    out.kind = DatasetKind::full;
    out.dim = spec.m;
    out.seed = spec.seed;
  }
  if (n_dup > 0) {
    const Dataset shared = sample_dataset(spec, n_dup, "views/shared");
    out.values.insert(out.values.begin(), shared.values.begin(), shared.values.end());
  }
  out.stream = "view/" + v.id;
  return out;
}

DiffusionSchedule scaled_schedule(const DiffusionSchedule& s, double factor) {
  DiffusionSchedule out = s;
  out.sigma_min *= factor;
  out.sigma_max *= factor;
  return out;
}

}  // namespace

Dataset view_dataset(const DataSpec& spec, const ViewGroupConfig& v, double duplicate_fraction) {
  return project_dataset(view_source(spec, v, duplicate_fraction), make_view_operators(spec.grid, v), v.id);
}

PipelineResult run_algorithm1(const DataSpec& spec, const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                              PipelineStop stop) {
  run_stage("config", [&] {
    cfg.validate();
    spec.validate();
    return 0;
  });
  PipelineResult R;
  ArtifactWriter writer(out_dir);
  const std::size_t m = spec.m;
  nlohmann::json seeds = {{"pipeline", cfg.seed}, {"spec", spec.seed}};

  R.s0 = run_stage("data", [&] { return sample_dataset(spec, cfg.n0, "s0"); });
  const double sd0 = std::max(empirical_std(R.s0), 1e-3 * spec.U);
  R.schedule = cfg.schedule ? *cfg.schedule : DiffusionSchedule::edm(spec.U, sd0);
  writer.dataset("data/s0.bin", R.s0);

  CombinedDenoiser stage1;
  stage1.dim = m;
  stage1.U = spec.U;
  nlohmann::json groups_json = nlohmann::json::array();
  for (const auto& v : cfg.views) {
    const std::string tag = "train_views/" + v.id;
    run_stage(tag, [&] {
      ViewGroup group;
      group.id = v.id;
      group.ops = make_view_operators(spec.grid, v);
      const double ns = group.ops.front().noise_scale();
      for (const auto& op : group.ops)
        if (op.noise_scale() != ns) throw ConfigError("views." + v.id + ": operators differ in noise scale");
      const Dataset source = view_source(spec, v, cfg.duplicate_fraction);
      const Dataset ds = project_dataset(source, group.ops, v.id);
      const double sd = std::max(empirical_std(ds), 1e-3 * spec.U);
      const auto init_seed = derive_seed(cfg.seed, "init/view/" + v.id);
      DenoiserNet init = make_denoiser(group.view_dim(), v.arch, Preconditioner{PrecondKind::edm, sd}, spec.U, init_seed);
      TrainConfig tc = v.train;
      tc.seed = derive_seed(cfg.seed, "train/view/" + v.id);
      tc.stream = "view/" + v.id;
      seeds["view/" + v.id] = {{"init", init_seed}, {"train", tc.seed}};
      auto trained = train_view_denoiser(ds, scaled_schedule(R.schedule, ns), tc, std::move(init));
      R.curves["view/" + v.id] = trained.curve;

      const std::string data_rel = "data/view_" + v.id + ".bin";
      const std::string net_rel = "nets/view_" + v.id + ".bdlp";
      writer.dataset(data_rel, ds);
      writer.network(net_rel, trained.net, {{"stage", "view"}, {"id", v.id}, {"train", to_json(tc)}});
      writer.curve("curves/view_" + v.id + ".csv", trained.curve);
      nlohmann::json ops = nlohmann::json::array();
      for (const auto& op : group.ops) ops.push_back(to_json(op));
      groups_json.push_back({{"id", v.id}, {"operators", ops}, {"network", net_rel}, {"dataset", data_rel}});
      group.net = std::move(trained.net);
      stage1.groups.push_back(std::move(group));
      return 0;
    });
  }

  if (stop == PipelineStop::after_views) {
    nlohmann::json& man = R.manifest;
    man["format"] = "bdl-views-manifest/1";
    man["resolved_config"] = to_json(cfg);
    man["spec"] = to_json(spec);
    man["schedule"] = to_json(R.schedule);
    man["seeds"] = seeds;
    man["groups"] = groups_json;
    man["artifacts"] = writer.hashes();
    man["content_hash"] = manifest_content_hash(man);
    man["created"] = timestamp_utc();
    R.combined = std::move(stage1);
    if (writer.enabled()) write_json_file(out_dir / "views_manifest.json", man);
    return R;
  }

  std::optional<RangeAdapter> adapter;
  run_stage("calibrate", [&] {
    const Dataset calib = cfg.calibrate_on_s0 ? R.s0 : sample_dataset(spec, cfg.n_calibration, "calibration");
    if (!cfg.calibrate_on_s0) writer.dataset("data/calibration.bin", calib);
    std::unique_ptr<PosteriorOracle> oracle;
    if (cfg.calibration.target == CalibrationTarget::oracle) oracle = std::make_unique<PosteriorOracle>(spec);
    CalibrationOptions copts = cfg.calibration;
    copts.seed = derive_seed(cfg.seed, "calibration");
    seeds["calibration"] = copts.seed;
    const auto bins = SigmaBins::for_schedule(R.schedule, copts.bins);
    if (stage1.groups.empty() && !cfg.residual.uses_adapter()) {
      stage1.weights.bins = bins;
      return 0;
    }
    const auto stats = collect_calibration_stats(stage1, calib, bins, oracle.get(), copts);
    auto cal = calibrate_combiner(stats, copts.ridge);
    stage1.weights = std::move(cal.weights);
    R.warnings.insert(R.warnings.end(), cal.warnings.begin(), cal.warnings.end());
    if (cfg.residual.uses_adapter()) adapter = fit_range_adapter(stats, stage1.weights);
    return 0;
  });

  run_stage("train_residual", [&] {
    const Preconditioner pre{stage1.groups.empty() ? PrecondKind::edm : PrecondKind::residual, sd0};
    const auto init_seed = derive_seed(cfg.seed, "init/residual");
    DenoiserNet init = make_denoiser(m, cfg.residual_arch, pre, spec.U, init_seed);
    ResidualTrainConfig rc = cfg.residual;
    rc.train.seed = derive_seed(cfg.seed, "train/residual");
    rc.train.stream = "residual";
    seeds["residual"] = {{"init", init_seed}, {"train", rc.train.seed}};
    auto trained = train_residual(stage1, R.s0, R.schedule, rc, std::move(init), adapter);
    R.combined = std::move(trained.combined);
    R.curves["residual"] = trained.curve;
    writer.network("nets/residual.bdlp", R.combined.residual->net,
                   {{"stage", "residual"}, {"train", to_json(rc.train)}, {"energy", trained.energy}});
    writer.curve("curves/residual.csv", trained.curve);
    return 0;
  });

  nlohmann::json baseline_json = nullptr;
  if (cfg.train_baseline) {
    run_stage("train_baseline", [&] {
      const auto init_seed = derive_seed(cfg.seed, "init/baseline");
      DenoiserNet init =
          make_denoiser(m, cfg.residual_arch, Preconditioner{PrecondKind::edm, sd0}, spec.U, init_seed);
      TrainConfig tc = cfg.residual.train;
      tc.seed = derive_seed(cfg.seed, "train/baseline");
      tc.stream = "baseline";
      seeds["baseline"] = {{"init", init_seed}, {"train", tc.seed}};
      auto trained = train_baseline(R.s0, R.schedule, tc, std::move(init));
      R.curves["baseline"] = trained.curve;
      writer.network("nets/baseline.bdlp", trained.net, {{"stage", "baseline"}, {"train", to_json(tc)}});
      writer.curve("curves/baseline.csv", trained.curve);
      baseline_json = {{"network", "nets/baseline.bdlp"}};
      R.baseline = std::move(trained.net);
      return 0;
    });
  }

  const nlohmann::json combiner = combiner_json(R.combined);
  writer.json("combiner.json", combiner);

  nlohmann::json& man = R.manifest;
  man["format"] = "bdl-manifest/1";
  man["resolved_config"] = to_json(cfg);
  man["spec"] = to_json(spec);
  man["schedule"] = to_json(R.schedule);
  man["seeds"] = seeds;
  man["groups"] = groups_json;
  man["residual"] = {{"network", "nets/residual.bdlp"},
                     {"precond", to_string(R.combined.residual->net.precond.kind)},
                     {"mode", to_string(cfg.residual.mode)}};
  man["baseline"] = baseline_json;
  man["combiner"] = combiner;
  man["artifacts"] = writer.hashes();
  man["warnings"] = R.warnings;
  man["content_hash"] = manifest_content_hash(man);
  man["created"] = timestamp_utc();
  if (writer.enabled()) write_json_file(out_dir / "manifest.json", man);
  return R;
}

std::string manifest_content_hash(const nlohmann::json& manifest) {
  nlohmann::json copy = manifest;
  copy.erase("created");
  copy.erase("content_hash");
  return sha256_hex(copy.dump());
}

LoadedPipeline load_pipeline(const std::filesystem::path& manifest_path) {
  LoadedPipeline L;
  L.manifest = read_json_file(manifest_path);
  const auto root = manifest_path.parent_path();
  const auto& man = L.manifest;
  try {
    for (const auto& [rel, hash] : man.at("artifacts").items()) {
      const auto path = root / rel;
      if (!std::filesystem::exists(path)) throw IoError("missing artifact: expected " + path.string());
      if (sha256_file(path) != hash.get<std::string>())
        throw IoError("artifact " + path.string() + " does not match its manifest hash");
    }
    L.spec = data_spec_from_json(man.at("spec"));
    L.schedule = schedule_from_json(man.at("schedule"));
    CombinedDenoiser& c = L.combined;
    c.dim = L.spec.m;
    c.U = L.spec.U;
    for (const auto& jg : man.at("groups")) {
      ViewGroup g;
      g.id = jg.at("id").get<std::string>();
      for (const auto& jo : jg.at("operators")) g.ops.push_back(view_operator_from_json(jo));
      g.net = read_denoiser(root / jg.at("network").get<std::string>());
      c.groups.push_back(std::move(g));
    }
    const auto& jc = man.at("combiner");
    c.weights.bins = sigma_bins_from_json(jc.at("bins"));
    c.weights.values = jc.at("weights").get<std::vector<Vec>>();
    ResidualDenoiser r;
    r.net = read_denoiser(root / man.at("residual").at("network").get<std::string>());
    r.gain = jc.value("gain", 1.0);
    if (jc.contains("adapter") && !jc.at("adapter").is_null())
      r.adapter = RangeAdapter{sigma_bins_from_json(jc.at("adapter").at("bins")),
                               jc.at("adapter").at("values").get<Vec>()};
    c.residual = std::move(r);
    if (!man.at("baseline").is_null()) L.baseline = read_denoiser(root / man.at("baseline").at("network").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  L.combined.validate();
  return L;
}

}  // namespace bdl
