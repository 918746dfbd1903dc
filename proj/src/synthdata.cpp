#include "bdl/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "bdl/error.hpp"
#include "bdl/json_util.hpp"
#include "bdl/rng.hpp"

namespace bdl {

DenseMatrix MixtureComponent::covariance(double global_strength) const {
  if (dense_cov) return *dense_cov;
  const std::size_t m = mean.size();
  DenseMatrix cov(m, m);
  for (std::size_t i = 0; i < m; ++i) cov(i, i) = diag[i];
  if (global_strength > 0.0 && !global_factors.empty()) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        cov(i, j) += global_strength * dot(global_factors.row(i), global_factors.row(j));
  }
  return cov;
}

double MixtureComponent::variance(std::size_t j, double global_strength) const {
  if (dense_cov) return (*dense_cov)(j, j);
  double v = diag[j];
  if (!global_factors.empty()) v += global_strength * squared_norm(global_factors.row(j));
  return v;
}

namespace {

double upper_tail(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

}  // namespace

void DataSpec::validate() const {
  if (m == 0 || components.empty()) throw DomainError("data spec '" + id + "' is empty");
  if (grid.size() != m)
    throw DomainError("data spec '" + id + "': grid size " + std::to_string(grid.size()) + " != m " +
                      std::to_string(m));
  if (!(U > 0.0)) throw DomainError("data spec '" + id + "': U must be positive");
  if (global_strength < 0.0) throw DomainError("data spec '" + id + "': global_strength must be >= 0");
  double total = 0.0;
  for (std::size_t k = 0; k < components.size(); ++k) {
    const auto& c = components[k];
    const std::string where = "data spec '" + id + "' component " + std::to_string(k);
    if (!(c.weight >= 0.0)) throw DomainError(where + ": negative weight");
    total += c.weight;
    if (c.mean.size() != m) throw DomainError(where + ": mean has wrong dimension");
    for (double mu : c.mean)
      if (!std::isfinite(mu) || std::abs(mu) > 0.8 * U + 1e-12)
        throw DomainError(where + ": mean entry exceeds 0.8 U");
    if (c.dense_cov) {
      if (c.dense_cov->rows() != m || c.dense_cov->cols() != m)
        throw DomainError(where + ": dense covariance has wrong shape");
      continue;
    }
    if (c.diag.size() != m) throw DomainError(where + ": diagonal has wrong dimension");
    for (double d : c.diag)
      if (!(d >= 0.0) || !std::isfinite(d)) throw DomainError(where + ": diagonal must be nonnegative");
    if (!c.global_factors.empty()) {
      if (c.global_factors.rows() != m || c.global_factors.cols() > static_cast<std::size_t>(global_rank))
        throw DomainError(where + ": global factors must be m x r with r <= global_rank");
    }
  }
  if (std::abs(total - 1.0) > 1e-12) throw DomainError("data spec '" + id + "': weights do not sum to 1");
  const double tail = max_tail_mass();
  if (tail >= 1e-6) {
    throw DomainError("data spec '" + id + "': probability mass outside [-U, U] is " +
                      std::to_string(tail) + " per coordinate (limit 1e-6)");
  }
}

double DataSpec::max_tail_mass() const {
  double worst = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double p = 0.0;
    for (const auto& c : components) {
      const double var = c.variance(j, global_strength);
      if (var <= 0.0) {
        if (std::abs(c.mean[j]) > U) p += c.weight;
        continue;
      }
      const double sd = std::sqrt(var);
      p += c.weight * (upper_tail((U - c.mean[j]) / sd) + upper_tail((U + c.mean[j]) / sd));
    }
    worst = std::max(worst, p);
  }
  return worst;
}

Vec DataSpec::mixture_mean() const {
  Vec mu(m, 0.0);
  for (const auto& c : components) axpy(c.weight, c.mean, mu);
  return mu;
}

double DataSpec::data_std() const {
  const Vec mu = mixture_mean();
  double total = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double second = 0.0;
    for (const auto& c : components) second += c.weight * (c.variance(j, global_strength) + c.mean[j] * c.mean[j]);
    total += second - mu[j] * mu[j];
  }
  return std::sqrt(total / static_cast<double>(m));
}

namespace {

// Smooth random field on the grid, normalized to max |value| = 1.
Vec smooth_pattern(const GridShape& grid, CounterRng& rng, int waves) {
  std::vector<std::array<double, 4>> terms;
  for (int w = 0; w < waves; ++w)
    terms.push_back({rng.uniform(0.5, 2.5), rng.uniform(-2.0, 2.0), rng.uniform(0.0, 2.0 * std::numbers::pi),
                     rng.uniform(0.5, 1.0)});
  Vec p(grid.size());
  double peak = 0.0;
  for (int r = 0; r < grid.height; ++r)
    for (int c = 0; c < grid.width; ++c) {
      double v = 0.0;
      for (const auto& t : terms) {
        v += t[3] * std::sin(2.0 * std::numbers::pi *
                                 (t[0] * (r + 0.5) / grid.height + t[1] * (c + 0.5) / grid.width) +
                             t[2]);
      }
      for (int ch = 0; ch < grid.channels; ++ch) p[grid.index(r, c, ch)] = v;
      peak = std::max(peak, std::abs(v));
    }
  if (peak > 0.0)
    for (double& v : p) v /= peak;
  return p;
}

}  // namespace

DataSpec make_synthetic_spec(const SyntheticSpecParams& params) {
  if (params.components < 1) throw ConfigError("spec.components must be >= 1");
  if (params.global_rank < 0) throw ConfigError("spec.global_rank must be >= 0");
  if (params.block <= 0 || params.grid.height % params.block != 0 || params.grid.width % params.block != 0)
    throw ConfigError("spec.block must tile the grid");
  if (params.diag_min < 0.0 || params.diag_max < params.diag_min)
    throw ConfigError("spec.diag_min/diag_max must satisfy 0 <= diag_min <= diag_max");

  DataSpec spec;
  spec.grid = params.grid;
  spec.m = params.grid.size();
  spec.U = params.U;
  spec.global_rank = params.global_rank;
  spec.global_strength = params.global_strength;
  spec.seed = params.seed;
  spec.id = "gmm_" + std::to_string(params.grid.height) + "x" + std::to_string(params.grid.width) + "_k" +
            std::to_string(params.components) + "_r" + std::to_string(params.global_rank) + "_s" +
            std::to_string(params.seed);

  const std::size_t m = spec.m;
  const int blocks_r = params.grid.height / params.block;
  const int blocks_c = params.grid.width / params.block;
  Vec shared_pattern;
  for (int k = 0; k < params.components; ++k) {
    CounterRng rng(params.seed, "spec/component", static_cast<std::uint64_t>(k));
    MixtureComponent comp;
    comp.weight = 1.0 / params.components;

    // Two components mirror one pattern; more get independent patterns.
    Vec pattern;
    if (params.components == 2) {
      if (k == 0) shared_pattern = smooth_pattern(params.grid, rng, 3);
      pattern = shared_pattern;
      if (k == 1)
        for (double& v : pattern) v = -v;
    } else {
      pattern = smooth_pattern(params.grid, rng, 3);
    }
    comp.mean.resize(m);
    for (std::size_t j = 0; j < m; ++j) comp.mean[j] = params.mean_amplitude * pattern[j];

    const Vec texture = smooth_pattern(params.grid, rng, 5);
    comp.diag.resize(m);
    for (std::size_t j = 0; j < m; ++j)
      comp.diag[j] = params.diag_min + (params.diag_max - params.diag_min) * 0.5 * (1.0 + texture[j]);

    if (params.global_rank > 0) {
      const auto r = static_cast<std::size_t>(params.global_rank);
      std::vector<double> block_values(static_cast<std::size_t>(blocks_r * blocks_c) * r);
      for (double& v : block_values) v = rng.normal();
      double peak = 0.0;
      for (int b = 0; b < blocks_r * blocks_c; ++b)
        peak = std::max(peak, squared_norm(std::span<const double>(block_values.data() + b * r, r)));
      const double scale = peak > 0.0 ? 1.0 / std::sqrt(peak) : 0.0;
      comp.global_factors = DenseMatrix(m, r);
      for (int row = 0; row < params.grid.height; ++row)
        for (int col = 0; col < params.grid.width; ++col) {
          const int b = (row / params.block) * blocks_c + col / params.block;
          for (int ch = 0; ch < params.grid.channels; ++ch) {
            auto dst = comp.global_factors.row(params.grid.index(row, col, ch));
            for (std::size_t c = 0; c < r; ++c) dst[c] = scale * block_values[b * r + c];
          }
        }
    }
    spec.components.push_back(std::move(comp));
  }
  spec.validate();
  return spec;
}

namespace {

struct ComponentSampler {
  std::optional<Cholesky> chol;
};

std::vector<ComponentSampler> make_samplers(const DataSpec& spec) {
  std::vector<ComponentSampler> out(spec.components.size());
  for (std::size_t k = 0; k < spec.components.size(); ++k) {
    const auto& c = spec.components[k];
    if (c.dense_cov) {
      DenseMatrix cov = *c.dense_cov;
      double jitter = 0.0;
      double scale = 0.0;
      for (std::size_t i = 0; i < cov.rows(); ++i) scale = std::max(scale, cov(i, i));
      // Pushforward covariances may be singular; sample from a jittered factor.
      for (int attempt = 0;; ++attempt) {
        try {
          out[k].chol.emplace(cov);
          break;
        } catch (const NumericError&) {
          if (attempt > 6) throw;
          const double next = (jitter == 0.0 ? 1e-14 : jitter * 100.0) * (1.0 + scale);
          for (std::size_t i = 0; i < cov.rows(); ++i) cov(i, i) += next - jitter;
          jitter = next;
        }
      }
    }
  }
  return out;
}

std::size_t pick_component(const DataSpec& spec, double u) {
  double acc = 0.0;
  for (std::size_t k = 0; k < spec.components.size(); ++k) {
    acc += spec.components[k].weight;
    if (u < acc) return k;
  }
  return spec.components.size() - 1;
}

void draw(const DataSpec& spec, const std::vector<ComponentSampler>& samplers, CounterRng& rng,
          std::span<double> out) {
  const std::size_t k = pick_component(spec, rng.uniform());
  const auto& c = spec.components[k];
  const std::size_t m = spec.m;
  std::copy(c.mean.begin(), c.mean.end(), out.begin());
  if (samplers[k].chol) {
    Vec z(m);
    rng.fill_normal(z);
    const auto& low = samplers[k].chol->lower();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j <= i; ++j) out[i] += low(i, j) * z[j];
  } else {
    for (std::size_t j = 0; j < m; ++j) out[j] += std::sqrt(c.diag[j]) * rng.normal();
    if (spec.global_strength > 0.0 && !c.global_factors.empty()) {
      const std::size_t r = c.global_factors.cols();
      Vec w(r);
      rng.fill_normal(w);
      const double s = std::sqrt(spec.global_strength);
      for (std::size_t j = 0; j < m; ++j) out[j] += s * dot(c.global_factors.row(j), w);
    }
  }
  for (double& v : out) v = std::clamp(v, -spec.U, spec.U);
}

}  // namespace

void sample_mixture(const DataSpec& spec, std::uint64_t seed, std::uint32_t stream, std::uint64_t index,
                    std::span<double> out) {
  const auto samplers = make_samplers(spec);
  CounterRng rng(seed, stream, index);
  draw(spec, samplers, rng, out);
}

Dataset sample_dataset(const DataSpec& spec, std::size_t n, const std::string& stream) {
  if (n == 0) throw DomainError("sample_dataset: N must be >= 1");
  Dataset ds;
  ds.spec_id = spec.id;
  ds.kind = DatasetKind::full;
  ds.dim = spec.m;
  ds.seed = spec.seed;
  ds.stream = stream;
  ds.values.resize(n * spec.m);
  const auto samplers = make_samplers(spec);
  const std::uint32_t sid = stream_id(stream);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(spec.seed, sid, i);
    draw(spec, samplers, rng, ds.sample(i));
  }
  return ds;
}

Dataset project_dataset(const Dataset& full, std::span<const ViewOperator> ops, const std::string& view_id) {
  if (full.kind != DatasetKind::full) throw ShapeError("project_dataset: input must be full-resolution");
  if (ops.empty()) throw ShapeError("project_dataset: no operators");
  const std::size_t m_i = ops.front().view_dim();
  for (const auto& op : ops) {
    if (op.full_dim() != full.dim)
      throw ShapeError("project_dataset: operator '" + op.id() + "' expects dimension " +
                       std::to_string(op.full_dim()) + ", dataset has " + std::to_string(full.dim));
    if (op.view_dim() != m_i) throw ShapeError("project_dataset: operators have different view dimensions");
  }
  const std::size_t n = full.size() * ops.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  CounterRng rng(full.seed, "shuffle/" + full.stream + "/" + view_id, 0);
  shuffle(std::span<std::size_t>(order), rng);

  Dataset out;
  out.spec_id = full.spec_id;
  out.kind = DatasetKind::view;
  out.view_id = view_id;
  out.dim = m_i;
  out.seed = full.seed;
  out.stream = full.stream;
  out.values.resize(n * m_i);
  for (std::size_t dst = 0; dst < n; ++dst) {
    const std::size_t src = order[dst];
    const std::size_t sample = src / ops.size();
    const auto& op = ops[src % ops.size()];
    op.apply_A(full.sample(sample), out.sample(dst));
  }
  return out;
}

Dataset project_dataset(const Dataset& full, const ViewOperator& op) {
  return project_dataset(full, std::span<const ViewOperator>(&op, 1), op.id());
}

DataSpec view_spec(const DataSpec& spec, const ViewOperator& op) {
  if (op.full_dim() != spec.m) throw ShapeError("view_spec: operator dimension does not match the data dimension");
  DataSpec out;
  out.id = spec.id + "/" + op.id();
  out.grid = op.view_grid();
  out.m = op.view_dim();
  out.U = spec.U;
  out.global_rank = spec.global_rank;
  out.global_strength = spec.global_strength;
  out.seed = spec.seed;
  const DenseMatrix a = op.dense_A();
  for (const auto& c : spec.components) {
    MixtureComponent vc;
    vc.weight = c.weight;
    vc.mean = op.apply_A(c.mean);
    if (op.disjoint_rows() && !c.dense_cov) {
      vc.diag.assign(out.m, 0.0);
      for (std::size_t r = 0; r < out.m; ++r)
        for (std::size_t j = 0; j < spec.m; ++j) vc.diag[r] += a(r, j) * a(r, j) * c.diag[j];
      if (!c.global_factors.empty()) vc.global_factors = matmul(a, c.global_factors);
    } else {
      const DenseMatrix cov = c.covariance(spec.global_strength);
      vc.dense_cov = matmul(matmul(a, cov), a.transposed());
      vc.diag.assign(out.m, 0.0);
      for (std::size_t r = 0; r < out.m; ++r) vc.diag[r] = (*vc.dense_cov)(r, r);
    }
    out.components.push_back(std::move(vc));
  }
  return out;
}

namespace {

constexpr char kDatasetMagic[4] = {'B', 'D', 'L', 'D'};
constexpr std::uint16_t kDatasetVersion = 1;

template <typename T>
void put_le(std::vector<unsigned char>& buf, T value) {
  using U = std::make_unsigned_t<std::conditional_t<std::is_floating_point_v<T>, std::uint64_t, T>>;
  U bits;
  if constexpr (std::is_floating_point_v<T>)
    bits = std::bit_cast<std::uint64_t>(value);
  else
    bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::vector<unsigned char> buf;
  buf.reserve(16 + ds.values.size() * 8);
  buf.insert(buf.end(), kDatasetMagic, kDatasetMagic + 4);
  put_le<std::uint16_t>(buf, kDatasetVersion);
  put_le<std::uint16_t>(buf, ds.kind == DatasetKind::full ? 0 : 1);
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ds.dim));
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ds.size()));
  for (double v : ds.values) put_le<double>(buf, v);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset file " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));

  nlohmann::json sidecar = {{"spec_id", ds.spec_id},
                            {"seed", ds.seed},
                            {"stream", ds.stream},
                            {"kind", ds.kind == DatasetKind::full ? "full" : "view"},
                            {"view_id", ds.view_id},
                            {"m", ds.dim},
                            {"N", ds.size()}};
  std::ofstream side(path.string() + ".json");
  if (!side) throw IoError("cannot write dataset sidecar for " + path.string());
  side << sidecar.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing dataset file: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 16 || std::memcmp(buf.data(), kDatasetMagic, 4) != 0)
    throw IoError("not a dataset file: " + path.string());
  if (get_le<std::uint16_t>(buf.data() + 4) != kDatasetVersion)
    throw IoError("unsupported dataset version in " + path.string());
  Dataset ds;
  ds.kind = get_le<std::uint16_t>(buf.data() + 6) == 0 ? DatasetKind::full : DatasetKind::view;
  ds.dim = get_le<std::uint32_t>(buf.data() + 8);
  const std::size_t n = get_le<std::uint32_t>(buf.data() + 12);
  if (buf.size() != 16 + n * ds.dim * 8) throw IoError("truncated dataset file: " + path.string());
  ds.values.resize(n * ds.dim);
  for (std::size_t i = 0; i < ds.values.size(); ++i)
    ds.values[i] = std::bit_cast<double>(get_le<std::uint64_t>(buf.data() + 16 + 8 * i));

  std::ifstream side(path.string() + ".json");
  if (side) {
    const auto j = nlohmann::json::parse(side);
    ds.spec_id = j.value("spec_id", "");
    ds.seed = j.value("seed", std::uint64_t{0});
    ds.stream = j.value("stream", "");
    ds.view_id = j.value("view_id", "");
  }
  return ds;
}

nlohmann::json to_json(const DataSpec& spec) {
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : spec.components) {
    nlohmann::json jc = {{"weight", c.weight}, {"mean", c.mean}, {"diag", c.diag}};
    if (!c.global_factors.empty()) {
      jc["global_factors"] = {{"rows", c.global_factors.rows()},
                              {"cols", c.global_factors.cols()},
                              {"values", std::vector<double>(c.global_factors.values().begin(),
                                                             c.global_factors.values().end())}};
    }
    if (c.dense_cov) {
      jc["dense_cov"] = std::vector<double>(c.dense_cov->values().begin(), c.dense_cov->values().end());
    }
    comps.push_back(std::move(jc));
  }
  return {{"id", spec.id},
          {"grid", to_json(spec.grid)},
          {"m", spec.m},
          {"U", spec.U},
          {"global_rank", spec.global_rank},
          {"global_strength", spec.global_strength},
          {"seed", spec.seed},
          {"components", comps}};
}

nlohmann::json to_json(const SyntheticSpecParams& p) {
  return {{"grid", to_json(p.grid)},
          {"U", p.U},
          {"components", p.components},
          {"global_rank", p.global_rank},
          {"global_strength", p.global_strength},
          {"mean_amplitude", p.mean_amplitude},
          {"diag_min", p.diag_min},
          {"diag_max", p.diag_max},
          {"block", p.block},
          {"seed", p.seed}};
}

SyntheticSpecParams synthetic_spec_params_from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"grid", "U", "components", "global_rank", "global_strength", "mean_amplitude", "diag_min",
                      "diag_max", "block", "seed"},
                     "spec");
  SyntheticSpecParams p;
  if (j.contains("grid")) p.grid = grid_from_json(j.at("grid"));
  p.U = j.value("U", p.U);
  p.components = j.value("components", p.components);
  p.global_rank = j.value("global_rank", p.global_rank);
  p.global_strength = j.value("global_strength", p.global_strength);
  p.mean_amplitude = j.value("mean_amplitude", p.mean_amplitude);
  p.diag_min = j.value("diag_min", p.diag_min);
  p.diag_max = j.value("diag_max", p.diag_max);
  p.block = j.value("block", p.block);
  p.seed = j.value("seed", p.seed);
  if (!(p.U > 0.0)) throw ConfigError("spec.U: must be positive");
  if (p.global_strength < 0.0) throw ConfigError("spec.global_strength: must be nonnegative");
  return p;
}

DataSpec data_spec_from_json(const nlohmann::json& j) {
  DataSpec spec;
  spec.id = j.at("id").get<std::string>();
  spec.grid = grid_from_json(j.at("grid"));
  spec.m = j.at("m").get<std::size_t>();
  spec.U = j.at("U").get<double>();
  spec.global_rank = j.at("global_rank").get<int>();
  spec.global_strength = j.at("global_strength").get<double>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& jc : j.at("components")) {
    MixtureComponent c;
    c.weight = jc.at("weight").get<double>();
    c.mean = jc.at("mean").get<Vec>();
    c.diag = jc.at("diag").get<Vec>();
    if (jc.contains("global_factors")) {
      const auto& g = jc["global_factors"];
      c.global_factors = DenseMatrix(g.at("rows").get<std::size_t>(), g.at("cols").get<std::size_t>(),
                                     g.at("values").get<std::vector<double>>());
    }
    if (jc.contains("dense_cov")) c.dense_cov = DenseMatrix(spec.m, spec.m, jc["dense_cov"].get<std::vector<double>>());
    spec.components.push_back(std::move(c));
  }
  return spec;
}

}  // namespace bdl
