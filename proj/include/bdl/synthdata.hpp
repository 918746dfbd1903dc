#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bdl/linops.hpp"

namespace bdl {

// One Gaussian in the mixture. The covariance is diag(diag) +
// global_strength * F F^T with F = global_factors (m x r), unless a dense
// covariance is present, in which case it replaces both terms.
struct MixtureComponent {
  double weight = 1.0;
  Vec mean;
  Vec diag;
  DenseMatrix global_factors;
  std::optional<DenseMatrix> dense_cov;

  // Full m x m covariance (materialized; tests and small specs only).
  DenseMatrix covariance(double global_strength) const;
  // Marginal variance of coordinate j.
  double variance(std::size_t j, double global_strength) const;
};

struct DataSpec {
  std::string id = "spec";
  GridShape grid;
  std::size_t m = 0;
  double U = 1.0;
  std::vector<MixtureComponent> components;
  int global_rank = 0;
  double global_strength = 0.0;
  std::uint64_t seed = 0;

  // Throws DomainError when a structural invariant is violated.
  void validate() const;
  // Largest per-coordinate probability of leaving [-U, U].
  double max_tail_mass() const;
  // Root mean per-coordinate variance of the mixture.
  double data_std() const;
  Vec mixture_mean() const;
};

// Parameters of the synthetic family: smooth component means, textured
// diagonal variances and a global low-rank term constant on each
// block x block tile.
struct SyntheticSpecParams {
  GridShape grid{32, 32, 1};
  double U = 1.0;
  int components = 2;
  int global_rank = 4;
  double global_strength = 0.01;
  double mean_amplitude = 0.25;
  double diag_min = 0.002;
  double diag_max = 0.008;
  int block = 8;
  std::uint64_t seed = 1;
};

DataSpec make_synthetic_spec(const SyntheticSpecParams& params);

nlohmann::json to_json(const SyntheticSpecParams& p);
SyntheticSpecParams synthetic_spec_params_from_json(const nlohmann::json& j);

enum class DatasetKind { full, view };

struct Dataset {
  std::string spec_id;
  DatasetKind kind = DatasetKind::full;
  std::string view_id;
  std::size_t dim = 0;
  std::vector<double> values;
  std::uint64_t seed = 0;
  std::string stream;

  std::size_t size() const { return dim == 0 ? 0 : values.size() / dim; }
  std::span<const double> sample(std::size_t i) const { return {values.data() + i * dim, dim}; }
  std::span<double> sample(std::size_t i) { return {values.data() + i * dim, dim}; }
};

// N iid draws, clamped to [-U, U]. Sample i uses the counter stream
// (spec.seed, stream, i) so generation order does not matter.
Dataset sample_dataset(const DataSpec& spec, std::size_t n, const std::string& stream);

// Draws a single sample into `out` using the counter stream (seed, stream, index).
void sample_mixture(const DataSpec& spec, std::uint64_t seed, std::uint32_t stream, std::uint64_t index,
                    std::span<double> out);

// Maps every sample through A and shuffles the result with a fresh substream,
// dropping any association between views of the same source sample.
Dataset project_dataset(const Dataset& full, const ViewOperator& op);
Dataset project_dataset(const Dataset& full, std::span<const ViewOperator> ops, const std::string& view_id);

// Exact pushforward of the mixture through A.
DataSpec view_spec(const DataSpec& spec, const ViewOperator& op);

// Binary dataset file: 16-byte header then little-endian float64 samples,
// plus a JSON sidecar at <path>.json.
void write_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& path);

nlohmann::json to_json(const DataSpec& spec);
DataSpec data_spec_from_json(const nlohmann::json& j);

}  // namespace bdl
