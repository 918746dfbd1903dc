#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "bdl/error.hpp"
#include "bdl/synthdata.hpp"
#include "support/oracles.hpp"

using namespace bdl;

namespace {

DataSpec small_spec(double rho, std::uint64_t seed = 3) {
  SyntheticSpecParams p;
  p.grid = GridShape{8, 8, 1};
  p.block = 4;
  p.global_rank = 2;
  p.global_strength = rho;
  p.seed = seed;
  return make_synthetic_spec(p);
}

}  // namespace

TEST(Spec, DefaultSyntheticSpecIsValid) {
  const auto spec = make_synthetic_spec({});
  EXPECT_EQ(spec.m, 1024u);
  EXPECT_EQ(spec.components.size(), 2u);
  EXPECT_EQ(spec.global_rank, 4);
  EXPECT_LT(spec.max_tail_mass(), 1e-6);
  double wsum = 0.0;
  for (const auto& c : spec.components) {
    wsum += c.weight;
    for (double mu : c.mean) EXPECT_LE(std::abs(mu), 0.8 * spec.U);
  }
  EXPECT_NEAR(wsum, 1.0, 1e-12);
}

TEST(Spec, ValidationRejectsBadWeightsAndMeans) {
  auto spec = oracle::gaussian_spec(2, {0.0, 0.0}, {0.01, 0.01}, 1.0);
  spec.components[0].weight = 0.9;
  EXPECT_THROW(spec.validate(), DomainError);
  spec.components[0].weight = 1.0;
  spec.components[0].mean = {0.9, 0.0};
  EXPECT_THROW(spec.validate(), DomainError);
}

TEST(Spec, ValidationRejectsHeavyTails) {
  auto spec = oracle::gaussian_spec(2, {0.0, 0.0}, {0.5, 0.5}, 1.0);
  EXPECT_THROW(spec.validate(), DomainError);
}

TEST(Spec, JsonRoundTrip) {
  const auto spec = small_spec(0.01);
  const auto back = data_spec_from_json(nlohmann::json::parse(to_json(spec).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(spec).dump());
}

TEST(Sample, DegeneratePointMass) {
  auto spec = oracle::gaussian_spec(3, {0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}, 1.0);
  const auto ds = sample_dataset(spec, 3, "s0");
  ASSERT_EQ(ds.size(), 3u);
  for (double v : ds.values) EXPECT_EQ(v, 0.0);
}

TEST(Sample, SymmetricMixtureMeanWithinClt) {
  const std::size_t m = 4;
  DataSpec spec;
  spec.id = "pm1";
  spec.grid = GridShape{2, 2, 1};
  spec.m = m;
  spec.U = 2.0;
  for (double sign : {1.0, -1.0}) {
    MixtureComponent c;
    c.weight = 0.5;
    c.mean = Vec(m, sign);
    c.diag = Vec(m, 0.01);
    c.global_factors = DenseMatrix(m, 0);
    spec.components.push_back(c);
  }
  spec.validate();
  const std::size_t n = 100000;
  const auto ds = sample_dataset(spec, n, "clt");
  Vec mean(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) mean[j] += ds.sample(i)[j] / static_cast<double>(n);
  EXPECT_LE(std::sqrt(squared_norm(mean)), 3.0 * std::sqrt(static_cast<double>(m) / n));
}

TEST(Sample, DeterministicBytes) {
  const auto spec = small_spec(0.01);
  const auto a = sample_dataset(spec, 50, "train");
  const auto b = sample_dataset(spec, 50, "train");
  EXPECT_EQ(a.values, b.values);
  const auto c = sample_dataset(spec, 50, "other");
  EXPECT_NE(a.values, c.values);
  // Prefix stability: sample i depends only on (seed, stream, i).
  const auto d = sample_dataset(spec, 20, "train");
  EXPECT_TRUE(std::equal(d.values.begin(), d.values.end(), a.values.begin()));
}

TEST(Sample, Bounded) {
  auto spec = small_spec(0.01);
  spec.U = 0.3;  // force clamping to engage
  const auto ds = sample_dataset(spec, 200, "clamp");
  for (double v : ds.values) {
    EXPECT_LE(v, spec.U);
    EXPECT_GE(v, -spec.U);
  }
}

TEST(Project, IdentityReshuffles) {
  const auto spec = small_spec(0.0);
  const auto full = sample_dataset(spec, 30, "p");
  const auto id = make_patch_operator(spec.grid, 0, 0, 8, 8);
  const auto view = project_dataset(full, id);
  EXPECT_EQ(view.kind, DatasetKind::view);
  EXPECT_EQ(view.size(), 30u);
  EXPECT_NE(view.values, full.values);
  auto a = full.values, b = view.values;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(Project, PatchTilingMultipliesCount) {
  const auto spec = small_spec(0.0);
  const auto full = sample_dataset(spec, 10, "p");
  const auto ops = make_patch_tiling(spec.grid, 2, 2);
  const auto view = project_dataset(full, ops, "patch");
  EXPECT_EQ(view.size(), 16u * 10u);
  EXPECT_EQ(view.dim, 4u);
  EXPECT_EQ(view.view_id, "patch");
}

TEST(Project, ZeroOperator) {
  const auto spec = small_spec(0.0);
  const auto full = sample_dataset(spec, 5, "z");
  const auto op = make_general_operator("zero", DenseMatrix(3, 64), DenseMatrix(64, 3));
  const auto view = project_dataset(full, op);
  for (double v : view.values) EXPECT_EQ(v, 0.0);
}

TEST(ViewSpec, IdentityUnchanged) {
  const auto spec = small_spec(0.01);
  const auto op = make_patch_operator(spec.grid, 0, 0, 8, 8);
  const auto vs = view_spec(spec, op);
  for (std::size_t k = 0; k < spec.components.size(); ++k) {
    const auto a = spec.components[k].covariance(spec.global_strength);
    const auto b = vs.components[k].covariance(vs.global_strength);
    for (std::size_t i = 0; i < a.values().size(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-15);
    EXPECT_EQ(vs.components[k].mean, spec.components[k].mean);
  }
}

TEST(ViewSpec, PatchOnDiagonalSelectsSubvector) {
  auto spec = oracle::gaussian_spec(4, {0.1, 0.2, 0.3, 0.4}, {0.01, 0.02, 0.03, 0.04}, 1.0);
  spec.grid = GridShape{2, 2, 1};
  const auto vs = view_spec(spec, make_patch_operator(spec.grid, 1, 0, 1, 2));
  EXPECT_EQ(vs.components[0].mean, (Vec{0.3, 0.4}));
  EXPECT_EQ(vs.components[0].diag, (Vec{0.03, 0.04}));
}

TEST(ViewSpec, DownsampleOfIdentityCovariance) {
  auto spec = oracle::gaussian_spec(4, Vec(4, 0.0), Vec(4, 1.0));
  spec.grid = GridShape{2, 2, 1};
  const auto vs = view_spec(spec, make_downsample_operator(spec.grid, 2));
  EXPECT_DOUBLE_EQ(vs.components[0].variance(0, vs.global_strength), 0.25);
}

TEST(ViewSpec, EmpiricalPushforwardWithinFourStandardErrors) {
  const auto spec = small_spec(0.012);
  const std::size_t n = 100000;
  const auto full = sample_dataset(spec, n, "push");
  for (const auto& op : {make_patch_operator(spec.grid, 4, 0, 4, 4), make_downsample_operator(spec.grid, 4)}) {
    const auto view = project_dataset(full, op);
    const auto vs = view_spec(spec, op);
    const std::size_t d = view.dim;
    // Mixture mean and second moment from the pushforward parameters.
    Vec mu(d, 0.0);
    DenseMatrix second(d, d);
    for (const auto& c : vs.components) {
      const auto cov = c.covariance(vs.global_strength);
      for (std::size_t i = 0; i < d; ++i) {
        mu[i] += c.weight * c.mean[i];
        for (std::size_t j = 0; j < d; ++j) second(i, j) += c.weight * (cov(i, j) + c.mean[i] * c.mean[j]);
      }
    }
    Vec emp_mu(d, 0.0);
    DenseMatrix emp_second(d, d);
    DenseMatrix emp_fourth(d, d);
    for (std::size_t s = 0; s < n; ++s) {
      const auto x = view.sample(s);
      for (std::size_t i = 0; i < d; ++i) {
        emp_mu[i] += x[i];
        for (std::size_t j = 0; j < d; ++j) {
          emp_second(i, j) += x[i] * x[j];
          emp_fourth(i, j) += x[i] * x[i] * x[j] * x[j];
        }
      }
    }
    const double nn = static_cast<double>(n);
    for (std::size_t i = 0; i < d; ++i) {
      emp_mu[i] /= nn;
      const double se = std::sqrt((emp_second(i, i) / nn - emp_mu[i] * emp_mu[i]) / nn);
      EXPECT_LE(std::abs(emp_mu[i] - mu[i]), 4.0 * se) << op.id() << " mean " << i;
      for (std::size_t j = 0; j < d; ++j) {
        const double m2 = emp_second(i, j) / nn;
        const double se2 = std::sqrt(std::max(emp_fourth(i, j) / nn - m2 * m2, 0.0) / nn);
        EXPECT_LE(std::abs(m2 - second(i, j)), 4.0 * se2) << op.id() << " moment " << i << "," << j;
      }
    }
  }
}

TEST(Spec, NoGlobalCorrelationMeansNoCrossPatchCovariance) {
  const auto spec = small_spec(0.0);
  for (const auto& c : spec.components) {
    const auto cov = c.covariance(spec.global_strength);
    for (std::size_t i = 0; i < spec.m; ++i)
      for (std::size_t j = 0; j < spec.m; ++j)
        if (i != j) {
          EXPECT_EQ(cov(i, j), 0.0);
        }
  }
}

TEST(DatasetIo, RoundTripWithSidecar) {
  const auto spec = small_spec(0.01);
  const auto ds = sample_dataset(spec, 17, "io");
  const auto dir = std::filesystem::temp_directory_path() / "bdl_test_io";
  std::filesystem::create_directories(dir);
  const auto path = dir / "s0.bin";
  write_dataset(path, ds);
  EXPECT_EQ(std::filesystem::file_size(path), 16u + 17u * 64u * 8u);
  std::ifstream side(path.string() + ".json");
  const auto j = nlohmann::json::parse(side);
  EXPECT_EQ(j.at("spec_id").get<std::string>(), spec.id);
  EXPECT_EQ(j.at("stream").get<std::string>(), "io");
  const auto back = read_dataset(path);
  EXPECT_EQ(back.values, ds.values);
  EXPECT_EQ(back.spec_id, ds.spec_id);
  EXPECT_EQ(back.kind, ds.kind);
  std::filesystem::remove_all(dir);
}

TEST(DatasetIo, MissingFileIsIoError) {
  EXPECT_THROW(read_dataset("/nonexistent/path/data.bin"), IoError);
}
