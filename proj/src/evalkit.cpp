#include "bdl/evalkit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>

#include "bdl/error.hpp"
#include "bdl/json_util.hpp"
#include "bdl/parallel.hpp"

namespace bdl {

namespace {

using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

std::string seeded_stream(const std::string& stream, std::uint64_t seed) {
  return stream + "/" + std::to_string(seed);
}

Estimate average_of(const std::vector<Estimate>& parts) {
  Estimate out;
  if (parts.empty()) return out;
  double se2 = 0.0;
  for (const auto& p : parts) {
    out.mean += p.mean;
    se2 += p.std_err * p.std_err;
    out.n += p.n;
  }
  const double k = static_cast<double>(parts.size());
  out.mean /= k;
  out.std_err = std::sqrt(se2) / k;
  return out;
}

std::vector<double> oracle_means(const PosteriorOracle& oracle, std::span<const double> xt,
                                 std::span<const double> sig) {
  const std::size_t m = oracle.dim();
  std::vector<double> out(xt.size());
  parallel_for(sig.size(), [&](std::size_t r) {
    const Vec mu = oracle.posterior_mean(xt.subspan(r * m, m), sig[r]);
    std::copy(mu.begin(), mu.end(), out.begin() + static_cast<std::ptrdiff_t>(r * m));
  });
  return out;
}

}  // namespace

void EvalOptions::validate() const {
  if (n_mc < 2) throw ConfigError("eval.n_mc: must be >= 2");
  if (bins < 1) throw ConfigError("eval.bins: must be >= 1");
  if (chunk < 1) throw ConfigError("eval.chunk: must be >= 1");
  if (fixed_sigma && !(*fixed_sigma > 0.0)) throw ConfigError("eval.fixed_sigma: must be positive");
}

nlohmann::json to_json(const EvalOptions& o) {
  return {{"n_mc", o.n_mc},
          {"bins", o.bins},
          {"seed", o.seed},
          {"stream", o.stream},
          {"fixed_sigma", o.fixed_sigma ? nlohmann::json(*o.fixed_sigma) : nlohmann::json(nullptr)},
          {"chunk", o.chunk}};
}

EvalOptions eval_options_from_json(const nlohmann::json& j) {
  require_known_keys(j, {"n_mc", "bins", "seed", "stream", "fixed_sigma", "chunk"}, "eval");
  EvalOptions o;
  o.n_mc = j.value("n_mc", o.n_mc);
  o.bins = j.value("bins", o.bins);
  o.seed = j.value("seed", o.seed);
  o.stream = j.value("stream", o.stream);
  if (j.contains("fixed_sigma") && !j.at("fixed_sigma").is_null()) o.fixed_sigma = j.at("fixed_sigma").get<double>();
  o.chunk = j.value("chunk", o.chunk);
  o.validate();
  return o;
}

LossEstimates eval_losses(const BatchDenoiseFn* denoise, const PosteriorOracle& oracle,
                          const DiffusionSchedule& schedule, const EvalOptions& opts) {
  opts.validate();
  schedule.validate();
  const DataSpec& spec = oracle.spec();
  const std::size_t m = spec.m;
  const std::size_t n_bins = opts.fixed_sigma ? 1 : static_cast<std::size_t>(opts.bins);
  const SigmaBins bins{schedule.sigma_min, schedule.sigma_max, static_cast<int>(n_bins)};
  const std::size_t total = n_bins * opts.n_mc;
  const Dataset x0 = sample_dataset(spec, total, seeded_stream(opts.stream, opts.seed));
  const std::uint32_t noise_sid = stream_id(opts.stream + "/noise");

  LossEstimates out;
  out.draws = total;
  std::vector<Estimate> Ls, Rs, Vs, Gs;
  for (std::size_t b = 0; b < n_bins; ++b) {
    RunningStats sL, sR, sV, sG;
    for (std::size_t start = 0; start < opts.n_mc; start += opts.chunk) {
      const std::size_t n = std::min(opts.chunk, opts.n_mc - start);
      std::vector<double> xt(n * m), sig(n), y(n * m);
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t row = b * opts.n_mc + start + r;
        CounterRng rng(opts.seed, noise_sid, row);
        sig[r] = opts.fixed_sigma ? *opts.fixed_sigma : bins.sample(b, rng);
        const auto x = x0.sample(row);
        for (std::size_t j = 0; j < m; ++j) {
          y[r * m + j] = x[j];
          xt[r * m + j] = x[j] + sig[r] * rng.normal();
        }
      }
      const auto mu = oracle_means(oracle, xt, sig);
      std::vector<double> f;
      if (denoise) {
        f = (*denoise)(xt, sig);
        if (f.size() != n * m) throw ShapeError("denoiser returned the wrong number of values");
      }
      for (std::size_t r = 0; r < n; ++r) {
        double l = 0.0, rr = 0.0, v = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          const std::size_t k = r * m + j;
          const double dv = mu[k] - y[k];
          v += dv * dv;
          if (denoise) {
            const double dl = f[k] - y[k];
            const double dr = f[k] - mu[k];
            l += dl * dl;
            rr += dr * dr;
          }
        }
        sV.add(v);
        if (denoise) {
          if (!std::isfinite(l) || !std::isfinite(rr)) throw NumericError("non-finite denoiser output in evaluation");
          sL.add(l);
          sR.add(rr);
          sG.add(l - rr - v);
        }
      }
    }
    BinLosses bl;
    bl.sigma_lo = opts.fixed_sigma ? *opts.fixed_sigma : bins.lower(b);
    bl.sigma_hi = opts.fixed_sigma ? *opts.fixed_sigma : bins.upper(b);
    bl.L = sL.estimate();
    bl.R = sR.estimate();
    bl.V = sV.estimate();
    bl.gap = sG.estimate();
    Ls.push_back(bl.L);
    Rs.push_back(bl.R);
    Vs.push_back(bl.V);
    Gs.push_back(bl.gap);
    out.bins.push_back(bl);
  }
  out.L = average_of(Ls);
  out.R = average_of(Rs);
  out.V = average_of(Vs);
  out.gap = average_of(Gs);
  return out;
}

LossEstimates eval_R(const BatchDenoiseFn& denoise, const PosteriorOracle& oracle, const DiffusionSchedule& schedule,
                     const EvalOptions& opts) {
  return eval_losses(&denoise, oracle, schedule, opts);
}

LossEstimates eval_L(const BatchDenoiseFn& denoise, const PosteriorOracle& oracle, const DiffusionSchedule& schedule,
                     const EvalOptions& opts) {
  return eval_losses(&denoise, oracle, schedule, opts);
}

LossEstimates eval_V(const PosteriorOracle& oracle, const DiffusionSchedule& schedule, const EvalOptions& opts) {
  return eval_losses(nullptr, oracle, schedule, opts);
}

ScoreFn oracle_score_fn(const PosteriorOracle& oracle) {
  return [&oracle](std::span<const double> x, std::span<const double> s) {
    const std::size_t m = oracle.dim();
    std::vector<double> out(x.size());
    parallel_for(s.size(), [&](std::size_t r) {
      const Vec g = oracle.score(x.subspan(r * m, m), s[r]);
      std::copy(g.begin(), g.end(), out.begin() + static_cast<std::ptrdiff_t>(r * m));
    });
    return out;
  };
}

ScoreFn denoiser_score_fn(BatchDenoiseFn denoise) {
  return [denoise = std::move(denoise)](std::span<const double> x, std::span<const double> s) {
    auto d = denoise(x, s);
    if (d.size() != x.size()) throw ShapeError("denoiser returned the wrong number of values");
    const std::size_t m = x.size() / s.size();
    for (std::size_t r = 0; r < s.size(); ++r)
      for (std::size_t j = 0; j < m; ++j) d[r * m + j] = (d[r * m + j] - x[r * m + j]) / (s[r] * s[r]);
    return d;
  };
}

Dataset sample_unclamped(const DataSpec& spec, std::size_t n, const std::string& stream) {
  DataSpec open = spec;
  open.U = std::numeric_limits<double>::max();
  Dataset ds = sample_dataset(open, n, stream);
  return ds;
}

KlEstimate eval_kl(const ScoreFn& score_a, const ScoreFn& score_b, const DataSpec& spec_a,
                   const DiffusionSchedule& schedule, const KlOptions& opts, const DataSpec* spec_b) {
  schedule.validate();
  if (opts.n_mc < 2) throw ConfigError("kl.n_mc: must be >= 2");
  if (opts.t_quadrature < 3) throw ConfigError("kl.t_quadrature: must be >= 3");
  const std::size_t m = spec_a.m;
  const std::size_t n = opts.n_mc;
  const Vec t = schedule.t_grid(opts.t_quadrature);
  const std::size_t Q = t.size();

  // Common random numbers: the same (x0, eps) pair at every node.
  const Dataset x0 = sample_unclamped(spec_a, n, seeded_stream(opts.stream, opts.seed));
  std::vector<double> eps(n * m);
  const std::uint32_t sid = stream_id(opts.stream + "/noise");
  for (std::size_t r = 0; r < n; ++r) {
    CounterRng rng(opts.seed, sid, r);
    rng.fill_normal(std::span<double>(eps).subspan(r * m, m));
  }

  // values(q, r) = g(t_q)^2 / 2 * ||s_A - s_B||^2 at draw r, with g^2 / 2 = t for sigma = t.
  std::vector<double> values(Q * n);
  for (std::size_t q = 0; q < Q; ++q) {
    const double sigma = schedule.sigma(t[q]);
    std::vector<double> xt(n * m);
    for (std::size_t k = 0; k < xt.size(); ++k) xt[k] = x0.values[k] + sigma * eps[k];
    const std::vector<double> sig(n, sigma);
    const auto a = score_a(xt, sig);
    const auto b = score_b(xt, sig);
    if (a.size() != xt.size() || b.size() != xt.size()) throw ShapeError("score function returned the wrong size");
    const double half_g2 = 0.5 * schedule.g2(t[q]);
    for (std::size_t r = 0; r < n; ++r) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double d = a[r * m + j] - b[r * m + j];
        d2 += d * d;
      }
      values[q * n + r] = half_g2 * d2;
    }
  }

  const auto trapezoid_weights = [&](std::size_t stride) {
    std::vector<double> w(Q, 0.0);
    std::size_t prev = 0;
    for (std::size_t q = stride; q < Q; q += stride) {
      const double h = t[q] - t[prev];
      w[prev] += 0.5 * h;
      w[q] += 0.5 * h;
      prev = q;
    }
    if (prev != Q - 1) {
      const double h = t[Q - 1] - t[prev];
      w[prev] += 0.5 * h;
      w[Q - 1] += 0.5 * h;
    }
    return w;
  };
  const auto integrate = [&](const std::vector<double>& w) {
    RunningStats s;
    for (std::size_t r = 0; r < n; ++r) {
      double path = 0.0;
      for (std::size_t q = 0; q < Q; ++q) path += w[q] * values[q * n + r];
      s.add(path);
    }
    return s.estimate();
  };

  KlEstimate out;
  const Estimate fine = integrate(trapezoid_weights(1));
  const Estimate coarse = integrate(trapezoid_weights(2));
  out.kl = fine.mean;
  out.std_err = fine.std_err;
  out.kl_coarse = coarse.mean;
  out.nodes = static_cast<int>(Q);
  out.n_mc = n;
  const double scale = std::max(std::abs(fine.mean), 1e-300);
  out.coarse_grid_warning = std::abs(fine.mean - coarse.mean) / scale > opts.refine_tolerance;

  if (spec_b) {
    if (spec_b->m != m) throw ShapeError("terminal diagnostic: spec dimensions differ");
    const Vec ma = spec_a.mixture_mean();
    const Vec mb = spec_b->mixture_mean();
    double d2 = 0.0;
    for (std::size_t j = 0; j < m; ++j) d2 += (ma[j] - mb[j]) * (ma[j] - mb[j]);
    out.terminal_mean_gap = std::sqrt(d2);
    const double T2 = schedule.sigma_max * schedule.sigma_max;
    const double va = spec_a.data_std() * spec_a.data_std() + T2;
    const double vb = spec_b->data_std() * spec_b->data_std() + T2;
    out.terminal_var_gap = std::abs(va - vb) / va;
  }
  return out;
}

struct LinearStatisticOracle::Impl {
  struct Component {
    double log_weight = 0.0;
    VecX mean;
    VecX proj_mean;
    MatX gain;  // Sigma V S^-1
    Eigen::LLT<MatX> chol;
    double half_logdet = 0.0;
  };
  std::size_t m = 0;
  MatX V;  // m x r orthonormal basis of the row space of M
  std::vector<Component> comps;
  bool jittered = false;
};

LinearStatisticOracle::LinearStatisticOracle(const DataSpec& spec, const DenseMatrix& M, double sigma,
                                             double rank_tol) {
  const std::size_t m = spec.m;
  if (M.rows() != m || M.cols() != m)
    throw ShapeError("statistic matrix must be " + std::to_string(m) + " x " + std::to_string(m));
  if (!(sigma > 0.0)) throw DomainError("conditioning requires sigma > 0");
  auto impl = std::make_shared<Impl>();
  impl->m = m;
  MatX Me(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) Me(i, j) = M(i, j);
  Eigen::JacobiSVD<MatX> svd(Me, Eigen::ComputeFullV);
  const VecX& sv = svd.singularValues();
  const double top = sv.size() > 0 ? sv(0) : 0.0;
  Eigen::Index r = 0;
  while (r < sv.size() && top > 0.0 && sv(r) > rank_tol * top) ++r;
  impl->V = svd.matrixV().leftCols(r);

  for (const auto& c : spec.components) {
    Impl::Component comp;
    comp.log_weight = std::log(c.weight);
    const DenseMatrix cov = c.covariance(spec.global_strength);
    MatX S(m, m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) S(i, j) = cov(i, j);
    comp.mean = Eigen::Map<const VecX>(c.mean.data(), static_cast<Eigen::Index>(m));
    comp.proj_mean = impl->V.transpose() * comp.mean;
    MatX inner = impl->V.transpose() * S * impl->V;
    inner.diagonal().array() += sigma * sigma;
    comp.chol.compute(inner);
    if (comp.chol.info() != Eigen::Success) {
      inner.diagonal().array() += 1e-10;
      comp.chol.compute(inner);
      impl->jittered = true;
      if (comp.chol.info() != Eigen::Success) throw NumericError("conditioning covariance is not positive definite");
    }
    const MatX SV = S * impl->V;
    comp.gain = comp.chol.solve(SV.transpose()).transpose();
    comp.half_logdet = 0.0;
    const MatX L = comp.chol.matrixL();
    for (Eigen::Index i = 0; i < L.rows(); ++i) comp.half_logdet += std::log(L(i, i));
    impl->comps.push_back(std::move(comp));
  }
  impl_ = std::move(impl);
}

Vec LinearStatisticOracle::posterior_mean(std::span<const double> x_t) const {
  const auto& I = *impl_;
  if (x_t.size() != I.m) throw ShapeError("conditioning input has the wrong dimension");
  const VecX x = Eigen::Map<const VecX>(x_t.data(), static_cast<Eigen::Index>(I.m));
  const VecX u = I.V.transpose() * x;
  std::vector<double> logp(I.comps.size());
  std::vector<VecX> d(I.comps.size());
  double best = -INFINITY;
  for (std::size_t k = 0; k < I.comps.size(); ++k) {
    const auto& c = I.comps[k];
    d[k] = u - c.proj_mean;
    const VecX z = c.chol.matrixL().solve(d[k]);
    logp[k] = c.log_weight - c.half_logdet - 0.5 * z.squaredNorm();
    best = std::max(best, logp[k]);
  }
  double Z = 0.0;
  for (double& l : logp) Z += (l = std::exp(l - best));
  VecX mean = VecX::Zero(static_cast<Eigen::Index>(I.m));
  for (std::size_t k = 0; k < I.comps.size(); ++k) {
    const auto& c = I.comps[k];
    mean += (logp[k] / Z) * (c.mean + c.gain * d[k]);
  }
  return Vec(mean.data(), mean.data() + mean.size());
}

std::size_t LinearStatisticOracle::rank() const { return static_cast<std::size_t>(impl_->V.cols()); }
bool LinearStatisticOracle::jittered() const { return impl_->jittered; }

DenseMatrix statistic_matrix(const std::vector<std::vector<ViewOperator>>& groups, std::size_t m) {
  DenseMatrix out(m, m);
  for (const auto& ops : groups)
    for (const auto& op : ops) {
      if (op.full_dim() != m) throw ShapeError("operator '" + op.id() + "' has the wrong full dimension");
      const DenseMatrix A = op.dense_A();
      const DenseMatrix B = op.dense_B();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < op.view_dim(); ++k) {
          const double b = B(i, k);
          if (b == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) out(i, j) += b * A(k, j);
        }
    }
  return out;
}

IdentityCheck check_residual_identity(const DataSpec& spec, const DenseMatrix& M, double sigma, std::size_t n_mc,
                                      std::uint64_t seed, const std::string& stream) {
  if (n_mc < 2) throw ConfigError("identity check needs n_mc >= 2");
  const std::size_t m = spec.m;
  const PosteriorOracle full(spec);
  const LinearStatisticOracle partial(spec, M, sigma);
  const Dataset x0 = sample_unclamped(spec, n_mc, seeded_stream(stream, seed));
  const std::uint32_t sid = stream_id(stream + "/noise");

  constexpr std::size_t kChunk = 1024;
  const std::size_t chunks = (n_mc + kChunk - 1) / kChunk;
  std::vector<RunningStats> sa(chunks), sb(chunks), sc(chunks), sd(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    Vec xt(m);
    for (std::size_t r = c * kChunk; r < std::min(n_mc, (c + 1) * kChunk); ++r) {
      CounterRng rng(seed, sid, r);
      const auto x = x0.sample(r);
      for (std::size_t j = 0; j < m; ++j) xt[j] = x[j] + sigma * rng.normal();
      const Vec mf = full.posterior_mean(xt, sigma);
      const Vec mp = partial.posterior_mean(xt);
      double a = 0.0, b = 0.0, g = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        a += (x[j] - mp[j]) * (x[j] - mp[j]);
        b += (x[j] - mf[j]) * (x[j] - mf[j]);
        g += (mf[j] - mp[j]) * (mf[j] - mp[j]);
      }
      sa[c].add(a);
      sb[c].add(b);
      sc[c].add(g);
      sd[c].add(a - b - g);
    }
  });
  for (std::size_t c = 1; c < chunks; ++c) {
    sa[0].merge(sa[c]);
    sb[0].merge(sb[c]);
    sc[0].merge(sc[c]);
    sd[0].merge(sd[c]);
  }
  IdentityCheck out;
  out.sigma = sigma;
  out.lhs = sa[0].estimate();
  out.rhs1 = sb[0].estimate();
  out.rhs2 = sc[0].estimate();
  out.gap = out.lhs.mean - out.rhs1.mean - out.rhs2.mean;
  out.combined_stderr = std::sqrt(out.lhs.std_err * out.lhs.std_err + out.rhs1.std_err * out.rhs1.std_err +
                                  out.rhs2.std_err * out.rhs2.std_err);
  out.paired_stderr = sd[0].std_err();
  out.rank = partial.rank();
  out.jittered = partial.jittered();
  out.passed = std::abs(out.gap) <= 3.0 * out.combined_stderr;
  return out;
}

nlohmann::json to_json(const Estimate& e) { return {{"mean", e.mean}, {"stderr", e.std_err}, {"n", e.n}}; }

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& b : r.losses.bins)
    bins.push_back({{"sigma_lo", b.sigma_lo},
                    {"sigma_hi", b.sigma_hi},
                    {"L", to_json(b.L)},
                    {"R", to_json(b.R)},
                    {"V", to_json(b.V)},
                    {"gap", to_json(b.gap)}});
  nlohmann::json j = {{"denoiser", r.denoiser_id},
                      {"config_hash", r.config_hash},
                      {"draws", r.losses.draws},
                      {"L", to_json(r.losses.L)},
                      {"R", to_json(r.losses.R)},
                      {"V", to_json(r.losses.V)},
                      {"gap", to_json(r.losses.gap)},
                      {"bins", bins},
                      {"warnings", r.warnings}};
  if (r.kl) {
    j["kl"] = {{"value", r.kl->kl},
               {"stderr", r.kl->std_err},
               {"coarse", r.kl->kl_coarse},
               {"coarse_grid_warning", r.kl->coarse_grid_warning},
               {"nodes", r.kl->nodes},
               {"n_mc", r.kl->n_mc}};
    if (r.kl->terminal_mean_gap) j["kl"]["terminal_mean_gap"] = *r.kl->terminal_mean_gap;
    if (r.kl->terminal_var_gap) j["kl"]["terminal_var_gap"] = *r.kl->terminal_var_gap;
  } else {
    j["kl"] = nullptr;
  }
  return j;
}

void write_report_text(std::ostream& os, const EvalReport& r) {
  const auto flags = os.flags();
  const auto prec = os.precision();
  os << "denoiser: " << r.denoiser_id << "\n";
  if (!r.config_hash.empty()) os << "config:   " << r.config_hash << "\n";
  os << "draws:    " << r.losses.draws << "\n\n";
  os << std::left << std::setw(12) << "sigma_lo" << std::setw(12) << "sigma_hi" << std::right << std::setw(14) << "L"
     << std::setw(14) << "R" << std::setw(14) << "V" << std::setw(12) << "R_stderr" << "\n";
  os << std::scientific << std::setprecision(4);
  for (const auto& b : r.losses.bins)
    os << std::left << std::setw(12) << b.sigma_lo << std::setw(12) << b.sigma_hi << std::right << std::setw(14)
       << b.L.mean << std::setw(14) << b.R.mean << std::setw(14) << b.V.mean << std::setw(12) << b.R.std_err << "\n";
  os << "\nsigma-averaged: L = " << r.losses.L.mean << " +/- " << r.losses.L.std_err << ", R = " << r.losses.R.mean
     << " +/- " << r.losses.R.std_err << ", V = " << r.losses.V.mean << " +/- " << r.losses.V.std_err << "\n";
  if (r.kl) {
    os << "KL = " << r.kl->kl << " +/- " << r.kl->std_err << " (" << r.kl->nodes << " nodes, coarse "
       << r.kl->kl_coarse << (r.kl->coarse_grid_warning ? ", grid too coarse" : "") << ")\n";
  }
  for (const auto& w : r.warnings) os << "warning: " << w << "\n";
  os.flags(flags);
  os.precision(prec);
}

void write_report_csv(std::ostream& os, const EvalReport& r) {
  const auto prec = os.precision();
  os << "denoiser,sigma_lo,sigma_hi,L,L_stderr,R,R_stderr,V,V_stderr,gap,gap_stderr,n\n";
  os << std::setprecision(12);
  for (const auto& b : r.losses.bins)
    os << r.denoiser_id << ',' << b.sigma_lo << ',' << b.sigma_hi << ',' << b.L.mean << ',' << b.L.std_err << ','
       << b.R.mean << ',' << b.R.std_err << ',' << b.V.mean << ',' << b.V.std_err << ',' << b.gap.mean << ','
       << b.gap.std_err << ',' << b.V.n << '\n';
  os.precision(prec);
}

}  // namespace bdl
