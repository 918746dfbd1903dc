#include "bdl/linops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>

#include <nlohmann/json.hpp>

#include "bdl/error.hpp"
#include "bdl/json_util.hpp"

namespace bdl {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) {
    throw ShapeError("DenseMatrix: " + std::to_string(values_.size()) + " values for " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix id(n, n);
  for (std::size_t i = 0; i < n; ++i) id(i, i) = 1.0;
  return id;
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

bool DenseMatrix::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Vec matvec(const DenseMatrix& a, std::span<const double> x) {
  if (x.size() != a.cols()) {
    throw ShapeError("matvec: matrix has " + std::to_string(a.cols()) + " columns, vector has " +
                     std::to_string(x.size()) + " entries");
  }
  Vec y(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) y[r] = dot(a.row(r), x);
  return y;
}

Vec matvec_transposed(const DenseMatrix& a, std::span<const double> x) {
  if (x.size() != a.rows()) {
    throw ShapeError("matvec_transposed: matrix has " + std::to_string(a.rows()) +
                     " rows, vector has " + std::to_string(x.size()) + " entries");
  }
  Vec y(a.cols(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) axpy(x[r], a.row(r), y);
  return y;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      axpy(aik, b.row(k), c.row(i));
    }
  return c;
}

DenseMatrix gram(const DenseMatrix& a) {
  DenseMatrix g(a.cols(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto row = a.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      if (row[i] == 0.0) continue;
      for (std::size_t j = 0; j < a.cols(); ++j) g(i, j) += row[i] * row[j];
    }
  }
  return g;
}

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double squared_norm(std::span<const double> a) { return dot(a, a); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Cholesky::Cholesky(const DenseMatrix& spd) : lower_(spd.rows(), spd.cols()) {
  const std::size_t n = spd.rows();
  if (spd.cols() != n) throw ShapeError("Cholesky: matrix is not square");
  for (std::size_t j = 0; j < n; ++j) {
    double diag = spd(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= lower_(j, k) * lower_(j, k);
    // Pivots lost to cancellation count as singular.
    const double tol = 4.0 * std::numeric_limits<double>::epsilon() * static_cast<double>(n) * std::abs(spd(j, j));
    if (!(diag > tol) || !std::isfinite(diag)) {
      throw NumericError("Cholesky: matrix is not positive definite (pivot " + std::to_string(j) +
                         ")");
    }
    const double ljj = std::sqrt(diag);
    lower_(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = spd(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= lower_(i, k) * lower_(j, k);
      lower_(i, j) = s / ljj;
    }
  }
}

Vec Cholesky::solve_lower(std::span<const double> rhs) const {
  const std::size_t n = lower_.rows();
  if (rhs.size() != n) throw ShapeError("Cholesky::solve: dimension mismatch");
  Vec y(rhs.begin(), rhs.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) y[i] -= lower_(i, k) * y[k];
    y[i] /= lower_(i, i);
  }
  return y;
}

Vec Cholesky::solve(std::span<const double> rhs) const {
  const std::size_t n = lower_.rows();
  Vec y = solve_lower(rhs);
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < n; ++k) y[ii] -= lower_(k, ii) * y[k];
    y[ii] /= lower_(ii, ii);
  }
  return y;
}

double Cholesky::log_det() const {
  double s = 0.0;
  for (std::size_t i = 0; i < lower_.rows(); ++i) s += std::log(lower_(i, i));
  return 2.0 * s;
}

Vec solve_normal_equations(const DenseMatrix& gram, std::span<const double> rhs, double ridge) {
  if (ridge < 0.0 || !std::isfinite(ridge)) throw DomainError("ridge must be a finite nonnegative number");
  DenseMatrix system = gram;
  for (std::size_t i = 0; i < system.rows(); ++i) system(i, i) += ridge;
  try {
    return Cholesky(system).solve(rhs);
  } catch (const NumericError&) {
    throw NumericError(ridge == 0.0
                           ? "least squares: normal matrix is singular; use ridge > 0"
                           : "least squares: normal matrix is not positive definite");
  }
}

Vec solve_least_squares(const DenseMatrix& m, std::span<const double> y, double ridge) {
  if (y.size() != m.rows()) {
    throw ShapeError("solve_least_squares: " + std::to_string(m.rows()) + " rows but " +
                     std::to_string(y.size()) + " targets");
  }
  return solve_normal_equations(gram(m), matvec_transposed(m, y), ridge);
}

void SparseRows::push_row(std::span<const std::size_t> cols, std::span<const double> vals) {
  col.insert(col.end(), cols.begin(), cols.end());
  val.insert(val.end(), vals.begin(), vals.end());
  row_ptr.push_back(col.size());
}

void SparseRows::apply(std::span<const double> x, std::span<double> out) const {
  for (std::size_t r = 0; r + 1 < row_ptr.size(); ++r) {
    double s = 0.0;
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) s += val[k] * x[col[k]];
    out[r] = s;
  }
}

void SparseRows::apply_averaging(std::span<const double> x, std::span<double> out) const {
  for (std::size_t r = 0; r + 1 < row_ptr.size(); ++r) {
    if (row_ptr[r] == row_ptr[r + 1]) {
      out[r] = 0.0;
      continue;
    }
    // Shifted by the first entry so constant inputs come back bit-exact.
    const double x0 = x[col[row_ptr[r]]];
    double s = 0.0;
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) s += val[k] * (x[col[k]] - x0);
    out[r] = x0 + s;
  }
}

DenseMatrix SparseRows::to_dense() const {
  DenseMatrix d(n_rows(), n_cols);
  for (std::size_t r = 0; r < n_rows(); ++r)
    for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) d(r, col[k]) += val[k];
  return d;
}

std::string to_string(ViewKind kind) {
  switch (kind) {
    case ViewKind::patch: return "patch";
    case ViewKind::downsample: return "downsample";
    case ViewKind::general: return "general";
  }
  return "general";
}

ViewKind view_kind_from_string(const std::string& s) {
  if (s == "patch") return ViewKind::patch;
  if (s == "downsample") return ViewKind::downsample;
  if (s == "general") return ViewKind::general;
  throw ConfigError("unknown view kind '" + s + "'");
}

namespace {

std::size_t map_rows(const ViewOperator::Map& map) {
  return std::visit(
      [](const auto& m) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, SparseRows>)
          return m.n_rows();
        else
          return m.rows();
      },
      map);
}

std::size_t map_cols(const ViewOperator::Map& map) {
  return std::visit(
      [](const auto& m) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, SparseRows>)
          return m.n_cols;
        else
          return m.cols();
      },
      map);
}

DenseMatrix map_dense(const ViewOperator::Map& map) {
  return std::visit(
      [](const auto& m) -> DenseMatrix {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, SparseRows>)
          return m.to_dense();
        else
          return m;
      },
      map);
}

}  // namespace

ViewOperator::ViewOperator(std::string id, ViewKind kind, ViewMeta meta, Map a, Map b)
    : id_(std::move(id)), kind_(kind), meta_(meta), a_(std::move(a)), b_(std::move(b)) {
  m_ = map_cols(a_);
  m_i_ = map_rows(a_);
  if (map_rows(b_) != m_ || map_cols(b_) != m_i_) {
    throw ShapeError("view operator '" + id_ + "': B must be " + std::to_string(m_) + "x" +
                     std::to_string(m_i_));
  }
  if (m_i_ > m_) throw ShapeError("view operator '" + id_ + "': view dimension exceeds full dimension");

  const DenseMatrix a_dense = map_dense(a_);
  if (!a_dense.all_finite() || !map_dense(b_).all_finite())
    throw DomainError("view operator '" + id_ + "' has non-finite entries");
  double total = 0.0;
  std::vector<int> used(m_, 0);
  disjoint_rows_ = true;
  for (std::size_t r = 0; r < m_i_; ++r) {
    for (std::size_t c = 0; c < m_; ++c) {
      const double v = a_dense(r, c);
      if (v == 0.0) continue;
      total += v * v;
      if (used[c]++ > 0) disjoint_rows_ = false;
    }
  }
  noise_scale_ = m_i_ > 0 ? std::sqrt(total / static_cast<double>(m_i_)) : 0.0;
}

GridShape ViewOperator::view_grid() const {
  switch (kind_) {
    case ViewKind::patch: return {meta_.patch_h, meta_.patch_w, meta_.grid.channels};
    case ViewKind::downsample:
      return {meta_.grid.height / meta_.factor, meta_.grid.width / meta_.factor, meta_.grid.channels};
    case ViewKind::general: return {1, static_cast<int>(m_i_), 1};
  }
  return {};
}

void ViewOperator::apply_A(std::span<const double> x, std::span<double> out) const {
  if (x.size() != m_ || out.size() != m_i_) {
    throw ShapeError("apply_A on '" + id_ + "': expected input of size " + std::to_string(m_) +
                     ", got " + std::to_string(x.size()));
  }
  std::visit(
      [&](const auto& a) {
        if constexpr (std::is_same_v<std::decay_t<decltype(a)>, SparseRows>) {
          if (kind_ == ViewKind::downsample) a.apply_averaging(x, out);
          else a.apply(x, out);
        } else {
          for (std::size_t r = 0; r < a.rows(); ++r) out[r] = dot(a.row(r), x);
        }
      },
      a_);
}

Vec ViewOperator::apply_A(std::span<const double> x) const {
  Vec out(m_i_);
  apply_A(x, out);
  return out;
}

void ViewOperator::accumulate_B(std::span<const double> v, std::span<double> out, double scale) const {
  if (v.size() != m_i_ || out.size() != m_) {
    throw ShapeError("apply_B on '" + id_ + "': expected view vector of size " +
                     std::to_string(m_i_) + ", got " + std::to_string(v.size()));
  }
  std::visit(
      [&](const auto& b) {
        if constexpr (std::is_same_v<std::decay_t<decltype(b)>, SparseRows>) {
          for (std::size_t r = 0; r < b.n_rows(); ++r) {
            double s = 0.0;
            for (std::size_t k = b.row_ptr[r]; k < b.row_ptr[r + 1]; ++k) s += b.val[k] * v[b.col[k]];
            out[r] += scale * s;
          }
        } else {
          for (std::size_t r = 0; r < b.rows(); ++r) out[r] += scale * dot(b.row(r), v);
        }
      },
      b_);
}

Vec ViewOperator::apply_B(std::span<const double> v) const {
  Vec out(m_, 0.0);
  accumulate_B(v, out);
  return out;
}

DenseMatrix ViewOperator::dense_A() const { return map_dense(a_); }
DenseMatrix ViewOperator::dense_B() const { return map_dense(b_); }

ViewOperator make_patch_operator(const GridShape& grid, int origin_row, int origin_col, int patch_h,
                                 int patch_w) {
  if (grid.height <= 0 || grid.width <= 0 || grid.channels <= 0)
    throw ConfigError("grid dimensions must be positive");
  if (patch_h <= 0 || patch_w <= 0) throw RangeError("patch size must be positive");
  if (origin_row < 0 || origin_row + patch_h > grid.height) {
    throw RangeError("patch row range [" + std::to_string(origin_row) + ", " +
                     std::to_string(origin_row + patch_h) + ") exceeds grid height " +
                     std::to_string(grid.height) + " (origin_row=" + std::to_string(origin_row) + ")");
  }
  if (origin_col < 0 || origin_col + patch_w > grid.width) {
    throw RangeError("patch column range [" + std::to_string(origin_col) + ", " +
                     std::to_string(origin_col + patch_w) + ") exceeds grid width " +
                     std::to_string(grid.width) + " (origin_col=" + std::to_string(origin_col) + ")");
  }
  const std::size_t m = grid.size();
  const std::size_t m_i = static_cast<std::size_t>(patch_h) * patch_w * grid.channels;
  SparseRows a;
  a.n_cols = m;
  std::vector<std::size_t> source;  // source[view index] = flat index
  source.reserve(m_i);
  const double one = 1.0;
  for (int r = 0; r < patch_h; ++r)
    for (int c = 0; c < patch_w; ++c)
      for (int ch = 0; ch < grid.channels; ++ch) {
        const std::size_t idx = grid.index(origin_row + r, origin_col + c, ch);
        source.push_back(idx);
        a.push_row(std::span<const std::size_t>(&idx, 1), std::span<const double>(&one, 1));
      }
  // B = A^T: zero-fill embedding.
  std::vector<std::ptrdiff_t> inverse(m, -1);
  for (std::size_t v = 0; v < m_i; ++v) inverse[source[v]] = static_cast<std::ptrdiff_t>(v);
  SparseRows b;
  b.n_cols = m_i;
  for (std::size_t i = 0; i < m; ++i) {
    if (inverse[i] < 0) {
      b.push_row({}, {});
    } else {
      const auto v = static_cast<std::size_t>(inverse[i]);
      b.push_row(std::span<const std::size_t>(&v, 1), std::span<const double>(&one, 1));
    }
  }
  ViewMeta meta{grid, origin_row, origin_col, patch_h, patch_w, 0};
  std::string id = "patch_r" + std::to_string(origin_row) + "_c" + std::to_string(origin_col) + "_" +
                   std::to_string(patch_h) + "x" + std::to_string(patch_w);
  return ViewOperator(std::move(id), ViewKind::patch, meta, std::move(a), std::move(b));
}

ViewOperator make_downsample_operator(const GridShape& grid, int factor) {
  if (grid.height <= 0 || grid.width <= 0 || grid.channels <= 0)
    throw ConfigError("grid dimensions must be positive");
  if (factor <= 0 || grid.height % factor != 0 || grid.width % factor != 0) {
    throw ConfigError("downsample factor " + std::to_string(factor) + " does not divide grid " +
                      std::to_string(grid.height) + "x" + std::to_string(grid.width));
  }
  const int vh = grid.height / factor;
  const int vw = grid.width / factor;
  const GridShape view{vh, vw, grid.channels};
  const double w = 1.0 / (static_cast<double>(factor) * factor);
  SparseRows a;
  a.n_cols = grid.size();
  std::vector<std::size_t> cols;
  std::vector<double> vals;
  for (int r = 0; r < vh; ++r)
    for (int c = 0; c < vw; ++c)
      for (int ch = 0; ch < grid.channels; ++ch) {
        cols.clear();
        vals.clear();
        for (int dr = 0; dr < factor; ++dr)
          for (int dc = 0; dc < factor; ++dc) {
            cols.push_back(grid.index(r * factor + dr, c * factor + dc, ch));
            vals.push_back(w);
          }
        std::sort(cols.begin(), cols.end());
        a.push_row(cols, vals);
      }
  // Nearest-neighbour upsampling; each pooled value is copied to its block,
  // so A B = I on the view space.
  SparseRows b;
  b.n_cols = view.size();
  const double one = 1.0;
  for (int r = 0; r < grid.height; ++r)
    for (int c = 0; c < grid.width; ++c)
      for (int ch = 0; ch < grid.channels; ++ch) {
        const std::size_t v = view.index(r / factor, c / factor, ch);
        b.push_row(std::span<const std::size_t>(&v, 1), std::span<const double>(&one, 1));
      }
  ViewMeta meta{grid, 0, 0, 0, 0, factor};
  return ViewOperator("downsample_x" + std::to_string(factor), ViewKind::downsample, meta,
                      std::move(a), std::move(b));
}

ViewOperator make_general_operator(std::string id, DenseMatrix a, DenseMatrix b) {
  ViewMeta meta;
  meta.grid = GridShape{1, static_cast<int>(a.cols()), 1};
  return ViewOperator(std::move(id), ViewKind::general, meta, std::move(a), std::move(b));
}

std::vector<ViewOperator> make_patch_tiling(const GridShape& grid, int patch_h, int patch_w) {
  if (patch_h <= 0 || patch_w <= 0 || grid.height % patch_h != 0 || grid.width % patch_w != 0)
    throw ConfigError("patch size does not tile the grid");
  std::vector<ViewOperator> ops;
  for (int r = 0; r < grid.height; r += patch_h)
    for (int c = 0; c < grid.width; c += patch_w) ops.push_back(make_patch_operator(grid, r, c, patch_h, patch_w));
  return ops;
}

nlohmann::json to_json(const GridShape& grid) {
  return {{"height", grid.height}, {"width", grid.width}, {"channels", grid.channels}};
}

GridShape grid_from_json(const nlohmann::json& j) {
  require_known_keys(j, {"height", "width", "channels"}, "grid");
  return {j.at("height").get<int>(), j.at("width").get<int>(), j.value("channels", 1)};
}

nlohmann::json to_json(const ViewOperator& op) {
  nlohmann::json meta = nlohmann::json::object();
  const auto& md = op.meta();
  switch (op.kind()) {
    case ViewKind::patch:
      meta = {{"grid", to_json(md.grid)},
              {"origin_row", md.origin_row},
              {"origin_col", md.origin_col},
              {"patch_h", md.patch_h},
              {"patch_w", md.patch_w}};
      break;
    case ViewKind::downsample: meta = {{"grid", to_json(md.grid)}, {"factor", md.factor}}; break;
    case ViewKind::general: break;
  }
  nlohmann::json j = {{"id", op.id()},
                      {"kind", to_string(op.kind())},
                      {"meta", meta},
                      {"m", op.full_dim()},
                      {"m_i", op.view_dim()}};
  if (op.kind() == ViewKind::general) {
    const DenseMatrix a = op.dense_A();
    const DenseMatrix b = op.dense_B();
    j["A"] = std::vector<double>(a.values().begin(), a.values().end());
    j["B"] = std::vector<double>(b.values().begin(), b.values().end());
  }
  return j;
}

ViewOperator view_operator_from_json(const nlohmann::json& j) {
  try {
    const ViewKind kind = view_kind_from_string(j.at("kind").get<std::string>());
    const auto m = j.at("m").get<std::size_t>();
    const auto m_i = j.at("m_i").get<std::size_t>();
    const auto& meta = j.at("meta");
    std::optional<ViewOperator> op;
    switch (kind) {
      case ViewKind::patch:
        op.emplace(make_patch_operator(grid_from_json(meta.at("grid")), meta.at("origin_row").get<int>(),
                                       meta.at("origin_col").get<int>(), meta.at("patch_h").get<int>(),
                                       meta.at("patch_w").get<int>()));
        break;
      case ViewKind::downsample:
        op.emplace(make_downsample_operator(grid_from_json(meta.at("grid")), meta.at("factor").get<int>()));
        break;
      case ViewKind::general:
        op.emplace(make_general_operator(j.at("id").get<std::string>(),
                                         DenseMatrix(m_i, m, j.at("A").get<std::vector<double>>()),
                                         DenseMatrix(m, m_i, j.at("B").get<std::vector<double>>())));
        break;
    }
    if (op->full_dim() != m || op->view_dim() != m_i || op->id() != j.at("id").get<std::string>())
      throw ConfigError("view operator JSON is inconsistent with its kind parameters");
    return std::move(*op);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed view operator JSON: ") + e.what());
  }
}

}  // namespace bdl
