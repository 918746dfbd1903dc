#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace bdl {

using Vec = std::vector<double>;

struct GridShape {
  int height = 1;
  int width = 1;
  int channels = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
           static_cast<std::size_t>(channels);
  }
  // Flat row-major index, channels interleaved.
  std::size_t index(int row, int col, int channel = 0) const {
    return (static_cast<std::size_t>(row) * width + col) * channels + channel;
  }
  bool operator==(const GridShape&) const = default;
};

// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static DenseMatrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }

  DenseMatrix transposed() const;
  bool all_finite() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

Vec matvec(const DenseMatrix& a, std::span<const double> x);
Vec matvec_transposed(const DenseMatrix& a, std::span<const double> x);
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
// a^T a
DenseMatrix gram(const DenseMatrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

// Lower Cholesky factor of a symmetric positive definite matrix.
class Cholesky {
 public:
  explicit Cholesky(const DenseMatrix& spd);

  Vec solve(std::span<const double> rhs) const;
  // Solves L y = rhs only.
  Vec solve_lower(std::span<const double> rhs) const;
  double log_det() const;
  const DenseMatrix& lower() const { return lower_; }

 private:
  DenseMatrix lower_;
};

// Solves (gram + ridge I) w = rhs.
Vec solve_normal_equations(const DenseMatrix& gram, std::span<const double> rhs, double ridge);

// argmin ||M w - y||^2 + ridge ||w||^2 via Cholesky of the normal equations.
Vec solve_least_squares(const DenseMatrix& m, std::span<const double> y, double ridge);

// Compressed sparse rows; used for selection and pooling maps.
struct SparseRows {
  std::size_t n_cols = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<std::size_t> col;
  std::vector<double> val;

  std::size_t n_rows() const { return row_ptr.size() - 1; }
  void push_row(std::span<const std::size_t> cols, std::span<const double> vals);
  void apply(std::span<const double> x, std::span<double> out) const;
  // Same map for rows whose weights sum to one, evaluated as a shifted mean.
  void apply_averaging(std::span<const double> x, std::span<double> out) const;
  DenseMatrix to_dense() const;
};

enum class ViewKind { patch, downsample, general };

std::string to_string(ViewKind kind);
ViewKind view_kind_from_string(const std::string& s);

struct ViewMeta {
  GridShape grid;
  int origin_row = 0;
  int origin_col = 0;
  int patch_h = 0;
  int patch_w = 0;
  int factor = 0;
};

// A partial view: projection A (R^m -> R^{m_i}) and back-combiner
// B (R^{m_i} -> R^m). Immutable after construction.
class ViewOperator {
 public:
  using Map = std::variant<SparseRows, DenseMatrix>;

  ViewOperator(std::string id, ViewKind kind, ViewMeta meta, Map a, Map b);

  const std::string& id() const { return id_; }
  ViewKind kind() const { return kind_; }
  const ViewMeta& meta() const { return meta_; }
  std::size_t full_dim() const { return m_; }
  std::size_t view_dim() const { return m_i_; }
  // Shape of the view space, for kinds that have one.
  GridShape view_grid() const;

  Vec apply_A(std::span<const double> x) const;
  Vec apply_B(std::span<const double> v) const;
  void apply_A(std::span<const double> x, std::span<double> out) const;
  // out += B v
  void accumulate_B(std::span<const double> v, std::span<double> out, double scale = 1.0) const;

  DenseMatrix dense_A() const;
  DenseMatrix dense_B() const;

  // RMS row norm of A: std of A*eps per view coordinate for eps ~ N(0, I).
  // Exact view-space noise level when A A^T is a multiple of the identity.
  double noise_scale() const { return noise_scale_; }
  // True when no two rows of A share a column (A diag A^T stays diagonal).
  bool disjoint_rows() const { return disjoint_rows_; }

 private:
  std::string id_;
  ViewKind kind_;
  ViewMeta meta_;
  Map a_;
  Map b_;
  std::size_t m_ = 0;
  std::size_t m_i_ = 0;
  double noise_scale_ = 1.0;
  bool disjoint_rows_ = false;
};

ViewOperator make_patch_operator(const GridShape& grid, int origin_row, int origin_col, int patch_h,
                                 int patch_w);
ViewOperator make_downsample_operator(const GridShape& grid, int factor);
ViewOperator make_general_operator(std::string id, DenseMatrix a, DenseMatrix b);

// All non-overlapping patch operators of the given size, row-major order.
std::vector<ViewOperator> make_patch_tiling(const GridShape& grid, int patch_h, int patch_w);

inline Vec apply_A(const ViewOperator& op, std::span<const double> x) { return op.apply_A(x); }
inline Vec apply_B(const ViewOperator& op, std::span<const double> v) { return op.apply_B(v); }

nlohmann::json to_json(const ViewOperator& op);
ViewOperator view_operator_from_json(const nlohmann::json& j);

nlohmann::json to_json(const GridShape& grid);
GridShape grid_from_json(const nlohmann::json& j);

}  // namespace bdl
