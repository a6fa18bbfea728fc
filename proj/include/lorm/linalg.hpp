#pragma once

#include <cmath>
#include <cstddef>
#include <algorithm>
#include <initializer_list>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lorm/error.hpp"
#include "lorm/rng.hpp"

namespace lorm {

/// Dense row-major matrix of doubles. Column vectors are n x 1 matrices.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    check_finite(fill);
  }
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                       shape_string(rows_, cols_));
    }
    ensure_finite();
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged initializer for matrix");
      data_.insert(data_.end(), r.begin(), r.end());
    }
    ensure_finite();
  }

  static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix column(std::vector<double> values) {
    const auto n = values.size();
    return Matrix(n, 1, std::move(values));
  }
  static Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (auto& v : m.data_) v = rng.normal(0.0, stddev);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  std::string shape() const { return shape_string(rows_, cols_); }
  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool operator==(const Matrix& o) const = default;

  /// Throws DomainError if any entry is NaN or infinite.
  void ensure_finite() const {
    for (double v : data_) check_finite(v);
  }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

 private:
  static void check_finite(double v) {
    if (!std::isfinite(v)) throw DomainError("non-finite matrix entry");
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {
inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}
}  // namespace detail

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + a.shape() + " * " + b.shape());
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      auto brow = b.row(p);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aip * brow[j];
    }
  }
  c.ensure_finite();
  return c;
}

/// a * b^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: column counts differ " + a.shape() + " * (" + b.shape() + ")^T");
  }
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto br = b.row(j);
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += ar[p] * br[p];
      c(i, j) = s;
    }
  }
  c.ensure_finite();
  return c;
}

/// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: row counts differ (" + a.shape() + ")^T * " + b.shape());
  }
  Matrix c(a.cols(), b.cols());
  for (std::size_t p = 0; p < a.rows(); ++p) {
    auto ar = a.row(p);
    auto br = b.row(p);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double v = ar[i];
      if (v == 0.0) continue;
      auto out = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += v * br[j];
    }
  }
  c.ensure_finite();
  return c;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "add");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  c.ensure_finite();
  return c;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "subtract");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  c.ensure_finite();
  return c;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= s;
  c.ensure_finite();
  return c;
}

inline Matrix& operator+=(Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "add");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  a.ensure_finite();
  return a;
}

/// a += s * b
inline void axpy(double s, const Matrix& b, Matrix& a) {
  detail::require_same_shape(a, b, "axpy");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
  a.ensure_finite();
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "hadamard");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  c.ensure_finite();
  return c;
}

/// Multiplies row i of m by v[i]; v is a column vector with m.rows() entries.
inline Matrix scale_rows(const Matrix& v, const Matrix& m) {
  if (v.cols() != 1 || v.rows() != m.rows()) {
    throw ShapeError("scale_rows: vector " + v.shape() + " does not match rows of " + m.shape());
  }
  Matrix c = m;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (double& x : c.row(i)) x *= v[i];
  c.ensure_finite();
  return c;
}

inline double trace(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("trace of non-square " + a.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, i);
  return s;
}

inline double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// ||a - b||_F / max(||b||_F, tiny)
inline double relative_error(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "relative_error");
  double num = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) num += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(num) / std::max(frobenius_norm(b), 1e-300);
}

/// Columns [first, first + count) of m.
inline Matrix column_block(const Matrix& m, std::size_t first, std::size_t count) {
  if (first + count > m.cols()) throw ShapeError("column_block out of range for " + m.shape());
  Matrix out(m.rows(), count);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = m(i, first + j);
  return out;
}

inline Matrix gather_columns(const Matrix& m, std::span<const std::size_t> cols) {
  Matrix out(m.rows(), cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j] >= m.cols()) throw ShapeError("gather_columns index out of range for " + m.shape());
    for (std::size_t i = 0; i < m.rows(); ++i) out(i, j) = m(i, cols[j]);
  }
  return out;
}

inline Matrix hstack(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) throw ShapeError("hstack: row mismatch " + p.shape());
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p(i, j);
    off += p.cols();
  }
  return out;
}

inline Matrix vstack(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts[0].cols()) {
      throw ShapeError("vstack: column mismatch " + p.shape() + " vs " + parts[0].shape());
    }
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * parts[0].cols());
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Matrix(rows, parts[0].cols(), std::move(data));
}

/// Accumulated input second moment X X^T of one layer.
struct GramStat {
  Matrix gram;
  std::size_t samples = 0;
  bool diagonal_only = false;

  static GramStat zero(std::size_t k) { return {Matrix::zeros(k, k), 0, false}; }
  std::size_t dim() const noexcept { return gram.rows(); }
};

/// Returns stat with X X^T of the batch added; X is k x n, one column per sample.
inline GramStat gram_accumulate(const GramStat& stat, const Matrix& batch_inputs) {
  if (batch_inputs.rows() != stat.gram.rows()) {
    throw ShapeError("gram_accumulate: batch " + batch_inputs.shape() + " does not match gram " +
                     stat.gram.shape());
  }
  if (stat.diagonal_only) {
    throw DomainError("gram_accumulate: cannot accumulate into a diagonal-only stat");
  }
  GramStat out{stat.gram + matmul_nt(batch_inputs, batch_inputs),
               stat.samples + batch_inputs.cols(), false};
  return out;
}

/// Sum of stats over contributors; diagonal_only iff every input is.
inline GramStat gram_sum(std::span<const GramStat> stats) {
  if (stats.empty()) throw DomainError("gram_sum of empty list");
  GramStat out{Matrix::zeros(stats[0].dim(), stats[0].dim()), 0, true};
  for (const auto& s : stats) {
    if (s.dim() != out.dim()) {
      throw ShapeError("gram_sum: gram " + s.gram.shape() + " vs " + out.gram.shape());
    }
    out.gram += s.gram;
    out.samples += s.samples;
    out.diagonal_only = out.diagonal_only && s.diagonal_only;
  }
  return out;
}

/// Scales off-diagonal entries by gamma; gamma == 0 leaves only the diagonal.
inline GramStat decay_off_diagonal(const GramStat& stat, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) {
    throw DomainError("decay_off_diagonal: gamma " + std::to_string(gamma) + " outside [0,1]");
  }
  GramStat out = stat;
  const std::size_t k = stat.dim();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (i != j) out.gram(i, j) = gamma == 0.0 ? 0.0 : gamma * stat.gram(i, j);
  out.diagonal_only = stat.diagonal_only || gamma == 0.0;
  return out;
}

inline std::vector<double> gram_diagonal(const GramStat& stat) {
  std::vector<double> d(stat.dim());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = stat.gram(i, i);
  return d;
}

inline constexpr double kDefaultRidge = 1e-8;

/// Returns numerator * (denominator + ridge * mean_diag * I)^{-1} via a Cholesky
/// factorization of the (symmetric PSD) denominator. mean_diag = trace / k.
inline Matrix solve_right(const Matrix& numerator, const Matrix& denominator, double ridge) {
  const std::size_t k = denominator.rows();
  if (denominator.cols() != k) throw ShapeError("solve_right: non-square denominator " + denominator.shape());
  if (numerator.cols() != k) {
    throw ShapeError("solve_right: numerator " + numerator.shape() + " vs denominator " +
                     denominator.shape());
  }
  if (!(ridge >= 0.0)) throw DomainError("solve_right: negative ridge");

  Matrix l = denominator;
  const double shift = k == 0 ? 0.0 : ridge * trace(denominator) / static_cast<double>(k);
  double max_diag = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    l(i, i) += shift;
    max_diag = std::max(max_diag, std::abs(l(i, i)));
  }

  // In-place lower Cholesky factor.
  double min_pivot = std::numeric_limits<double>::infinity();
  double max_pivot = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    double d = l(j, j);
    for (std::size_t p = 0; p < j; ++p) d -= l(j, p) * l(j, p);
    min_pivot = std::min(min_pivot, d);
    max_pivot = std::max(max_pivot, d);
    if (!(d > 1e-13 * max_diag) || max_diag == 0.0) {
      const double ratio = max_pivot > 0.0 ? std::max(d, 0.0) / max_pivot : 0.0;
      std::ostringstream msg;
      msg << "solve_right: denominator " << denominator.shape() << " is singular after ridge "
          << ridge << " (pivot " << j << " = " << d << ", min/max pivot ratio " << ratio << ")";
      throw SingularError(msg.str(), ratio);
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < k; ++i) {
      double s = l(i, j);
      for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
      l(i, j) = s / ljj;
    }
  }

  // Each row x of the result solves (L L^T) x^T = n^T.
  Matrix out(numerator.rows(), k);
  std::vector<double> y(k);
  for (std::size_t r = 0; r < numerator.rows(); ++r) {
    auto n = numerator.row(r);
    for (std::size_t i = 0; i < k; ++i) {
      double s = n[i];
      for (std::size_t p = 0; p < i; ++p) s -= l(i, p) * y[p];
      y[i] = s / l(i, i);
    }
    auto x = out.row(r);
    for (std::size_t i = k; i-- > 0;) {
      double s = y[i];
      for (std::size_t p = i + 1; p < k; ++p) s -= l(p, i) * x[p];
      x[i] = s / l(i, i);
    }
  }
  out.ensure_finite();
  return out;
}

}  // namespace lorm
