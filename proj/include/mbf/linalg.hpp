#pragma once

// Dense symmetric linear algebra used by every preconditioner: a row-major
// double matrix, damped inversion, Jacobi eigensolver and coupled-Newton
// inverse p-th roots.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mbf::linalg {

using Vector = std::vector<double>;

class LinalgError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SymmetryError : public LinalgError {
 public:
  using LinalgError::LinalgError;
};

class InvalidInputError : public LinalgError {
 public:
  using LinalgError::LinalgError;
};

class ShapeError : public LinalgError {
 public:
  using LinalgError::LinalgError;
};

/// Cholesky failed even after one jitter retry.
class FactorizationError : public LinalgError {
 public:
  using LinalgError::LinalgError;
};

class ConvergenceError : public LinalgError {
 public:
  ConvergenceError(const std::string& what, double last_residual)
      : LinalgError(what), last_residual_(last_residual) {}
  double last_residual() const noexcept { return last_residual_; }

 private:
  double last_residual_;
};

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  /// Takes ownership of `data`; rejects wrong lengths and non-finite entries.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> d);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  Matrix transpose() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

/// C = op(A) * op(B); `trans_a`/`trans_b` select transposes.
Matrix matmul(const Matrix& a, const Matrix& b, bool trans_a = false, bool trans_b = false);
Vector matvec(const Matrix& a, std::span<const double> x);
Matrix outer(std::span<const double> u, std::span<const double> v);
Matrix kron(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
double trace(const Matrix& a);
/// Largest singular value.
double spectral_norm(const Matrix& a);
bool all_finite(std::span<const double> v);

/// Throws SymmetryError unless |a_ij - a_ji| <= tol * max(1, max|a|).
void require_symmetric(const Matrix& a, double tol = 1e-12);

/// Inverse of an SPD matrix through Cholesky. One retry with jitter
/// 1e-12 * trace/d on the diagonal before FactorizationError.
Matrix spd_inverse(const Matrix& a);

/// (G + lambda I)^{-1} for symmetric PSD G and lambda > 0.
Matrix damped_inverse(const Matrix& g, double lambda);

struct Spectrum {
  Vector eigenvalues;  // ascending
  Matrix eigenvectors; // column k pairs with eigenvalues[k]
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
Spectrum sym_eig(const Matrix& g);
double min_eigenvalue(const Matrix& g);

/// (G + eps I)^{-1/p} by the coupled Newton iteration.
/// p must be 2, 4 or 8; eps > 0.
Matrix inverse_pth_root(const Matrix& g, int p, double eps);

inline constexpr int kRootMaxIterations = 100;
inline constexpr double kRootTolerance = 1e-10;

}  // namespace mbf::linalg
