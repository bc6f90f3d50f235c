#include "mbf/linalg.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mbf::linalg {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

void require_square(const Matrix& a, const char* op) {
  if (!a.square()) throw ShapeError(std::string(op) + ": expected square matrix, got " + shape_str(a));
}

void require_finite(const Matrix& a, const char* op) {
  if (!all_finite(a.values())) throw InvalidInputError(std::string(op) + ": non-finite entry");
}

// In-place lower Cholesky factor; returns false if a pivot is not positive.
bool cholesky_in_place(Matrix& a) {
  const std::size_t n = a.rows();
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    const double* rj = &a(j, 0);
    for (std::size_t k = 0; k < j; ++k) d -= rj[k] * rj[k];
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      const double* ri = &a(i, 0);
      for (std::size_t k = 0; k < j; ++k) s -= ri[k] * rj[k];
      a(i, j) = s / ljj;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = 0.0;
  return true;
}

// Inverse of a lower-triangular matrix with positive diagonal.
Matrix lower_inverse(const Matrix& l) {
  const std::size_t n = l.rows();
  Matrix inv(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    inv(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s += l(i, k) * inv(k, j);
      inv(i, j) = -s / l(i, i);
    }
  }
  return inv;
}

void symmetrize(Matrix& a) {
  const std::size_t n = a.rows();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = 0.5 * (a(i, j) + a(j, i));
      a(i, j) = v;
      a(j, i) = v;
    }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
  if (!all_finite(data_)) throw InvalidInputError("Matrix: non-finite entry");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
  if (!all_finite(data_)) throw InvalidInputError("Matrix: non-finite entry");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> d) {
  Matrix m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += other.data_[k];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "operator-=");
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= other.data_[k];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b, bool trans_a, bool trans_b) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ (" + shape_str(a) + (trans_a ? "^T" : "") +
                     " * " + shape_str(b) + (trans_b ? "^T" : "") + ")");
  }
  Matrix c(m, n);
  if (m == 0 || n == 0 || k == 0) return c;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a.data(),
              static_cast<int>(a.cols()), b.data(), static_cast<int>(b.cols()), 0.0, c.data(),
              static_cast<int>(n));
  return c;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw ShapeError("matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    y[i] = std::inner_product(r.begin(), r.end(), x.begin(), 0.0);
  }
  return y;
}

Matrix outer(std::span<const double> u, std::span<const double> v) {
  Matrix m(u.size(), v.size());
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) m(i, j) = u[i] * v[j];
  return m;
}

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix k(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      for (std::size_t p = 0; p < b.rows(); ++p)
        for (std::size_t q = 0; q < b.cols(); ++q)
          k(i * b.rows() + p, j * b.cols() + q) = a(i, j) * b(p, q);
  return k;
}

double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
  return m;
}

double trace(const Matrix& a) {
  require_square(a, "trace");
  double t = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) t += a(i, i);
  return t;
}

double spectral_norm(const Matrix& a) {
  if (a.empty()) return 0.0;
  const Matrix gram = a.rows() <= a.cols() ? matmul(a, a, false, true) : matmul(a, a, true, false);
  const Spectrum s = sym_eig(gram);
  return std::sqrt(std::max(0.0, s.eigenvalues.back()));
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void require_symmetric(const Matrix& a, double tol) {
  require_square(a, "require_symmetric");
  const double bound = tol * std::max(1.0, max_abs(a));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      if (std::abs(a(i, j) - a(j, i)) > bound) {
        std::ostringstream os;
        os << "matrix not symmetric at (" << i << "," << j << "): " << a(i, j) << " vs " << a(j, i);
        throw SymmetryError(os.str());
      }
}

Matrix spd_inverse(const Matrix& a) {
  require_square(a, "spd_inverse");
  require_finite(a, "spd_inverse");
  const std::size_t n = a.rows();
  if (n == 0) return {};
  Matrix l = a;
  if (!cholesky_in_place(l)) {
    l = a;
    const double jitter = 1e-12 * std::abs(trace(a)) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) l(i, i) += jitter;
    if (!cholesky_in_place(l)) {
      throw FactorizationError("spd_inverse: matrix is not positive definite (jitter retry failed)");
    }
  }
  const Matrix l_inv = lower_inverse(l);
  Matrix inv = matmul(l_inv, l_inv, true, false);
  symmetrize(inv);
  return inv;
}

Matrix damped_inverse(const Matrix& g, double lambda) {
  require_square(g, "damped_inverse");
  require_finite(g, "damped_inverse");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) {
    throw InvalidInputError("damped_inverse: damping must be positive and finite");
  }
  require_symmetric(g);
  Matrix shifted = g;
  for (std::size_t i = 0; i < g.rows(); ++i) shifted(i, i) += lambda;
  return spd_inverse(shifted);
}

Spectrum sym_eig(const Matrix& g) {
  require_square(g, "sym_eig");
  require_finite(g, "sym_eig");
  require_symmetric(g);
  const std::size_t n = g.rows();
  Matrix a = g;
  Matrix v = Matrix::identity(n);

  const double scale = frobenius_norm(a);
  for (int sweep = 0; sweep < 100 && n > 1; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off <= (1e-17 * scale) * (1e-17 * scale) || off == 0.0) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        // Skip rotations that cannot change the diagonal in floating point.
        if (std::abs(apq) < 1e-18 * (std::abs(app) + std::abs(aqq)) && sweep > 3) {
          a(p, q) = a(q, p) = 0.0;
          continue;
        }
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          if (r == p || r == q) continue;
          const double arp = a(r, p);
          const double arq = a(r, q);
          a(r, p) = a(p, r) = c * arp - s * arq;
          a(r, q) = a(q, r) = s * arp + c * arq;
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double vrp = v(r, p);
          const double vrq = v(r, q);
          v(r, p) = c * vrp - s * vrq;
          v(r, q) = s * vrp + c * vrq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });

  Spectrum out;
  out.eigenvalues.resize(n);
  out.eigenvectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.eigenvalues[k] = a(order[k], order[k]);
    for (std::size_t r = 0; r < n; ++r) out.eigenvectors(r, k) = v(r, order[k]);
  }
  return out;
}

double min_eigenvalue(const Matrix& g) {
  const Spectrum s = sym_eig(g);
  if (s.eigenvalues.empty()) throw ShapeError("min_eigenvalue: empty matrix");
  return s.eigenvalues.front();
}

Matrix inverse_pth_root(const Matrix& g, int p, double eps) {
  require_square(g, "inverse_pth_root");
  require_finite(g, "inverse_pth_root");
  if (p != 2 && p != 4 && p != 8) throw InvalidInputError("inverse_pth_root: p must be 2, 4 or 8");
  if (!(eps > 0.0)) throw InvalidInputError("inverse_pth_root: eps must be positive");
  require_symmetric(g);

  const std::size_t n = g.rows();
  if (n == 0) return {};
  const Matrix eye = Matrix::identity(n);
  Matrix a = g;
  for (std::size_t i = 0; i < n; ++i) a(i, i) += eps;

  // Upper bound on the spectral radius; keeps z*A inside the convergence region.
  double row_bound = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double x : a.row(i)) s += std::abs(x);
    row_bound = std::max(row_bound, s);
  }
  const double norm_bound = std::min(row_bound, frobenius_norm(a));
  const double pd = static_cast<double>(p);
  const double z = (1.0 + pd) / (2.0 * norm_bound);

  Matrix x = eye * std::pow(z, 1.0 / pd);
  Matrix m = a * z;
  double residual = max_abs_diff(m, eye);
  Matrix best_x = x;
  double best_residual = residual;

  for (int it = 0; it < kRootMaxIterations && residual > kRootTolerance; ++it) {
    // T = (1 + 1/p) I - M / p
    Matrix t = m * (-1.0 / pd);
    for (std::size_t i = 0; i < n; ++i) t(i, i) += 1.0 + 1.0 / pd;
    x = matmul(x, t);
    Matrix tp = t;
    for (int k = 1; k < p; k *= 2) tp = matmul(tp, tp);
    m = matmul(tp, m);
    symmetrize(m);
    const double next = max_abs_diff(m, eye);
    if (!std::isfinite(next)) break;
    if (next < best_residual) {
      best_residual = next;
      best_x = x;
    } else if (next > 1.2 * best_residual && best_residual < 1e-6) {
      // round-off floor reached
      break;
    }
    residual = next;
  }

  if (best_residual > 1e-8) {
    std::ostringstream os;
    os << "inverse_pth_root: coupled Newton did not converge (p=" << p << ", d=" << n
       << ", residual=" << best_residual << ")";
    throw ConvergenceError(os.str(), best_residual);
  }
  symmetrize(best_x);
  return best_x;
}

}  // namespace mbf::linalg
