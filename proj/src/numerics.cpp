#include "specprune/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <unordered_set>

#include "specprune/error.hpp"

namespace specprune {

namespace {

double off_diagonal_sq(const Matrix& a) {
  double sum = 0.0;
  const Eigen::Index n = a.rows();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) sum += a(i, j) * a(i, j);
  return 2.0 * sum;
}

// Applies the rotation zeroing a(p,q) to both a and the accumulated basis v.
void rotate(Matrix& a, Matrix& v, Eigen::Index p, Eigen::Index q) {
  const double apq = a(p, q);
  const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
  const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
  const double c = 1.0 / std::sqrt(t * t + 1.0);
  const double s = t * c;

  const Eigen::Index n = a.rows();
  double* row_p = a.row(p).data();
  double* row_q = a.row(q).data();
  for (Eigen::Index k = 0; k < n; ++k) {
    if (k == p || k == q) continue;
    const double akp = row_p[k];
    const double akq = row_q[k];
    const double new_p = c * akp - s * akq;
    const double new_q = s * akp + c * akq;
    row_p[k] = new_p;
    row_q[k] = new_q;
    a(k, p) = new_p;
    a(k, q) = new_q;
  }
  a(p, p) -= t * apq;
  a(q, q) += t * apq;
  a(p, q) = 0.0;
  a(q, p) = 0.0;

  for (Eigen::Index k = 0; k < n; ++k) {
    const double vkp = v(k, p);
    const double vkq = v(k, q);
    v(k, p) = c * vkp - s * vkq;
    v(k, q) = s * vkp + c * vkq;
  }
}

}  // namespace

Matrix SymmetricSpectrum::reconstruct() const {
  return basis * eigenvalues.asDiagonal() * basis.transpose();
}

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw Error(ErrorCode::NonFinite, std::string(what) + " has non-finite entries");
}

double trace(const Matrix& m) {
  if (m.rows() != m.cols()) throw Error(ErrorCode::ShapeMismatch, "trace of non-square matrix");
  return m.trace();
}

IndexList iota_indices(std::size_t n) {
  IndexList out(n);
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

SymmetricSpectrum sym_eig(const Matrix& m, const EigOptions& options) {
  if (m.rows() != m.cols()) throw Error(ErrorCode::ShapeMismatch, "sym_eig needs a square matrix");
  require_finite(m, "sym_eig input");
  const Eigen::Index n = m.rows();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      if (std::abs(m(i, j) - m(j, i)) > 1e-10)
        throw Error(ErrorCode::NonSymmetric, "entry (" + std::to_string(i) + "," + std::to_string(j) + ")");

  Matrix a = 0.5 * (m + m.transpose());
  Matrix v = Matrix::Identity(n, n);
  const double norm_sq = a.squaredNorm();
  const double stop = norm_sq * 1e-32;

  for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
    const double off = off_diagonal_sq(a);
    if (off <= stop || off == 0.0) break;
    // Early sweeps skip elements below the mean off-diagonal magnitude.
    const double threshold = sweep < 3 ? 0.2 * std::sqrt(off) / static_cast<double>(n * n) : 0.0;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double g = 100.0 * std::abs(apq);
        if (sweep > 3 && std::abs(a(p, p)) + g == std::abs(a(p, p)) &&
            std::abs(a(q, q)) + g == std::abs(a(q, q))) {
          a(p, q) = 0.0;
          a(q, p) = 0.0;
          continue;
        }
        if (std::abs(apq) <= threshold) continue;
        rotate(a, v, p, q);
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) { return a(x, x) > a(y, y); });

  SymmetricSpectrum out;
  out.eigenvalues.resize(n);
  out.basis.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    out.eigenvalues(k) = a(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(k)]);
    out.basis.col(k) = v.col(order[static_cast<std::size_t>(k)]);
  }

  if (options.require_psd && n > 0) {
    const double tol = 1e-10 * std::sqrt(norm_sq);
    for (Eigen::Index k = 0; k < n; ++k) {
      double& mu = out.eigenvalues(k);
      if (mu < -tol)
        throw Error(ErrorCode::IndefiniteBeyondTolerance, "eigenvalue " + std::to_string(mu));
      if (mu < 0.0) mu = 0.0;
    }
  }
  return out;
}

Matrix psd_solve(const Matrix& m, const Vector& ridge, const Matrix& rhs) {
  if (m.rows() != m.cols()) throw Error(ErrorCode::ShapeMismatch, "psd_solve needs a square matrix");
  if (ridge.size() != m.rows()) throw Error(ErrorCode::ShapeMismatch, "ridge length differs from matrix size");
  if (rhs.rows() != m.rows()) throw Error(ErrorCode::ShapeMismatch, "rhs rows differ from matrix size");
  if ((ridge.array() < 0.0).any()) throw Error(ErrorCode::InvalidArgument, "ridge must be nonnegative");
  if (m.rows() == 0) return Matrix(0, rhs.cols());

  Matrix a = m;
  a.diagonal() += ridge;
  const double tr = a.trace();
  const auto spectrum = sym_eig(a, {.require_psd = false});
  const double smallest = spectrum.eigenvalues(spectrum.eigenvalues.size() - 1);
  if (!(tr > 0.0) || smallest < 1e-12 * tr)
    throw Error(ErrorCode::Singular, "smallest eigenvalue " + std::to_string(smallest) + " vs trace " +
                                         std::to_string(tr));

  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) throw Error(ErrorCode::Singular, "Cholesky factorization failed");
  Matrix x = llt.solve(rhs);
  const Matrix residual = rhs - a * x;
  x += llt.solve(residual);
  return x;
}

Matrix submatrix(const Matrix& m, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  auto check = [](std::span<const std::size_t> idx, Eigen::Index limit, const char* axis) {
    std::unordered_set<std::size_t> seen;
    for (std::size_t i : idx) {
      if (i >= static_cast<std::size_t>(limit))
        throw Error(ErrorCode::IndexOutOfRange, std::string(axis) + " index " + std::to_string(i));
      if (!seen.insert(i).second)
        throw Error(ErrorCode::DuplicateIndex, std::string(axis) + " index " + std::to_string(i));
    }
  };
  check(rows, m.rows(), "row");
  check(cols, m.cols(), "column");

  Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = 0; b < cols.size(); ++b)
      out(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          m(static_cast<Eigen::Index>(rows[a]), static_cast<Eigen::Index>(cols[b]));
  return out;
}

Matrix psd_pinv(const Matrix& m, double rel_cutoff) {
  if (m.rows() == 0) return Matrix(0, 0);
  const auto spectrum = sym_eig(m);
  const double cutoff = rel_cutoff * std::max(spectrum.eigenvalues(0), 0.0);
  Vector inv = Vector::Zero(spectrum.eigenvalues.size());
  for (Eigen::Index k = 0; k < inv.size(); ++k)
    if (spectrum.eigenvalues(k) > cutoff && spectrum.eigenvalues(k) > 0.0) inv(k) = 1.0 / spectrum.eigenvalues(k);
  return spectrum.basis * inv.asDiagonal() * spectrum.basis.transpose();
}

}  // namespace specprune
