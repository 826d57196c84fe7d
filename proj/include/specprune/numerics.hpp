#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace specprune {

/// Dense 64-bit row-major matrix; the storage type for covariances, weights
/// and reconstruction matrices.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using IndexList = std::vector<std::size_t>;

/// Eigendecomposition of a symmetric matrix. Eigenvalues are sorted in
/// descending order; column k of `basis` is the eigenvector for eigenvalue k.
struct SymmetricSpectrum {
  Vector eigenvalues;
  Matrix basis;

  Matrix reconstruct() const;
  std::size_t size() const { return static_cast<std::size_t>(eigenvalues.size()); }
};

struct EigOptions {
  /// Reject eigenvalues below -1e-10 * ||m||_F and clamp the remaining
  /// small negatives to zero.
  bool require_psd = true;
  int max_sweeps = 100;
};

/// Cyclic Jacobi eigendecomposition.
SymmetricSpectrum sym_eig(const Matrix& m, const EigOptions& options = {});

/// Solves (m + diag(ridge)) X = rhs for symmetric PSD m.
/// Throws Singular when the smallest eigenvalue of m + diag(ridge) falls
/// below 1e-12 * its trace.
Matrix psd_solve(const Matrix& m, const Vector& ridge, const Matrix& rhs);

/// m[rows, cols]. Indices must be in range and free of duplicates.
Matrix submatrix(const Matrix& m, std::span<const std::size_t> rows,
                 std::span<const std::size_t> cols);

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix; eigenvalues at or
/// below rel_cutoff * max eigenvalue are treated as zero.
Matrix psd_pinv(const Matrix& m, double rel_cutoff = 1e-12);

double trace(const Matrix& m);

/// Throws NonFinite if any entry is NaN or infinite.
void require_finite(const Matrix& m, const char* what);

IndexList iota_indices(std::size_t n);

}  // namespace specprune
