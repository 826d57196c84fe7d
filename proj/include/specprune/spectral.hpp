#pragma once

#include <vector>

#include "specprune/covariance.hpp"

namespace specprune {

/// Degrees of freedom N(lambda) = Tr[S (S + lambda I)^-1] = sum_j mu_j / (mu_j + lambda).
/// lambda = 0 returns the numerical rank.
double dof(const LayerCovariance& cov, double lambda);

/// Count of eigenvalues above 1e-12 * largest.
std::size_t numerical_rank(const LayerCovariance& cov);

/// Output-aware degrees of freedom Tr[Z S (S + lambda I)^-1 Z^T]. At
/// lambda = 0 the projector onto the range of S is used.
double dof_output(const LayerCovariance& cov, const Matrix& z, double lambda);

/// Normalised diagonal of S (S + lambda I)^-1; entries sum to one.
/// Zero-variance nodes get exactly zero and are listed in `excluded`.
struct LeverageScores {
  std::size_t layer = 0;
  double lambda = 0.0;
  Vector scores;
  IndexList excluded;
};
LeverageScores leverage(const LayerCovariance& cov, double lambda);

/// Smallest lambda >= 0 with m_sharp >= 5 N(lambda) log(80 N(lambda)),
/// found by bisection on log(lambda) to relative tolerance 1e-6. Returns 0
/// when the condition already holds at lambda = 0.
double lambda_for_width(const LayerCovariance& cov, std::size_t m_sharp);

/// ceil(5 N(lambda) log(80 N(lambda))) clamped to [1, m].
std::size_t width_for_lambda(const LayerCovariance& cov, double lambda);

/// True when m_sharp >= 5 N(lambda) log(80 N(lambda)).
bool width_condition_holds(const LayerCovariance& cov, std::size_t m_sharp, double lambda);

/// N_l(c Tr S_l) * N_{l+1}(c Tr S_{l+1}) * k^2.
double intrinsic_dim(const LayerCovariance& cov, const LayerCovariance& next, std::size_t kernel,
                     double trace_coef = 1e-3);

struct DofProfileRow {
  double lambda = 0.0;
  double dof = 0.0;
  std::size_t width = 0;
};
struct DofProfile {
  std::size_t layer = 0;
  std::size_t rank = 0;
  std::vector<DofProfileRow> rows;
};
/// Log-spaced grid from hi_coef * trace down to lo_coef * trace.
DofProfile dof_profile(const LayerCovariance& cov, std::size_t points = 20, double lo_coef = 1e-8,
                       double hi_coef = 1e2);
CsvWriter dof_profile_csv(const DofProfile& profile);

}  // namespace specprune
