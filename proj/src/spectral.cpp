#include "specprune/spectral.hpp"

#include <algorithm>
#include <cmath>

#include "specprune/error.hpp"

namespace specprune {

namespace {

void require_lambda(double lambda) {
  if (!(lambda >= 0.0)) throw Error(ErrorCode::NegativeLambda, "lambda = " + format_double(lambda));
}

double rank_cutoff(const SymmetricSpectrum& s) {
  return s.size() == 0 ? 0.0 : 1e-12 * std::max(s.eigenvalues(0), 0.0);
}

// Spectral filter mu / (mu + lambda); at lambda = 0 the range projector.
Vector filter(const SymmetricSpectrum& s, double lambda) {
  const double cutoff = rank_cutoff(s);
  Vector f(s.eigenvalues.size());
  for (Eigen::Index k = 0; k < f.size(); ++k) {
    const double mu = std::max(s.eigenvalues(k), 0.0);
    if (lambda == 0.0)
      f(k) = mu > cutoff && mu > 0.0 ? 1.0 : 0.0;
    else
      f(k) = mu / (mu + lambda);
  }
  return f;
}

double width_requirement(double n_hat) { return n_hat > 0.0 ? 5.0 * n_hat * std::log(80.0 * n_hat) : 0.0; }

}  // namespace

std::size_t numerical_rank(const LayerCovariance& cov) {
  const auto& s = cov.spectrum();
  const double cutoff = rank_cutoff(s);
  std::size_t rank = 0;
  for (Eigen::Index k = 0; k < s.eigenvalues.size(); ++k)
    if (s.eigenvalues(k) > cutoff && s.eigenvalues(k) > 0.0) ++rank;
  return rank;
}

double dof(const LayerCovariance& cov, double lambda) {
  require_lambda(lambda);
  if (lambda == 0.0) return static_cast<double>(numerical_rank(cov));
  return filter(cov.spectrum(), lambda).sum();
}

double dof_output(const LayerCovariance& cov, const Matrix& z, double lambda) {
  require_lambda(lambda);
  if (static_cast<std::size_t>(z.cols()) != cov.dim())
    throw Error(ErrorCode::ShapeMismatch, "z has " + std::to_string(z.cols()) + " columns, covariance dim " +
                                              std::to_string(cov.dim()));
  const auto& s = cov.spectrum();
  const Matrix projected = z * s.basis;  // column k: Z u_k
  const Vector f = filter(s, lambda);
  return (projected.colwise().squaredNorm().transpose().array() * f.array()).sum();
}

LeverageScores leverage(const LayerCovariance& cov, double lambda) {
  require_lambda(lambda);
  const auto& s = cov.spectrum();
  const Vector f = filter(s, lambda);
  // diag(U F U^T)_j = sum_k U_jk^2 f_k
  Vector diag = s.basis.array().square().matrix() * f;

  LeverageScores out;
  out.layer = cov.layer();
  out.lambda = lambda;
  const double tr = cov.trace();
  for (Eigen::Index j = 0; j < diag.size(); ++j) {
    if (!(cov.sigma()(j, j) > 1e-15 * tr) || diag(j) <= 0.0) {
      diag(j) = 0.0;
      out.excluded.push_back(static_cast<std::size_t>(j));
    }
  }
  const double total = diag.sum();
  if (!(total > 0.0)) throw Error(ErrorCode::ZeroMatrix, "all nodes have zero variance");
  out.scores = diag / total;
  return out;
}

bool width_condition_holds(const LayerCovariance& cov, std::size_t m_sharp, double lambda) {
  return static_cast<double>(m_sharp) >= width_requirement(dof(cov, lambda));
}

double lambda_for_width(const LayerCovariance& cov, std::size_t m_sharp) {
  if (m_sharp < 1) throw Error(ErrorCode::InvalidArgument, "m_sharp must be at least 1");
  if (width_condition_holds(cov, m_sharp, 0.0)) return 0.0;

  const double tr = cov.trace();
  double lo = 1e-15 * tr;
  double hi = 1e3 * tr;
  while (width_condition_holds(cov, m_sharp, lo) && lo > 1e-300) lo *= 1e-3;
  while (!width_condition_holds(cov, m_sharp, hi)) hi *= 1e3;
  // Invariant: condition fails at lo, holds at hi.
  while (hi / lo - 1.0 > 1e-7) {
    const double mid = std::sqrt(lo * hi);
    if (width_condition_holds(cov, m_sharp, mid))
      hi = mid;
    else
      lo = mid;
  }
  return hi;
}

std::size_t width_for_lambda(const LayerCovariance& cov, double lambda) {
  const double need = std::ceil(width_requirement(dof(cov, lambda)));
  const double clamped = std::clamp(need, 1.0, static_cast<double>(cov.dim()));
  return static_cast<std::size_t>(clamped);
}

double intrinsic_dim(const LayerCovariance& cov, const LayerCovariance& next, std::size_t kernel, double trace_coef) {
  const double k = static_cast<double>(kernel);
  return dof(cov, trace_coef * cov.trace()) * dof(next, trace_coef * next.trace()) * k * k;
}

DofProfile dof_profile(const LayerCovariance& cov, std::size_t points, double lo_coef, double hi_coef) {
  if (points < 2) throw Error(ErrorCode::InvalidArgument, "profile needs at least two points");
  const double tr = cov.trace();
  if (!(tr > 0.0)) throw Error(ErrorCode::ZeroMatrix, "covariance trace is zero");
  DofProfile profile;
  profile.layer = cov.layer();
  profile.rank = numerical_rank(cov);
  const double log_hi = std::log(hi_coef * tr);
  const double log_lo = std::log(lo_coef * tr);
  for (std::size_t i = 0; i < points; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(points - 1);
    const double lambda = std::exp(log_hi + t * (log_lo - log_hi));
    profile.rows.push_back({lambda, dof(cov, lambda), width_for_lambda(cov, lambda)});
  }
  return profile;
}

CsvWriter dof_profile_csv(const DofProfile& profile) {
  CsvWriter csv({"layer", "lambda", "dof", "width_for_lambda"});
  for (const auto& row : profile.rows)
    csv.add_row({std::to_string(profile.layer), format_double(row.lambda), format_double(row.dof),
                 std::to_string(row.width)});
  return csv;
}

}  // namespace specprune
