#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "specprune/covariance.hpp"
#include "specprune/spectral.hpp"

namespace specprune {

enum class Procedure { Backward, Simultaneous };
Procedure parse_procedure(const std::string& name);
std::string procedure_name(Procedure p);

/// Regulariser on the reconstruction coefficients. `Leverage` uses
/// tau_j = m_sharp * lambda * leverage_j; `Scalar` uses tau_j = value.
struct TauPolicy {
  enum class Kind { Leverage, Scalar };
  Kind kind = Kind::Leverage;
  double value = 0.0;

  static TauPolicy leverage() { return {}; }
  static TauPolicy scalar(double v) { return {Kind::Scalar, v}; }
};

/// Per-layer target widths and/or a lambda policy lambda_l = lambda_coef *
/// Tr[Sigma_l]. With only widths, lambda comes from the width condition;
/// with only lambda_coef, the width comes from the same condition read
/// forward. Supplying both fixes both (used for fixed-lambda width sweeps).
struct PruneConfig {
  double theta = 0.5;
  std::vector<std::size_t> layers;
  std::map<std::size_t, std::size_t> widths;
  std::optional<double> lambda_coef;
  Procedure procedure = Procedure::Backward;
  bool budget_constraint = true;
  TauPolicy tau;

  void validate() const;
};

/// Output-side projection for one layer: rows of z are scaled rows of the
/// layer's weight matrix, one per entry of `rows` (indices into the next
/// representation). q is the sampling distribution over those rows.
struct ZSpec {
  std::size_t layer = 0;
  Matrix z;
  Vector q;
  IndexList rows;
  /// Rows left out because of zero norm or zero leverage (simultaneous only).
  IndexList dropped;
  /// Smallest c with ||W_j||^2 <= c R^2 leverage_j (simultaneous only).
  double c_scale = 0.0;
};

struct Losses {
  double input = 0.0;
  double output = 0.0;
  double combined = 0.0;
};

struct SelectionResult {
  std::size_t layer = 0;
  std::size_t width = 0;
  std::size_t target = 0;
  double lambda = 0.0;
  double theta = 0.0;
  IndexList selected;
  /// m_l x |selected|.
  Matrix reconstruction;
  Vector tau;
  Losses losses;
  double budget_used = 0.0;
  double budget_limit = 0.0;
  bool infeasible = false;
  IndexList excluded;
  /// L^theta after each greedy step.
  std::vector<double> path;
};

nlohmann::json to_json(const SelectionResult& s);

/// Tr[S - S_FJ (S_JJ + diag tau)^-1 S_JF]. An empty J gives Tr S. When tau
/// has zero entries the inverse is a pseudo-inverse.
double loss_A(const LayerCovariance& cov, const IndexList& J, const Vector& tau);
/// Tr{Z [S - S_FJ (S_JJ + diag tau)^-1 S_JF] Z^T}.
double loss_B(const LayerCovariance& cov, const Matrix& z, const IndexList& J, const Vector& tau);
/// Same residual from a precomputed cross covariance (needed for conv layers).
double loss_B(const LayerCovariance& cov, const CrossCovariance& cross, const IndexList& J, const Vector& tau);

/// S_FJ (S_JJ + diag tau)^-1.
Matrix reconstruction_matrix(const LayerCovariance& cov, const IndexList& J, const Vector& tau);

/// tau over all m_l nodes for the chosen policy.
Vector make_tau(const TauPolicy& policy, const LeverageScores& lev, std::size_t m_sharp);

struct SelectionOptions {
  double theta = 0.5;
  std::size_t m_sharp = 1;
  double lambda = 0.0;
  TauPolicy tau;
  bool budget_constraint = true;
};

/// Greedy forward selection minimising theta L^A + (1-theta) L^B, using
/// rank-one updates of the residual covariance.
SelectionResult greedy_select(const LayerCovariance& cov, const CrossCovariance& cross, const SelectionOptions& opt);
SelectionResult greedy_select(const LayerCovariance& cov, const ZSpec& z, const SelectionOptions& opt);

/// Z for the backward procedure from the selection of the next layer.
/// Without leverage scores q is uniform over `next_selected`.
ZSpec make_Z_backward(const Network& net, std::size_t l, const IndexList& next_selected,
                      const std::optional<LeverageScores>& next_leverage);

/// Z for the simultaneous procedure: every nonzero row of W^(l), normalised.
/// `radius` is the R used for c_scale; 0 means row_norm_radius(net).
ZSpec make_Z_simultaneous(const Network& net, std::size_t l, const std::optional<LeverageScores>& next_leverage,
                          double radius = 0.0);

struct LayerPruning {
  SelectionResult selection;
  ZSpec z;
  LayerCovariance cov;
  CrossCovariance cross;
};

struct PruneOutcome {
  Network compressed;
  std::vector<LayerPruning> layers;  // ordered by layer index
  bool infeasible = false;
};

PruneOutcome prune(const Network& net, const Dataset& data, const PruneConfig& cfg);

/// Rebuilds the network from per-layer selections (layers not listed keep
/// all units with identity reconstruction).
Network compress(const Network& net, const std::vector<SelectionResult>& selections);

/// sqrt((1/n) sum_i ||f_a(x_i) - f_b(x_i)||^2).
double compression_error(const Network& a, const Network& b, const Dataset& data);
/// compression_error(a, b) / ||f_a||_n.
double relative_compression_error(const Network& a, const Network& b, const Dataset& data);

}  // namespace specprune
