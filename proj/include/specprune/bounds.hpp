#pragma once

#include <limits>
#include <optional>
#include <vector>

#include "specprune/pruner.hpp"

namespace specprune {

/// Norm constants of the model class, measured from a trained network.
/// c1 stands in for the unspecified universal constant.
struct NormBudget {
  double radius = 0.0;       // R
  double bias_radius = 0.0;  // R_b
  double c1 = 1.0;
  double input_radius = 0.0;  // D_x
  double truncation = std::numeric_limits<double>::infinity();  // M
  double rho = 1.0;

  double r_bar() const;
  double r_bar_b() const;
};

/// R and R_b from the weights, D_x from the inputs, rho left at 1.
NormBudget measure_budget(const Network& net, const Dataset& data, double c1 = 1.0,
                          double truncation = std::numeric_limits<double>::infinity());

/// Lipschitz constant used for the loss: sqrt(2) for softmax cross-entropy
/// (gradient of the logits is softmax - y); 2 (sqrt(d_out) R_inf + max ||y||)
/// for squared error on the truncated range.
double loss_lipschitz(LossKind loss, const Dataset& data, double r_inf, std::size_t output_dim);

double log_plus(double x);

/// ||W_S^T diag(q) W_S||_op for the rows S of w, via a symmetric eigensolve
/// of the smaller of the two Gram matrices.
double weighted_op_norm(const Matrix& w, const IndexList& rows, const Vector& q);

struct ZetaTerms {
  std::size_t layer = 0;
  double lambda = 0.0;
  double dof = 0.0;
  double dof_output = 0.0;
  double dof_theta = 0.0;
  double max_row_sq = 0.0;
  double op_norm = 0.0;
  double c_scale = 1.0;
  double zeta = 0.0;
};

/// Per-layer error propagation factor. Backward: N^theta (theta max||W_j||^2
/// / op + (1-theta) m_l)^-1. Simultaneous: c_scale N^theta (theta m'_{l+1}
/// max q_j||W_j||^2 / op + (1-theta) m'_{l+1})^-1 with m'_{l+1} the kept
/// width of the next layer.
ZetaTerms zeta(const LayerCovariance& cov, const ZSpec& z, const Network& net, double theta, double lambda,
               Procedure procedure, std::size_t next_kept = 0);

/// sum_{l=2}^L R_bar^{L-l+1} sqrt(prod_{l'>=l} zeta_l') sqrt(lambda_l);
/// both vectors are indexed l = 2..L.
double delta1(const std::vector<double>& lambdas, const std::vector<double>& zetas, const NormBudget& budget);

double r_hat_inf(std::size_t depth, const NormBudget& budget);
double g_hat(std::size_t depth, const NormBudget& budget);

/// widths = (m_1, ..., m_{L+1}) of the compressed network.
double delta2(const std::vector<std::size_t>& widths, std::size_t n, const NormBudget& budget);

/// (t + sum_{l=2}^L log m_l) / n for widths (m_1, ..., m_{L+1}); t > 0.
double r_nt(double t, const std::vector<std::size_t>& widths, std::size_t n);

struct BoundConfig {
  double theta = 0.5;
  Procedure procedure = Procedure::Backward;
  double t = 1.0;
  double c1 = 1.0;
  double big_c1 = 1.0;
  double truncation = std::numeric_limits<double>::infinity();
  LossKind loss = LossKind::SoftmaxCrossEntropy;
};

struct BoundLayerRow {
  std::size_t layer = 0;
  std::size_t width = 0;
  std::size_t kept = 0;
  bool pruned = false;
  ZetaTerms terms;
  bool zeta_within_one = true;
};

struct BoundReport {
  NormBudget budget;
  std::vector<BoundLayerRow> layers;
  std::size_t samples = 0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta2_original = 0.0;
  double r_inf = 0.0;
  double g = 0.0;
  double r_nt = 0.0;
  double t = 0.0;
  double big_c1 = 1.0;
  double train_loss = 0.0;
  double compressed_train_loss = 0.0;
  double compression_error = 0.0;
  double relative_error = 0.0;
  /// compression_error / delta1 when delta1 > 0.
  std::optional<double> effective_constant;
  double bound = 0.0;
  std::vector<std::size_t> warnings;  // layers with zeta > 1
};

/// Evaluates every term of the generalisation bound for a pruning outcome
/// on its training data. Dense networks only.
BoundReport bound_report(const Network& net, const PruneOutcome& outcome, const Dataset& data, const BoundConfig& cfg);

nlohmann::json to_json(const BoundReport& report);
CsvWriter bound_csv(const BoundReport& report);

}  // namespace specprune
