#include "specprune/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "specprune/error.hpp"

namespace specprune {

using nlohmann::json;

double NormBudget::r_bar() const { return std::sqrt(c1) * radius; }
double NormBudget::r_bar_b() const { return std::sqrt(c1) * bias_radius; }

NormBudget measure_budget(const Network& net, const Dataset& data, double c1, double truncation) {
  if (!(c1 > 0.0)) throw Error(ErrorCode::InvalidArgument, "c1 must be positive");
  if (!(truncation > 0.0)) throw Error(ErrorCode::InvalidArgument, "truncation level must be positive");
  NormBudget b;
  b.radius = row_norm_radius(net);
  b.bias_radius = bias_radius(net);
  b.c1 = c1;
  b.input_radius = data.inputs.rowwise().norm().maxCoeff();
  b.truncation = truncation;
  return b;
}

double loss_lipschitz(LossKind loss, const Dataset& data, double r_inf, std::size_t output_dim) {
  if (loss == LossKind::SoftmaxCrossEntropy) return std::sqrt(2.0);
  const double y_max = data.targets.rowwise().norm().maxCoeff();
  return 2.0 * (std::sqrt(static_cast<double>(output_dim)) * r_inf + y_max);
}

double log_plus(double x) { return x > std::exp(1.0) ? std::log(x) : 1.0; }

double weighted_op_norm(const Matrix& w, const IndexList& rows, const Vector& q) {
  if (static_cast<std::size_t>(q.size()) != rows.size())
    throw Error(ErrorCode::ShapeMismatch, "weights q do not match the row set");
  Matrix a(static_cast<Eigen::Index>(rows.size()), w.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= static_cast<std::size_t>(w.rows())) throw Error(ErrorCode::IndexOutOfRange, "row index");
    const auto r = static_cast<Eigen::Index>(k);
    if (!(q(r) >= 0.0)) throw Error(ErrorCode::InvalidArgument, "negative row weight");
    a.row(r) = std::sqrt(q(r)) * w.row(static_cast<Eigen::Index>(rows[k]));
  }
  const Matrix gram = a.rows() <= a.cols() ? Matrix(a * a.transpose()) : Matrix(a.transpose() * a);
  const Matrix sym = 0.5 * (gram + gram.transpose());
  const SymmetricSpectrum s = sym_eig(sym);
  return s.size() == 0 ? 0.0 : std::max(0.0, s.eigenvalues(0));
}

ZetaTerms zeta(const LayerCovariance& cov, const ZSpec& z, const Network& net, double theta, double lambda,
               Procedure procedure, std::size_t next_kept) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw Error(ErrorCode::InvalidArgument, "theta must lie in [0,1]");
  const Matrix& w = net.weight_layer(z.layer).weight;
  ZetaTerms t;
  t.layer = z.layer;
  t.lambda = lambda;
  t.dof = dof(cov, lambda);
  t.dof_output = dof_output(cov, z.z, lambda);
  t.dof_theta = theta * t.dof + (1.0 - theta) * t.dof_output;
  t.op_norm = weighted_op_norm(w, z.rows, z.q);
  if (!(t.op_norm > 0.0)) throw Error(ErrorCode::ZeroOperatorNorm, "weighted Gram of layer " + std::to_string(z.layer));

  if (procedure == Procedure::Backward) {
    t.max_row_sq = w.rowwise().squaredNorm().maxCoeff();
    const double m_l = static_cast<double>(cov.dim());
    t.zeta = t.dof_theta / (theta * t.max_row_sq / t.op_norm + (1.0 - theta) * m_l);
  } else {
    if (next_kept == 0) throw Error(ErrorCode::InvalidArgument, "kept width of the next layer is required");
    for (std::size_t k = 0; k < z.rows.size(); ++k) {
      const double row_sq = w.row(static_cast<Eigen::Index>(z.rows[k])).squaredNorm();
      t.max_row_sq = std::max(t.max_row_sq, z.q(static_cast<Eigen::Index>(k)) * row_sq);
    }
    const double kept = static_cast<double>(next_kept);
    t.c_scale = z.c_scale;
    t.zeta = t.c_scale * t.dof_theta / (theta * kept * t.max_row_sq / t.op_norm + (1.0 - theta) * kept);
  }
  return t;
}

double delta1(const std::vector<double>& lambdas, const std::vector<double>& zetas, const NormBudget& budget) {
  if (lambdas.size() != zetas.size()) throw Error(ErrorCode::ShapeMismatch, "lambda and zeta lists differ in length");
  const std::size_t depth = lambdas.size() + 1;
  const double r_bar = budget.r_bar();
  double total = 0.0;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (!(lambdas[i] >= 0.0)) throw Error(ErrorCode::NegativeLambda, "negative lambda in delta1");
    const std::size_t l = i + 2;
    double product = 1.0;
    for (std::size_t k = i; k < zetas.size(); ++k) product *= zetas[k];
    total += std::pow(r_bar, static_cast<double>(depth - l + 1)) * std::sqrt(product) * std::sqrt(lambdas[i]);
  }
  return total;
}

double r_hat_inf(std::size_t depth, const NormBudget& budget) {
  const double r_bar = budget.r_bar();
  double value = std::pow(r_bar, static_cast<double>(depth)) * budget.input_radius;
  for (std::size_t l = 1; l <= depth; ++l) value += std::pow(r_bar, static_cast<double>(depth - l)) * budget.r_bar_b();
  return std::min(value, budget.truncation);
}

double g_hat(std::size_t depth, const NormBudget& budget) {
  const double r_bar = budget.r_bar();
  double value = static_cast<double>(depth) * std::pow(r_bar, static_cast<double>(depth) - 1.0) * budget.input_radius;
  for (std::size_t l = 1; l <= depth; ++l) value += std::pow(r_bar, static_cast<double>(depth - l));
  return value;
}

double delta2(const std::vector<std::size_t>& widths, std::size_t n, const NormBudget& budget) {
  if (widths.size() < 2) throw Error(ErrorCode::InvalidArgument, "need input and output widths");
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "sample count is zero");
  const std::size_t depth = widths.size() - 1;
  const double r_inf = r_hat_inf(depth, budget);
  const double arg = r_inf > 0.0 ? 1.0 + 4.0 * g_hat(depth, budget) * std::max(budget.r_bar(), budget.r_bar_b()) / r_inf
                                 : 1.0;
  const double lp = log_plus(arg);
  double sum = 0.0;
  for (std::size_t l = 0; l < depth; ++l) sum += static_cast<double>(widths[l]) * static_cast<double>(widths[l + 1]) * lp;
  return std::sqrt(sum / static_cast<double>(n));
}

double r_nt(double t, const std::vector<std::size_t>& widths, std::size_t n) {
  if (!(t > 0.0)) throw Error(ErrorCode::InvalidArgument, "t must be positive");
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "sample count is zero");
  double sum = t;
  for (std::size_t i = 1; i + 1 < widths.size(); ++i) sum += std::log(static_cast<double>(widths[i]));
  return sum / static_cast<double>(n);
}

namespace {

std::vector<std::size_t> widths_of(const Network& net) {
  std::vector<std::size_t> w;
  for (std::size_t l = 1; l <= net.depth() + 1; ++l) w.push_back(net.width(l));
  return w;
}

double truncated_loss(const Network& net, const Dataset& data, LossKind loss, double truncation) {
  Matrix out = forward_batch(net, data.inputs);
  if (std::isfinite(truncation)) out = out.cwiseMax(-truncation).cwiseMin(truncation);
  return mean_loss(out, data.targets, loss);
}

}  // namespace

BoundReport bound_report(const Network& net, const PruneOutcome& outcome, const Dataset& data, const BoundConfig& cfg) {
  for (const auto& layer : net.layers())
    if (layer.kind != LayerKind::Dense) throw Error(ErrorCode::UnsupportedLayer, "bound report covers dense networks only");
  if (outcome.layers.empty()) throw Error(ErrorCode::InvalidArgument, "no pruned layers");
  data.validate();

  const std::size_t depth = net.depth();
  BoundReport rep;
  rep.samples = data.size();
  rep.t = cfg.t;
  rep.big_c1 = cfg.big_c1;
  rep.budget = measure_budget(net, data, cfg.c1, cfg.truncation);
  rep.r_inf = r_hat_inf(depth, rep.budget);
  rep.g = g_hat(depth, rep.budget);
  rep.budget.rho = loss_lipschitz(cfg.loss, data, rep.r_inf, net.output_dim());

  std::map<std::size_t, const LayerPruning*> pruned;
  for (const auto& lp : outcome.layers) pruned[lp.selection.layer] = &lp;
  const std::size_t lowest = pruned.begin()->first;
  const std::vector<std::size_t> kept = widths_of(outcome.compressed);
  const std::vector<std::size_t> original = widths_of(net);

  std::vector<double> lambdas(depth - 1, 0.0);
  std::vector<double> zetas(depth - 1, 0.0);
  for (std::size_t l = lowest; l <= depth; ++l) {
    BoundLayerRow row;
    row.layer = l;
    row.width = original[l - 1];
    row.kept = kept[l - 1];
    const auto it = pruned.find(l);
    row.pruned = it != pruned.end();
    if (row.pruned) {
      const LayerPruning& lp = *it->second;
      row.terms = zeta(lp.cov, lp.z, net, cfg.theta, lp.selection.lambda, cfg.procedure, kept[l]);
    } else {
      const LayerCovariance cov = layer_cov(net, data, l);
      std::optional<LeverageScores> next_leverage;
      IndexList next_selected = iota_indices(original[l]);
      if (const auto next = pruned.find(l + 1); next != pruned.end()) {
        next_leverage = leverage(next->second->cov, next->second->selection.lambda);
        next_selected = next->second->selection.selected;
      }
      const ZSpec z = cfg.procedure == Procedure::Backward ? make_Z_backward(net, l, next_selected, next_leverage)
                                                           : make_Z_simultaneous(net, l, next_leverage);
      row.terms = zeta(cov, z, net, cfg.theta, 0.0, cfg.procedure, kept[l]);
    }
    row.zeta_within_one = row.terms.zeta <= 1.0;
    if (!row.zeta_within_one) rep.warnings.push_back(l);
    lambdas[l - 2] = row.terms.lambda;
    zetas[l - 2] = row.terms.zeta;
    rep.layers.push_back(row);
  }

  rep.delta1 = delta1(lambdas, zetas, rep.budget);
  rep.delta2 = delta2(kept, data.size(), rep.budget);
  rep.delta2_original = delta2(original, data.size(), rep.budget);
  rep.r_nt = r_nt(cfg.t, original, data.size());
  rep.train_loss = truncated_loss(net, data, cfg.loss, cfg.truncation);
  rep.compressed_train_loss = truncated_loss(outcome.compressed, data, cfg.loss, cfg.truncation);
  rep.compression_error = compression_error(net, outcome.compressed, data);
  rep.relative_error = relative_compression_error(net, outcome.compressed, data);
  if (rep.delta1 > 0.0) rep.effective_constant = rep.compression_error / rep.delta1;
  rep.bound = rep.train_loss +
              rep.budget.rho * (rep.delta1 + cfg.big_c1 * rep.r_inf * (rep.delta2 + rep.delta2 * rep.delta2 + std::sqrt(rep.r_nt)));
  return rep;
}

json to_json(const BoundReport& r) {
  json out;
  out["budget"] = {{"R", r.budget.radius},       {"R_b", r.budget.bias_radius}, {"c1", r.budget.c1},
                   {"D_x", r.budget.input_radius}, {"rho", r.budget.rho},
                   {"M", std::isfinite(r.budget.truncation) ? json(r.budget.truncation) : json("inf")}};
  json layers = json::array();
  for (const auto& row : r.layers) {
    layers.push_back({{"layer", row.layer},
                      {"width", row.width},
                      {"kept", row.kept},
                      {"pruned", row.pruned},
                      {"lambda", row.terms.lambda},
                      {"dof", row.terms.dof},
                      {"dof_output", row.terms.dof_output},
                      {"dof_theta", row.terms.dof_theta},
                      {"max_row_sq", row.terms.max_row_sq},
                      {"op_norm", row.terms.op_norm},
                      {"c_scale", row.terms.c_scale},
                      {"zeta", row.terms.zeta},
                      {"zeta_within_one", row.zeta_within_one}});
  }
  out["layers"] = layers;
  out["samples"] = r.samples;
  out["delta1"] = r.delta1;
  out["delta2"] = r.delta2;
  out["delta2_original_widths"] = r.delta2_original;
  out["R_inf"] = r.r_inf;
  out["G"] = r.g;
  out["R_nt"] = r.r_nt;
  out["t"] = r.t;
  out["C1"] = r.big_c1;
  out["train_loss"] = r.train_loss;
  out["compressed_train_loss"] = r.compressed_train_loss;
  out["compression_error"] = r.compression_error;
  out["relative_error"] = r.relative_error;
  out["effective_constant"] = r.effective_constant ? json(*r.effective_constant) : json(nullptr);
  out["bound"] = r.bound;
  out["zeta_warnings"] = r.warnings;
  return out;
}

CsvWriter bound_csv(const BoundReport& r) {
  CsvWriter csv({"scope", "layer", "width", "kept", "lambda", "dof", "dof_output", "dof_theta", "zeta", "delta1", "delta2",
                 "delta2_original_widths", "R_inf", "R_nt", "compression_error", "bound"});
  for (const auto& row : r.layers)
    csv.add_row({"layer", std::to_string(row.layer), std::to_string(row.width), std::to_string(row.kept),
                 format_double(row.terms.lambda), format_double(row.terms.dof), format_double(row.terms.dof_output),
                 format_double(row.terms.dof_theta), format_double(row.terms.zeta), "", "", "", "", "", "", ""});
  csv.add_row({"aggregate", "", "", "", "", "", "", "", "", format_double(r.delta1), format_double(r.delta2),
               format_double(r.delta2_original), format_double(r.r_inf), format_double(r.r_nt),
               format_double(r.compression_error), format_double(r.bound)});
  return csv;
}

}  // namespace specprune
