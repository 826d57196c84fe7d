#include "specprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "specprune/error.hpp"

namespace specprune {

using nlohmann::json;

Procedure parse_procedure(const std::string& name) {
  if (name == "backward") return Procedure::Backward;
  if (name == "simultaneous") return Procedure::Simultaneous;
  throw Error(ErrorCode::InvalidArgument, "unknown procedure '" + name + "'");
}

std::string procedure_name(Procedure p) { return p == Procedure::Backward ? "backward" : "simultaneous"; }

void PruneConfig::validate() const {
  if (!(theta >= 0.0 && theta <= 1.0)) throw Error(ErrorCode::InvalidArgument, "theta must lie in [0,1]");
  if (lambda_coef && !(*lambda_coef >= 0.0)) throw Error(ErrorCode::NegativeLambda, "lambda coefficient is negative");
  if (tau.kind == TauPolicy::Kind::Scalar && !(tau.value >= 0.0))
    throw Error(ErrorCode::InvalidArgument, "scalar tau must be nonnegative");
  for (auto l : layers)
    if (l < 2) throw Error(ErrorCode::InvalidArgument, "layer indices start at 2 (layer 1 is the input)");
  for (const auto& [l, w] : widths) {
    if (l < 2) throw Error(ErrorCode::InvalidArgument, "width given for layer " + std::to_string(l));
    if (w < 1) throw Error(ErrorCode::InvalidArgument, "width for layer " + std::to_string(l) + " is zero");
  }
}

json to_json(const SelectionResult& s) {
  json out;
  out["layer"] = s.layer;
  out["width"] = s.width;
  out["target_width"] = s.target;
  out["lambda"] = s.lambda;
  out["theta"] = s.theta;
  out["selected"] = s.selected;
  out["excluded"] = s.excluded;
  out["tau"] = std::vector<double>(s.tau.data(), s.tau.data() + s.tau.size());
  out["losses"] = {{"input", s.losses.input}, {"output", s.losses.output}, {"combined", s.losses.combined}};
  out["budget_used"] = s.budget_used;
  out["budget_limit"] = s.budget_limit;
  out["infeasible"] = s.infeasible;
  out["objective_path"] = s.path;
  return out;
}

namespace {

Vector gather(const Vector& v, const IndexList& idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out(static_cast<Eigen::Index>(k)) = v(static_cast<Eigen::Index>(idx[k]));
  return out;
}

Matrix gather_cols(const Matrix& m, const IndexList& idx) {
  Matrix out(m.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(static_cast<Eigen::Index>(idx[k]));
  return out;
}

Matrix gather_rows(const Matrix& m, const IndexList& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(static_cast<Eigen::Index>(idx[k]));
  return out;
}

void require_tau(const Vector& tau, const IndexList& J) {
  if (static_cast<std::size_t>(tau.size()) != J.size())
    throw Error(ErrorCode::ShapeMismatch, "tau length " + std::to_string(tau.size()) + " vs |J| = " + std::to_string(J.size()));
  for (Eigen::Index k = 0; k < tau.size(); ++k)
    if (!(tau(k) >= 0.0)) throw Error(ErrorCode::InvalidArgument, "tau entries must be nonnegative");
}

// (S_JJ + diag tau)^-1 rhs; falls back to the pseudo-inverse for zero or
// numerically negligible ridge.
Matrix regularized_solve(const Matrix& s_jj, const Vector& tau, const Matrix& rhs) {
  if (tau.size() > 0 && tau.minCoeff() > 0.0) {
    try {
      return psd_solve(s_jj, tau, rhs);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Singular) throw;
    }
  }
  Matrix m = s_jj;
  m.diagonal() += tau;
  return psd_pinv(m) * rhs;
}

}  // namespace

Matrix reconstruction_matrix(const LayerCovariance& cov, const IndexList& J, const Vector& tau) {
  require_tau(tau, J);
  const IndexList all = iota_indices(cov.dim());
  if (J.empty()) return Matrix::Zero(static_cast<Eigen::Index>(cov.dim()), 0);
  const Matrix s_jj = submatrix(cov.sigma(), J, J);
  const Matrix s_jf = submatrix(cov.sigma(), J, all);
  return regularized_solve(s_jj, tau, s_jf).transpose();
}

double loss_A(const LayerCovariance& cov, const IndexList& J, const Vector& tau) {
  require_tau(tau, J);
  const double total = cov.trace();
  if (J.empty()) return total;
  const IndexList all = iota_indices(cov.dim());
  const Matrix s_jf = submatrix(cov.sigma(), J, all);
  const Matrix solved = regularized_solve(submatrix(cov.sigma(), J, J), tau, s_jf);
  return std::max(0.0, total - (s_jf.array() * solved.array()).sum());
}

double loss_B(const LayerCovariance& cov, const CrossCovariance& cross, const IndexList& J, const Vector& tau) {
  require_tau(tau, J);
  if (static_cast<std::size_t>(cross.z_sigma.cols()) != cov.dim())
    throw Error(ErrorCode::ShapeMismatch, "cross covariance columns do not match the layer width");
  if (J.empty()) return cross.output_energy;
  const Matrix c_j = gather_cols(cross.z_sigma, J);
  const Matrix solved = regularized_solve(submatrix(cov.sigma(), J, J), tau, c_j.transpose());
  return std::max(0.0, cross.output_energy - (c_j.transpose().array() * solved.array()).sum());
}

double loss_B(const LayerCovariance& cov, const Matrix& z, const IndexList& J, const Vector& tau) {
  return loss_B(cov, dense_cross_cov(cov, z), J, tau);
}

Vector make_tau(const TauPolicy& policy, const LeverageScores& lev, std::size_t m_sharp) {
  if (policy.kind == TauPolicy::Kind::Scalar) {
    if (!(policy.value >= 0.0)) throw Error(ErrorCode::InvalidArgument, "scalar tau must be nonnegative");
    return Vector::Constant(lev.scores.size(), policy.value);
  }
  return static_cast<double>(m_sharp) * lev.lambda * lev.scores;
}

SelectionResult greedy_select(const LayerCovariance& cov, const CrossCovariance& cross, const SelectionOptions& opt) {
  const std::size_t m = cov.dim();
  if (!(opt.theta >= 0.0 && opt.theta <= 1.0)) throw Error(ErrorCode::InvalidArgument, "theta must lie in [0,1]");
  if (opt.m_sharp < 1 || opt.m_sharp > m)
    throw Error(ErrorCode::InvalidArgument,
                "target width " + std::to_string(opt.m_sharp) + " outside [1, " + std::to_string(m) + "]");
  if (static_cast<std::size_t>(cross.z_sigma.cols()) != m)
    throw Error(ErrorCode::ShapeMismatch, "cross covariance columns do not match the layer width");

  const LeverageScores lev = leverage(cov, opt.lambda);
  // Zero-variance nodes can never be chosen, so the reachable size is capped.
  const std::size_t reachable = std::min(opt.m_sharp, m - lev.excluded.size());
  const Vector tau_all = make_tau(opt.tau, lev, reachable);
  const double theta = opt.theta;

  SelectionResult out;
  out.layer = cov.layer();
  out.width = m;
  out.target = opt.m_sharp;
  out.lambda = opt.lambda;
  out.theta = theta;
  out.excluded = lev.excluded;
  out.budget_limit = 5.0 / 3.0 * static_cast<double>(m) * static_cast<double>(reachable);

  std::vector<char> blocked(m, 0);
  for (auto j : lev.excluded) blocked[j] = 1;

  Matrix residual = cov.sigma();
  Matrix cross_residual = cross.z_sigma;
  const double floor = 1e-12 * cov.trace();
  double loss_a = cov.trace();
  double loss_b = cross.output_energy;
  double budget = 0.0;

  while (out.selected.size() < reachable) {
    const Eigen::RowVectorXd norm_a = residual.colwise().squaredNorm();
    const Eigen::RowVectorXd norm_b = cross_residual.colwise().squaredNorm();
    std::size_t best = m;
    double best_gain = -std::numeric_limits<double>::infinity();
    bool budget_skipped = false;
    for (std::size_t j = 0; j < m; ++j) {
      if (blocked[j]) continue;
      const auto jj = static_cast<Eigen::Index>(j);
      if (opt.budget_constraint && budget + 1.0 / lev.scores(jj) > out.budget_limit) {
        budget_skipped = true;
        continue;
      }
      const double s = residual(jj, jj) + tau_all(jj);
      const double gain = s > floor ? (theta * norm_a(jj) + (1.0 - theta) * norm_b(jj)) / s : 0.0;
      if (gain > best_gain) {
        best_gain = gain;
        best = j;
      }
    }
    if (best == m) {
      out.infeasible = budget_skipped;
      break;
    }

    const auto b = static_cast<Eigen::Index>(best);
    const double s = residual(b, b) + tau_all(b);
    if (s > floor) {
      const Vector v = residual.col(b);
      const Vector w = cross_residual.col(b);
      loss_a -= v.squaredNorm() / s;
      loss_b -= w.squaredNorm() / s;
      residual.noalias() -= v * (v.transpose() / s);
      cross_residual.noalias() -= w * (v.transpose() / s);
    }
    blocked[best] = 1;
    budget += 1.0 / lev.scores(b);
    out.selected.push_back(best);
    out.path.push_back(theta * std::max(0.0, loss_a) + (1.0 - theta) * std::max(0.0, loss_b));
  }

  std::sort(out.selected.begin(), out.selected.end());
  out.tau = gather(tau_all, out.selected);
  out.budget_used = budget;
  out.reconstruction = reconstruction_matrix(cov, out.selected, out.tau);
  out.losses.input = loss_A(cov, out.selected, out.tau);
  out.losses.output = loss_B(cov, cross, out.selected, out.tau);
  out.losses.combined = theta * out.losses.input + (1.0 - theta) * out.losses.output;
  return out;
}

SelectionResult greedy_select(const LayerCovariance& cov, const ZSpec& z, const SelectionOptions& opt) {
  return greedy_select(cov, dense_cross_cov(cov, z.z), opt);
}

ZSpec make_Z_backward(const Network& net, std::size_t l, const IndexList& next_selected,
                      const std::optional<LeverageScores>& next_leverage) {
  const Matrix& w = net.weight_layer(l).weight;
  if (next_selected.empty()) throw Error(ErrorCode::InvalidArgument, "next-layer selection is empty");
  for (auto j : next_selected)
    if (j >= static_cast<std::size_t>(w.rows()))
      throw Error(ErrorCode::IndexOutOfRange, "row " + std::to_string(j) + " of layer " + std::to_string(l));
  const double max_norm = w.rowwise().norm().maxCoeff();
  if (!(max_norm > 0.0)) throw Error(ErrorCode::ZeroRowNorm, "layer " + std::to_string(l) + " has all-zero weights");

  ZSpec spec;
  spec.layer = l;
  spec.rows = next_selected;
  const auto k = static_cast<Eigen::Index>(next_selected.size());
  spec.q = Vector::Constant(k, 1.0 / static_cast<double>(k));
  if (next_leverage) {
    for (Eigen::Index r = 0; r < k; ++r) {
      const double score = next_leverage->scores(static_cast<Eigen::Index>(next_selected[static_cast<std::size_t>(r)]));
      if (!(score > 0.0))
        throw Error(ErrorCode::InvalidArgument, "selected next-layer node has zero leverage");
      spec.q(r) = 1.0 / score;
    }
    spec.q /= spec.q.sum();
  }
  const double m_l = static_cast<double>(net.width(l));
  spec.z = gather_rows(w, next_selected);
  for (Eigen::Index r = 0; r < k; ++r) spec.z.row(r) *= std::sqrt(m_l * spec.q(r)) / max_norm;
  return spec;
}

ZSpec make_Z_simultaneous(const Network& net, std::size_t l, const std::optional<LeverageScores>& next_leverage,
                          double radius) {
  const Matrix& w = net.weight_layer(l).weight;
  const Vector norms = w.rowwise().norm();
  const double r = radius > 0.0 ? radius : row_norm_radius(net);
  if (next_leverage && next_leverage->scores.size() != w.rows())
    throw Error(ErrorCode::ShapeMismatch, "leverage scores do not match the rows of layer " + std::to_string(l));

  ZSpec spec;
  spec.layer = l;
  for (Eigen::Index j = 0; j < w.rows(); ++j) {
    const bool live = norms(j) > 0.0 && (!next_leverage || next_leverage->scores(j) > 0.0);
    (live ? spec.rows : spec.dropped).push_back(static_cast<std::size_t>(j));
  }
  if (spec.rows.empty()) throw Error(ErrorCode::AllZeroRows, "layer " + std::to_string(l) + " has no usable rows");

  const auto k = static_cast<Eigen::Index>(spec.rows.size());
  spec.z = gather_rows(w, spec.rows);
  spec.q.resize(k);
  const double uniform = 1.0 / static_cast<double>(w.rows());
  for (Eigen::Index i = 0; i < k; ++i) {
    const auto j = static_cast<Eigen::Index>(spec.rows[static_cast<std::size_t>(i)]);
    spec.z.row(i) /= norms(j);
    const double score = next_leverage ? next_leverage->scores(j) : uniform;
    spec.q(i) = 1.0 / score;
    if (r > 0.0) spec.c_scale = std::max(spec.c_scale, norms(j) * norms(j) / (r * r * score));
  }
  spec.q /= spec.q.sum();
  return spec;
}

namespace {

struct LayerPlan {
  std::size_t layer;
  double lambda;
  std::size_t m_sharp;
};

LayerPlan resolve(const LayerCovariance& cov, const PruneConfig& cfg) {
  const std::size_t l = cov.layer();
  const auto it = cfg.widths.find(l);
  if (it != cfg.widths.end()) {
    if (it->second > cov.dim())
      throw Error(ErrorCode::InvalidArgument, "width " + std::to_string(it->second) + " exceeds layer " +
                                                  std::to_string(l) + " width " + std::to_string(cov.dim()));
    const double lambda = cfg.lambda_coef ? *cfg.lambda_coef * cov.trace() : lambda_for_width(cov, it->second);
    return {l, lambda, it->second};
  }
  if (!cfg.lambda_coef) throw Error(ErrorCode::InvalidArgument, "layer " + std::to_string(l) + " has neither width nor lambda");
  const double lambda = *cfg.lambda_coef * cov.trace();
  return {l, lambda, width_for_lambda(cov, lambda)};
}

bool prunable(const Network& net, std::size_t l) {
  return l >= 2 && l <= net.depth() && !(net.weight_layer(l - 1).kind == LayerKind::Conv2d &&
                                         net.weight_layer(l).kind == LayerKind::Dense);
}

std::vector<std::size_t> layers_to_prune(const Network& net, const PruneConfig& cfg) {
  std::set<std::size_t> chosen(cfg.layers.begin(), cfg.layers.end());
  if (chosen.empty())
    for (const auto& entry : cfg.widths) chosen.insert(entry.first);
  if (chosen.empty() && cfg.lambda_coef)
    for (std::size_t l = 2; l <= net.depth(); ++l)
      if (prunable(net, l)) chosen.insert(l);
  if (chosen.empty()) throw Error(ErrorCode::InvalidArgument, "no layers to prune");
  for (auto l : chosen)
    if (l > net.depth()) throw Error(ErrorCode::IndexOutOfRange, "layer " + std::to_string(l) + " beyond depth");
  for (const auto& entry : cfg.widths)
    if (!chosen.count(entry.first))
      throw Error(ErrorCode::InvalidArgument, "width given for layer " + std::to_string(entry.first) + " which is not pruned");
  return {chosen.begin(), chosen.end()};
}

CrossCovariance cross_for(const Network& net, const Dataset& data, const LayerCovariance& cov, const ZSpec& z) {
  if (net.weight_layer(cov.layer()).kind == LayerKind::Conv2d) return output_channel_cov(net, data, cov.layer(), z.z);
  return dense_cross_cov(cov, z.z);
}

SelectionOptions options_for(const PruneConfig& cfg, const LayerPlan& plan) {
  SelectionOptions opt;
  opt.theta = cfg.theta;
  opt.m_sharp = plan.m_sharp;
  opt.lambda = plan.lambda;
  opt.tau = cfg.tau;
  opt.budget_constraint = cfg.budget_constraint;
  return opt;
}

}  // namespace

PruneOutcome prune(const Network& net, const Dataset& data, const PruneConfig& cfg) {
  cfg.validate();
  data.validate();
  const std::vector<std::size_t> targets = layers_to_prune(net, cfg);
  const std::size_t depth = net.depth();

  std::vector<LayerCovariance> covs;
  std::vector<LayerPlan> plans;
  for (auto l : targets) {
    covs.push_back(pruning_cov(net, data, l));
    plans.push_back(resolve(covs.back(), cfg));
  }
  auto slot = [&](std::size_t l) -> std::optional<std::size_t> {
    const auto it = std::find(targets.begin(), targets.end(), l);
    if (it == targets.end()) return std::nullopt;
    return static_cast<std::size_t>(it - targets.begin());
  };

  PruneOutcome outcome;
  std::vector<std::optional<LayerPruning>> results(targets.size());
  if (cfg.procedure == Procedure::Backward) {
    IndexList next_selected = iota_indices(net.output_dim());
    std::optional<LeverageScores> next_leverage;
    for (std::size_t l = depth; l >= 2; --l) {
      const auto idx = slot(l);
      if (!idx) {
        next_selected = iota_indices(net.weight_layer(l - 1).out_units());
        next_leverage.reset();
        continue;
      }
      const LayerCovariance& cov = covs[*idx];
      ZSpec z = make_Z_backward(net, l, next_selected, next_leverage);
      CrossCovariance cross = cross_for(net, data, cov, z);
      SelectionResult sel = greedy_select(cov, cross, options_for(cfg, plans[*idx]));
      next_selected = sel.selected;
      next_leverage = leverage(cov, plans[*idx].lambda);
      results[*idx] = LayerPruning{std::move(sel), std::move(z), cov, std::move(cross)};
    }
  } else {
    std::vector<LeverageScores> levs;
    for (std::size_t i = 0; i < targets.size(); ++i) levs.push_back(leverage(covs[i], plans[i].lambda));
    const double radius = row_norm_radius(net);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const std::size_t l = targets[i];
      std::optional<LeverageScores> next_leverage;
      if (const auto next = slot(l + 1)) next_leverage = levs[*next];
      ZSpec z = make_Z_simultaneous(net, l, next_leverage, radius);
      CrossCovariance cross = cross_for(net, data, covs[i], z);
      SelectionResult sel = greedy_select(covs[i], cross, options_for(cfg, plans[i]));
      results[i] = LayerPruning{std::move(sel), std::move(z), covs[i], std::move(cross)};
    }
  }

  std::vector<SelectionResult> selections;
  for (auto& r : results) {
    outcome.infeasible = outcome.infeasible || r->selection.infeasible;
    selections.push_back(r->selection);
    outcome.layers.push_back(std::move(*r));
  }
  outcome.compressed = compress(net, selections);
  return outcome;
}

Network compress(const Network& net, const std::vector<SelectionResult>& selections) {
  const std::size_t depth = net.depth();
  std::vector<const SelectionResult*> by_layer(depth + 2, nullptr);
  for (const auto& s : selections) {
    if (s.layer < 2 || s.layer > depth) throw Error(ErrorCode::IndexOutOfRange, "selection for layer " + std::to_string(s.layer));
    if (!prunable(net, s.layer))
      throw Error(ErrorCode::UnsupportedLayer, "layer " + std::to_string(s.layer) + " is not prunable");
    by_layer[s.layer] = &s;
  }

  std::vector<Layer> layers;
  for (std::size_t l = 1; l <= depth; ++l) {
    Layer layer = net.weight_layer(l);
    const SelectionResult* in = by_layer[l];
    const SelectionResult* out = l + 1 <= depth ? by_layer[l + 1] : nullptr;
    const IndexList out_rows = out ? out->selected : iota_indices(static_cast<std::size_t>(layer.weight.rows()));

    Matrix w = gather_rows(layer.weight, out_rows);
    if (in) {
      const Matrix& a = in->reconstruction;
      if (layer.kind == LayerKind::Dense) {
        w = w * a;
      } else {
        const ConvGeometry& g = *layer.conv;
        const auto kk = static_cast<Eigen::Index>(g.kernel * g.kernel);
        Matrix folded(w.rows(), a.cols() * kk);
        for (Eigen::Index o = 0; o < w.rows(); ++o) {
          const Eigen::Map<const Matrix> kernel(w.row(o).data(), static_cast<Eigen::Index>(g.in_channels), kk);
          Eigen::Map<Matrix>(folded.row(o).data(), a.cols(), kk) = a.transpose() * kernel;
        }
        w = std::move(folded);
      }
    }
    layer.bias = gather(layer.bias, out_rows);
    layer.weight = std::move(w);
    if (layer.conv) {
      if (in) layer.conv->in_channels = in->selected.size();
      layer.conv->out_channels = out_rows.size();
    }
    layers.push_back(std::move(layer));
  }
  return Network(std::move(layers));
}

double compression_error(const Network& a, const Network& b, const Dataset& data) {
  if (a.input_dim() != b.input_dim() || a.output_dim() != b.output_dim())
    throw Error(ErrorCode::ShapeMismatch, "networks have different input or output dimensions");
  data.validate();
  const Matrix diff = forward_batch(a, data.inputs) - forward_batch(b, data.inputs);
  return std::sqrt(diff.squaredNorm() / static_cast<double>(data.size()));
}

double relative_compression_error(const Network& a, const Network& b, const Dataset& data) {
  const Matrix outputs = forward_batch(a, data.inputs);
  const double norm = std::sqrt(outputs.squaredNorm() / static_cast<double>(data.size()));
  if (!(norm > 0.0)) throw Error(ErrorCode::ZeroMatrix, "reference network output is identically zero");
  return compression_error(a, b, data) / norm;
}

}  // namespace specprune
