#include <gtest/gtest.h>

#include <cmath>

#include "../common/oracles.hpp"
#include "specprune/error.hpp"
#include "specprune/pruner.hpp"
#include "test_support.hpp"

using namespace specprune;
using specprune::testing::random_matrix;
using specprune::testing::random_psd;
using specprune::testing::rel_diff;

namespace {

LayerCovariance diag_cov(std::vector<double> values) {
  Vector d = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
  return LayerCovariance(2, Matrix(d.asDiagonal()), 1);
}

SelectionOptions options(double theta, std::size_t m_sharp, double lambda, bool budget = false) {
  SelectionOptions opt;
  opt.theta = theta;
  opt.m_sharp = m_sharp;
  opt.lambda = lambda;
  opt.budget_constraint = budget;
  return opt;
}

ZSpec plain_z(Matrix z) {
  ZSpec spec;
  spec.layer = 2;
  spec.z = std::move(z);
  return spec;
}

Dataset data_for(std::size_t n, std::size_t d, std::size_t outputs, std::uint64_t seed) {
  return specprune::testing::random_dataset(n, d, outputs, seed);
}

// A one-hidden-layer net where hidden nodes 1 and 3 share incoming weights and bias.
Network duplicate_node_net() {
  Network base = init_dense({6, 5, 2}, Activation::relu(), 21);
  std::vector<Layer> layers = base.layers();
  layers[0].bias = random_matrix(5, 1, 22).col(0) * 0.1;
  layers[0].weight.row(3) = layers[0].weight.row(1);
  layers[0].bias(3) = layers[0].bias(1);
  return Network(layers);
}

}  // namespace

TEST(LossA, TrivialCases) {
  const LayerCovariance cov(2, random_psd(5, 1), 1);
  EXPECT_NEAR(loss_A(cov, iota_indices(5), Vector::Zero(5)), 0.0, 1e-10 * cov.trace());
  EXPECT_DOUBLE_EQ(loss_A(cov, {}, Vector()), cov.trace());
  EXPECT_THROW(loss_A(cov, {0, 1}, Vector::Zero(3)), Error);
}

TEST(LossA, MatchesRidgeRegressionOnRawActivations) {
  const Matrix phi = random_matrix(200, 6, 3);
  const auto cov = covariance_of(phi, 2);
  const IndexList J{0, 2, 5};
  const Vector tau = Vector::Constant(3, 0.05);
  const double oracle = oracle::ridge_residual(phi, J, tau, phi);
  EXPECT_LT(std::abs(loss_A(cov, J, tau) - oracle) / oracle, 1e-8);
}

TEST(LossB, ReductionsAndRegressionOracle) {
  const Matrix phi = random_matrix(150, 6, 4);
  const auto cov = covariance_of(phi, 2);
  const IndexList J{1, 4};
  const Vector tau(Vector::Constant(2, 0.1));
  EXPECT_NEAR(loss_B(cov, Matrix(Matrix::Identity(6, 6)), J, tau), loss_A(cov, J, tau), 1e-12);
  EXPECT_EQ(loss_B(cov, Matrix(Matrix::Zero(3, 6)), J, tau), 0.0);
  const Matrix z = random_matrix(3, 6, 5);
  const double oracle = oracle::ridge_residual(phi, J, tau, phi * z.transpose());
  EXPECT_LT(std::abs(loss_B(cov, z, J, tau) - oracle) / oracle, 1e-8);
}

TEST(Reconstruction, ClosedFormAndPerRowCoefficients) {
  const LayerCovariance cov(2, random_psd(5, 6), 1);
  const IndexList J{0, 3};
  const Vector tau = Vector::Constant(2, 0.2);
  const Matrix a = reconstruction_matrix(cov, J, tau);
  Matrix sjj = submatrix(cov.sigma(), J, J);
  sjj.diagonal() += tau;
  const Matrix expected = submatrix(cov.sigma(), iota_indices(5), J) * sjj.inverse();
  EXPECT_LT(rel_diff(a, expected), 1e-12);
}

TEST(Greedy, FullWidthSelectsEverything) {
  const LayerCovariance cov(2, random_psd(6, 2), 1);
  const auto sel = greedy_select(cov, plain_z(Matrix::Identity(6, 6)), options(0.5, 6, 0.1));
  EXPECT_EQ(sel.selected, iota_indices(6));
  EXPECT_FALSE(sel.infeasible);
}

TEST(Greedy, DiagonalPicksDominantNode) {
  const auto cov = diag_cov({5.0, 1.0, 0.1});
  const auto sel = greedy_select(cov, plain_z(Matrix::Identity(3, 3)), options(1.0, 1, 1e-6));
  EXPECT_EQ(sel.selected, IndexList{0});
}

TEST(Greedy, TiesGoToLowestIndex) {
  const LayerCovariance cov(2, Matrix::Identity(4, 4), 1);
  const auto sel = greedy_select(cov, plain_z(Matrix::Identity(4, 4)), options(0.5, 2, 0.1));
  EXPECT_EQ(sel.selected, (IndexList{0, 1}));
}

TEST(Greedy, NearOptimalAgainstExhaustiveSearch) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const LayerCovariance cov(2, random_psd(8, seed, 5), 1);
    const Matrix z = random_matrix(3, 8, seed + 50);
    const double lambda = 1e-2 * cov.trace();
    const auto sel = greedy_select(cov, plain_z(z), options(0.5, 3, lambda));
    const Vector tau_all = make_tau(TauPolicy::leverage(), leverage(cov, lambda), 3);
    auto objective = [&](const IndexList& J) {
      return 0.5 * oracle::residual_trace(cov.sigma(), Matrix::Identity(8, 8), J, tau_all) +
             0.5 * oracle::residual_trace(cov.sigma(), z, J, tau_all);
    };
    const double start = objective({});
    double best = start;
    oracle::for_each_subset(8, 3, [&](const IndexList& J) { best = std::min(best, objective(J)); });
    const double greedy = objective(sel.selected);
    EXPECT_NEAR(greedy, sel.losses.combined, 1e-9 * start);
    EXPECT_GE(start - greedy, (1.0 - std::exp(-1.0)) * (start - best) - 1e-12 * start);
  }
}

TEST(Greedy, PathMonotoneAndMatchesNaiveEvaluation) {
  const LayerCovariance cov(2, random_psd(10, 7), 1);
  const Matrix z = random_matrix(4, 10, 8);
  const double lambda = 1e-3 * cov.trace();
  const auto sel = greedy_select(cov, plain_z(z), options(0.3, 6, lambda));
  ASSERT_EQ(sel.path.size(), 6u);
  for (std::size_t i = 1; i < sel.path.size(); ++i) EXPECT_LE(sel.path[i], sel.path[i - 1] + 1e-12);
  EXPECT_NEAR(sel.path.back(), sel.losses.combined, 1e-9 * cov.trace());
  EXPECT_DOUBLE_EQ(sel.losses.combined, 0.3 * sel.losses.input + 0.7 * sel.losses.output);
}

TEST(Greedy, InputLossFavoursThetaOne) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const LayerCovariance cov(2, random_psd(9, seed), 1);
    const Matrix z = random_matrix(2, 9, seed + 9);
    auto opt = options(1.0, 3, 0.0);
    opt.tau = TauPolicy::scalar(1e-3);
    const auto input_only = greedy_select(cov, plain_z(z), opt);
    opt.theta = 0.0;
    const auto output_only = greedy_select(cov, plain_z(z), opt);
    const Vector tau = Vector::Constant(3, 1e-3);
    EXPECT_LE(loss_A(cov, input_only.selected, tau), loss_A(cov, output_only.selected, tau) + 1e-12);
  }
}

TEST(Greedy, WiderSelectionsNeverIncreaseObjective) {
  const LayerCovariance cov(2, random_psd(8, 3), 1);
  const Matrix z = random_matrix(3, 8, 4);
  auto opt = options(0.5, 1, 0.0);
  opt.tau = TauPolicy::scalar(1e-2);
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t m = 1; m <= 8; ++m) {
    opt.m_sharp = m;
    const double value = greedy_select(cov, plain_z(z), opt).losses.combined;
    EXPECT_LE(value, previous + 1e-12);
    previous = value;
  }
}

TEST(Greedy, ZeroVarianceNodesAreExcluded) {
  const auto cov = diag_cov({2.0, 0.0, 1.0});
  const auto sel = greedy_select(cov, plain_z(Matrix::Identity(3, 3)), options(0.5, 3, 0.1));
  EXPECT_EQ(sel.selected, (IndexList{0, 2}));
  EXPECT_EQ(sel.excluded, IndexList{1});
}

TEST(Greedy, BudgetConstraintFlagsInfeasible) {
  // One node carries almost no leverage, so 1/q is huge and cannot fit.
  const auto cov = diag_cov({1.0, 1.0, 1e-9});
  const auto sel = greedy_select(cov, plain_z(Matrix::Identity(3, 3)), options(0.5, 3, 1e-3, true));
  EXPECT_TRUE(sel.infeasible);
  EXPECT_EQ(sel.selected, (IndexList{0, 1}));
  EXPECT_LE(sel.budget_used, sel.budget_limit);
}

TEST(MakeZBackward, SingleRowAndUniformWeights) {
  const Network net = init_dense({4, 6, 5, 2}, Activation::relu(), 3);
  const auto one = make_Z_backward(net, 2, {2}, std::nullopt);
  ASSERT_EQ(one.z.rows(), 1);
  EXPECT_DOUBLE_EQ(one.q(0), 1.0);
  LeverageScores flat;
  flat.scores = Vector::Constant(5, 0.2);
  const auto uniform = make_Z_backward(net, 2, {0, 1, 4}, flat);
  for (Eigen::Index k = 0; k < 3; ++k) EXPECT_NEAR(uniform.q(k), 1.0 / 3.0, 1e-15);
}

TEST(MakeZBackward, RowNormsFollowScaling) {
  const Network net = init_dense({4, 6, 5, 2}, Activation::relu(), 4);
  LeverageScores lev;
  lev.scores = Vector::LinSpaced(5, 1.0, 5.0) / 15.0;
  const IndexList next{0, 3, 4};
  const auto spec = make_Z_backward(net, 2, next, lev);
  const Matrix& w = net.weight_layer(2).weight;
  const double max_sq = w.rowwise().squaredNorm().maxCoeff();
  double inv_sum = 0.0;
  for (auto j : next) inv_sum += 1.0 / lev.scores(static_cast<Eigen::Index>(j));
  for (std::size_t k = 0; k < next.size(); ++k) {
    const auto j = static_cast<Eigen::Index>(next[k]);
    const double q = (1.0 / lev.scores(j)) / inv_sum;
    EXPECT_NEAR(spec.q(static_cast<Eigen::Index>(k)), q, 1e-15);
    EXPECT_NEAR(spec.z.row(static_cast<Eigen::Index>(k)).squaredNorm(), 6.0 * q * w.row(j).squaredNorm() / max_sq, 1e-12);
  }
  EXPECT_NEAR(spec.q.sum(), 1.0, 1e-15);
}

TEST(MakeZBackward, ZeroWeightsRejected) {
  Network base = init_dense({3, 4, 2}, Activation::relu(), 1);
  std::vector<Layer> layers = base.layers();
  layers[1].weight.setZero();
  try {
    make_Z_backward(Network(layers), 2, {0, 1}, std::nullopt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroRowNorm);
  }
}

TEST(MakeZSimultaneous, OrthonormalAndSingleRows) {
  Network base = init_dense({3, 4, 4, 1}, Activation::relu(), 2);
  std::vector<Layer> layers = base.layers();
  const Eigen::HouseholderQR<Matrix> qr(random_matrix(4, 4, 3));
  layers[1].weight = Matrix(qr.householderQ());
  const auto ortho = make_Z_simultaneous(Network(layers), 2, std::nullopt);
  EXPECT_LT(rel_diff(ortho.z, layers[1].weight), 1e-14);
  const auto single = make_Z_simultaneous(base, 3, std::nullopt);
  ASSERT_EQ(single.z.rows(), 1);
  EXPECT_LT(rel_diff(single.z, base.weight_layer(3).weight.normalized()), 1e-14);
}

TEST(MakeZSimultaneous, CScaleIsTightestRatioAndZeroRowsDropped) {
  Network base = init_dense({3, 5, 4, 1}, Activation::relu(), 5);
  std::vector<Layer> layers = base.layers();
  layers[1].weight.row(2).setZero();
  const Network net(layers);
  LeverageScores lev;
  lev.scores = Vector::LinSpaced(4, 1.0, 4.0) / 10.0;
  const double radius = 1.7;
  const auto spec = make_Z_simultaneous(net, 2, lev, radius);
  EXPECT_EQ(spec.dropped, IndexList{2});
  double c = 0.0;
  for (Eigen::Index j = 0; j < 4; ++j)
    c = std::max(c, net.weight_layer(2).weight.row(j).squaredNorm() / (radius * radius * lev.scores(j)));
  EXPECT_NEAR(spec.c_scale, c, 1e-14 * c);
  for (Eigen::Index j = 0; j < 4; ++j)
    EXPECT_LE(net.weight_layer(2).weight.row(j).squaredNorm(), spec.c_scale * radius * radius * lev.scores(j) * (1 + 1e-12));

  layers[1].weight.setZero();
  EXPECT_THROW(make_Z_simultaneous(Network(layers), 2, std::nullopt), Error);
}

TEST(Prune, IdentityCompressionDense) {
  const Network net = init_dense({5, 8, 7, 3}, Activation::leaky_relu(0.1), 3);
  const Dataset data = data_for(100, 5, 3, 4);
  PruneConfig cfg;
  cfg.widths = {{2, 8}, {3, 7}};
  cfg.tau = TauPolicy::scalar(0.0);
  cfg.budget_constraint = false;
  for (auto proc : {Procedure::Backward, Procedure::Simultaneous}) {
    cfg.procedure = proc;
    const auto outcome = prune(net, data, cfg);
    EXPECT_LT(compression_error(net, outcome.compressed, data), 1e-8);
  }
}

TEST(Prune, DuplicateNodeIsDropped) {
  const Network net = duplicate_node_net();
  const Dataset data = data_for(200, 6, 2, 9);
  PruneConfig cfg;
  cfg.widths = {{2, 4}};
  cfg.tau = TauPolicy::scalar(0.0);
  cfg.budget_constraint = false;
  const auto outcome = prune(net, data, cfg);
  const auto& sel = outcome.layers.front().selection.selected;
  ASSERT_EQ(sel.size(), 4u);
  EXPECT_TRUE(std::count(sel.begin(), sel.end(), 1u) + std::count(sel.begin(), sel.end(), 3u) == 1);
  EXPECT_LT(compression_error(net, outcome.compressed, data), 1e-6);
  EXPECT_EQ(outcome.compressed.width(2), 4u);
}

TEST(Prune, ConvChannelsIdentityAndShrink) {
  const Network net = init_network(parse_architecture("2x5x5:c4k3p1:c3k3p1:d2"), Activation::relu(), 6);
  const Dataset data = data_for(20, 50, 2, 7);
  PruneConfig cfg;
  cfg.widths = {{2, 4}};
  cfg.tau = TauPolicy::scalar(0.0);
  EXPECT_LT(compression_error(net, prune(net, data, cfg).compressed, data), 1e-8);

  cfg.widths = {{2, 2}};
  cfg.tau = TauPolicy::leverage();
  cfg.lambda_coef = 1e-3;
  const auto outcome = prune(net, data, cfg);
  EXPECT_EQ(outcome.compressed.weight_layer(1).conv->out_channels, 2u);
  EXPECT_EQ(outcome.compressed.weight_layer(2).conv->in_channels, 2u);
  EXPECT_EQ(outcome.compressed.weight_layer(2).weight.cols(), 18);
  EXPECT_TRUE(std::isfinite(compression_error(net, outcome.compressed, data)));
}

TEST(Prune, ConvToDenseBoundaryRejected) {
  const Network net = init_network(parse_architecture("1x4x4:c2k3p1:d3"), Activation::relu(), 1);
  PruneConfig cfg;
  cfg.widths = {{2, 1}};
  try {
    prune(net, data_for(5, 16, 3, 1), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnsupportedLayer);
  }
}

TEST(Prune, ConfigValidation) {
  const Network net = init_dense({3, 4, 2}, Activation::relu(), 1);
  const Dataset data = data_for(10, 3, 2, 1);
  PruneConfig cfg;
  EXPECT_THROW(prune(net, data, cfg), Error);  // nothing to prune
  cfg.widths = {{2, 5}};
  EXPECT_THROW(prune(net, data, cfg), Error);  // wider than the layer
  cfg.widths = {{2, 2}};
  cfg.theta = 1.5;
  EXPECT_THROW(prune(net, data, cfg), Error);
  cfg.theta = 0.5;
  cfg.layers = {3};
  EXPECT_THROW(prune(net, data, cfg), Error);  // width for a layer not in the list
}

TEST(CompressionError, SelfShiftAndLoop) {
  const Network net = init_dense({3, 4, 2}, Activation::relu(), 2);
  const Dataset data = data_for(30, 3, 2, 3);
  EXPECT_EQ(compression_error(net, net, data), 0.0);
  std::vector<Layer> shifted = net.layers();
  shifted[1].bias(0) += 0.75;
  EXPECT_NEAR(compression_error(net, Network(shifted), data), 0.75, 1e-12);

  const Network other = init_dense({3, 4, 2}, Activation::relu(), 9);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < 30; ++i) {
    const Vector x = data.inputs.row(i).transpose();
    sum += (forward(net, x) - forward(other, x)).squaredNorm();
  }
  EXPECT_NEAR(compression_error(net, other, data), std::sqrt(sum / 30.0), 1e-12);
  EXPECT_THROW(compression_error(net, init_dense({3, 4, 3}, Activation::relu(), 1), data), Error);
}

TEST(SelectionJson, CarriesIndicesAndLosses) {
  const LayerCovariance cov(2, random_psd(4, 1), 1);
  const auto sel = greedy_select(cov, plain_z(Matrix::Identity(4, 4)), options(0.5, 2, 0.1));
  const auto j = to_json(sel);
  EXPECT_EQ(j["selected"].get<IndexList>(), sel.selected);
  EXPECT_DOUBLE_EQ(j["losses"]["combined"].get<double>(), sel.losses.combined);
}
