#include <gtest/gtest.h>

#include "specprune/covariance.hpp"
#include "specprune/error.hpp"
#include "test_support.hpp"

using namespace specprune;
using specprune::testing::random_matrix;
using specprune::testing::rel_diff;

namespace {

Layer dense(Matrix w, Vector b, Activation act) {
  Layer l;
  l.weight = std::move(w);
  l.bias = std::move(b);
  l.activation = act;
  return l;
}

// Identity first layer so phi^(2) equals the (nonnegative) input.
Network passthrough(std::size_t m) {
  return Network({dense(Matrix::Identity(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m)),
                        Vector::Zero(static_cast<Eigen::Index>(m)), Activation::relu()),
                  dense(Matrix::Ones(1, static_cast<Eigen::Index>(m)), Vector::Zero(1), Activation::none())});
}

Dataset inputs_only(Matrix x) {
  Dataset d;
  d.targets = Matrix::Zero(x.rows(), 1);
  d.inputs = std::move(x);
  d.name = "t";
  return d;
}

// Conv -> conv toy: 2 input channels on a 4x4 map, identity-like first conv.
Network conv_toy(std::size_t kernel, std::size_t padding, std::uint64_t seed) {
  return init_network(parse_architecture("2x4x4:c2k1:c3k" + std::to_string(kernel) + "p" + std::to_string(padding) + ":d2"),
                      Activation::relu(), seed);
}

}  // namespace

TEST(LayerCov, SingleSampleOuterProduct) {
  Matrix x = Matrix::Zero(1, 3);
  x(0, 0) = 1.0;
  const auto cov = layer_cov(passthrough(3), inputs_only(x), 2);
  Matrix expected = Matrix::Zero(3, 3);
  expected(0, 0) = 1.0;
  EXPECT_EQ(cov.sigma(), expected);
}

TEST(LayerCov, DuplicatedDatasetUnchanged) {
  const Matrix x = random_matrix(20, 5, 1).cwiseAbs();
  Matrix twice(40, 5);
  twice << x, x;
  const Network net = passthrough(5);
  EXPECT_LT(rel_diff(layer_cov(net, inputs_only(twice), 2).sigma(), layer_cov(net, inputs_only(x), 2).sigma()), 1e-14);
}

TEST(LayerCov, MatchesOuterProductLoop) {
  const Network net = init_dense({4, 5, 2}, Activation::relu(), 7);
  const Dataset data = specprune::testing::random_dataset(50, 4, 2, 3);
  const auto cov = layer_cov(net, data, 2, 16);
  Matrix expected = Matrix::Zero(5, 5);
  for (Eigen::Index i = 0; i < 50; ++i) {
    const Vector phi = forward_capture(net, data.inputs.row(i).transpose(), 2);
    expected += phi * phi.transpose();
  }
  expected /= 50.0;
  EXPECT_LT(rel_diff(cov.sigma(), expected), 1e-12);
  EXPECT_NEAR(cov.trace(), expected.trace(), 1e-12 * expected.trace());
  EXPECT_GE(cov.spectrum().eigenvalues.minCoeff(), -1e-10 * cov.trace());
}

TEST(LayerCov, BatchSizeDoesNotMatterAndIndexChecked) {
  const Network net = init_dense({4, 6, 2}, Activation::relu(), 1);
  const Dataset data = specprune::testing::random_dataset(37, 4, 2, 2);
  EXPECT_LT(rel_diff(layer_cov(net, data, 2, 5).sigma(), layer_cov(net, data, 2, 256).sigma()), 1e-13);
  try {
    layer_cov(net, data, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IndexOutOfRange);
  }
  EXPECT_THROW(layer_cov(net, data, 3), Error);
}

TEST(LayerCov, PermutationStable) {
  const Network net = init_dense({3, 4, 1}, Activation::relu(), 4);
  const Dataset data = specprune::testing::random_dataset(64, 3, 1, 5);
  Dataset reversed = data;
  reversed.inputs = data.inputs.colwise().reverse();
  EXPECT_LT(rel_diff(layer_cov(net, reversed, 2).sigma(), layer_cov(net, data, 2).sigma()), 1e-12);
}

TEST(ChannelCov, MatchesHandLoop) {
  const Network net = conv_toy(3, 1, 2);
  const Dataset data = specprune::testing::random_dataset(3, 32, 2, 6);
  const auto cov = channel_cov(net, data, 2);
  ASSERT_TRUE(cov.channelwise());
  Matrix expected = Matrix::Zero(2, 2);
  for (Eigen::Index i = 0; i < 3; ++i) {
    const Vector phi = forward_capture(net, data.inputs.row(i).transpose(), 2);
    for (int k = 0; k < 2; ++k)
      for (int kk = 0; kk < 2; ++kk) {
        double s = 0.0;
        for (int p = 0; p < 16; ++p) s += phi(k * 16 + p) * phi(kk * 16 + p);
        expected(k, kk) += s / 16.0;
      }
  }
  expected /= 3.0;
  EXPECT_LT(rel_diff(cov.sigma(), expected), 1e-12);
}

TEST(ChannelCov, ConstantChannelsGiveOuterProduct) {
  // First conv has zero weights and biases (c0, c1): every position holds the bias.
  Network base = conv_toy(1, 0, 3);
  std::vector<Layer> layers = base.layers();
  layers[0].weight.setZero();
  layers[0].bias << 0.5, 2.0;
  const Network net(layers);
  const auto cov = channel_cov(net, specprune::testing::random_dataset(4, 32, 2, 1), 2);
  Matrix expected(2, 2);
  expected << 0.25, 1.0, 1.0, 4.0;
  EXPECT_LT(rel_diff(cov.sigma(), expected), 1e-14);
}

TEST(ChannelCov, DenseConsumerIsUnsupportedForPruning) {
  const Network net = init_network(parse_architecture("1x4x4:c2k3p1:d3:d2"), Activation::relu(), 1);
  const Dataset data = specprune::testing::random_dataset(3, 16, 2, 1);
  try {
    pruning_cov(net, data, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnsupportedLayer);
  }
  EXPECT_THROW(channel_cov(net, data, 3), Error);
}

TEST(ReceptiveField, FullOverlapCounts) {
  const ConvGeometry g{1, 1, 3, 1, 1, 3, 3};
  const auto counts = receptive_counts(g);
  // corners are covered by 4 output positions, edges by 6, the centre by 9
  const std::vector<std::size_t> expected{4, 6, 4, 6, 9, 6, 4, 6, 4};
  EXPECT_EQ(counts, expected);
}

TEST(OutputChannelCov, OneByOneKernelIsPlainCrossCovariance) {
  const Network net = conv_toy(1, 0, 5);
  const Dataset data = specprune::testing::random_dataset(5, 32, 2, 7);
  const Matrix z = net.weight_layer(2).weight;  // 3 x 2
  const auto cross = output_channel_cov(net, data, 2, z);
  const auto cov = channel_cov(net, data, 2);
  EXPECT_LT(rel_diff(cross.z_sigma, z * cov.sigma()), 1e-12);
  EXPECT_NEAR(cross.output_energy, (z * cov.sigma() * z.transpose()).trace(), 1e-12 * cross.output_energy);
}

TEST(OutputChannelCov, ZeroWeightsGiveZero) {
  const Network net = conv_toy(3, 1, 5);
  const auto cross = output_channel_cov(net, specprune::testing::random_dataset(2, 32, 2, 1), 2, Matrix::Zero(3, 18));
  EXPECT_EQ(cross.z_sigma, Matrix::Zero(3, 2));
  EXPECT_EQ(cross.output_energy, 0.0);
}

TEST(DenseCross, MatchesProduct) {
  const Matrix s = specprune::testing::random_psd(5, 3);
  const LayerCovariance cov(2, s, 10);
  const Matrix z = random_matrix(2, 5, 4);
  const auto cross = dense_cross_cov(cov, z);
  EXPECT_LT(rel_diff(cross.z_sigma, z * s), 1e-15);
  EXPECT_NEAR(cross.output_energy, (z * s * z.transpose()).trace(), 1e-12);
  EXPECT_THROW(dense_cross_cov(cov, Matrix::Zero(2, 4)), Error);
}

TEST(EigenReport, NormalisedColumn) {
  Matrix s = Matrix::Zero(2, 2);
  s(0, 0) = 1.0;
  s(1, 1) = 4.0;
  const auto csv = eigen_report(LayerCovariance(2, s, 1));
  EXPECT_EQ(csv.str(), "rank,eigenvalue,normalized\r\n1,4,1\r\n2,1,0.25\r\n");
  try {
    eigen_report(LayerCovariance(2, Matrix::Zero(2, 2), 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroMatrix);
  }
}

TEST(CovarianceIo, RoundTrip) {
  const auto dir = specprune::testing::scratch_dir("cov");
  const LayerCovariance cov(3, specprune::testing::random_psd(4, 2), 17);
  save_covariance(cov, dir);
  const auto back = load_covariance(dir);
  EXPECT_EQ(back.sigma(), cov.sigma());
  EXPECT_EQ(back.layer(), 3u);
  EXPECT_EQ(back.samples(), 17u);
}
