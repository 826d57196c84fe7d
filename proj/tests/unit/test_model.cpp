#include <gtest/gtest.h>

#include <fstream>

#include "specprune/error.hpp"
#include "specprune/io.hpp"
#include "specprune/model.hpp"
#include "test_support.hpp"

using namespace specprune;
using specprune::testing::random_matrix;

namespace {

Layer dense(Matrix w, Vector b, Activation act) {
  Layer l;
  l.weight = std::move(w);
  l.bias = std::move(b);
  l.activation = act;
  return l;
}

}  // namespace

TEST(Forward, IdentityLayer) {
  const Network net({dense(Matrix::Identity(3, 3), Vector::Zero(3), Activation::none())});
  const Vector x = Vector::LinSpaced(3, -1.0, 2.0);
  EXPECT_EQ(forward(net, x), x);
}

TEST(Forward, NegatedReluKillsPositiveInputs) {
  const Network net({dense(-Matrix::Identity(3, 3), Vector::Zero(3), Activation::relu()),
                     dense(Matrix::Identity(3, 3), Vector::Zero(3), Activation::none())});
  const Vector x = Vector::Constant(3, 0.7);
  EXPECT_EQ(forward_capture(net, x, 2), Vector::Zero(3));
  EXPECT_EQ(forward(net, x), Vector::Zero(3));
}

TEST(Forward, CaptureIdentityHidden) {
  const Network net({dense(Matrix::Identity(3, 3), Vector::Zero(3), Activation::relu()),
                     dense(Matrix::Ones(1, 3), Vector::Zero(1), Activation::none())});
  const Vector x(Vector::LinSpaced(3, 0.0, 2.0));
  EXPECT_EQ(forward_capture(net, x, 2), x);
}

TEST(Forward, HandEvaluatedTwoLayerNet) {
  Matrix w1(2, 3);
  w1 << 1, -2, 0.5, -1, 1, 1;
  Vector b1(2);
  b1 << 0.1, -0.2;
  Matrix w2(1, 2);
  w2 << 2, -3;
  Vector b2(1);
  b2 << 0.25;
  const Network net({dense(w1, b1, Activation::leaky_relu(0.1)), dense(w2, b2, Activation::none())});
  Vector x(3);
  x << 0.3, 0.4, -0.6;
  // hidden pre-activations: 0.3 - 0.8 - 0.3 + 0.1 = -0.7 ; -0.3 + 0.4 - 0.6 - 0.2 = -0.7
  const double h0 = -0.07, h1 = -0.07;
  EXPECT_NEAR(forward(net, x)(0), 2 * h0 - 3 * h1 + 0.25, 1e-15);
}

TEST(Forward, CompositionWithCapture) {
  const Network net = init_dense({5, 7, 6, 3}, Activation::relu(), 4);
  const Vector x = random_matrix(5, 1, 8).col(0);
  const Vector phi = forward_capture(net, x, 3);
  const Layer& last = net.weight_layer(3);
  const Vector expected = last.weight * phi + last.bias;
  EXPECT_LT((forward(net, x) - expected).norm(), 1e-12);
}

TEST(Forward, ShapeMismatch) {
  const Network net = init_dense({4, 3, 2}, Activation::relu(), 1);
  try {
    forward(net, Vector::Zero(5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(Activation, ScaleInvarianceOfNetwork) {
  Network net = init_dense({4, 6, 2}, Activation::leaky_relu(0.2), 9);
  std::vector<Layer> layers = net.layers();
  const double a = 3.7;
  layers[0].weight *= a;
  layers[0].bias = Vector::Constant(6, 0.3);
  Vector b0 = layers[0].bias;
  layers[0].bias *= a;
  layers[1].weight /= a;
  std::vector<Layer> base = net.layers();
  base[0].bias = b0;
  const Network scaled(layers), original(base);
  const Matrix x = random_matrix(10, 4, 2);
  EXPECT_LT((forward_batch(scaled, x) - forward_batch(original, x)).norm(), 1e-12);
}

TEST(Activation, OneLipschitz) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (const auto& act : {Activation::relu(), Activation::leaky_relu(0.3), Activation::leaky_relu(1.0)})
    for (int i = 0; i < 1000; ++i) {
      const double p = u(rng), q = u(rng);
      EXPECT_LE(std::abs(act.apply(p) - act.apply(q)), std::abs(p - q) + 1e-15);
    }
}

TEST(Network, RejectsBadActivations) {
  EXPECT_THROW(Network({dense(Matrix::Identity(2, 2), Vector::Zero(2), Activation::relu())}), Error);
  EXPECT_THROW(Network({dense(Matrix::Identity(2, 2), Vector::Zero(2), Activation::leaky_relu(1.5)),
                        dense(Matrix::Identity(2, 2), Vector::Zero(2), Activation::none())}),
               Error);
}

TEST(Network, WidthsFollowLayerConvention) {
  const Network net = init_dense({784, 300, 1000, 300, 10}, Activation::relu(), 1);
  EXPECT_EQ(net.depth(), 4u);
  EXPECT_EQ(net.width(1), 784u);
  EXPECT_EQ(net.width(3), 1000u);
  EXPECT_EQ(net.width(4), 300u);
  EXPECT_EQ(net.width(5), 10u);
}

TEST(Conv, Im2colMatchesDirectConvolution) {
  const Network net = init_network(parse_architecture("2x5x5:c3k3s2p1:d4"), Activation::relu(), 5);
  const Layer& conv = net.weight_layer(1);
  const ConvGeometry& g = *conv.conv;
  const Matrix x = random_matrix(1, 50, 6);
  const Matrix got = layer_affine(conv, x);
  for (std::size_t o = 0; o < g.out_channels; ++o)
    for (std::size_t oy = 0; oy < g.out_height(); ++oy)
      for (std::size_t ox = 0; ox < g.out_width(); ++ox) {
        double sum = conv.bias(static_cast<Eigen::Index>(o));
        for (std::size_t c = 0; c < g.in_channels; ++c)
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const long iy = static_cast<long>(oy * 2 + ky) - 1, ix = static_cast<long>(ox * 2 + kx) - 1;
              if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
              sum += conv.weight(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(c * 9 + ky * 3 + kx)) *
                     x(0, static_cast<Eigen::Index>(c * 25 + static_cast<std::size_t>(iy) * 5 + static_cast<std::size_t>(ix)));
            }
        const auto idx = static_cast<Eigen::Index>(o * g.out_positions() + oy * g.out_width() + ox);
        EXPECT_NEAR(got(0, idx), sum, 1e-12);
      }
}

TEST(Conv, Col2imIsAdjointOfIm2col) {
  ConvGeometry g{2, 1, 3, 1, 1, 4, 4};
  const Matrix x = random_matrix(1, static_cast<Eigen::Index>(g.in_size()), 1);
  const Matrix y = random_matrix(static_cast<Eigen::Index>(g.patch_size()), static_cast<Eigen::Index>(g.out_positions()), 2);
  const double lhs = (im2col(g, x.data()).array() * y.array()).sum();
  Vector back = Vector::Zero(static_cast<Eigen::Index>(g.in_size()));
  col2im(g, y, back.data());
  EXPECT_NEAR(lhs, x.row(0).dot(back.transpose()), 1e-12);
}

TEST(Architecture, ParsesDenseAndConv) {
  const auto a = parse_architecture("1x8x8:c4k3s1p1:d10");
  EXPECT_EQ(a.input_dim(), 64u);
  ASSERT_EQ(a.layers.size(), 2u);
  EXPECT_EQ(a.layers[0].kind, LayerKind::Conv2d);
  EXPECT_EQ(a.layers[0].padding, 1u);
  EXPECT_THROW(parse_architecture("784:x3"), Error);
}

TEST(Serialization, RoundTripIsBitwise) {
  const auto dir = specprune::testing::scratch_dir("model_rt");
  const Network net = init_network(parse_architecture("2x6x6:c3k3p1:c4k3s2:d5"), Activation::leaky_relu(0.05), 3);
  save_network(net, dir);
  const Network back = load_network(dir);
  ASSERT_EQ(back.depth(), net.depth());
  for (std::size_t l = 1; l <= net.depth(); ++l) {
    EXPECT_EQ(back.weight_layer(l).weight, net.weight_layer(l).weight);
    EXPECT_EQ(back.weight_layer(l).bias, net.weight_layer(l).bias);
    EXPECT_EQ(back.weight_layer(l).activation.kind, net.weight_layer(l).activation.kind);
  }
  const Matrix x = random_matrix(3, 72, 4);
  EXPECT_EQ(forward_batch(back, x), forward_batch(net, x));
}

TEST(Serialization, FuzzRoundTripManifestDims) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> width(1, 9);
    std::vector<std::size_t> widths{width(rng), width(rng), width(rng), width(rng)};
    const Network net = init_dense(widths, Activation::relu(), seed);
    const auto dir = specprune::testing::scratch_dir("model_fuzz");
    save_network(net, dir);
    const auto manifest = read_json(dir / "manifest.json");
    ASSERT_EQ(manifest["layers"].size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(manifest["layers"][i]["in_dim"].get<std::size_t>(), widths[i]);
      EXPECT_EQ(manifest["layers"][i]["out_dim"].get<std::size_t>(), widths[i + 1]);
    }
    EXPECT_EQ(load_network(dir).parameter_count(), net.parameter_count());
  }
}

TEST(Serialization, TruncatedBlobIsCorrupt) {
  const auto dir = specprune::testing::scratch_dir("model_bad");
  const Network net = init_dense({3, 4, 2}, Activation::relu(), 1);
  save_network(net, dir);
  std::filesystem::resize_file(dir / "layer1_weight.bin", 8);
  try {
    load_network(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptManifest);
  }
}
