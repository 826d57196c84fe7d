#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "specprune/numerics.hpp"

namespace specprune {

enum class LayerKind { Dense, Conv2d };

/// Elementwise nonlinearity. Hidden layers are restricted to ReLU and
/// leaky ReLU (slope in (0,1]); both are positively homogeneous and
/// 1-Lipschitz. `None` is only legal on the output layer.
struct Activation {
  enum class Kind { None, Relu, LeakyRelu };
  Kind kind = Kind::None;
  double slope = 0.01;

  static Activation none() { return {Kind::None, 0.01}; }
  static Activation relu() { return {Kind::Relu, 0.01}; }
  static Activation leaky_relu(double slope = 0.01) { return {Kind::LeakyRelu, slope}; }

  double apply(double u) const {
    switch (kind) {
      case Kind::Relu: return u > 0.0 ? u : 0.0;
      case Kind::LeakyRelu: return u > 0.0 ? u : slope * u;
      case Kind::None: break;
    }
    return u;
  }
  /// Derivative at pre-activation u (right derivative at 0).
  double derivative(double u) const {
    switch (kind) {
      case Kind::Relu: return u > 0.0 ? 1.0 : 0.0;
      case Kind::LeakyRelu: return u > 0.0 ? 1.0 : slope;
      case Kind::None: break;
    }
    return 1.0;
  }
  void apply_inplace(Matrix& m) const;

  std::string name() const;
  static Activation parse(const std::string& name, double slope = 0.01);
};

/// Spatial layout of a 2-d convolution. Activations are flattened
/// channel-major, then row, then column; kernels are flattened the same way
/// (input channel, kernel row, kernel column).
struct ConvGeometry {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t in_height = 0;
  std::size_t in_width = 0;

  std::size_t out_height() const { return (in_height + 2 * padding - kernel) / stride + 1; }
  std::size_t out_width() const { return (in_width + 2 * padding - kernel) / stride + 1; }
  std::size_t in_positions() const { return in_height * in_width; }
  std::size_t out_positions() const { return out_height() * out_width(); }
  std::size_t patch_size() const { return in_channels * kernel * kernel; }
  std::size_t in_size() const { return in_channels * in_positions(); }
  std::size_t out_size() const { return out_channels * out_positions(); }
};

/// One affine map W x + b followed by an activation.
/// Dense weight: out_dim x in_dim. Conv weight: out_channels x patch_size.
struct Layer {
  LayerKind kind = LayerKind::Dense;
  Matrix weight;
  Vector bias;
  Activation activation;
  std::optional<ConvGeometry> conv;

  std::size_t in_dim() const;
  std::size_t out_dim() const;
  /// Prunable units produced by this layer: nodes for dense, channels for conv.
  std::size_t out_units() const { return kind == LayerKind::Conv2d ? conv->out_channels : out_dim(); }
  std::size_t in_units() const { return kind == LayerKind::Conv2d ? conv->in_channels : in_dim(); }
};

/// Feedforward network f(x) = (W_L eta(.) + b_L) o ... o (W_1 x + b_1).
/// Layer indices in the public API follow the 1-based convention: weight
/// layer l maps phi^(l) (width m_l) to the pre-activation of width m_{l+1};
/// phi^(1) = x and phi^(l) for 2 <= l <= L is the post-activation output of
/// weight layer l-1.
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<Layer> layers);

  const std::vector<Layer>& layers() const { return layers_; }
  /// Number of weight layers L.
  std::size_t depth() const { return layers_.size(); }
  std::size_t input_dim() const { return layers_.front().in_dim(); }
  std::size_t output_dim() const { return layers_.back().out_dim(); }
  /// Weight layer l, 1 <= l <= L.
  const Layer& weight_layer(std::size_t l) const;
  /// Width m_l in prunable units (channels for conv representations).
  std::size_t width(std::size_t l) const;
  std::size_t parameter_count() const;

 private:
  std::vector<Layer> layers_;
};

/// Tightest R with max_j ||W^(l)_{j,:}|| <= R / sqrt(m_{l+1}) over all layers.
double row_norm_radius(const Network& net);
/// Tightest R_b with ||b^(l)||_inf <= R_b / sqrt(m_{l+1}) over all layers.
double bias_radius(const Network& net);

/// Pre-activation output of one layer for a batch (rows are samples).
Matrix layer_affine(const Layer& layer, const Matrix& input);

Vector forward(const Network& net, const Vector& x);
/// phi^(l)(x), 2 <= l <= L.
Vector forward_capture(const Network& net, const Vector& x, std::size_t l);
/// Batched forward; rows of `inputs` are samples.
Matrix forward_batch(const Network& net, const Matrix& inputs);
/// Batched phi^(l) for 2 <= l <= L (and l = 1 returns the inputs).
Matrix capture_batch(const Network& net, const Matrix& inputs, std::size_t l);

/// Unfolds one flattened (channel, row, col) input into a patch_size x
/// out_positions column matrix (zero padded).
Matrix im2col(const ConvGeometry& g, const double* input);
/// Adjoint of im2col: accumulates columns back into a flattened input.
void col2im(const ConvGeometry& g, const Matrix& cols, double* input);

/// Architecture grammar: tokens separated by ':'. The first token is the
/// input shape, either "784" or "CxHxW". Each further token is a layer:
/// "d<width>" for dense or "c<out>k<kernel>[s<stride>][p<padding>]" for a
/// convolution. Example: "1x8x8:c4k3p1:c6k3p1:d10".
struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::size_t width = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
};
struct Architecture {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<LayerSpec> layers;

  std::size_t input_dim() const { return channels * height * width; }
};
Architecture parse_architecture(const std::string& text);

/// He-normal initialisation, zero biases. Hidden layers use `hidden`;
/// the output layer has no activation.
Network init_network(const Architecture& arch, const Activation& hidden, std::uint64_t seed);
Network init_dense(const std::vector<std::size_t>& widths, const Activation& hidden, std::uint64_t seed);

/// Directory with manifest.json plus one little-endian f64 blob per tensor.
void save_network(const Network& net, const std::filesystem::path& dir);
Network load_network(const std::filesystem::path& dir);

}  // namespace specprune
