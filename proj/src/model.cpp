#include "specprune/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <regex>

#include "specprune/error.hpp"
#include "specprune/io.hpp"

namespace specprune {

namespace fs = std::filesystem;
using nlohmann::json;

void Activation::apply_inplace(Matrix& m) const {
  if (kind == Kind::None) return;
  const double s = kind == Kind::Relu ? 0.0 : slope;
  m = m.unaryExpr([s](double u) { return u > 0.0 ? u : s * u; });
}

std::string Activation::name() const {
  switch (kind) {
    case Kind::Relu: return "relu";
    case Kind::LeakyRelu: return "leaky_relu";
    case Kind::None: break;
  }
  return "none";
}

Activation Activation::parse(const std::string& name, double slope) {
  if (name == "relu") return relu();
  if (name == "leaky_relu") return leaky_relu(slope);
  if (name == "none") return none();
  throw Error(ErrorCode::InvalidArgument, "unknown activation '" + name + "'");
}

std::size_t Layer::in_dim() const {
  return kind == LayerKind::Conv2d ? conv->in_size() : static_cast<std::size_t>(weight.cols());
}

std::size_t Layer::out_dim() const {
  return kind == LayerKind::Conv2d ? conv->out_size() : static_cast<std::size_t>(weight.rows());
}

namespace {

void validate_layer(const Layer& layer, std::size_t index, bool is_last) {
  const std::string where = "layer " + std::to_string(index + 1);
  if (layer.kind == LayerKind::Conv2d) {
    if (!layer.conv) throw Error(ErrorCode::ShapeMismatch, where + ": conv layer without geometry");
    const auto& g = *layer.conv;
    if (g.kernel == 0 || g.stride == 0 || g.in_channels == 0 || g.out_channels == 0 ||
        g.in_height + 2 * g.padding < g.kernel || g.in_width + 2 * g.padding < g.kernel)
      throw Error(ErrorCode::ShapeMismatch, where + ": invalid conv geometry");
    if (static_cast<std::size_t>(layer.weight.rows()) != g.out_channels ||
        static_cast<std::size_t>(layer.weight.cols()) != g.patch_size())
      throw Error(ErrorCode::ShapeMismatch, where + ": conv weight shape");
    if (static_cast<std::size_t>(layer.bias.size()) != g.out_channels)
      throw Error(ErrorCode::ShapeMismatch, where + ": conv bias length");
  } else if (layer.bias.size() != layer.weight.rows()) {
    throw Error(ErrorCode::ShapeMismatch, where + ": bias length");
  }
  require_finite(layer.weight, "weight");
  if (!layer.bias.allFinite()) throw Error(ErrorCode::NonFinite, where + ": bias");

  const auto kind = layer.activation.kind;
  if (is_last) {
    if (kind != Activation::Kind::None)
      throw Error(ErrorCode::InvalidArgument, where + ": output layer must not have an activation");
  } else {
    if (kind == Activation::Kind::None)
      throw Error(ErrorCode::InvalidArgument, where + ": hidden layers need relu or leaky_relu");
    if (kind == Activation::Kind::LeakyRelu && !(layer.activation.slope > 0.0 && layer.activation.slope <= 1.0))
      throw Error(ErrorCode::InvalidArgument, where + ": leaky_relu slope must lie in (0,1]");
  }
}

}  // namespace

Network::Network(std::vector<Layer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw Error(ErrorCode::InvalidArgument, "network needs at least one layer");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    validate_layer(layers_[i], i, i + 1 == layers_.size());
    if (i > 0 && layers_[i].in_dim() != layers_[i - 1].out_dim())
      throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(i + 1) + " input " +
                                                std::to_string(layers_[i].in_dim()) + " != previous output " +
                                                std::to_string(layers_[i - 1].out_dim()));
  }
}

const Layer& Network::weight_layer(std::size_t l) const {
  if (l < 1 || l > layers_.size()) throw Error(ErrorCode::IndexOutOfRange, "weight layer " + std::to_string(l));
  return layers_[l - 1];
}

std::size_t Network::width(std::size_t l) const {
  const std::size_t depth = layers_.size();
  if (l < 1 || l > depth + 1) throw Error(ErrorCode::IndexOutOfRange, "width index " + std::to_string(l));
  if (l == 1) return input_dim();
  if (l == depth + 1) return output_dim();
  const Layer& producer = layers_[l - 2];
  const Layer& consumer = layers_[l - 1];
  if (producer.kind == LayerKind::Conv2d && consumer.kind == LayerKind::Conv2d) return producer.conv->out_channels;
  return producer.out_dim();
}

double row_norm_radius(const Network& net) {
  double radius = 0.0;
  for (const auto& layer : net.layers()) {
    const double scale = std::sqrt(static_cast<double>(layer.out_units()));
    radius = std::max(radius, layer.weight.rowwise().norm().maxCoeff() * scale);
  }
  return radius;
}

double bias_radius(const Network& net) {
  double radius = 0.0;
  for (const auto& layer : net.layers()) {
    const double scale = std::sqrt(static_cast<double>(layer.out_units()));
    radius = std::max(radius, layer.bias.cwiseAbs().maxCoeff() * scale);
  }
  return radius;
}

std::size_t Network::parameter_count() const {
  std::size_t count = 0;
  for (const auto& layer : layers_) count += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
  return count;
}

Matrix im2col(const ConvGeometry& g, const double* input) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(g.patch_size()), static_cast<Eigen::Index>(oh * ow));
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const auto row = static_cast<Eigen::Index>((c * k + ky) * k + kx);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.in_height)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            if (ix < 0 || ix >= static_cast<long>(g.in_width)) continue;
            cols(row, static_cast<Eigen::Index>(oy * ow + ox)) =
                input[(c * g.in_height + static_cast<std::size_t>(iy)) * g.in_width + static_cast<std::size_t>(ix)];
          }
        }
      }
  return cols;
}

void col2im(const ConvGeometry& g, const Matrix& cols, double* input) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const auto row = static_cast<Eigen::Index>((c * k + ky) * k + kx);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.in_height)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
            if (ix < 0 || ix >= static_cast<long>(g.in_width)) continue;
            input[(c * g.in_height + static_cast<std::size_t>(iy)) * g.in_width + static_cast<std::size_t>(ix)] +=
                cols(row, static_cast<Eigen::Index>(oy * ow + ox));
          }
        }
      }
}

Matrix layer_affine(const Layer& layer, const Matrix& input) {
  if (static_cast<std::size_t>(input.cols()) != layer.in_dim())
    throw Error(ErrorCode::ShapeMismatch, "input width " + std::to_string(input.cols()) + ", layer expects " +
                                              std::to_string(layer.in_dim()));
  if (layer.kind == LayerKind::Dense) {
    Matrix out = input * layer.weight.transpose();
    out.rowwise() += layer.bias.transpose();
    return out;
  }
  const auto& g = *layer.conv;
  Matrix out(input.rows(), static_cast<Eigen::Index>(g.out_size()));
  for (Eigen::Index i = 0; i < input.rows(); ++i) {
    const Matrix cols = im2col(g, input.row(i).data());
    Matrix y = layer.weight * cols;
    y.colwise() += layer.bias;
    out.row(i) = Eigen::Map<const Eigen::RowVectorXd>(y.data(), y.size());
  }
  return out;
}

namespace {

Matrix run_layers(const Network& net, const Matrix& inputs, std::size_t count) {
  if (static_cast<std::size_t>(inputs.cols()) != net.input_dim())
    throw Error(ErrorCode::ShapeMismatch, "input width " + std::to_string(inputs.cols()) + ", network expects " +
                                              std::to_string(net.input_dim()));
  Matrix h = inputs;
  for (std::size_t i = 0; i < count; ++i) {
    const Layer& layer = net.layers()[i];
    h = layer_affine(layer, h);
    layer.activation.apply_inplace(h);
    if (!h.allFinite())
      throw Error(ErrorCode::NonFiniteActivation, "layer " + std::to_string(i + 1) + " produced non-finite values");
  }
  return h;
}

}  // namespace

Matrix forward_batch(const Network& net, const Matrix& inputs) { return run_layers(net, inputs, net.depth()); }

Matrix capture_batch(const Network& net, const Matrix& inputs, std::size_t l) {
  if (l < 1 || l > net.depth())
    throw Error(ErrorCode::IndexOutOfRange, "capture layer " + std::to_string(l) + " outside [1, L]");
  return run_layers(net, inputs, l - 1);
}

Vector forward(const Network& net, const Vector& x) {
  const Matrix out = forward_batch(net, x.transpose());
  return out.row(0).transpose();
}

Vector forward_capture(const Network& net, const Vector& x, std::size_t l) {
  if (l < 2 || l > net.depth())
    throw Error(ErrorCode::IndexOutOfRange, "capture layer " + std::to_string(l) + " outside [2, L]");
  const Matrix out = capture_batch(net, x.transpose(), l);
  return out.row(0).transpose();
}

Architecture parse_architecture(const std::string& text) {
  Architecture arch;
  std::vector<std::string> tokens;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(':', start);
    tokens.push_back(text.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  if (tokens.size() < 2) throw Error(ErrorCode::InvalidArgument, "architecture needs an input and one layer");

  static const std::regex shape3(R"((\d+)x(\d+)x(\d+))");
  static const std::regex flat(R"((\d+))");
  static const std::regex dense(R"(d(\d+))");
  static const std::regex conv(R"(c(\d+)k(\d+)(?:s(\d+))?(?:p(\d+))?)");
  std::smatch m;
  if (std::regex_match(tokens[0], m, shape3)) {
    arch.channels = std::stoul(m[1]);
    arch.height = std::stoul(m[2]);
    arch.width = std::stoul(m[3]);
  } else if (std::regex_match(tokens[0], m, flat)) {
    arch.channels = std::stoul(m[1]);
    arch.height = arch.width = 1;
  } else {
    throw Error(ErrorCode::InvalidArgument, "bad input shape '" + tokens[0] + "'");
  }
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    LayerSpec spec;
    if (std::regex_match(tokens[i], m, dense)) {
      spec.kind = LayerKind::Dense;
      spec.width = std::stoul(m[1]);
    } else if (std::regex_match(tokens[i], m, conv)) {
      spec.kind = LayerKind::Conv2d;
      spec.width = std::stoul(m[1]);
      spec.kernel = std::stoul(m[2]);
      if (m[3].matched) spec.stride = std::stoul(m[3]);
      if (m[4].matched) spec.padding = std::stoul(m[4]);
    } else {
      throw Error(ErrorCode::InvalidArgument, "bad layer token '" + tokens[i] + "'");
    }
    if (spec.width == 0) throw Error(ErrorCode::InvalidArgument, "zero-width layer '" + tokens[i] + "'");
    arch.layers.push_back(spec);
  }
  return arch;
}

Network init_network(const Architecture& arch, const Activation& hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Layer> layers;
  std::size_t channels = arch.channels, height = arch.height, width = arch.width;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& spec = arch.layers[i];
    Layer layer;
    layer.kind = spec.kind;
    layer.activation = i + 1 == arch.layers.size() ? Activation::none() : hidden;
    std::size_t fan_in = 0;
    if (spec.kind == LayerKind::Conv2d) {
      ConvGeometry g{channels, spec.width, spec.kernel, spec.stride, spec.padding, height, width};
      layer.conv = g;
      layer.weight.resize(static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(g.patch_size()));
      layer.bias = Vector::Zero(static_cast<Eigen::Index>(g.out_channels));
      fan_in = g.patch_size();
      channels = g.out_channels;
      height = g.out_height();
      width = g.out_width();
    } else {
      const std::size_t in = channels * height * width;
      layer.weight.resize(static_cast<Eigen::Index>(spec.width), static_cast<Eigen::Index>(in));
      layer.bias = Vector::Zero(static_cast<Eigen::Index>(spec.width));
      fan_in = in;
      channels = spec.width;
      height = width = 1;
    }
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = normal(rng);
    layers.push_back(std::move(layer));
  }
  return Network(std::move(layers));
}

Network init_dense(const std::vector<std::size_t>& widths, const Activation& hidden, std::uint64_t seed) {
  if (widths.size() < 2) throw Error(ErrorCode::InvalidArgument, "need input and output widths");
  Architecture arch;
  arch.channels = widths.front();
  arch.height = arch.width = 1;
  for (std::size_t i = 1; i < widths.size(); ++i) arch.layers.push_back({LayerKind::Dense, widths[i], 1, 1, 0});
  return init_network(arch, hidden, seed);
}

void save_network(const Network& net, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "specprune-model";
  manifest["version"] = 1;
  manifest["dtype"] = "f64";
  manifest["endianness"] = "little";
  manifest["input_dim"] = net.input_dim();
  manifest["output_dim"] = net.output_dim();
  json layers = json::array();
  for (std::size_t i = 0; i < net.depth(); ++i) {
    const Layer& layer = net.layers()[i];
    const std::string weight_file = "layer" + std::to_string(i + 1) + "_weight.bin";
    const std::string bias_file = "layer" + std::to_string(i + 1) + "_bias.bin";
    write_blob(dir / weight_file, std::span<const double>(layer.weight.data(), static_cast<std::size_t>(layer.weight.size())));
    write_blob(dir / bias_file, std::span<const double>(layer.bias.data(), static_cast<std::size_t>(layer.bias.size())));
    json entry;
    entry["kind"] = layer.kind == LayerKind::Dense ? "dense" : "conv2d";
    entry["in_dim"] = layer.in_dim();
    entry["out_dim"] = layer.out_dim();
    entry["activation"] = layer.activation.name();
    entry["slope"] = layer.activation.slope;
    entry["weight"] = {{"file", weight_file}, {"rows", layer.weight.rows()}, {"cols", layer.weight.cols()}};
    entry["bias"] = {{"file", bias_file}, {"length", layer.bias.size()}};
    if (layer.conv) {
      const auto& g = *layer.conv;
      entry["conv"] = {{"in_channels", g.in_channels}, {"out_channels", g.out_channels}, {"kernel", g.kernel},
                       {"stride", g.stride},           {"padding", g.padding},           {"in_height", g.in_height},
                       {"in_width", g.in_width}};
    }
    layers.push_back(entry);
  }
  manifest["layers"] = layers;
  write_json(dir / "manifest.json", manifest);
}

Network load_network(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  try {
    if (manifest.at("dtype") != "f64" || manifest.at("endianness") != "little")
      throw Error(ErrorCode::CorruptManifest, "unsupported dtype or endianness");
    std::vector<Layer> layers;
    for (const auto& entry : manifest.at("layers")) {
      Layer layer;
      const std::string kind = entry.at("kind");
      if (kind == "dense") {
        layer.kind = LayerKind::Dense;
      } else if (kind == "conv2d") {
        layer.kind = LayerKind::Conv2d;
        const auto& c = entry.at("conv");
        layer.conv = ConvGeometry{c.at("in_channels"), c.at("out_channels"), c.at("kernel"), c.at("stride"),
                                  c.at("padding"),     c.at("in_height"),    c.at("in_width")};
      } else {
        throw Error(ErrorCode::CorruptManifest, "unknown layer kind '" + kind + "'");
      }
      layer.activation = Activation::parse(entry.at("activation"), entry.at("slope"));
      const Eigen::Index rows = entry.at("weight").at("rows");
      const Eigen::Index cols = entry.at("weight").at("cols");
      const Eigen::Index length = entry.at("bias").at("length");
      if (rows < 0 || cols < 0 || length < 0) throw Error(ErrorCode::CorruptManifest, "negative dimension");
      const auto w = read_blob(dir / entry.at("weight").at("file").get<std::string>(),
                               static_cast<std::size_t>(rows * cols));
      const auto b = read_blob(dir / entry.at("bias").at("file").get<std::string>(), static_cast<std::size_t>(length));
      layer.weight = Eigen::Map<const Matrix>(w.data(), rows, cols);
      layer.bias = Eigen::Map<const Vector>(b.data(), length);
      layers.push_back(std::move(layer));
    }
    Network net(std::move(layers));
    if (net.input_dim() != manifest.at("input_dim").get<std::size_t>() ||
        net.output_dim() != manifest.at("output_dim").get<std::size_t>())
      throw Error(ErrorCode::ShapeMismatch, "manifest dims disagree with layers");
    return net;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptManifest, e.what());
  }
}

}  // namespace specprune
