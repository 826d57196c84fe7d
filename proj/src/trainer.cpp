#include "specprune/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "specprune/error.hpp"
#include "specprune/io.hpp"

namespace specprune {

LossKind parse_loss(const std::string& name) {
  if (name == "squared") return LossKind::Squared;
  if (name == "ce" || name == "softmax_cross_entropy" || name == "cross_entropy") return LossKind::SoftmaxCrossEntropy;
  throw Error(ErrorCode::InvalidArgument, "unknown loss '" + name + "'");
}

std::string loss_name(LossKind kind) {
  return kind == LossKind::Squared ? "squared" : "softmax_cross_entropy";
}

void Dataset::validate() const {
  if (inputs.rows() < 1) throw Error(ErrorCode::InvalidArgument, "dataset '" + name + "' is empty");
  if (targets.rows() != inputs.rows())
    throw Error(ErrorCode::ShapeMismatch, "dataset '" + name + "' inputs/targets row counts differ");
  require_finite(inputs, "dataset inputs");
  require_finite(targets, "dataset targets");
}

Dataset Dataset::head(std::size_t count) const {
  const auto n = std::min<Eigen::Index>(static_cast<Eigen::Index>(count), inputs.rows());
  return {inputs.topRows(n), targets.topRows(n), name};
}

namespace {

Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// Gradient of the mean loss with respect to the outputs.
Matrix loss_gradient(const Matrix& outputs, const Matrix& targets, LossKind kind) {
  const double scale = 1.0 / static_cast<double>(outputs.rows());
  if (kind == LossKind::Squared) return 2.0 * scale * (outputs - targets);
  return scale * (softmax_rows(outputs) - targets);
}

struct Gradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;
};

Gradients backprop(const std::vector<Layer>& layers, const Matrix& inputs, const Matrix& targets, LossKind kind, double& loss) {
  const std::size_t depth = layers.size();
  std::vector<Matrix> pre(depth);
  std::vector<Matrix> post(depth + 1);
  post[0] = inputs;
  for (std::size_t i = 0; i < depth; ++i) {
    const Layer& layer = layers[i];
    pre[i] = layer_affine(layer, post[i]);
    post[i + 1] = pre[i];
    layer.activation.apply_inplace(post[i + 1]);
  }
  loss = mean_loss(post[depth], targets, kind);

  Gradients grads;
  grads.weight.resize(depth);
  grads.bias.resize(depth);
  Matrix upstream = loss_gradient(post[depth], targets, kind);
  for (std::size_t step = 0; step < depth; ++step) {
    const std::size_t i = depth - 1 - step;
    const Layer& layer = layers[i];
    Matrix delta = upstream;
    if (layer.activation.kind != Activation::Kind::None) {
      const Activation act = layer.activation;
      delta.array() *= pre[i].unaryExpr([act](double u) { return act.derivative(u); }).array();
    }
    if (layer.kind == LayerKind::Dense) {
      grads.weight[i] = delta.transpose() * post[i];
      grads.bias[i] = delta.colwise().sum().transpose();
      if (i > 0) upstream = delta * layer.weight;
    } else {
      const auto& g = *layer.conv;
      const auto positions = static_cast<Eigen::Index>(g.out_positions());
      const auto channels = static_cast<Eigen::Index>(g.out_channels);
      grads.weight[i] = Matrix::Zero(layer.weight.rows(), layer.weight.cols());
      grads.bias[i] = Vector::Zero(layer.bias.size());
      Matrix next_upstream;
      if (i > 0) next_upstream = Matrix::Zero(post[i].rows(), post[i].cols());
      for (Eigen::Index s = 0; s < delta.rows(); ++s) {
        const Eigen::Map<const Matrix> d(delta.row(s).data(), channels, positions);
        const Matrix cols = im2col(g, post[i].row(s).data());
        grads.weight[i].noalias() += d * cols.transpose();
        grads.bias[i] += d.rowwise().sum();
        if (i > 0) {
          const Matrix dcols = layer.weight.transpose() * d;
          col2im(g, dcols, next_upstream.row(s).data());
        }
      }
      if (i > 0) upstream = std::move(next_upstream);
    }
  }
  return grads;
}

}  // namespace

double mean_loss(const Matrix& outputs, const Matrix& targets, LossKind kind) {
  if (outputs.rows() != targets.rows() || outputs.cols() != targets.cols())
    throw Error(ErrorCode::ShapeMismatch, "outputs and targets differ in shape");
  if (outputs.rows() == 0) return 0.0;
  if (kind == LossKind::Squared) return (outputs - targets).squaredNorm() / static_cast<double>(outputs.rows());
  double total = 0.0;
  for (Eigen::Index i = 0; i < outputs.rows(); ++i) {
    const double mx = outputs.row(i).maxCoeff();
    const double log_z = mx + std::log((outputs.row(i).array() - mx).exp().sum());
    total -= (targets.row(i).array() * (outputs.row(i).array() - log_z)).sum();
  }
  return total / static_cast<double>(outputs.rows());
}

double evaluate_loss(const Network& net, const Dataset& data, LossKind kind) {
  return mean_loss(forward_batch(net, data.inputs), data.targets, kind);
}

double accuracy(const Matrix& outputs, const Matrix& targets) {
  if (outputs.rows() != targets.rows()) throw Error(ErrorCode::ShapeMismatch, "accuracy row counts differ");
  if (outputs.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < outputs.rows(); ++i) {
    Eigen::Index a = 0, b = 0;
    outputs.row(i).maxCoeff(&a);
    targets.row(i).maxCoeff(&b);
    hits += a == b ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(outputs.rows());
}

double sum_squared_weights(const Network& net) {
  double total = 0.0;
  for (const auto& layer : net.layers()) total += layer.weight.squaredNorm();
  return total;
}

TrainResult train(const Network& net, const Dataset& data, const TrainConfig& cfg) {
  data.validate();
  if (cfg.batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch_size must be positive");
  if (cfg.learning_rate < 0.0 || cfg.weight_decay < 0.0)
    throw Error(ErrorCode::InvalidArgument, "learning_rate and weight_decay must be nonnegative");
  if (data.inputs.cols() != static_cast<Eigen::Index>(net.input_dim()) ||
      data.targets.cols() != static_cast<Eigen::Index>(net.output_dim()))
    throw Error(ErrorCode::ShapeMismatch, "dataset shape does not match the network");

  std::vector<Layer> layers = net.layers();
  std::mt19937_64 rng(cfg.seed);
  std::vector<Eigen::Index> order(data.size());
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const auto rows = static_cast<Eigen::Index>(stop - start);
      Matrix x(rows, data.inputs.cols());
      Matrix y(rows, data.targets.cols());
      for (Eigen::Index r = 0; r < rows; ++r) {
        x.row(r) = data.inputs.row(order[start + static_cast<std::size_t>(r)]);
        y.row(r) = data.targets.row(order[start + static_cast<std::size_t>(r)]);
      }
      double batch_loss = 0.0;
      const Gradients grads = backprop(layers, x, y, cfg.loss, batch_loss);
      if (!std::isfinite(batch_loss))
        throw Error(ErrorCode::DivergedLoss, "loss became non-finite in epoch " + std::to_string(epoch + 1));
      epoch_loss += batch_loss * static_cast<double>(rows);
      for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].weight -= cfg.learning_rate * (grads.weight[i] + cfg.weight_decay * layers[i].weight);
        layers[i].bias -= cfg.learning_rate * grads.bias[i];
      }
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  result.net = Network(std::move(layers));
  result.final_loss = evaluate_loss(result.net, data, cfg.loss);
  if (!std::isfinite(result.final_loss)) throw Error(ErrorCode::DivergedLoss, "final loss is non-finite");
  return result;
}

namespace {

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw Error(ErrorCode::TruncatedFile, path.string() + ": header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t limit,
                 std::size_t classes) {
  if (limit == 0) throw Error(ErrorCode::InvalidArgument, "limit must be at least 1");
  std::ifstream img(images, std::ios::binary);
  if (!img) throw Error(ErrorCode::Io, "cannot open " + images.string());
  std::ifstream lab(labels, std::ios::binary);
  if (!lab) throw Error(ErrorCode::Io, "cannot open " + labels.string());

  if (read_be32(img, images) != 0x00000803) throw Error(ErrorCode::BadMagic, images.string());
  const std::uint32_t count = read_be32(img, images);
  const std::uint32_t rows = read_be32(img, images);
  const std::uint32_t cols = read_be32(img, images);
  if (read_be32(lab, labels) != 0x00000801) throw Error(ErrorCode::BadMagic, labels.string());
  const std::uint32_t label_count = read_be32(lab, labels);
  if (label_count != count) throw Error(ErrorCode::ShapeMismatch, "image and label counts differ");

  const std::size_t n = std::min<std::size_t>(limit, count);
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "IDX files hold no samples");
  const std::size_t pixels = std::size_t{rows} * cols;
  std::vector<unsigned char> buffer(n * pixels);
  if (!img.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(buffer.size())))
    throw Error(ErrorCode::TruncatedFile, images.string());
  std::vector<unsigned char> label_bytes(n);
  if (!lab.read(reinterpret_cast<char*>(label_bytes.data()), static_cast<std::streamsize>(n)))
    throw Error(ErrorCode::TruncatedFile, labels.string());

  Dataset data;
  data.name = images.filename().string();
  data.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(pixels));
  data.targets = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(classes));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < pixels; ++p)
      data.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) = buffer[i * pixels + p] / 255.0;
    if (label_bytes[i] >= classes) throw Error(ErrorCode::InvalidArgument, "label exceeds class count");
    data.targets(static_cast<Eigen::Index>(i), label_bytes[i]) = 1.0;
  }
  return data;
}

Dataset synth_spectrum(const SynthConfig& cfg) {
  if (cfg.n == 0 || cfg.dim == 0 || cfg.outputs == 0)
    throw Error(ErrorCode::InvalidArgument, "n, dim and outputs must be positive");
  if (!(cfg.decay >= 0.0)) throw Error(ErrorCode::InvalidArgument, "decay must be nonnegative");
  if (cfg.classify && cfg.outputs < 2) throw Error(ErrorCode::InvalidArgument, "classification needs at least two outputs");

  Vector scale(static_cast<Eigen::Index>(cfg.dim));
  for (std::size_t j = 0; j < cfg.dim; ++j)
    scale(static_cast<Eigen::Index>(j)) = std::pow(static_cast<double>(j + 1), -cfg.decay);
  scale *= static_cast<double>(cfg.dim) / scale.sum();
  scale = scale.cwiseSqrt();

  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(cfg.draw), static_cast<std::uint32_t>(cfg.draw >> 32)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset data;
  data.name = "synth_p" + format_double(cfg.decay);
  data.inputs.resize(static_cast<Eigen::Index>(cfg.n), static_cast<Eigen::Index>(cfg.dim));
  for (Eigen::Index i = 0; i < data.inputs.rows(); ++i)
    for (Eigen::Index j = 0; j < data.inputs.cols(); ++j) data.inputs(i, j) = scale(j) * normal(rng);

  Network teacher = init_dense({cfg.dim, 32, cfg.outputs}, Activation::relu(), cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  const Matrix raw = forward_batch(teacher, data.inputs);
  if (!cfg.classify) {
    data.targets = raw;
    return data;
  }
  data.targets = Matrix::Zero(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    Eigen::Index best = 0;
    raw.row(i).maxCoeff(&best);
    data.targets(i, best) = 1.0;
  }
  return data;
}

void export_csv(const Dataset& data, const std::filesystem::path& path) {
  std::vector<std::string> header;
  for (Eigen::Index j = 0; j < data.inputs.cols(); ++j) header.push_back("x" + std::to_string(j));
  for (Eigen::Index j = 0; j < data.targets.cols(); ++j) header.push_back("y" + std::to_string(j));
  CsvWriter csv(header);
  for (Eigen::Index i = 0; i < data.inputs.rows(); ++i) {
    std::vector<std::string> row;
    for (Eigen::Index j = 0; j < data.inputs.cols(); ++j) row.push_back(format_double(data.inputs(i, j)));
    for (Eigen::Index j = 0; j < data.targets.cols(); ++j) row.push_back(format_double(data.targets(i, j)));
    csv.add_row(std::move(row));
  }
  csv.save(path);
}

}  // namespace specprune
