#include "specprune/covariance.hpp"

#include <vector>

#include "specprune/error.hpp"

namespace specprune {

namespace fs = std::filesystem;
using nlohmann::json;

LayerCovariance::LayerCovariance(std::size_t layer, Matrix sigma, std::size_t samples, bool channelwise)
    : layer_(layer),
      sigma_(std::move(sigma)),
      samples_(samples),
      channelwise_(channelwise),
      cache_(std::make_shared<SpectrumCache>()) {
  if (sigma_.rows() != sigma_.cols()) throw Error(ErrorCode::ShapeMismatch, "covariance must be square");
  require_finite(sigma_, "covariance");
}

const SymmetricSpectrum& LayerCovariance::spectrum() const {
  std::call_once(cache_->once, [this] { cache_->value = sym_eig(sigma_); });
  return *cache_->value;
}

namespace {

// Binary-counter cascade: partial sums are merged only with partials of
// equal size, so the reduction tree depends on the batch count alone.
class PairwiseAccumulator {
 public:
  void add(Matrix block) {
    std::size_t level = 0;
    while (!stack_.empty() && stack_.back().first == level) {
      block += stack_.back().second;
      stack_.pop_back();
      ++level;
    }
    stack_.emplace_back(level, std::move(block));
  }

  Matrix total(Eigen::Index rows, Eigen::Index cols) && {
    Matrix sum = Matrix::Zero(rows, cols);
    for (auto it = stack_.rbegin(); it != stack_.rend(); ++it) sum += it->second;
    return sum;
  }

 private:
  std::vector<std::pair<std::size_t, Matrix>> stack_;
};

Matrix gram(const Matrix& rows) {
  const auto m = rows.cols();
  Matrix g = Matrix::Zero(m, m);
  g.selfadjointView<Eigen::Lower>().rankUpdate(rows.transpose());
  return g.selfadjointView<Eigen::Lower>();
}

void require_prunable_index(const Network& net, std::size_t l) {
  if (l < 2 || l > net.depth())
    throw Error(ErrorCode::IndexOutOfRange, "layer " + std::to_string(l) + " outside [2, L=" +
                                                std::to_string(net.depth()) + "]");
}

const ConvGeometry& consumer_geometry(const Network& net, std::size_t l) {
  require_prunable_index(net, l);
  const Layer& producer = net.weight_layer(l - 1);
  const Layer& consumer = net.weight_layer(l);
  if (producer.kind != LayerKind::Conv2d || consumer.kind != LayerKind::Conv2d)
    throw Error(ErrorCode::UnsupportedLayer, "layer " + std::to_string(l) + " is not a conv-to-conv boundary");
  return *consumer.conv;
}

}  // namespace

LayerCovariance covariance_of(const Matrix& activations, std::size_t layer, std::size_t batch_rows) {
  if (activations.rows() < 1) throw Error(ErrorCode::InvalidArgument, "covariance needs at least one sample");
  if (batch_rows == 0) batch_rows = 256;
  if (!activations.allFinite()) throw Error(ErrorCode::NonFiniteActivation, "activations contain non-finite values");
  const auto m = activations.cols();
  PairwiseAccumulator acc;
  for (Eigen::Index start = 0; start < activations.rows(); start += static_cast<Eigen::Index>(batch_rows)) {
    const auto count = std::min<Eigen::Index>(static_cast<Eigen::Index>(batch_rows), activations.rows() - start);
    acc.add(gram(activations.middleRows(start, count)));
  }
  Matrix sigma = std::move(acc).total(m, m) / static_cast<double>(activations.rows());
  return LayerCovariance(layer, std::move(sigma), static_cast<std::size_t>(activations.rows()));
}

LayerCovariance layer_cov(const Network& net, const Dataset& data, std::size_t l, std::size_t batch_rows) {
  require_prunable_index(net, l);
  data.validate();
  if (batch_rows == 0) batch_rows = 256;
  PairwiseAccumulator acc;
  Eigen::Index m = 0;
  for (Eigen::Index start = 0; start < data.inputs.rows(); start += static_cast<Eigen::Index>(batch_rows)) {
    const auto count = std::min<Eigen::Index>(static_cast<Eigen::Index>(batch_rows), data.inputs.rows() - start);
    const Matrix phi = capture_batch(net, data.inputs.middleRows(start, count), l);
    m = phi.cols();
    acc.add(gram(phi));
  }
  Matrix sigma = std::move(acc).total(m, m) / static_cast<double>(data.size());
  return LayerCovariance(l, std::move(sigma), data.size());
}

LayerCovariance channel_cov(const Network& net, const Dataset& data, std::size_t l) {
  require_prunable_index(net, l);
  data.validate();
  const Layer& producer = net.weight_layer(l - 1);
  if (producer.kind != LayerKind::Conv2d)
    throw Error(ErrorCode::UnsupportedLayer, "layer " + std::to_string(l) + " is not fed by a convolution");
  const auto& g = *producer.conv;
  const auto channels = static_cast<Eigen::Index>(g.out_channels);
  const auto positions = static_cast<Eigen::Index>(g.out_positions());
  constexpr Eigen::Index kBatch = 64;

  PairwiseAccumulator acc;
  for (Eigen::Index start = 0; start < data.inputs.rows(); start += kBatch) {
    const auto count = std::min<Eigen::Index>(kBatch, data.inputs.rows() - start);
    const Matrix phi = capture_batch(net, data.inputs.middleRows(start, count), l);
    Matrix block = Matrix::Zero(channels, channels);
    for (Eigen::Index i = 0; i < phi.rows(); ++i) {
      const Eigen::Map<const Matrix> maps(phi.row(i).data(), channels, positions);
      block.noalias() += maps * maps.transpose();
    }
    acc.add(std::move(block));
  }
  Matrix sigma = std::move(acc).total(channels, channels) /
                 (static_cast<double>(data.size()) * static_cast<double>(positions));
  sigma = 0.5 * (sigma + sigma.transpose());
  return LayerCovariance(l, std::move(sigma), data.size(), true);
}

LayerCovariance pruning_cov(const Network& net, const Dataset& data, std::size_t l) {
  require_prunable_index(net, l);
  const bool conv_producer = net.weight_layer(l - 1).kind == LayerKind::Conv2d;
  const bool conv_consumer = net.weight_layer(l).kind == LayerKind::Conv2d;
  if (conv_producer && conv_consumer) return channel_cov(net, data, l);
  if (conv_producer)
    throw Error(ErrorCode::UnsupportedLayer,
                "layer " + std::to_string(l) + " flattens a convolution into a dense layer; not prunable");
  return layer_cov(net, data, l);
}

std::vector<std::size_t> receptive_counts(const ConvGeometry& g) {
  std::vector<std::size_t> counts(g.in_positions(), 0);
  for (std::size_t oy = 0; oy < g.out_height(); ++oy)
    for (std::size_t ox = 0; ox < g.out_width(); ++ox)
      for (std::size_t ky = 0; ky < g.kernel; ++ky)
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_height) || ix >= static_cast<long>(g.in_width)) continue;
          ++counts[static_cast<std::size_t>(iy) * g.in_width + static_cast<std::size_t>(ix)];
        }
  return counts;
}

CrossCovariance output_channel_cov(const Network& net, const Dataset& data, std::size_t l, const Matrix& z) {
  const ConvGeometry& g = consumer_geometry(net, l);
  data.validate();
  if (static_cast<std::size_t>(z.cols()) != g.patch_size())
    throw Error(ErrorCode::ShapeMismatch, "z columns must equal in_channels*k*k = " + std::to_string(g.patch_size()));
  const auto channels = static_cast<Eigen::Index>(g.in_channels);
  const auto positions = static_cast<Eigen::Index>(g.in_positions());
  const auto rows = z.rows();
  const std::vector<std::size_t> counts = receptive_counts(g);
  constexpr Eigen::Index kBatch = 64;

  Matrix cross = Matrix::Zero(rows, channels);
  double energy = 0.0;
  for (Eigen::Index start = 0; start < data.inputs.rows(); start += kBatch) {
    const auto count = std::min<Eigen::Index>(kBatch, data.inputs.rows() - start);
    const Matrix phi = capture_batch(net, data.inputs.middleRows(start, count), l);
    Matrix block = Matrix::Zero(rows, channels);
    double block_energy = 0.0;
    for (Eigen::Index i = 0; i < phi.rows(); ++i) {
      const Matrix out = z * im2col(g, phi.row(i).data());
      // Spread each output location back over its receptive field.
      Matrix psi = Matrix::Zero(rows, positions);
      for (std::size_t oy = 0; oy < g.out_height(); ++oy)
        for (std::size_t ox = 0; ox < g.out_width(); ++ox) {
          const auto o = static_cast<Eigen::Index>(oy * g.out_width() + ox);
          for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_height) || ix >= static_cast<long>(g.in_width))
                continue;
              psi.col(static_cast<Eigen::Index>(static_cast<std::size_t>(iy) * g.in_width + static_cast<std::size_t>(ix))) +=
                  out.col(o);
            }
        }
      for (Eigen::Index p = 0; p < positions; ++p)
        if (counts[static_cast<std::size_t>(p)] > 0) psi.col(p) /= static_cast<double>(counts[static_cast<std::size_t>(p)]);
      const Eigen::Map<const Matrix> maps(phi.row(i).data(), channels, positions);
      block.noalias() += psi * maps.transpose();
      block_energy += psi.squaredNorm();
    }
    cross += block;
    energy += block_energy;
  }
  const double scale = 1.0 / (static_cast<double>(data.size()) * static_cast<double>(positions));
  return {l, cross * scale, energy * scale};
}

CrossCovariance dense_cross_cov(const LayerCovariance& cov, const Matrix& z) {
  if (static_cast<std::size_t>(z.cols()) != cov.dim())
    throw Error(ErrorCode::ShapeMismatch, "z columns " + std::to_string(z.cols()) + " vs covariance dim " +
                                              std::to_string(cov.dim()));
  Matrix zs = z * cov.sigma();
  const double energy = (zs.array() * z.array()).sum();
  return {cov.layer(), std::move(zs), energy};
}

CsvWriter eigen_report(const LayerCovariance& cov) {
  const auto& mu = cov.spectrum().eigenvalues;
  if (mu.size() == 0 || !(mu(0) > 0.0)) throw Error(ErrorCode::ZeroMatrix, "largest eigenvalue is zero");
  CsvWriter csv({"rank", "eigenvalue", "normalized"});
  for (Eigen::Index j = 0; j < mu.size(); ++j)
    csv.add_row({std::to_string(j + 1), format_double(mu(j)), format_double(mu(j) / mu(0))});
  return csv;
}

void save_covariance(const LayerCovariance& cov, const fs::path& dir) {
  fs::create_directories(dir);
  write_blob(dir / "sigma.bin", std::span<const double>(cov.sigma().data(), static_cast<std::size_t>(cov.sigma().size())));
  json manifest;
  manifest["format"] = "specprune-covariance";
  manifest["version"] = 1;
  manifest["dtype"] = "f64";
  manifest["endianness"] = "little";
  manifest["layer"] = cov.layer();
  manifest["samples"] = cov.samples();
  manifest["channelwise"] = cov.channelwise();
  manifest["sigma"] = {{"file", "sigma.bin"}, {"rows", cov.dim()}, {"cols", cov.dim()}};
  write_json(dir / "manifest.json", manifest);
}

LayerCovariance load_covariance(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  try {
    if (manifest.at("format") != "specprune-covariance") throw Error(ErrorCode::CorruptManifest, "not a covariance");
    const Eigen::Index rows = manifest.at("sigma").at("rows");
    const Eigen::Index cols = manifest.at("sigma").at("cols");
    if (rows != cols || rows < 0) throw Error(ErrorCode::CorruptManifest, "covariance must be square");
    const auto values = read_blob(dir / manifest.at("sigma").at("file").get<std::string>(),
                                  static_cast<std::size_t>(rows * cols));
    return LayerCovariance(manifest.at("layer"), Eigen::Map<const Matrix>(values.data(), rows, cols),
                           manifest.at("samples"), manifest.at("channelwise"));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptManifest, e.what());
  }
}

}  // namespace specprune
