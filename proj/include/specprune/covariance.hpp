#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>

#include "specprune/io.hpp"
#include "specprune/model.hpp"
#include "specprune/trainer.hpp"

namespace specprune {

/// Empirical noncentered covariance (1/n) sum_i phi(x_i) phi(x_i)^T of the
/// representation feeding weight layer `layer`. For channel-wise covariances
/// the matrix is channels x channels with spatial positions averaged.
/// The spectrum is computed on first use and shared between copies.
class LayerCovariance {
 public:
  LayerCovariance(std::size_t layer, Matrix sigma, std::size_t samples, bool channelwise = false);

  std::size_t layer() const { return layer_; }
  const Matrix& sigma() const { return sigma_; }
  std::size_t samples() const { return samples_; }
  bool channelwise() const { return channelwise_; }
  std::size_t dim() const { return static_cast<std::size_t>(sigma_.rows()); }
  double trace() const { return sigma_.trace(); }

  const SymmetricSpectrum& spectrum() const;

 private:
  struct SpectrumCache {
    std::once_flag once;
    std::optional<SymmetricSpectrum> value;
  };

  std::size_t layer_;
  Matrix sigma_;
  std::size_t samples_;
  bool channelwise_;
  std::shared_ptr<SpectrumCache> cache_;
};

/// Cross covariance between the (scaled) next-layer outputs Z phi and the
/// layer's units: z_sigma is rows(Z) x units. `output_energy` is the mean
/// squared norm of the Z-side signal, so that [Z-side; phi] has a PSD joint
/// covariance and the output information loss stays nonnegative.
struct CrossCovariance {
  std::size_t layer = 0;
  Matrix z_sigma;
  double output_energy = 0.0;
};

/// Covariance of explicit activation rows (n x m), accumulated in batches
/// of `batch_rows` with pairwise summation over batches.
LayerCovariance covariance_of(const Matrix& activations, std::size_t layer, std::size_t batch_rows = 256);

/// Dense covariance of phi^(l), 2 <= l <= L. For conv producers this is the
/// full flattened (channel, row, col) covariance.
LayerCovariance layer_cov(const Network& net, const Dataset& data, std::size_t l, std::size_t batch_rows = 256);

/// Channel covariance of a convolutional representation:
/// Sigma_{k,k'} = (1/n) sum_i (1/(H W)) sum_{u,v} phi_{k;u,v} phi_{k';u,v}.
LayerCovariance channel_cov(const Network& net, const Dataset& data, std::size_t l);

/// Covariance in the units that pruning layer l operates on: nodes when the
/// producer is dense, channels when producer and consumer are both conv.
/// A conv producer feeding a dense consumer is UnsupportedLayer.
LayerCovariance pruning_cov(const Network& net, const Dataset& data, std::size_t l);

/// Receptive-field averaged cross covariance between output channels of
/// z (rows: out channels, cols: in_channels*k*k kernels laid out like the
/// consumer layer's weights) and the input channels of conv layer l.
CrossCovariance output_channel_cov(const Network& net, const Dataset& data, std::size_t l, const Matrix& z);

/// Same construction for dense layers, where it reduces to Z Sigma and
/// Tr[Z Sigma Z^T].
CrossCovariance dense_cross_cov(const LayerCovariance& cov, const Matrix& z);

/// Number of output locations whose receptive field contains each input
/// location (I'_{(u,v)}), flattened row-major over the input map.
std::vector<std::size_t> receptive_counts(const ConvGeometry& g);

/// CSV with columns rank, eigenvalue, normalized (eigenvalue / largest).
/// Throws ZeroMatrix when the largest eigenvalue is zero.
CsvWriter eigen_report(const LayerCovariance& cov);

void save_covariance(const LayerCovariance& cov, const std::filesystem::path& dir);
LayerCovariance load_covariance(const std::filesystem::path& dir);

}  // namespace specprune
