#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "specprune/model.hpp"

namespace specprune {

enum class LossKind { Squared, SoftmaxCrossEntropy };

LossKind parse_loss(const std::string& name);
std::string loss_name(LossKind kind);

/// Rows of `inputs` and `targets` are samples. Classification targets are
/// one-hot rows.
struct Dataset {
  Matrix inputs;
  Matrix targets;
  std::string name;

  std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }
  void validate() const;
  /// First `count` samples.
  Dataset head(std::size_t count) const;
};

/// Plain mini-batch SGD with L2 weight decay on the weights (not biases).
struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
  LossKind loss = LossKind::SoftmaxCrossEntropy;
};

struct TrainResult {
  Network net;
  /// Loss over the full dataset after the last epoch.
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
};

/// Deterministic for a fixed (net, data, cfg). Throws DivergedLoss when a
/// batch loss becomes non-finite.
TrainResult train(const Network& net, const Dataset& data, const TrainConfig& cfg);

/// Mean per-sample loss: squared is ||f - y||^2, cross-entropy is
/// -sum_k y_k log softmax(f)_k.
double mean_loss(const Matrix& outputs, const Matrix& targets, LossKind kind);
double evaluate_loss(const Network& net, const Dataset& data, LossKind kind);
/// Fraction of samples whose argmax output matches the argmax target.
double accuracy(const Matrix& outputs, const Matrix& targets);
double sum_squared_weights(const Network& net);

/// Reads an IDX image/label pair (magic 0x00000803 / 0x00000801). Pixels are
/// scaled to [0,1]; labels become one-hot rows over `classes` columns.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t limit,
                 std::size_t classes = 10);

/// Gaussian inputs whose population covariance has eigenvalues proportional
/// to j^-decay (normalised to trace dim), labelled by a fixed random teacher
/// with one ReLU hidden layer of width 32. The teacher depends on `seed`
/// only; `draw` selects an independent input sample (0 for training, 1 for a
/// held-out set, ...). With `classify`, targets are one-hot argmax labels of
/// the teacher outputs; otherwise they are the raw teacher outputs.
struct SynthConfig {
  std::size_t n = 1000;
  std::size_t dim = 784;
  double decay = 0.5;
  std::uint64_t seed = 1;
  std::size_t outputs = 1;
  std::uint64_t draw = 0;
  bool classify = false;
};
Dataset synth_spectrum(const SynthConfig& cfg);

/// Comma-separated dump: input columns x0.., then target columns y0...
void export_csv(const Dataset& data, const std::filesystem::path& path);

}  // namespace specprune
