#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "wcnn/config.hpp"
#include "wcnn/data.hpp"
#include "wcnn/metrics.hpp"
#include "wcnn/model.hpp"

namespace wcnn {

/// Non-finite loss or gradient during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update over `params` using their accumulated
/// grads (a missing grad counts as zero). All grads are checked before any
/// parameter moves; a non-finite one throws NumericalError naming it.
template <class T>
void adam_step(std::span<Variable<T>* const> params, AdamState<T>& state, const AdamConfig& cfg, double lr);

/// Per image: subtract the mean, divide by the standard deviation (floored at 1e-8).
Tensor<double> global_contrast_normalization(const Tensor<double>& image);

/// Bilinear, half-pixel centers, edge clamped. [C, H, W] -> [C, out_h, out_w].
Tensor<double> resize_bilinear(const Tensor<double>& image, std::size_t out_h, std::size_t out_w);
Tensor<double> crop(const Tensor<double>& image, std::size_t top, std::size_t left, std::size_t size);
Tensor<double> hflip(const Tensor<double>& image);

struct AugmentConfig {
  bool enabled = true;
  std::size_t resize = 36;  // S
  std::size_t crop = 32;    // K
  bool flip = true;
};

/// Resize to S x S, uniform crop offset in [0, S-K]^2, flip with probability 1/2.
Tensor<double> augment(const Tensor<double>& image, const AugmentConfig& cfg, std::mt19937_64& rng);
/// Deterministic view used for evaluation: resize to S x S and center-crop K.
Tensor<double> eval_view(const Tensor<double>& image, const AugmentConfig& cfg);

/// Seed for an independent stream identified by (seed, a, b); SplitMix64 mixing.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

struct TrainConfig {
  WaveletCnnConfig model;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  AdamConfig adam;
  std::size_t lr_step = 0;  // 0: constant lr; otherwise multiply by lr_gamma every lr_step epochs
  double lr_gamma = 0.1;
  std::uint64_t seed = 1;
  std::string dtype = "f32";
  AugmentConfig augment;
  bool gcn = true;
  std::size_t eval_every = 1;

  void validate() const;
  Config to_config() const;  // "train.*", "seed" and the model keys
  static TrainConfig from_config(const Config& cfg);
};

struct Sample {
  Tensor<double> image;  // [C, H, W] after normalization
  std::vector<int> labels;
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<Sample> samples;
};

/// Loads every image in the manifest, matching the channel count (gray is
/// replicated, color averaged) and applying global contrast normalization.
Dataset load_dataset(const DatasetManifest& manifest, std::size_t channels, bool gcn = true);

struct EvalResult {
  double loss = 0;
  double accuracy = 0;  // top-1 hit: argmax lies in the label set
  std::optional<MultiLabelMetrics> multilabel;
  std::vector<int> top1;
};

template <class T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                    const AugmentConfig& view, std::size_t batch_size = 32);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;  // "train" or "test"
  double loss = 0;
  double accuracy = 0;
};

template <class T>
struct TrainResult {
  Model<T> best;
  Model<T> last;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_test_accuracy = 0;
  double final_test_accuracy = 0;
  EvalResult final_eval;
};

/// Trains `model` on split.train and evaluates on split.test every
/// `eval_every` epochs (and after the last). Records stream to `log` as they
/// are produced. Throws NumericalError on a non-finite loss.
template <class T>
TrainResult<T> train(Model<T> model, const Dataset& data, const SplitIndices& split, const TrainConfig& cfg,
                     std::ostream* log = nullptr);

/// Header row for the per-epoch records: "epoch\tsplit\tloss\tacc".
std::string report_header();
std::string report_row(const EpochRecord& r);

}  // namespace wcnn
