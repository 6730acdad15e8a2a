#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wcnn/autodiff.hpp"
#include "wcnn/config.hpp"
#include "wcnn/layers.hpp"
#include "wcnn/wavelet.hpp"

namespace wcnn {

enum class HeadMode { softmax, multilabel };

std::string to_string(HeadMode mode);
HeadMode head_mode_from_string(const std::string& s);

/// Architecture hyperparameters.
///
/// The backbone has one stage per entry of `channels`; stage s (1-based)
/// works at input_size / 2^s and opens with a 3x3 stride-2 conv. Levels
/// 1..levels of the wavelet decomposition are injected into stages
/// 1..levels, so `levels` may not exceed the stage count.
struct WaveletCnnConfig {
  std::size_t levels = 5;
  std::size_t input_size = 224;
  std::size_t input_channels = 3;
  std::vector<std::size_t> channels{64, 128, 256, 512, 512};
  std::size_t num_classes = 11;
  HeadMode head = HeadMode::softmax;
  std::size_t embedding = 0;           // 0: no embedding fc; 2048 for the annotation-style head
  std::size_t projection_divisor = 4;  // 1x1 projections emit channels[s] / divisor
  bool inject_subbands = true;         // false: plain strided CNN, the low path only
  std::string wavelet = "haar";

  static constexpr std::size_t kMaxLevels = 5;

  std::size_t stages() const { return channels.size(); }
  std::size_t projection_width(std::size_t stage) const;  // 0-based stage
  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;

  Config to_config() const;  // "model.*" keys
  static WaveletCnnConfig from_config(const Config& cfg);
};

/// conv -> batch norm -> ReLU
template <class T>
struct ConvBlock {
  std::string name;
  Conv2dParams<T> conv;
  BatchNormParams<T> bn;
};

struct LayerCount {
  std::string name;
  std::string kind;
  std::string shape;
  std::size_t params = 0;
};

struct InjectionPoint {
  std::size_t level = 0;     // 1-based decomposition level
  std::size_t stage = 0;     // 1-based backbone stage receiving it
  std::size_t extent = 0;    // spatial extent of both subbands and stage features
  std::size_t channels = 0;  // subband channels entering the projection (4 * input_channels)
};

template <class T>
struct StateEntry {
  std::string name;
  Tensor<T>* tensor;
  bool trainable;
};

template <class T>
class Model {
 public:
  /// Validates `cfg` and He-initializes every weight from `seed`.
  static Model build(const WaveletCnnConfig& cfg, std::uint64_t seed);
  /// Same structure with zero weights and no random draws; for shape and
  /// parameter queries on large configs.
  static Model layout(const WaveletCnnConfig& cfg);

  Model(const Model&) = default;
  Model(Model&&) noexcept = default;
  Model& operator=(const Model&) = default;
  Model& operator=(Model&&) noexcept = default;

  const WaveletCnnConfig& config() const { return cfg_; }
  const std::vector<InjectionPoint>& injections() const { return injections_; }

  /// batch: [N, input_channels, input_size, input_size]; returns logits [N, num_classes].
  /// Train mode updates batch-norm running statistics.
  NodeRef forward(Graph<T>& g, NodeRef batch, Mode mode);
  Tensor<T> predict(const Tensor<T>& batch);

  std::vector<Variable<T>*> parameters();
  /// Every tensor a checkpoint must carry, parameters first then running statistics.
  std::vector<StateEntry<T>> state();
  std::vector<LayerCount> breakdown() const;
  std::size_t param_count() const;

 private:
  struct Stage {
    std::size_t extent = 0;
    ConvBlock<T> down;
    std::optional<ConvBlock<T>> inject;
    std::optional<ConvBlock<T>> shortcut;
    ConvBlock<T> body1;
    ConvBlock<T> body2;
  };

  Model() = default;
  static Model construct(const WaveletCnnConfig& cfg, std::mt19937_64* rng);

  WaveletCnnConfig cfg_;
  FilterPair filter_;
  std::vector<Stage> stages_;
  std::optional<DenseParams<T>> embed_;
  DenseParams<T> fc_;
  std::vector<InjectionPoint> injections_;
};

/// Same backbone with every subband injection and projection shortcut removed.
template <class T>
Model<T> ablate_to_plain_cnn(const WaveletCnnConfig& cfg, std::uint64_t seed);

/// WCNN1 checkpoint. `meta` (run settings, seed) is stored beside the model config.
template <class T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path, const Config& meta = {});
template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path, Config* meta = nullptr);
/// Dtype recorded in a checkpoint header ("f32"/"f64").
std::string checkpoint_dtype(const std::filesystem::path& path);

}  // namespace wcnn
