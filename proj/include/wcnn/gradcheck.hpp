#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wcnn/autodiff.hpp"
#include "wcnn/model.hpp"

namespace wcnn {

struct GradCheckCase {
  std::string name;  // "<op> / <input>"
  GradCheckResult result;
};

/// Central-difference checks of every differentiable tape op against random
/// 64-bit inputs, each with respect to every input it differentiates.
std::vector<GradCheckCase> layer_gradchecks(std::uint64_t seed, double eps = 1e-5);

/// Whole-model checks on a batch of random images: every parameter in eval
/// mode (after a few train-mode passes populate the running statistics) and
/// the input in train mode. `coord_stride` > 1 samples coordinates.
std::vector<GradCheckCase> model_gradchecks(const WaveletCnnConfig& cfg, std::uint64_t seed, double eps = 1e-5,
                                            std::size_t batch = 2, std::size_t coord_stride = 1);

}  // namespace wcnn
