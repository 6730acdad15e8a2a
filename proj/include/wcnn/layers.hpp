#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "wcnn/autodiff.hpp"
#include "wcnn/tensor.hpp"

namespace wcnn {

enum class Mode { train, eval };

/// Worker count used by the convolution kernels (batch-parallel). 1 means
/// strictly sequential, which is the only mode with a bit-exact guarantee.
void set_num_threads(int n);
int num_threads();

/// Weight [out, in, k, k], bias [out]. Cross-correlation, zero padding.
template <class T>
struct Conv2dParams {
  Variable<T> weight;
  Variable<T> bias;
  int stride = 1;
  int padding = 0;

  /// k in {1,3}, stride in {1,2}; He-normal weights, zero bias. A null
  /// `rng` leaves the weights zero.
  static Conv2dParams make(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t k,
                           int stride, int padding, std::mt19937_64* rng);
  static Conv2dParams make(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t k,
                           int stride, int padding, std::mt19937_64& rng) {
    return make(name, in_ch, out_ch, k, stride, padding, &rng);
  }
  std::size_t in_channels() const { return weight.value.dim(1); }
  std::size_t out_channels() const { return weight.value.dim(0); }
  std::size_t kernel() const { return weight.value.dim(2); }
};

template <class T>
struct BatchNormParams {
  Variable<T> gamma;
  Variable<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T epsilon = T(1e-5);
  T momentum = T(0.1);

  static BatchNormParams make(const std::string& name, std::size_t channels);
  std::size_t channels() const { return gamma.value.numel(); }
};

/// Weight [out, in], bias [out].
template <class T>
struct DenseParams {
  Variable<T> weight;
  Variable<T> bias;

  static DenseParams make(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64* rng);
  static DenseParams make(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
    return make(name, in, out, &rng);
  }
};

/// floor((in + 2*pad - k) / stride) + 1; throws if the padded input is smaller than k.
std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad);

// ---- tensor kernels (no tape) ----

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int padding);
template <class T>
Tensor<T> average_pool(const Tensor<T>& x, std::size_t p);
template <class T>
Tensor<T> relu(const Tensor<T>& x);
template <class T>
Tensor<T> global_average_pool(const Tensor<T>& x);
template <class T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
/// Train mode also updates the running statistics in `p`.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode);
template <class T>
Tensor<T> softmax(const Tensor<T>& logits);
template <class T>
T softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);
template <class T>
T sigmoid_bce_multilabel(const Tensor<T>& logits, const Tensor<T>& targets);

// ---- tape ops ----

template <class T>
NodeRef conv2d(Graph<T>& g, NodeRef x, NodeRef w, NodeRef b, int stride, int padding);
template <class T>
NodeRef conv2d(Graph<T>& g, NodeRef x, Conv2dParams<T>& p);
template <class T>
NodeRef average_pool(Graph<T>& g, NodeRef x, std::size_t p);
template <class T>
NodeRef relu(Graph<T>& g, NodeRef x);
template <class T>
NodeRef global_average_pool(Graph<T>& g, NodeRef x);
template <class T>
NodeRef fully_connected(Graph<T>& g, NodeRef x, NodeRef w, NodeRef b);
template <class T>
NodeRef fully_connected(Graph<T>& g, NodeRef x, DenseParams<T>& p);
template <class T>
NodeRef batch_norm(Graph<T>& g, NodeRef x, NodeRef gamma, NodeRef beta, BatchNormParams<T>& state, Mode mode);
template <class T>
NodeRef batch_norm(Graph<T>& g, NodeRef x, BatchNormParams<T>& p, Mode mode);
/// Mean over the batch of -log softmax(logits)[label].
template <class T>
NodeRef softmax_cross_entropy(Graph<T>& g, NodeRef logits, std::vector<int> labels);
/// Mean over all N*C entries of the logit-space binary cross-entropy.
template <class T>
NodeRef sigmoid_bce_multilabel(Graph<T>& g, NodeRef logits, Tensor<T> targets);

}  // namespace wcnn
