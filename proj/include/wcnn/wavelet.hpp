#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wcnn/autodiff.hpp"
#include "wcnn/tensor.hpp"

namespace wcnn {

/// Analysis kernel pair. Taps are true-convolution coefficients: the output
/// at index j reads x[p*j + L-1-m] against tap m, so for two-tap filters the
/// pairs are (x0,x1), (x2,x3), ...
struct FilterPair {
  std::string name;
  std::vector<double> low;   // scaling function
  std::vector<double> high;  // wavelet function

  /// Orthonormal Haar: low = (1,1)/sqrt2, high = (-1,1)/sqrt2, so that
  /// x_l = (x0+x1)/sqrt2 and x_h = (x0-x1)/sqrt2.
  static FilterPair haar();
  /// Throws std::invalid_argument on empty or unequal-length taps.
  void validate() const;
  /// Unit norms, mutual orthogonality and orthogonality under even shifts.
  bool orthonormal(double tol = 1e-12) const;
};

/// Look up a registered filter pair by name. Only "haar" ships.
FilterPair filter_by_name(const std::string& name);

// ---- 1-d ----

/// y = (x * k) downsampled by p, keeping indices 0, p, 2p, ... of the valid
/// convolution. p = 1 is plain convolution; k = (1/p, ..., 1/p) is average pooling.
template <class T>
std::vector<T> generalized_conv_pool(std::span<const T> x, std::span<const double> k, std::size_t p);

/// One analysis step with periodic extension. Requires even length.
template <class T>
std::pair<std::vector<T>, std::vector<T>> dwt1d(std::span<const T> x, const FilterPair& f);
/// Adjoint of dwt1d; the exact inverse for orthonormal pairs.
template <class T>
std::vector<T> idwt1d(std::span<const T> low, std::span<const T> high, const FilterPair& f);

/// Full convolution of two kernels (the composite w * p).
std::vector<double> convolve_full(std::span<const double> a, std::span<const double> b);
/// Outer product a^T b as a [len(a), len(b)] kernel.
Tensor<double> outer(std::span<const double> a, std::span<const double> b);

// ---- 2-d, channel-independent over NCHW ----

/// Depthwise generalized_conv_pool with a [kh, kw] kernel and stride p on both axes.
template <class T>
Tensor<T> generalized_conv_pool(const Tensor<T>& x, const Tensor<double>& kernel, std::size_t p);

template <class T>
struct Subbands {
  Tensor<T> ll;  // low along width, low along height
  Tensor<T> lh;  // low along width, high along height
  Tensor<T> hl;  // high along width, low along height
  Tensor<T> hh;
};

/// Separable analysis: rows (width) first, then columns. Even extents only.
template <class T>
Subbands<T> dwt2d_level(const Tensor<T>& x, const FilterPair& f = FilterPair::haar());
template <class T>
Tensor<T> idwt2d_level(const Subbands<T>& bands, const FilterPair& f = FilterPair::haar());

template <class T>
struct SubbandPyramid {
  struct Detail {
    Tensor<T> lh, hl, hh;
  };
  std::vector<Detail> details;  // details[t-1] is level t, extent source / 2^t
  Tensor<T> low;                // LL at the last level
  Shape source_shape;

  std::size_t levels() const { return details.size(); }
};

/// Recursion on the low band only. Rejects extents not divisible by 2^levels.
template <class T>
SubbandPyramid<T> decompose(const Tensor<T>& x, std::size_t levels, const FilterPair& f = FilterPair::haar());
/// Inverse of decompose; requires an orthonormal pair and a well-formed pyramid.
template <class T>
Tensor<T> reconstruct(const SubbandPyramid<T>& pyramid, const FilterPair& f = FilterPair::haar());

/// Sum of squared coefficients over every stored band.
template <class T>
double pyramid_energy(const SubbandPyramid<T>& pyramid);

/// Low path only: x_{t+1} = (x_t * k_t) downsampled by 2, for each kernel in turn.
template <class T>
Tensor<T> cnn_reduction(const Tensor<T>& x, std::span<const Tensor<double>> kernels);

/// Throws ShapeError naming the padding needed when H or W is not a multiple of 2^levels.
void require_divisible(const Shape& nchw, std::size_t levels);

/// Tape op: one analysis level as a single [N, 4C, H/2, W/2] tensor with
/// channel blocks [LL | LH | HL | HH]. The kernels are fixed: gradients flow
/// to the input only.
template <class T>
NodeRef wavelet_level(Graph<T>& g, NodeRef x, const FilterPair& f = FilterPair::haar());

}  // namespace wcnn
