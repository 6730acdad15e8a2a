#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace wcnn {

using Shape = std::vector<std::size_t>;

/// Raised on any shape contract violation (mismatch, bad index, bad count).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a serialized tensor or checkpoint cannot be decoded.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Product of extents; throws std::overflow_error if it does not fit in size_t.
std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
struct DType;
template <>
struct DType<float> {
  static constexpr std::string_view name = "f32";
};
template <>
struct DType<double> {
  static constexpr std::string_view name = "f64";
};

/// Dense row-major N-d array. Images use NCHW.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // 4-d NCHW accessors
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool all_finite() const noexcept;
  T item() const;

  Tensor reshape(Shape shape) const;

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> add(const Tensor<T>& a, T b);
template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// a += b in place (the parameter-update path).
template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

/// Concatenate NCHW tensors along the channel axis, in argument order.
template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts);
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  return concat_channels(std::span<const Tensor<T>>(parts));
}
template <class T>
Tensor<T> slice_channels(const Tensor<T>& t, std::size_t begin, std::size_t count);

/// Half-open [begin, end) along one axis.
template <class T>
Tensor<T> slice(const Tensor<T>& t, std::size_t axis, std::size_t begin, std::size_t end);
/// 2-d transpose.
template <class T>
Tensor<T> transpose(const Tensor<T>& t);

template <class T>
T sum(const Tensor<T>& t);
template <class T>
T squared_norm(const Tensor<T>& t);
template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

// WTNS1: "WTNS1 <dtype> <ndim> <d0> ...\n" followed by little-endian scalars.
template <class T>
void write_wtns(std::ostream& os, const Tensor<T>& t);
template <class T>
void write_wtns(const std::filesystem::path& path, const Tensor<T>& t);
/// Reads either dtype and converts to T.
template <class T>
Tensor<T> read_wtns(std::istream& is);
template <class T>
Tensor<T> read_wtns(const std::filesystem::path& path);

/// Writes values converted to `dtype` ("f32"/"f64") in little-endian order.
template <class T>
void write_le_scalars(std::ostream& os, std::span<const T> values, std::string_view dtype);
/// Reads `count` scalars of `dtype` ("f32"/"f64") into `out` (converted).
template <class T>
void read_le_scalars(std::istream& is, std::string_view dtype, std::span<T> out);

}  // namespace wcnn
