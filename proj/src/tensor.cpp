#include "wcnn/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace wcnn {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d) {
      throw std::overflow_error("tensor extent product overflows: " + shape_str(shape));
    }
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f) {
  require_same_shape(a.shape(), b.shape(), op);
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = f(x[i], y[i]);
  return out;
}

}  // namespace

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

template <class T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

template <class T>
bool Tensor<T>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <class T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

template <class T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
  }
  return Tensor(std::move(shape), data_);
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "add", [](T x, T y) { return x + y; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "sub", [](T x, T y) { return x - y; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "mul", [](T x, T y) { return x * y; });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, T b) {
  Tensor<T> out = a;
  for (T& v : out.data()) v += b;
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out = a;
  for (T& v : out.data()) v *= factor;
  return out;
}

template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add_inplace");
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = parts[0].shape();
  if (first.size() != 4) throw ShapeError("concat_channels: expected NCHW, got " + shape_str(first));
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3]) {
      throw ShapeError("concat_channels: spatial/batch mismatch " + shape_str(first) + " vs " + shape_str(s));
    }
    channels += s[1];
  }
  const std::size_t batch = first[0];
  const std::size_t plane = first[2] * first[3];
  Tensor<T> out({batch, channels, first[2], first[3]});
  T* dst = out.raw();
  for (std::size_t n = 0; n < batch; ++n) {
    for (const auto& p : parts) {
      const std::size_t block = p.dim(1) * plane;
      std::copy_n(p.raw() + n * block, block, dst);
      dst += block;
    }
  }
  return out;
}

template <class T>
Tensor<T> slice_channels(const Tensor<T>& t, std::size_t begin, std::size_t count) {
  if (t.ndim() != 4) throw ShapeError("slice_channels: expected NCHW, got " + shape_str(t.shape()));
  return slice(t, 1, begin, begin + count);
}

template <class T>
Tensor<T> slice(const Tensor<T>& t, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = t.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(s));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape os = s;
  os[axis] = end - begin;
  Tensor<T> out(os);
  T* dst = out.raw();
  for (std::size_t o = 0; o < outer; ++o) {
    const T* src = t.raw() + (o * s[axis] + begin) * inner;
    std::copy_n(src, (end - begin) * inner, dst);
    dst += (end - begin) * inner;
  }
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& t) {
  if (t.ndim() != 2) throw ShapeError("transpose: expected 2-d, got " + shape_str(t.shape()));
  const std::size_t r = t.dim(0), c = t.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t[i * c + j];
  return out;
}

template <class T>
T sum(const Tensor<T>& t) {
  T s{0};
  for (T v : t.data()) s += v;
  return s;
}

template <class T>
T squared_norm(const Tensor<T>& t) {
  T s{0};
  for (T v : t.data()) s += v * v;
  return s;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T m{0};
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---- serialization ----

namespace {

template <class U>
void put_le(std::ostream& os, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
bool get_le(std::istream& is, U& value) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) return false;
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  std::memcpy(&value, bytes, sizeof(U));
  return true;
}

}  // namespace

template <class T>
void write_le_scalars(std::ostream& os, std::span<const T> values, std::string_view dtype) {
  if (dtype == "f64") {
    for (T v : values) put_le<double>(os, static_cast<double>(v));
  } else if (dtype == "f32") {
    for (T v : values) put_le<float>(os, static_cast<float>(v));
  } else {
    throw FormatError("unsupported dtype '" + std::string(dtype) + "'");
  }
}

template <class T>
void read_le_scalars(std::istream& is, std::string_view dtype, std::span<T> out) {
  if (dtype == "f64") {
    for (T& v : out) {
      double d;
      if (!get_le(is, d)) throw FormatError("truncated scalar payload");
      v = static_cast<T>(d);
    }
  } else if (dtype == "f32") {
    for (T& v : out) {
      float f;
      if (!get_le(is, f)) throw FormatError("truncated scalar payload");
      v = static_cast<T>(f);
    }
  } else {
    throw FormatError("unsupported dtype '" + std::string(dtype) + "'");
  }
}

template <class T>
void write_wtns(std::ostream& os, const Tensor<T>& t) {
  os << "WTNS1 " << DType<T>::name << ' ' << t.ndim();
  for (std::size_t d : t.shape()) os << ' ' << d;
  os << '\n';
  write_le_scalars<T>(os, t.data(), DType<T>::name);
  if (!os) throw FormatError("failed writing WTNS1 payload");
}

template <class T>
void write_wtns(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_wtns(os, t);
}

template <class T>
Tensor<T> read_wtns(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw FormatError("missing WTNS1 header");
  std::istringstream hs(header);
  std::string magic, dtype;
  std::size_t ndim = 0;
  if (!(hs >> magic >> dtype >> ndim) || magic != "WTNS1") throw FormatError("bad WTNS1 header: " + header);
  if (dtype != "f32" && dtype != "f64") throw FormatError("unsupported WTNS1 dtype '" + dtype + "'");
  if (ndim > 8) throw FormatError("WTNS1 ndim too large: " + std::to_string(ndim));
  Shape shape(ndim);
  for (auto& d : shape) {
    if (!(hs >> d)) throw FormatError("WTNS1 header truncated: " + header);
  }
  std::string trailing;
  if (hs >> trailing) throw FormatError("WTNS1 header has trailing fields: " + header);
  Tensor<T> out(shape);
  read_le_scalars<T>(is, dtype, out.data());
  return out;
}

template <class T>
Tensor<T> read_wtns(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_wtns<T>(is);
}

#define WCNN_INSTANTIATE(T)                                                                          \
  template class Tensor<T>;                                                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> add(const Tensor<T>&, T);                                                       \
  template Tensor<T> scale(const Tensor<T>&, T);                                                     \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> concat_channels(std::span<const Tensor<T>>);                                    \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                 \
  template Tensor<T> transpose(const Tensor<T>&);                                                    \
  template T sum(const Tensor<T>&);                                                                  \
  template T squared_norm(const Tensor<T>&);                                                         \
  template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);                                       \
  template void write_le_scalars(std::ostream&, std::span<const T>, std::string_view);               \
  template void read_le_scalars(std::istream&, std::string_view, std::span<T>);                      \
  template void write_wtns(std::ostream&, const Tensor<T>&);                                         \
  template void write_wtns(const std::filesystem::path&, const Tensor<T>&);                          \
  template Tensor<T> read_wtns(std::istream&);                                                       \
  template Tensor<T> read_wtns(const std::filesystem::path&);

WCNN_INSTANTIATE(float)
WCNN_INSTANTIATE(double)

#undef WCNN_INSTANTIATE

}  // namespace wcnn
