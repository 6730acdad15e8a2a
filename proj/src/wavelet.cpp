#include "wcnn/wavelet.hpp"

#include <cmath>
#include <stdexcept>

namespace wcnn {

FilterPair FilterPair::haar() {
  const double r = 1.0 / std::sqrt(2.0);
  return {"haar", {r, r}, {-r, r}};
}

void FilterPair::validate() const {
  if (low.empty() || low.size() != high.size()) {
    throw std::invalid_argument("filter pair '" + name + "' needs non-empty taps of equal length");
  }
}

bool FilterPair::orthonormal(double tol) const {
  validate();
  const std::size_t L = low.size();
  // <a, shift(b, 2s)> over all even shifts that overlap.
  auto corr = [L](const std::vector<double>& a, const std::vector<double>& b, std::ptrdiff_t shift) {
    double s = 0;
    for (std::size_t i = 0; i < L; ++i) {
      const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i) + shift;
      if (j >= 0 && j < static_cast<std::ptrdiff_t>(L)) s += a[i] * b[static_cast<std::size_t>(j)];
    }
    return s;
  };
  for (std::ptrdiff_t s = -static_cast<std::ptrdiff_t>(L); s <= static_cast<std::ptrdiff_t>(L); s += 2) {
    const double want = s == 0 ? 1.0 : 0.0;
    if (std::abs(corr(low, low, s) - want) > tol) return false;
    if (std::abs(corr(high, high, s) - want) > tol) return false;
    if (std::abs(corr(low, high, s)) > tol) return false;
  }
  return true;
}

FilterPair filter_by_name(const std::string& name) {
  if (name == "haar") return FilterPair::haar();
  throw std::invalid_argument("unknown wavelet '" + name + "' (available: haar)");
}

std::vector<double> convolve_full(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  std::vector<double> out(a.size() + b.size() - 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  return out;
}

Tensor<double> outer(std::span<const double> a, std::span<const double> b) {
  Tensor<double> k({a.size(), b.size()});
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) k[i * b.size() + j] = a[i] * b[j];
  return k;
}

template <class T>
std::vector<T> generalized_conv_pool(std::span<const T> x, std::span<const double> k, std::size_t p) {
  if (p == 0) throw std::invalid_argument("generalized_conv_pool: p must be positive");
  if (k.empty()) throw std::invalid_argument("generalized_conv_pool: empty kernel");
  const std::size_t L = k.size();
  if (x.size() < L) {
    throw ShapeError("generalized_conv_pool: extent " + std::to_string(x.size()) + " smaller than kernel " +
                     std::to_string(L));
  }
  const std::size_t m = (x.size() - L) / p + 1;
  std::vector<T> y(m);
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0;
    for (std::size_t t = 0; t < L; ++t) s += k[t] * static_cast<double>(x[p * j + L - 1 - t]);
    y[j] = static_cast<T>(s);
  }
  return y;
}

namespace {

// Periodic analysis of n samples spaced `stride` apart.
template <class T>
void analyze(const T* x, std::size_t n, std::size_t stride, const FilterPair& f, T* lo, T* hi,
             std::size_t out_stride) {
  const std::size_t L = f.low.size();
  for (std::size_t j = 0; j < n / 2; ++j) {
    double sl = 0, sh = 0;
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t idx = (2 * j + L - 1 - t) % n;
      const double v = x[idx * stride];
      sl += f.low[t] * v;
      sh += f.high[t] * v;
    }
    lo[j * out_stride] = static_cast<T>(sl);
    hi[j * out_stride] = static_cast<T>(sh);
  }
}

// Adjoint of analyze; accumulates into x (which the caller zeroes).
template <class T>
void synthesize(const T* lo, const T* hi, std::size_t in_stride, std::size_t n, const FilterPair& f, T* x,
                std::size_t stride) {
  const std::size_t L = f.low.size();
  for (std::size_t j = 0; j < n / 2; ++j) {
    const double l = lo[j * in_stride], h = hi[j * in_stride];
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t idx = (2 * j + L - 1 - t) % n;
      x[idx * stride] += static_cast<T>(f.low[t] * l + f.high[t] * h);
    }
  }
}

void require_even_2d(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected NCHW, got " + shape_str(s));
  if (s[2] == 0 || s[3] == 0 || s[2] % 2 != 0 || s[3] % 2 != 0) {
    throw ShapeError(std::string(op) + ": height and width must be even and positive, got " + shape_str(s));
  }
}

// Level analysis over every (n, c) plane; outputs four [N,C,H/2,W/2] blocks.
template <class T>
void analyze_planes(const T* x, std::size_t planes, std::size_t H, std::size_t W, const FilterPair& f, T* ll, T* lh,
                    T* hl, T* hh) {
  const std::size_t h2 = H / 2, w2 = W / 2;
  std::vector<T> rl(H * w2), rh(H * w2);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x + p * H * W;
    for (std::size_t r = 0; r < H; ++r) analyze(src + r * W, W, 1, f, rl.data() + r * w2, rh.data() + r * w2, 1);
    const std::size_t o = p * h2 * w2;
    for (std::size_t c = 0; c < w2; ++c) {
      analyze(rl.data() + c, H, w2, f, ll + o + c, lh + o + c, w2);
      analyze(rh.data() + c, H, w2, f, hl + o + c, hh + o + c, w2);
    }
  }
}

template <class T>
void synthesize_planes(const T* ll, const T* lh, const T* hl, const T* hh, std::size_t planes, std::size_t H,
                       std::size_t W, const FilterPair& f, T* x) {
  const std::size_t h2 = H / 2, w2 = W / 2;
  std::vector<T> rl(H * w2), rh(H * w2);
  for (std::size_t p = 0; p < planes; ++p) {
    std::fill(rl.begin(), rl.end(), T{0});
    std::fill(rh.begin(), rh.end(), T{0});
    const std::size_t o = p * h2 * w2;
    for (std::size_t c = 0; c < w2; ++c) {
      synthesize(ll + o + c, lh + o + c, w2, H, f, rl.data() + c, w2);
      synthesize(hl + o + c, hh + o + c, w2, H, f, rh.data() + c, w2);
    }
    T* dst = x + p * H * W;
    for (std::size_t r = 0; r < H; ++r) synthesize(rl.data() + r * w2, rh.data() + r * w2, 1, W, f, dst + r * W, 1);
  }
}

}  // namespace

template <class T>
std::pair<std::vector<T>, std::vector<T>> dwt1d(std::span<const T> x, const FilterPair& f) {
  f.validate();
  if (x.empty() || x.size() % 2 != 0) {
    throw ShapeError("dwt1d: length must be even and positive, got " + std::to_string(x.size()));
  }
  std::vector<T> lo(x.size() / 2), hi(x.size() / 2);
  analyze(x.data(), x.size(), 1, f, lo.data(), hi.data(), 1);
  return {std::move(lo), std::move(hi)};
}

template <class T>
std::vector<T> idwt1d(std::span<const T> low, std::span<const T> high, const FilterPair& f) {
  f.validate();
  if (low.size() != high.size()) throw ShapeError("idwt1d: band lengths differ");
  std::vector<T> x(2 * low.size(), T{0});
  synthesize(low.data(), high.data(), 1, x.size(), f, x.data(), 1);
  return x;
}

template <class T>
Tensor<T> generalized_conv_pool(const Tensor<T>& x, const Tensor<double>& kernel, std::size_t p) {
  if (x.ndim() != 4) throw ShapeError("generalized_conv_pool: expected NCHW, got " + shape_str(x.shape()));
  if (kernel.ndim() != 2) throw ShapeError("generalized_conv_pool: kernel must be 2-d");
  if (p == 0) throw std::invalid_argument("generalized_conv_pool: p must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  if (H < kh || W < kw) {
    throw ShapeError("generalized_conv_pool: extent " + shape_str(x.shape()) + " smaller than kernel " +
                     shape_str(kernel.shape()));
  }
  const std::size_t ho = (H - kh) / p + 1, wo = (W - kw) / p + 1;
  Tensor<T> y({N, C, ho, wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double s = 0;
          for (std::size_t a = 0; a < kh; ++a)
            for (std::size_t b = 0; b < kw; ++b)
              s += kernel[a * kw + b] * static_cast<double>(x.at(n, c, p * i + kh - 1 - a, p * j + kw - 1 - b));
          y.at(n, c, i, j) = static_cast<T>(s);
        }
  return y;
}

template <class T>
Subbands<T> dwt2d_level(const Tensor<T>& x, const FilterPair& f) {
  f.validate();
  require_even_2d(x.shape(), "dwt2d_level");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Shape hs{N, C, H / 2, W / 2};
  Subbands<T> b{Tensor<T>(hs), Tensor<T>(hs), Tensor<T>(hs), Tensor<T>(hs)};
  analyze_planes(x.raw(), N * C, H, W, f, b.ll.raw(), b.lh.raw(), b.hl.raw(), b.hh.raw());
  return b;
}

template <class T>
Tensor<T> idwt2d_level(const Subbands<T>& b, const FilterPair& f) {
  f.validate();
  const Shape& s = b.ll.shape();
  if (s.size() != 4 || b.lh.shape() != s || b.hl.shape() != s || b.hh.shape() != s) {
    throw ShapeError("idwt2d_level: subband shapes disagree");
  }
  Tensor<T> x({s[0], s[1], 2 * s[2], 2 * s[3]});
  synthesize_planes(b.ll.raw(), b.lh.raw(), b.hl.raw(), b.hh.raw(), s[0] * s[1], 2 * s[2], 2 * s[3], f, x.raw());
  return x;
}

void require_divisible(const Shape& s, std::size_t levels) {
  if (s.size() != 4) throw ShapeError("expected NCHW, got " + shape_str(s));
  if (levels > 30) throw ShapeError("level count " + std::to_string(levels) + " is unreasonable");
  const std::size_t m = std::size_t{1} << levels;
  if (s[2] == 0 || s[3] == 0 || s[2] % m != 0 || s[3] % m != 0) {
    auto up = [m](std::size_t v) { return (v + m - 1) / m * m; };
    throw ShapeError("extent " + std::to_string(s[2]) + "x" + std::to_string(s[3]) + " is not divisible by 2^" +
                     std::to_string(levels) + "=" + std::to_string(m) + "; pad to " + std::to_string(up(s[2])) +
                     "x" + std::to_string(up(s[3])) + " (add " + std::to_string(up(s[2]) - s[2]) + " rows, " +
                     std::to_string(up(s[3]) - s[3]) + " columns)");
  }
}

template <class T>
SubbandPyramid<T> decompose(const Tensor<T>& x, std::size_t levels, const FilterPair& f) {
  if (levels == 0) throw std::invalid_argument("decompose: at least one level is required");
  require_divisible(x.shape(), levels);
  SubbandPyramid<T> p;
  p.source_shape = x.shape();
  Tensor<T> current = x;
  for (std::size_t t = 0; t < levels; ++t) {
    Subbands<T> b = dwt2d_level(current, f);
    p.details.push_back({std::move(b.lh), std::move(b.hl), std::move(b.hh)});
    current = std::move(b.ll);
  }
  p.low = std::move(current);
  return p;
}

template <class T>
Tensor<T> reconstruct(const SubbandPyramid<T>& p, const FilterPair& f) {
  if (!f.orthonormal(1e-9)) throw std::invalid_argument("reconstruct: filter pair '" + f.name + "' is not orthonormal");
  if (p.details.empty()) throw ShapeError("reconstruct: pyramid has no levels");
  const Shape& src = p.source_shape;
  if (src.size() != 4) throw ShapeError("reconstruct: malformed source shape " + shape_str(src));
  for (std::size_t t = 1; t <= p.details.size(); ++t) {
    const Shape want{src[0], src[1], src[2] >> t, src[3] >> t};
    const auto& d = p.details[t - 1];
    if ((want[2] << t) != src[2] || (want[3] << t) != src[3] || d.lh.shape() != want || d.hl.shape() != want ||
        d.hh.shape() != want) {
      throw ShapeError("reconstruct: level " + std::to_string(t) + " bands do not have shape " + shape_str(want));
    }
  }
  const Shape last{src[0], src[1], src[2] >> p.details.size(), src[3] >> p.details.size()};
  if (p.low.shape() != last) throw ShapeError("reconstruct: low band does not have shape " + shape_str(last));
  Tensor<T> current = p.low;
  for (std::size_t t = p.details.size(); t-- > 0;) {
    const auto& d = p.details[t];
    current = idwt2d_level(Subbands<T>{current, d.lh, d.hl, d.hh}, f);
  }
  return current;
}

template <class T>
double pyramid_energy(const SubbandPyramid<T>& p) {
  auto e = [](const Tensor<T>& t) {
    double s = 0;
    for (T v : t.data()) s += static_cast<double>(v) * static_cast<double>(v);
    return s;
  };
  double total = e(p.low);
  for (const auto& d : p.details) total += e(d.lh) + e(d.hl) + e(d.hh);
  return total;
}

template <class T>
Tensor<T> cnn_reduction(const Tensor<T>& x, std::span<const Tensor<double>> kernels) {
  require_divisible(x.shape(), kernels.size());
  Tensor<T> current = x;
  for (const auto& k : kernels) current = generalized_conv_pool(current, k, 2);
  return current;
}

template <class T>
NodeRef wavelet_level(Graph<T>& g, NodeRef x, const FilterPair& f) {
  const Tensor<T>& in = g.value(x);
  Subbands<T> b = dwt2d_level(in, f);
  Tensor<T> out = concat_channels(std::vector<Tensor<T>>{b.ll, b.lh, b.hl, b.hh});
  return g.record("wavelet_level:" + f.name, std::move(out), {x}, [f](BackwardContext<T>& c) {
    const Shape& s = c.input(0).shape();
    const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
    const std::size_t band = (H / 2) * (W / 2);
    const Shape hs{N, C, H / 2, W / 2};
    Subbands<T> gb{Tensor<T>(hs), Tensor<T>(hs), Tensor<T>(hs), Tensor<T>(hs)};
    Tensor<T>* parts[4] = {&gb.ll, &gb.lh, &gb.hl, &gb.hh};
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < 4; ++k)
        std::copy_n(c.grad_out.raw() + (n * 4 + k) * C * band, C * band, parts[k]->raw() + n * C * band);
    Tensor<T> dx(s);
    synthesize_planes(gb.ll.raw(), gb.lh.raw(), gb.hl.raw(), gb.hh.raw(), N * C, H, W, f, dx.raw());
    c.input_grads[0] = std::move(dx);
  });
}

#define WCNN_INSTANTIATE(T)                                                                           \
  template std::vector<T> generalized_conv_pool(std::span<const T>, std::span<const double>, std::size_t); \
  template std::pair<std::vector<T>, std::vector<T>> dwt1d(std::span<const T>, const FilterPair&);    \
  template std::vector<T> idwt1d(std::span<const T>, std::span<const T>, const FilterPair&);          \
  template Tensor<T> generalized_conv_pool(const Tensor<T>&, const Tensor<double>&, std::size_t);     \
  template Subbands<T> dwt2d_level(const Tensor<T>&, const FilterPair&);                              \
  template Tensor<T> idwt2d_level(const Subbands<T>&, const FilterPair&);                             \
  template SubbandPyramid<T> decompose(const Tensor<T>&, std::size_t, const FilterPair&);             \
  template Tensor<T> reconstruct(const SubbandPyramid<T>&, const FilterPair&);                        \
  template double pyramid_energy(const SubbandPyramid<T>&);                                           \
  template Tensor<T> cnn_reduction(const Tensor<T>&, std::span<const Tensor<double>>);                \
  template NodeRef wavelet_level(Graph<T>&, NodeRef, const FilterPair&);

WCNN_INSTANTIATE(float)
WCNN_INSTANTIATE(double)

#undef WCNN_INSTANTIATE

}  // namespace wcnn
