#include "wcnn/layers.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

namespace wcnn {

namespace {

std::atomic<int> g_threads{1};

/// Calls f(begin, end, worker) over [0, n) split into contiguous chunks.
template <class F>
void parallel_for(std::size_t n, int workers, F&& f) {
  if (workers <= 1 || n <= 1) {
    f(std::size_t{0}, n, 0);
    return;
  }
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::vector<std::thread> pool;
  pool.reserve(w);
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t begin = n * t / w, end = n * (t + 1) / w;
    pool.emplace_back([&f, begin, end, t] { f(begin, end, static_cast<int>(t)); });
  }
  for (auto& th : pool) th.join();
}

int workers_for(std::size_t batch) {
  return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(num_threads()), batch));
}

std::uint64_t fnv1a(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xff;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void require_nchw(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected NCHW input, got " + shape_str(s));
}

struct ConvGeom {
  std::size_t n, cin, h, w, cout, kh, kw, ho, wo, stride, pad;
  std::size_t k_rows() const { return cin * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
};

template <class T>
ConvGeom conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int padding) {
  require_nchw(x.shape(), "conv2d");
  if (w.ndim() != 4) throw ShapeError("conv2d: weight must be [out,in,kh,kw], got " + shape_str(w.shape()));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                     std::to_string(w.dim(1)));
  }
  if (b.ndim() != 1 || b.dim(0) != w.dim(0)) {
    throw ShapeError("conv2d: bias shape " + shape_str(b.shape()) + " does not match " + std::to_string(w.dim(0)) +
                     " output channels");
  }
  ConvGeom g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = static_cast<std::size_t>(stride);
  g.pad = static_cast<std::size_t>(padding);
  g.ho = conv_out_extent(g.h, g.kh, g.stride, g.pad);
  g.wo = conv_out_extent(g.w, g.kw, g.stride, g.pad);
  return g;
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t P = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(dst, g.wo, T{0});
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) ? T{0} : src[iw];
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, const ConvGeom& g, T* dx) {
  const std::size_t P = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(ih)) * g.w;
          const T* src = row + oh * g.wo;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      if (a == T{0}) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M,K] += A[M,N] * B[K,N]^T
template <class T>
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      T s{0};
      for (std::size_t j = 0; j < N; ++j) s += a[j] * b[j];
      C[i * K + k] += s;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <class T>
void gemm_tn(std::size_t K, std::size_t N, std::size_t M, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* b = B + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      if (a == T{0}) continue;
      T* c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

template <class T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const ConvGeom& g) {
  Tensor<T> out({g.n, g.cout, g.ho, g.wo});
  const std::size_t K = g.k_rows(), P = g.pixels();
  const int workers = workers_for(g.n);
  parallel_for(g.n, workers, [&](std::size_t begin, std::size_t end, int) {
    std::vector<T> col(K * P);
    for (std::size_t n = begin; n < end; ++n) {
      im2col(x.raw() + n * g.cin * g.h * g.w, g, col.data());
      T* o = out.raw() + n * g.cout * P;
      for (std::size_t co = 0; co < g.cout; ++co) std::fill_n(o + co * P, P, b[co]);
      gemm_nn(g.cout, P, K, w.raw(), col.data(), o);
    }
  });
  return out;
}

template <class T>
void conv_backward(BackwardContext<T>& c, const ConvGeom& g) {
  const Tensor<T>& x = c.input(0);
  const Tensor<T>& w = c.input(1);
  const Tensor<T>& dy = c.grad_out;
  const std::size_t K = g.k_rows(), P = g.pixels();
  const bool need_x = c.needs(0), need_w = c.needs(1), need_b = c.needs(2);

  Tensor<T> dx = need_x ? Tensor<T>(x.shape()) : Tensor<T>();
  const int workers = workers_for(g.n);
  std::vector<Tensor<T>> dw_parts(static_cast<std::size_t>(std::max(workers, 1)));
  parallel_for(g.n, workers, [&](std::size_t begin, std::size_t end, int worker) {
    std::vector<T> col(K * P);
    std::vector<T> dcol(need_x ? K * P : 0);
    Tensor<T>& dw = dw_parts[static_cast<std::size_t>(worker)];
    if (need_w) dw = Tensor<T>(w.shape());
    for (std::size_t n = begin; n < end; ++n) {
      const T* dyn = dy.raw() + n * g.cout * P;
      if (need_w) {
        im2col(x.raw() + n * g.cin * g.h * g.w, g, col.data());
        gemm_nt(g.cout, K, P, dyn, col.data(), dw.raw());
      }
      if (need_x) {
        std::fill(dcol.begin(), dcol.end(), T{0});
        gemm_tn(K, P, g.cout, w.raw(), dyn, dcol.data());
        col2im(dcol.data(), g, dx.raw() + n * g.cin * g.h * g.w);
      }
    }
  });
  if (need_x) c.input_grads[0] = std::move(dx);
  if (need_w) {
    Tensor<T> dw = std::move(dw_parts[0]);
    for (std::size_t i = 1; i < dw_parts.size(); ++i) add_inplace(dw, dw_parts[i]);
    c.input_grads[1] = std::move(dw);
  }
  if (need_b) {
    Tensor<T> db({g.cout});
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t co = 0; co < g.cout; ++co) {
        const T* d = dy.raw() + (n * g.cout + co) * P;
        T s{0};
        for (std::size_t p = 0; p < P; ++p) s += d[p];
        db[co] += s;
      }
    c.input_grads[2] = std::move(db);
  }
}

struct PlaneGeom {
  std::size_t n, c, hw;
};

template <class T>
PlaneGeom planes(const Tensor<T>& x, const char* op) {
  if (x.ndim() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  if (x.ndim() == 2) return {x.dim(0), x.dim(1), 1};
  throw ShapeError(std::string(op) + ": expected NCHW or NC input, got " + shape_str(x.shape()));
}

template <class T>
void he_normal(Tensor<T>& t, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (T& v : t.data()) v = static_cast<T>(dist(rng));
}

}  // namespace

void set_num_threads(int n) { g_threads = std::max(1, n); }
int num_threads() { return g_threads; }

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError("stride must be positive");
  if (in + 2 * pad < k) {
    throw ShapeError("extent " + std::to_string(in) + " with padding " + std::to_string(pad) +
                     " is smaller than kernel " + std::to_string(k));
  }
  return (in + 2 * pad - k) / stride + 1;
}

// ---- parameter factories ----

template <class T>
Conv2dParams<T> Conv2dParams<T>::make(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t k,
                                      int stride, int padding, std::mt19937_64* rng) {
  if (k != 1 && k != 3) throw std::invalid_argument(name + ": kernel size must be 1 or 3");
  if (stride != 1 && stride != 2) throw std::invalid_argument(name + ": stride must be 1 or 2");
  if (in_ch == 0 || out_ch == 0) throw std::invalid_argument(name + ": channel counts must be positive");
  Conv2dParams p;
  p.weight = {name + ".weight", Tensor<T>({out_ch, in_ch, k, k}), {}, true};
  p.bias = {name + ".bias", Tensor<T>({out_ch}), {}, true};
  if (rng) he_normal(p.weight.value, in_ch * k * k, *rng);
  p.stride = stride;
  p.padding = padding;
  return p;
}

template <class T>
BatchNormParams<T> BatchNormParams<T>::make(const std::string& name, std::size_t channels) {
  BatchNormParams p;
  p.gamma = {name + ".gamma", Tensor<T>::ones({channels}), {}, true};
  p.beta = {name + ".beta", Tensor<T>({channels}), {}, true};
  p.running_mean = Tensor<T>({channels});
  p.running_var = Tensor<T>::ones({channels});
  return p;
}

template <class T>
DenseParams<T> DenseParams<T>::make(const std::string& name, std::size_t in, std::size_t out,
                                    std::mt19937_64* rng) {
  DenseParams p;
  p.weight = {name + ".weight", Tensor<T>({out, in}), {}, true};
  p.bias = {name + ".bias", Tensor<T>({out}), {}, true};
  if (rng) he_normal(p.weight.value, in, *rng);
  return p;
}

// ---- tensor kernels ----

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int padding) {
  return conv_forward(x, w, b, conv_geometry(x, w, b, stride, padding));
}

template <class T>
Tensor<T> average_pool(const Tensor<T>& x, std::size_t p) {
  require_nchw(x.shape(), "average_pool");
  if (p == 0) throw ShapeError("average_pool: p must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % p != 0 || W % p != 0) {
    throw ShapeError("average_pool: extent " + shape_str(x.shape()) + " not divisible by " + std::to_string(p));
  }
  const std::size_t ho = H / p, wo = W / p;
  Tensor<T> out({N, C, ho, wo});
  const T inv = T{1} / static_cast<T>(p * p);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          T s{0};
          for (std::size_t a = 0; a < p; ++a)
            for (std::size_t b = 0; b < p; ++b) s += x.at(n, c, i * p + a, j * p + b);
          out.at(n, c, i, j) = s * inv;
        }
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

template <class T>
Tensor<T> global_average_pool(const Tensor<T>& x) {
  require_nchw(x.shape(), "global_average_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw ShapeError("global_average_pool: empty spatial extent");
  Tensor<T> out({N, C});
  for (std::size_t i = 0; i < N * C; ++i) {
    T s{0};
    for (std::size_t k = 0; k < HW; ++k) s += x[i * HW + k];
    out[i] = s / static_cast<T>(HW);
  }
  return out;
}

template <class T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1 || x.dim(1) != w.dim(1) || b.dim(0) != w.dim(0)) {
    throw ShapeError("fully_connected: incompatible shapes x" + shape_str(x.shape()) + " W" + shape_str(w.shape()) +
                     " b" + shape_str(b.shape()));
  }
  const std::size_t N = x.dim(0), D = x.dim(1), C = w.dim(0);
  Tensor<T> out({N, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      T s = b[c];
      for (std::size_t d = 0; d < D; ++d) s += x[n * D + d] * w[c * D + d];
      out[n * C + c] = s;
    }
  return out;
}

namespace {

template <class T>
struct BnForward {
  Tensor<T> y;
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

template <class T>
BnForward<T> bn_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormParams<T>& st,
                        Mode mode) {
  const PlaneGeom pg = planes(x, "batch_norm");
  if (gamma.numel() != pg.c || beta.numel() != pg.c || st.running_mean.numel() != pg.c) {
    throw ShapeError("batch_norm: parameters sized for " + std::to_string(gamma.numel()) + " channels, input has " +
                     std::to_string(pg.c));
  }
  const std::size_t M = pg.n * pg.hw;
  if (mode == Mode::train && M < 2) {
    throw ShapeError("batch_norm: train mode needs more than one value per channel, got " + shape_str(x.shape()));
  }
  BnForward<T> f{Tensor<T>(x.shape()), Tensor<T>(x.shape()), std::vector<T>(pg.c)};
  for (std::size_t c = 0; c < pg.c; ++c) {
    T mean, var;
    if (mode == Mode::train) {
      double s = 0;
      for (std::size_t n = 0; n < pg.n; ++n)
        for (std::size_t k = 0; k < pg.hw; ++k) s += x[(n * pg.c + c) * pg.hw + k];
      const double m = s / static_cast<double>(M);
      double ss = 0;
      for (std::size_t n = 0; n < pg.n; ++n)
        for (std::size_t k = 0; k < pg.hw; ++k) {
          const double d = x[(n * pg.c + c) * pg.hw + k] - m;
          ss += d * d;
        }
      mean = static_cast<T>(m);
      var = static_cast<T>(ss / static_cast<double>(M));
      const T unbiased = static_cast<T>(ss / static_cast<double>(M - 1));
      st.running_mean[c] = (T{1} - st.momentum) * st.running_mean[c] + st.momentum * mean;
      st.running_var[c] = (T{1} - st.momentum) * st.running_var[c] + st.momentum * unbiased;
    } else {
      mean = st.running_mean[c];
      var = st.running_var[c];
    }
    const T inv = T{1} / std::sqrt(var + st.epsilon);
    f.inv_std[c] = inv;
    for (std::size_t n = 0; n < pg.n; ++n)
      for (std::size_t k = 0; k < pg.hw; ++k) {
        const std::size_t i = (n * pg.c + c) * pg.hw + k;
        const T xh = (x[i] - mean) * inv;
        f.xhat[i] = xh;
        f.y[i] = gamma[c] * xh + beta[c];
      }
  }
  return f;
}

}  // namespace

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode) {
  return bn_forward(x, p.gamma.value, p.beta.value, p, mode).y;
}

template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.ndim() != 2) throw ShapeError("softmax: expected [batch, classes], got " + shape_str(logits.shape()));
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.raw() + n * C;
    const T m = *std::max_element(z, z + C);
    T s{0};
    for (std::size_t c = 0; c < C; ++c) s += (out[n * C + c] = std::exp(z[c] - m));
    for (std::size_t c = 0; c < C; ++c) out[n * C + c] /= s;
  }
  return out;
}

template <class T>
T softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.ndim() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  double loss = 0;
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= C) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[n]) + " outside [0," +
                              std::to_string(C) + ")");
    }
    const T* z = logits.raw() + n * C;
    const T m = *std::max_element(z, z + C);
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(z[c] - m));
    loss += std::log(s) + static_cast<double>(m) - static_cast<double>(z[labels[n]]);
  }
  return static_cast<T>(loss / static_cast<double>(N));
}

template <class T>
T sigmoid_bce_multilabel(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape() || logits.ndim() != 2) {
    throw ShapeError("sigmoid_bce_multilabel: logits " + shape_str(logits.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  double loss = 0;
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double z = logits[i], y = targets[i];
    loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  return static_cast<T>(loss / static_cast<double>(logits.numel()));
}

// ---- tape ops ----

template <class T>
NodeRef conv2d(Graph<T>& g, NodeRef x, NodeRef w, NodeRef b, int stride, int padding) {
  const ConvGeom geom = conv_geometry(g.value(x), g.value(w), g.value(b), stride, padding);
  Tensor<T> out = conv_forward(g.value(x), g.value(w), g.value(b), geom);
  return g.record("conv2d", std::move(out), {x, w, b},
                  [geom](BackwardContext<T>& c) { conv_backward(c, geom); });
}

template <class T>
NodeRef conv2d(Graph<T>& g, NodeRef x, Conv2dParams<T>& p) {
  return conv2d(g, x, g.parameter(p.weight), g.parameter(p.bias), p.stride, p.padding);
}

template <class T>
NodeRef average_pool(Graph<T>& g, NodeRef x, std::size_t p) {
  return g.record("average_pool", average_pool(g.value(x), p), {x}, [p](BackwardContext<T>& c) {
    const Tensor<T>& dy = c.grad_out;
    Tensor<T> dx(c.input(0).shape());
    const T inv = T{1} / static_cast<T>(p * p);
    for (std::size_t n = 0; n < dy.dim(0); ++n)
      for (std::size_t ch = 0; ch < dy.dim(1); ++ch)
        for (std::size_t i = 0; i < dy.dim(2); ++i)
          for (std::size_t j = 0; j < dy.dim(3); ++j) {
            const T v = dy.at(n, ch, i, j) * inv;
            for (std::size_t a = 0; a < p; ++a)
              for (std::size_t b = 0; b < p; ++b) dx.at(n, ch, i * p + a, j * p + b) = v;
          }
    c.input_grads[0] = std::move(dx);
  });
}

template <class T>
NodeRef relu(Graph<T>& g, NodeRef x) {
  Tensor<T> out = relu(g.value(x));
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::uint64_t word = 0;
  const Tensor<T>& in = g.value(x);
  for (std::size_t i = 0; i < in.numel(); ++i) {
    word = (word << 1) | (in[i] > T{0} ? 1u : 0u);
    if ((i & 63) == 63) {
      h = fnv1a(h, word);
      word = 0;
    }
  }
  g.mix_kink_signature(fnv1a(h, word));
  return g.record("relu", std::move(out), {x}, [](BackwardContext<T>& c) {
    Tensor<T> dx = c.grad_out;
    const Tensor<T>& in = c.input(0);
    for (std::size_t i = 0; i < dx.numel(); ++i)
      if (!(in[i] > T{0})) dx[i] = T{0};
    c.input_grads[0] = std::move(dx);
  });
}

template <class T>
NodeRef global_average_pool(Graph<T>& g, NodeRef x) {
  return g.record("global_average_pool", global_average_pool(g.value(x)), {x}, [](BackwardContext<T>& c) {
    const Shape& s = c.input(0).shape();
    const std::size_t HW = s[2] * s[3];
    Tensor<T> dx(s);
    for (std::size_t i = 0; i < s[0] * s[1]; ++i) {
      const T v = c.grad_out[i] / static_cast<T>(HW);
      std::fill_n(dx.raw() + i * HW, HW, v);
    }
    c.input_grads[0] = std::move(dx);
  });
}

template <class T>
NodeRef fully_connected(Graph<T>& g, NodeRef x, NodeRef w, NodeRef b) {
  return g.record("fully_connected", fully_connected(g.value(x), g.value(w), g.value(b)), {x, w, b},
                  [](BackwardContext<T>& c) {
                    const Tensor<T>& xv = c.input(0);
                    const Tensor<T>& wv = c.input(1);
                    const Tensor<T>& dy = c.grad_out;
                    const std::size_t N = xv.dim(0), D = xv.dim(1), C = wv.dim(0);
                    if (c.needs(0)) {
                      Tensor<T> dx(xv.shape());
                      gemm_nn(N, D, C, dy.raw(), wv.raw(), dx.raw());
                      c.input_grads[0] = std::move(dx);
                    }
                    if (c.needs(1)) {
                      Tensor<T> dw(wv.shape());
                      gemm_tn(C, D, N, dy.raw(), xv.raw(), dw.raw());
                      c.input_grads[1] = std::move(dw);
                    }
                    if (c.needs(2)) {
                      Tensor<T> db({C});
                      for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t k = 0; k < C; ++k) db[k] += dy[n * C + k];
                      c.input_grads[2] = std::move(db);
                    }
                  });
}

template <class T>
NodeRef fully_connected(Graph<T>& g, NodeRef x, DenseParams<T>& p) {
  return fully_connected(g, x, g.parameter(p.weight), g.parameter(p.bias));
}

template <class T>
NodeRef batch_norm(Graph<T>& g, NodeRef x, NodeRef gamma, NodeRef beta, BatchNormParams<T>& state, Mode mode) {
  BnForward<T> f = bn_forward(g.value(x), g.value(gamma), g.value(beta), state, mode);
  Tensor<T> y = std::move(f.y);
  return g.record(
      "batch_norm", std::move(y), {x, gamma, beta},
      [xhat = std::move(f.xhat), inv_std = std::move(f.inv_std), mode](BackwardContext<T>& c) {
        const PlaneGeom pg = planes(c.input(0), "batch_norm");
        const Tensor<T>& gam = c.input(1);
        const Tensor<T>& dy = c.grad_out;
        const T M = static_cast<T>(pg.n * pg.hw);
        Tensor<T> dx = c.needs(0) ? Tensor<T>(dy.shape()) : Tensor<T>();
        Tensor<T> dgamma({pg.c}), dbeta({pg.c});
        for (std::size_t ch = 0; ch < pg.c; ++ch) {
          T sum_dy{0}, sum_dy_xhat{0};
          for (std::size_t n = 0; n < pg.n; ++n)
            for (std::size_t k = 0; k < pg.hw; ++k) {
              const std::size_t i = (n * pg.c + ch) * pg.hw + k;
              sum_dy += dy[i];
              sum_dy_xhat += dy[i] * xhat[i];
            }
          dgamma[ch] = sum_dy_xhat;
          dbeta[ch] = sum_dy;
          if (!c.needs(0)) continue;
          const T scale_c = gam[ch] * inv_std[ch];
          for (std::size_t n = 0; n < pg.n; ++n)
            for (std::size_t k = 0; k < pg.hw; ++k) {
              const std::size_t i = (n * pg.c + ch) * pg.hw + k;
              if (mode == Mode::train) {
                dx[i] = scale_c * (dy[i] - sum_dy / M - xhat[i] * sum_dy_xhat / M);
              } else {
                dx[i] = scale_c * dy[i];
              }
            }
        }
        if (c.needs(0)) c.input_grads[0] = std::move(dx);
        if (c.needs(1)) c.input_grads[1] = std::move(dgamma);
        if (c.needs(2)) c.input_grads[2] = std::move(dbeta);
      });
}

template <class T>
NodeRef batch_norm(Graph<T>& g, NodeRef x, BatchNormParams<T>& p, Mode mode) {
  return batch_norm(g, x, g.parameter(p.gamma), g.parameter(p.beta), p, mode);
}

template <class T>
NodeRef softmax_cross_entropy(Graph<T>& g, NodeRef logits, std::vector<int> labels) {
  const T loss = softmax_cross_entropy(g.value(logits), std::span<const int>(labels));
  return g.record("softmax_cross_entropy", Tensor<T>::scalar(loss), {logits},
                  [labels = std::move(labels)](BackwardContext<T>& c) {
                    Tensor<T> p = softmax(c.input(0));
                    const std::size_t N = p.dim(0), C = p.dim(1);
                    const T s = c.grad_out[0] / static_cast<T>(N);
                    for (std::size_t n = 0; n < N; ++n) {
                      p[n * C + static_cast<std::size_t>(labels[n])] -= T{1};
                      for (std::size_t k = 0; k < C; ++k) p[n * C + k] *= s;
                    }
                    c.input_grads[0] = std::move(p);
                  });
}

template <class T>
NodeRef sigmoid_bce_multilabel(Graph<T>& g, NodeRef logits, Tensor<T> targets) {
  const T loss = sigmoid_bce_multilabel(g.value(logits), targets);
  return g.record("sigmoid_bce_multilabel", Tensor<T>::scalar(loss), {logits},
                  [targets = std::move(targets)](BackwardContext<T>& c) {
                    const Tensor<T>& z = c.input(0);
                    Tensor<T> dz(z.shape());
                    const T s = c.grad_out[0] / static_cast<T>(z.numel());
                    for (std::size_t i = 0; i < z.numel(); ++i) {
                      const T sig = z[i] >= T{0} ? T{1} / (T{1} + std::exp(-z[i]))
                                                 : std::exp(z[i]) / (T{1} + std::exp(z[i]));
                      dz[i] = (sig - targets[i]) * s;
                    }
                    c.input_grads[0] = std::move(dz);
                  });
}

#define WCNN_INSTANTIATE(T)                                                                                  \
  template struct Conv2dParams<T>;                                                                           \
  template struct BatchNormParams<T>;                                                                        \
  template struct DenseParams<T>;                                                                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);                 \
  template Tensor<T> average_pool(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> relu(const Tensor<T>&);                                                                 \
  template Tensor<T> global_average_pool(const Tensor<T>&);                                                  \
  template Tensor<T> fully_connected(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> batch_norm(const Tensor<T>&, BatchNormParams<T>&, Mode);                                \
  template Tensor<T> softmax(const Tensor<T>&);                                                              \
  template T softmax_cross_entropy(const Tensor<T>&, std::span<const int>);                                  \
  template T sigmoid_bce_multilabel(const Tensor<T>&, const Tensor<T>&);                                     \
  template NodeRef conv2d(Graph<T>&, NodeRef, NodeRef, NodeRef, int, int);                                   \
  template NodeRef conv2d(Graph<T>&, NodeRef, Conv2dParams<T>&);                                             \
  template NodeRef average_pool(Graph<T>&, NodeRef, std::size_t);                                            \
  template NodeRef relu(Graph<T>&, NodeRef);                                                                 \
  template NodeRef global_average_pool(Graph<T>&, NodeRef);                                                  \
  template NodeRef fully_connected(Graph<T>&, NodeRef, NodeRef, NodeRef);                                    \
  template NodeRef fully_connected(Graph<T>&, NodeRef, DenseParams<T>&);                                     \
  template NodeRef batch_norm(Graph<T>&, NodeRef, NodeRef, NodeRef, BatchNormParams<T>&, Mode);              \
  template NodeRef batch_norm(Graph<T>&, NodeRef, BatchNormParams<T>&, Mode);                                \
  template NodeRef softmax_cross_entropy(Graph<T>&, NodeRef, std::vector<int>);                              \
  template NodeRef sigmoid_bce_multilabel(Graph<T>&, NodeRef, Tensor<T>);

WCNN_INSTANTIATE(float)
WCNN_INSTANTIATE(double)

#undef WCNN_INSTANTIATE

}  // namespace wcnn
