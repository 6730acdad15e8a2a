#include "wcnn/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

namespace wcnn {

template <class T>
void adam_step(std::span<Variable<T>* const> params, AdamState<T>& state, const AdamConfig& cfg, double lr) {
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: parameter list changed size");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (state.m[i].shape() != p.value.shape()) throw ShapeError("adam_step: moment shape mismatch for " + p.name);
    if (!p.grad.empty() && p.grad.shape() != p.value.shape()) throw ShapeError("adam_step: grad shape mismatch for " + p.name);
    if (!p.grad.empty() && !p.grad.all_finite()) throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.requires_grad) continue;
    T* w = p.value.raw();
    T* m = state.m[i].raw();
    T* v = state.v[i].raw();
    const T* g = p.grad.empty() ? nullptr : p.grad.raw();
    for (std::size_t j = 0; j < p.value.numel(); ++j) {
      const T gj = g ? g[j] : T(0);
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      const double mhat = static_cast<double>(m[j]) / bc1;
      const double vhat = static_cast<double>(v[j]) / bc2;
      w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * mhat / (std::sqrt(vhat) + cfg.epsilon));
    }
  }
}

Tensor<double> global_contrast_normalization(const Tensor<double>& image) {
  if (image.numel() == 0) throw std::invalid_argument("global_contrast_normalization: empty image");
  const double n = static_cast<double>(image.numel());
  double mean = 0;
  for (double v : image.data()) mean += v;
  mean /= n;
  double ss = 0;
  for (double v : image.data()) ss += (v - mean) * (v - mean);
  const double sd = std::max(std::sqrt(ss / n), 1e-8);
  Tensor<double> out(image.shape());
  double* o = out.raw();
  const double* x = image.raw();
  for (std::size_t i = 0; i < image.numel(); ++i) o[i] = (x[i] - mean) / sd;
  return out;
}

Tensor<double> resize_bilinear(const Tensor<double>& image, std::size_t out_h, std::size_t out_w) {
  if (image.ndim() != 3) throw ShapeError("resize_bilinear: expected [C, H, W], got " + shape_str(image.shape()));
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize_bilinear: empty target");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (H == out_h && W == out_w) return image;

  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = std::clamp((static_cast<double>(o) + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(H, out_h), tx = taps(W, out_w);
  Tensor<double> out = Tensor<double>::zeros({C, out_h, out_w});
  const double* x = image.raw();
  double* o = out.raw();
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = x + c * H * W;
    for (std::size_t y = 0; y < out_h; ++y) {
      const double* r0 = plane + ty[y].i0 * W;
      const double* r1 = plane + ty[y].i1 * W;
      const double wy = ty[y].w1;
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const Tap& t = tx[xx];
        const double top = r0[t.i0] * (1 - t.w1) + r0[t.i1] * t.w1;
        const double bot = r1[t.i0] * (1 - t.w1) + r1[t.i1] * t.w1;
        o[(c * out_h + y) * out_w + xx] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

Tensor<double> crop(const Tensor<double>& image, std::size_t top, std::size_t left, std::size_t size) {
  if (image.ndim() != 3) throw ShapeError("crop: expected [C, H, W], got " + shape_str(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (top + size > H || left + size > W) {
    throw std::invalid_argument("crop: window " + std::to_string(size) + " at (" + std::to_string(top) + "," +
                                std::to_string(left) + ") exceeds " + shape_str(image.shape()));
  }
  Tensor<double> out = Tensor<double>::zeros({C, size, size});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < size; ++y)
      std::copy_n(image.raw() + (c * H + top + y) * W + left, size, out.raw() + (c * size + y) * size);
  return out;
}

Tensor<double> hflip(const Tensor<double>& image) {
  if (image.ndim() != 3) throw ShapeError("hflip: expected [C, H, W], got " + shape_str(image.shape()));
  Tensor<double> out = image;
  const std::size_t W = image.dim(2);
  for (std::size_t r = 0; r < image.dim(0) * image.dim(1); ++r) std::reverse(out.raw() + r * W, out.raw() + (r + 1) * W);
  return out;
}

namespace {

void check_view(const Tensor<double>& image, const AugmentConfig& cfg) {
  if (image.ndim() != 3 || image.dim(1) < 2 || image.dim(2) < 2) {
    throw ShapeError("augment: expected an image of at least 2x2, got " + shape_str(image.shape()));
  }
  if (cfg.crop == 0 || cfg.crop > cfg.resize) {
    throw std::invalid_argument("augment: crop " + std::to_string(cfg.crop) + " larger than resize target " +
                                std::to_string(cfg.resize));
  }
}

}  // namespace

Tensor<double> augment(const Tensor<double>& image, const AugmentConfig& cfg, std::mt19937_64& rng) {
  check_view(image, cfg);
  const Tensor<double> scaled = resize_bilinear(image, cfg.resize, cfg.resize);
  std::uniform_int_distribution<std::size_t> offset(0, cfg.resize - cfg.crop);
  const std::size_t top = offset(rng);
  const std::size_t left = offset(rng);
  Tensor<double> out = crop(scaled, top, left, cfg.crop);
  if (cfg.flip && std::uniform_int_distribution<int>(0, 1)(rng) == 1) out = hflip(out);
  return out;
}

Tensor<double> eval_view(const Tensor<double>& image, const AugmentConfig& cfg) {
  check_view(image, cfg);
  const std::size_t off = (cfg.resize - cfg.crop) / 2;
  return crop(resize_bilinear(image, cfg.resize, cfg.resize), off, off, cfg.crop);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0xD1B54A32D192ED03ULL));
}

void TrainConfig::validate() const {
  model.validate();
  if (epochs == 0) throw std::invalid_argument("train.epochs must be positive");
  if (batch_size < 2) throw std::invalid_argument("train.batch_size must be at least 2 (batch norm needs batch statistics)");
  if (!(adam.lr > 0)) throw std::invalid_argument("train.lr must be positive");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1)) {
    throw std::invalid_argument("train.beta1/beta2 must lie in [0, 1)");
  }
  if (!(adam.epsilon > 0)) throw std::invalid_argument("train.adam_eps must be positive");
  if (!(lr_gamma > 0)) throw std::invalid_argument("train.lr_gamma must be positive");
  if (dtype != "f32" && dtype != "f64") throw std::invalid_argument("train.dtype must be f32 or f64");
  if (augment.crop != model.input_size) {
    throw std::invalid_argument("train.crop (" + std::to_string(augment.crop) + ") must equal model.input_size (" +
                                std::to_string(model.input_size) + ")");
  }
  if (augment.resize < augment.crop) throw std::invalid_argument("train.resize must be at least train.crop");
  if (eval_every == 0) throw std::invalid_argument("train.eval_every must be positive");
}

Config TrainConfig::to_config() const {
  Config c = model.to_config();
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  c.set("seed", std::to_string(seed));
  c.set("train.epochs", std::to_string(epochs));
  c.set("train.batch_size", std::to_string(batch_size));
  c.set("train.lr", num(adam.lr));
  c.set("train.beta1", num(adam.beta1));
  c.set("train.beta2", num(adam.beta2));
  c.set("train.adam_eps", num(adam.epsilon));
  c.set("train.lr_step", std::to_string(lr_step));
  c.set("train.lr_gamma", num(lr_gamma));
  c.set("train.dtype", dtype);
  c.set("train.augment", augment.enabled ? "true" : "false");
  c.set("train.resize", std::to_string(augment.resize));
  c.set("train.crop", std::to_string(augment.crop));
  c.set("train.flip", augment.flip ? "true" : "false");
  c.set("train.gcn", gcn ? "true" : "false");
  c.set("train.eval_every", std::to_string(eval_every));
  return c;
}

TrainConfig TrainConfig::from_config(const Config& c) {
  TrainConfig t;
  t.model = WaveletCnnConfig::from_config(c);
  auto count = [&](const std::string& key, std::size_t fallback) {
    const long long v = c.get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(key + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  const long long seed = c.get_int("seed", 1);
  if (seed < 0) throw ConfigError("seed must be non-negative");
  t.seed = static_cast<std::uint64_t>(seed);
  t.epochs = count("train.epochs", t.epochs);
  t.batch_size = count("train.batch_size", t.batch_size);
  t.adam.lr = c.get_double("train.lr", t.adam.lr);
  t.adam.beta1 = c.get_double("train.beta1", t.adam.beta1);
  t.adam.beta2 = c.get_double("train.beta2", t.adam.beta2);
  t.adam.epsilon = c.get_double("train.adam_eps", t.adam.epsilon);
  t.lr_step = count("train.lr_step", t.lr_step);
  t.lr_gamma = c.get_double("train.lr_gamma", t.lr_gamma);
  t.dtype = c.get_string("train.dtype", t.dtype);
  t.augment.enabled = c.get_bool("train.augment", t.augment.enabled);
  t.augment.crop = count("train.crop", t.model.input_size);
  t.augment.resize = count("train.resize", t.augment.crop + t.augment.crop / 8);
  t.augment.flip = c.get_bool("train.flip", t.augment.flip);
  t.gcn = c.get_bool("train.gcn", t.gcn);
  t.eval_every = count("train.eval_every", t.eval_every);
  return t;
}

Dataset load_dataset(const DatasetManifest& manifest, std::size_t channels, bool gcn) {
  if (manifest.records.empty()) throw DataError("dataset is empty");
  if (channels != 1 && channels != 3) throw std::invalid_argument("load_dataset: channels must be 1 or 3");
  Dataset d;
  d.class_names = manifest.class_names;
  d.samples.reserve(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    Tensor<double> img = load_pnm(manifest.resolve(i));
    const std::size_t H = img.dim(1), W = img.dim(2);
    if (img.dim(0) != channels) {
      Tensor<double> conv = Tensor<double>::zeros({channels, H, W});
      if (channels == 3) {
        for (std::size_t c = 0; c < 3; ++c) std::copy_n(img.raw(), H * W, conv.raw() + c * H * W);
      } else {
        for (std::size_t p = 0; p < H * W; ++p)
          conv.raw()[p] = (img.raw()[p] + img.raw()[H * W + p] + img.raw()[2 * H * W + p]) / 3.0;
      }
      img = std::move(conv);
    }
    d.samples.push_back({gcn ? global_contrast_normalization(img) : std::move(img), manifest.records[i].label_ids});
  }
  return d;
}

namespace {

template <class T>
void fill_batch(Tensor<T>& batch, std::size_t slot, const Tensor<double>& image) {
  const std::size_t n = image.numel();
  if (batch.numel() / batch.dim(0) != n) {
    throw ShapeError("image view " + shape_str(image.shape()) + " does not match model input " + shape_str(batch.shape()));
  }
  std::transform(image.raw(), image.raw() + n, batch.raw() + slot * n, [](double v) { return static_cast<T>(v); });
}

template <class T>
Tensor<T> multilabel_targets(const Dataset& data, std::span<const std::size_t> idx, std::size_t classes) {
  Tensor<T> t = Tensor<T>::zeros({idx.size(), classes});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int c : data.samples[idx[i]].labels) t.raw()[i * classes + static_cast<std::size_t>(c)] = T(1);
  return t;
}

template <class T>
int argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t C = logits.dim(1);
  const T* z = logits.raw() + row * C;
  return static_cast<int>(std::max_element(z, z + C) - z);
}

bool hits(const std::vector<int>& labels, int pred) {
  return std::find(labels.begin(), labels.end(), pred) != labels.end();
}

void check_labels(const Dataset& data, std::size_t classes, HeadMode head) {
  for (const auto& s : data.samples) {
    if (head == HeadMode::softmax && s.labels.size() != 1) {
      throw std::invalid_argument("softmax head needs exactly one label per image");
    }
    for (int c : s.labels)
      if (c < 0 || static_cast<std::size_t>(c) >= classes) {
        throw std::invalid_argument("label " + std::to_string(c) + " outside the model's " + std::to_string(classes) +
                                    " classes");
      }
  }
}

}  // namespace

template <class T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                    const AugmentConfig& view, std::size_t batch_size) {
  const auto& mc = model.config();
  if (indices.empty()) throw std::invalid_argument("evaluate: no samples");
  check_labels(data, mc.num_classes, mc.head);
  EvalResult r;
  MultiLabelOutcome outcome;
  outcome.num_classes = mc.num_classes;
  double loss_sum = 0;
  std::size_t correct = 0;
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto idx = indices.subspan(start, std::min(batch_size, indices.size() - start));
    Tensor<T> batch = Tensor<T>::zeros({idx.size(), mc.input_channels, mc.input_size, mc.input_size});
    for (std::size_t i = 0; i < idx.size(); ++i) fill_batch(batch, i, eval_view(data.samples[idx[i]].image, view));
    const Tensor<T> logits = model.predict(batch);
    if (mc.head == HeadMode::softmax) {
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(data.samples[i].labels[0]);
      loss_sum += static_cast<double>(softmax_cross_entropy(logits, std::span<const int>(labels))) * static_cast<double>(idx.size());
    } else {
      loss_sum += static_cast<double>(sigmoid_bce_multilabel(logits, multilabel_targets<T>(data, idx, mc.num_classes))) *
                  static_cast<double>(idx.size());
    }
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const int top = argmax_row(logits, i);
      r.top1.push_back(top);
      correct += hits(data.samples[idx[i]].labels, top);
      if (mc.head == HeadMode::multilabel) {
        std::vector<int> predicted;
        for (std::size_t c = 0; c < mc.num_classes; ++c)
          if (logits.raw()[i * mc.num_classes + c] > T(0)) predicted.push_back(static_cast<int>(c));
        outcome.predicted.push_back(std::move(predicted));
        outcome.truth.push_back(data.samples[idx[i]].labels);
      }
    }
  }
  const double n = static_cast<double>(indices.size());
  r.loss = loss_sum / n;
  r.accuracy = 100.0 * static_cast<double>(correct) / n;
  if (mc.head == HeadMode::multilabel) r.multilabel = multilabel_bundle(outcome);
  return r;
}

template <class T>
TrainResult<T> train(Model<T> model, const Dataset& data, const SplitIndices& split, const TrainConfig& cfg,
                     std::ostream* log) {
  cfg.validate();
  const auto& mc = model.config();
  if (split.train.size() < 2) throw std::invalid_argument("train: need at least two training images");
  if (split.test.empty()) throw std::invalid_argument("train: empty test side");
  for (std::size_t i : split.train)
    if (i >= data.samples.size()) throw std::out_of_range("train: split index out of range");
  check_labels(data, mc.num_classes, mc.head);

  auto params = model.parameters();
  AdamState<T> adam;
  TrainResult<T> result{model, model, {}, 0, -1.0, 0.0, {}};
  const AugmentConfig& view = cfg.augment;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr_step ? cfg.adam.lr * std::pow(cfg.lr_gamma, static_cast<double>((epoch - 1) / cfg.lr_step))
                                  : cfg.adam.lr;
    std::vector<std::size_t> order = split.train;
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, epoch, 0));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    // A trailing batch of one has no batch statistics; fold it into the previous batch.
    std::size_t batches = std::max<std::size_t>(order.size() / cfg.batch_size, 1);
    if (order.size() % cfg.batch_size >= 2) ++batches;

    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t end = b + 1 == batches ? order.size() : begin + cfg.batch_size;
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);

      Tensor<T> batch = Tensor<T>::zeros({idx.size(), mc.input_channels, mc.input_size, mc.input_size});
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const Tensor<double>& img = data.samples[idx[i]].image;
        if (view.enabled) {
          std::mt19937_64 rng(derive_seed(cfg.seed, epoch, idx[i] + 1));
          fill_batch(batch, i, augment(img, view, rng));
        } else {
          fill_batch(batch, i, eval_view(img, view));
        }
      }

      for (auto* p : params) p->zero_grad();
      Graph<T> g;
      const NodeRef logits = model.forward(g, g.input(std::move(batch), false), Mode::train);
      NodeRef loss;
      if (mc.head == HeadMode::softmax) {
        std::vector<int> labels;
        for (std::size_t i : idx) labels.push_back(data.samples[i].labels[0]);
        loss = softmax_cross_entropy(g, logits, std::move(labels));
      } else {
        loss = sigmoid_bce_multilabel(g, logits, multilabel_targets<T>(data, idx, mc.num_classes));
      }
      const double loss_value = static_cast<double>(g.value(loss).item());
      if (!std::isfinite(loss_value)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1));
      }
      for (std::size_t i = 0; i < idx.size(); ++i) correct += hits(data.samples[idx[i]].labels, argmax_row(g.value(logits), i));
      loss_sum += loss_value * static_cast<double>(idx.size());
      g.backward(loss);
      adam_step<T>(params, adam, cfg.adam, lr);
    }

    EpochRecord tr{epoch, "train", loss_sum / static_cast<double>(order.size()),
                   100.0 * static_cast<double>(correct) / static_cast<double>(order.size())};
    result.history.push_back(tr);
    if (log) *log << report_row(tr) << '\n' << std::flush;

    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      EvalResult ev = evaluate(model, data, split.test, view);
      EpochRecord te{epoch, "test", ev.loss, ev.accuracy};
      result.history.push_back(te);
      if (log) *log << report_row(te) << '\n' << std::flush;
      if (ev.accuracy > result.best_test_accuracy) {
        result.best_test_accuracy = ev.accuracy;
        result.best_epoch = epoch;
        result.best = model;
      }
      if (epoch == cfg.epochs) {
        result.final_test_accuracy = ev.accuracy;
        result.final_eval = std::move(ev);
      }
    }
  }
  result.last = std::move(model);
  return result;
}

std::string report_header() { return "epoch\tsplit\tloss\tacc"; }

std::string report_row(const EpochRecord& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu\t%s\t%.6f\t%.2f", r.epoch, r.split.c_str(), r.loss, r.accuracy);
  return buf;
}

#define WCNN_INSTANTIATE(T)                                                                                   \
  template void adam_step<T>(std::span<Variable<T>* const>, AdamState<T>&, const AdamConfig&, double);      \
  template EvalResult evaluate<T>(Model<T>&, const Dataset&, std::span<const std::size_t>, const AugmentConfig&, \
                                  std::size_t);                                                             \
  template TrainResult<T> train<T>(Model<T>, const Dataset&, const SplitIndices&, const TrainConfig&, std::ostream*);

WCNN_INSTANTIATE(float)
WCNN_INSTANTIATE(double)

}  // namespace wcnn
