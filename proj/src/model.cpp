#include "wcnn/model.hpp"

#include <random>
#include <stdexcept>

namespace wcnn {

std::string to_string(HeadMode mode) { return mode == HeadMode::softmax ? "softmax" : "multilabel"; }

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "softmax") return HeadMode::softmax;
  if (s == "multilabel") return HeadMode::multilabel;
  throw std::invalid_argument("unknown head mode '" + s + "' (softmax|multilabel)");
}

std::size_t WaveletCnnConfig::projection_width(std::size_t stage) const {
  return std::max<std::size_t>(1, channels.at(stage) / projection_divisor);
}

void WaveletCnnConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (channels.empty()) fail("channel schedule is empty");
  for (std::size_t c : channels)
    if (c == 0) fail("channel counts must be positive");
  if (input_channels != 1 && input_channels != 3) fail("input_channels must be 1 or 3");
  if (num_classes == 0) fail("num_classes must be positive");
  if (projection_divisor == 0) fail("projection_divisor must be positive");
  if (levels < 2 || levels > kMaxLevels) {
    fail("levels must be in 2.." + std::to_string(kMaxLevels) + ", got " + std::to_string(levels));
  }
  if (inject_subbands && levels > stages()) {
    fail("levels (" + std::to_string(levels) + ") exceed the " + std::to_string(stages()) +
         " backbone stages; each level needs a stage of matching extent");
  }
  if (stages() > 20) fail("too many stages");
  const std::size_t m = std::size_t{1} << stages();
  if (input_size == 0 || input_size % m != 0) {
    fail("input_size " + std::to_string(input_size) + " is not divisible by 2^" + std::to_string(stages()) + "=" +
         std::to_string(m));
  }
  filter_by_name(wavelet);
}

Config WaveletCnnConfig::to_config() const {
  Config c;
  c.set("model.levels", std::to_string(levels));
  c.set("model.input_size", std::to_string(input_size));
  c.set("model.input_channels", std::to_string(input_channels));
  c.set("model.channels", join_sizes(channels));
  c.set("model.num_classes", std::to_string(num_classes));
  c.set("model.head", to_string(head));
  c.set("model.embedding", std::to_string(embedding));
  c.set("model.projection_divisor", std::to_string(projection_divisor));
  c.set("model.inject_subbands", inject_subbands ? "true" : "false");
  c.set("model.wavelet", wavelet);
  return c;
}

WaveletCnnConfig WaveletCnnConfig::from_config(const Config& c) {
  WaveletCnnConfig m;
  auto size = [&c](const char* key, std::size_t fallback) {
    const long long v = c.get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(std::string("key '") + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  };
  m.levels = size("model.levels", m.levels);
  m.input_size = size("model.input_size", m.input_size);
  m.input_channels = size("model.input_channels", m.input_channels);
  m.channels = c.get_size_list("model.channels", m.channels);
  m.num_classes = size("model.num_classes", m.num_classes);
  m.head = head_mode_from_string(c.get_string("model.head", to_string(m.head)));
  m.embedding = size("model.embedding", m.embedding);
  m.projection_divisor = size("model.projection_divisor", m.projection_divisor);
  m.inject_subbands = c.get_bool("model.inject_subbands", m.inject_subbands);
  m.wavelet = c.get_string("model.wavelet", m.wavelet);
  return m;
}

namespace {

template <class T>
ConvBlock<T> make_block(const std::string& name, std::size_t in, std::size_t out, std::size_t k, int stride,
                        std::mt19937_64* rng) {
  const int pad = k == 3 ? 1 : 0;
  return {name, Conv2dParams<T>::make(name + ".conv", in, out, k, stride, pad, rng),
          BatchNormParams<T>::make(name + ".bn", out)};
}

template <class T>
NodeRef run_block(Graph<T>& g, NodeRef x, ConvBlock<T>& b, Mode mode) {
  return relu(g, batch_norm(g, conv2d(g, x, b.conv), b.bn, mode));
}

template <class T>
void count_block(std::vector<LayerCount>& out, const ConvBlock<T>& b) {
  const auto& w = b.conv.weight.value;
  const std::string kind = "conv" + std::to_string(w.dim(2)) + "x" + std::to_string(w.dim(3)) + "/s" +
                           std::to_string(b.conv.stride);
  out.push_back({b.name + ".conv", kind, shape_str(w.shape()), w.numel() + b.conv.bias.value.numel()});
  out.push_back({b.name + ".bn", "batchnorm", shape_str(b.bn.gamma.value.shape()),
                 b.bn.gamma.value.numel() + b.bn.beta.value.numel()});
}

template <class T>
void block_params(std::vector<Variable<T>*>& out, ConvBlock<T>& b) {
  out.push_back(&b.conv.weight);
  out.push_back(&b.conv.bias);
  out.push_back(&b.bn.gamma);
  out.push_back(&b.bn.beta);
}

}  // namespace

template <class T>
Model<T> Model<T>::build(const WaveletCnnConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return construct(cfg, &rng);
}

template <class T>
Model<T> Model<T>::layout(const WaveletCnnConfig& cfg) {
  return construct(cfg, nullptr);
}

template <class T>
Model<T> Model<T>::construct(const WaveletCnnConfig& cfg, std::mt19937_64* rng) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  m.filter_ = filter_by_name(cfg.wavelet);

  const std::size_t subband_channels = 4 * cfg.input_channels;
  std::size_t prev_channels = cfg.input_channels;
  std::size_t carry_channels = 0;  // width of the dense carry entering this stage
  for (std::size_t s = 0; s < cfg.stages(); ++s) {
    const std::string name = "stage" + std::to_string(s + 1);
    const std::size_t width = cfg.channels[s];
    const std::size_t proj = cfg.projection_width(s);
    Stage st;
    st.extent = cfg.input_size >> (s + 1);
    st.down = make_block<T>(name + ".down", prev_channels, width, 3, 2, rng);
    std::size_t injected = 0;
    if (cfg.inject_subbands && s < cfg.levels) {
      st.inject = make_block<T>(name + ".inject", subband_channels, proj, 1, 1, rng);
      injected += proj;
      m.injections_.push_back({s + 1, s + 1, st.extent, subband_channels});
    }
    if (carry_channels > 0) {
      st.shortcut = make_block<T>(name + ".shortcut", carry_channels, proj, 1, 2, rng);
      injected += proj;
    }
    st.body1 = make_block<T>(name + ".body1", width + injected, width, 3, 1, rng);
    st.body2 = make_block<T>(name + ".body2", width, width, 3, 1, rng);
    // Every concat operand must share the stage extent.
    const std::size_t down_extent = conv_out_extent(s == 0 ? cfg.input_size : m.stages_.back().extent, 3, 2, 1);
    if (down_extent != st.extent) throw std::logic_error(name + ": strided conv extent mismatch");
    if (st.inject && (cfg.input_size >> (s + 1)) != st.extent) throw std::logic_error(name + ": subband extent mismatch");
    if (st.shortcut && conv_out_extent(m.stages_.back().extent, 1, 2, 0) != st.extent) {
      throw std::logic_error(name + ": shortcut extent mismatch");
    }
    carry_channels = injected;
    prev_channels = width;
    m.stages_.push_back(std::move(st));
  }
  std::size_t features = prev_channels;
  if (cfg.embedding > 0) {
    m.embed_ = DenseParams<T>::make("embed", features, cfg.embedding, rng);
    features = cfg.embedding;
  }
  m.fc_ = DenseParams<T>::make("fc", features, cfg.num_classes, rng);
  return m;
}

template <class T>
NodeRef Model<T>::forward(Graph<T>& g, NodeRef batch, Mode mode) {
  const Shape& s = g.value(batch).shape();
  const Shape want{s.empty() ? 0 : s[0], cfg_.input_channels, cfg_.input_size, cfg_.input_size};
  if (s.size() != 4 || s != want || s[0] == 0) {
    throw ShapeError("model expects input [N," + std::to_string(cfg_.input_channels) + "," +
                     std::to_string(cfg_.input_size) + "," + std::to_string(cfg_.input_size) + "], got " +
                     shape_str(s));
  }

  std::vector<NodeRef> levels;  // [LL|LH|HL|HH] per level
  if (cfg_.inject_subbands) {
    NodeRef low = batch;
    for (std::size_t t = 0; t < cfg_.levels; ++t) {
      levels.push_back(wavelet_level(g, low, filter_));
      low = slice_channels(g, levels.back(), 0, cfg_.input_channels);
    }
  }

  NodeRef prev = batch;
  std::optional<NodeRef> carry;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    Stage& st = stages_[i];
    std::vector<NodeRef> side;
    if (st.inject) side.push_back(run_block(g, levels[i], *st.inject, mode));
    if (st.shortcut) side.push_back(run_block(g, *carry, *st.shortcut, mode));
    NodeRef in = run_block(g, prev, st.down, mode);
    if (!side.empty()) {
      carry = side.size() == 1 ? side[0] : concat_channels(g, std::span<const NodeRef>(side));
      const NodeRef parts[2] = {in, *carry};
      in = concat_channels(g, std::span<const NodeRef>(parts));
    } else {
      carry.reset();
    }
    prev = run_block(g, run_block(g, in, st.body1, mode), st.body2, mode);
  }
  NodeRef h = global_average_pool(g, prev);
  if (embed_) h = relu(g, fully_connected(g, h, *embed_));
  return fully_connected(g, h, fc_);
}

template <class T>
Tensor<T> Model<T>::predict(const Tensor<T>& batch) {
  Graph<T> g;
  return g.value(forward(g, g.constant(batch), Mode::eval));
}

template <class T>
std::vector<Variable<T>*> Model<T>::parameters() {
  std::vector<Variable<T>*> out;
  for (Stage& st : stages_) {
    block_params(out, st.down);
    if (st.inject) block_params(out, *st.inject);
    if (st.shortcut) block_params(out, *st.shortcut);
    block_params(out, st.body1);
    block_params(out, st.body2);
  }
  if (embed_) {
    out.push_back(&embed_->weight);
    out.push_back(&embed_->bias);
  }
  out.push_back(&fc_.weight);
  out.push_back(&fc_.bias);
  return out;
}

template <class T>
std::vector<StateEntry<T>> Model<T>::state() {
  std::vector<StateEntry<T>> out;
  for (Variable<T>* v : parameters()) out.push_back({v->name, &v->value, true});
  auto stats = [&out](ConvBlock<T>& b) {
    out.push_back({b.name + ".bn.running_mean", &b.bn.running_mean, false});
    out.push_back({b.name + ".bn.running_var", &b.bn.running_var, false});
  };
  for (Stage& st : stages_) {
    stats(st.down);
    if (st.inject) stats(*st.inject);
    if (st.shortcut) stats(*st.shortcut);
    stats(st.body1);
    stats(st.body2);
  }
  return out;
}

template <class T>
std::vector<LayerCount> Model<T>::breakdown() const {
  std::vector<LayerCount> out;
  if (cfg_.inject_subbands) {
    for (std::size_t t = 1; t <= cfg_.levels; ++t) {
      const std::size_t e = cfg_.input_size >> t;
      out.push_back({"wavelet.level" + std::to_string(t), filter_.name + "(fixed)",
                     shape_str({4 * cfg_.input_channels, e, e}), 0});
    }
  }
  for (const Stage& st : stages_) {
    count_block(out, st.down);
    if (st.inject) count_block(out, *st.inject);
    if (st.shortcut) count_block(out, *st.shortcut);
    count_block(out, st.body1);
    count_block(out, st.body2);
  }
  auto dense = [&out](const DenseParams<T>& d, const std::string& name) {
    out.push_back({name, "fc", shape_str(d.weight.value.shape()), d.weight.value.numel() + d.bias.value.numel()});
  };
  if (embed_) dense(*embed_, "embed");
  dense(fc_, "fc");
  return out;
}

template <class T>
std::size_t Model<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& l : breakdown()) n += l.params;
  return n;
}

template <class T>
Model<T> ablate_to_plain_cnn(const WaveletCnnConfig& cfg, std::uint64_t seed) {
  WaveletCnnConfig plain = cfg;
  plain.inject_subbands = false;
  return Model<T>::build(plain, seed);
}

template class Model<float>;
template class Model<double>;
template Model<float> ablate_to_plain_cnn(const WaveletCnnConfig&, std::uint64_t);
template Model<double> ablate_to_plain_cnn(const WaveletCnnConfig&, std::uint64_t);

}  // namespace wcnn
