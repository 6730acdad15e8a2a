#include "wcnn/gradcheck.hpp"

#include <functional>
#include <random>

#include "wcnn/layers.hpp"
#include "wcnn/wavelet.hpp"

namespace wcnn {

namespace {

Tensor<double> randn(const Shape& shape, std::mt19937_64& rng, double sd = 1.0, double mean = 0.0) {
  std::normal_distribution<double> d(mean, sd);
  Tensor<double> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
  return t;
}

using OpFn = std::function<NodeRef(Graph<double>&, const std::vector<NodeRef>&)>;

// Reduces the op output against fixed random weights and checks each input in turn.
void check_op(std::vector<GradCheckCase>& out, const std::string& name, std::vector<Variable<double>> inputs,
              const OpFn& op, std::mt19937_64& rng, double eps) {
  Tensor<double> weights;
  {
    Graph<double> g;
    std::vector<NodeRef> refs;
    for (auto& v : inputs) refs.push_back(g.constant(v.value));
    weights = randn(g.value(op(g, refs)).shape(), rng);
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto build = [&](Graph<double>& g) {
      std::vector<NodeRef> refs;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        refs.push_back(i == k ? g.parameter(inputs[i]) : g.constant(inputs[i].value));
      }
      return weighted_sum(g, op(g, refs), weights);
    };
    out.push_back({name + " / " + inputs[k].name, finite_difference_check(build, inputs[k], eps)});
  }
}

Variable<double> var(const std::string& name, Tensor<double> value) { return {name, std::move(value), {}, true}; }

}  // namespace

std::vector<GradCheckCase> layer_gradchecks(std::uint64_t seed, double eps) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckCase> out;

  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 2, 0}}) {
    const std::size_t ks = static_cast<std::size_t>(k);
    check_op(out, "conv2d k" + std::to_string(k) + " s" + std::to_string(stride),
             {var("x", randn({2, 3, 6, 6}, rng)), var("weight", randn({4, 3, ks, ks}, rng, 0.5)),
              var("bias", randn({4}, rng))},
             [stride, pad](Graph<double>& g, const std::vector<NodeRef>& r) {
               return conv2d(g, r[0], r[1], r[2], stride, pad);
             },
             rng, eps);
  }
  check_op(out, "average_pool", {var("x", randn({2, 2, 4, 4}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return average_pool(g, r[0], 2); }, rng, eps);
  check_op(out, "relu", {var("x", randn({2, 3, 4, 4}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return relu(g, r[0]); }, rng, eps);

  auto bn_state = BatchNormParams<double>::make("bn", 3);
  for (std::size_t c = 0; c < 3; ++c) {
    bn_state.running_mean[c] = 0.3 * static_cast<double>(c) - 0.2;
    bn_state.running_var[c] = 0.5 + 0.4 * static_cast<double>(c);
  }
  for (Mode mode : {Mode::train, Mode::eval}) {
    check_op(out, std::string("batch_norm ") + (mode == Mode::train ? "train" : "eval"),
             {var("x", randn({3, 3, 3, 3}, rng, 2.0, 0.5)), var("gamma", randn({3}, rng, 0.5, 1.0)),
              var("beta", randn({3}, rng))},
             [&bn_state, mode](Graph<double>& g, const std::vector<NodeRef>& r) {
               // Running statistics must not drift between probes.
               BatchNormParams<double> s = bn_state;
               return batch_norm(g, r[0], r[1], r[2], s, mode);
             },
             rng, eps);
  }
  check_op(out, "global_average_pool", {var("x", randn({2, 3, 4, 4}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return global_average_pool(g, r[0]); }, rng, eps);
  check_op(out, "fully_connected",
           {var("x", randn({3, 5}, rng)), var("weight", randn({4, 5}, rng)), var("bias", randn({4}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return fully_connected(g, r[0], r[1], r[2]); }, rng,
           eps);
  check_op(out, "softmax_cross_entropy", {var("logits", randn({4, 5}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) {
             return softmax_cross_entropy(g, r[0], std::vector<int>{0, 3, 4, 1});
           },
           rng, eps);
  {
    Tensor<double> targets = Tensor<double>::zeros({3, 4});
    targets[1] = targets[4] = targets[6] = targets[11] = 1.0;
    check_op(out, "sigmoid_bce_multilabel", {var("logits", randn({3, 4}, rng))},
             [targets](Graph<double>& g, const std::vector<NodeRef>& r) { return sigmoid_bce_multilabel(g, r[0], targets); },
             rng, eps);
  }
  check_op(out, "wavelet_level", {var("x", randn({2, 2, 8, 8}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return wavelet_level(g, r[0]); }, rng, eps);
  check_op(out, "concat_channels", {var("a", randn({2, 2, 3, 3}, rng)), var("b", randn({2, 3, 3, 3}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return concat_channels(g, std::span<const NodeRef>(r)); },
           rng, eps);
  check_op(out, "slice_channels", {var("x", randn({2, 5, 3, 3}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return slice_channels(g, r[0], 1, 3); }, rng, eps);
  check_op(out, "add", {var("a", randn({2, 3}, rng)), var("b", randn({2, 3}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return add(g, r[0], r[1]); }, rng, eps);
  check_op(out, "sub", {var("a", randn({2, 3}, rng)), var("b", randn({2, 3}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return sub(g, r[0], r[1]); }, rng, eps);
  check_op(out, "mul", {var("a", randn({2, 3}, rng)), var("b", randn({2, 3}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return mul(g, r[0], r[1]); }, rng, eps);
  check_op(out, "scale", {var("x", randn({2, 3}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return scale(g, r[0], -1.7); }, rng, eps);
  check_op(out, "sum", {var("x", randn({2, 3}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return sum(g, r[0]); }, rng, eps);
  check_op(out, "reshape", {var("x", randn({2, 3, 2, 2}, rng))},
           [](Graph<double>& g, const std::vector<NodeRef>& r) { return reshape(g, r[0], Shape{6, 4}); }, rng, eps);
  return out;
}

std::vector<GradCheckCase> model_gradchecks(const WaveletCnnConfig& cfg, std::uint64_t seed, double eps,
                                            std::size_t batch, std::size_t coord_stride) {
  std::mt19937_64 rng(seed);
  Model<double> model = Model<double>::build(cfg, seed);
  const Shape in{batch, cfg.input_channels, cfg.input_size, cfg.input_size};
  const Tensor<double> x = randn(in, rng);
  std::vector<int> labels(batch);
  for (auto& l : labels) l = static_cast<int>(rng() % cfg.num_classes);
  Tensor<double> multi = Tensor<double>::zeros({batch, cfg.num_classes});
  for (std::size_t n = 0; n < batch; ++n) multi[n * cfg.num_classes + static_cast<std::size_t>(labels[n])] = 1.0;

  auto loss_of = [&](Graph<double>& g, NodeRef logits) {
    return cfg.head == HeadMode::softmax ? softmax_cross_entropy(g, logits, labels)
                                         : sigmoid_bce_multilabel(g, logits, multi);
  };

  // Populate running statistics so eval mode is a nontrivial affine map.
  for (int i = 0; i < 3; ++i) {
    Graph<double> g;
    model.forward(g, g.constant(randn(in, rng)), Mode::train);
  }

  std::vector<GradCheckCase> out;
  for (Variable<double>* p : model.parameters()) {
    auto build = [&](Graph<double>& g) { return loss_of(g, model.forward(g, g.constant(x), Mode::eval)); };
    out.push_back({"model eval / " + p->name, finite_difference_check(build, *p, eps, coord_stride)});
  }
  // Batch statistics make the train-mode loss independent of the running statistics the probes update.
  Variable<double> xv{"input", x, {}, true};
  auto build = [&](Graph<double>& g) { return loss_of(g, model.forward(g, g.parameter(xv), Mode::train)); };
  out.push_back({"model train / input", finite_difference_check(build, xv, eps, coord_stride)});
  return out;
}

}  // namespace wcnn
