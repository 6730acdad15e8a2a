#include "wcnn/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace wcnn {

template <class T>
const typename Graph<T>::Node& Graph<T>::node(NodeRef ref) const {
  if (ref.index >= nodes_.size()) throw AutodiffError("dangling node reference " + std::to_string(ref.index));
  return nodes_[ref.index];
}

template <class T>
typename Graph<T>::Node& Graph<T>::node(NodeRef ref) {
  if (ref.index >= nodes_.size()) throw AutodiffError("dangling node reference " + std::to_string(ref.index));
  return nodes_[ref.index];
}

template <class T>
NodeRef Graph<T>::constant(Tensor<T> value) {
  return input(std::move(value), false);
}

template <class T>
NodeRef Graph<T>::input(Tensor<T> value, bool requires_grad) {
  Node n;
  n.op = "input";
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

template <class T>
NodeRef Graph<T>::parameter(Variable<T>& var) {
  Node n;
  n.op = "param:" + var.name;
  n.value = var.value;
  n.requires_grad = var.requires_grad;
  n.variable = &var;
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

template <class T>
NodeRef Graph<T>::record(std::string op, Tensor<T> value, std::vector<NodeRef> inputs, BackwardFn backward) {
  if (backward_done_) throw AutodiffError("cannot record '" + op + "' after backward");
  bool rg = false;
  for (NodeRef in : inputs) rg = rg || node(in).requires_grad;
  Node n;
  n.op = std::move(op);
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.requires_grad = rg;
  if (rg) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

template <class T>
const Tensor<T>& Graph<T>::grad(NodeRef ref) const {
  const Node& n = node(ref);
  if (!n.has_grad) throw AutodiffError("node '" + n.op + "' has no gradient");
  return n.grad;
}

template <class T>
void Graph<T>::mix_kink_signature(std::uint64_t h) noexcept {
  kink_signature_ ^= h + 0x9e3779b97f4a7c15ULL + (kink_signature_ << 6) + (kink_signature_ >> 2);
}

template <class T>
std::vector<NodeRef> Graph<T>::backward(NodeRef loss) {
  Node& root = node(loss);
  if (root.value.numel() != 1) {
    throw AutodiffError("backward needs a scalar loss, got shape " + shape_str(root.value.shape()));
  }
  if (backward_done_) throw AutodiffError("backward called twice on the same graph");
  backward_done_ = true;

  std::vector<NodeRef> leaves;
  if (!root.requires_grad) return leaves;
  root.grad = Tensor<T>::ones(root.value.shape());
  root.has_grad = true;

  for (std::size_t i = loss.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.has_grad || n.leaf) continue;
    BackwardContext<T> ctx{n.grad, n.value, {}, {}, {}};
    ctx.inputs.reserve(n.inputs.size());
    for (NodeRef in : n.inputs) {
      ctx.inputs.push_back(&nodes_[in.index].value);
      ctx.needs_grad.push_back(nodes_[in.index].requires_grad ? 1 : 0);
    }
    ctx.input_grads.resize(n.inputs.size());
    n.backward(ctx);
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      if (!ctx.needs(j)) continue;
      Node& in = nodes_[n.inputs[j].index];
      Tensor<T>& g = ctx.input_grads[j];
      if (g.shape() != in.value.shape()) {
        throw AutodiffError("op '" + n.op + "' produced gradient " + shape_str(g.shape()) + " for input " +
                            shape_str(in.value.shape()));
      }
      if (!in.has_grad) {
        in.grad = std::move(g);
        in.has_grad = true;
      } else {
        add_inplace(in.grad, g);
      }
    }
    // Interior gradients and saved state are consumed exactly once.
    n.grad = Tensor<T>();
    n.has_grad = false;
    n.backward = nullptr;
  }

  for (std::size_t i = 0; i <= loss.index; ++i) {
    Node& n = nodes_[i];
    if (!n.leaf || !n.requires_grad || !n.has_grad) continue;
    leaves.push_back({i});
    if (n.variable) {
      if (n.variable->grad.shape() != n.value.shape()) n.variable->zero_grad();
      add_inplace(n.variable->grad, n.grad);
    }
  }
  return leaves;
}

// ---- elementary ops ----

template <class T>
NodeRef add(Graph<T>& g, NodeRef a, NodeRef b) {
  return g.record("add", add(g.value(a), g.value(b)), {a, b}, [](BackwardContext<T>& c) {
    if (c.needs(0)) c.input_grads[0] = c.grad_out;
    if (c.needs(1)) c.input_grads[1] = c.grad_out;
  });
}

template <class T>
NodeRef sub(Graph<T>& g, NodeRef a, NodeRef b) {
  return g.record("sub", sub(g.value(a), g.value(b)), {a, b}, [](BackwardContext<T>& c) {
    if (c.needs(0)) c.input_grads[0] = c.grad_out;
    if (c.needs(1)) c.input_grads[1] = scale(c.grad_out, T{-1});
  });
}

template <class T>
NodeRef mul(Graph<T>& g, NodeRef a, NodeRef b) {
  return g.record("mul", mul(g.value(a), g.value(b)), {a, b}, [](BackwardContext<T>& c) {
    if (c.needs(0)) c.input_grads[0] = mul(c.grad_out, c.input(1));
    if (c.needs(1)) c.input_grads[1] = mul(c.grad_out, c.input(0));
  });
}

template <class T>
NodeRef scale(Graph<T>& g, NodeRef a, T factor) {
  return g.record("scale", scale(g.value(a), factor), {a},
                  [factor](BackwardContext<T>& c) { c.input_grads[0] = scale(c.grad_out, factor); });
}

template <class T>
NodeRef sum(Graph<T>& g, NodeRef a) {
  return g.record("sum", Tensor<T>::scalar(sum(g.value(a))), {a}, [](BackwardContext<T>& c) {
    c.input_grads[0] = Tensor<T>::full(c.input(0).shape(), c.grad_out[0]);
  });
}

template <class T>
NodeRef weighted_sum(Graph<T>& g, NodeRef a, const Tensor<T>& weights) {
  const Tensor<T>& x = g.value(a);
  if (x.shape() != weights.shape()) {
    throw ShapeError("weighted_sum: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(weights.shape()));
  }
  T s{0};
  for (std::size_t i = 0; i < x.numel(); ++i) s += x[i] * weights[i];
  return g.record("weighted_sum", Tensor<T>::scalar(s), {a},
                  [weights](BackwardContext<T>& c) { c.input_grads[0] = scale(weights, c.grad_out[0]); });
}

template <class T>
NodeRef concat_channels(Graph<T>& g, std::span<const NodeRef> parts) {
  std::vector<Tensor<T>> values;
  std::vector<std::size_t> widths;
  values.reserve(parts.size());
  for (NodeRef p : parts) {
    values.push_back(g.value(p));
    widths.push_back(g.value(p).dim(1));
  }
  Tensor<T> out = concat_channels(std::span<const Tensor<T>>(values));
  return g.record("concat", std::move(out), std::vector<NodeRef>(parts.begin(), parts.end()),
                  [widths](BackwardContext<T>& c) {
                    std::size_t offset = 0;
                    for (std::size_t i = 0; i < widths.size(); ++i) {
                      if (c.needs(i)) c.input_grads[i] = slice_channels(c.grad_out, offset, widths[i]);
                      offset += widths[i];
                    }
                  });
}

template <class T>
NodeRef slice_channels(Graph<T>& g, NodeRef a, std::size_t begin, std::size_t count) {
  return g.record("slice_channels", slice_channels(g.value(a), begin, count), {a},
                  [begin](BackwardContext<T>& c) {
                    const Shape& s = c.input(0).shape();
                    Tensor<T> dx(s);
                    const std::size_t plane = s[2] * s[3];
                    const std::size_t width = c.grad_out.dim(1);
                    for (std::size_t n = 0; n < s[0]; ++n)
                      std::copy_n(c.grad_out.raw() + n * width * plane, width * plane,
                                  dx.raw() + (n * s[1] + begin) * plane);
                    c.input_grads[0] = std::move(dx);
                  });
}

template <class T>
NodeRef reshape(Graph<T>& g, NodeRef a, Shape shape) {
  return g.record("reshape", g.value(a).reshape(std::move(shape)), {a},
                  [](BackwardContext<T>& c) { c.input_grads[0] = c.grad_out.reshape(c.input(0).shape()); });
}

// ---- finite differences ----

namespace {

struct Probe {
  double loss;
  std::uint64_t kinks;
};

Probe evaluate(const std::function<NodeRef(Graph<double>&)>& build) {
  Graph<double> g;
  NodeRef loss = build(g);
  const Tensor<double>& v = g.value(loss);
  if (v.numel() != 1) throw AutodiffError("gradient check needs a scalar loss");
  if (!std::isfinite(v[0])) throw std::domain_error("non-finite loss during gradient check");
  return {v[0], g.kink_signature()};
}

}  // namespace

GradCheckResult finite_difference_check(const std::function<NodeRef(Graph<double>&)>& build,
                                        Variable<double>& var, double eps, std::size_t coord_stride) {
  if (!(eps > 0)) throw std::invalid_argument("finite_difference_check: eps must be positive");
  if (coord_stride == 0) coord_stride = 1;
  var.zero_grad();
  std::uint64_t base_kinks = 0;
  {
    Graph<double> g;
    NodeRef loss = build(g);
    if (!std::isfinite(g.value(loss)[0])) throw std::domain_error("non-finite loss during gradient check");
    base_kinks = g.kink_signature();
    g.backward(loss);
  }
  const Tensor<double> analytic = var.grad;
  if (!analytic.all_finite()) throw std::domain_error("non-finite analytic gradient for " + var.name);

  GradCheckResult result;
  double max_dev = 0, max_mag = 0;
  for (std::size_t i = 0; i < var.value.numel(); i += coord_stride) {
    const double saved = var.value[i];
    var.value[i] = saved + eps;
    const Probe plus = evaluate(build);
    var.value[i] = saved - eps;
    const Probe minus = evaluate(build);
    var.value[i] = saved;
    if (plus.kinks != base_kinks || minus.kinks != base_kinks) {
      ++result.kinks_skipped;
      continue;
    }
    const double numeric = (plus.loss - minus.loss) / (2 * eps);
    const double ana = analytic[i];
    const double rel = std::abs(numeric - ana) / (std::abs(ana) + std::abs(numeric) + 1e-12);
    ++result.coords_checked;
    max_dev = std::max(max_dev, std::abs(numeric - ana));
    max_mag = std::max({max_mag, std::abs(ana), std::abs(numeric)});
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
      result.worst_analytic = ana;
      result.worst_numeric = numeric;
    }
  }
  result.tensor_rel_error = max_dev / std::max(max_mag, 1e-300);
  return result;
}

GradCheckResult finite_difference_check(const std::function<NodeRef(Graph<double>&, NodeRef)>& f,
                                        const Tensor<double>& x, double eps) {
  Variable<double> var{"x", x, {}, true};
  return finite_difference_check([&](Graph<double>& g) { return f(g, g.parameter(var)); }, var, eps);
}

#define WCNN_INSTANTIATE(T)                                                     \
  template class Graph<T>;                                                      \
  template NodeRef add(Graph<T>&, NodeRef, NodeRef);                            \
  template NodeRef sub(Graph<T>&, NodeRef, NodeRef);                            \
  template NodeRef mul(Graph<T>&, NodeRef, NodeRef);                            \
  template NodeRef scale(Graph<T>&, NodeRef, T);                                \
  template NodeRef sum(Graph<T>&, NodeRef);                                     \
  template NodeRef weighted_sum(Graph<T>&, NodeRef, const Tensor<T>&);          \
  template NodeRef concat_channels(Graph<T>&, std::span<const NodeRef>);        \
  template NodeRef slice_channels(Graph<T>&, NodeRef, std::size_t, std::size_t); \
  template NodeRef reshape(Graph<T>&, NodeRef, Shape);

WCNN_INSTANTIATE(float)
WCNN_INSTANTIATE(double)

#undef WCNN_INSTANTIATE

}  // namespace wcnn
