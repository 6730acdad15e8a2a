#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "wcnn/tensor.hpp"

namespace wcnn {

/// Misuse of the tape: non-scalar loss, second backward pass, dangling refs.
class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct NodeRef {
  std::size_t index = 0;
  friend bool operator==(NodeRef, NodeRef) = default;
};

/// A named trainable (or frozen) tensor that outlives any single graph.
template <class T>
struct Variable {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first backward that reaches it
  bool requires_grad = true;

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

/// What an op's backward closure sees. It writes input_grads[i] only where needs(i).
template <class T>
struct BackwardContext {
  const Tensor<T>& grad_out;
  const Tensor<T>& output;
  std::vector<const Tensor<T>*> inputs;
  std::vector<Tensor<T>> input_grads;
  std::vector<char> needs_grad;

  bool needs(std::size_t i) const { return needs_grad[i] != 0; }
  const Tensor<T>& input(std::size_t i) const { return *inputs[i]; }
};

/// Eager forward, taped reverse pass. Nodes are appended in topological order
/// by construction; one backward per graph.
template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(BackwardContext<T>&)>;

  NodeRef constant(Tensor<T> value);
  NodeRef input(Tensor<T> value, bool requires_grad = true);
  /// Binds a Variable; its grad is accumulated (not overwritten) by backward.
  NodeRef parameter(Variable<T>& var);
  NodeRef record(std::string op, Tensor<T> value, std::vector<NodeRef> inputs, BackwardFn backward);

  const Tensor<T>& value(NodeRef ref) const { return node(ref).value; }
  const std::string& op(NodeRef ref) const { return node(ref).op; }
  bool requires_grad(NodeRef ref) const { return node(ref).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Returns the requires-grad leaves that received a gradient, in graph order.
  std::vector<NodeRef> backward(NodeRef loss);
  bool has_grad(NodeRef ref) const { return node(ref).has_grad; }
  const Tensor<T>& grad(NodeRef ref) const;

  // Piecewise-linear ops fold their activation pattern in here so gradient
  // checks can tell when a perturbation crossed a kink.
  void mix_kink_signature(std::uint64_t h) noexcept;
  std::uint64_t kink_signature() const noexcept { return kink_signature_; }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    std::vector<NodeRef> inputs;
    BackwardFn backward;
    Variable<T>* variable = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    bool leaf = false;
    bool has_grad = false;
  };

  const Node& node(NodeRef ref) const;
  Node& node(NodeRef ref);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  std::uint64_t kink_signature_ = 0x9e3779b97f4a7c15ULL;
};

// Elementwise and structural ops on the tape.
template <class T>
NodeRef add(Graph<T>& g, NodeRef a, NodeRef b);
template <class T>
NodeRef sub(Graph<T>& g, NodeRef a, NodeRef b);
template <class T>
NodeRef mul(Graph<T>& g, NodeRef a, NodeRef b);
template <class T>
NodeRef scale(Graph<T>& g, NodeRef a, T factor);
/// Sum of all elements, shape [1].
template <class T>
NodeRef sum(Graph<T>& g, NodeRef a);
/// Sum of a ⊙ w for a constant weight tensor w; handy for probing gradients.
template <class T>
NodeRef weighted_sum(Graph<T>& g, NodeRef a, const Tensor<T>& weights);
template <class T>
NodeRef concat_channels(Graph<T>& g, std::span<const NodeRef> parts);
template <class T>
NodeRef slice_channels(Graph<T>& g, NodeRef a, std::size_t begin, std::size_t count);
template <class T>
NodeRef reshape(Graph<T>& g, NodeRef a, Shape shape);

struct GradCheckResult {
  double max_rel_error = 0.0;     // worst per-coordinate relative error
  double tensor_rel_error = 0.0;  // max |num - ana| over max(|ana|, |num|), whole tensor
  std::size_t coords_checked = 0;
  std::size_t kinks_skipped = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Central differences against the tape for every coordinate of `var`.
/// `build` must bind `var` through Graph::parameter and return a scalar.
/// Relative error per coordinate: |num - ana| / (|ana| + |num| + 1e-12).
/// The tensor-wise figure divides the largest deviation by the largest
/// gradient magnitude, which stays meaningful when some coordinates are
/// near the central-difference roundoff floor.
/// Coordinates whose perturbation changes a kink signature are skipped and
/// counted. Throws std::domain_error on non-finite loss.
GradCheckResult finite_difference_check(const std::function<NodeRef(Graph<double>&)>& build,
                                        Variable<double>& var, double eps, std::size_t coord_stride = 1);

/// Checks d/dx sum-reduced f(x). `f` maps the input node to a scalar node.
GradCheckResult finite_difference_check(const std::function<NodeRef(Graph<double>&, NodeRef)>& f,
                                        const Tensor<double>& x, double eps);

}  // namespace wcnn
