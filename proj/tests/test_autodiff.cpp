#include <doctest.h>

#include "oracles.hpp"
#include "wcnn/autodiff.hpp"
#include "wcnn/layers.hpp"

using namespace wcnn;

TEST_CASE("fan-out accumulates gradients") {
  Graph<double> g;
  const NodeRef x = g.input(Tensor<double>({2}, std::vector<double>{3, -1}));
  const NodeRef y = add(g, mul(g, x, x), scale(g, x, 2.0));  // x^2 + 2x
  g.backward(sum(g, y));
  CHECK(g.grad(x)[0] == doctest::Approx(8));
  CHECK(g.grad(x)[1] == doctest::Approx(0));
}

TEST_CASE("parameters accumulate across graphs and backward runs once") {
  Variable<double> w{"w", Tensor<double>({1}, std::vector<double>{2.0}), {}, true};
  w.zero_grad();
  for (int i = 0; i < 2; ++i) {
    Graph<double> g;
    const NodeRef p = g.parameter(w);
    const NodeRef loss = sum(g, mul(g, p, p));
    g.backward(loss);
    CHECK_THROWS_AS(g.backward(loss), AutodiffError);
  }
  CHECK(w.grad[0] == doctest::Approx(8.0));
}

TEST_CASE("constants receive no gradient") {
  Graph<double> g;
  const NodeRef c = g.constant(Tensor<double>::ones({3}));
  const NodeRef x = g.input(Tensor<double>::ones({3}));
  const auto leaves = g.backward(sum(g, mul(g, c, x)));
  CHECK(leaves.size() == 1);
  CHECK_FALSE(g.has_grad(c));
}

TEST_CASE("finite differences agree on a smooth composite") {
  std::mt19937_64 rng(5);
  const auto x = oracle::randn({2, 3, 2, 2}, rng);
  const auto w = oracle::randn({2, 3, 2, 2}, rng);
  const auto r = finite_difference_check(
      [&](Graph<double>& g, NodeRef in) {
        const NodeRef parts[2] = {in, scale(g, in, 0.5)};
        const NodeRef cat = concat_channels(g, std::span<const NodeRef>(parts));
        return weighted_sum(g, mul(g, slice_channels(g, cat, 1, 3), in), w);
      },
      x, 1e-5);
  CHECK(r.coords_checked == x.numel());
  CHECK(r.max_rel_error < 1e-7);
}

TEST_CASE("probes that cross a ReLU kink are skipped") {
  Tensor<double> x({3}, std::vector<double>{0.0, 1.0, -1.0});
  const auto r = finite_difference_check([](Graph<double>& g, NodeRef in) { return sum(g, relu(g, in)); }, x, 1e-5);
  CHECK(r.kinks_skipped == 1);
  CHECK(r.coords_checked == 2);
  CHECK(r.max_rel_error < 1e-9);
}
