#include <doctest.h>

#include <numeric>

#include "oracles.hpp"
#include "wcnn/wavelet.hpp"

using namespace wcnn;

TEST_CASE("haar pair is orthonormal and registered") {
  const auto f = FilterPair::haar();
  CHECK(f.orthonormal());
  CHECK(filter_by_name("haar").low == f.low);
  CHECK_THROWS(filter_by_name("db4"));
  FilterPair bad{"bad", {1.0, 1.0}, {1.0}};
  CHECK_THROWS(bad.validate());
  CHECK_FALSE(FilterPair{"avg", {0.5, 0.5}, {-0.5, 0.5}}.orthonormal());
}

TEST_CASE("one 2x2 block decomposes into its sums and differences") {
  const Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});  // a b / c d
  const auto s = dwt2d_level(x);
  CHECK(s.ll[0] == doctest::Approx(5.0));   // (a+b+c+d)/2
  CHECK(s.lh[0] == doctest::Approx(-2.0));  // (a+b-c-d)/2
  CHECK(s.hl[0] == doctest::Approx(-1.0));  // (a-b+c-d)/2
  CHECK(s.hh[0] == doctest::Approx(0.0));
}

TEST_CASE("analysis level matches block formulas on random input") {
  std::mt19937_64 rng(7);
  const auto x = oracle::randn({2, 3, 8, 6}, rng);
  const auto s = dwt2d_level(x);
  const auto o = oracle::haar_blocks(x);
  CHECK(max_abs_diff(s.ll, o.ll) < 1e-14);
  CHECK(max_abs_diff(s.lh, o.lh) < 1e-14);
  CHECK(max_abs_diff(s.hl, o.hl) < 1e-14);
  CHECK(max_abs_diff(s.hh, o.hh) < 1e-14);
  CHECK(max_abs_diff(idwt2d_level(s), x) < 1e-14);
}

TEST_CASE("1-d transform inverts and conserves energy") {
  std::mt19937_64 rng(8);
  const auto x = oracle::randn({16}, rng);
  const auto [lo, hi] = dwt1d<double>(x.data(), FilterPair::haar());
  const auto back = idwt1d<double>(lo, hi, FilterPair::haar());
  double e0 = 0, e1 = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(back[i] == doctest::Approx(x[i]).epsilon(1e-14));
    e0 += x[i] * x[i];
  }
  for (std::size_t i = 0; i < 8; ++i) e1 += lo[i] * lo[i] + hi[i] * hi[i];
  CHECK(e1 == doctest::Approx(e0).epsilon(1e-14));
}

TEST_CASE("decompose builds the pyramid and reconstruct inverts it") {
  std::mt19937_64 rng(9);
  const auto x = oracle::randn({1, 2, 32, 32}, rng);
  const auto p = decompose(x, 3);
  REQUIRE(p.levels() == 3);
  CHECK(p.details[0].hh.shape() == Shape{1, 2, 16, 16});
  CHECK(p.details[2].lh.shape() == Shape{1, 2, 4, 4});
  CHECK(p.low.shape() == Shape{1, 2, 4, 4});
  CHECK(oracle::rel_error(reconstruct(p), x) < 1e-13);
  CHECK(pyramid_energy(p) == doctest::Approx(squared_norm(x)).epsilon(1e-13));
  CHECK_THROWS(decompose(x, 0));
}

TEST_CASE("constant image has empty detail bands") {
  const auto x = Tensor<double>::full({1, 1, 8, 8}, 0.75);
  const auto p = decompose(x, 1);
  CHECK(squared_norm(p.details[0].lh) + squared_norm(p.details[0].hl) + squared_norm(p.details[0].hh) < 1e-28);
  for (double v : p.low.data()) CHECK(v == doctest::Approx(1.5));
}

TEST_CASE("divisibility is enforced with a padding hint") {
  const auto x = Tensor<double>::zeros({1, 1, 20, 16});
  CHECK_THROWS_AS(decompose(x, 3), ShapeError);
  try {
    require_divisible(x.shape(), 3);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("pad") != std::string::npos);
  }
  CHECK_NOTHROW(require_divisible(x.shape(), 2));
}

TEST_CASE("reconstruct rejects malformed pyramids") {
  std::mt19937_64 rng(10);
  auto p = decompose(oracle::randn({1, 1, 8, 8}, rng), 2);
  p.details[1].hh = Tensor<double>::zeros({1, 1, 3, 2});
  CHECK_THROWS(reconstruct(p));
}

TEST_CASE("generalized conv-pool with a box kernel is average pooling") {
  std::mt19937_64 rng(11);
  const auto x = oracle::randn({12}, rng);
  const std::vector<double> box{0.5, 0.5};
  const auto y = generalized_conv_pool<double>(x.data(), box, 2);
  REQUIRE(y.size() == 6);
  for (std::size_t j = 0; j < 6; ++j) CHECK(y[j] == doctest::Approx((x[2 * j] + x[2 * j + 1]) / 2));
  const auto full = generalized_conv_pool<double>(x.data(), box, 1);
  CHECK(full.size() == 11);
}

TEST_CASE("cnn_reduction with haar low kernels is the LL band") {
  std::mt19937_64 rng(12);
  const auto x = oracle::randn({1, 1, 16, 16}, rng);
  const auto f = FilterPair::haar();
  const std::vector<Tensor<double>> kernels(2, outer(f.low, f.low));
  const auto low = cnn_reduction(x, std::span<const Tensor<double>>(kernels));
  CHECK(max_abs_diff(low, decompose(x, 2).low) < 1e-13);
}

TEST_CASE("wavelet_level tape op stacks LL, LH, HL, HH") {
  std::mt19937_64 rng(13);
  const auto x = oracle::randn({2, 3, 4, 4}, rng);
  Graph<double> g;
  const auto y = g.value(wavelet_level(g, g.constant(x)));
  const auto s = dwt2d_level(x);
  CHECK(y.shape() == Shape{2, 12, 2, 2});
  CHECK(slice_channels(y, 0, 3) == s.ll);
  CHECK(slice_channels(y, 3, 3) == s.lh);
  CHECK(slice_channels(y, 6, 3) == s.hl);
  CHECK(slice_channels(y, 9, 3) == s.hh);
}
