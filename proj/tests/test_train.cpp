#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "oracles.hpp"
#include "wcnn/train.hpp"

using namespace wcnn;

TEST_CASE("first Adam step moves by lr times the sign of the gradient") {
  Variable<double> p{"w", Tensor<double>(Shape{3}, {1.0, -2.0, 0.5}), Tensor<double>(Shape{3}, {0.3, -4.0, 1e-3})};
  AdamState<double> st;
  AdamConfig cfg;
  std::vector<Variable<double>*> ps{&p};
  adam_step<double>(ps, st, cfg, 0.01);
  const double g[] = {0.3, -4.0, 1e-3}, w0[] = {1.0, -2.0, 0.5};
  for (int i = 0; i < 3; ++i) CHECK(p.value[i] == doctest::Approx(w0[i] - 0.01 * g[i] / (std::abs(g[i]) + 1e-8)).epsilon(1e-12));
  CHECK(st.step == 1);
}

TEST_CASE("a zero gradient leaves parameters bit identical") {
  Variable<float> p{"w", Tensor<float>(Shape{4}, {1.f, 2.f, 3.f, 4.f}), Tensor<float>(Shape{4})};
  Variable<float> q{"unused", Tensor<float>(Shape{2}, {5.f, 6.f}), {}};
  const auto before_p = p.value, before_q = q.value;
  AdamState<float> st;
  std::vector<Variable<float>*> ps{&p, &q};
  for (int i = 0; i < 5; ++i) adam_step<float>(ps, st, AdamConfig{}, 0.1);
  CHECK(p.value == before_p);
  CHECK(q.value == before_q);
}

TEST_CASE("Adam descends a quadratic bowl") {
  Variable<double> p{"theta", Tensor<double>(Shape{2}, {1.0, -1.0}), {}};
  AdamState<double> st;
  std::vector<Variable<double>*> ps{&p};
  for (int i = 0; i < 100; ++i) {
    p.grad = scale(p.value, 2.0);
    adam_step<double>(ps, st, AdamConfig{}, 0.1);
  }
  CHECK(std::sqrt(squared_norm(p.value)) < 0.05);
}

TEST_CASE("a non-finite gradient is rejected before anything moves") {
  Variable<double> a{"first", Tensor<double>(Shape{1}, {1.0}), Tensor<double>(Shape{1}, {1.0})};
  Variable<double> b{"stage2.body1.conv.weight", Tensor<double>(Shape{1}, {1.0}),
                     Tensor<double>(Shape{1}, {std::nan("")})};
  AdamState<double> st;
  std::vector<Variable<double>*> ps{&a, &b};
  CHECK_THROWS_WITH_AS(adam_step<double>(ps, st, AdamConfig{}, 0.1), doctest::Contains("stage2.body1.conv.weight"),
                       NumericalError);
  CHECK(a.value[0] == 1.0);
}

TEST_CASE("global contrast normalization") {
  CHECK(max_abs_diff(global_contrast_normalization(Tensor<double>(Shape{1, 4, 4}, 0.7)), Tensor<double>(Shape{1, 4, 4})) < 1e-6);
  std::mt19937_64 rng(1);
  const auto x = add(oracle::randn({3, 5, 5}, rng, 3.0), 2.0);
  const auto y = global_contrast_normalization(x);
  const double n = static_cast<double>(y.numel());
  const double mean = sum(y) / n;
  CHECK(std::abs(mean) < 1e-12);
  CHECK(std::sqrt(squared_norm(y) / n) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(max_abs_diff(global_contrast_normalization(y), y) < 1e-10);
}

TEST_CASE("augmentation primitives") {
  std::mt19937_64 rng(2);
  const auto x = oracle::randn({2, 6, 5}, rng);
  CHECK(hflip(hflip(x)) == x);
  CHECK(hflip(x)[4] == x[0]);
  CHECK(resize_bilinear(x, 6, 5) == x);
  const auto c = resize_bilinear(Tensor<double>(Shape{1, 7, 7}, 0.25), 11, 11);
  for (double v : c.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  const auto cr = crop(x, 1, 2, 3);
  CHECK(cr.shape() == Shape{2, 3, 3});
  CHECK(cr[0] == x[1 * 5 + 2]);
  CHECK_THROWS(crop(x, 4, 0, 3));

  // With S - K = 2 every offset 0..2 appears.
  Tensor<double> ramp(Shape{1, 6, 6});
  for (std::size_t i = 0; i < 36; ++i) ramp[i] = static_cast<double>(i);
  AugmentConfig cfg{true, 6, 4, false};
  std::set<double> corners;
  for (int i = 0; i < 200; ++i) corners.insert(augment(ramp, cfg, rng)[0]);
  CHECK(corners.size() == 9);
  CHECK(*corners.begin() == 0.0);
  CHECK(*corners.rbegin() == 14.0);
  CHECK(eval_view(ramp, cfg)[0] == 7.0);
}

TEST_CASE("derived seeds are distinct and stable") {
  CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 20; ++a)
    for (std::uint64_t b = 0; b < 20; ++b) seen.insert(derive_seed(7, a, b));
  CHECK(seen.size() == 400);
}

namespace {

// Two linearly separable 8x8 classes: bright top half versus bright bottom half.
Dataset separable(std::size_t per_class, std::mt19937_64& rng) {
  Dataset d{{"top", "bottom"}, {}};
  std::uniform_real_distribution<double> u(0.0, 0.2);
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const int cls = static_cast<int>(i % 2);
    Tensor<double> img(Shape{1, 8, 8});
    for (std::size_t h = 0; h < 8; ++h)
      for (std::size_t w = 0; w < 8; ++w) img[h * 8 + w] = ((h < 4) == (cls == 0) ? 0.8 : 0.1) + u(rng);
    d.samples.push_back({global_contrast_normalization(img), {cls}});
  }
  return d;
}

TrainConfig tiny_config() {
  TrainConfig t;
  t.model.levels = 2;
  t.model.input_size = 8;
  t.model.input_channels = 1;
  t.model.channels = {4, 8};
  t.model.num_classes = 2;
  t.epochs = 30;
  t.batch_size = 4;
  t.adam.lr = 0.01;
  t.augment.enabled = false;
  t.augment.resize = 8;
  t.augment.crop = 8;
  t.dtype = "f64";
  return t;
}

}  // namespace

TEST_CASE("a tiny model fits a separable problem") {
  std::mt19937_64 rng(3);
  const auto data = separable(8, rng);
  SplitIndices split{"1", {}, {}};
  for (std::size_t i = 0; i < data.samples.size(); ++i) (i < 12 ? split.train : split.test).push_back(i);
  const auto cfg = tiny_config();
  auto model = Model<double>::build(cfg.model, cfg.seed);

  // Loss before any update is close to ln C for a freshly initialized head.
  const auto first = evaluate(model, data, split.train, cfg.augment);
  CHECK(first.loss == doctest::Approx(std::log(2.0)).epsilon(0.5));

  const auto r = train(model, data, split, cfg);
  const auto train_eval = evaluate(const_cast<Model<double>&>(r.last), data, split.train, cfg.augment);
  CHECK(train_eval.accuracy == 100.0);
  CHECK(r.final_test_accuracy == 100.0);
  CHECK(r.history.size() == 2 * cfg.epochs);
}

TEST_CASE("training is reproducible for a fixed seed") {
  std::mt19937_64 rng(4);
  const auto data = separable(6, rng);
  SplitIndices split{"1", {0, 1, 2, 3, 4, 5, 6, 7}, {8, 9, 10, 11}};
  auto cfg = tiny_config();
  cfg.epochs = 2;
  cfg.augment = {true, 10, 8, true};
  const auto a = train(Model<double>::build(cfg.model, 5), data, split, cfg);
  const auto b = train(Model<double>::build(cfg.model, 5), data, split, cfg);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].loss == b.history[i].loss);
}

TEST_CASE("train config validation and round trip") {
  auto t = tiny_config();
  t.augment.crop = 6;
  CHECK_THROWS(t.validate());
  t = tiny_config();
  t.batch_size = 1;
  CHECK_THROWS(t.validate());
  t = tiny_config();
  t.lr_step = 7;
  const auto back = TrainConfig::from_config(Config::parse(t.to_config().canonical()));
  CHECK(back.to_config().canonical() == t.to_config().canonical());
  CHECK(back.lr_step == 7);
}

TEST_CASE("report rows are tab separated") {
  CHECK(report_header() == "epoch\tsplit\tloss\tacc");
  CHECK(report_row({3, "test", 0.5, 87.5}) == "3\ttest\t0.500000\t87.50");
}
