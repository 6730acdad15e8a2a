#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "wcnn/data.hpp"
#include "wcnn/wavelet.hpp"

using namespace wcnn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("wcnn_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void spit(const fs::path& p, const std::string& bytes) { std::ofstream(p, std::ios::binary) << bytes; }

const char* kHeader = "path\tlabels\tgroup\tsplit\n";

}  // namespace

TEST_CASE("P5 decode of a 2x2 image with a comment") {
  TempDir d("pnm5");
  spit(d.path / "a.pgm", std::string("P5\n# two by two\n2 2\n255\n") + std::string("\x00\x33\xcc\xff", 4));
  const auto t = load_pnm(d.path / "a.pgm");
  CHECK(t.shape() == Shape{1, 2, 2});
  CHECK(t[0] == 0.0);
  CHECK(t[1] == doctest::Approx(0.2));
  CHECK(t[2] == doctest::Approx(0.8));
  CHECK(t[3] == 1.0);
}

TEST_CASE("P6 decode keeps channels planar") {
  TempDir d("pnm6");
  spit(d.path / "r.ppm", std::string("P6 1 1 255\n") + std::string("\xff\x00\x00", 3));
  const auto t = load_pnm(d.path / "r.ppm");
  CHECK(t.shape() == Shape{3, 1, 1});
  CHECK(t[0] == 1.0);
  CHECK(t[1] == 0.0);
  CHECK(t[2] == 0.0);
}

TEST_CASE("PNM round trips in 8 and 16 bits") {
  TempDir d("pnmrt");
  for (unsigned maxval : {255u, 65535u, 1000u}) {
    for (std::size_t c : {1u, 3u}) {
      Tensor<double> img(Shape{c, 3, 5});
      for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<double>((i * 37) % maxval) / maxval;
      const auto p = d.path / ("x" + std::to_string(c) + (c == 1 ? ".pgm" : ".ppm"));
      write_pnm(p, img, maxval);
      const auto back = load_pnm(p);
      CHECK(back.shape() == img.shape());
      CHECK(max_abs_diff(back, img) < 1e-12);
      const auto bytes = slurp(p);
      write_pnm(p, back, maxval);
      CHECK(slurp(p) == bytes);
    }
  }
}

TEST_CASE("malformed PNM files are rejected") {
  TempDir d("pnmbad");
  spit(d.path / "p2.pgm", "P2\n1 1\n255\n0\n");
  CHECK_THROWS_WITH_AS(load_pnm(d.path / "p2.pgm"), doctest::Contains("magic"), DataError);
  spit(d.path / "short.pgm", "P5\n2 2\n255\n\x01");
  CHECK_THROWS_WITH_AS(load_pnm(d.path / "short.pgm"), doctest::Contains("truncated"), DataError);
  spit(d.path / "over.pgm", "P5\n1 1\n10\n\x0b");
  CHECK_THROWS_AS(load_pnm(d.path / "over.pgm"), DataError);
  CHECK_THROWS_AS(load_pnm(d.path / "missing.pgm"), DataError);
}

TEST_CASE("manifest parsing") {
  const std::string text = std::string(kHeader) + "a.pgm\tcat\tg1\ttrain\nb.pgm\tdog,cat\tg2\ttest\n";
  CHECK_THROWS_WITH_AS(parse_manifest(text, ".", LabelMode::single, false), doctest::Contains("line 3"), DataError);
  const auto m = parse_manifest(text, "/data", LabelMode::multi, false);
  CHECK(m.class_names == std::vector<std::string>{"cat", "dog"});
  CHECK(m.records[1].label_ids == std::vector<int>{0, 1});
  CHECK(m.resolve(0) == fs::path("/data/a.pgm"));

  const std::string fixed = "#classes\tz,y\n" + std::string(kHeader) + "a.pgm\ty\tg\ttrain\n";
  CHECK(parse_manifest(fixed, ".", LabelMode::single, false).records[0].label_ids == std::vector<int>{1});
  CHECK_THROWS_WITH_AS(parse_manifest("#classes\tz\n" + std::string(kHeader) + "a.pgm\ty\tg\ttrain\n", ".",
                                      LabelMode::single, false),
                       doctest::Contains("line 3"), DataError);

  const std::string dup = std::string(kHeader) + "a.pgm\tx\tg\ttrain\na.pgm\tx\tg\ttest\n";
  CHECK_THROWS_WITH_AS(parse_manifest(dup, ".", LabelMode::single, false), doctest::Contains("line 3"), DataError);

  const std::string empty = std::string(kHeader) + "a.pgm\tx\tg\ttrain\nb.pgm\t\tg\ttest\n";
  CHECK_THROWS_AS(parse_manifest(empty, ".", LabelMode::single, false), DataError);
  CHECK(parse_manifest(empty, ".", LabelMode::multi, false).records[1].labels.empty());

  CHECK_THROWS_AS(parse_manifest("a.pgm\tx\tg\ttrain\n", ".", LabelMode::single, false), DataError);
  CHECK_THROWS_WITH_AS(parse_manifest(std::string(kHeader) + "nope.pgm\tx\tg\ttrain\n", "/nonexistent",
                                      LabelMode::single, true),
                       doctest::Contains("line 2"), DataError);
}

TEST_CASE("manifest write and reload") {
  TempDir d("manifest");
  const auto m = parse_manifest(std::string(kHeader) + "a.pgm\tb,a\tg1\t1=train,2=test\n", d.path, LabelMode::multi,
                                false);
  write_manifest(d.path / "m.tsv", m);
  const auto back = load_manifest(d.path / "m.tsv", LabelMode::multi, false);
  CHECK(back.class_names == m.class_names);
  CHECK(back.records[0].labels == m.records[0].labels);
  CHECK(back.records[0].split == m.records[0].split);
}

namespace {

DatasetManifest grid(std::size_t n, std::size_t groups) {
  std::string text = kHeader;
  for (std::size_t i = 0; i < n; ++i) {
    text += "i" + std::to_string(i) + ".pgm\tc" + std::to_string(i % 3) + "\tg" + std::to_string(i % groups) + "\t";
    for (std::size_t k = 0; k < 10; ++k) text += (k ? "," : "") + std::to_string(k) + "=" + (i % 10 == k ? "test" : "train");
    text += "\n";
  }
  return parse_manifest(text, ".", LabelMode::single, false);
}

void check_partition(const DatasetManifest& m, const SplitIndices& s, bool covers) {
  std::set<std::size_t> tr(s.train.begin(), s.train.end()), te(s.test.begin(), s.test.end());
  CHECK(tr.size() == s.train.size());
  for (auto i : te) CHECK(tr.count(i) == 0);
  if (covers) CHECK(tr.size() + te.size() == m.size());
}

}  // namespace

TEST_CASE("split policies") {
  const auto m = grid(40, 4);
  const auto groups = make_splits(m, SplitPolicy::parse("leave-one-group-in"));
  REQUIRE(groups.size() == 4);
  for (const auto& s : groups) {
    check_partition(m, s, true);
    CHECK(s.train.size() == 10);
    for (auto i : s.train) CHECK(m.records[i].group == s.name);
  }

  const auto cols = make_splits(m, SplitPolicy::parse("split-column"));
  REQUIRE(cols.size() == 10);
  for (const auto& s : cols) {
    check_partition(m, s, true);
    CHECK(s.test.size() == 4);
  }

  const auto loo = make_splits(m, SplitPolicy::parse("kfold", 40, 3));
  REQUIRE(loo.size() == 40);
  std::set<std::size_t> tested;
  for (const auto& s : loo) {
    check_partition(m, s, true);
    REQUIRE(s.test.size() == 1);
    tested.insert(s.test[0]);
  }
  CHECK(tested.size() == 40);
  CHECK(make_splits(m, SplitPolicy::parse("kfold", 5, 9))[0].test ==
        make_splits(m, SplitPolicy::parse("kfold", 5, 9))[0].test);

  CHECK_THROWS_AS(SplitPolicy::parse("random"), DataError);
  CHECK_THROWS_AS(make_splits(grid(4, 1), SplitPolicy::parse("leave-one-group-in")), DataError);
  CHECK_THROWS_AS(make_splits(m, SplitPolicy::parse("kfold", 41)), DataError);
  const auto one_sided = parse_manifest(std::string(kHeader) + "a.pgm\tx\tg\ttrain\n", ".", LabelMode::single, false);
  CHECK_THROWS_AS(make_splits(one_sided, SplitPolicy::parse("split-column")), DataError);
}

TEST_CASE("synthetic corpus is reproducible per seed") {
  TempDir a("synth_a"), b("synth_b"), c("synth_c");
  SynthSpec spec;
  spec.per_class = 4;
  const auto ma = synth_textures(a.path, spec);
  synth_textures(b.path, spec);
  spec.seed = 2;
  synth_textures(c.path, spec);
  CHECK(ma.size() == 24);
  CHECK(ma.class_names.size() == 6);
  CHECK(slurp(a.path / "manifest.tsv") == slurp(b.path / "manifest.tsv"));
  bool any_differs = false;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    CHECK(slurp(ma.resolve(i)) == slurp(b.path / ma.records[i].path));
    any_differs |= slurp(ma.resolve(i)) != slurp(c.path / ma.records[i].path);
  }
  CHECK(any_differs);
  const auto splits = make_splits(load_manifest(a.path / "manifest.tsv", LabelMode::single), SplitPolicy{});
  REQUIRE(splits.size() == 1);
  CHECK(splits[0].train.size() == 18);
  CHECK(splits[0].test.size() == 6);
}

namespace {

// Fraction of detail energy in each level, LL excluded.
std::vector<double> level_energy(const Tensor<double>& img, std::size_t levels) {
  Tensor<double> x = img.reshape({1, img.dim(0), img.dim(1), img.dim(2)});
  const auto p = decompose(x, levels);
  std::vector<double> e;
  double total = 0;
  for (const auto& d : p.details) {
    e.push_back(squared_norm(d.lh) + squared_norm(d.hl) + squared_norm(d.hh));
    total += e.back();
  }
  for (auto& v : e) v /= total;
  return e;
}

}  // namespace

TEST_CASE("fine, coarse and wide gratings peak at levels 1, 2 and 3") {
  std::mt19937_64 rng(5);
  const auto names = synth_class_names(9);
  for (const auto& [name, level] : {std::pair{"grating_fine", 0}, {"grating_coarse", 1}, {"grating_wide", 2}}) {
    const auto cls = static_cast<std::size_t>(std::find(names.begin(), names.end(), name) - names.begin());
    std::vector<double> mean(5, 0.0);
    for (int i = 0; i < 20; ++i) {
      const auto e = level_energy(synth_texture(cls, 32, rng), 5);
      for (std::size_t t = 0; t < 5; ++t) mean[t] += e[t] / 20;
    }
    CAPTURE(name);
    CHECK(std::max_element(mean.begin(), mean.end()) - mean.begin() == level);
  }
}

TEST_CASE("a level-energy nearest-centroid classifier separates the default corpus") {
  TempDir d("synth_centroid");
  const auto m = synth_textures(d.path, SynthSpec{});
  const auto split = make_splits(m, SplitPolicy{}).front();
  const std::size_t classes = m.class_names.size();
  std::vector<std::vector<double>> features;
  for (std::size_t i = 0; i < m.size(); ++i) features.push_back(level_energy(load_pnm(m.resolve(i)), 5));

  std::vector<std::vector<double>> centroid(classes, std::vector<double>(5, 0.0));
  std::vector<double> count(classes, 0.0);
  for (auto i : split.train) {
    const auto c = static_cast<std::size_t>(m.records[i].label_ids[0]);
    count[c] += 1;
    for (std::size_t k = 0; k < 5; ++k) centroid[c][k] += features[i][k];
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (auto& v : centroid[c]) v /= count[c];

  std::size_t correct = 0;
  for (auto i : split.test) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < classes; ++c) {
      double dist = 0;
      for (std::size_t k = 0; k < 5; ++k) dist += (features[i][k] - centroid[c][k]) * (features[i][k] - centroid[c][k]);
      if (dist < best_d) best_d = dist, best = c;
    }
    correct += static_cast<int>(best) == m.records[i].label_ids[0];
  }
  CHECK(100.0 * static_cast<double>(correct) / static_cast<double>(split.test.size()) > 80.0);
}
