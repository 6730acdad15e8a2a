// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fail.
// Optional arguments select criteria by number.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <regex>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "wcnn/cli.hpp"
#include "wcnn/data.hpp"
#include "wcnn/gradcheck.hpp"
#include "wcnn/layers.hpp"
#include "wcnn/metrics.hpp"
#include "wcnn/model.hpp"
#include "wcnn/wavelet.hpp"

using namespace wcnn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

const fs::path kSource = WCNN_SOURCE_DIR;

fs::path scratch(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("wcnn_acceptance_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::string num(double v, const char* f = "%.3e") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int cli(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = run_cli(args, o, e);
  if (out) *out = o.str();
  if (code != 0) std::cerr << e.str();
  return code;
}

// Section lines of a report file: everything after "[name]" up to the next section.
std::vector<std::string> section(const std::string& text, const std::string& name) {
  std::istringstream is(text);
  std::vector<std::string> lines;
  std::string line;
  bool in = false;
  while (std::getline(is, line)) {
    if (!line.empty() && line.front() == '[') {
      in = line == "[" + name + "]";
      continue;
    }
    if (in && !line.empty()) lines.push_back(line);
  }
  return lines;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::string f;
  std::istringstream is(line);
  while (std::getline(is, f, '\t')) out.push_back(f);
  return out;
}

// ---------------------------------------------------------------------------

Outcome wavelet_identity() {
  std::mt19937_64 rng(101);
  double worst = 0, worst_energy = 0;
  std::size_t cases = 0;
  for (std::size_t size : {32u, 224u})
    for (std::size_t channels : {1u, 3u})
      for (std::size_t levels = 1; levels <= 5; ++levels) {
        const auto x = oracle::randn({1, channels, size, size}, rng);
        const auto pyr = decompose(x, levels);
        worst = std::max(worst, oracle::rel_error(reconstruct(pyr), x));
        const double e = squared_norm(x);
        worst_energy = std::max(worst_energy, std::abs(pyramid_energy(pyr) - e) / e);
        ++cases;
      }
  return {worst < 1e-10 && worst_energy < 1e-10,
          std::to_string(cases) + " cases, max rel error " + num(worst) + ", max energy error " + num(worst_energy)};
}

// Valid true convolution, kernel flipped against the input.
Tensor<double> conv_valid(const Tensor<double>& x, const Tensor<double>& k) {
  const std::size_t kh = k.dim(0), kw = k.dim(1);
  Tensor<double> y(Shape{x.dim(0), x.dim(1), x.dim(2) - kh + 1, x.dim(3) - kw + 1});
  for (std::size_t n = 0; n < y.dim(0); ++n)
    for (std::size_t c = 0; c < y.dim(1); ++c)
      for (std::size_t i = 0; i < y.dim(2); ++i)
        for (std::size_t j = 0; j < y.dim(3); ++j) {
          double s = 0;
          for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v) s += k[u * kw + v] * x.at(n, c, i + kh - 1 - u, j + kw - 1 - v);
          y.at(n, c, i, j) = s;
        }
  return y;
}

Outcome conv_pool_equivalence() {
  std::mt19937_64 rng(202);
  const Tensor<double> box(Shape{2, 2}, 0.25);
  const auto haar = FilterPair::haar();
  const Tensor<double> haar_low = outer(haar.low, haar.low);
  double worst_cp = 0, worst_red = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = oracle::randn({1, 2, 18, 18}, rng);
    const auto w = oracle::randn({3, 3}, rng);
    const auto composite = oracle::full_conv2d(w, box);
    const auto lhs = generalized_conv_pool(x, composite, 2);
    const auto rhs = oracle::average_pool_direct(conv_valid(x, w), 2);
    worst_cp = std::max(worst_cp, oracle::rel_error(lhs, rhs));

    const std::size_t levels = 1 + static_cast<std::size_t>(trial % 5);
    const auto z = oracle::randn({1, 2, 32, 32}, rng);
    const std::vector<Tensor<double>> kernels(levels, haar_low);
    const auto reduced = cnn_reduction(z, std::span<const Tensor<double>>(kernels));
    Tensor<double> pooled = z;
    for (std::size_t t = 0; t < levels; ++t) pooled = scale(oracle::average_pool_direct(pooled, 2), 2.0);
    worst_red = std::max(worst_red, oracle::rel_error(reduced, pooled));
  }
  return {worst_cp < 1e-10 && worst_red < 1e-10,
          "50 inputs, conv-pool rel error " + num(worst_cp) + ", cnn_reduction rel error " + num(worst_red)};
}

Outcome gradient_check() {
  const auto cfg = WaveletCnnConfig::from_config(Config::load(kSource / "configs" / "gradcheck.cfg"));
  auto cases = layer_gradchecks(7);
  auto model = model_gradchecks(cfg, 7);
  cases.insert(cases.end(), model.begin(), model.end());
  double worst = 0;
  std::string worst_name;
  std::size_t coords = 0;
  for (const auto& c : cases) {
    coords += c.result.coords_checked;
    if (c.result.tensor_rel_error >= worst) {
      worst = c.result.tensor_rel_error;
      worst_name = c.name;
    }
  }
  return {worst < 1e-5, std::to_string(cases.size()) + " tensors, " + std::to_string(coords) +
                            " coordinates, max rel error " + num(worst) + " (" + worst_name + ")"};
}

Outcome param_census() {
  std::size_t configs = 0, mismatches = 0;
  bool wavelet_free = true;
  for (const auto& e : fs::directory_iterator(kSource / "configs")) {
    if (e.path().extension() != ".cfg") continue;
    auto cfg = WaveletCnnConfig::from_config(Config::load(e.path()));
    for (bool inject : {true, false}) {
      cfg.inject_subbands = inject;
      const auto m = Model<float>::layout(cfg);
      mismatches += m.param_count() != oracle::census(cfg);
      for (const auto& l : m.breakdown())
        if (l.name.rfind("wavelet.", 0) == 0 && l.params != 0) wavelet_free = false;
      ++configs;
    }
  }
  const std::size_t total = Model<float>::layout(WaveletCnnConfig{}).param_count();
  return {configs >= 6 && mismatches == 0 && wavelet_free && total < 20'000'000,
          std::to_string(configs) + " configs, " + std::to_string(mismatches) + " census mismatches, default model " +
              std::to_string(total) + " params"};
}

Outcome synthetic_accuracy() {
  const fs::path dir = scratch("synth");
  if (cli({"synth", "--out", (dir / "corpus").string(), "--classes", "6", "--per-class", "40", "--size", "32",
           "--seed", "1"}) != 0)
    return {false, "synth failed"};
  if (cli({"ablate", "--config", (kSource / "configs" / "desk.cfg").string(), "--set",
           "data.manifest=" + (dir / "corpus" / "manifest.tsv").string(), "--set", "model.levels=3", "--out",
           (dir / "ablate").string()}) != 0)
    return {false, "ablate failed"};
  double wavelet = -1, plain = -1;
  for (const auto& line : section(slurp(dir / "ablate" / "ablate.tsv"), "results")) {
    const auto f = fields(line);
    if (f.size() < 3) continue;
    if (f[0] == "wavelet") wavelet = std::stod(f[2]);
    if (f[0] == "plain") plain = std::stod(f[2]);
  }
  fs::remove_all(dir);
  return {wavelet >= 90.0, "wavelet T=3 final test acc " + num(wavelet, "%.2f") + "%, plain CNN " +
                               num(plain, "%.2f") + "% (reported only)"};
}

Outcome levels_sweep() {
  const fs::path dir = scratch("sweep");
  if (cli({"synth", "--out", (dir / "corpus").string()}) != 0) return {false, "synth failed"};
  std::string out;
  if (cli({"levels-sweep", "--config", (kSource / "configs" / "desk.cfg").string(), "--set",
           "data.manifest=" + (dir / "corpus" / "manifest.tsv").string(), "--set", "data.name=synthetic", "--levels",
           "2,3,4", "--seeds", "3", "--out", (dir / "sweep").string()},
          &out) != 0)
    return {false, "levels-sweep failed"};
  const auto table = section(slurp(dir / "sweep" / "levels.tsv"), "table");
  std::size_t run_rows = 0;
  {
    std::istringstream is(slurp(dir / "sweep" / "runs.tsv"));
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) run_rows += !line.empty();
  }
  fs::remove_all(dir);
  bool ok = table.size() == 2 && table[0] == "dataset\t2-level\t3-level\t4-level" && run_rows == 9;
  std::string row = table.size() > 1 ? table[1] : "";
  if (ok) {
    const auto f = fields(row);
    const std::regex cell(R"(\d+\.\d ± \d+\.\d)");
    ok = f.size() == 4 && f[0] == "synthetic";
    for (std::size_t i = 1; ok && i < f.size(); ++i) ok = std::regex_match(f[i], cell);
  }
  for (auto& ch : row)
    if (ch == '\t') ch = ' ';
  return {ok, std::to_string(run_rows) + " runs; " + row};
}

Outcome multilabel() {
  std::mt19937_64 rng(303);
  const auto o = oracle::random_outcome(rng, 1000, 12);
  const auto got = multilabel_bundle(o), want = oracle::bundle_from_counts(oracle::count_confusions(o));
  const double dev = std::max({std::abs(got.cp - want.cp), std::abs(got.cr - want.cr), std::abs(got.cf1 - want.cf1),
                               std::abs(got.op - want.op), std::abs(got.orec - want.orec),
                               std::abs(got.of1 - want.of1)});
  const auto hand = multilabel_bundle(MultiLabelOutcome{{{0}, {}}, {{0}, {1}}, 3});
  const std::string row = multilabel_tsv_row(hand);
  const bool hand_ok = num(hand.op, "%.2f") == "100.00" && num(hand.orec, "%.2f") == "50.00" &&
                       num(hand.of1, "%.2f") == "66.67";
  return {dev < 1e-9 && hand_ok, "1000 outcomes, max deviation " + num(dev) + "; hand example O-P/O-R/O-F1 " +
                                     num(hand.op, "%.2f") + "/" + num(hand.orec, "%.2f") + "/" + num(hand.of1, "%.2f")};
}

Outcome deterministic_training() {
  const fs::path dir = scratch("determinism");
  if (cli({"synth", "--out", (dir / "corpus").string(), "--per-class", "12"}) != 0) return {false, "synth failed"};
  std::vector<std::string> args{"train", "--config", (kSource / "configs" / "desk.cfg").string(), "--set",
                                "data.manifest=" + (dir / "corpus" / "manifest.tsv").string(), "--set",
                                "train.dtype=f64", "--set", "train.epochs=3", "--seed", "17", "--threads", "1"};
  for (const char* run : {"a", "b"}) {
    auto a = args;
    a.insert(a.end(), {"--out", (dir / run).string()});
    if (cli(a) != 0) return {false, std::string("train run ") + run + " failed"};
  }
  bool same = true;
  std::size_t bytes = 0;
  for (const char* f : {"best.wcnn", "last.wcnn", "report.tsv"}) {
    const auto x = slurp(dir / "a" / f), y = slurp(dir / "b" / f);
    same = same && !x.empty() && x == y;
    bytes += x.size();
  }
  fs::remove_all(dir);
  return {same, std::string(same ? "identical" : "different") + " checkpoints and reports (" + std::to_string(bytes) +
                    " bytes compared)"};
}

template <class T>
bool wtns_roundtrip(const Tensor<T>& t, const fs::path& p) {
  write_wtns(p, t);
  const auto back = read_wtns<T>(p);
  return back.shape() == t.shape() && std::memcmp(back.raw(), t.raw(), t.numel() * sizeof(T)) == 0;
}

Outcome serialization() {
  const fs::path dir = scratch("serialization");
  std::mt19937_64 rng(404);
  bool wtns = true;
  auto x = oracle::randn({2, 3, 5, 7}, rng);
  x[0] = std::numeric_limits<double>::denorm_min();
  x[1] = -0.0;
  x[2] = std::numeric_limits<double>::max();
  wtns = wtns && wtns_roundtrip(x, dir / "a.wtns") && wtns_roundtrip(x.cast<float>(), dir / "b.wtns");
  wtns = wtns && wtns_roundtrip(oracle::randn({11}, rng), dir / "c.wtns");

  WaveletCnnConfig cfg = WaveletCnnConfig::from_config(Config::load(kSource / "configs" / "gradcheck.cfg"));
  auto model = Model<double>::build(cfg, 3);
  {
    Graph<double> g;
    model.forward(g, g.constant(oracle::randn({2, 3, 32, 32}, rng)), Mode::train);
  }
  save_checkpoint(model, dir / "m.wcnn");
  auto back = load_checkpoint<double>(dir / "m.wcnn");
  bool wcnn = true;
  auto sa = model.state(), sb = back.state();
  wcnn = sa.size() == sb.size();
  for (std::size_t i = 0; wcnn && i < sa.size(); ++i) wcnn = sa[i].name == sb[i].name && *sa[i].tensor == *sb[i].tensor;
  save_checkpoint(back, dir / "m2.wcnn");
  wcnn = wcnn && slurp(dir / "m.wcnn") == slurp(dir / "m2.wcnn");
  auto model32 = Model<float>::build(cfg, 4);
  save_checkpoint(model32, dir / "f.wcnn");
  auto back32 = load_checkpoint<float>(dir / "f.wcnn");
  save_checkpoint(back32, dir / "f2.wcnn");
  wcnn = wcnn && slurp(dir / "f.wcnn") == slurp(dir / "f2.wcnn");

  bool pnm = true;
  for (unsigned maxval : {255u, 65535u})
    for (std::size_t c : {1u, 3u}) {
      Tensor<double> img(Shape{c, 9, 6});
      std::uniform_int_distribution<unsigned> q(0, maxval);
      for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<double>(q(rng)) / maxval;
      const fs::path p = dir / ("img" + std::to_string(maxval) + (c == 1 ? ".pgm" : ".ppm"));
      write_pnm(p, img, maxval);
      const auto bytes = slurp(p);
      const auto loaded = load_pnm(p);
      pnm = pnm && loaded.shape() == img.shape() && max_abs_diff(loaded, img) == 0.0;
      write_pnm(p, loaded, maxval);
      pnm = pnm && slurp(p) == bytes;
    }
  fs::remove_all(dir);
  return {wtns && wcnn && pnm, std::string("WTNS1 ") + (wtns ? "exact" : "MISMATCH") + ", WCNN1 " +
                                   (wcnn ? "exact" : "MISMATCH") + ", PNM P5/P6 8/16-bit " +
                                   (pnm ? "exact" : "MISMATCH")};
}

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  set_num_threads(1);
  const std::vector<Criterion> criteria{
      {1, "wavelet reconstruction identity", 5, wavelet_identity},
      {2, "conv-pool equivalence", 5, conv_pool_equivalence},
      {3, "finite-difference gradient check", 600, gradient_check},
      {4, "parameter census", 1, param_census},
      {5, "synthetic texture accuracy", 900, synthetic_accuracy},
      {6, "levels sweep table", 3600, levels_sweep},
      {7, "multi-label metrics", 1, multilabel},
      {8, "deterministic training", 600, deterministic_training},
      {9, "serialization round trips", 60, serialization},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_seconds;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << c.id << "  " << c.name << ": " << o.detail << " ["
              << num(secs, "%.2f") << " s" << (in_time ? "" : ", over budget") << "]" << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
