#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "wcnn/cli.hpp"
#include "wcnn/data.hpp"
#include "wcnn/tensor.hpp"

using namespace wcnn;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("wcnn_cli_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"decompose"}).code == kExitUsage);
  CHECK(cli({"decompose", "x.pgm", "--levels", "6"}).code == kExitUsage);
  CHECK(cli({"param-count", "--set", "model.levels=9"}).code == kExitUsage);
  CHECK(cli({"param-count", "--config", "/nonexistent.cfg"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("decompose writes every subband of a 5-level pyramid") {
  TempDir d("decompose");
  Tensor<double> img(Shape{3, 224, 224});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<double>((i * 7919) % 256) / 255.0;
  write_pnm(d.path / "rgb.ppm", img);
  const auto r = cli({"decompose", (d.path / "rgb.ppm").string(), "--levels", "5", "--dtype", "f64", "--verify",
                      "--pgm", "--out", (d.path / "bands").string()});
  REQUIRE(r.code == kExitOk);
  std::size_t wtns = 0, previews = 0;
  for (const auto& e : fs::directory_iterator(d.path / "bands")) {
    wtns += e.path().extension() == ".wtns";
    previews += e.path().extension() == ".ppm";
  }
  CHECK(wtns == 16);
  CHECK(previews == 16);
  CHECK(fs::exists(d.path / "bands" / "rgb_ranges.tsv"));
  const auto ll = read_wtns<double>(d.path / "bands" / "rgb_L5_LL.wtns");
  CHECK(ll.shape() == Shape{3, 7, 7});
  CHECK(read_wtns<double>(d.path / "bands" / "rgb_L1_HH.wtns").shape() == Shape{3, 112, 112});

  const auto pos = r.out.find("max reconstruction error ");
  REQUIRE(pos != std::string::npos);
  CHECK(std::stod(r.out.substr(pos + 25)) < 1e-10);

  // 224 is not divisible by 2^6, and the CLI refuses levels beyond 5 anyway;
  // 100 stops at two levels.
  write_pnm(d.path / "odd.pgm", Tensor<double>(Shape{1, 100, 100}, 0.5));
  const auto bad = cli({"decompose", (d.path / "odd.pgm").string(), "--levels", "3", "--out", d.path.string()});
  CHECK(bad.code == kExitUsage);
  CHECK(bad.err.find("divisible") != std::string::npos);
}

TEST_CASE("param-count prints a table that sums to the total") {
  const auto r = cli({"param-count"});
  REQUIRE(r.code == kExitOk);
  std::istringstream is(r.out);
  std::string line;
  std::getline(is, line);
  CHECK(line == "layer\tkind\tshape\tparams");
  std::size_t sum = 0, total = 0;
  while (std::getline(is, line)) {
    const auto n = std::stoull(line.substr(line.rfind('\t') + 1));
    if (line.rfind("total", 0) == 0) total = n;
    else sum += n;
  }
  CHECK(total == sum);
  CHECK(total < 20'000'000);
}

TEST_CASE("synth, train and eval on a small corpus") {
  TempDir d("train");
  const std::string corpus = (d.path / "corpus").string();
  REQUIRE(cli({"synth", "--out", corpus, "--per-class", "4", "--classes", "3", "--size", "16"}).code == kExitOk);
  const std::vector<std::string> common{"--set", "data.manifest=" + corpus + "/manifest.tsv", "--set", "model.levels=2",
                                        "--set", "model.input_size=16", "--set", "model.input_channels=1", "--set",
                                        "model.channels=4,8", "--set", "model.num_classes=3", "--set", "train.epochs=2",
                                        "--set", "train.batch_size=4", "--set", "train.resize=18", "--set",
                                        "train.crop=16"};
  auto args = std::vector<std::string>{"train"};
  args.insert(args.end(), common.begin(), common.end());
  args.insert(args.end(), {"--out", (d.path / "run").string()});
  const auto r = cli(args);
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(fs::exists(d.path / "run" / "best.wcnn"));
  CHECK(fs::exists(d.path / "run" / "last.wcnn"));
  std::ifstream rep(d.path / "run" / "report.tsv");
  std::string text((std::istreambuf_iterator<char>(rep)), {});
  CHECK(text.find("# config_hash ") == 0);
  CHECK(text.find("[records]\nepoch\tsplit\tloss\tacc\n") != std::string::npos);
  CHECK(text.find("final_test_acc\t") != std::string::npos);

  const auto e = cli({"eval", "--checkpoint", (d.path / "run" / "last.wcnn").string(), "--manifest",
                      corpus + "/manifest.tsv", "--split", "all"});
  REQUIRE_MESSAGE(e.code == kExitOk, e.err);
  CHECK(e.out.rfind("split\tn\tloss\tacc\nall\t12\t", 0) == 0);

  auto wrong = common;
  wrong[9] = "model.num_classes=4";
  wrong.insert(wrong.begin(), "train");
  CHECK(cli(wrong).code == kExitUsage);
}
