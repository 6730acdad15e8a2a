#include "wcnn/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "wcnn/data.hpp"
#include "wcnn/gradcheck.hpp"
#include "wcnn/metrics.hpp"
#include "wcnn/model.hpp"
#include "wcnn/train.hpp"
#include "wcnn/wavelet.hpp"

namespace wcnn {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kInitStream = 0x1D17;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<long long> seed;
  int threads = 1;
  std::string out;
};

void add_run_options(CLI::App* cmd, RunOptions& o, bool with_out = true) {
  cmd->add_option("--config", o.config_path, "key = value config file");
  cmd->add_option("--set", o.sets, "override, key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "overrides the seed key");
  cmd->add_option("--threads", o.threads, "convolution worker threads; 1 is deterministic")->check(CLI::Range(1, 256));
  if (with_out) cmd->add_option("--out", o.out, "output directory");
}

Config load_run_config(const RunOptions& o) {
  Config cfg = o.config_path.empty() ? Config{} : Config::load(o.config_path);
  for (const auto& s : o.sets) cfg.apply_override(s);
  if (o.seed) cfg.set("seed", std::to_string(*o.seed));
  return cfg;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string thread_mode(int threads) {
  return std::to_string(threads) + (threads == 1 ? " (deterministic)" : " (nondeterministic)");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw DataError("failed writing " + path.string());
}

fs::path output_dir(const RunOptions& o, const std::string& fallback) {
  fs::path dir = o.out.empty() ? fs::path(fallback) : fs::path(o.out);
  fs::create_directories(dir);
  return dir;
}

// Everything a training-style command needs: the full run config, the
// parsed training settings, the loaded images and the requested splits.
struct RunSetup {
  Config config;
  TrainConfig train;
  Dataset data;
  std::vector<SplitIndices> splits;
  std::string dataset_name;
};

RunSetup prepare_run(const RunOptions& o, bool all_splits) {
  RunSetup r;
  r.config = load_run_config(o);
  r.train = TrainConfig::from_config(r.config);
  r.train.validate();
  r.config.merge(r.train.to_config());
  const std::string manifest_path = r.config.get_string("data.manifest");
  const LabelMode mode = r.train.model.head == HeadMode::softmax ? LabelMode::single : LabelMode::multi;
  const DatasetManifest manifest = load_manifest(manifest_path, mode);
  if (manifest.class_names.size() != r.train.model.num_classes) {
    throw ConfigError("manifest has " + std::to_string(manifest.class_names.size()) + " classes, model.num_classes is " +
                      std::to_string(r.train.model.num_classes));
  }
  const long long folds = r.config.get_int("data.folds", 5);
  if (folds < 2) throw ConfigError("data.folds must be at least 2");
  const auto policy = SplitPolicy::parse(r.config.get_string("data.policy", "split-column"),
                                         static_cast<std::size_t>(folds), r.train.seed);
  auto splits = make_splits(manifest, policy);
  if (r.config.has("data.split")) {
    const std::string want = r.config.get_string("data.split");
    auto it = std::find_if(splits.begin(), splits.end(), [&](const SplitIndices& s) { return s.name == want; });
    if (it == splits.end()) throw ConfigError("data.split '" + want + "' not produced by the split policy");
    r.splits = {*it};
  } else if (all_splits) {
    r.splits = std::move(splits);
  } else {
    r.splits = {splits.front()};
  }
  r.data = load_dataset(manifest, r.train.model.input_channels, r.train.gcn);
  r.dataset_name = r.config.get_string("data.name", fs::absolute(manifest_path).parent_path().filename().string());
  return r;
}

struct RunSummary {
  std::vector<EpochRecord> history;
  std::size_t params = 0;
  std::size_t best_epoch = 0;
  double best_accuracy = 0;
  double final_accuracy = 0;
};

template <class T>
RunSummary train_one(const TrainConfig& tc, bool plain, const RunSetup& setup, const SplitIndices& split,
                     std::ostream* log, const fs::path* checkpoint_dir, const Config& meta) {
  const std::uint64_t init_seed = derive_seed(tc.seed, kInitStream);
  Model<T> model = plain ? ablate_to_plain_cnn<T>(tc.model, init_seed) : Model<T>::build(tc.model, init_seed);
  TrainResult<T> res = train<T>(std::move(model), setup.data, split, tc, log);
  if (checkpoint_dir) {
    save_checkpoint(res.best, *checkpoint_dir / "best.wcnn", meta);
    save_checkpoint(res.last, *checkpoint_dir / "last.wcnn", meta);
  }
  return {res.history, res.last.param_count(), res.best_epoch, res.best_test_accuracy, res.final_test_accuracy};
}

RunSummary train_dispatch(const TrainConfig& tc, bool plain, const RunSetup& setup, const SplitIndices& split,
                          std::ostream* log, const fs::path* checkpoint_dir, const Config& meta) {
  return tc.dtype == "f64" ? train_one<double>(tc, plain, setup, split, log, checkpoint_dir, meta)
                           : train_one<float>(tc, plain, setup, split, log, checkpoint_dir, meta);
}

std::string report_preamble(const Config& cfg, int threads) {
  std::ostringstream os;
  os << "# config_hash " << cfg.hash() << "\n# threads " << thread_mode(threads) << "\n[config]\n"
     << cfg.canonical();
  return os.str();
}

int cmd_train(const RunOptions& o, std::ostream& out) {
  RunSetup setup = prepare_run(o, false);
  const fs::path dir = output_dir(o, "run");
  const SplitIndices& split = setup.splits.front();
  out << "# split " << split.name << ": " << split.train.size() << " train, " << split.test.size() << " test\n"
      << report_header() << '\n';
  const RunSummary s = train_dispatch(setup.train, false, setup, split, &out, &dir, setup.config);

  std::ostringstream rep;
  rep << report_preamble(setup.config, o.threads) << "[records]\n" << report_header() << '\n';
  for (const auto& r : s.history) rep << report_row(r) << '\n';
  rep << "[summary]\nsplit\t" << split.name << "\nparams\t" << s.params << "\nbest_epoch\t" << s.best_epoch
      << "\nbest_test_acc\t" << fmt("%.2f", s.best_accuracy) << "\nfinal_test_acc\t" << fmt("%.2f", s.final_accuracy)
      << '\n';
  write_text(dir / "report.tsv", rep.str());
  out << "final_test_acc\t" << fmt("%.2f", s.final_accuracy) << "\nbest_test_acc\t" << fmt("%.2f", s.best_accuracy)
      << " (epoch " << s.best_epoch << ")\ncheckpoint\t" << (dir / "best.wcnn").string() << '\n';
  return kExitOk;
}

int cmd_ablate(const RunOptions& o, std::ostream& out) {
  RunSetup setup = prepare_run(o, false);
  const fs::path dir = output_dir(o, "ablate");
  const SplitIndices& split = setup.splits.front();
  std::ostringstream table;
  table << "model\tparams\tfinal_test_acc\tbest_test_acc\tbest_epoch\n";
  for (bool plain : {false, true}) {
    const char* name = plain ? "plain" : "wavelet";
    out << "# training " << name << '\n';
    const RunSummary s = train_dispatch(setup.train, plain, setup, split, nullptr, nullptr, setup.config);
    table << name << '\t' << s.params << '\t' << fmt("%.2f", s.final_accuracy) << '\t' << fmt("%.2f", s.best_accuracy)
          << '\t' << s.best_epoch << '\n';
  }
  write_text(dir / "ablate.tsv", report_preamble(setup.config, o.threads) + "[results]\n" + table.str());
  out << table.str();
  return kExitOk;
}

int cmd_levels_sweep(const RunOptions& o, const std::string& levels_arg, std::size_t seeds, std::ostream& out) {
  if (seeds == 0) throw UsageError("--seeds must be positive");
  RunSetup setup = prepare_run(o, true);
  std::vector<std::size_t> levels;
  {
    Config tmp;
    tmp.set("levels", levels_arg);
    levels = tmp.get_size_list("levels", {});
  }
  if (levels.empty()) throw UsageError("--levels needs at least one value");
  for (std::size_t t : levels) {
    WaveletCnnConfig m = setup.train.model;
    m.levels = t;
    m.validate();
  }
  const fs::path dir = output_dir(o, "sweep");

  std::ostringstream runs;
  runs << "levels\tseed\tsplit\tfinal_test_acc\n";
  std::vector<SplitSummary> cells;
  for (std::size_t t : levels) {
    std::vector<double> accs;
    for (std::size_t k = 0; k < seeds; ++k) {
      TrainConfig tc = setup.train;
      tc.model.levels = t;
      tc.seed = setup.train.seed + k;
      for (const auto& split : setup.splits) {
        const RunSummary s = train_dispatch(tc, false, setup, split, nullptr, nullptr, setup.config);
        accs.push_back(s.final_accuracy);
        runs << t << '\t' << tc.seed << '\t' << split.name << '\t' << fmt("%.2f", s.final_accuracy) << '\n';
        out << "# levels " << t << " seed " << tc.seed << " split " << split.name << ": "
            << fmt("%.2f", s.final_accuracy) << '\n' << std::flush;
      }
    }
    cells.push_back(split_aggregate(accs));
  }

  std::ostringstream table;
  table << "dataset";
  for (std::size_t t : levels) table << '\t' << t << "-level";
  table << '\n' << setup.dataset_name;
  for (const auto& c : cells) table << '\t' << format_summary(c, 1);
  table << '\n';
  write_text(dir / "runs.tsv", runs.str());
  write_text(dir / "levels.tsv", report_preamble(setup.config, o.threads) + "[table]\n" + table.str());
  out << table.str();
  return kExitOk;
}

int cmd_param_count(const RunOptions& o, std::ostream& out) {
  const WaveletCnnConfig mc = WaveletCnnConfig::from_config(load_run_config(o));
  const Model<float> model = Model<float>::layout(mc);
  out << "layer\tkind\tshape\tparams\n";
  for (const auto& l : model.breakdown()) out << l.name << '\t' << l.kind << '\t' << l.shape << '\t' << l.params << '\n';
  out << "total\t\t\t" << model.param_count() << '\n';
  return kExitOk;
}

int cmd_gradcheck(const RunOptions& o, double tolerance, std::size_t stride, std::ostream& out) {
  Config cfg = load_run_config(o);
  // Small enough to check every coordinate in seconds.
  WaveletCnnConfig defaults;
  defaults.levels = 2;
  defaults.input_size = 32;
  defaults.input_channels = 3;
  defaults.channels = {8, 16};
  defaults.num_classes = 4;
  Config merged = defaults.to_config();
  merged.merge(cfg.subset("model."));
  const WaveletCnnConfig mc = WaveletCnnConfig::from_config(merged);
  const auto seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));

  auto cases = layer_gradchecks(seed);
  auto model_cases = model_gradchecks(mc, seed, 1e-5, 2, stride);
  cases.insert(cases.end(), model_cases.begin(), model_cases.end());
  bool ok = true;
  double worst = 0;
  out << "check\ttensor_rel_error\tcoord_rel_error\tcoords\tkinks_skipped\tresult\n";
  for (const auto& c : cases) {
    const bool pass = c.result.tensor_rel_error < tolerance && c.result.coords_checked > 0;
    ok = ok && pass;
    worst = std::max(worst, c.result.tensor_rel_error);
    out << c.name << '\t' << fmt("%.3e", c.result.tensor_rel_error) << '\t' << fmt("%.3e", c.result.max_rel_error)
        << '\t' << c.result.coords_checked << '\t' << c.result.kinks_skipped << '\t' << (pass ? "PASS" : "FAIL") << '\n';
  }
  out << "overall\t" << fmt("%.3e", worst) << "\t\t\t\t" << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? kExitOk : kExitNumerical;
}

template <class T>
void emit_band(const Tensor<T>& band, const fs::path& dir, const std::string& base, bool pgm,
               std::ostringstream& ranges) {
  // Bands leave the pyramid as [1, C, h, w]; files hold [C, h, w].
  const Tensor<T> chw = band.reshape({band.dim(1), band.dim(2), band.dim(3)});
  write_wtns(dir / (base + ".wtns"), chw);
  if (!pgm) return;
  const Tensor<double> d = chw.template cast<double>();
  const auto [lo, hi] = std::minmax_element(d.raw(), d.raw() + d.numel());
  const double a = *lo, b = *hi;
  Tensor<double> img(d.shape());
  for (std::size_t i = 0; i < d.numel(); ++i) img[i] = b > a ? (d[i] - a) / (b - a) : 0.5;
  const std::string file = base + (chw.dim(0) == 1 ? ".pgm" : ".ppm");
  write_pnm(dir / file, img);
  ranges << file << '\t' << fmt("%.17g", a) << '\t' << fmt("%.17g", b) << '\n';
}

template <class T>
int decompose_typed(const std::string& image_path, std::size_t levels, const fs::path& dir, bool pgm, bool verify,
                    std::ostream& out) {
  const Tensor<double> img = load_pnm(image_path);
  const Tensor<T> x = img.reshape({1, img.dim(0), img.dim(1), img.dim(2)}).template cast<T>();
  require_divisible(x.shape(), levels);
  const SubbandPyramid<T> pyr = decompose(x, levels);
  const std::string stem = fs::path(image_path).stem().string();
  std::ostringstream ranges;
  ranges << "file\tmin\tmax\n";
  std::size_t files = 0;
  for (std::size_t t = 1; t <= levels; ++t) {
    const auto& d = pyr.details[t - 1];
    const std::string prefix = stem + "_L" + std::to_string(t) + "_";
    emit_band(d.lh, dir, prefix + "LH", pgm, ranges);
    emit_band(d.hl, dir, prefix + "HL", pgm, ranges);
    emit_band(d.hh, dir, prefix + "HH", pgm, ranges);
    files += 3;
  }
  emit_band(pyr.low, dir, stem + "_L" + std::to_string(levels) + "_LL", pgm, ranges);
  ++files;
  if (pgm) write_text(dir / (stem + "_ranges.tsv"), ranges.str());
  out << "wrote " << files << " subband files to " << dir.string() << '\n';
  if (verify) {
    const double err = max_abs_diff(reconstruct(pyr), x);
    out << "max reconstruction error " << fmt("%.3e", err) << '\n';
  }
  return kExitOk;
}

std::string eval_metrics_tsv(const EvalResult& r, const std::string& split, std::size_t n) {
  std::ostringstream os;
  os << "split\tn\tloss\tacc";
  if (r.multilabel) os << '\t' << multilabel_tsv_header();
  os << '\n' << split << '\t' << n << '\t' << fmt("%.6f", r.loss) << '\t' << fmt("%.2f", r.accuracy);
  if (r.multilabel) os << '\t' << multilabel_tsv_row(*r.multilabel);
  os << '\n';
  return os.str();
}

template <class T>
int eval_typed(const std::string& checkpoint, const std::string& manifest_path, const std::string& policy_name,
               const std::string& split_name, const std::string& out_file, std::ostream& out) {
  Config meta;
  Model<T> model = load_checkpoint<T>(checkpoint, &meta);
  const TrainConfig tc = TrainConfig::from_config(meta);
  const auto& mc = model.config();
  const DatasetManifest manifest =
      load_manifest(manifest_path, mc.head == HeadMode::softmax ? LabelMode::single : LabelMode::multi);
  if (manifest.class_names.size() != mc.num_classes) {
    throw ShapeError("manifest has " + std::to_string(manifest.class_names.size()) + " classes, checkpoint expects " +
                     std::to_string(mc.num_classes));
  }
  const Dataset data = load_dataset(manifest, mc.input_channels, tc.gcn);
  std::vector<std::size_t> indices;
  std::string label = split_name;
  if (split_name == "all") {
    for (std::size_t i = 0; i < data.samples.size(); ++i) indices.push_back(i);
  } else {
    const auto splits = make_splits(manifest, SplitPolicy::parse(policy_name, 5, tc.seed));
    auto it = split_name.empty() ? splits.begin()
                                 : std::find_if(splits.begin(), splits.end(),
                                                [&](const SplitIndices& s) { return s.name == split_name; });
    if (it == splits.end()) throw UsageError("split '" + split_name + "' not found");
    indices = it->test;
    label = it->name;
  }
  const EvalResult r = evaluate(model, data, indices, tc.augment);
  const std::string tsv = eval_metrics_tsv(r, label, indices.size());
  out << tsv;
  if (!out_file.empty()) write_text(out_file, tsv);
  return kExitOk;
}

int dispatch_errors(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::domain_error& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "invalid input: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Wavelet CNN toolkit", "wcnn"};
  app.require_subcommand(1);

  RunOptions run;

  auto* decompose_cmd = app.add_subcommand("decompose", "multiresolution decomposition of a PGM/PPM image");
  std::string image;
  std::size_t levels = 1;
  std::string dtype = "f32";
  bool pgm = false, verify = false;
  decompose_cmd->add_option("image", image, "input P5/P6 image")->required();
  decompose_cmd->add_option("--levels", levels, "decomposition levels")->check(CLI::Range(1, 5));
  decompose_cmd->add_option("--dtype", dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  decompose_cmd->add_flag("--pgm", pgm, "also write min-max scaled PGM/PPM previews");
  decompose_cmd->add_flag("--verify", verify, "reconstruct and report the maximum error")->group("");
  decompose_cmd->add_option("--out", run.out, "output directory");

  auto* synth_cmd = app.add_subcommand("synth", "write the synthetic texture corpus");
  SynthSpec spec;
  synth_cmd->add_option("--classes", spec.classes);
  synth_cmd->add_option("--per-class", spec.per_class);
  synth_cmd->add_option("--size", spec.size);
  synth_cmd->add_option("--seed", spec.seed);
  synth_cmd->add_option("--groups", spec.groups);
  synth_cmd->add_option("--test-fraction", spec.test_fraction);
  synth_cmd->add_option("--out", run.out, "output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train a model; writes best.wcnn, last.wcnn and report.tsv");
  add_run_options(train_cmd, run);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest split");
  std::string checkpoint, manifest, policy = "split-column", split, metrics_out;
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--manifest", manifest)->required();
  eval_cmd->add_option("--policy", policy, "split-column, leave-one-group-in or kfold");
  eval_cmd->add_option("--split", split, "split name, or 'all' for every image");
  eval_cmd->add_option("--out", metrics_out, "metrics TSV file");
  eval_cmd->add_option("--threads", run.threads)->check(CLI::Range(1, 256));

  auto* sweep_cmd = app.add_subcommand("levels-sweep", "accuracy versus decomposition levels over seeds and splits");
  add_run_options(sweep_cmd, run);
  std::string levels_list = "2,3,4";
  std::size_t seeds = 3;
  sweep_cmd->add_option("--levels", levels_list, "comma-separated levels");
  sweep_cmd->add_option("--seeds", seeds, "seeds per level (seed, seed+1, ...)");

  auto* params_cmd = app.add_subcommand("param-count", "per-layer trainable parameter table");
  add_run_options(params_cmd, run, false);

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every op and a small model");
  add_run_options(grad_cmd, run, false);
  double tolerance = 1e-5;
  std::size_t stride = 1;
  grad_cmd->add_option("--tolerance", tolerance);
  grad_cmd->add_option("--stride", stride, "check every n-th coordinate of each model tensor")->check(CLI::PositiveNumber);

  auto* ablate_cmd = app.add_subcommand("ablate", "train the wavelet model and its plain-CNN ablation side by side");
  add_run_options(ablate_cmd, run);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  set_num_threads(run.threads);
  return dispatch_errors(
      [&]() -> int {
        if (*decompose_cmd) {
          const fs::path dir = output_dir(run, ".");
          return dtype == "f64" ? decompose_typed<double>(image, levels, dir, pgm, verify, out)
                                : decompose_typed<float>(image, levels, dir, pgm, verify, out);
        }
        if (*synth_cmd) {
          const DatasetManifest m = synth_textures(run.out, spec);
          out << "wrote " << m.size() << " images in " << m.class_names.size() << " classes to " << run.out << '\n';
          return kExitOk;
        }
        if (*train_cmd) return cmd_train(run, out);
        if (*eval_cmd) {
          return checkpoint_dtype(checkpoint) == "f64"
                     ? eval_typed<double>(checkpoint, manifest, policy, split, metrics_out, out)
                     : eval_typed<float>(checkpoint, manifest, policy, split, metrics_out, out);
        }
        if (*sweep_cmd) return cmd_levels_sweep(run, levels_list, seeds, out);
        if (*params_cmd) return cmd_param_count(run, out);
        if (*grad_cmd) return cmd_gradcheck(run, tolerance, stride, out);
        if (*ablate_cmd) return cmd_ablate(run, out);
        throw UsageError("no subcommand");
      },
      err);
}

}  // namespace wcnn
