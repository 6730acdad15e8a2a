#include "wcnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>

namespace wcnn {

namespace fs = std::filesystem;

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string pnm_token(std::istream& is, const fs::path& path) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      if (!tok.empty()) break;
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw DataError(path.string() + ": truncated PNM header");
  return tok;
}

std::size_t pnm_number(std::istream& is, const fs::path& path, const char* what) {
  const std::string tok = pnm_token(is, path);
  if (tok.find_first_not_of("0123456789") != std::string::npos || tok.size() > 9) {
    throw DataError(path.string() + ": bad PNM " + what + " '" + tok + "'");
  }
  return std::stoul(tok);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Tensor<double> load_pnm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  const std::string magic = pnm_token(is, path);
  std::size_t channels;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw DataError(path.string() + ": unsupported PNM magic '" + magic + "' (need P5 or P6)");
  }
  const std::size_t w = pnm_number(is, path, "width");
  const std::size_t h = pnm_number(is, path, "height");
  const std::size_t maxval = pnm_number(is, path, "maxval");
  if (w == 0 || h == 0) throw DataError(path.string() + ": empty image");
  if (maxval == 0 || maxval > 65535) throw DataError(path.string() + ": maxval " + std::to_string(maxval) + " out of range");
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;

  const std::size_t count = channels * h * w;
  std::vector<unsigned char> raw(count * bytes_per);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw DataError(path.string() + ": truncated pixel data");

  Tensor<double> out = Tensor<double>::zeros({channels, h, w});
  double* o = out.raw();
  const double scale = static_cast<double>(maxval);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t v = bytes_per == 2 ? (std::size_t{raw[2 * i]} << 8) | raw[2 * i + 1] : raw[i];
    if (v > maxval) throw DataError(path.string() + ": sample exceeds maxval");
    // Interleaved RGB on disk, planar in memory.
    const std::size_t c = i % channels, p = i / channels;
    o[c * h * w + p] = static_cast<double>(v) / scale;
  }
  return out;
}

void write_pnm(const fs::path& path, const Tensor<double>& image, unsigned maxval) {
  if (image.ndim() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw ShapeError("write_pnm: expected [1|3, H, W], got " + shape_str(image.shape()));
  }
  if (maxval == 0 || maxval > 65535) throw DataError("write_pnm: maxval out of range");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << (C == 1 ? "P5" : "P6") << '\n' << W << ' ' << H << '\n' << maxval << '\n';
  std::vector<unsigned char> buf;
  buf.reserve(C * H * W * 2);
  const double* x = image.raw();
  for (std::size_t p = 0; p < H * W; ++p) {
    for (std::size_t c = 0; c < C; ++c) {
      const double v = std::clamp(x[c * H * W + p], 0.0, 1.0);
      const auto q = static_cast<unsigned>(std::lround(v * maxval));
      if (maxval > 255) buf.push_back(static_cast<unsigned char>(q >> 8));
      buf.push_back(static_cast<unsigned char>(q & 0xff));
    }
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw DataError("failed writing " + path.string());
}

DatasetManifest parse_manifest(const std::string& text, const fs::path& root, LabelMode mode, bool check_files) {
  DatasetManifest m;
  m.root = root;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  bool have_header = false;
  std::optional<std::vector<std::string>> fixed_classes;
  std::set<std::string> seen_paths;

  auto fail = [&](const std::string& msg) { throw DataError("manifest line " + std::to_string(lineno) + ": " + msg); };

  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (line.rfind("#classes", 0) == 0) {
      if (have_header) fail("#classes must precede the header");
      const auto parts = split_on(line, '\t');
      if (parts.size() != 2) fail("expected '#classes<TAB>name,name,...'");
      std::vector<std::string> names;
      for (const auto& n : split_on(parts[1], ',')) {
        if (trim(n).empty()) fail("empty class name");
        names.push_back(trim(n));
      }
      std::vector<std::string> sorted = names;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) fail("duplicate class name");
      fixed_classes = names;
      continue;
    }
    if (line[0] == '#') continue;
    const auto cols = split_on(line, '\t');
    if (!have_header) {
      if (cols.size() < 4 || cols[0] != "path" || cols[1] != "labels" || cols[2] != "group" || cols[3] != "split") {
        fail("expected header 'path\\tlabels\\tgroup\\tsplit'");
      }
      have_header = true;
      continue;
    }
    if (cols.size() != 4) fail("expected 4 tab-separated columns, got " + std::to_string(cols.size()));
    ManifestRecord r;
    r.line = lineno;
    r.path = trim(cols[0]);
    r.group = trim(cols[2]);
    r.split = trim(cols[3]);
    if (r.path.empty()) fail("empty path");
    if (!seen_paths.insert(r.path).second) fail("duplicate path '" + r.path + "'");
    if (!trim(cols[1]).empty()) {
      for (const auto& l : split_on(cols[1], ',')) {
        if (trim(l).empty()) fail("empty label");
        r.labels.push_back(trim(l));
      }
    }
    // An empty label set is a negative-only example, meaningful only for multi-label heads.
    if (r.labels.empty() && mode == LabelMode::single) fail("empty labels field");
    if (mode == LabelMode::single && r.labels.size() != 1) fail("single-label mode but " + std::to_string(r.labels.size()) + " labels given");
    if (check_files && !fs::exists(root / r.path)) fail("missing file '" + (root / r.path).string() + "'");
    m.records.push_back(std::move(r));
  }
  if (!have_header) throw DataError("manifest: missing header");

  if (fixed_classes) {
    m.class_names = *fixed_classes;
  } else {
    std::set<std::string> names;
    for (const auto& r : m.records) names.insert(r.labels.begin(), r.labels.end());
    m.class_names.assign(names.begin(), names.end());
  }
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < m.class_names.size(); ++i) index[m.class_names[i]] = static_cast<int>(i);
  for (auto& r : m.records) {
    for (const auto& l : r.labels) {
      auto it = index.find(l);
      if (it == index.end()) {
        lineno = r.line;
        fail("unknown class '" + l + "'");
      }
      r.label_ids.push_back(it->second);
    }
    std::sort(r.label_ids.begin(), r.label_ids.end());
    if (std::adjacent_find(r.label_ids.begin(), r.label_ids.end()) != r.label_ids.end()) {
      lineno = r.line;
      fail("repeated label");
    }
  }
  return m;
}

DatasetManifest load_manifest(const fs::path& path, LabelMode mode, bool check_files) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path.string());
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return parse_manifest(text, path.parent_path(), mode, check_files);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << "#classes\t";
  for (std::size_t i = 0; i < m.class_names.size(); ++i) os << (i ? "," : "") << m.class_names[i];
  os << "\npath\tlabels\tgroup\tsplit\n";
  for (const auto& r : m.records) {
    os << r.path << '\t';
    for (std::size_t i = 0; i < r.labels.size(); ++i) os << (i ? "," : "") << r.labels[i];
    os << '\t' << r.group << '\t' << r.split << '\n';
  }
  if (!os) throw DataError("failed writing " + path.string());
}

SplitPolicy SplitPolicy::parse(const std::string& name, std::size_t folds, std::uint64_t seed) {
  SplitPolicy p;
  p.folds = folds;
  p.seed = seed;
  if (name == "split-column") {
    p.kind = Kind::by_split_column;
  } else if (name == "leave-one-group-in") {
    p.kind = Kind::leave_one_group_in;
  } else if (name == "kfold") {
    p.kind = Kind::random_kfold;
  } else {
    throw DataError("unknown split policy '" + name + "' (split-column, leave-one-group-in, kfold)");
  }
  return p;
}

std::vector<SplitIndices> make_splits(const DatasetManifest& m, const SplitPolicy& policy) {
  std::vector<SplitIndices> out;
  switch (policy.kind) {
    case SplitPolicy::Kind::by_split_column: {
      std::map<std::string, SplitIndices> by_id;
      for (std::size_t i = 0; i < m.size(); ++i) {
        const auto& r = m.records[i];
        if (r.split.empty()) throw DataError("manifest line " + std::to_string(r.line) + ": split field missing");
        for (const auto& entry : split_on(r.split, ',')) {
          const std::string e = trim(entry);
          std::string id = "1", role = e;
          if (const auto eq = e.find('='); eq != std::string::npos) {
            id = trim(e.substr(0, eq));
            role = trim(e.substr(eq + 1));
          }
          auto& s = by_id[id];
          s.name = id;
          if (role == "train") {
            s.train.push_back(i);
          } else if (role == "test") {
            s.test.push_back(i);
          } else if (role != "val") {
            throw DataError("manifest line " + std::to_string(r.line) + ": unknown split role '" + role + "'");
          }
        }
      }
      for (auto& [id, s] : by_id) out.push_back(std::move(s));
      break;
    }
    case SplitPolicy::Kind::leave_one_group_in: {
      std::set<std::string> groups;
      for (const auto& r : m.records) {
        if (r.group.empty()) throw DataError("manifest line " + std::to_string(r.line) + ": group field missing");
        groups.insert(r.group);
      }
      if (groups.size() < 2) throw DataError("leave-one-group-in needs at least two groups");
      for (const auto& g : groups) {
        SplitIndices s;
        s.name = g;
        for (std::size_t i = 0; i < m.size(); ++i) (m.records[i].group == g ? s.train : s.test).push_back(i);
        out.push_back(std::move(s));
      }
      break;
    }
    case SplitPolicy::Kind::random_kfold: {
      if (policy.folds < 2 || policy.folds > m.size()) {
        throw DataError("kfold: folds must lie in [2, " + std::to_string(m.size()) + "]");
      }
      std::vector<std::size_t> order(m.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::mt19937_64 rng(policy.seed);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t k = 0; k < policy.folds; ++k) {
        SplitIndices s;
        s.name = std::to_string(k + 1);
        for (std::size_t j = 0; j < order.size(); ++j) (j % policy.folds == k ? s.test : s.train).push_back(order[j]);
        std::sort(s.train.begin(), s.train.end());
        std::sort(s.test.begin(), s.test.end());
        out.push_back(std::move(s));
      }
      break;
    }
  }
  for (const auto& s : out) {
    if (s.train.empty() || s.test.empty()) throw DataError("split '" + s.name + "' has an empty train or test side");
  }
  return out;
}

namespace {

enum class Pattern { grating, checker, noise };

struct ClassRecipe {
  std::string name;
  Pattern pattern;
  double scale;  // grating/checker period in pixels; noise: inner blur radius
};

// Classes differ in spectral scale and orientation. Gratings run close to
// horizontal or vertical, checkerboards are products of two such gratings
// and noise is isotropic band-pass; every class is closed under horizontal
// flips. Fine, coarse and wide variants put their energy in the first,
// second and third detail levels.
const std::vector<ClassRecipe>& recipes() {
  static const std::vector<ClassRecipe> r = {
      {"grating_fine", Pattern::grating, 8.0 / 3.0}, {"grating_coarse", Pattern::grating, 16.0 / 3.0},
      {"checker_fine", Pattern::checker, 8.0 / 3.0}, {"checker_coarse", Pattern::checker, 16.0 / 3.0},
      {"noise_fine", Pattern::noise, 0.0},           {"noise_coarse", Pattern::noise, 1.0},
      {"grating_wide", Pattern::grating, 32.0 / 3.0}, {"checker_wide", Pattern::checker, 32.0 / 3.0},
      {"noise_wide", Pattern::noise, 2.0},
  };
  return r;
}

// Periodic box blur; radius 0 is the identity.
std::vector<double> box_blur(const std::vector<double>& img, std::size_t n, int radius) {
  if (radius == 0) return img;
  std::vector<double> tmp(img.size()), out(img.size());
  const auto idx = [n](long y, long x) {
    const long m = static_cast<long>(n);
    return static_cast<std::size_t>(((y % m + m) % m) * m + (x % m + m) % m);
  };
  const double norm = 1.0 / (2 * radius + 1);
  for (long y = 0; y < static_cast<long>(n); ++y)
    for (long x = 0; x < static_cast<long>(n); ++x) {
      double s = 0;
      for (int d = -radius; d <= radius; ++d) s += img[idx(y, x + d)];
      tmp[idx(y, x)] = s * norm;
    }
  for (long y = 0; y < static_cast<long>(n); ++y)
    for (long x = 0; x < static_cast<long>(n); ++x) {
      double s = 0;
      for (int d = -radius; d <= radius; ++d) s += tmp[idx(y + d, x)];
      out[idx(y, x)] = s * norm;
    }
  return out;
}

}  // namespace

std::vector<std::string> synth_class_names(std::size_t classes) {
  const auto& r = recipes();
  if (classes < 2 || classes > r.size()) {
    throw DataError("synth: classes must lie in [2, " + std::to_string(r.size()) + "]");
  }
  std::vector<std::string> names;
  for (std::size_t i = 0; i < classes; ++i) names.push_back(r[i].name);
  return names;
}

Tensor<double> synth_texture(std::size_t cls, std::size_t size, std::mt19937_64& rng) {
  const auto& r = recipes();
  if (cls >= r.size()) throw DataError("synth: class index out of range");
  if (size < 8) throw DataError("synth: size must be at least 8");
  const ClassRecipe& rc = r[cls];
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double two_pi = 2 * std::numbers::pi;

  const double period = rc.scale * (0.9 + 0.2 * unit(rng));
  const double jitter = std::numbers::pi / 12 * (2 * unit(rng) - 1);
  const double theta = (unit(rng) < 0.5 ? 0.0 : std::numbers::pi / 2) + jitter;
  const double phase = two_pi * unit(rng), phase2 = two_pi * unit(rng);
  const double amplitude = 0.12 + 0.08 * unit(rng);
  const double mean = 0.35 + 0.3 * unit(rng);
  const double noise = 0.02 + 0.02 * unit(rng);

  const std::size_t n = size;
  std::vector<double> pattern(n * n);
  if (rc.pattern == Pattern::noise) {
    std::vector<double> white(n * n);
    for (auto& v : white) v = gauss(rng);
    const int inner = static_cast<int>(rc.scale);
    const auto a = box_blur(white, n, inner);
    const auto b = box_blur(white, n, 2 * inner + 1);
    for (std::size_t i = 0; i < n * n; ++i) pattern[i] = a[i] - b[i];
  } else {
    const double w = two_pi / period, c = std::cos(theta), s = std::sin(theta);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double u = c * static_cast<double>(x) + s * static_cast<double>(y);
        const double v = -s * static_cast<double>(x) + c * static_cast<double>(y);
        pattern[y * n + x] = std::sin(w * u + phase) * (rc.pattern == Pattern::checker ? std::sin(w * v + phase2) : 1.0);
      }
    }
  }
  // Unit RMS so every class has the same expected contrast.
  double ss = 0;
  for (double v : pattern) ss += v * v;
  const double rms = std::max(std::sqrt(ss / static_cast<double>(n * n)), 1e-12);

  Tensor<double> img = Tensor<double>::zeros({1, n, n});
  double* o = img.raw();
  for (std::size_t i = 0; i < n * n; ++i) {
    o[i] = std::clamp(mean + amplitude * pattern[i] / rms + noise * gauss(rng), 0.0, 1.0);
  }
  return img;
}

DatasetManifest synth_textures(const fs::path& out_dir, const SynthSpec& spec) {
  const auto names = synth_class_names(spec.classes);
  if (spec.per_class < 2) throw DataError("synth: per_class must be at least 2");
  if (spec.groups == 0) throw DataError("synth: groups must be positive");
  if (!(spec.test_fraction > 0 && spec.test_fraction < 1)) throw DataError("synth: test_fraction must lie in (0, 1)");
  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(static_cast<double>(spec.per_class) * (1 - spec.test_fraction))), 1,
      spec.per_class - 1);

  DatasetManifest m;
  m.root = out_dir;
  m.class_names = names;
  fs::create_directories(out_dir);
  for (std::size_t c = 0; c < names.size(); ++c) {
    fs::create_directories(out_dir / names[c]);
    // One stream per class keeps a class's images stable when the class count changes.
    std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + c + 1);
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      char file[64];
      std::snprintf(file, sizeof file, "%s_%03zu.pgm", names[c].c_str(), i);
      ManifestRecord r;
      r.path = names[c] + "/" + file;
      r.labels = {names[c]};
      r.label_ids = {static_cast<int>(c)};
      r.group = "g" + std::to_string(i % spec.groups);
      r.split = i < n_train ? "train" : "test";
      write_pnm(out_dir / r.path, synth_texture(c, spec.size, rng));
      m.records.push_back(std::move(r));
    }
  }
  write_manifest(out_dir / "manifest.tsv", m);
  return m;
}

}  // namespace wcnn
