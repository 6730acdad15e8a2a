// WCNN1 checkpoint layout:
//
//   WCNN1
//   version 1
//   dtype f64
//   config <line count>
//   <canonical key = value lines>
//   tensors <count>
//   <name> <param|buffer> <offset> <ndim> <d0> ...
//   payload <scalar count>
//   <little-endian scalars, tensors back to back>

#include <fstream>
#include <map>
#include <sstream>

#include "wcnn/model.hpp"

namespace wcnn {

namespace {

constexpr int kVersion = 1;

std::string expect_line(std::istream& is, const std::string& what) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("checkpoint truncated before " + what);
  return line;
}

std::size_t keyed_count(const std::string& line, const std::string& key) {
  std::istringstream ls(line);
  std::string k;
  long long n = -1;
  if (!(ls >> k >> n) || k != key || n < 0) throw FormatError("checkpoint: expected '" + key + " <n>', got '" + line + "'");
  return static_cast<std::size_t>(n);
}

struct Header {
  std::string dtype;
  Config config;
  struct Entry {
    std::string name;
    bool trainable;
    std::size_t offset;
    Shape shape;
  };
  std::vector<Entry> entries;
  std::size_t payload = 0;
};

Header read_header(std::istream& is) {
  Header h;
  if (expect_line(is, "magic") != "WCNN1") throw FormatError("not a WCNN1 checkpoint");
  const std::size_t version = keyed_count(expect_line(is, "version"), "version");
  if (version != kVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kVersion) + ")");
  }
  {
    std::istringstream ls(expect_line(is, "dtype"));
    std::string k;
    if (!(ls >> k >> h.dtype) || k != "dtype" || (h.dtype != "f32" && h.dtype != "f64")) {
      throw FormatError("checkpoint: bad dtype line");
    }
  }
  const std::size_t cfg_lines = keyed_count(expect_line(is, "config"), "config");
  std::string text;
  for (std::size_t i = 0; i < cfg_lines; ++i) text += expect_line(is, "config block") + "\n";
  try {
    h.config = Config::parse(text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  const std::size_t count = keyed_count(expect_line(is, "tensors"), "tensors");
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream ls(expect_line(is, "tensor manifest"));
    Header::Entry e;
    std::string kind;
    std::size_t ndim = 0;
    if (!(ls >> e.name >> kind >> e.offset >> ndim) || (kind != "param" && kind != "buffer") || ndim > 8) {
      throw FormatError("checkpoint: malformed manifest entry " + std::to_string(i));
    }
    e.trainable = kind == "param";
    e.shape.resize(ndim);
    for (auto& d : e.shape)
      if (!(ls >> d)) throw FormatError("checkpoint: manifest entry '" + e.name + "' truncated");
    h.entries.push_back(std::move(e));
  }
  h.payload = keyed_count(expect_line(is, "payload"), "payload");
  return h;
}

}  // namespace

std::string checkpoint_dtype(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_header(is).dtype;
}

template <class T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path, const Config& meta) {
  Config cfg = meta;
  cfg.merge(model.config().to_config());
  const std::string canonical = cfg.canonical();
  std::size_t cfg_lines = 0;
  for (char c : canonical) cfg_lines += c == '\n';

  std::ostringstream os(std::ios::binary);
  os << "WCNN1\nversion " << kVersion << "\ndtype " << DType<T>::name << "\nconfig " << cfg_lines << "\n"
     << canonical;
  auto entries = model.state();
  os << "tensors " << entries.size() << "\n";
  std::size_t offset = 0;
  for (const auto& e : entries) {
    os << e.name << ' ' << (e.trainable ? "param" : "buffer") << ' ' << offset << ' ' << e.tensor->ndim();
    for (std::size_t d : e.tensor->shape()) os << ' ' << d;
    os << '\n';
    offset += e.tensor->numel();
  }
  os << "payload " << offset << "\n";
  for (const auto& e : entries) write_le_scalars<T>(os, e.tensor->data(), DType<T>::name);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  const std::string bytes = os.str();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path, Config* meta) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  Header h = read_header(is);

  WaveletCnnConfig mc;
  try {
    mc = WaveletCnnConfig::from_config(h.config);
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  Model<T> model = Model<T>::build(mc, 0);
  auto entries = model.state();
  if (entries.size() != h.entries.size()) {
    throw FormatError("checkpoint holds " + std::to_string(h.entries.size()) + " tensors, model needs " +
                      std::to_string(entries.size()));
  }
  std::map<std::string, const Header::Entry*> by_name;
  std::size_t expected = 0;
  for (const auto& e : h.entries) {
    if (e.offset != expected) throw FormatError("checkpoint: tensor '" + e.name + "' has unexpected offset");
    expected += shape_numel(e.shape);
    by_name[e.name] = &e;
  }
  if (expected != h.payload) throw FormatError("checkpoint: payload size disagrees with manifest");

  std::vector<T> payload(h.payload);
  read_le_scalars<T>(is, h.dtype, std::span<T>(payload));
  char extra;
  if (is.read(&extra, 1)) throw FormatError("checkpoint: trailing bytes after payload");

  for (auto& e : entries) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + e.name + "'");
    if (it->second->shape != e.tensor->shape()) {
      throw FormatError("checkpoint tensor '" + e.name + "' has shape " + shape_str(it->second->shape) +
                        ", model expects " + shape_str(e.tensor->shape()));
    }
    std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(it->second->offset), e.tensor->numel(),
                e.tensor->raw());
  }
  if (meta) *meta = h.config;
  return model;
}

template void save_checkpoint(Model<float>&, const std::filesystem::path&, const Config&);
template void save_checkpoint(Model<double>&, const std::filesystem::path&, const Config&);
template Model<float> load_checkpoint(const std::filesystem::path&, Config*);
template Model<double> load_checkpoint(const std::filesystem::path&, Config*);

}  // namespace wcnn
