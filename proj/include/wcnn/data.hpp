#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "wcnn/tensor.hpp"

namespace wcnn {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary PGM (P5) or PPM (P6), maxval <= 65535. Returns [C, H, W] in [0, 1].
Tensor<double> load_pnm(const std::filesystem::path& path);
/// C = 1 writes P5, C = 3 writes P6. Values are clamped to [0, 1] and rounded to maxval steps.
void write_pnm(const std::filesystem::path& path, const Tensor<double>& image, unsigned maxval = 255);

enum class LabelMode { single, multi };

struct ManifestRecord {
  std::string path;  // as written, relative to the manifest directory
  std::vector<std::string> labels;
  std::vector<int> label_ids;
  std::string group;
  std::string split;
  int line = 0;
};

/// Tab-separated `path  labels  group  split` with a header row. Labels are
/// comma-separated class names. An optional leading `#classes<TAB>a,b,c`
/// line fixes the class table; otherwise it is the sorted set of names seen.
struct DatasetManifest {
  std::filesystem::path root;
  std::vector<std::string> class_names;
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(std::size_t i) const { return root / records.at(i).path; }
  std::size_t size() const { return records.size(); }
};

DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& root, LabelMode mode,
                               bool check_files = true);
DatasetManifest load_manifest(const std::filesystem::path& path, LabelMode mode, bool check_files = true);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

struct SplitPolicy {
  enum class Kind { by_split_column, leave_one_group_in, random_kfold };
  Kind kind = Kind::by_split_column;
  std::size_t folds = 5;
  std::uint64_t seed = 0;

  /// "split-column", "leave-one-group-in" or "kfold".
  static SplitPolicy parse(const std::string& name, std::size_t folds = 5, std::uint64_t seed = 0);
};

struct SplitIndices {
  std::string name;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// by_split_column reads entries `train`, `test`, `val` (split "1") or
/// `<id>=<role>` comma-separated per record; `val` rows are left out.
/// leave_one_group_in trains on one group and tests on all others.
std::vector<SplitIndices> make_splits(const DatasetManifest& manifest, const SplitPolicy& policy);

struct SynthSpec {
  std::size_t classes = 6;
  std::size_t per_class = 40;
  std::size_t size = 32;
  std::uint64_t seed = 1;
  std::size_t groups = 4;
  double test_fraction = 0.25;
};

std::vector<std::string> synth_class_names(std::size_t classes);
/// One [1, size, size] texture of class `cls` in [0, 1].
Tensor<double> synth_texture(std::size_t cls, std::size_t size, std::mt19937_64& rng);
/// Writes P5 images plus manifest.tsv under `out_dir` and returns the manifest.
DatasetManifest synth_textures(const std::filesystem::path& out_dir, const SynthSpec& spec);

}  // namespace wcnn
