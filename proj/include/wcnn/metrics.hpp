#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace wcnn {

/// 100 * correct / total. Throws std::invalid_argument on empty or mismatched input.
double accuracy(std::span<const int> predictions, std::span<const int> labels);

/// Predicted and ground-truth label sets per image, labels in [0, num_classes).
struct MultiLabelOutcome {
  std::vector<std::vector<int>> predicted;
  std::vector<std::vector<int>> truth;
  std::size_t num_classes = 0;
};

/// Percentages. Per-class (C-*) values average only over classes that occur
/// in the ground truth or the predictions; an undefined per-class precision
/// or recall inside that set counts as 0. Overall (O-*) values pool TP/FP/FN.
/// F1 is the harmonic mean of the matching P and R, and 0 when both are 0.
struct MultiLabelMetrics {
  double cp = 0, cr = 0, cf1 = 0;
  double op = 0, orec = 0, of1 = 0;
  std::size_t classes_averaged = 0;
};

MultiLabelMetrics multilabel_bundle(const MultiLabelOutcome& outcome);

/// "C-P\tC-R\tC-F1\tO-P\tO-R\tO-F1" header and a two-decimal row.
std::string multilabel_tsv_header();
std::string multilabel_tsv_row(const MultiLabelMetrics& m);

struct SplitSummary {
  double mean = 0;
  std::optional<double> sd;  // population sd; absent for a single split
  std::size_t splits = 0;
};

SplitSummary split_aggregate(std::span<const double> values);
/// "62.00 ± 2.00", or "62.00 ± n/a" for a single split.
std::string format_summary(const SplitSummary& s, int decimals = 2);

}  // namespace wcnn
