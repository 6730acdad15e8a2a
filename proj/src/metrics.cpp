#include "wcnn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace wcnn {

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
  if (predictions.empty()) throw std::invalid_argument("accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {

double harmonic(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

std::vector<int> dedup(const std::vector<int>& labels, std::size_t classes) {
  std::vector<int> out = labels;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  for (int c : out) {
    if (c < 0 || static_cast<std::size_t>(c) >= classes) {
      throw std::out_of_range("multilabel: label " + std::to_string(c) + " outside [0," + std::to_string(classes) + ")");
    }
  }
  return out;
}

}  // namespace

MultiLabelMetrics multilabel_bundle(const MultiLabelOutcome& o) {
  if (o.num_classes == 0) throw std::invalid_argument("multilabel: num_classes must be positive");
  if (o.predicted.size() != o.truth.size()) throw std::invalid_argument("multilabel: outcome lists differ in length");
  const std::size_t C = o.num_classes;
  std::vector<std::size_t> tp(C), fp(C), fn(C);
  for (std::size_t i = 0; i < o.truth.size(); ++i) {
    const auto pred = dedup(o.predicted[i], C);
    const auto truth = dedup(o.truth[i], C);
    std::vector<char> in_truth(C, 0), in_pred(C, 0);
    for (int c : truth) in_truth[static_cast<std::size_t>(c)] = 1;
    for (int c : pred) in_pred[static_cast<std::size_t>(c)] = 1;
    for (std::size_t c = 0; c < C; ++c) {
      tp[c] += in_truth[c] && in_pred[c];
      fp[c] += !in_truth[c] && in_pred[c];
      fn[c] += in_truth[c] && !in_pred[c];
    }
  }

  MultiLabelMetrics m;
  std::size_t TP = 0, FP = 0, FN = 0;
  double sum_p = 0, sum_r = 0;
  for (std::size_t c = 0; c < C; ++c) {
    TP += tp[c];
    FP += fp[c];
    FN += fn[c];
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    ++m.classes_averaged;
    sum_p += tp[c] + fp[c] > 0 ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c]) : 0.0;
    sum_r += tp[c] + fn[c] > 0 ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fn[c]) : 0.0;
  }
  if (m.classes_averaged > 0) {
    m.cp = 100.0 * sum_p / static_cast<double>(m.classes_averaged);
    m.cr = 100.0 * sum_r / static_cast<double>(m.classes_averaged);
  }
  m.cf1 = harmonic(m.cp, m.cr);
  m.op = TP + FP > 0 ? 100.0 * static_cast<double>(TP) / static_cast<double>(TP + FP) : 0.0;
  m.orec = TP + FN > 0 ? 100.0 * static_cast<double>(TP) / static_cast<double>(TP + FN) : 0.0;
  m.of1 = harmonic(m.op, m.orec);
  return m;
}

std::string multilabel_tsv_header() { return "C-P\tC-R\tC-F1\tO-P\tO-R\tO-F1"; }

std::string multilabel_tsv_row(const MultiLabelMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.2f\t%.2f\t%.2f\t%.2f\t%.2f\t%.2f", m.cp, m.cr, m.cf1, m.op, m.orec, m.of1);
  return buf;
}

SplitSummary split_aggregate(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("split_aggregate: no values");
  SplitSummary s;
  s.splits = values.size();
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(values.size()));
  }
  return s;
}

std::string format_summary(const SplitSummary& s, int decimals) {
  char buf[96];
  if (s.sd) {
    std::snprintf(buf, sizeof buf, "%.*f ± %.*f", decimals, s.mean, decimals, *s.sd);
  } else {
    std::snprintf(buf, sizeof buf, "%.*f ± n/a", decimals, s.mean);
  }
  return buf;
}

}  // namespace wcnn
