#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dsnet/data.hpp"
#include "dsnet/tensor.hpp"

namespace dsnet {

template <typename T>
class DSNet;

struct OverlapCounts {
  std::int64_t intersection = 0;
  std::int64_t predicted = 0;
  std::int64_t truth = 0;
};

/// Set counts of two binary masks given as 0/1 values.
template <typename T>
OverlapCounts overlap_counts(std::span<const T> pred, std::span<const T> truth);

/// (dice, iou) from set counts; both masks empty gives (1, 1).
std::pair<double, double> dice_iou(const OverlapCounts& c);
template <typename T>
std::pair<double, double> dice_iou(const Tensor<T>& pred_mask, const Tensor<T>& gt_mask);

/// 1 where sigmoid(logit) > threshold, else 0.
template <typename T>
Tensor<T> binarize_logits(const Tensor<T>& logits, double threshold = 0.5);

struct MetricReport {
  double mdice = 0.0;
  double miou = 0.0;
  double threshold = 0.5;
  std::vector<std::string> ids;
  std::vector<double> dice;
  std::vector<double> iou;

  /// Builds the report and its means from per-sample values.
  static MetricReport from_samples(std::vector<std::string> ids, std::vector<double> dice,
                                   std::vector<double> iou, double threshold);
  /// Header lines followed by one "<id> <dice> <iou>" line per sample.
  std::string to_text() const;
  /// {"summary": {...}, "samples": [{"id", "dice", "iou"}, ...]}.
  std::string to_json() const;
};

/// Runs the model in eval mode over `samples` in fixed-size batches and
/// restores the previous mode. Throws ConfigError on an empty split.
template <typename T>
MetricReport evaluate_split(DSNet<T>& model, std::span<const Sample> samples, double threshold = 0.5,
                            std::size_t batch_size = 8);

}  // namespace dsnet
