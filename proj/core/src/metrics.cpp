#include "dsnet/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"

#include "dsnet/decoder.hpp"
#include "dsnet/error.hpp"

namespace dsnet {

template <typename T>
OverlapCounts overlap_counts(std::span<const T> pred, std::span<const T> truth) {
  if (pred.size() != truth.size()) throw ConfigError("overlap_counts: mask sizes differ");
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= T{0.5}, g = truth[i] >= T{0.5};
    c.predicted += p;
    c.truth += g;
    c.intersection += p && g;
  }
  return c;
}

std::pair<double, double> dice_iou(const OverlapCounts& c) {
  const auto uni = c.predicted + c.truth - c.intersection;
  if (uni == 0) return {1.0, 1.0};
  const double dice = 2.0 * static_cast<double>(c.intersection) / static_cast<double>(c.predicted + c.truth);
  const double iou = static_cast<double>(c.intersection) / static_cast<double>(uni);
  return {dice, iou};
}

template <typename T>
std::pair<double, double> dice_iou(const Tensor<T>& pred_mask, const Tensor<T>& gt_mask) {
  if (pred_mask.shape() != gt_mask.shape()) {
    throw ConfigError("dice_iou: shapes " + shape_string(pred_mask.shape()) + " and " +
                      shape_string(gt_mask.shape()) + " differ");
  }
  return dice_iou(overlap_counts<T>(pred_mask.values(), gt_mask.values()));
}

template <typename T>
Tensor<T> binarize_logits(const Tensor<T>& logits, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  Tensor<T> out(logits.shape());
  auto dst = out.mutable_values();
  const auto src = logits.values();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(src[i])));
    dst[i] = p > threshold ? T{1} : T{0};
  }
  return out;
}

MetricReport MetricReport::from_samples(std::vector<std::string> ids, std::vector<double> dice,
                                        std::vector<double> iou, double threshold) {
  if (dice.empty() || dice.size() != iou.size() || ids.size() != dice.size()) {
    throw ConfigError("MetricReport: need matching, non-empty per-sample lists");
  }
  MetricReport r;
  r.threshold = threshold;
  double ds = 0.0, is = 0.0;
  for (std::size_t i = 0; i < dice.size(); ++i) {
    ds += dice[i];
    is += iou[i];
  }
  r.mdice = ds / static_cast<double>(dice.size());
  r.miou = is / static_cast<double>(iou.size());
  r.ids = std::move(ids);
  r.dice = std::move(dice);
  r.iou = std::move(iou);
  return r;
}

std::string MetricReport::to_text() const {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "mDice %.6f\nmIoU %.6f\nthreshold %.3f\nsamples %zu\n", mdice, miou, threshold,
                dice.size());
  os << buf;
  for (std::size_t i = 0; i < dice.size(); ++i) {
    std::snprintf(buf, sizeof buf, " %.6f %.6f\n", dice[i], iou[i]);
    os << ids[i] << buf;
  }
  return os.str();
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["summary"] = {{"mDice", mdice}, {"mIoU", miou}, {"threshold", threshold}, {"count", dice.size()}};
  j["samples"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < dice.size(); ++i) {
    j["samples"].push_back({{"id", ids[i]}, {"dice", dice[i]}, {"iou", iou[i]}});
  }
  return j.dump(2) + "\n";
}

template <typename T>
MetricReport evaluate_split(DSNet<T>& model, std::span<const Sample> samples, double threshold,
                            std::size_t batch_size) {
  if (samples.empty()) throw ConfigError("evaluate_split: empty split");
  if (batch_size == 0) throw ConfigError("evaluate_split: batch size must be >= 1");
  const bool was_training = model.is_training();
  model.eval();
  std::vector<std::string> ids;
  std::vector<double> dice, iou;
  try {
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
      const auto count = std::min(batch_size, samples.size() - start);
      auto batch = make_batch<T>(samples.subspan(start, count));
      const auto pred = binarize_logits(model.forward(batch.images), threshold);
      const auto plane = pred.numel() / static_cast<std::int64_t>(count);
      for (std::size_t i = 0; i < count; ++i) {
        const auto off = static_cast<std::size_t>(static_cast<std::int64_t>(i) * plane);
        const auto c = overlap_counts<T>(pred.values().subspan(off, static_cast<std::size_t>(plane)),
                                         batch.masks.values().subspan(off, static_cast<std::size_t>(plane)));
        const auto [d, u] = dice_iou(c);
        ids.push_back(batch.ids[i]);
        dice.push_back(d);
        iou.push_back(u);
      }
    }
  } catch (...) {
    model.train(was_training);
    throw;
  }
  model.train(was_training);
  return MetricReport::from_samples(std::move(ids), std::move(dice), std::move(iou), threshold);
}

#define DSNET_INSTANTIATE(T)                                                                          \
  template OverlapCounts overlap_counts<T>(std::span<const T>, std::span<const T>);                   \
  template std::pair<double, double> dice_iou<T>(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> binarize_logits<T>(const Tensor<T>&, double);                                    \
  template MetricReport evaluate_split<T>(DSNet<T>&, std::span<const Sample>, double, std::size_t);

DSNET_INSTANTIATE(float)
DSNET_INSTANTIATE(double)
#undef DSNET_INSTANTIATE

}  // namespace dsnet
