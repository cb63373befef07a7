#include <cmath>

#include "doctest.h"
#include "dsnet/data.hpp"
#include "dsnet/error.hpp"
#include "dsnet/losses.hpp"
#include "dsnet/metrics.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace dsnet;
using test::random_tensor;

namespace {

Tensor<double> oracle_logits() {
  return Tensor<double>(Shape{1, 1, 3, 3}, std::vector<double>{-2, -1, 0, 0.5, 1, 2, 3, -3, 0.25});
}
Tensor<double> oracle_target() {
  return Tensor<double>(Shape{1, 1, 3, 3}, std::vector<double>{0, 0, 1, 1, 1, 0, 1, 0, 0});
}

// Reference values computed independently in 64-bit from the textbook
// definitions (mean binary cross-entropy; soft Dice with smoothing 1).
constexpr double kBce = 0.5523019649876411;
constexpr double kDice = 0.317250107494931;

}  // namespace

TEST_CASE("loss scalar oracles on a 3x3 instance") {
  CHECK(std::abs(bce_loss(oracle_logits(), oracle_target()).item() - kBce) < 1e-10);
  CHECK(std::abs(dice_loss(oracle_logits(), oracle_target()).item() - kDice) < 1e-10);
  CHECK(std::abs(combined_loss(oracle_logits(), oracle_target()).item() - (kBce + kDice)) < 1e-10);
  LossConfig w;
  w.bce_weight = 0.5;
  w.dice_weight = 2.0;
  CHECK(std::abs(combined_loss(oracle_logits(), oracle_target(), w).item() - 0.9106511974836825) < 1e-10);
}

TEST_CASE("losses match scalar formulas on random 3x3 instances") {
  Rng rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    auto z = random_tensor<double>({1, 1, 3, 3}, rng, -8, 8);
    Tensor<double> t(Shape{1, 1, 3, 3});
    for (auto& v : t.mutable_values()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    long double bce = 0, inter = 0, ps = 0, ts = 0;
    for (int i = 0; i < 9; ++i) {
      const long double zi = z.data()[i], ti = t.data()[i];
      const long double p = 1.0L / (1.0L + std::exp(-zi));
      bce -= ti * std::log(p) + (1 - ti) * std::log(1 - p);
      inter += p * ti;
      ps += p;
      ts += ti;
    }
    bce /= 9;
    const long double dice = 1 - (2 * inter + 1) / (ps + ts + 1);
    CHECK(std::abs(bce_loss(z, t).item() - static_cast<double>(bce)) < 1e-10);
    CHECK(std::abs(dice_loss(z, t).item() - static_cast<double>(dice)) < 1e-10);
  }
}

TEST_CASE("losses stay finite for extreme logits") {
  std::vector<double> z;
  for (int i = -100; i <= 100; ++i) z.push_back(i);
  Tensor<double> logits(Shape{1, 1, 1, 201}, z);
  for (double tv : {0.0, 1.0}) {
    Tensor<double> t(Shape{1, 1, 1, 201}, tv);
    const auto b = bce_loss(logits, t).item(), d = dice_loss(logits, t).item();
    CHECK(std::isfinite(b));
    CHECK(std::isfinite(d));
    CHECK(b > 0.0);
    Tensor<float> lf(Shape{1, 1, 1, 201}, std::vector<float>(z.begin(), z.end()));
    CHECK(std::isfinite(combined_loss(lf, Tensor<float>(Shape{1, 1, 1, 201}, static_cast<float>(tv))).item()));
  }
  // A saturated correct prediction costs almost nothing; a saturated wrong one costs |z|.
  Tensor<double> big(Shape{1}, std::vector<double>{100.0});
  CHECK(bce_loss(big, Tensor<double>(Shape{1}, 1.0)).item() < 1e-40);
  CHECK(bce_loss(big, Tensor<double>(Shape{1}, 0.0)).item() == doctest::Approx(100.0));
}

TEST_CASE("losses reject non-binary targets and shape mismatches") {
  auto t = oracle_target();
  t.mutable_data()[0] = 0.5;
  CHECK_THROWS_AS(bce_loss(oracle_logits(), t), ConfigError);
  CHECK_THROWS_AS(dice_loss(oracle_logits(), t), ConfigError);
  CHECK_THROWS_AS(bce_loss(oracle_logits(), Tensor<double>(Shape{1, 1, 3, 2})), ConfigError);
}

TEST_CASE("gradient check: bce, dice and the combined loss") {
  Rng rng(20);
  auto logits = random_tensor<double>({2, 1, 4, 4}, rng, -4, 4);
  Tensor<double> target(Shape{2, 1, 4, 4});
  for (auto& v : target.mutable_values()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  for (int which = 0; which < 3; ++which) {
    const auto r = test::grad_check(
        [&](const std::vector<Tensor<double>>& in) {
          if (which == 0) return bce_loss(in[0], target);
          if (which == 1) return dice_loss(in[0], target);
          return combined_loss(in[0], target);
        },
        {logits.clone()}, {"logits"}, rng);
    INFO(which, " ", r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("overlap metrics agree with a brute-force oracle") {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.uniform() * 64);
    const double pp = rng.uniform(), pt = rng.uniform();
    Tensor<float> p(Shape{1, 1, 1, n}), t(Shape{1, 1, 1, n});
    for (std::int64_t i = 0; i < n; ++i) {
      p.mutable_data()[i] = rng.uniform() < pp ? 1.0f : 0.0f;
      t.mutable_data()[i] = rng.uniform() < pt ? 1.0f : 0.0f;
    }
    int tp = 0, fp = 0, fn = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const bool a = p.data()[i] > 0.5f, b = t.data()[i] > 0.5f;
      tp += a && b;
      fp += a && !b;
      fn += !a && b;
    }
    const double dice_ref = (tp + fp + fn) == 0 ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
    const double iou_ref = (tp + fp + fn) == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp + fn);
    const auto [dice, iou] = dice_iou(p, t);
    CHECK(dice == doctest::Approx(dice_ref).epsilon(1e-12));
    CHECK(iou == doctest::Approx(iou_ref).epsilon(1e-12));
    CHECK(std::abs(dice - 2.0 * iou / (1.0 + iou)) < 1e-9);
    CHECK(dice >= iou);
  }
}

TEST_CASE("metric edge cases") {
  Tensor<float> empty(Shape{1, 1, 2, 2}), full(Shape{1, 1, 2, 2}, 1.0f);
  CHECK(dice_iou(empty, empty) == std::pair{1.0, 1.0});
  CHECK(dice_iou(full, empty) == std::pair{0.0, 0.0});
  CHECK(dice_iou(full, full) == std::pair{1.0, 1.0});
  CHECK_THROWS_AS(dice_iou(full, Tensor<float>(Shape{1, 1, 2, 3})), ConfigError);

  Tensor<float> logits(Shape{4}, std::vector<float>{-1.0f, 0.0f, 1e-3f, 5.0f});
  const auto b = binarize_logits(logits);
  CHECK(b.data()[0] == 0.0f);
  CHECK(b.data()[1] == 0.0f);  // probability exactly 0.5 is background
  CHECK(b.data()[2] == 1.0f);
  CHECK(b.data()[3] == 1.0f);
  CHECK(binarize_logits(logits, 0.99).data()[3] == 1.0f);
  CHECK(binarize_logits(logits, 0.999).data()[3] == 0.0f);
}

TEST_CASE("metric report averages per-sample scores and serializes") {
  auto r = MetricReport::from_samples({"a", "b", "c"}, {1.0, 0.5, 0.0}, {1.0, 1.0 / 3.0, 0.0}, 0.5);
  CHECK(r.mdice == doctest::Approx(0.5));
  CHECK(r.miou == doctest::Approx(4.0 / 9.0));
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["summary"]["mDice"].get<double>() == doctest::Approx(0.5));
  CHECK(j["samples"].size() == 3);
  CHECK(j["samples"][1]["id"] == "b");
  CHECK(r.to_text().find("mDice") != std::string::npos);
  CHECK_THROWS_AS(MetricReport::from_samples({"a"}, {1.0, 0.5}, {1.0}, 0.5), ConfigError);
}

TEST_CASE("evaluate_split matches per-sample evaluation and restores the mode") {
  Rng rng(22);
  DSNet<float> model(test::tiny_model_config({true, true}), rng);
  test::warm_up(model);
  model.train();
  const auto samples = synthetic_ellipses(5, 64, 3);
  const auto report = evaluate_split(model, std::span<const Sample>(samples), 0.5, 2);
  CHECK(model.is_training());
  REQUIRE(report.ids.size() == 5);
  model.eval();
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto batch = make_batch<float>(std::span<const Sample>(&samples[i], 1));
    const auto pred = binarize_logits(model.forward(batch.images));
    const auto [d, iou] = dice_iou(pred, batch.masks);
    CHECK(report.ids[i] == samples[i].id);
    CHECK(report.dice[i] == doctest::Approx(d).epsilon(1e-12));
    CHECK(report.iou[i] == doctest::Approx(iou).epsilon(1e-12));
    total += d;
  }
  CHECK(report.mdice == doctest::Approx(total / 5));
  CHECK_THROWS_AS(evaluate_split(model, std::span<const Sample>()), ConfigError);
}
