#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dsnet/config.hpp"
#include "dsnet/decoder.hpp"
#include "dsnet/ops.hpp"
#include "dsnet/random.hpp"
#include "dsnet/tensor.hpp"

namespace dsnet::test {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.mutable_values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Fresh per-test scratch directory under the system temp directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dsnet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// A very small network with the full DSNet topology, for gradient checks
/// and fast wiring tests.
inline ModelConfig tiny_model_config(DSAConfig dsa = {}) {
  ModelConfig m = ModelConfig::for_scale(Scale::kTiny, dsa);
  m.encoder.name = "tiny";
  m.encoder.embed_dims = {8, 16, 24, 32};
  m.encoder.depths = {1, 1, 1, 1};
  m.encoder.num_heads = {1, 2, 3, 4};
  m.encoder.mlp_ratios = {2, 2, 2, 2};
  m.decoder.reduced_channels = {8, 8, 12, 16};
  m.decoder.level_channels = {4, 6, 8, 8};
  m.decoder.head_channels = 8;
  return m;
}

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6e", v);
  return buf;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Central finite differences against the tape gradient of `loss(inputs)`.
/// Each entry's error is |analytic - numeric| divided by the larger of the two
/// magnitudes, 1e-3 of the tensor's largest numeric gradient and `abs_floor`,
/// so entries with vanishing gradients do not amplify rounding noise. At most
/// `max_per_tensor` entries per tensor are probed (chosen with `rng`).
inline GradCheckResult grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss,
                                  std::vector<Tensor<double>> inputs, const std::vector<std::string>& names,
                                  Rng& rng, std::size_t max_per_tensor = 0, double eps = 1e-6,
                                  double abs_floor = 1e-12) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> out;
    {
      TapeScope<double> scope(tape);
      out = loss(inputs);
    }
    tape.backward(out);
  }
  GradCheckResult r;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<std::size_t> idx(static_cast<std::size_t>(t.numel()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_per_tensor && idx.size() > max_per_tensor) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(max_per_tensor);
    }
    std::vector<double> numeric(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto& v = t.mutable_data()[idx[k]];
      const double orig = v;
      v = orig + eps;
      const double up = loss(inputs).item();
      v = orig - eps;
      const double down = loss(inputs).item();
      v = orig;
      numeric[k] = (up - down) / (2 * eps);
    }
    double scale = 0.0;
    for (auto n : numeric) scale = std::max(scale, std::abs(n));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const double a = analytic[idx[k]], n = numeric[k];
      const double denom = std::max({std::abs(a), std::abs(n), 1e-3 * scale, abs_floor});
      const double err = std::abs(a - n) / denom;
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = (ti < names.size() ? names[ti] : "input" + std::to_string(ti)) + "[" + std::to_string(idx[k]) +
                  "] analytic " + sci(a) + " numeric " + sci(n);
      }
      ++r.checked;
    }
  }
  return r;
}

/// sum(y * w) for a fixed random weighting w, turning any output into a
/// scalar whose gradient exercises every output element differently.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  auto w = random_tensor<double>(y.shape(), rng, -1.0, 1.0);
  return sum(mul(y, w));
}

/// One train-mode pass so batch norms hold running statistics, then eval mode.
template <typename T>
void warm_up(DSNet<T>& model, std::int64_t h = 64, std::int64_t w = 64, std::uint64_t seed = 77) {
  Rng rng(seed);
  model.train();
  model.forward(random_tensor<T>({2, 3, h, w}, rng, 0.0, 1.0));
  model.eval();
}

}  // namespace dsnet::test
