#include <cmath>

#include "doctest.h"
#include "dsnet/error.hpp"
#include "dsnet/ops.hpp"
#include "support.hpp"

using namespace dsnet;
using test::grad_check;
using test::random_tensor;
using test::weighted_sum;

namespace {

constexpr double kPrimitiveTol = 1e-4;

ConvParams<double> make_conv(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride,
                             std::int64_t pad, std::int64_t groups, bool bias, Rng& rng) {
  ConvParams<double> p;
  p.in_channels = cin;
  p.out_channels = cout;
  p.kernel_h = p.kernel_w = k;
  p.stride = stride;
  p.padding = pad;
  p.groups = groups;
  p.weight = random_tensor<double>({cout, cin / groups, k, k}, rng);
  if (bias) p.bias = random_tensor<double>({cout}, rng);
  return p;
}

// Straightforward seven-loop convolution used as the reference.
Tensor<double> naive_conv(const Tensor<double>& x, const ConvParams<double>& p) {
  const auto n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const auto ho = (h + 2 * p.padding - p.kernel_h) / p.stride + 1;
  const auto wo = (w + 2 * p.padding - p.kernel_w) / p.stride + 1;
  const auto cg = p.in_channels / p.groups, og = p.out_channels / p.groups;
  Tensor<double> y(Shape{n, p.out_channels, ho, wo});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < p.out_channels; ++o)
      for (std::int64_t i = 0; i < ho; ++i)
        for (std::int64_t j = 0; j < wo; ++j) {
          double acc = p.bias.defined() ? p.bias.data()[o] : 0.0;
          const auto g = o / og;
          for (std::int64_t c = 0; c < cg; ++c)
            for (std::int64_t ki = 0; ki < p.kernel_h; ++ki)
              for (std::int64_t kj = 0; kj < p.kernel_w; ++kj) {
                const auto yy = i * p.stride - p.padding + ki, xx = j * p.stride - p.padding + kj;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                acc += x.data()[((b * p.in_channels + g * cg + c) * h + yy) * w + xx] *
                       p.weight.data()[((o * cg + c) * p.kernel_h + ki) * p.kernel_w + kj];
              }
          y.mutable_data()[((b * p.out_channels + o) * ho + i) * wo + j] = acc;
        }
  return y;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("conv2d hand example: 3x3 ones kernel over ones with padding 1") {
  ConvParams<double> p;
  p.in_channels = p.out_channels = 1;
  p.kernel_h = p.kernel_w = 3;
  p.padding = 1;
  p.weight = Tensor<double>(Shape{1, 1, 3, 3}, 1.0);
  const auto y = conv2d(Tensor<double>(Shape{1, 1, 3, 3}, 1.0), p);
  const std::vector<double> expect{4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == expect[i]);
}

TEST_CASE("conv2d direct and im2col agree with the naive reference") {
  Rng rng(1);
  struct Case {
    std::int64_t cin, cout, k, stride, pad, groups, h, w;
  };
  for (const auto& c : {Case{3, 5, 3, 1, 1, 1, 7, 6}, Case{4, 6, 3, 2, 1, 2, 9, 8}, Case{6, 6, 3, 1, 1, 6, 5, 5},
                        Case{3, 4, 7, 4, 3, 1, 16, 12}, Case{5, 5, 4, 4, 0, 1, 8, 8}, Case{2, 3, 1, 1, 0, 1, 4, 3}}) {
    auto p = make_conv(c.cin, c.cout, c.k, c.stride, c.pad, c.groups, true, rng);
    auto x = random_tensor<double>({2, c.cin, c.h, c.w}, rng);
    const auto ref = naive_conv(x, p);
    CHECK(max_abs_diff(conv2d(x, p, ConvAlgo::kDirect), ref) < 1e-12);
    CHECK(max_abs_diff(conv2d(x, p, ConvAlgo::kIm2col), ref) < 1e-12);
    CHECK(max_abs_diff(conv2d(x, p, ConvAlgo::kAuto), ref) < 1e-12);
  }
}

TEST_CASE("conv2d float matches double reference") {
  Rng rng(2);
  auto p = make_conv(8, 16, 3, 1, 1, 1, true, rng);
  auto x = random_tensor<double>({1, 8, 10, 10}, rng);
  ConvParams<float> pf;
  pf.in_channels = 8;
  pf.out_channels = 16;
  pf.kernel_h = pf.kernel_w = 3;
  pf.padding = 1;
  pf.weight = cast<float>(p.weight);
  pf.bias = cast<float>(p.bias);
  const auto yf = cast<double>(conv2d(cast<float>(x), pf));
  CHECK(max_abs_diff(yf, naive_conv(x, p)) < 1e-4);
}

TEST_CASE("conv2d MAC count: 1x1 conv 4->8 on 16x16 without bias") {
  ConvParams<float> p;
  p.in_channels = 4;
  p.out_channels = 8;
  p.weight = Tensor<float>(Shape{8, 4, 1, 1}, 0.5f);
  Tape<float> tape;
  {
    TapeScope<float> s(tape);
    conv2d(Tensor<float>(Shape{1, 4, 16, 16}, 1.0f), p);
  }
  CHECK(tape.total_macs() == 8192);
}

TEST_CASE("conv2d rejects inconsistent parameters with the dimension named") {
  Rng rng(3);
  auto p = make_conv(4, 4, 3, 1, 1, 1, true, rng);
  auto x = random_tensor<double>({1, 3, 5, 5}, rng);
  try {
    conv2d(x, p);
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("channel") != std::string::npos);
  }
  auto q = make_conv(4, 4, 3, 1, 1, 1, true, rng);
  q.groups = 3;
  CHECK_THROWS_AS(conv2d(random_tensor<double>({1, 4, 5, 5}, rng), q), ConfigError);
  CHECK(conv_output_extent(352, 7, 4, 3) == 88);
}

TEST_CASE("batch norm: normalization, running statistics and modes") {
  Rng rng(4);
  auto x = random_tensor<double>({3, 2, 4, 4}, rng, -2.0, 5.0);
  auto gamma = Tensor<double>(Shape{2}, 1.0), beta = Tensor<double>(Shape{2}, 0.0);
  auto st = BatchNormState<double>::create(2);
  CHECK_THROWS_AS(batch_norm2d(x, gamma, beta, st, false), ConfigError);  // no statistics yet

  const auto y = batch_norm2d(x, gamma, beta, st, true);
  for (std::int64_t c = 0; c < 2; ++c) {
    double mean = 0, sq = 0, xm = 0, xs = 0;
    const std::int64_t m = 3 * 16;
    for (std::int64_t b = 0; b < 3; ++b)
      for (std::int64_t i = 0; i < 16; ++i) {
        const auto off = (b * 2 + c) * 16 + i;
        mean += y.data()[off];
        sq += y.data()[off] * y.data()[off];
        xm += x.data()[off];
      }
    mean /= m;
    xm /= m;
    for (std::int64_t b = 0; b < 3; ++b)
      for (std::int64_t i = 0; i < 16; ++i) {
        const auto d = x.data()[(b * 2 + c) * 16 + i] - xm;
        xs += d * d;
      }
    CHECK(std::abs(mean) < 1e-12);
    CHECK(sq / m == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(st.running_mean.data()[c] == doctest::Approx(0.1 * xm));
    CHECK(st.running_var.data()[c] == doctest::Approx(0.9 + 0.1 * xs / (m - 1)));
  }
  CHECK(st.batches_tracked.item() == 1.0);
  const auto e = batch_norm2d(x, gamma, beta, st, false);
  CHECK(e.shape() == x.shape());
  auto single = random_tensor<double>({1, 2, 1, 1}, rng);
  CHECK_THROWS_AS(batch_norm2d(single, gamma, beta, st, true), ConfigError);
}

TEST_CASE("activations: relu and exact gelu") {
  Tensor<double> x(Shape{3}, std::vector<double>{-1.0, 0.0, 1.0});
  const auto r = relu(x), g = gelu(x);
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[2] == 1.0);
  CHECK(g.data()[2] == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  CHECK(g.data()[0] == doctest::Approx(-0.15865525393145707).epsilon(1e-14));
  CHECK(g.data()[1] == 0.0);
}

TEST_CASE("layer norm normalizes the last axis") {
  Rng rng(5);
  auto x = random_tensor<double>({2, 3, 8}, rng, -3, 3);
  const auto y = layer_norm(x, Tensor<double>(Shape{8}, 1.0), Tensor<double>(Shape{8}, 0.0), 1e-6);
  for (int row = 0; row < 6; ++row) {
    double m = 0, s = 0;
    for (int i = 0; i < 8; ++i) m += y.data()[row * 8 + i];
    m /= 8;
    for (int i = 0; i < 8; ++i) s += std::pow(y.data()[row * 8 + i] - m, 2);
    CHECK(std::abs(m) < 1e-12);
    CHECK(s / 8 == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("bilinear resize uses half-pixel centers") {
  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  const auto y = resize_bilinear(x, 4, 4);
  const std::vector<double> expect{0, 0.25, 0.75, 1, 0.5, 0.75, 1.25, 1.5, 1.5, 1.75, 2.25, 2.5, 2, 2.25, 2.75, 3};
  for (int i = 0; i < 16; ++i) CHECK(y.data()[i] == doctest::Approx(expect[i]));
  const auto same = resize_bilinear(x, 2, 2);
  for (int i = 0; i < 4; ++i) CHECK(same.data()[i] == x.data()[i]);
  CHECK_THROWS_AS(upsample_bilinear(x, 0), ConfigError);
}

TEST_CASE("linear and attention match naive formulas") {
  Rng rng(6);
  auto x = random_tensor<double>({2, 3, 4}, rng);
  auto w = random_tensor<double>({5, 4}, rng), b = random_tensor<double>({5}, rng);
  const auto y = linear(x, w, b);
  CHECK(y.shape() == Shape{2, 3, 5});
  for (int r = 0; r < 6; ++r)
    for (int o = 0; o < 5; ++o) {
      double acc = b.data()[o];
      for (int i = 0; i < 4; ++i) acc += x.data()[r * 4 + i] * w.data()[o * 4 + i];
      CHECK(y.data()[r * 5 + o] == doctest::Approx(acc).epsilon(1e-13));
    }

  auto q = random_tensor<double>({1, 2, 3, 4}, rng), k = random_tensor<double>({1, 2, 5, 4}, rng);
  auto v = random_tensor<double>({1, 2, 5, 6}, rng);
  const auto a = attention(q, k, v);
  const auto wts = attention_weights(q, k);
  CHECK(a.shape() == Shape{1, 2, 3, 6});
  for (int h = 0; h < 2; ++h)
    for (int l = 0; l < 3; ++l) {
      std::vector<double> s(5);
      double mx = -1e300, z = 0;
      for (int j = 0; j < 5; ++j) {
        double d = 0;
        for (int c = 0; c < 4; ++c) d += q.data()[(h * 3 + l) * 4 + c] * k.data()[(h * 5 + j) * 4 + c];
        s[j] = d / 2.0;
        mx = std::max(mx, s[j]);
      }
      for (auto& e : s) z += (e = std::exp(e - mx));
      double row = 0;
      for (int j = 0; j < 5; ++j) row += wts.data()[(h * 3 + l) * 5 + j];
      CHECK(row == doctest::Approx(1.0).epsilon(1e-14));
      for (int c = 0; c < 6; ++c) {
        double acc = 0;
        for (int j = 0; j < 5; ++j) acc += s[j] / z * v.data()[(h * 5 + j) * 6 + c];
        CHECK(a.data()[(h * 3 + l) * 6 + c] == doctest::Approx(acc).epsilon(1e-13));
      }
    }
}

TEST_CASE("layout permutations round-trip") {
  Rng rng(7);
  auto x = random_tensor<double>({2, 6, 3, 4}, rng);
  const auto t = tokens_from_map(x);
  CHECK(t.shape() == Shape{2, 12, 6});
  CHECK(t.at({1, 5, 2}) == x.at({1, 2, 1, 1}));
  CHECK(max_abs_diff(map_from_tokens(t, 3, 4), x) == 0.0);
  const auto s = split_heads(t, 3);
  CHECK(s.shape() == Shape{2, 3, 12, 2});
  CHECK(max_abs_diff(merge_heads(s), t) == 0.0);
  const auto c = concat_channels<double>({x, scale(x, 2.0)});
  CHECK(c.shape() == Shape{2, 12, 3, 4});
  CHECK(c.at({1, 8, 2, 3}) == 2.0 * x.at({1, 2, 2, 3}));
}

// ---------------------------------------------------------------------------
// Finite-difference checks, 64-bit, relative tolerance 1e-4.

TEST_CASE("gradient check: conv2d variants") {
  Rng rng(10);
  struct Case {
    std::int64_t cin, cout, k, stride, pad, groups;
    ConvAlgo algo;
  };
  for (const auto& c : {Case{3, 4, 3, 1, 1, 1, ConvAlgo::kIm2col}, Case{3, 4, 3, 2, 1, 1, ConvAlgo::kDirect},
                        Case{4, 4, 3, 1, 1, 4, ConvAlgo::kAuto}, Case{4, 6, 3, 1, 1, 2, ConvAlgo::kIm2col},
                        Case{2, 3, 4, 4, 0, 1, ConvAlgo::kIm2col}}) {
    auto p = make_conv(c.cin, c.cout, c.k, c.stride, c.pad, c.groups, true, rng);
    auto x = random_tensor<double>({2, c.cin, 8, 8}, rng);
    const auto algo = c.algo;
    const auto r = grad_check(
        [&](const std::vector<Tensor<double>>& in) {
          ConvParams<double> q = p;
          q.weight = in[1];
          q.bias = in[2];
          return weighted_sum(conv2d(in[0], q, algo));
        },
        {x, p.weight, p.bias}, {"x", "weight", "bias"}, rng);
    INFO(r.worst);
    CHECK(r.max_rel_error < kPrimitiveTol);
  }
}

TEST_CASE("gradient check: batch norm (train mode)") {
  Rng rng(11);
  auto x = random_tensor<double>({3, 2, 3, 3}, rng, -2, 2);
  auto g = random_tensor<double>({2}, rng, 0.5, 1.5), b = random_tensor<double>({2}, rng);
  const auto r = grad_check(
      [&](const std::vector<Tensor<double>>& in) {
        auto st = BatchNormState<double>::create(2);
        return weighted_sum(batch_norm2d(in[0], in[1], in[2], st, true));
      },
      {x, g, b}, {"x", "gamma", "beta"}, rng);
  INFO(r.worst);
  CHECK(r.max_rel_error < kPrimitiveTol);
}

TEST_CASE("gradient check: batch norm (eval mode)") {
  Rng rng(12);
  auto x = random_tensor<double>({2, 2, 3, 3}, rng);
  auto st = BatchNormState<double>::create(2);
  batch_norm2d(random_tensor<double>({4, 2, 3, 3}, rng), Tensor<double>(Shape{2}, 1.0), Tensor<double>(Shape{2}, 0.0),
               st, true);
  const auto r = grad_check(
      [&](const std::vector<Tensor<double>>& in) {
        return weighted_sum(batch_norm2d(in[0], in[1], in[2], st, false));
      },
      {x, random_tensor<double>({2}, rng), random_tensor<double>({2}, rng)}, {"x", "gamma", "beta"}, rng);
  CHECK(r.max_rel_error < kPrimitiveTol);
}

TEST_CASE("gradient check: activations away from the relu kink") {
  Rng rng(13);
  auto x = random_tensor<double>({40}, rng, 0.05, 2.0);
  for (std::int64_t i = 0; i < 40; i += 2) x.mutable_data()[i] = -x.data()[i];
  for (auto kind : {Activation::kRelu, Activation::kGelu}) {
    const auto r = grad_check([&](const std::vector<Tensor<double>>& in) { return weighted_sum(activation(in[0], kind)); },
                              {x.clone()}, {"x"}, rng);
    CHECK(r.max_rel_error < kPrimitiveTol);
  }
}

TEST_CASE("gradient check: layer norm") {
  Rng rng(14);
  const auto r = grad_check(
      [&](const std::vector<Tensor<double>>& in) { return weighted_sum(layer_norm(in[0], in[1], in[2], 1e-6)); },
      {random_tensor<double>({2, 3, 6}, rng, -2, 2), random_tensor<double>({6}, rng), random_tensor<double>({6}, rng)},
      {"x", "gamma", "beta"}, rng);
  INFO(r.worst);
  CHECK(r.max_rel_error < kPrimitiveTol);
}

TEST_CASE("gradient check: bilinear resize up, down and non-integer") {
  Rng rng(15);
  for (auto [oh, ow] : {std::pair{8, 8}, std::pair{2, 3}, std::pair{7, 5}}) {
    const auto r = grad_check(
        [&](const std::vector<Tensor<double>>& in) { return weighted_sum(resize_bilinear(in[0], oh, ow)); },
        {random_tensor<double>({2, 2, 4, 4}, rng)}, {"x"}, rng);
    CHECK(r.max_rel_error < kPrimitiveTol);
  }
}

TEST_CASE("gradient check: elementwise and structural ops") {
  Rng rng(16);
  auto a = random_tensor<double>({2, 3, 2, 2}, rng), b = random_tensor<double>({2, 3, 2, 2}, rng);
  auto c = random_tensor<double>({2, 1, 2, 2}, rng);
  const auto r = grad_check(
      [&](const std::vector<Tensor<double>>& in) {
        auto s = add(in[0], in[1]);
        auto d = sub(in[0], in[1]);
        auto m = mul(s, d);
        auto cat = concat_channels<double>({m, scale(in[2], 3.0)});
        return add(weighted_sum(cat), scale(mean(in[0]), 2.0));
      },
      {a, b, c}, {"a", "b", "c"}, rng);
  CHECK(r.max_rel_error < kPrimitiveTol);
}

TEST_CASE("gradient check: linear and token layout ops") {
  Rng rng(17);
  const auto r = grad_check(
      [&](const std::vector<Tensor<double>>& in) {
        auto t = tokens_from_map(in[0]);
        auto y = linear(t, in[1], in[2]);
        auto h = merge_heads(split_heads(y, 2));
        return weighted_sum(map_from_tokens(h, 2, 3));
      },
      {random_tensor<double>({2, 3, 2, 3}, rng), random_tensor<double>({4, 3}, rng), random_tensor<double>({4}, rng)},
      {"x", "weight", "bias"}, rng);
  CHECK(r.max_rel_error < kPrimitiveTol);
}

TEST_CASE("gradient check: attention") {
  Rng rng(18);
  const auto r = grad_check(
      [&](const std::vector<Tensor<double>>& in) { return weighted_sum(attention(in[0], in[1], in[2])); },
      {random_tensor<double>({2, 2, 4, 3}, rng), random_tensor<double>({2, 2, 5, 3}, rng),
       random_tensor<double>({2, 2, 5, 2}, rng)},
      {"q", "k", "v"}, rng);
  INFO(r.worst);
  CHECK(r.max_rel_error < kPrimitiveTol);
}

TEST_CASE("gradient check: sum") {
  Rng rng(19);
  const auto r = grad_check([&](const std::vector<Tensor<double>>& in) { return sum(in[0]); },
                            {random_tensor<double>({5}, rng)}, {"x"}, rng);
  CHECK(r.max_rel_error < kPrimitiveTol);
}
