#include "dsnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dsnet/error.hpp"
#include "dsnet/gemm.hpp"

namespace dsnet {

namespace {

using i64 = std::int64_t;

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw ConfigError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                      ", got " + shape_string(s));
  }
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                      shape_string(b));
  }
}

std::uint64_t u64(i64 v) { return static_cast<std::uint64_t>(v); }

// ---------------------------------------------------------------------------
// Convolution kernels

struct ConvGeometry {
  i64 n, cin, h, w, cout, kh, kw, stride, pad, groups, ho, wo;
  i64 cin_g() const { return cin / groups; }
  i64 cout_g() const { return cout / groups; }
};

template <typename T>
void conv_direct_forward(const ConvGeometry& g, const T* x, const T* w, const T* b, T* y) {
  const i64 cin_g = g.cin_g(), cout_g = g.cout_g();
  for (i64 n = 0; n < g.n; ++n) {
    for (i64 oc = 0; oc < g.cout; ++oc) {
      const i64 grp = oc / cout_g;
      T* yp = y + (n * g.cout + oc) * g.ho * g.wo;
      const T bias = b ? b[oc] : T{0};
      for (i64 i = 0; i < g.ho * g.wo; ++i) yp[i] = bias;
      for (i64 ic = 0; ic < cin_g; ++ic) {
        const T* xp = x + (n * g.cin + grp * cin_g + ic) * g.h * g.w;
        const T* wp = w + (oc * cin_g + ic) * g.kh * g.kw;
        for (i64 ky = 0; ky < g.kh; ++ky) {
          for (i64 kx = 0; kx < g.kw; ++kx) {
            const T wv = wp[ky * g.kw + kx];
            for (i64 oy = 0; oy < g.ho; ++oy) {
              const i64 iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              const T* xrow = xp + iy * g.w;
              T* yrow = yp + oy * g.wo;
              for (i64 ox = 0; ox < g.wo; ++ox) {
                const i64 ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.w) continue;
                yrow[ox] += wv * xrow[ix];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_direct_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx,
                          T* dw, T* db) {
  const i64 cin_g = g.cin_g(), cout_g = g.cout_g();
  for (i64 n = 0; n < g.n; ++n) {
    for (i64 oc = 0; oc < g.cout; ++oc) {
      const i64 grp = oc / cout_g;
      const T* dyp = dy + (n * g.cout + oc) * g.ho * g.wo;
      if (db) {
        T s{0};
        for (i64 i = 0; i < g.ho * g.wo; ++i) s += dyp[i];
        db[oc] += s;
      }
      for (i64 ic = 0; ic < cin_g; ++ic) {
        const i64 xoff = (n * g.cin + grp * cin_g + ic) * g.h * g.w;
        const T* wp = w + (oc * cin_g + ic) * g.kh * g.kw;
        T* dwp = dw ? dw + (oc * cin_g + ic) * g.kh * g.kw : nullptr;
        for (i64 ky = 0; ky < g.kh; ++ky) {
          for (i64 kx = 0; kx < g.kw; ++kx) {
            const T wv = wp[ky * g.kw + kx];
            T acc{0};
            for (i64 oy = 0; oy < g.ho; ++oy) {
              const i64 iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.h) continue;
              for (i64 ox = 0; ox < g.wo; ++ox) {
                const i64 ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= g.w) continue;
                const T d = dyp[oy * g.wo + ox];
                acc += d * x[xoff + iy * g.w + ix];
                if (dx) dx[xoff + iy * g.w + ix] += wv * d;
              }
            }
            if (dwp) dwp[ky * g.kw + kx] += acc;
          }
        }
      }
    }
  }
}

// Column buffer layout: rows = (ic, ky, kx) of one group, columns = (n, oy, ox)
// for the images [n0, n0 + nb).
template <typename T>
void im2col(const ConvGeometry& g, const T* x, i64 grp, i64 n0, i64 nb, T* col) {
  const i64 cin_g = g.cin_g(), p = g.ho * g.wo, cols = nb * p;
  for (i64 ic = 0; ic < cin_g; ++ic) {
    for (i64 ky = 0; ky < g.kh; ++ky) {
      for (i64 kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((ic * g.kh + ky) * g.kw + kx) * cols;
        for (i64 n = 0; n < nb; ++n) {
          const T* xp = x + ((n0 + n) * g.cin + grp * cin_g + ic) * g.h * g.w;
          T* dst = row + n * p;
          for (i64 oy = 0; oy < g.ho; ++oy) {
            const i64 iy = oy * g.stride - g.pad + ky;
            T* drow = dst + oy * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill(drow, drow + g.wo, T{0});
              continue;
            }
            const T* xrow = xp + iy * g.w;
            for (i64 ox = 0; ox < g.wo; ++ox) {
              const i64 ix = ox * g.stride - g.pad + kx;
              drow[ox] = (ix < 0 || ix >= g.w) ? T{0} : xrow[ix];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, i64 grp, i64 n0, i64 nb, T* dx) {
  const i64 cin_g = g.cin_g(), p = g.ho * g.wo, cols = nb * p;
  for (i64 ic = 0; ic < cin_g; ++ic) {
    for (i64 ky = 0; ky < g.kh; ++ky) {
      for (i64 kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((ic * g.kh + ky) * g.kw + kx) * cols;
        for (i64 n = 0; n < nb; ++n) {
          T* xp = dx + ((n0 + n) * g.cin + grp * cin_g + ic) * g.h * g.w;
          const T* src = row + n * p;
          for (i64 oy = 0; oy < g.ho; ++oy) {
            const i64 iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            T* xrow = xp + iy * g.w;
            const T* srow = src + oy * g.wo;
            for (i64 ox = 0; ox < g.wo; ++ox) {
              const i64 ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) xrow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

// Number of images per im2col chunk, bounding the column buffer size.
i64 im2col_chunk(const ConvGeometry& g) {
  const i64 per_image = g.cin_g() * g.kh * g.kw * g.ho * g.wo;
  constexpr i64 kBudget = i64{1} << 24;
  return std::clamp<i64>(kBudget / std::max<i64>(per_image, 1), 1, g.n);
}

template <typename T>
void conv_im2col_forward(const ConvGeometry& g, const T* x, const T* w, const T* b, T* y) {
  const i64 cin_g = g.cin_g(), cout_g = g.cout_g(), p = g.ho * g.wo;
  const i64 k = cin_g * g.kh * g.kw;
  const i64 chunk = im2col_chunk(g);
  std::vector<T> col, out;
  for (i64 n0 = 0; n0 < g.n; n0 += chunk) {
    const i64 nb = std::min(chunk, g.n - n0);
    col.resize(static_cast<std::size_t>(k * nb * p));
    out.resize(static_cast<std::size_t>(cout_g * nb * p));
    for (i64 grp = 0; grp < g.groups; ++grp) {
      im2col(g, x, grp, n0, nb, col.data());
      gemm<T>(false, false, cout_g, nb * p, k, T{1}, w + grp * cout_g * k, k, col.data(), nb * p,
              T{0}, out.data(), nb * p);
      for (i64 n = 0; n < nb; ++n) {
        for (i64 oc = 0; oc < cout_g; ++oc) {
          const i64 c = grp * cout_g + oc;
          const T bias = b ? b[c] : T{0};
          const T* src = out.data() + oc * nb * p + n * p;
          T* dst = y + ((n0 + n) * g.cout + c) * p;
          for (i64 i = 0; i < p; ++i) dst[i] = src[i] + bias;
        }
      }
    }
  }
}

template <typename T>
void conv_im2col_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx,
                          T* dw, T* db) {
  const i64 cin_g = g.cin_g(), cout_g = g.cout_g(), p = g.ho * g.wo;
  const i64 k = cin_g * g.kh * g.kw;
  const i64 chunk = im2col_chunk(g);
  std::vector<T> col, dout;
  if (db) {
    for (i64 n = 0; n < g.n; ++n) {
      for (i64 c = 0; c < g.cout; ++c) {
        const T* src = dy + (n * g.cout + c) * p;
        T s{0};
        for (i64 i = 0; i < p; ++i) s += src[i];
        db[c] += s;
      }
    }
  }
  for (i64 n0 = 0; n0 < g.n; n0 += chunk) {
    const i64 nb = std::min(chunk, g.n - n0);
    col.resize(static_cast<std::size_t>(k * nb * p));
    dout.resize(static_cast<std::size_t>(cout_g * nb * p));
    for (i64 grp = 0; grp < g.groups; ++grp) {
      for (i64 n = 0; n < nb; ++n) {
        for (i64 oc = 0; oc < cout_g; ++oc) {
          const T* src = dy + ((n0 + n) * g.cout + grp * cout_g + oc) * p;
          std::copy(src, src + p, dout.data() + oc * nb * p + n * p);
        }
      }
      if (dw) {
        im2col(g, x, grp, n0, nb, col.data());
        gemm<T>(false, true, cout_g, k, nb * p, T{1}, dout.data(), nb * p, col.data(), nb * p,
                T{1}, dw + grp * cout_g * k, k);
      }
      if (dx) {
        gemm<T>(true, false, k, nb * p, cout_g, T{1}, w + grp * cout_g * k, k, dout.data(), nb * p,
                T{0}, col.data(), nb * p);
        col2im(g, col.data(), grp, n0, nb, dx);
      }
    }
  }
}

bool use_direct(const ConvGeometry& g, ConvAlgo algo) {
  if (algo == ConvAlgo::kDirect) return true;
  if (algo == ConvAlgo::kIm2col) return false;
  return g.cin_g() == 1;  // depthwise
}

}  // namespace

// ---------------------------------------------------------------------------

std::int64_t conv_output_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                                std::int64_t padding) {
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  const i64 span = in + 2 * padding - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

template <typename T>
void ConvParams<T>::validate() const {
  if (in_channels <= 0 || out_channels <= 0) throw ConfigError("conv2d: channel counts must be positive");
  if (groups <= 0 || in_channels % groups != 0) {
    throw ConfigError("conv2d: in_channels " + std::to_string(in_channels) +
                      " not divisible by groups " + std::to_string(groups));
  }
  if (out_channels % groups != 0) {
    throw ConfigError("conv2d: out_channels " + std::to_string(out_channels) +
                      " not divisible by groups " + std::to_string(groups));
  }
  const Shape expected{out_channels, in_channels / groups, kernel_h, kernel_w};
  if (!weight.defined() || weight.shape() != expected) {
    throw ConfigError("conv2d: weight shape " +
                      (weight.defined() ? shape_string(weight.shape()) : std::string("<none>")) +
                      " != expected " + shape_string(expected));
  }
  if (bias.defined() && bias.shape() != Shape{out_channels}) {
    throw ConfigError("conv2d: bias shape " + shape_string(bias.shape()) + " != (" +
                      std::to_string(out_channels) + ")");
  }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p, ConvAlgo algo) {
  p.validate();
  require_rank(x.shape(), 4, "conv2d", "input");
  if (x.dim(1) != p.in_channels) {
    throw ConfigError("conv2d: input channel dimension " + std::to_string(x.dim(1)) +
                      " != in_channels " + std::to_string(p.in_channels));
  }
  ConvGeometry g{x.dim(0),  x.dim(1), x.dim(2),   x.dim(3),  p.out_channels, p.kernel_h,
                 p.kernel_w, p.stride, p.padding, p.groups, 0,               0};
  g.ho = conv_output_extent(g.h, g.kh, g.stride, g.pad);
  g.wo = conv_output_extent(g.w, g.kw, g.stride, g.pad);
  if (g.ho < 1) throw ConfigError("conv2d: input height " + std::to_string(g.h) + " too small for kernel");
  if (g.wo < 1) throw ConfigError("conv2d: input width " + std::to_string(g.w) + " too small for kernel");

  Tensor<T> y(Shape{g.n, g.cout, g.ho, g.wo});
  const bool direct = use_direct(g, algo);
  const T* bias = p.bias.defined() ? p.bias.data() : nullptr;
  if (direct) conv_direct_forward(g, x.data(), p.weight.data(), bias, y.mutable_data());
  else conv_im2col_forward(g, x.data(), p.weight.data(), bias, y.mutable_data());

  const std::uint64_t macs = u64(g.n * g.cout * g.ho * g.wo * g.cin_g() * g.kh * g.kw);
  std::vector<Tensor<T>> inputs{x, p.weight};
  if (p.bias.defined()) inputs.push_back(p.bias);
  Tensor<T> xin = x, w = p.weight, b = p.bias;
  return record_op<T>("conv2d", std::move(inputs), y, macs,
                      [g, direct, xin, w, b](std::span<const T> dy) mutable {
                        T* dx = xin.requires_grad() ? xin.grad_buffer().data() : nullptr;
                        T* dw = w.requires_grad() ? w.grad_buffer().data() : nullptr;
                        T* db = (b.defined() && b.requires_grad()) ? b.grad_buffer().data() : nullptr;
                        if (direct) conv_direct_backward(g, xin.data(), w.data(), dy.data(), dx, dw, db);
                        else conv_im2col_backward(g, xin.data(), w.data(), dy.data(), dx, dw, db);
                      });
}

// ---------------------------------------------------------------------------
// Batch norm

template <typename T>
BatchNormState<T> BatchNormState<T>::create(std::int64_t channels) {
  return BatchNormState{Tensor<T>::zeros({channels}), Tensor<T>::ones({channels}),
                        Tensor<T>::zeros({1})};
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormState<T>& state, bool training, BatchNormOptions opts) {
  require_rank(x.shape(), 4, "batch_norm2d", "input");
  const i64 n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ConfigError("batch_norm2d: affine parameters must have shape (" + std::to_string(c) + ")");
  }
  const i64 m = n * hw;
  Tensor<T> y(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> invstd(static_cast<std::size_t>(c));
  const T* xv = x.data();
  T* yv = y.mutable_data();
  const T eps = static_cast<T>(opts.eps);

  if (training) {
    if (m < 2) throw ConfigError("batch_norm2d: training needs more than one value per channel");
    const T mom = static_cast<T>(opts.momentum);
    auto rm = state.running_mean.mutable_values();
    auto rv = state.running_var.mutable_values();
    for (i64 ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (i64 b = 0; b < n; ++b) {
        const T* p = xv + (b * c + ch) * hw;
        for (i64 i = 0; i < hw; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (i64 b = 0; b < n; ++b) {
        const T* p = xv + (b * c + ch) * hw;
        for (i64 i = 0; i < hw; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(m);
      const T is = static_cast<T>(1.0 / std::sqrt(var + opts.eps));
      invstd[ch] = is;
      const T g = gamma.data()[ch], bt = beta.data()[ch];
      for (i64 b = 0; b < n; ++b) {
        const i64 off = (b * c + ch) * hw;
        for (i64 i = 0; i < hw; ++i) {
          const T xh = (xv[off + i] - static_cast<T>(mu)) * is;
          xhat[off + i] = xh;
          yv[off + i] = xh * g + bt;
        }
      }
      const double unbiased = ss / static_cast<double>(m - 1);
      rm[ch] = (T{1} - mom) * rm[ch] + mom * static_cast<T>(mu);
      rv[ch] = (T{1} - mom) * rv[ch] + mom * static_cast<T>(unbiased);
    }
    state.batches_tracked.mutable_values()[0] += T{1};
  } else {
    if (state.batches_tracked.item() <= T{0}) {
      throw ConfigError("batch_norm2d: eval mode requires running statistics from at least one train step");
    }
    for (i64 ch = 0; ch < c; ++ch) {
      const T is = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var.data()[ch]) + opts.eps));
      invstd[ch] = is;
      const T mu = state.running_mean.data()[ch];
      const T g = gamma.data()[ch], bt = beta.data()[ch];
      for (i64 b = 0; b < n; ++b) {
        const i64 off = (b * c + ch) * hw;
        for (i64 i = 0; i < hw; ++i) {
          const T xh = (xv[off + i] - mu) * is;
          xhat[off + i] = xh;
          yv[off + i] = xh * g + bt;
        }
      }
    }
  }
  (void)eps;

  Tensor<T> xin = x, gm = gamma, bt = beta;
  return record_op<T>(
      "batch_norm2d", {x, gamma, beta}, y, u64(x.numel()),
      [n, c, hw, m, training, xhat = std::move(xhat), invstd = std::move(invstd), xin, gm,
       bt](std::span<const T> dy) mutable {
        std::vector<T> sum_dy(static_cast<std::size_t>(c), T{0});
        std::vector<T> sum_dy_xhat(static_cast<std::size_t>(c), T{0});
        for (i64 b = 0; b < n; ++b) {
          for (i64 ch = 0; ch < c; ++ch) {
            const i64 off = (b * c + ch) * hw;
            T s{0}, sx{0};
            for (i64 i = 0; i < hw; ++i) {
              s += dy[off + i];
              sx += dy[off + i] * xhat[off + i];
            }
            sum_dy[ch] += s;
            sum_dy_xhat[ch] += sx;
          }
        }
        if (gm.requires_grad()) accumulate_grad<T>(gm, sum_dy_xhat);
        if (bt.requires_grad()) accumulate_grad<T>(bt, sum_dy);
        if (!xin.requires_grad()) return;
        auto dx = xin.grad_buffer();
        const T inv_m = T{1} / static_cast<T>(m);
        for (i64 b = 0; b < n; ++b) {
          for (i64 ch = 0; ch < c; ++ch) {
            const i64 off = (b * c + ch) * hw;
            const T g = gm.data()[ch];
            const T is = invstd[ch];
            for (i64 i = 0; i < hw; ++i) {
              if (training) {
                dx[off + i] += g * is * inv_m *
                               (static_cast<T>(m) * dy[off + i] - sum_dy[ch] -
                                xhat[off + i] * sum_dy_xhat[ch]);
              } else {
                dx[off + i] += g * is * dy[off + i];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> y(x.shape());
  const T* xv = x.data();
  T* yv = y.mutable_data();
  const i64 n = x.numel();
  if (kind == Activation::kRelu) {
    for (i64 i = 0; i < n; ++i) yv[i] = xv[i] > T{0} ? xv[i] : T{0};
  } else {
    for (i64 i = 0; i < n; ++i) {
      yv[i] = T{0.5} * xv[i] * (T{1} + std::erf(xv[i] * static_cast<T>(std::numbers::sqrt2 / 2)));
    }
  }
  Tensor<T> xin = x;
  return record_op<T>(kind == Activation::kRelu ? "relu" : "gelu", {x}, y, u64(n),
                      [xin, kind, n](std::span<const T> dy) mutable {
                        auto dx = xin.grad_buffer();
                        const T* xv = xin.data();
                        if (kind == Activation::kRelu) {
                          for (i64 i = 0; i < n; ++i) dx[i] += xv[i] > T{0} ? dy[i] : T{0};
                        } else {
                          const T inv_sqrt2 = static_cast<T>(std::numbers::sqrt2 / 2);
                          const T inv_sqrt2pi = static_cast<T>(std::numbers::inv_sqrtpi * std::numbers::sqrt2 / 2);
                          for (i64 i = 0; i < n; ++i) {
                            const T v = xv[i];
                            const T cdf = T{0.5} * (T{1} + std::erf(v * inv_sqrt2));
                            const T pdf = inv_sqrt2pi * std::exp(T{-0.5} * v * v);
                            dx[i] += dy[i] * (cdf + v * pdf);
                          }
                        }
                      });
}

// ---------------------------------------------------------------------------
// Layer norm

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  if (x.rank() < 1) throw ConfigError("layer_norm: input must have rank >= 1");
  const i64 d = x.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ConfigError("layer_norm: affine parameters must have shape (" + std::to_string(d) + ")");
  }
  const i64 rows = d == 0 ? 0 : x.numel() / d;
  Tensor<T> y(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> invstd(static_cast<std::size_t>(rows));
  const T* xv = x.data();
  T* yv = y.mutable_data();
  for (i64 r = 0; r < rows; ++r) {
    const T* p = xv + r * d;
    double s = 0.0;
    for (i64 j = 0; j < d; ++j) s += p[j];
    const double mu = s / static_cast<double>(d);
    double ss = 0.0;
    for (i64 j = 0; j < d; ++j) ss += (p[j] - mu) * (p[j] - mu);
    const T is = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(d) + eps));
    invstd[r] = is;
    for (i64 j = 0; j < d; ++j) {
      const T xh = (p[j] - static_cast<T>(mu)) * is;
      xhat[r * d + j] = xh;
      yv[r * d + j] = xh * gamma.data()[j] + beta.data()[j];
    }
  }
  Tensor<T> xin = x, gm = gamma, bt = beta;
  return record_op<T>(
      "layer_norm", {x, gamma, beta}, y, u64(x.numel()),
      [rows, d, xhat = std::move(xhat), invstd = std::move(invstd), xin, gm,
       bt](std::span<const T> dy) mutable {
        if (gm.requires_grad() || bt.requires_grad()) {
          std::vector<T> dg(static_cast<std::size_t>(d), T{0}), dbv(static_cast<std::size_t>(d), T{0});
          for (i64 r = 0; r < rows; ++r) {
            for (i64 j = 0; j < d; ++j) {
              dg[j] += dy[r * d + j] * xhat[r * d + j];
              dbv[j] += dy[r * d + j];
            }
          }
          accumulate_grad<T>(gm, dg);
          accumulate_grad<T>(bt, dbv);
        }
        if (!xin.requires_grad()) return;
        auto dx = xin.grad_buffer();
        const T* g = gm.data();
        for (i64 r = 0; r < rows; ++r) {
          T s{0}, sx{0};
          for (i64 j = 0; j < d; ++j) {
            const T dxh = dy[r * d + j] * g[j];
            s += dxh;
            sx += dxh * xhat[r * d + j];
          }
          const T scale_r = invstd[r] / static_cast<T>(d);
          for (i64 j = 0; j < d; ++j) {
            const T dxh = dy[r * d + j] * g[j];
            dx[r * d + j] += scale_r * (static_cast<T>(d) * dxh - s - xhat[r * d + j] * sx);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Bilinear interpolation

namespace {
struct AxisTaps {
  std::vector<i64> i0, i1;
  std::vector<double> frac;
};

AxisTaps bilinear_taps(i64 in, i64 out) {
  AxisTaps t;
  t.i0.resize(static_cast<std::size_t>(out));
  t.i1.resize(static_cast<std::size_t>(out));
  t.frac.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (i64 o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    i64 lo = static_cast<i64>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    t.i0[o] = lo;
    t.i1[o] = std::min(lo + 1, in - 1);
    t.frac[o] = src - static_cast<double>(lo);
  }
  return t;
}
}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank(x.shape(), 4, "resize_bilinear", "input");
  if (out_h < 1 || out_w < 1) throw ConfigError("resize_bilinear: output extents must be positive");
  const i64 n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 1 || w < 1) throw ConfigError("resize_bilinear: empty input");
  const AxisTaps ty = bilinear_taps(h, out_h), tx = bilinear_taps(w, out_w);
  Tensor<T> y(Shape{n, c, out_h, out_w});
  const T* xv = x.data();
  T* yv = y.mutable_data();
  for (i64 plane = 0; plane < n * c; ++plane) {
    const T* xp = xv + plane * h * w;
    T* yp = yv + plane * out_h * out_w;
    for (i64 oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      const T* r0 = xp + ty.i0[oy] * w;
      const T* r1 = xp + ty.i1[oy] * w;
      for (i64 ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const i64 a = tx.i0[ox], b = tx.i1[ox];
        const T top = r0[a] + (r0[b] - r0[a]) * fx;
        const T bot = r1[a] + (r1[b] - r1[a]) * fx;
        yp[oy * out_w + ox] = top + (bot - top) * fy;
      }
    }
  }
  Tensor<T> xin = x;
  return record_op<T>("resize_bilinear", {x}, y, u64(y.numel()),
                      [xin, n, c, h, w, out_h, out_w, ty, tx](std::span<const T> dy) mutable {
                        auto dx = xin.grad_buffer();
                        for (i64 plane = 0; plane < n * c; ++plane) {
                          T* xp = dx.data() + plane * h * w;
                          const T* gp = dy.data() + plane * out_h * out_w;
                          for (i64 oy = 0; oy < out_h; ++oy) {
                            const T fy = static_cast<T>(ty.frac[oy]);
                            T* r0 = xp + ty.i0[oy] * w;
                            T* r1 = xp + ty.i1[oy] * w;
                            for (i64 ox = 0; ox < out_w; ++ox) {
                              const T fx = static_cast<T>(tx.frac[ox]);
                              const T g = gp[oy * out_w + ox];
                              const i64 a = tx.i0[ox], b = tx.i1[ox];
                              r0[a] += g * (T{1} - fy) * (T{1} - fx);
                              r0[b] += g * (T{1} - fy) * fx;
                              r1[a] += g * fy * (T{1} - fx);
                              r1[b] += g * fy * fx;
                            }
                          }
                        }
                      });
}

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::int64_t scale_factor) {
  if (scale_factor < 1) throw ConfigError("upsample_bilinear: scale must be a positive integer");
  require_rank(x.shape(), 4, "upsample_bilinear", "input");
  return resize_bilinear(x, x.dim(2) * scale_factor, x.dim(3) * scale_factor);
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y(a.shape());
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) y.mutable_data()[i] = a.data()[i] + b.data()[i];
  Tensor<T> ai = a, bi = b;
  return record_op<T>("add", {a, b}, y, u64(n), [ai, bi](std::span<const T> dy) mutable {
    accumulate_grad<T>(ai, dy);
    accumulate_grad<T>(bi, dy);
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y(a.shape());
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) y.mutable_data()[i] = a.data()[i] - b.data()[i];
  Tensor<T> ai = a, bi = b;
  return record_op<T>("sub", {a, b}, y, u64(n), [ai, bi, n](std::span<const T> dy) mutable {
    accumulate_grad<T>(ai, dy);
    if (bi.requires_grad()) {
      auto g = bi.grad_buffer();
      for (i64 i = 0; i < n; ++i) g[i] -= dy[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y(a.shape());
  const i64 n = a.numel();
  for (i64 i = 0; i < n; ++i) y.mutable_data()[i] = a.data()[i] * b.data()[i];
  Tensor<T> ai = a, bi = b;
  return record_op<T>("mul", {a, b}, y, u64(n), [ai, bi, n](std::span<const T> dy) mutable {
    if (ai.requires_grad()) {
      auto g = ai.grad_buffer();
      for (i64 i = 0; i < n; ++i) g[i] += dy[i] * bi.data()[i];
    }
    if (bi.requires_grad()) {
      auto g = bi.grad_buffer();
      for (i64 i = 0; i < n; ++i) g[i] += dy[i] * ai.data()[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> y(x.shape());
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) y.mutable_data()[i] = x.data()[i] * factor;
  Tensor<T> xi = x;
  return record_op<T>("scale", {x}, y, u64(n), [xi, factor, n](std::span<const T> dy) mutable {
    auto g = xi.grad_buffer();
    for (i64 i = 0; i < n; ++i) g[i] += dy[i] * factor;
  });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ConfigError("concat_channels: no inputs");
  for (const auto& t : xs) require_rank(t.shape(), 4, "concat_channels", "input");
  const i64 n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  i64 c_total = 0;
  for (const auto& t : xs) {
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w) {
      throw ConfigError("concat_channels: non-channel dims differ: " + shape_string(xs[0].shape()) +
                        " vs " + shape_string(t.shape()));
    }
    c_total += t.dim(1);
  }
  const i64 hw = h * w;
  Tensor<T> y(Shape{n, c_total, h, w});
  i64 c_off = 0;
  std::vector<i64> offsets;
  for (const auto& t : xs) {
    offsets.push_back(c_off);
    const i64 c = t.dim(1);
    for (i64 b = 0; b < n; ++b) {
      std::copy(t.data() + b * c * hw, t.data() + (b + 1) * c * hw,
                y.mutable_data() + (b * c_total + c_off) * hw);
    }
    c_off += c;
  }
  std::vector<Tensor<T>> ins = xs;
  return record_op<T>("concat", xs, y, 0,
                      [ins, offsets, n, hw, c_total](std::span<const T> dy) mutable {
                        for (std::size_t k = 0; k < ins.size(); ++k) {
                          if (!ins[k].requires_grad()) continue;
                          const i64 c = ins[k].dim(1);
                          auto g = ins[k].grad_buffer();
                          for (i64 b = 0; b < n; ++b) {
                            const T* src = dy.data() + (b * c_total + offsets[k]) * hw;
                            T* dst = g.data() + b * c * hw;
                            for (i64 i = 0; i < c * hw; ++i) dst[i] += src[i];
                          }
                        }
                      });
}

// ---------------------------------------------------------------------------
// Linear

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) throw ConfigError("linear: weight must be (out, in)");
  const i64 out = weight.dim(0), in = weight.dim(1);
  if (x.rank() < 1 || x.dim(-1) != in) {
    throw ConfigError("linear: input feature dimension " + std::to_string(x.rank() ? x.dim(-1) : 0) +
                      " != weight in_features " + std::to_string(in));
  }
  if (bias.defined() && bias.shape() != Shape{out}) throw ConfigError("linear: bias shape mismatch");
  const i64 rows = x.numel() / in;
  Shape ys = x.shape();
  ys.back() = out;
  Tensor<T> y(ys);
  gemm<T>(false, true, rows, out, in, T{1}, x.data(), in, weight.data(), in, T{0}, y.mutable_data(), out);
  if (bias.defined()) {
    for (i64 r = 0; r < rows; ++r)
      for (i64 j = 0; j < out; ++j) y.mutable_data()[r * out + j] += bias.data()[j];
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  Tensor<T> xi = x, wi = weight, bi = bias;
  return record_op<T>("linear", std::move(inputs), y, u64(rows * in * out),
                      [xi, wi, bi, rows, in, out](std::span<const T> dy) mutable {
                        if (xi.requires_grad()) {
                          gemm<T>(false, false, rows, in, out, T{1}, dy.data(), out, wi.data(), in,
                                  T{1}, xi.grad_buffer().data(), in);
                        }
                        if (wi.requires_grad()) {
                          gemm<T>(true, false, out, in, rows, T{1}, dy.data(), out, xi.data(), in,
                                  T{1}, wi.grad_buffer().data(), in);
                        }
                        if (bi.defined() && bi.requires_grad()) {
                          auto g = bi.grad_buffer();
                          for (i64 r = 0; r < rows; ++r)
                            for (i64 j = 0; j < out; ++j) g[j] += dy[r * out + j];
                        }
                      });
}

// ---------------------------------------------------------------------------
// Attention

namespace {
template <typename T>
void attention_shapes(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>* v) {
  require_rank(q.shape(), 4, "attention", "q");
  require_rank(k.shape(), 4, "attention", "k");
  if (q.dim(0) != k.dim(0) || q.dim(1) != k.dim(1) || q.dim(3) != k.dim(3)) {
    throw ConfigError("attention: q " + shape_string(q.shape()) + " incompatible with k " +
                      shape_string(k.shape()));
  }
  if (v) {
    require_rank(v->shape(), 4, "attention", "v");
    if (v->dim(0) != k.dim(0) || v->dim(1) != k.dim(1) || v->dim(2) != k.dim(2)) {
      throw ConfigError("attention: v " + shape_string(v->shape()) + " incompatible with k " +
                        shape_string(k.shape()));
    }
  }
}

// Row-wise softmax of q k^T * scale for every (batch, head): probs is (B*H, L, Lk).
template <typename T>
std::vector<T> softmax_scores(const Tensor<T>& q, const Tensor<T>& k) {
  const i64 bh = q.dim(0) * q.dim(1), l = q.dim(2), lk = k.dim(2), d = q.dim(3);
  const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<T> probs(static_cast<std::size_t>(bh * l * lk));
  for (i64 i = 0; i < bh; ++i) {
    T* s = probs.data() + i * l * lk;
    gemm<T>(false, true, l, lk, d, sc, q.data() + i * l * d, d, k.data() + i * lk * d, d, T{0}, s, lk);
    for (i64 r = 0; r < l; ++r) {
      T* row = s + r * lk;
      const T mx = *std::max_element(row, row + lk);
      T z{0};
      for (i64 j = 0; j < lk; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (i64 j = 0; j < lk; ++j) row[j] /= z;
    }
  }
  return probs;
}
}  // namespace

template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k) {
  attention_shapes<T>(q, k, nullptr);
  return Tensor<T>(Shape{q.dim(0), q.dim(1), q.dim(2), k.dim(2)}, softmax_scores(q, k));
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  attention_shapes<T>(q, k, &v);
  const i64 bh = q.dim(0) * q.dim(1), l = q.dim(2), lk = k.dim(2), d = q.dim(3), dv = v.dim(3);
  std::vector<T> probs = softmax_scores(q, k);
  Tensor<T> y(Shape{q.dim(0), q.dim(1), l, dv});
  for (i64 i = 0; i < bh; ++i) {
    gemm<T>(false, false, l, dv, lk, T{1}, probs.data() + i * l * lk, lk, v.data() + i * lk * dv, dv,
            T{0}, y.mutable_data() + i * l * dv, dv);
  }
  const std::uint64_t macs = u64(bh * l * lk * (d + dv) + bh * l * lk);
  Tensor<T> qi = q, ki = k, vi = v;
  return record_op<T>(
      "attention", {q, k, v}, y, macs,
      [qi, ki, vi, probs = std::move(probs), bh, l, lk, d, dv](std::span<const T> dy) mutable {
        const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
        std::vector<T> dp(static_cast<std::size_t>(l * lk));
        for (i64 i = 0; i < bh; ++i) {
          const T* p = probs.data() + i * l * lk;
          const T* g = dy.data() + i * l * dv;
          if (vi.requires_grad()) {
            gemm<T>(true, false, lk, dv, l, T{1}, p, lk, g, dv, T{1},
                    vi.grad_buffer().data() + i * lk * dv, dv);
          }
          if (!qi.requires_grad() && !ki.requires_grad()) continue;
          gemm<T>(false, true, l, lk, dv, T{1}, g, dv, vi.data() + i * lk * dv, dv, T{0}, dp.data(), lk);
          for (i64 r = 0; r < l; ++r) {
            T dot{0};
            for (i64 j = 0; j < lk; ++j) dot += dp[r * lk + j] * p[r * lk + j];
            for (i64 j = 0; j < lk; ++j) dp[r * lk + j] = p[r * lk + j] * (dp[r * lk + j] - dot);
          }
          if (qi.requires_grad()) {
            gemm<T>(false, false, l, d, lk, sc, dp.data(), lk, ki.data() + i * lk * d, d, T{1},
                    qi.grad_buffer().data() + i * l * d, d);
          }
          if (ki.requires_grad()) {
            gemm<T>(true, false, lk, d, l, sc, dp.data(), lk, qi.data() + i * l * d, d, T{1},
                    ki.grad_buffer().data() + i * lk * d, d);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layout permutations

namespace {
// Generic (B, R, C) -> (B, C, R) transpose over the last two logical axes.
template <typename T>
void transpose_batched(const T* src, T* dst, i64 b, i64 r, i64 c, bool accumulate) {
  for (i64 n = 0; n < b; ++n) {
    const T* s = src + n * r * c;
    T* d = dst + n * r * c;
    for (i64 i = 0; i < r; ++i)
      for (i64 j = 0; j < c; ++j) {
        if (accumulate) d[j * r + i] += s[i * c + j];
        else d[j * r + i] = s[i * c + j];
      }
  }
}
}  // namespace

template <typename T>
Tensor<T> tokens_from_map(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "tokens_from_map", "input");
  const i64 n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y(Shape{n, hw, c});
  transpose_batched(x.data(), y.mutable_data(), n, c, hw, false);
  Tensor<T> xi = x;
  return record_op<T>("tokens_from_map", {x}, y, 0, [xi, n, c, hw](std::span<const T> dy) mutable {
    transpose_batched(dy.data(), xi.grad_buffer().data(), n, hw, c, true);
  });
}

template <typename T>
Tensor<T> map_from_tokens(const Tensor<T>& tokens, std::int64_t h, std::int64_t w) {
  require_rank(tokens.shape(), 3, "map_from_tokens", "tokens");
  const i64 n = tokens.dim(0), l = tokens.dim(1), c = tokens.dim(2);
  if (l != h * w) {
    throw ConfigError("map_from_tokens: token count " + std::to_string(l) + " != " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  Tensor<T> y(Shape{n, c, h, w});
  transpose_batched(tokens.data(), y.mutable_data(), n, l, c, false);
  Tensor<T> ti = tokens;
  return record_op<T>("map_from_tokens", {tokens}, y, 0, [ti, n, l, c](std::span<const T> dy) mutable {
    transpose_batched(dy.data(), ti.grad_buffer().data(), n, c, l, true);
  });
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::int64_t heads) {
  require_rank(x.shape(), 3, "split_heads", "input");
  const i64 n = x.dim(0), l = x.dim(1), dm = x.dim(2);
  if (heads < 1 || dm % heads != 0) {
    throw ConfigError("split_heads: width " + std::to_string(dm) + " not divisible by heads " +
                      std::to_string(heads));
  }
  const i64 d = dm / heads;
  Tensor<T> y(Shape{n, heads, l, d});
  auto idx = [=](i64 b, i64 t, i64 hh, i64 j) { return ((b * heads + hh) * l + t) * d + j; };
  for (i64 b = 0; b < n; ++b)
    for (i64 t = 0; t < l; ++t)
      for (i64 hh = 0; hh < heads; ++hh)
        for (i64 j = 0; j < d; ++j) y.mutable_data()[idx(b, t, hh, j)] = x.data()[(b * l + t) * dm + hh * d + j];
  Tensor<T> xi = x;
  return record_op<T>("split_heads", {x}, y, 0, [xi, n, l, heads, d, dm, idx](std::span<const T> dy) mutable {
    auto g = xi.grad_buffer();
    for (i64 b = 0; b < n; ++b)
      for (i64 t = 0; t < l; ++t)
        for (i64 hh = 0; hh < heads; ++hh)
          for (i64 j = 0; j < d; ++j) g[(b * l + t) * dm + hh * d + j] += dy[idx(b, t, hh, j)];
  });
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "merge_heads", "input");
  const i64 n = x.dim(0), heads = x.dim(1), l = x.dim(2), d = x.dim(3), dm = heads * d;
  Tensor<T> y(Shape{n, l, dm});
  auto idx = [=](i64 b, i64 t, i64 hh, i64 j) { return ((b * heads + hh) * l + t) * d + j; };
  for (i64 b = 0; b < n; ++b)
    for (i64 t = 0; t < l; ++t)
      for (i64 hh = 0; hh < heads; ++hh)
        for (i64 j = 0; j < d; ++j) y.mutable_data()[(b * l + t) * dm + hh * d + j] = x.data()[idx(b, t, hh, j)];
  Tensor<T> xi = x;
  return record_op<T>("merge_heads", {x}, y, 0, [xi, n, l, heads, d, dm, idx](std::span<const T> dy) mutable {
    auto g = xi.grad_buffer();
    for (i64 b = 0; b < n; ++b)
      for (i64 t = 0; t < l; ++t)
        for (i64 hh = 0; hh < heads; ++hh)
          for (i64 j = 0; j < d; ++j) g[idx(b, t, hh, j)] += dy[(b * l + t) * dm + hh * d + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s{0};
  for (auto v : x.values()) s += v;
  Tensor<T> xi = x;
  const i64 n = x.numel();
  return record_op<T>("sum", {x}, Tensor<T>::scalar(s), u64(n), [xi, n](std::span<const T> dy) mutable {
    auto g = xi.grad_buffer();
    for (i64 i = 0; i < n; ++i) g[i] += dy[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ConfigError("mean: empty tensor");
  T s{0};
  for (auto v : x.values()) s += v;
  const i64 n = x.numel();
  Tensor<T> xi = x;
  return record_op<T>("mean", {x}, Tensor<T>::scalar(s / static_cast<T>(n)), u64(n),
                      [xi, n](std::span<const T> dy) mutable {
                        auto g = xi.grad_buffer();
                        const T share = dy[0] / static_cast<T>(n);
                        for (i64 i = 0; i < n; ++i) g[i] += share;
                      });
}

#define DSNET_INSTANTIATE(T)                                                                    \
  template struct ConvParams<T>;                                                                \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const ConvParams<T>&, ConvAlgo);               \
  template struct BatchNormState<T>;                                                            \
  template Tensor<T> batch_norm2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                     BatchNormState<T>&, bool, BatchNormOptions);               \
  template Tensor<T> activation<T>(const Tensor<T>&, Activation);                               \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> resize_bilinear<T>(const Tensor<T>&, std::int64_t, std::int64_t);         \
  template Tensor<T> upsample_bilinear<T>(const Tensor<T>&, std::int64_t);                      \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                             \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                         \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> attention_weights<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> tokens_from_map<T>(const Tensor<T>&);                                      \
  template Tensor<T> map_from_tokens<T>(const Tensor<T>&, std::int64_t, std::int64_t);         \
  template Tensor<T> split_heads<T>(const Tensor<T>&, std::int64_t);                            \
  template Tensor<T> merge_heads<T>(const Tensor<T>&);                                          \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                  \
  template Tensor<T> mean<T>(const Tensor<T>&);

DSNET_INSTANTIATE(float)
DSNET_INSTANTIATE(double)
#undef DSNET_INSTANTIATE

}  // namespace dsnet
