// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <string>

#include "clseg/numerics/tape.hpp"

namespace clseg {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Activation { relu, sigmoid };
enum class PoolMode { max, avg };

/// Sliding-window geometry shared by conv2d and its adjoint. `height`/`width`
/// describe the dense side, `out_h`/`out_w` the strided side.
struct ConvGeometry {
  Index batch, channels, height, width;
  Index kernel_h, kernel_w, stride, padding;
  Index out_h, out_w;

  Index patch() const { return channels * kernel_h * kernel_w; }
  Index positions() const { return out_h * out_w; }
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

/// Unfolds NCHW input into a [C*kh*kw, N*out_h*out_w] row-major matrix.
template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, RowMatrix<Scalar>& col) {
  const Index positions = g.positions();
  col.setZero(g.patch(), g.batch * positions);
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        Scalar* row = col.row((c * g.kernel_h + ki) * g.kernel_w + kj).data();
        for (Index n = 0; n < g.batch; ++n) {
          const Scalar* plane = x + (n * g.channels + c) * g.height * g.width;
          Scalar* dst = row + n * positions;
          for (Index oy = 0; oy < g.out_h; ++oy) {
            const Index iy = oy * g.stride - g.padding + ki;
            if (iy < 0 || iy >= g.height) continue;
            for (Index ox = 0; ox < g.out_w; ++ox) {
              const Index ix = ox * g.stride - g.padding + kj;
              if (ix >= 0 && ix < g.width) dst[oy * g.out_w + ox] = plane[iy * g.width + ix];
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-and-adds columns back into NCHW `x`.
template <typename Scalar>
void col2im(const RowMatrix<Scalar>& col, const ConvGeometry& g, Scalar* x) {
  const Index positions = g.positions();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        const Scalar* row = col.row((c * g.kernel_h + ki) * g.kernel_w + kj).data();
        for (Index n = 0; n < g.batch; ++n) {
          Scalar* plane = x + (n * g.channels + c) * g.height * g.width;
          const Scalar* src = row + n * positions;
          for (Index oy = 0; oy < g.out_h; ++oy) {
            const Index iy = oy * g.stride - g.padding + ki;
            if (iy < 0 || iy >= g.height) continue;
            for (Index ox = 0; ox < g.out_w; ++ox) {
              const Index ix = ox * g.stride - g.padding + kj;
              if (ix >= 0 && ix < g.width) plane[iy * g.width + ix] += src[oy * g.out_w + ox];
            }
          }
        }
      }
    }
  }
}

/// NCHW buffer -> [C, N*H*W] matrix.
template <typename Scalar>
RowMatrix<Scalar> channels_first(const Scalar* x, Index n, Index c, Index plane) {
  RowMatrix<Scalar> m(c, n * plane);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < c; ++k)
      std::copy_n(x + (i * c + k) * plane, plane, m.row(k).data() + i * plane);
  return m;
}

/// [C, N*H*W] matrix -> NCHW buffer (accumulating when `add`).
template <typename Scalar>
void batch_first(const RowMatrix<Scalar>& m, Index n, Index c, Index plane, Scalar* out, bool add) {
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < c; ++k) {
      const Scalar* src = m.row(k).data() + i * plane;
      Scalar* dst = out + (i * c + k) * plane;
      if (add) {
        for (Index p = 0; p < plane; ++p) dst[p] += src[p];
      } else {
        std::copy_n(src, plane, dst);
      }
    }
  }
}

template <typename Scalar>
using ConstMap = Eigen::Map<const RowMatrix<Scalar>>;

}  // namespace detail

/// 2-d convolution. input [N,C,H,W], kernel [K,C,kh,kw], bias [K] -> [N,K,H',W'].
template <typename Scalar>
Var conv2d(Tape<Scalar>& tape, Var input, Var kernel, Var bias, Index stride, Index padding) {
  using detail::require;
  const auto& xs = tape.shape(input);
  const auto& ks = tape.shape(kernel);
  const auto& bs = tape.shape(bias);
  require(xs.size() == 4 && ks.size() == 4 && bs.size() == 1,
          "conv2d expects input rank 4, kernel rank 4, bias rank 1; got " + shape_str(xs) + ", " +
              shape_str(ks) + ", " + shape_str(bs));
  require(stride >= 1 && padding >= 0, "conv2d stride must be >= 1 and padding >= 0");
  require(ks[1] == xs[1], "conv2d channel mismatch: input " + shape_str(xs) + " kernel " + shape_str(ks));
  require(bs[0] == ks[0], "conv2d bias " + shape_str(bs) + " does not match kernel " + shape_str(ks));
  require(ks[2] <= xs[2] + 2 * padding && ks[3] <= xs[3] + 2 * padding,
          "conv2d kernel " + shape_str(ks) + " larger than padded input " + shape_str(xs));

  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ks[2], ks[3], stride, padding, 0, 0};
  g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;
  const Index out_channels = ks[0];

  auto col = std::make_shared<RowMatrix<Scalar>>();
  detail::im2col(tape.value(input).data(), g, *col);
  detail::ConstMap<Scalar> w(tape.value(kernel).data(), out_channels, g.patch());
  RowMatrix<Scalar> out = w * (*col);
  out.colwise() += tape.value(bias).values();

  Tensor<Scalar> y({g.batch, out_channels, g.out_h, g.out_w});
  detail::batch_first(out, g.batch, out_channels, g.positions(), y.data(), false);

  return tape.record("conv2d", std::move(y), {input, kernel, bias},
                     [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
                       RowMatrix<Scalar> dout =
                           detail::channels_first(gy.data(), g.batch, out_channels, g.positions());
                       if (t.requires_grad(bias)) t.grad(bias) += dout.rowwise().sum();
                       if (t.requires_grad(kernel)) {
                         RowMatrix<Scalar> dw = dout * col->transpose();
                         t.grad(kernel) += Eigen::Map<const typename Tape<Scalar>::Buffer>(dw.data(), dw.size());
                       }
                       if (t.requires_grad(input)) {
                         detail::ConstMap<Scalar> wk(t.value(kernel).data(), out_channels, g.patch());
                         RowMatrix<Scalar> dcol = wk.transpose() * dout;
                         detail::col2im(dcol, g, t.grad(input).data());
                       }
                     });
}

/// Transposed convolution (adjoint of conv2d w.r.t. its input).
/// input [N,C,H,W], kernel [C,K,kh,kw], bias [K] -> [N,K,(H-1)*stride-2p+kh, ...].
template <typename Scalar>
Var transpose_conv2d(Tape<Scalar>& tape, Var input, Var kernel, Var bias, Index stride, Index padding) {
  using detail::require;
  const auto& xs = tape.shape(input);
  const auto& ks = tape.shape(kernel);
  const auto& bs = tape.shape(bias);
  require(xs.size() == 4 && ks.size() == 4 && bs.size() == 1,
          "transpose_conv2d expects input rank 4, kernel rank 4, bias rank 1; got " + shape_str(xs) +
              ", " + shape_str(ks) + ", " + shape_str(bs));
  require(stride >= 1 && padding >= 0, "transpose_conv2d stride must be >= 1 and padding >= 0");
  require(ks[0] == xs[1],
          "transpose_conv2d channel mismatch: input " + shape_str(xs) + " kernel " + shape_str(ks));
  require(bs[0] == ks[1], "transpose_conv2d bias " + shape_str(bs) + " does not match kernel " + shape_str(ks));
  const Index out_h = (xs[2] - 1) * stride - 2 * padding + ks[2];
  const Index out_w = (xs[3] - 1) * stride - 2 * padding + ks[3];
  require(out_h > 0 && out_w > 0, "transpose_conv2d output would be empty for input " + shape_str(xs));

  // Geometry of the forward conv that maps the output back onto the input.
  const ConvGeometry g{xs[0], ks[1], out_h, out_w, ks[2], ks[3], stride, padding, xs[2], xs[3]};
  const Index in_channels = xs[1];

  auto xm = std::make_shared<RowMatrix<Scalar>>(
      detail::channels_first(tape.value(input).data(), g.batch, in_channels, g.positions()));
  detail::ConstMap<Scalar> w(tape.value(kernel).data(), in_channels, g.patch());
  RowMatrix<Scalar> col = w.transpose() * (*xm);

  Tensor<Scalar> y({g.batch, g.channels, out_h, out_w});
  detail::col2im(col, g, y.data());
  const auto& b = tape.value(bias);
  for (Index n = 0; n < g.batch; ++n)
    for (Index k = 0; k < g.channels; ++k)
      y.values().segment((n * g.channels + k) * out_h * out_w, out_h * out_w).array() += b[k];

  return tape.record("transpose_conv2d", std::move(y), {input, kernel, bias},
                     [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
                       const Index plane = g.height * g.width;
                       if (t.requires_grad(bias)) {
                         auto& gb = t.grad(bias);
                         for (Index n = 0; n < g.batch; ++n)
                           for (Index k = 0; k < g.channels; ++k)
                             gb[k] += gy.segment((n * g.channels + k) * plane, plane).sum();
                       }
                       if (!t.requires_grad(kernel) && !t.requires_grad(input)) return;
                       RowMatrix<Scalar> dcol;
                       detail::im2col(gy.data(), g, dcol);
                       if (t.requires_grad(kernel)) {
                         RowMatrix<Scalar> dw = (*xm) * dcol.transpose();
                         t.grad(kernel) += Eigen::Map<const typename Tape<Scalar>::Buffer>(dw.data(), dw.size());
                       }
                       if (t.requires_grad(input)) {
                         detail::ConstMap<Scalar> wk(t.value(kernel).data(), in_channels, g.patch());
                         RowMatrix<Scalar> dx = wk * dcol;
                         detail::batch_first(dx, g.batch, in_channels, g.positions(), t.grad(input).data(), true);
                       }
                     });
}

/// 2x2 pooling with stride 2.
template <typename Scalar>
Var pool2(Tape<Scalar>& tape, Var input, PoolMode mode) {
  const auto& xs = tape.shape(input);
  detail::require(xs.size() == 4, "pool2 expects rank-4 input, got " + shape_str(xs));
  detail::require(xs[2] % 2 == 0 && xs[3] % 2 == 0, "pool2 needs even spatial dims, got " + shape_str(xs));
  const Index planes = xs[0] * xs[1], h = xs[2], w = xs[3], oh = h / 2, ow = w / 2;
  const auto& x = tape.value(input);
  Tensor<Scalar> y({xs[0], xs[1], oh, ow});
  auto argmax = std::make_shared<std::vector<Index>>();
  if (mode == PoolMode::max) argmax->resize(static_cast<std::size_t>(y.size()));

  for (Index p = 0; p < planes; ++p) {
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        const Index base = p * h * w + 2 * oy * w + 2 * ox;
        const Index cells[4] = {base, base + 1, base + w, base + w + 1};
        const Index out = (p * oh + oy) * ow + ox;
        if (mode == PoolMode::max) {
          Index best = cells[0];
          for (Index c : cells)
            if (x[c] > x[best]) best = c;
          y[out] = x[best];
          (*argmax)[static_cast<std::size_t>(out)] = best;
        } else {
          y[out] = (x[cells[0]] + x[cells[1]] + x[cells[2]] + x[cells[3]]) * Scalar(0.25);
        }
      }
    }
  }
  return tape.record("pool2", std::move(y), {input},
                     [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
                       auto& gx = t.grad(input);
                       if (mode == PoolMode::max) {
                         for (Index i = 0; i < gy.size(); ++i) gx[(*argmax)[static_cast<std::size_t>(i)]] += gy[i];
                         return;
                       }
                       for (Index p = 0; p < planes; ++p)
                         for (Index oy = 0; oy < oh; ++oy)
                           for (Index ox = 0; ox < ow; ++ox) {
                             const Index base = p * h * w + 2 * oy * w + 2 * ox;
                             const Scalar g = gy[(p * oh + oy) * ow + ox] * Scalar(0.25);
                             gx[base] += g;
                             gx[base + 1] += g;
                             gx[base + w] += g;
                             gx[base + w + 1] += g;
                           }
                     });
}

template <typename Scalar>
Var activation(Tape<Scalar>& tape, Var input, Activation kind) {
  const auto& x = tape.value(input);
  Tensor<Scalar> y(x.shape());
  if (kind == Activation::relu) {
    y.values() = x.values().cwiseMax(Scalar(0));
  } else {
    y.values() = (Scalar(1) + (-x.values().array()).exp()).inverse().matrix();
  }
  const Var out_placeholder{tape.size()};
  return tape.record(kind == Activation::relu ? "relu" : "sigmoid", std::move(y), {input},
                     [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
                       const auto& yv = t.value(out_placeholder).values().array();
                       if (kind == Activation::relu) {
                         t.grad(input).array() += (yv > Scalar(0)).select(gy.array(), Scalar(0));
                       } else {
                         t.grad(input).array() += gy.array() * yv * (Scalar(1) - yv);
                       }
                     });
}

/// Concatenates two NCHW tensors along channels.
template <typename Scalar>
Var concat_channels(Tape<Scalar>& tape, Var a, Var b) {
  const auto& as = tape.shape(a);
  const auto& bs = tape.shape(b);
  detail::require(as.size() == 4 && bs.size() == 4 && as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3],
                  "concat_channels shape mismatch: " + shape_str(as) + " vs " + shape_str(bs));
  const Index n = as[0], ca = as[1], cb = bs[1], plane = as[2] * as[3];
  Tensor<Scalar> y({n, ca + cb, as[2], as[3]});
  const auto& av = tape.value(a).values();
  const auto& bv = tape.value(b).values();
  for (Index i = 0; i < n; ++i) {
    y.values().segment(i * (ca + cb) * plane, ca * plane) = av.segment(i * ca * plane, ca * plane);
    y.values().segment((i * (ca + cb) + ca) * plane, cb * plane) = bv.segment(i * cb * plane, cb * plane);
  }
  return tape.record("concat_channels", std::move(y), {a, b},
                     [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
                       if (t.requires_grad(a)) {
                         auto& ga = t.grad(a);
                         for (Index i = 0; i < n; ++i)
                           ga.segment(i * ca * plane, ca * plane) += gy.segment(i * (ca + cb) * plane, ca * plane);
                       }
                       if (t.requires_grad(b)) {
                         auto& gb = t.grad(b);
                         for (Index i = 0; i < n; ++i)
                           gb.segment(i * cb * plane, cb * plane) +=
                               gy.segment((i * (ca + cb) + ca) * plane, cb * plane);
                       }
                     });
}

/// Fully connected layer. input [N,F], weight [O,F], bias [O] -> [N,O].
template <typename Scalar>
Var linear(Tape<Scalar>& tape, Var input, Var weight, Var bias) {
  const auto& xs = tape.shape(input);
  const auto& ws = tape.shape(weight);
  const auto& bs = tape.shape(bias);
  detail::require(xs.size() == 2 && ws.size() == 2 && bs.size() == 1 && ws[1] == xs[1] && bs[0] == ws[0],
                  "linear shape mismatch: input " + shape_str(xs) + " weight " + shape_str(ws) + " bias " +
                      shape_str(bs));
  const Index n = xs[0], f = xs[1], o = ws[0];
  detail::ConstMap<Scalar> x(tape.value(input).data(), n, f);
  detail::ConstMap<Scalar> w(tape.value(weight).data(), o, f);
  Tensor<Scalar> y({n, o});
  Eigen::Map<RowMatrix<Scalar>> ym(y.data(), n, o);
  ym.noalias() = x * w.transpose();
  ym.rowwise() += tape.value(bias).values().transpose();
  return tape.record("linear", std::move(y), {input, weight, bias},
                     [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
                       detail::ConstMap<Scalar> dy(gy.data(), n, o);
                       if (t.requires_grad(bias)) t.grad(bias) += dy.colwise().sum().transpose();
                       if (t.requires_grad(weight)) {
                         Eigen::Map<RowMatrix<Scalar>> dw(t.grad(weight).data(), o, f);
                         dw.noalias() += dy.transpose() * detail::ConstMap<Scalar>(t.value(input).data(), n, f);
                       }
                       if (t.requires_grad(input)) {
                         Eigen::Map<RowMatrix<Scalar>> dx(t.grad(input).data(), n, f);
                         dx.noalias() += dy * detail::ConstMap<Scalar>(t.value(weight).data(), o, f);
                       }
                     });
}

template <typename Scalar>
Var reshape(Tape<Scalar>& tape, Var input, Shape shape) {
  Tensor<Scalar> y = tape.value(input).reshaped(std::move(shape));
  return tape.record("reshape", std::move(y), {input},
                     [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) { t.grad(input) += gy; });
}

template <typename Scalar>
Var add(Tape<Scalar>& tape, Var a, Var b) {
  detail::require(tape.shape(a) == tape.shape(b),
                  "add shape mismatch: " + shape_str(tape.shape(a)) + " vs " + shape_str(tape.shape(b)));
  Tensor<Scalar> y(tape.shape(a), tape.value(a).values() + tape.value(b).values());
  return tape.record("add", std::move(y), {a, b}, [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
    if (t.requires_grad(a)) t.grad(a) += gy;
    if (t.requires_grad(b)) t.grad(b) += gy;
  });
}

template <typename Scalar>
Var scale(Tape<Scalar>& tape, Var a, Scalar factor) {
  Tensor<Scalar> y(tape.shape(a), tape.value(a).values() * factor);
  return tape.record("scale", std::move(y), {a}, [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
    t.grad(a) += gy * factor;
  });
}

template <typename Scalar>
Var sum(Tape<Scalar>& tape, Var a) {
  Tensor<Scalar> y({1});
  y[0] = tape.value(a).values().sum();
  return tape.record("sum", std::move(y), {a}, [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
    t.grad(a).array() += gy[0];
  });
}

/// Σ weight·(x − anchor)², the building block of importance-weighted penalties.
template <typename Scalar>
Var weighted_sq_dist(Tape<Scalar>& tape, Var x, const Tensor<Scalar>& anchor, const Tensor<Scalar>& weight) {
  const auto& xv = tape.value(x);
  if (xv.shape() != anchor.shape() || xv.shape() != weight.shape()) {
    throw SchemaError("weighted_sq_dist shape mismatch: " + shape_str(xv.shape()) + ", anchor " +
                      shape_str(anchor.shape()) + ", weight " + shape_str(weight.shape()));
  }
  auto diff = std::make_shared<typename Tensor<Scalar>::Buffer>(xv.values() - anchor.values());
  auto w = std::make_shared<typename Tensor<Scalar>::Buffer>(weight.values());
  Tensor<Scalar> y({1});
  y[0] = (w->array() * diff->array().square()).sum();
  return tape.record("weighted_sq_dist", std::move(y), {x},
                     [=](Tape<Scalar>& t, const typename Tape<Scalar>::Buffer& gy) {
                       t.grad(x).array() += Scalar(2) * gy[0] * w->array() * diff->array();
                     });
}

}  // namespace clseg
