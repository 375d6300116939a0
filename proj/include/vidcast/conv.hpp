#pragma once

// Image-tensor ops on (batch, channel, height, width) layouts.

#include <cmath>

#include "vidcast/autodiff.hpp"

namespace vidcast::ad {

struct ConvGeometry {
  std::size_t channels, height, width;  // input planes
  std::size_t kernel, stride, pad;
  std::size_t out_h, out_w;             // column grid

  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t grid() const { return out_h * out_w; }
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (in + 2 * p < k) throw ShapeError("convolution kernel larger than padded input");
  return (in + 2 * p - k) / s + 1;
}

// cols: (C*k*k) x (out_h*out_w)
inline void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const auto k = g.kernel;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * g.grid();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 &&
                                iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            row[oy * g.out_w + ox] =
                inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                             static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
}

// Scatter-add columns back onto the image planes.
inline void col2im(const double* cols, const ConvGeometry& g, double* img) {
  const auto k = g.kernel;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * g.grid();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
}

namespace detail {

inline void require_nchw(const Var& x, const char* what) {
  if (x.value().rank() != 4)
    throw ShapeError(std::string(what) + ": expected (B,C,H,W), got " + shape_str(x.shape()));
}

// Shared core for static and per-sample kernels. `kernel_of(b)` returns the
// offset of sample b's kernel inside the weight tensor (0 for shared kernels).
inline Var conv2d_impl(const Var& x, const Var& w, std::size_t out_ch, std::size_t stride,
                       std::size_t pad, bool per_sample) {
  const Shape& xs = x.shape();
  const std::size_t batch = xs[0];
  const std::size_t k = w.shape().back();
  ConvGeometry g{xs[1], xs[2], xs[3], k, stride, pad, 0, 0};
  g.out_h = conv_out_size(g.height, k, stride, pad);
  g.out_w = conv_out_size(g.width, k, stride, pad);
  const std::size_t patch = g.patch(), grid = g.grid();
  const std::size_t in_plane = g.channels * g.height * g.width;
  const std::size_t w_stride = per_sample ? out_ch * patch : 0;

  Tensor y({batch, out_ch, g.out_h, g.out_w});
  Tensor cols({batch, patch, grid});
  for (std::size_t b = 0; b < batch; ++b) {
    double* cb = cols.data() + b * patch * grid;
    im2col(x.value().data() + b * in_plane, g, cb);
    MatMap(y.data() + b * out_ch * grid, static_cast<Eigen::Index>(out_ch),
           static_cast<Eigen::Index>(grid))
        .noalias() = ConstMatMap(w.value().data() + b * w_stride,
                                 static_cast<Eigen::Index>(out_ch),
                                 static_cast<Eigen::Index>(patch)) *
                     ConstMatMap(cb, static_cast<Eigen::Index>(patch),
                                 static_cast<Eigen::Index>(grid));
  }
  return make_op(std::move(y), {x, w},
                 [g, cols = std::move(cols), batch, out_ch, patch, grid, in_plane,
                  w_stride](Node& self) {
                   Node& px = self.parent(0);
                   Node& pw = self.parent(1);
                   std::vector<double> dcols(patch * grid);
                   for (std::size_t b = 0; b < batch; ++b) {
                     ConstMatMap dy(self.grad.data() + b * out_ch * grid,
                                    static_cast<Eigen::Index>(out_ch),
                                    static_cast<Eigen::Index>(grid));
                     ConstMatMap cb(cols.data() + b * patch * grid,
                                    static_cast<Eigen::Index>(patch),
                                    static_cast<Eigen::Index>(grid));
                     if (pw.requires_grad)
                       MatMap(pw.grad_ref().data() + b * w_stride,
                              static_cast<Eigen::Index>(out_ch),
                              static_cast<Eigen::Index>(patch))
                           .noalias() += dy * cb.transpose();
                     if (px.requires_grad) {
                       MatMap dc(dcols.data(), static_cast<Eigen::Index>(patch),
                                 static_cast<Eigen::Index>(grid));
                       dc.noalias() = ConstMatMap(pw.value.data() + b * w_stride,
                                                  static_cast<Eigen::Index>(out_ch),
                                                  static_cast<Eigen::Index>(patch))
                                          .transpose() *
                                      dy;
                       col2im(dcols.data(), g, px.grad_ref().data() + b * in_plane);
                     }
                   }
                 });
}

}  // namespace detail

// x: (B,C,H,W), w: (O,C,k,k)
inline Var conv2d(const Var& x, const Var& w, std::size_t stride, std::size_t pad) {
  detail::require_nchw(x, "conv2d");
  if (w.value().rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3))
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " vs input " +
                     shape_str(x.shape()));
  return detail::conv2d_impl(x, w, w.dim(0), stride, pad, false);
}

// Each sample b is convolved with its own kernel bank w[b]: (B,O,C,k,k).
inline Var conv2d_per_sample(const Var& x, const Var& w, std::size_t stride, std::size_t pad) {
  detail::require_nchw(x, "conv2d_per_sample");
  if (w.value().rank() != 5 || w.dim(0) != x.dim(0) || w.dim(2) != x.dim(1) ||
      w.dim(3) != w.dim(4))
    throw ShapeError("conv2d_per_sample: kernel bank " + shape_str(w.shape()) +
                     " vs input " + shape_str(x.shape()));
  return detail::conv2d_impl(x, w, w.dim(1), stride, pad, true);
}

// Fractionally strided convolution. x: (B,Cin,H,W), w: (Cin,Cout,k,k).
// Output size (H-1)*stride - 2*pad + k + out_pad.
inline Var conv_transpose2d(const Var& x, const Var& w, std::size_t stride, std::size_t pad,
                            std::size_t out_pad) {
  detail::require_nchw(x, "conv_transpose2d");
  if (w.value().rank() != 4 || w.dim(0) != x.dim(1) || w.dim(2) != w.dim(3))
    throw ShapeError("conv_transpose2d: weight " + shape_str(w.shape()) + " vs input " +
                     shape_str(x.shape()));
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(1), k = w.dim(2);
  const std::size_t oh = (h - 1) * stride + k + out_pad - 2 * pad;
  const std::size_t ow = (wd - 1) * stride + k + out_pad - 2 * pad;
  ConvGeometry g{cout, oh, ow, k, stride, pad, h, wd};
  const std::size_t patch = g.patch(), grid = g.grid();
  const std::size_t out_plane = cout * oh * ow;

  Tensor y({batch, cout, oh, ow});
  std::vector<double> cols(patch * grid);
  for (std::size_t b = 0; b < batch; ++b) {
    MatMap(cols.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(grid))
        .noalias() = ConstMatMap(w.value().data(), static_cast<Eigen::Index>(cin),
                                 static_cast<Eigen::Index>(patch))
                         .transpose() *
                     ConstMatMap(x.value().data() + b * cin * grid,
                                 static_cast<Eigen::Index>(cin),
                                 static_cast<Eigen::Index>(grid));
    col2im(cols.data(), g, y.data() + b * out_plane);
  }
  return make_op(std::move(y), {x, w}, [g, batch, cin, patch, grid, out_plane](Node& self) {
    Node& px = self.parent(0);
    Node& pw = self.parent(1);
    std::vector<double> dcols(patch * grid);
    for (std::size_t b = 0; b < batch; ++b) {
      im2col(self.grad.data() + b * out_plane, g, dcols.data());
      ConstMatMap dc(dcols.data(), static_cast<Eigen::Index>(patch),
                     static_cast<Eigen::Index>(grid));
      if (px.requires_grad)
        MatMap(px.grad_ref().data() + b * cin * grid, static_cast<Eigen::Index>(cin),
               static_cast<Eigen::Index>(grid))
            .noalias() += ConstMatMap(pw.value.data(), static_cast<Eigen::Index>(cin),
                                      static_cast<Eigen::Index>(patch)) *
                          dc;
      if (pw.requires_grad)
        MatMap(pw.grad_ref().data(), static_cast<Eigen::Index>(cin),
               static_cast<Eigen::Index>(patch))
            .noalias() += ConstMatMap(px.value.data() + b * cin * grid,
                                      static_cast<Eigen::Index>(cin),
                                      static_cast<Eigen::Index>(grid)) *
                          dc.transpose();
    }
  });
}

// Add a per-channel bias b (C) to x (B,C,H,W).
inline Var add_channel_bias(const Var& x, const Var& b) {
  detail::require_nchw(x, "add_channel_bias");
  const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (b.size() != ch) throw ShapeError("add_channel_bias: bias size mismatch");
  Tensor y = x.value();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < plane; ++i) y[(n * ch + c) * plane + i] += b.value()[c];
  return make_op(std::move(y), {x, b}, [batch, ch, plane](Node& self) {
    detail::accumulate(self.parent(0), self.grad);
    Node& pb = self.parent(1);
    if (!pb.requires_grad) return;
    Tensor& g = pb.grad_ref();
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t i = 0; i < plane; ++i) g[c] += self.grad[(n * ch + c) * plane + i];
  });
}

// Concatenate along the channel axis.
inline Var concat_channels(const Var& a, const Var& b) {
  detail::require_nchw(a, "concat_channels");
  detail::require_nchw(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t plane = a.dim(2) * a.dim(3);
  Tensor y({batch, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(a.value().data() + n * ca * plane, ca * plane,
                y.data() + n * (ca + cb) * plane);
    std::copy_n(b.value().data() + n * cb * plane, cb * plane,
                y.data() + (n * (ca + cb) + ca) * plane);
  }
  return make_op(std::move(y), {a, b}, [batch, ca, cb, plane](Node& self) {
    Node& pa = self.parent(0);
    Node& pb = self.parent(1);
    for (std::size_t n = 0; n < batch; ++n) {
      const double* src = self.grad.data() + n * (ca + cb) * plane;
      if (pa.requires_grad) {
        double* d = pa.grad_ref().data() + n * ca * plane;
        for (std::size_t i = 0; i < ca * plane; ++i) d[i] += src[i];
      }
      if (pb.requires_grad) {
        double* d = pb.grad_ref().data() + n * cb * plane;
        for (std::size_t i = 0; i < cb * plane; ++i) d[i] += src[ca * plane + i];
      }
    }
  });
}

// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
inline Var avg_pool2(const Var& x) {
  detail::require_nchw(x, "avg_pool2");
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("avg_pool2: input too small");
  Tensor y({x.dim(0), x.dim(1), oh, ow});
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double* s = x.value().data() + p * h * w;
        y[(p * oh + oy) * ow + ox] = 0.25 * (s[2 * oy * w + 2 * ox] + s[2 * oy * w + 2 * ox + 1] +
                                             s[(2 * oy + 1) * w + 2 * ox] +
                                             s[(2 * oy + 1) * w + 2 * ox + 1]);
      }
  return make_op(std::move(y), {x}, [bc, h, w, oh, ow](Node& self) {
    Node& px = self.parent(0);
    if (!px.requires_grad) return;
    Tensor& g = px.grad_ref();
    for (std::size_t p = 0; p < bc; ++p)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double d = 0.25 * self.grad[(p * oh + oy) * ow + ox];
          double* s = g.data() + p * h * w;
          s[2 * oy * w + 2 * ox] += d;
          s[2 * oy * w + 2 * ox + 1] += d;
          s[(2 * oy + 1) * w + 2 * ox] += d;
          s[(2 * oy + 1) * w + 2 * ox + 1] += d;
        }
  });
}

// (B,C,H,W) -> (B,C)
inline Var global_avg_pool(const Var& x) {
  detail::require_nchw(x, "global_avg_pool");
  const std::size_t bc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y({x.dim(0), x.dim(1)});
  for (std::size_t p = 0; p < bc; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += x.value()[p * plane + i];
    y[p] = s / static_cast<double>(plane);
  }
  return make_op(std::move(y), {x}, [bc, plane](Node& self) {
    Node& px = self.parent(0);
    if (!px.requires_grad) return;
    Tensor& g = px.grad_ref();
    for (std::size_t p = 0; p < bc; ++p) {
      const double d = self.grad[p] / static_cast<double>(plane);
      for (std::size_t i = 0; i < plane; ++i) g[p * plane + i] += d;
    }
  });
}

// Gram matrices (B,C,C) of feature maps, normalized by the number of spatial
// positions: G[c][d] = sum_p F[c][p] F[d][p] / (H*W).
inline Var gram(const Var& x) {
  detail::require_nchw(x, "gram");
  const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  const double norm = 1.0 / static_cast<double>(plane);
  Tensor y({batch, ch, ch});
  for (std::size_t n = 0; n < batch; ++n) {
    ConstMatMap f(x.value().data() + n * ch * plane, static_cast<Eigen::Index>(ch),
                  static_cast<Eigen::Index>(plane));
    MatMap(y.data() + n * ch * ch, static_cast<Eigen::Index>(ch),
           static_cast<Eigen::Index>(ch))
        .noalias() = norm * f * f.transpose();
  }
  return make_op(std::move(y), {x}, [batch, ch, plane, norm](Node& self) {
    Node& px = self.parent(0);
    if (!px.requires_grad) return;
    for (std::size_t n = 0; n < batch; ++n) {
      ConstMatMap dg(self.grad.data() + n * ch * ch, static_cast<Eigen::Index>(ch),
                     static_cast<Eigen::Index>(ch));
      ConstMatMap f(px.value.data() + n * ch * plane, static_cast<Eigen::Index>(ch),
                    static_cast<Eigen::Index>(plane));
      MatMap(px.grad_ref().data() + n * ch * plane, static_cast<Eigen::Index>(ch),
             static_cast<Eigen::Index>(plane))
          .noalias() += norm * (dg + dg.transpose()) * f;
    }
  });
}

// Batch normalization over (B,H,W) per channel. In training mode the batch
// statistics are used and the running estimates are updated in place.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
                      bool training) {
  detail::require_nchw(x, "batch_norm");
  const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  const double count = static_cast<double>(batch * plane);
  std::vector<double> mu(ch), inv_std(ch);
  for (std::size_t c = 0; c < ch; ++c) {
    double s = 0.0, s2 = 0.0;
    if (training) {
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < plane; ++i) s += x.value()[(n * ch + c) * plane + i];
      const double m = s / count;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = x.value()[(n * ch + c) * plane + i] - m;
          s2 += d * d;
        }
      const double var = s2 / count;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = count > 1 ? s2 / (count - 1.0) : var;
      state.running_mean[c] = (1 - state.momentum) * state.running_mean[c] + state.momentum * m;
      state.running_var[c] =
          (1 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mu[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }
  Tensor xhat(x.shape());
  Tensor y(x.shape());
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (n * ch + c) * plane + i;
        xhat[idx] = (x.value()[idx] - mu[c]) * inv_std[c];
        y[idx] = gamma.value()[c] * xhat[idx] + beta.value()[c];
      }
  return make_op(std::move(y), {x, gamma, beta},
                 [xhat = std::move(xhat), inv_std, batch, ch, plane, count,
                  training](Node& self) {
                   Node& px = self.parent(0);
                   Node& pg = self.parent(1);
                   Node& pb = self.parent(2);
                   for (std::size_t c = 0; c < ch; ++c) {
                     double sdy = 0.0, sdyx = 0.0;
                     for (std::size_t n = 0; n < batch; ++n)
                       for (std::size_t i = 0; i < plane; ++i) {
                         const std::size_t idx = (n * ch + c) * plane + i;
                         sdy += self.grad[idx];
                         sdyx += self.grad[idx] * xhat[idx];
                       }
                     if (pg.requires_grad) pg.grad_ref()[c] += sdyx;
                     if (pb.requires_grad) pb.grad_ref()[c] += sdy;
                     if (!px.requires_grad) continue;
                     const double gm = pg.value[c];
                     Tensor& gx = px.grad_ref();
                     for (std::size_t n = 0; n < batch; ++n)
                       for (std::size_t i = 0; i < plane; ++i) {
                         const std::size_t idx = (n * ch + c) * plane + i;
                         if (training)
                           gx[idx] += gm * inv_std[c] / count *
                                      (count * self.grad[idx] - sdy - xhat[idx] * sdyx);
                         else
                           gx[idx] += gm * inv_std[c] * self.grad[idx];
                       }
                   }
                 });
}

}  // namespace vidcast::ad
