#pragma once

// Functional forward/backward kernels for the feed-forward layer set.
// Stateful wrappers that own parameters and forward caches live in
// layers.hpp; everything here is a pure function over tensors.

#include <cmath>
#include <limits>

#include "lipkit/rng.hpp"
#include "lipkit/tensor.hpp"

namespace lipkit {

enum class Mode { kTrain, kEval };

/// Trainable tensor with its gradient slot.
template <typename S>
struct Param {
  Tensor<S> value;
  Tensor<S> grad;
  std::string name;

  Param() = default;
  Param(std::string n, Tensor<S> v) : value(std::move(v)), grad(value.shape()), name(std::move(n)) {}
  void zero_grad() { grad.setZero(); }
};

/// Uniform fan-balanced init on [-a, a], a = sqrt(2 / (d_in + d_out)).
/// For convolutions the fan counts include the kernel volume.
template <typename S>
Tensor<S> init_dense_uniform(RngHandle& rng, std::size_t d_in, std::size_t d_out,
                             const Shape& shape) {
  if (d_in == 0 || d_out == 0)
    throw std::invalid_argument("init_dense_uniform: fan counts must be positive");
  const double a = std::sqrt(2.0 / static_cast<double>(d_in + d_out));
  return rand_uniform<S>(rng, shape, -a, a);
}

// --- activations ----------------------------------------------------------

enum class Activation { kRelu, kSigmoid, kTanh };

template <typename S>
S sigmoid_scalar(S x) {
  return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

template <typename S>
Tensor<S> activation_forward(const Tensor<S>& x, Activation kind) {
  Tensor<S> y(x.shape());
  switch (kind) {
    case Activation::kRelu:
      for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > S(0) ? x[i] : S(0);
      break;
    case Activation::kSigmoid:
      for (std::size_t i = 0; i < x.numel(); ++i) y[i] = sigmoid_scalar(x[i]);
      break;
    case Activation::kTanh:
      for (std::size_t i = 0; i < x.numel(); ++i) y[i] = std::tanh(x[i]);
      break;
  }
  return y;
}

/// Backward through an activation given its cached output y.
template <typename S>
Tensor<S> activation_backward(const Tensor<S>& y, const Tensor<S>& dy, Activation kind) {
  Tensor<S> dx(y.shape());
  switch (kind) {
    case Activation::kRelu:
      for (std::size_t i = 0; i < y.numel(); ++i) dx[i] = y[i] > S(0) ? dy[i] : S(0);
      break;
    case Activation::kSigmoid:
      for (std::size_t i = 0; i < y.numel(); ++i) dx[i] = dy[i] * y[i] * (S(1) - y[i]);
      break;
    case Activation::kTanh:
      for (std::size_t i = 0; i < y.numel(); ++i) dx[i] = dy[i] * (S(1) - y[i] * y[i]);
      break;
  }
  return dx;
}

// --- linear ---------------------------------------------------------------

/// y = x w^T + b with x [B x d_in], w [d_out x d_in].
template <typename S>
Tensor<S> linear_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) || b.numel() != w.dim(0))
    throw ShapeError("linear_forward: x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
  const std::size_t B = x.dim(0), dout = w.dim(0), din = w.dim(1);
  Tensor<S> y({B, dout});
  y.matrix(B, dout).noalias() = x.matrix(B, din) * w.matrix(dout, din).transpose();
  y.matrix(B, dout).rowwise() += b.vec().transpose();
  return y;
}

template <typename S>
Tensor<S> linear_backward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& dy,
                          Tensor<S>& dw, Tensor<S>& db) {
  const std::size_t B = x.dim(0), dout = w.dim(0), din = w.dim(1);
  dw.matrix(dout, din).noalias() += dy.matrix(B, dout).transpose() * x.matrix(B, din);
  db.vec().noalias() += dy.matrix(B, dout).colwise().sum().transpose();
  Tensor<S> dx({B, din});
  dx.matrix(B, din).noalias() = dy.matrix(B, dout) * w.matrix(dout, din);
  return dx;
}

// --- dropout --------------------------------------------------------------

/// Inverted dropout; the mask holds the applied scale factors so backward can
/// replay it exactly.
template <typename S>
Tensor<S> dropout_forward(const Tensor<S>& x, double p, RngHandle& rng, Mode mode,
                          Tensor<S>* mask_out = nullptr) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout_forward: p must be in [0, 1)");
  if (mode == Mode::kEval || p == 0.0) {
    if (mask_out) *mask_out = Tensor<S>(x.shape(), S(1));
    return x;
  }
  const S scale = static_cast<S>(1.0 / (1.0 - p));
  Tensor<S> mask(x.shape());
  Tensor<S> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    mask[i] = rng.uniform01() < p ? S(0) : scale;
    y[i] = x[i] * mask[i];
  }
  if (mask_out) *mask_out = std::move(mask);
  return y;
}

template <typename S>
Tensor<S> dropout_backward(const Tensor<S>& mask, const Tensor<S>& dy) {
  Tensor<S> dx(dy.shape());
  for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * mask[i];
  return dx;
}

// --- batch norm -----------------------------------------------------------

template <typename S>
struct BatchNormState {
  Param<S> gamma;  // per-channel scale, init 1
  Param<S> beta;   // per-channel shift, init 0
  Tensor<S> running_mean;
  Tensor<S> running_var;
  S momentum = S(0.1);
  S eps = S(1e-5);

  explicit BatchNormState(std::size_t channels, const std::string& name = "bn")
      : gamma(name + ".gamma", Tensor<S>({channels}, S(1))),
        beta(name + ".beta", Tensor<S>({channels}, S(0))),
        running_mean({channels}, S(0)),
        running_var({channels}, S(1)) {}
};

/// Cache required by batchnorm_backward (train mode statistics).
template <typename S>
struct BatchNormCache {
  Tensor<S> xhat;
  Tensor<S> invstd;  // per channel
  Mode mode = Mode::kTrain;
};

/// x is [B x C x ...]: statistics are taken over every non-channel axis.
template <typename S>
Tensor<S> batchnorm_forward(const Tensor<S>& x, BatchNormState<S>& state, Mode mode,
                            BatchNormCache<S>* cache = nullptr) {
  if (x.rank() < 2 || x.dim(1) != state.gamma.value.numel())
    throw ShapeError("batchnorm_forward: channel extent mismatch for " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1);
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) spatial *= x.dim(i);
  const std::size_t per_channel = B * spatial;
  if (mode == Mode::kTrain && per_channel < 2)
    throw std::invalid_argument("batchnorm_forward: train mode needs >= 2 values per channel");

  Tensor<S> mean({C}, S(0)), var({C}, S(0));
  if (mode == Mode::kTrain) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const S* p = x.data() + (b * C + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) mean[c] += p[s];
      }
    for (std::size_t c = 0; c < C; ++c) mean[c] /= static_cast<S>(per_channel);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const S* p = x.data() + (b * C + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
          const S d = p[s] - mean[c];
          var[c] += d * d;
        }
      }
    for (std::size_t c = 0; c < C; ++c) var[c] /= static_cast<S>(per_channel);
    for (std::size_t c = 0; c < C; ++c) {
      state.running_mean[c] =
          (S(1) - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
      state.running_var[c] =
          (S(1) - state.momentum) * state.running_var[c] + state.momentum * var[c];
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  Tensor<S> invstd({C});
  for (std::size_t c = 0; c < C; ++c) invstd[c] = S(1) / std::sqrt(var[c] + state.eps);

  Tensor<S> y(x.shape());
  Tensor<S> xhat(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const S* p = x.data() + (b * C + c) * spatial;
      S* ph = xhat.data() + (b * C + c) * spatial;
      S* py = y.data() + (b * C + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        ph[s] = (p[s] - mean[c]) * invstd[c];
        py[s] = state.gamma.value[c] * ph[s] + state.beta.value[c];
      }
    }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->invstd = std::move(invstd);
    cache->mode = mode;
  }
  return y;
}

template <typename S>
Tensor<S> batchnorm_backward(const BatchNormCache<S>& cache, BatchNormState<S>& state,
                             const Tensor<S>& dy) {
  const Tensor<S>& xhat = cache.xhat;
  const std::size_t B = xhat.dim(0), C = xhat.dim(1);
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < xhat.rank(); ++i) spatial *= xhat.dim(i);
  const S M = static_cast<S>(B * spatial);

  Tensor<S> dgamma({C}, S(0)), dbeta({C}, S(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const S* ph = xhat.data() + (b * C + c) * spatial;
      const S* pd = dy.data() + (b * C + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        dgamma[c] += pd[s] * ph[s];
        dbeta[c] += pd[s];
      }
    }
  for (std::size_t c = 0; c < C; ++c) {
    state.gamma.grad[c] += dgamma[c];
    state.beta.grad[c] += dbeta[c];
  }

  Tensor<S> dx(xhat.shape());
  if (cache.mode == Mode::kEval) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const S k = state.gamma.value[c] * cache.invstd[c];
        const S* pd = dy.data() + (b * C + c) * spatial;
        S* px = dx.data() + (b * C + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) px[s] = pd[s] * k;
      }
    return dx;
  }
  // Train mode: gradient includes the batch statistics terms.
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const S k = state.gamma.value[c] * cache.invstd[c] / M;
      const S* ph = xhat.data() + (b * C + c) * spatial;
      const S* pd = dy.data() + (b * C + c) * spatial;
      S* px = dx.data() + (b * C + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s)
        px[s] = k * (M * pd[s] - dbeta[c] - ph[s] * dgamma[c]);
    }
  return dx;
}

// --- 2-D convolution (cross-correlation) ----------------------------------

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(in + 2 * pad) - static_cast<std::ptrdiff_t>(k);
  if (n < 0 || stride == 0)
    throw ShapeError("convolution: kernel " + std::to_string(k) + " exceeds padded extent " +
                     std::to_string(in + 2 * pad));
  return static_cast<std::size_t>(n) / stride + 1;
}

namespace detail {

// Lowering of one sample [C x H x W] to a [C*kh*kw x Ho*Wo] patch matrix.
template <typename S>
void im2col_2d(const S* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
               std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho,
               std::size_t Wo, S* col) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        S* row = col + ((c * kh + ki) * kw + kj) * P;
        for (std::size_t oi = 0; oi < Ho; ++oi) {
          const std::ptrdiff_t ii =
              static_cast<std::ptrdiff_t>(oi * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t oj = 0; oj < Wo; ++oj) {
            const std::ptrdiff_t jj =
                static_cast<std::ptrdiff_t>(oj * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            row[oi * Wo + oj] =
                (ii >= 0 && ii < static_cast<std::ptrdiff_t>(H) && jj >= 0 &&
                 jj < static_cast<std::ptrdiff_t>(W))
                    ? x[(c * H + static_cast<std::size_t>(ii)) * W + static_cast<std::size_t>(jj)]
                    : S(0);
          }
        }
      }
}

template <typename S>
void col2im_2d(const S* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
               std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho,
               std::size_t Wo, S* x) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const S* row = col + ((c * kh + ki) * kw + kj) * P;
        for (std::size_t oi = 0; oi < Ho; ++oi) {
          const std::ptrdiff_t ii =
              static_cast<std::ptrdiff_t>(oi * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t oj = 0; oj < Wo; ++oj) {
            const std::ptrdiff_t jj =
                static_cast<std::ptrdiff_t>(oj * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
            x[(c * H + static_cast<std::size_t>(ii)) * W + static_cast<std::size_t>(jj)] +=
                row[oi * Wo + oj];
          }
        }
      }
}

}  // namespace detail

/// x [B x Cin x H x W], w [Cout x Cin x kh x kw], b [Cout].
template <typename S>
Tensor<S> conv2d_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                         std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
    throw ShapeError("conv2d_forward: x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = conv_out_extent(H, kh, stride, pad);
  const std::size_t Wo = conv_out_extent(W, kw, stride, pad);
  const std::size_t K = Ci * kh * kw, P = Ho * Wo;

  Tensor<S> y({B, Co, Ho, Wo});
  Tensor<S> col({K, P});
  auto wmat = w.matrix(Co, K);
  for (std::size_t s = 0; s < B; ++s) {
    detail::im2col_2d(x.data() + s * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
    Eigen::Map<MatrixX<S>> ymat(y.data() + s * Co * P, Co, P);
    ymat.noalias() = wmat * col.matrix(K, P);
    ymat.colwise() += b.vec();
  }
  return y;
}

template <typename S>
Tensor<S> conv2d_backward(const Tensor<S>& x, const Tensor<S>& w, std::size_t stride,
                          std::size_t pad, const Tensor<S>& dy, Tensor<S>& dw, Tensor<S>& db) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = dy.dim(2), Wo = dy.dim(3);
  const std::size_t K = Ci * kh * kw, P = Ho * Wo;

  Tensor<S> dx(x.shape(), S(0));
  Tensor<S> col({K, P});
  Tensor<S> dcol({K, P});
  auto wmat = w.matrix(Co, K);
  auto dwmat = dw.matrix(Co, K);
  for (std::size_t s = 0; s < B; ++s) {
    detail::im2col_2d(x.data() + s * Ci * H * W, Ci, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
    Eigen::Map<const MatrixX<S>> dymat(dy.data() + s * Co * P, Co, P);
    dwmat.noalias() += dymat * col.matrix(K, P).transpose();
    db.vec().noalias() += dymat.rowwise().sum();
    dcol.matrix(K, P).noalias() = wmat.transpose() * dymat;
    detail::col2im_2d(dcol.data(), Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                      dx.data() + s * Ci * H * W);
  }
  return dx;
}

// --- 3-D convolution ------------------------------------------------------

struct Triple {
  std::size_t t = 1, h = 1, w = 1;
};

namespace detail {

template <typename S>
void im2col_3d(const S* x, std::size_t C, std::size_t T, std::size_t H, std::size_t W,
               const Triple& k, const Triple& stride, const Triple& pad, std::size_t To,
               std::size_t Ho, std::size_t Wo, S* col) {
  const std::size_t P = To * Ho * Wo;
  std::size_t r = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t kt = 0; kt < k.t; ++kt)
      for (std::size_t ki = 0; ki < k.h; ++ki)
        for (std::size_t kj = 0; kj < k.w; ++kj, ++r) {
          S* row = col + r * P;
          for (std::size_t ot = 0; ot < To; ++ot) {
            const std::ptrdiff_t tt =
                static_cast<std::ptrdiff_t>(ot * stride.t + kt) - static_cast<std::ptrdiff_t>(pad.t);
            const bool t_in = tt >= 0 && tt < static_cast<std::ptrdiff_t>(T);
            for (std::size_t oi = 0; oi < Ho; ++oi) {
              const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride.h + ki) -
                                        static_cast<std::ptrdiff_t>(pad.h);
              const bool i_in = ii >= 0 && ii < static_cast<std::ptrdiff_t>(H);
              for (std::size_t oj = 0; oj < Wo; ++oj) {
                const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride.w + kj) -
                                          static_cast<std::ptrdiff_t>(pad.w);
                const bool in = t_in && i_in && jj >= 0 && jj < static_cast<std::ptrdiff_t>(W);
                row[(ot * Ho + oi) * Wo + oj] =
                    in ? x[((c * T + static_cast<std::size_t>(tt)) * H +
                            static_cast<std::size_t>(ii)) *
                               W +
                           static_cast<std::size_t>(jj)]
                       : S(0);
              }
            }
          }
        }
}

template <typename S>
void col2im_3d(const S* col, std::size_t C, std::size_t T, std::size_t H, std::size_t W,
               const Triple& k, const Triple& stride, const Triple& pad, std::size_t To,
               std::size_t Ho, std::size_t Wo, S* x) {
  const std::size_t P = To * Ho * Wo;
  std::size_t r = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t kt = 0; kt < k.t; ++kt)
      for (std::size_t ki = 0; ki < k.h; ++ki)
        for (std::size_t kj = 0; kj < k.w; ++kj, ++r) {
          const S* row = col + r * P;
          for (std::size_t ot = 0; ot < To; ++ot) {
            const std::ptrdiff_t tt =
                static_cast<std::ptrdiff_t>(ot * stride.t + kt) - static_cast<std::ptrdiff_t>(pad.t);
            if (tt < 0 || tt >= static_cast<std::ptrdiff_t>(T)) continue;
            for (std::size_t oi = 0; oi < Ho; ++oi) {
              const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride.h + ki) -
                                        static_cast<std::ptrdiff_t>(pad.h);
              if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t oj = 0; oj < Wo; ++oj) {
                const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride.w + kj) -
                                          static_cast<std::ptrdiff_t>(pad.w);
                if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                x[((c * T + static_cast<std::size_t>(tt)) * H + static_cast<std::size_t>(ii)) * W +
                  static_cast<std::size_t>(jj)] += row[(ot * Ho + oi) * Wo + oj];
              }
            }
          }
        }
}

}  // namespace detail

/// x [B x Cin x T x H x W], w [Cout x Cin x kt x kh x kw].
template <typename S>
Tensor<S> conv3d_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                         const Triple& stride, const Triple& pad) {
  if (x.rank() != 5 || w.rank() != 5 || x.dim(1) != w.dim(1))
    throw ShapeError("conv3d_forward: x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
  const std::size_t B = x.dim(0), Ci = x.dim(1), T = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t Co = w.dim(0);
  const Triple k{w.dim(2), w.dim(3), w.dim(4)};
  const std::size_t To = conv_out_extent(T, k.t, stride.t, pad.t);
  const std::size_t Ho = conv_out_extent(H, k.h, stride.h, pad.h);
  const std::size_t Wo = conv_out_extent(W, k.w, stride.w, pad.w);
  const std::size_t K = Ci * k.t * k.h * k.w, P = To * Ho * Wo;

  Tensor<S> y({B, Co, To, Ho, Wo});
  Tensor<S> col({K, P});
  auto wmat = w.matrix(Co, K);
  for (std::size_t s = 0; s < B; ++s) {
    detail::im2col_3d(x.data() + s * Ci * T * H * W, Ci, T, H, W, k, stride, pad, To, Ho, Wo,
                      col.data());
    Eigen::Map<MatrixX<S>> ymat(y.data() + s * Co * P, Co, P);
    ymat.noalias() = wmat * col.matrix(K, P);
    ymat.colwise() += b.vec();
  }
  return y;
}

template <typename S>
Tensor<S> conv3d_backward(const Tensor<S>& x, const Tensor<S>& w, const Triple& stride,
                          const Triple& pad, const Tensor<S>& dy, Tensor<S>& dw, Tensor<S>& db) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), T = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t Co = w.dim(0);
  const Triple k{w.dim(2), w.dim(3), w.dim(4)};
  const std::size_t To = dy.dim(2), Ho = dy.dim(3), Wo = dy.dim(4);
  const std::size_t K = Ci * k.t * k.h * k.w, P = To * Ho * Wo;

  Tensor<S> dx(x.shape(), S(0));
  Tensor<S> col({K, P}), dcol({K, P});
  auto wmat = w.matrix(Co, K);
  auto dwmat = dw.matrix(Co, K);
  for (std::size_t s = 0; s < B; ++s) {
    detail::im2col_3d(x.data() + s * Ci * T * H * W, Ci, T, H, W, k, stride, pad, To, Ho, Wo,
                      col.data());
    Eigen::Map<const MatrixX<S>> dymat(dy.data() + s * Co * P, Co, P);
    dwmat.noalias() += dymat * col.matrix(K, P).transpose();
    db.vec().noalias() += dymat.rowwise().sum();
    dcol.matrix(K, P).noalias() = wmat.transpose() * dymat;
    detail::col2im_3d(dcol.data(), Ci, T, H, W, k, stride, pad, To, Ho, Wo,
                      dx.data() + s * Ci * T * H * W);
  }
  return dx;
}

// --- pooling --------------------------------------------------------------

/// Spatial max pool over [B x C x H x W]; argmax indices cached for backward.
template <typename S>
Tensor<S> maxpool2d_forward(const Tensor<S>& x, std::size_t k, std::size_t stride, std::size_t pad,
                            std::vector<std::size_t>* argmax = nullptr) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = conv_out_extent(H, k, stride, pad);
  const std::size_t Wo = conv_out_extent(W, k, stride, pad);
  Tensor<S> y({B, C, Ho, Wo});
  if (argmax) argmax->assign(y.numel(), 0);
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const S* plane = x.data() + (b * C + c) * H * W;
      for (std::size_t oi = 0; oi < Ho; ++oi)
        for (std::size_t oj = 0; oj < Wo; ++oj, ++o) {
          S best = std::numeric_limits<S>::lowest();
          std::size_t best_ix = 0;
          for (std::size_t ki = 0; ki < k; ++ki) {
            const std::ptrdiff_t ii =
                static_cast<std::ptrdiff_t>(oi * stride + ki) - static_cast<std::ptrdiff_t>(pad);
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kj = 0; kj < k; ++kj) {
              const std::ptrdiff_t jj =
                  static_cast<std::ptrdiff_t>(oj * stride + kj) - static_cast<std::ptrdiff_t>(pad);
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
              const std::size_t ix =
                  static_cast<std::size_t>(ii) * W + static_cast<std::size_t>(jj);
              if (plane[ix] > best) {
                best = plane[ix];
                best_ix = (b * C + c) * H * W + ix;
              }
            }
          }
          y[o] = best;
          if (argmax) (*argmax)[o] = best_ix;
        }
    }
  return y;
}

template <typename S>
Tensor<S> maxpool2d_backward(const Shape& x_shape, const std::vector<std::size_t>& argmax,
                             const Tensor<S>& dy) {
  Tensor<S> dx(x_shape, S(0));
  for (std::size_t o = 0; o < dy.numel(); ++o) dx[argmax[o]] += dy[o];
  return dx;
}

/// Mean over the spatial axes of [B x C x H x W] -> [B x C].
template <typename S>
Tensor<S> global_avgpool(const Tensor<S>& x) {
  if (x.rank() != 4) throw ShapeError("global_avgpool: expected rank-4 input");
  return reduce(x, {2, 3}, Reduce::kMean);
}

template <typename S>
Tensor<S> global_avgpool_backward(const Shape& x_shape, const Tensor<S>& dy) {
  const std::size_t B = x_shape[0], C = x_shape[1], HW = x_shape[2] * x_shape[3];
  Tensor<S> dx(x_shape);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const S g = dy[b * C + c] / static_cast<S>(HW);
      S* p = dx.data() + (b * C + c) * HW;
      for (std::size_t s = 0; s < HW; ++s) p[s] = g;
    }
  return dx;
}

}  // namespace lipkit
