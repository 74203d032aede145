#pragma once

// Parameter-owning layer wrappers around the functional kernels in nn.hpp.
// Each layer caches what its backward pass needs during forward; a cache is
// valid for exactly one forward/backward pair.

#include <string>
#include <vector>

#include "lipkit/nn.hpp"

namespace lipkit {

template <typename S>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
              std::size_t stride, std::size_t pad, RngHandle& rng)
      : stride_(stride), pad_(pad) {
    const std::size_t vol = k * k;
    w_ = Param<S>(name + ".w", init_dense_uniform<S>(rng, cin * vol, cout * vol, {cout, cin, k, k}));
    b_ = Param<S>(name + ".b", Tensor<S>({cout}, S(0)));
  }

  Tensor<S> forward(const Tensor<S>& x) {
    x_ = x;
    return conv2d_forward(x, w_.value, b_.value, stride_, pad_);
  }
  Tensor<S> backward(const Tensor<S>& dy) {
    return conv2d_backward(x_, w_.value, stride_, pad_, dy, w_.grad, b_.grad);
  }
  void params(std::vector<Param<S>*>& out) {
    out.push_back(&w_);
    out.push_back(&b_);
  }

 private:
  Param<S> w_, b_;
  std::size_t stride_ = 1, pad_ = 0;
  Tensor<S> x_;
};

template <typename S>
class Conv3dLayer {
 public:
  Conv3dLayer() = default;
  Conv3dLayer(const std::string& name, std::size_t cin, std::size_t cout, Triple k, Triple stride,
              Triple pad, RngHandle& rng)
      : stride_(stride), pad_(pad) {
    const std::size_t vol = k.t * k.h * k.w;
    w_ = Param<S>(name + ".w",
                  init_dense_uniform<S>(rng, cin * vol, cout * vol, {cout, cin, k.t, k.h, k.w}));
    b_ = Param<S>(name + ".b", Tensor<S>({cout}, S(0)));
  }

  Tensor<S> forward(const Tensor<S>& x) {
    x_ = x;
    return conv3d_forward(x, w_.value, b_.value, stride_, pad_);
  }
  Tensor<S> backward(const Tensor<S>& dy) {
    return conv3d_backward(x_, w_.value, stride_, pad_, dy, w_.grad, b_.grad);
  }
  void params(std::vector<Param<S>*>& out) {
    out.push_back(&w_);
    out.push_back(&b_);
  }

 private:
  Param<S> w_, b_;
  Triple stride_, pad_;
  Tensor<S> x_;
};

template <typename S>
class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  BatchNormLayer(const std::string& name, std::size_t channels) : state_(channels, name) {}

  Tensor<S> forward(const Tensor<S>& x, Mode mode) {
    return batchnorm_forward(x, state_, mode, &cache_);
  }
  Tensor<S> backward(const Tensor<S>& dy) { return batchnorm_backward(cache_, state_, dy); }
  void params(std::vector<Param<S>*>& out) {
    out.push_back(&state_.gamma);
    out.push_back(&state_.beta);
  }
  void bn_states(std::vector<BatchNormState<S>*>& out) { out.push_back(&state_); }
  BatchNormState<S>& state() { return state_; }

 private:
  BatchNormState<S> state_{1};
  BatchNormCache<S> cache_;
};

template <typename S>
class ActivationLayer {
 public:
  explicit ActivationLayer(Activation kind = Activation::kRelu) : kind_(kind) {}
  Tensor<S> forward(const Tensor<S>& x) {
    y_ = activation_forward(x, kind_);
    return y_;
  }
  Tensor<S> backward(const Tensor<S>& dy) { return activation_backward(y_, dy, kind_); }

 private:
  Activation kind_;
  Tensor<S> y_;
};

template <typename S>
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(const std::string& name, std::size_t din, std::size_t dout, RngHandle& rng) {
    w_ = Param<S>(name + ".w", init_dense_uniform<S>(rng, din, dout, {dout, din}));
    b_ = Param<S>(name + ".b", Tensor<S>({dout}, S(0)));
  }
  /// Paper-literal uniform [-1, 1] init for the final classifier.
  static LinearLayer literal_uniform(const std::string& name, std::size_t din, std::size_t dout,
                                     RngHandle& rng) {
    LinearLayer l;
    l.w_ = Param<S>(name + ".w", rand_uniform<S>(rng, {dout, din}, -1.0, 1.0));
    l.b_ = Param<S>(name + ".b", rand_uniform<S>(rng, {dout}, -1.0, 1.0));
    return l;
  }

  Tensor<S> forward(const Tensor<S>& x) {
    x_ = x;
    return linear_forward(x, w_.value, b_.value);
  }
  Tensor<S> backward(const Tensor<S>& dy) {
    return linear_backward(x_, w_.value, dy, w_.grad, b_.grad);
  }
  void params(std::vector<Param<S>*>& out) {
    out.push_back(&w_);
    out.push_back(&b_);
  }
  Param<S>& weight() { return w_; }
  Param<S>& bias() { return b_; }

 private:
  Param<S> w_, b_;
  Tensor<S> x_;
};

/// Squeeze-and-excitation channel gate: y = x .* sigmoid(W2 relu(W1 gap(x))).
template <typename S>
class SeBlock {
 public:
  SeBlock() = default;
  SeBlock(const std::string& name, std::size_t channels, std::size_t reduction, RngHandle& rng) {
    if (reduction == 0 || channels % reduction != 0)
      throw std::invalid_argument("SeBlock: reduction must divide channel count " +
                                  std::to_string(channels));
    const std::size_t mid = channels / reduction;
    fc1_ = LinearLayer<S>(name + ".fc1", channels, mid, rng);
    fc2_ = LinearLayer<S>(name + ".fc2", mid, channels, rng);
  }

  Tensor<S> forward(const Tensor<S>& x) {
    x_ = x;
    const std::size_t B = x.dim(0), C = x.dim(1);
    Tensor<S> s = global_avgpool(x);
    gate_ = activation_forward(fc2_.forward(relu_.forward(fc1_.forward(s))), Activation::kSigmoid);
    Tensor<S> y(x.shape());
    const std::size_t HW = x.dim(2) * x.dim(3);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const S g = gate_[b * C + c];
        const S* px = x.data() + (b * C + c) * HW;
        S* py = y.data() + (b * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) py[i] = px[i] * g;
      }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& dy) {
    const std::size_t B = x_.dim(0), C = x_.dim(1), HW = x_.dim(2) * x_.dim(3);
    Tensor<S> dx(x_.shape());
    Tensor<S> dgate({B, C}, S(0));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const S g = gate_[b * C + c];
        const S* px = x_.data() + (b * C + c) * HW;
        const S* pd = dy.data() + (b * C + c) * HW;
        S* pdx = dx.data() + (b * C + c) * HW;
        S acc = S(0);
        for (std::size_t i = 0; i < HW; ++i) {
          pdx[i] = pd[i] * g;
          acc += pd[i] * px[i];
        }
        dgate[b * C + c] = acc;
      }
    // through sigmoid -> fc2 -> relu -> fc1 -> gap
    Tensor<S> d2 = activation_backward(gate_, dgate, Activation::kSigmoid);
    Tensor<S> ds = fc1_.backward(relu_.backward(fc2_.backward(d2)));
    Tensor<S> dpool = global_avgpool_backward(x_.shape(), ds);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dpool[i];
    return dx;
  }

  void params(std::vector<Param<S>*>& out) {
    fc1_.params(out);
    fc2_.params(out);
  }

 private:
  LinearLayer<S> fc1_, fc2_;
  ActivationLayer<S> relu_{Activation::kRelu};
  Tensor<S> x_, gate_;
};

/// Basic ResNet block: conv3x3 - bn - relu - conv3x3 - bn (- SE) + shortcut,
/// then relu. A strided 1x1 projection carries the shortcut on shape change.
template <typename S>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(const std::string& name, std::size_t cin, std::size_t cout, std::size_t stride,
                bool se_enabled, std::size_t se_reduction, RngHandle& rng)
      : conv1_(name + ".conv1", cin, cout, 3, stride, 1, rng),
        bn1_(name + ".bn1", cout),
        conv2_(name + ".conv2", cout, cout, 3, 1, 1, rng),
        bn2_(name + ".bn2", cout),
        has_projection_(stride != 1 || cin != cout),
        se_enabled_(se_enabled) {
    if (has_projection_) {
      proj_ = Conv2dLayer<S>(name + ".proj", cin, cout, 1, stride, 0, rng);
      proj_bn_ = BatchNormLayer<S>(name + ".proj_bn", cout);
    }
    if (se_enabled_) se_ = SeBlock<S>(name + ".se", cout, se_reduction, rng);
  }

  Tensor<S> forward(const Tensor<S>& x, Mode mode) {
    Tensor<S> out = relu1_.forward(bn1_.forward(conv1_.forward(x), mode));
    out = bn2_.forward(conv2_.forward(out), mode);
    if (se_enabled_) out = se_.forward(out);
    Tensor<S> shortcut = has_projection_ ? proj_bn_.forward(proj_.forward(x), mode) : x;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += shortcut[i];
    return relu2_.forward(out);
  }

  Tensor<S> backward(const Tensor<S>& dy) {
    Tensor<S> d = relu2_.backward(dy);
    Tensor<S> dshort = d;  // shortcut branch
    if (se_enabled_) d = se_.backward(d);
    Tensor<S> dx = conv1_.backward(bn1_.backward(relu1_.backward(
        conv2_.backward(bn2_.backward(d)))));
    if (has_projection_) {
      Tensor<S> dproj = proj_.backward(proj_bn_.backward(dshort));
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dproj[i];
    } else {
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dshort[i];
    }
    return dx;
  }

  void params(std::vector<Param<S>*>& out) {
    conv1_.params(out);
    bn1_.params(out);
    conv2_.params(out);
    bn2_.params(out);
    if (has_projection_) {
      proj_.params(out);
      proj_bn_.params(out);
    }
    if (se_enabled_) se_.params(out);
  }

  void bn_states(std::vector<BatchNormState<S>*>& out) {
    bn1_.bn_states(out);
    bn2_.bn_states(out);
    if (has_projection_) proj_bn_.bn_states(out);
  }

 private:
  Conv2dLayer<S> conv1_, conv2_, proj_;
  BatchNormLayer<S> bn1_, bn2_, proj_bn_;
  ActivationLayer<S> relu1_{Activation::kRelu}, relu2_{Activation::kRelu};
  SeBlock<S> se_;
  bool has_projection_ = false, se_enabled_ = false;
};

}  // namespace lipkit
