#pragma once

// Full lip-reading model: 3-D stem + residual 2-D stages (optional SE
// gating) as the frontend, stacked bidirectional GRU + temporal-average
// classifier as the backend, with optional word-boundary feature injection.

#include <optional>
#include <vector>

#include "lipkit/gru.hpp"
#include "lipkit/layers.hpp"

namespace lipkit {

struct FrontendConfig {
  Triple stem_kernel{5, 7, 7};
  Triple stem_stride{1, 2, 2};
  Triple stem_pad{2, 3, 3};
  bool stem_pool = true;  // 3x3 stride-2 spatial max pool after the stem
  std::vector<std::size_t> widths{64, 128, 256, 512};
  std::vector<std::size_t> blocks{2, 2, 2, 2};
  bool se_enabled = false;
  std::size_t se_reduction = 16;

  void validate() const {
    if (widths.empty() || widths.size() != blocks.size())
      throw std::invalid_argument("FrontendConfig: widths and blocks must be same non-zero length");
    if (stem_kernel.t % 2 == 0)
      throw std::invalid_argument("FrontendConfig: temporal kernel must be odd to preserve T");
    if (se_enabled)
      for (std::size_t w : widths)
        if (se_reduction == 0 || w % se_reduction != 0)
          throw std::invalid_argument("FrontendConfig: se_reduction must divide every stage width");
  }
};

struct ModelConfig {
  FrontendConfig frontend;
  GruStackConfig backend;
  std::size_t num_classes = 10;
  bool use_word_boundary = false;

  void validate() const {
    frontend.validate();
    if (num_classes < 2) throw std::invalid_argument("ModelConfig: num_classes must be >= 2");
  }
};

/// Per-frame binary word interval indicator [start, end) over T frames.
struct BoundaryMask {
  std::size_t frames = 0;
  std::size_t start = 0;
  std::size_t end = 0;

  void validate() const {
    if (!(start < end && end <= frames))
      throw std::invalid_argument("BoundaryMask: interval [" + std::to_string(start) + ", " +
                                  std::to_string(end) + ") invalid for " + std::to_string(frames) +
                                  " frames");
  }
  template <typename S>
  Tensor<S> indicator() const {
    validate();
    Tensor<S> t({frames}, S(0));
    for (std::size_t i = start; i < end; ++i) t[i] = S(1);
    return t;
  }
};

/// Append one indicator feature per time step: [B x T x D] -> [B x T x (D+1)].
/// Mask values may be fractional (mixup mixes them with the frames' lambda).
template <typename S>
Tensor<S> attach_word_boundary(const Tensor<S>& features, const Tensor<S>& mask) {
  if (features.rank() != 3 || mask.rank() != 2 || mask.dim(0) != features.dim(0) ||
      mask.dim(1) != features.dim(1))
    throw ShapeError("attach_word_boundary: features " + shape_str(features.shape()) + " mask " +
                     shape_str(mask.shape()));
  const std::size_t B = features.dim(0), T = features.dim(1), D = features.dim(2);
  Tensor<S> out({B, T, D + 1});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) {
      std::copy_n(features.data() + (b * T + t) * D, D, out.data() + (b * T + t) * (D + 1));
      out[(b * T + t) * (D + 1) + D] = mask[b * T + t];
    }
  return out;
}

namespace detail {

// [B x C x T x H x W] -> [B*T x C x H x W]
template <typename S>
Tensor<S> fold_time(const Tensor<S>& x) {
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2), HW = x.dim(3) * x.dim(4);
  Tensor<S> y({B * T, C, x.dim(3), x.dim(4)});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t)
        std::copy_n(x.data() + ((b * C + c) * T + t) * HW, HW,
                    y.data() + ((b * T + t) * C + c) * HW);
  return y;
}

template <typename S>
Tensor<S> unfold_time(const Tensor<S>& y, std::size_t B, std::size_t T) {
  const std::size_t C = y.dim(1), HW = y.dim(2) * y.dim(3);
  Tensor<S> x({B, C, T, y.dim(2), y.dim(3)});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t)
        std::copy_n(y.data() + ((b * T + t) * C + c) * HW, HW,
                    x.data() + ((b * C + c) * T + t) * HW);
  return x;
}

// [B x T x D] <-> [T x B x D]
template <typename S>
Tensor<S> swap_bt(const Tensor<S>& x) {
  const std::size_t A = x.dim(0), B = x.dim(1), D = x.dim(2);
  Tensor<S> y({B, A, D});
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(x.data() + (a * B + b) * D, D, y.data() + (b * A + a) * D);
  return y;
}

}  // namespace detail

/// Visual frontend: one feature vector per frame.
template <typename S>
class Frontend {
 public:
  Frontend() = default;

  Frontend(const FrontendConfig& cfg, RngHandle& rng) : cfg_(cfg) {
    cfg.validate();
    stem_ = Conv3dLayer<S>("frontend.stem", 1, cfg.widths[0], cfg.stem_kernel, cfg.stem_stride,
                           cfg.stem_pad, rng);
    stem_bn_ = BatchNormLayer<S>("frontend.stem_bn", cfg.widths[0]);
    std::size_t cin = cfg.widths[0];
    for (std::size_t s = 0; s < cfg.widths.size(); ++s)
      for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        blocks_.emplace_back("frontend.s" + std::to_string(s) + ".b" + std::to_string(b), cin,
                             cfg.widths[s], stride, cfg.se_enabled, cfg.se_reduction, rng);
        cin = cfg.widths[s];
      }
  }

  std::size_t feature_dim() const { return cfg_.widths.back(); }

  /// video [B x 1 x T x H x W] -> features [B x T x D]
  Tensor<S> forward(const Tensor<S>& video, Mode mode) {
    if (video.rank() != 5 || video.dim(1) != 1)
      throw ShapeError("Frontend::forward: expected [B x 1 x T x H x W], got " +
                       shape_str(video.shape()));
    batch_ = video.dim(0);
    frames_ = video.dim(2);
    Tensor<S> x = stem_relu_.forward(stem_bn_.forward(stem_.forward(video), mode));
    if (x.dim(2) != frames_)
      throw ShapeError("Frontend::forward: stem must preserve the temporal extent");
    Tensor<S> planes = detail::fold_time(x);
    if (cfg_.stem_pool) {
      pre_pool_shape_ = planes.shape();
      planes = maxpool2d_forward(planes, 3, 2, 1, &pool_argmax_);
    }
    for (auto& blk : blocks_) planes = blk.forward(planes, mode);
    pre_gap_shape_ = planes.shape();
    Tensor<S> pooled = global_avgpool(planes);  // [B*T x D]
    return pooled.reshaped({batch_, frames_, feature_dim()});
  }

  Tensor<S> backward(const Tensor<S>& dfeat) {
    Tensor<S> d = global_avgpool_backward(pre_gap_shape_,
                                          dfeat.reshaped({batch_ * frames_, feature_dim()}));
    for (std::size_t i = blocks_.size(); i-- > 0;) d = blocks_[i].backward(d);
    if (cfg_.stem_pool) d = maxpool2d_backward(pre_pool_shape_, pool_argmax_, d);
    Tensor<S> dvol = detail::unfold_time(d, batch_, frames_);
    return stem_.backward(stem_bn_.backward(stem_relu_.backward(dvol)));
  }

  void params(std::vector<Param<S>*>& out) {
    stem_.params(out);
    stem_bn_.params(out);
    for (auto& b : blocks_) b.params(out);
  }

  void bn_states(std::vector<BatchNormState<S>*>& out) {
    stem_bn_.bn_states(out);
    for (auto& b : blocks_) b.bn_states(out);
  }

 private:
  FrontendConfig cfg_;
  Conv3dLayer<S> stem_;
  BatchNormLayer<S> stem_bn_;
  ActivationLayer<S> stem_relu_{Activation::kRelu};
  std::vector<ResidualBlock<S>> blocks_;
  std::size_t batch_ = 0, frames_ = 0;
  Shape pre_pool_shape_, pre_gap_shape_;
  std::vector<std::size_t> pool_argmax_;
};

template <typename S>
class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, RngHandle& rng) : cfg_(cfg) {
    cfg.validate();
    frontend_ = Frontend<S>(cfg.frontend, rng);
    const std::size_t gru_in = frontend_.feature_dim() + (cfg.use_word_boundary ? 1 : 0);
    gru_ = GruStack<S>(cfg.backend, gru_in, rng, "backend.gru");
    fc_ = LinearLayer<S>::literal_uniform("head.fc", gru_.output_dim(), cfg.num_classes, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  /// video [B x 1 x T x H x W]; boundary [B x T] required iff the config
  /// enables word-boundary input. Returns logits [B x N].
  Tensor<S> forward(const Tensor<S>& video, const std::optional<Tensor<S>>& boundary,
                    RngHandle& rng, Mode mode) {
    Tensor<S> feats = frontend_.forward(video, mode);
    if (cfg_.use_word_boundary) {
      if (!boundary)
        throw std::invalid_argument("Model::forward: config requires a word-boundary mask");
      feats = attach_word_boundary(feats, *boundary);
    }
    Tensor<S> seq = detail::swap_bt(feats);  // [T x B x D']
    seq_shape_ = seq.shape();
    Tensor<S> out = gru_.forward(seq, rng, mode);
    gru_out_shape_ = out.shape();
    return fc_.forward(temporal_mean(out));
  }

  Tensor<S> backward(const Tensor<S>& dlogits) {
    Tensor<S> dmean = fc_.backward(dlogits);
    Tensor<S> dseq = gru_.backward(temporal_mean_backward(gru_out_shape_, dmean));
    Tensor<S> dfeat = detail::swap_bt(dseq);  // [B x T x D']
    if (cfg_.use_word_boundary) {
      // drop the appended indicator column
      const std::size_t B = dfeat.dim(0), T = dfeat.dim(1), D1 = dfeat.dim(2);
      Tensor<S> core({B, T, D1 - 1});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
          std::copy_n(dfeat.data() + (b * T + t) * D1, D1 - 1, core.data() + (b * T + t) * (D1 - 1));
      dfeat = std::move(core);
    }
    return frontend_.backward(dfeat);
  }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out;
    frontend_.params(out);
    gru_.params(out);
    fc_.params(out);
    return out;
  }

  /// Non-learned per-layer state (batchnorm running statistics); serialized
  /// alongside the parameters so eval-mode behaviour survives a round trip.
  std::vector<BatchNormState<S>*> bn_states() {
    std::vector<BatchNormState<S>*> out;
    frontend_.bn_states(out);
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (Param<S>* p : params()) n += p->value.numel();
    return n;
  }

  void zero_grad() {
    for (Param<S>* p : params()) p->zero_grad();
  }

 private:
  ModelConfig cfg_;
  Frontend<S> frontend_;
  GruStack<S> gru_;
  LinearLayer<S> fc_;
  Shape seq_shape_, gru_out_shape_;
};

}  // namespace lipkit
