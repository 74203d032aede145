#pragma once

// GRU cell, stacked bidirectional GRU, and the temporal-average head.
// Sequences are carried as [T x B x d] tensors; each time step is one
// [B x d] matrix so the gate products run as GEMMs.

#include <memory>
#include <vector>

#include "lipkit/nn.hpp"

namespace lipkit {

enum class GruInit {
  kPaperLiteral,  // every parameter uniform on (-1, 1)
  kScaled,        // uniform on (-1/sqrt(h), 1/sqrt(h))
};

template <typename S>
struct GruLayerParams {
  Param<S> Wz, Wr, Wh;           // input-to-hidden, [h x d]
  Param<S> Uz, Ur, Uh;           // hidden-to-hidden, [h x h]
  Param<S> bz, br, bh_in, bh_rec;  // [h]

  GruLayerParams() = default;

  GruLayerParams(const std::string& name, std::size_t d, std::size_t h, RngHandle& rng,
                 GruInit init) {
    const double a = init == GruInit::kPaperLiteral ? 1.0 : 1.0 / std::sqrt(double(h));
    auto draw = [&](const std::string& suffix, Shape shape) {
      return Param<S>(name + "." + suffix, rand_uniform<S>(rng, shape, -a, a));
    };
    Wz = draw("Wz", {h, d});
    Wr = draw("Wr", {h, d});
    Wh = draw("Wh", {h, d});
    Uz = draw("Uz", {h, h});
    Ur = draw("Ur", {h, h});
    Uh = draw("Uh", {h, h});
    bz = draw("bz", {h});
    br = draw("br", {h});
    bh_in = draw("bh_in", {h});
    bh_rec = draw("bh_rec", {h});
  }

  std::size_t hidden() const { return Wz.value.dim(0); }
  std::size_t input() const { return Wz.value.dim(1); }

  void collect(std::vector<Param<S>*>& out) {
    for (Param<S>* p : {&Wz, &Wr, &Wh, &Uz, &Ur, &Uh, &bz, &br, &bh_in, &bh_rec}) out.push_back(p);
  }
};

template <typename S>
struct GruStepCache {
  Tensor<S> x, h_prev, z, r, htilde, u;  // u = Uh h_prev + bh_rec
};

/// One batched GRU step:
///   z = sigma(Wz x + Uz h + bz), r = sigma(Wr x + Ur h + br)
///   htilde = tanh(Wh x + bh_in + r .* (Uh h + bh_rec))
///   h' = (1 - z) .* htilde + z .* h
template <typename S>
Tensor<S> gru_cell_forward(const Tensor<S>& x, const Tensor<S>& h_prev,
                           const GruLayerParams<S>& p, GruStepCache<S>* cache = nullptr) {
  const std::size_t B = x.dim(0), d = x.dim(1), h = p.hidden();
  if (d != p.input() || h_prev.dim(1) != h || h_prev.dim(0) != B)
    throw ShapeError("gru_cell_forward: x " + shape_str(x.shape()) + " h " +
                     shape_str(h_prev.shape()) + " vs params d=" + std::to_string(p.input()) +
                     " h=" + std::to_string(h));

  auto gate = [&](const Param<S>& W, const Param<S>& U, const Param<S>& b) {
    Tensor<S> g({B, h});
    g.matrix(B, h).noalias() = x.matrix(B, d) * W.value.matrix(h, d).transpose() +
                               h_prev.matrix(B, h) * U.value.matrix(h, h).transpose();
    g.matrix(B, h).rowwise() += b.value.vec().transpose();
    return g;
  };

  Tensor<S> z = gate(p.Wz, p.Uz, p.bz);
  Tensor<S> r = gate(p.Wr, p.Ur, p.br);
  for (std::size_t i = 0; i < z.numel(); ++i) z[i] = sigmoid_scalar(z[i]);
  for (std::size_t i = 0; i < r.numel(); ++i) r[i] = sigmoid_scalar(r[i]);

  Tensor<S> u({B, h});
  u.matrix(B, h).noalias() = h_prev.matrix(B, h) * p.Uh.value.matrix(h, h).transpose();
  u.matrix(B, h).rowwise() += p.bh_rec.value.vec().transpose();

  Tensor<S> htilde({B, h});
  htilde.matrix(B, h).noalias() = x.matrix(B, d) * p.Wh.value.matrix(h, d).transpose();
  htilde.matrix(B, h).rowwise() += p.bh_in.value.vec().transpose();
  for (std::size_t i = 0; i < htilde.numel(); ++i) htilde[i] = std::tanh(htilde[i] + r[i] * u[i]);

  Tensor<S> h_next({B, h});
  for (std::size_t i = 0; i < h_next.numel(); ++i)
    h_next[i] = (S(1) - z[i]) * htilde[i] + z[i] * h_prev[i];

  if (cache) *cache = {x, h_prev, std::move(z), std::move(r), std::move(htilde), std::move(u)};
  return h_next;
}

/// Reverse step: consumes d h' and the step cache, accumulates parameter
/// gradients, returns (dx, dh_prev).
template <typename S>
std::pair<Tensor<S>, Tensor<S>> gru_cell_backward(const GruStepCache<S>& c, GruLayerParams<S>& p,
                                                  const Tensor<S>& dh_next) {
  const std::size_t B = c.x.dim(0), d = c.x.dim(1), h = p.hidden();
  Tensor<S> dz({B, h}), dg({B, h}), du({B, h}), dr({B, h});
  Tensor<S> dh_prev({B, h});

  for (std::size_t i = 0; i < dh_next.numel(); ++i) {
    const S dh = dh_next[i];
    const S z = c.z[i], r = c.r[i], ht = c.htilde[i];
    const S dht = dh * (S(1) - z);
    dz[i] = dh * (c.h_prev[i] - ht) * z * (S(1) - z);
    const S g = dht * (S(1) - ht * ht);  // grad at the tanh pre-activation
    dg[i] = g;
    du[i] = g * r;
    dr[i] = g * c.u[i] * r * (S(1) - r);
    dh_prev[i] = dh * z;
  }

  auto accum = [&](const Tensor<S>& pre, Param<S>& W, Param<S>& U, Param<S>& b) {
    W.grad.matrix(h, d).noalias() += pre.matrix(B, h).transpose() * c.x.matrix(B, d);
    U.grad.matrix(h, h).noalias() += pre.matrix(B, h).transpose() * c.h_prev.matrix(B, h);
    b.grad.vec().noalias() += pre.matrix(B, h).colwise().sum().transpose();
  };
  accum(dz, p.Wz, p.Uz, p.bz);
  accum(dr, p.Wr, p.Ur, p.br);
  // candidate path: Wh/bh_in take dg, Uh/bh_rec take du
  p.Wh.grad.matrix(h, d).noalias() += dg.matrix(B, h).transpose() * c.x.matrix(B, d);
  p.bh_in.grad.vec().noalias() += dg.matrix(B, h).colwise().sum().transpose();
  p.Uh.grad.matrix(h, h).noalias() += du.matrix(B, h).transpose() * c.h_prev.matrix(B, h);
  p.bh_rec.grad.vec().noalias() += du.matrix(B, h).colwise().sum().transpose();

  Tensor<S> dx({B, d});
  dx.matrix(B, d).noalias() = dz.matrix(B, h) * p.Wz.value.matrix(h, d) +
                              dr.matrix(B, h) * p.Wr.value.matrix(h, d) +
                              dg.matrix(B, h) * p.Wh.value.matrix(h, d);
  dh_prev.matrix(B, h).noalias() += dz.matrix(B, h) * p.Uz.value.matrix(h, h) +
                                    dr.matrix(B, h) * p.Ur.value.matrix(h, h) +
                                    du.matrix(B, h) * p.Uh.value.matrix(h, h);
  return {std::move(dx), std::move(dh_prev)};
}

/// Convenience single-sample step (x [d], h [h]).
template <typename S>
Tensor<S> gru_cell_step(const Tensor<S>& x, const Tensor<S>& h_prev, const GruLayerParams<S>& p) {
  Tensor<S> h = gru_cell_forward(x.reshaped({1, x.numel()}), h_prev.reshaped({1, h_prev.numel()}), p);
  return h.reshaped({h.numel()});
}

struct GruStackConfig {
  std::size_t layers = 3;
  std::size_t hidden = 64;
  bool bidirectional = true;
  double inter_layer_dropout = 0.2;
  GruInit init = GruInit::kPaperLiteral;
};

/// Stacked (optionally bidirectional) GRU over [T x B x d] sequences.
template <typename S>
class GruStack {
 public:
  GruStack() = default;

  GruStack(const GruStackConfig& cfg, std::size_t input_dim, RngHandle& rng,
           const std::string& name = "gru")
      : cfg_(cfg), input_dim_(input_dim) {
    if (cfg.layers < 1 || cfg.hidden < 1)
      throw std::invalid_argument("GruStack: layers and hidden must be >= 1");
    std::size_t d = input_dim;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string base = name + ".l" + std::to_string(l);
      fwd_.emplace_back(base + ".fwd", d, cfg.hidden, rng, cfg.init);
      if (cfg.bidirectional) bwd_.emplace_back(base + ".bwd", d, cfg.hidden, rng, cfg.init);
      d = output_dim();
    }
  }

  std::size_t output_dim() const { return cfg_.hidden * (cfg_.bidirectional ? 2 : 1); }
  std::size_t input_dim() const { return input_dim_; }
  const GruStackConfig& config() const { return cfg_; }

  void params(std::vector<Param<S>*>& out) {
    for (auto& p : fwd_) p.collect(out);
    for (auto& p : bwd_) p.collect(out);
  }

  /// seq is [T x B x d]; returns [T x B x output_dim].
  Tensor<S> forward(const Tensor<S>& seq, RngHandle& rng, Mode mode) {
    if (seq.rank() != 3 || seq.dim(0) < 1)
      throw ShapeError("GruStack::forward: expected non-empty [T x B x d] sequence");
    const std::size_t T = seq.dim(0), B = seq.dim(1);
    caches_.assign(cfg_.layers, LayerCache{});
    Tensor<S> cur = seq;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      LayerCache& lc = caches_[l];
      if (l > 0 && cfg_.inter_layer_dropout > 0.0) {
        lc.dropped_input = dropout_forward(cur, cfg_.inter_layer_dropout, rng, mode, &lc.drop_mask);
        cur = lc.dropped_input;
      }
      lc.input = cur;
      Tensor<S> out({T, B, output_dim()});
      run_direction(cur, fwd_[l], /*reverse=*/false, lc.fwd_steps, out, 0);
      if (cfg_.bidirectional)
        run_direction(cur, bwd_[l], /*reverse=*/true, lc.bwd_steps, out, cfg_.hidden);
      cur = std::move(out);
    }
    return cur;
  }

  /// dout matches forward's output; returns gradient w.r.t. the input sequence.
  Tensor<S> backward(const Tensor<S>& dout) {
    Tensor<S> cur = dout;
    for (std::size_t l = cfg_.layers; l-- > 0;) {
      LayerCache& lc = caches_[l];
      const std::size_t T = lc.input.dim(0), B = lc.input.dim(1), d = lc.input.dim(2);
      Tensor<S> dinput({T, B, d}, S(0));
      back_direction(cur, fwd_[l], false, lc.fwd_steps, dinput, 0);
      if (cfg_.bidirectional) back_direction(cur, bwd_[l], true, lc.bwd_steps, dinput, cfg_.hidden);
      if (l > 0 && cfg_.inter_layer_dropout > 0.0) dinput = dropout_backward(lc.drop_mask, dinput);
      cur = std::move(dinput);
    }
    return cur;
  }

 private:
  struct LayerCache {
    Tensor<S> input;
    Tensor<S> dropped_input;
    Tensor<S> drop_mask;
    std::vector<GruStepCache<S>> fwd_steps, bwd_steps;
  };

  static Tensor<S> step_slice(const Tensor<S>& seq, std::size_t t) {
    const std::size_t B = seq.dim(1), d = seq.dim(2);
    Tensor<S> x({B, d});
    std::copy_n(seq.data() + t * B * d, B * d, x.data());
    return x;
  }

  void run_direction(const Tensor<S>& seq, const GruLayerParams<S>& p, bool reverse,
                     std::vector<GruStepCache<S>>& steps, Tensor<S>& out, std::size_t offset) {
    const std::size_t T = seq.dim(0), B = seq.dim(1), h = cfg_.hidden, D = output_dim();
    steps.assign(T, GruStepCache<S>{});
    Tensor<S> hstate({B, h}, S(0));
    for (std::size_t s = 0; s < T; ++s) {
      const std::size_t t = reverse ? T - 1 - s : s;
      hstate = gru_cell_forward(step_slice(seq, t), hstate, p, &steps[s]);
      for (std::size_t b = 0; b < B; ++b)
        std::copy_n(hstate.data() + b * h, h, out.data() + (t * B + b) * D + offset);
    }
  }

  void back_direction(const Tensor<S>& dout, GruLayerParams<S>& p, bool reverse,
                      std::vector<GruStepCache<S>>& steps, Tensor<S>& dinput, std::size_t offset) {
    const std::size_t T = dinput.dim(0), B = dinput.dim(1), d = dinput.dim(2);
    const std::size_t h = cfg_.hidden, D = output_dim();
    Tensor<S> dh({B, h}, S(0));
    for (std::size_t s = T; s-- > 0;) {
      const std::size_t t = reverse ? T - 1 - s : s;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < h; ++i) dh[b * h + i] += dout[(t * B + b) * D + offset + i];
      auto [dx, dh_prev] = gru_cell_backward(steps[s], p, dh);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < d; ++i) dinput[(t * B + b) * d + i] += dx[b * d + i];
      dh = std::move(dh_prev);
    }
  }

  GruStackConfig cfg_;
  std::size_t input_dim_ = 0;
  std::vector<GruLayerParams<S>> fwd_, bwd_;
  std::vector<LayerCache> caches_;
};

/// Mean over the time axis of [T x B x D] -> [B x D].
template <typename S>
Tensor<S> temporal_mean(const Tensor<S>& seq) {
  if (seq.rank() != 3 || seq.dim(0) < 1)
    throw ShapeError("temporal_mean: expected non-empty [T x B x D]");
  return reduce(seq, {0}, Reduce::kMean);
}

template <typename S>
Tensor<S> temporal_mean_backward(const Shape& seq_shape, const Tensor<S>& dmean) {
  const std::size_t T = seq_shape[0], BD = seq_shape[1] * seq_shape[2];
  Tensor<S> dseq(seq_shape);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < BD; ++i) dseq[t * BD + i] = dmean[i] / static_cast<S>(T);
  return dseq;
}

/// Temporal mean followed by the final linear classifier.
template <typename S>
Tensor<S> temporal_mean_head(const Tensor<S>& seq, const Tensor<S>& fc_w, const Tensor<S>& fc_b) {
  return linear_forward(temporal_mean(seq), fc_w, fc_b);
}

}  // namespace lipkit
