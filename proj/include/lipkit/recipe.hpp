#pragma once

// Training recipe: losses (cross-entropy, label smoothing), mixup, Adam with
// weight decay and linear LR scaling, and the three LR schedulers.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lipkit/nn.hpp"

namespace lipkit {

enum class SchedulerKind { kPlateau, kCosine, kExponential };

inline std::string scheduler_kind_name(SchedulerKind k) {
  switch (k) {
    case SchedulerKind::kPlateau: return "plateau";
    case SchedulerKind::kCosine: return "cosine";
    case SchedulerKind::kExponential: return "exponential";
  }
  return "?";
}

/// Every training hyperparameter, with the published defaults.
struct RecipeConfig {
  double base_lr = 3e-4;
  double weight_decay = 1e-4;
  std::size_t base_batch = 32;
  std::size_t batch = 32;
  double epsilon = 0.1;  // label smoothing
  double alpha = 0.2;    // mixup Beta(alpha, alpha)
  std::size_t total_epochs = 80;
  std::size_t plateau_patience = 3;
  double plateau_factor = 2.0;
  double min_lr = 1e-6;
  double exp_decay = 0.95;
  SchedulerKind scheduler = SchedulerKind::kPlateau;

  bool mixup_enabled = false;
  bool mixup_per_sample = false;  // default: one lambda per batch
  bool label_smooth_enabled = false;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool decoupled_weight_decay = false;

  void validate() const {
    if (!(base_lr > 0) || !(min_lr > 0) || !(weight_decay >= 0))
      throw std::invalid_argument("RecipeConfig: rates must be positive");
    if (!(epsilon >= 0 && epsilon < 1))
      throw std::invalid_argument("RecipeConfig: epsilon must be in [0, 1)");
    if (batch < 1 || base_batch < 1)
      throw std::invalid_argument("RecipeConfig: batch sizes must be >= 1");
    if (!(alpha > 0 && alpha <= 1))
      throw std::invalid_argument("RecipeConfig: alpha must be in (0, 1]");
  }
};

// --- losses ---------------------------------------------------------------

/// q_i = eps/N off the label, q_y = 1 - (N-1) eps / N.
template <typename S>
Tensor<S> label_smooth(std::size_t y, std::size_t num_classes, double eps) {
  if (y >= num_classes)
    throw std::invalid_argument("label_smooth: class " + std::to_string(y) + " out of range");
  if (!(eps >= 0 && eps < 1)) throw std::invalid_argument("label_smooth: eps must be in [0, 1)");
  Tensor<S> q({num_classes}, static_cast<S>(eps / double(num_classes)));
  q[y] = static_cast<S>(1.0 - double(num_classes - 1) * eps / double(num_classes));
  return q;
}

/// Row-wise softmax with max-subtraction stabilization.
template <typename S>
Tensor<S> softmax(const Tensor<S>& logits) {
  const std::size_t rows = logits.rank() == 2 ? logits.dim(0) : 1;
  const std::size_t N = logits.rank() == 2 ? logits.dim(1) : logits.numel();
  Tensor<S> p(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* in = logits.data() + r * N;
    S* out = p.data() + r * N;
    S mx = in[0];
    for (std::size_t i = 1; i < N; ++i) mx = std::max(mx, in[i]);
    S sum = S(0);
    for (std::size_t i = 0; i < N; ++i) sum += (out[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < N; ++i) out[i] /= sum;
  }
  return p;
}

template <typename S>
void check_distribution(const Tensor<S>& q) {
  S sum = S(0);
  for (std::size_t i = 0; i < q.numel(); ++i) {
    if (q[i] < S(0)) throw std::invalid_argument("cross_entropy: negative target probability");
    sum += q[i];
  }
  if (std::abs(double(sum) - 1.0) > 1e-6)
    throw std::invalid_argument("cross_entropy: target does not sum to 1");
}

/// L = -sum_i q_i log softmax(logits)_i over one sample.
template <typename S>
S cross_entropy(const Tensor<S>& logits, const Tensor<S>& q) {
  if (logits.numel() != q.numel())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs target " +
                     shape_str(q.shape()));
  check_distribution(q);
  const std::size_t N = logits.numel();
  S mx = logits[0];
  for (std::size_t i = 1; i < N; ++i) mx = std::max(mx, logits[i]);
  S lse = S(0);
  for (std::size_t i = 0; i < N; ++i) lse += std::exp(logits[i] - mx);
  lse = std::log(lse) + mx;
  S loss = S(0);
  for (std::size_t i = 0; i < N; ++i) loss -= q[i] * (logits[i] - lse);
  return loss;
}

/// Mean cross-entropy over a batch plus its logits gradient (p - q) / B.
template <typename S>
S cross_entropy_batch(const Tensor<S>& logits, const Tensor<S>& targets, Tensor<S>* dlogits) {
  if (logits.shape() != targets.shape())
    throw ShapeError("cross_entropy_batch: shape mismatch");
  const std::size_t B = logits.dim(0), N = logits.dim(1);
  Tensor<S> p = softmax(logits);
  S loss = S(0);
  for (std::size_t b = 0; b < B; ++b) {
    const S* lg = logits.data() + b * N;
    const S* q = targets.data() + b * N;
    S mx = lg[0];
    for (std::size_t i = 1; i < N; ++i) mx = std::max(mx, lg[i]);
    S lse = S(0);
    for (std::size_t i = 0; i < N; ++i) lse += std::exp(lg[i] - mx);
    lse = std::log(lse) + mx;
    for (std::size_t i = 0; i < N; ++i) loss -= q[i] * (lg[i] - lse);
  }
  loss /= static_cast<S>(B);
  if (dlogits) {
    *dlogits = Tensor<S>({B, N});
    for (std::size_t i = 0; i < p.numel(); ++i)
      (*dlogits)[i] = (p[i] - targets[i]) / static_cast<S>(B);
  }
  return loss;
}

// --- mixup ----------------------------------------------------------------

/// Batch carrier for mixup: inputs with leading batch axis, target
/// distributions [B x N], optional per-sample boundary masks [B x T].
template <typename S>
struct MixupBatch {
  Tensor<S> x;
  Tensor<S> targets;
  std::optional<Tensor<S>> boundary;
};

/// x_hat[b] = lambda[b] x[b] + (1 - lambda[b]) x[perm[b]], applied alike to
/// inputs, targets, and boundary masks.
template <typename S>
void mixup_apply(MixupBatch<S>& batch, const std::vector<std::size_t>& perm,
                 const std::vector<double>& lam) {
  const std::size_t B = batch.x.rank() ? batch.x.dim(0) : 0;
  if (B == 0 || batch.targets.rank() == 0 || batch.targets.dim(0) != B || perm.size() != B ||
      lam.size() != B)
    throw std::invalid_argument("mixup_apply: empty or inconsistent batch");
  auto mix = [&](Tensor<S>& t) {
    const std::size_t stride = t.numel() / B;
    Tensor<S> src = t;
    for (std::size_t b = 0; b < B; ++b) {
      const S l = static_cast<S>(lam[b]);
      const S* a = src.data() + b * stride;
      const S* c = src.data() + perm[b] * stride;
      S* o = t.data() + b * stride;
      for (std::size_t i = 0; i < stride; ++i) o[i] = l * a[i] + (S(1) - l) * c[i];
    }
  };
  mix(batch.x);
  mix(batch.targets);
  if (batch.boundary) mix(*batch.boundary);
}

/// Draws a shuffled pairing and lambda ~ Beta(alpha, alpha) (one per batch,
/// or one per sample), then mixes in place.
template <typename S>
void mixup_batch(MixupBatch<S>& batch, double alpha, RngHandle& rng, bool per_sample = false) {
  const std::size_t B = batch.x.rank() ? batch.x.dim(0) : 0;
  if (B == 0 || batch.targets.rank() == 0 || batch.targets.dim(0) != B)
    throw std::invalid_argument("mixup_batch: empty or inconsistent batch");
  std::vector<std::size_t> perm(B);
  for (std::size_t i = 0; i < B; ++i) perm[i] = i;
  rng.shuffle(perm);

  std::vector<double> lam(B);
  if (per_sample) {
    for (auto& l : lam) l = rng.beta_symmetric(alpha);
  } else {
    const double l = rng.beta_symmetric(alpha);
    std::fill(lam.begin(), lam.end(), l);
  }
  mixup_apply(batch, perm, lam);
}

// --- optimizer ------------------------------------------------------------

/// lr = base_lr * batch / base_batch (linear scaling rule).
inline double scale_lr(double base_lr, std::size_t batch, std::size_t base_batch) {
  return base_lr * static_cast<double>(batch) / static_cast<double>(base_batch);
}

/// Adam with coupled L2 weight decay by default; a decoupled mode applies the
/// decay directly to the parameter value instead of the gradient.
template <typename S>
class Adam {
 public:
  Adam() = default;
  explicit Adam(const std::vector<Param<S>*>& params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8, bool decoupled = false)
      : beta1_(beta1), beta2_(beta2), eps_(eps), decoupled_(decoupled) {
    for (Param<S>* p : params) slots_.push_back({Tensor<S>(p->value.shape(), S(0)),
                                                 Tensor<S>(p->value.shape(), S(0))});
  }

  std::size_t step_count() const { return t_; }

  /// One update over the populated gradients; gradients are zeroed after.
  void step(const std::vector<Param<S>*>& params, double lr, double weight_decay) {
    if (params.size() != slots_.size())
      throw std::invalid_argument("Adam::step: parameter list does not match optimizer state");
    ++t_;
    const S bc1 = static_cast<S>(1.0 - std::pow(beta1_, double(t_)));
    const S bc2 = static_cast<S>(1.0 - std::pow(beta2_, double(t_)));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Param<S>& p = *params[k];
      Slot& s = slots_[k];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        S g = p.grad[i];
        if (!decoupled_) g += static_cast<S>(weight_decay) * p.value[i];
        s.m[i] = static_cast<S>(beta1_) * s.m[i] + (S(1) - static_cast<S>(beta1_)) * g;
        s.v[i] = static_cast<S>(beta2_) * s.v[i] + (S(1) - static_cast<S>(beta2_)) * g * g;
        const S mhat = s.m[i] / bc1;
        const S vhat = s.v[i] / bc2;
        p.value[i] -= static_cast<S>(lr) * mhat / (std::sqrt(vhat) + static_cast<S>(eps_));
        if (decoupled_) p.value[i] -= static_cast<S>(lr * weight_decay) * p.value[i];
      }
      p.zero_grad();
    }
  }

  struct Slot {
    Tensor<S> m, v;
  };
  std::vector<Slot>& slots() { return slots_; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double eps() const { return eps_; }
  void set_step_count(std::size_t t) { t_ = t; }

 private:
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  bool decoupled_ = false;
};

// --- schedulers -----------------------------------------------------------

/// eta_t = (1 + cos(t pi / T)) eta / 2
inline double cosine_lr(std::size_t t, std::size_t total, double eta) {
  if (t > total) throw std::invalid_argument("cosine_lr: epoch beyond schedule horizon");
  return 0.5 * (1.0 + std::cos(double(t) * M_PI / double(total))) * eta;
}

struct SchedulerState {
  SchedulerKind kind = SchedulerKind::kPlateau;
  std::size_t epoch = 0;             // completed epochs
  double best_val_error = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  double lr = 0.0;

  static SchedulerState init(const RecipeConfig& cfg) {
    SchedulerState s;
    s.kind = cfg.scheduler;
    s.lr = scale_lr(cfg.base_lr, cfg.batch, cfg.base_batch);
    return s;
  }
};

/// Called exactly once per epoch, after validation. Returns the learning
/// rate for the next epoch.
inline double scheduler_epoch_end(SchedulerState& state, double val_error,
                                  const RecipeConfig& cfg) {
  const double eta = scale_lr(cfg.base_lr, cfg.batch, cfg.base_batch);
  ++state.epoch;
  switch (state.kind) {
    case SchedulerKind::kPlateau:
      if (val_error < state.best_val_error) {
        state.best_val_error = val_error;
        state.since_best = 0;
      } else if (++state.since_best >= cfg.plateau_patience) {
        state.lr = std::max(cfg.min_lr, state.lr / cfg.plateau_factor);
        state.since_best = 0;
      }
      break;
    case SchedulerKind::kCosine:
      state.lr = cosine_lr(state.epoch, cfg.total_epochs, eta);
      break;
    case SchedulerKind::kExponential:
      state.lr *= cfg.exp_decay;
      break;
  }
  return state.lr;
}

}  // namespace lipkit
