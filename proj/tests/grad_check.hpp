#pragma once

// Central finite-difference gradient checking used across the test suites.
// A check owns a forward closure (re-runnable), a backward closure that
// populates the listed gradient slots, and the (value, grad) tensor pairs to
// verify. All checks run in 64-bit mode.

#include <functional>
#include <utility>
#include <vector>

#include "lipkit/rng.hpp"
#include "lipkit/tensor.hpp"

namespace gradcheck {

using lipkit::Tensor;

struct Check {
  std::function<Tensor<double>()> forward;
  std::function<void(const Tensor<double>&)> backward;  // upstream -> fills grads
  std::vector<std::pair<Tensor<double>*, Tensor<double>*>> wrt;  // (value, grad slot)
};

/// Returns the maximum relative error |analytic - fd| / max(1, |analytic|)
/// over every element of every checked tensor.
inline double max_rel_err(Check& c, lipkit::RngHandle& rng, double h = 1e-5) {
  Tensor<double> y = c.forward();
  Tensor<double> upstream(y.shape());
  for (std::size_t i = 0; i < upstream.numel(); ++i) upstream[i] = rng.uniform(-1.0, 1.0);

  for (auto& [value, grad] : c.wrt) grad->setZero();
  c.backward(upstream);

  auto loss = [&]() {
    Tensor<double> out = c.forward();
    double l = 0;
    for (std::size_t i = 0; i < out.numel(); ++i) l += out[i] * upstream[i];
    return l;
  };

  double worst = 0.0;
  for (auto& [value, grad] : c.wrt) {
    for (std::size_t i = 0; i < value->numel(); ++i) {
      const double saved = (*value)[i];
      (*value)[i] = saved + h;
      const double lp = loss();
      (*value)[i] = saved - h;
      const double lm = loss();
      (*value)[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = (*grad)[i];
      worst = std::max(worst, std::abs(fd - an) / std::max(1.0, std::abs(an)));
    }
  }
  return worst;
}

inline Tensor<double> random_tensor(lipkit::RngHandle& rng, lipkit::Shape shape, double scale = 1.0) {
  return lipkit::rand_uniform<double>(rng, shape, -scale, scale);
}

}  // namespace gradcheck
