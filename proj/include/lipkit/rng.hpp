#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lipkit/tensor.hpp"

namespace lipkit {

/// Seeded pseudo-random stream. One documented algorithm (mt19937_64) backs
/// every stochastic operation in the toolkit; identical seeds give identical
/// draw sequences within one build. Handles are single-owner: never share one
/// across concurrent call sites.
class RngHandle {
 public:
  explicit RngHandle(std::uint64_t seed) : gen_(seed) {}

  /// Derive an independent stream for a named sub-purpose. Streams derived
  /// with distinct tags from the same seed are decorrelated by a splitmix
  /// pass over (seed, tag).
  static RngHandle derive(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return RngHandle(z ^ (z >> 31));
  }

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform draw in [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Uniform draw strictly inside (0, 1); safe to pass to log().
  double uniform01_open() {
    return (static_cast<double>(gen_() >> 12) + 0.5) * 0x1.0p-52;
  }

  double uniform(double lo, double hi) {
    if (!(lo < hi)) throw std::invalid_argument("RngHandle::uniform: requires lo < hi");
    return lo + (hi - lo) * uniform01();
  }

  /// Uniform integer in [0, n) by rejection (no modulo bias).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("RngHandle::uniform_int: n must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                (std::numeric_limits<std::uint64_t>::max() % n);
    std::uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller, one value per call for reproducibility of the call pattern.
    double u1 = uniform01_open();
    double u2 = uniform01();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Beta(alpha, alpha) via Johnk's algorithm in log space. Valid for
  /// 0 < alpha <= 1, which covers the mixup regime.
  double beta_symmetric(double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0))
      throw std::invalid_argument("beta_symmetric: alpha must be in (0, 1]");
    for (;;) {
      double lx = std::log(uniform01_open()) / alpha;
      double ly = std::log(uniform01_open()) / alpha;
      double hi = std::max(lx, ly), lo = std::min(lx, ly);
      double lsum = hi + std::log1p(std::exp(lo - hi));
      if (lsum <= 0.0) {
        double lam = std::exp(lx - lsum);
        // Clamp away from the closed endpoints produced by rounding.
        const double eps = 1e-15;
        return std::min(1.0 - eps, std::max(eps, lam));
      }
    }
  }

  /// Fisher-Yates shuffle driven by uniform_int.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  static RngHandle deserialize(const std::string& s) {
    RngHandle r(0);
    std::istringstream is(s);
    is >> r.gen_;
    if (!is) throw std::runtime_error("RngHandle: bad serialized state");
    return r;
  }

 private:
  std::mt19937_64 gen_;
};

/// Tensor of i.i.d. uniform draws on [lo, hi).
template <typename S>
Tensor<S> rand_uniform(RngHandle& rng, const Shape& shape, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("rand_uniform: requires lo < hi");
  Tensor<S> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<S>(lo + (hi - lo) * rng.uniform01());
  return t;
}

}  // namespace lipkit
