#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "lipkit/rng.hpp"
#include "lipkit/tensor.hpp"

using namespace lipkit;

TEST_CASE("matmul hand cases") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
  auto c = matmul(a, b);
  CHECK(c(0, 0) == doctest::Approx(19));
  CHECK(c(0, 1) == doctest::Approx(22));
  CHECK(c(1, 0) == doctest::Approx(43));
  CHECK(c(1, 1) == doctest::Approx(50));

  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto ib = matmul(eye, b);
  for (std::size_t i = 0; i < 4; ++i) CHECK(ib[i] == b[i]);

  Tensor<double> z({2, 2}, 0.0);
  auto zb = matmul(z, b);
  for (std::size_t i = 0; i < 4; ++i) CHECK(zb[i] == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor<double> a({2, 3}), b({2, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul associativity on random chains") {
  RngHandle rng(7);
  for (int it = 0; it < 5; ++it) {
    auto a = rand_uniform<double>(rng, {3, 4}, -1, 1);
    auto b = rand_uniform<double>(rng, {4, 5}, -1, 1);
    auto c = rand_uniform<double>(rng, {5, 2}, -1, 1);
    auto l = matmul(matmul(a, b), c);
    auto r = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < l.numel(); ++i)
      CHECK(l[i] == doctest::Approx(r[i]).epsilon(1e-10));
  }
  // 32-bit route with the looser tolerance
  RngHandle rng32(8);
  auto a = rand_uniform<float>(rng32, {3, 4}, -1, 1);
  auto b = rand_uniform<float>(rng32, {4, 5}, -1, 1);
  auto c = rand_uniform<float>(rng32, {5, 2}, -1, 1);
  auto l = matmul(matmul(a, b), c);
  auto r = matmul(a, matmul(b, c));
  for (std::size_t i = 0; i < l.numel(); ++i)
    CHECK(double(l[i]) == doctest::Approx(double(r[i])).epsilon(1e-4));
}

TEST_CASE("reduce") {
  auto x = Tensor<double>::from({2}, {1, 3});
  CHECK(reduce(x, {0}, Reduce::kMean)[0] == doctest::Approx(2));

  Tensor<double> ones({2, 3}, 1.0);
  CHECK(reduce(ones, {0, 1}, Reduce::kSum)[0] == doctest::Approx(6));

  auto v = Tensor<double>::from({3}, {-1, 4, 2});
  // scan oracle
  double mx = *std::max_element(v.raw().begin(), v.raw().end());
  CHECK(reduce(v, {0}, Reduce::kMax)[0] == doctest::Approx(mx));

  CHECK_THROWS_AS(reduce(v, {1}, Reduce::kSum), ShapeError);
}

TEST_CASE("reduce mean times count equals sum") {
  RngHandle rng(11);
  auto x = rand_uniform<double>(rng, {4, 5, 3}, -2, 2);
  auto m = reduce(x, {1}, Reduce::kMean);
  auto s = reduce(x, {1}, Reduce::kSum);
  for (std::size_t i = 0; i < m.numel(); ++i)
    CHECK(m[i] * 5 == doctest::Approx(s[i]).epsilon(1e-6));
}

TEST_CASE("rand_uniform statistics and determinism") {
  RngHandle rng(42);
  auto t = rand_uniform<double>(rng, {100000}, 0.0, 1.0);
  double mean = 0;
  for (std::size_t i = 0; i < t.numel(); ++i) mean += t[i];
  mean /= double(t.numel());
  CHECK(mean == doctest::Approx(0.5).epsilon(0.02));

  // Kolmogorov-Smirnov statistic against the uniform CDF
  std::vector<double> sorted(t.raw());
  std::sort(sorted.begin(), sorted.end());
  double ks = 0;
  const double n = double(sorted.size());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    ks = std::max(ks, std::abs(double(i + 1) / n - sorted[i]));
    ks = std::max(ks, std::abs(sorted[i] - double(i) / n));
  }
  CHECK(ks < 0.02);

  RngHandle a(9), b(9);
  auto ta = rand_uniform<float>(a, {64}, -3, 5);
  auto tb = rand_uniform<float>(b, {64}, -3, 5);
  for (std::size_t i = 0; i < ta.numel(); ++i) {
    CHECK(ta[i] == tb[i]);
    CHECK(ta[i] >= -3);
    CHECK(ta[i] < 5);
  }

  RngHandle c(1);
  CHECK_THROWS_AS(rand_uniform<double>(c, {4}, 1.0, 1.0), std::invalid_argument);
}

TEST_CASE("beta sampler") {
  RngHandle rng(123);
  double mean = 0, mean_flip = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    double l = rng.beta_symmetric(0.2);
    CHECK(l > 0.0);
    CHECK(l < 1.0);
    mean += l;
    mean_flip += 1.0 - l;
  }
  mean /= n;
  mean_flip /= n;
  CHECK(mean == doctest::Approx(0.5).epsilon(0.04));
  CHECK(std::abs(mean - mean_flip) < 0.02 + 1e-12);

  RngHandle a(5), b(5);
  CHECK(a.beta_symmetric(0.2) == b.beta_symmetric(0.2));
  CHECK_THROWS_AS(rng.beta_symmetric(1.5), std::invalid_argument);
  CHECK_THROWS_AS(rng.beta_symmetric(0.0), std::invalid_argument);
}

TEST_CASE("LKT1 round trip and validation") {
  RngHandle rng(3);
  auto t = rand_uniform<float>(rng, {2, 3, 4}, -1, 1);
  std::stringstream ss;
  save_lkt1(ss, t);
  auto back = load_lkt1<float>(ss);
  CHECK(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(back[i] == t[i]);

  // f64 mode
  auto d = rand_uniform<double>(rng, {5}, -1, 1);
  std::stringstream sd;
  save_lkt1(sd, d);
  auto dback = load_lkt1<double>(sd);
  for (std::size_t i = 0; i < d.numel(); ++i) CHECK(dback[i] == d[i]);

  // dtype mismatch is rejected
  std::stringstream sm;
  save_lkt1(sm, t);
  CHECK_THROWS(load_lkt1<double>(sm));

  std::stringstream bad("nope");
  CHECK_THROWS(load_lkt1<float>(bad));
}

TEST_CASE("non-finite construction is rejected") {
  CHECK_THROWS_AS(Tensor<double>::from({2}, {1.0, std::nan("")}), NumericError);
}

TEST_CASE("rng serialization round trip") {
  RngHandle a(77);
  a.uniform01();
  auto b = RngHandle::deserialize(a.serialize());
  for (int i = 0; i < 10; ++i) CHECK(a.uniform01() == b.uniform01());
}
