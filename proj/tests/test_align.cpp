#include <doctest.h>

#include <filesystem>

#include "lipkit/align.hpp"
#include "lipkit/rng.hpp"

using namespace lipkit;

namespace {

LandmarkSet five_points() {
  return {{10, 10}, {30, 12}, {20, 20}, {12, 30}, {28, 31}};
}

LandmarkSet transformed(const LandmarkSet& pts, const SimilarityTransform& xf) {
  LandmarkSet out;
  for (const auto& p : pts) out.push_back(xf.apply(p));
  return out;
}

double residual(const LandmarkSet& src, const LandmarkSet& dst, const SimilarityTransform& xf) {
  double r = 0.0;
  for (std::size_t j = 0; j < src.size(); ++j) r += (xf.apply(src[j]) - dst[j]).squaredNorm();
  return r;
}

/// Smooth test image: values in [0,1], no sharp edges, so bilinear round
/// trips stay tight.
Tensor<double> smooth_image(std::size_t n) {
  Tensor<double> img({n, n});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      img(y, x) = 0.5 + 0.25 * std::sin(0.23 * double(x)) * std::cos(0.19 * double(y));
  return img;
}

}  // namespace

TEST_CASE("procrustes identity and pure translation") {
  auto src = five_points();
  auto id = procrustes_fit(src, src);
  CHECK(id.s == doctest::Approx(1.0));
  CHECK(id.theta == doctest::Approx(0.0));
  CHECK(id.tx == doctest::Approx(0.0));
  CHECK(id.ty == doctest::Approx(0.0));

  SimilarityTransform shift{1.0, 0.0, 5.0, -3.0};
  auto fit = procrustes_fit(src, transformed(src, shift));
  CHECK(fit.s == doctest::Approx(1.0));
  CHECK(fit.theta == doctest::Approx(0.0));
  CHECK(fit.tx == doctest::Approx(5.0));
  CHECK(fit.ty == doctest::Approx(-3.0));
}

TEST_CASE("procrustes recovers rotation and scale about the centroid") {
  auto src = five_points();
  // rotate 30 degrees and scale 2x about the source centroid
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (const auto& p : src) c += p;
  c /= double(src.size());
  const double th = M_PI / 6.0;
  LandmarkSet dst;
  for (const auto& p : src) dst.push_back(2.0 * (Eigen::Rotation2Dd(th) * (p - c)) + c);

  auto fit = procrustes_fit(src, dst);
  CHECK(fit.s == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(fit.theta == doctest::Approx(th).epsilon(1e-9));
}

TEST_CASE("procrustes property: random transform recovery, det +1, optimality") {
  RngHandle rng(11);
  auto src = five_points();
  for (int it = 0; it < 300; ++it) {
    SimilarityTransform truth;
    truth.s = rng.uniform(0.5, 2.0);
    truth.theta = rng.uniform(-M_PI, M_PI);
    truth.tx = rng.uniform(-20.0, 20.0);
    truth.ty = rng.uniform(-20.0, 20.0);
    auto dst = transformed(src, truth);
    auto fit = procrustes_fit(src, dst);
    CHECK(std::abs(fit.s - truth.s) / truth.s < 1e-6);
    CHECK(std::abs(std::remainder(fit.theta - truth.theta, 2.0 * M_PI)) < 1e-6);
    CHECK(std::abs(fit.tx - truth.tx) < 1e-5);
    CHECK(std::abs(fit.ty - truth.ty) < 1e-5);
    // rotation part is always proper
    const auto m = fit.matrix();
    CHECK(m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0) > 0.0);
  }

  // noisy correspondence: fitted residual never exceeds the identity's
  for (int it = 0; it < 50; ++it) {
    LandmarkSet noisy = src;
    for (auto& p : noisy) p += Eigen::Vector2d(rng.uniform(-2, 2), rng.uniform(-2, 2));
    auto fit = procrustes_fit(src, noisy);
    CHECK(residual(src, noisy, fit) <= residual(src, noisy, SimilarityTransform{}) + 1e-9);
  }
}

TEST_CASE("procrustes degenerate inputs") {
  LandmarkSet point2{{1, 1}, {1, 1}};
  CHECK_THROWS_AS(procrustes_fit(point2, five_points()), AlignError);
  LandmarkSet one{{1, 1}};
  CHECK_THROWS_AS(procrustes_fit(one, one), AlignError);
  auto src = five_points();
  auto four = LandmarkSet(src.begin(), src.begin() + 4);
  CHECK_THROWS_AS(procrustes_fit(src, four), AlignError);
}

TEST_CASE("affine fit reproduces a similarity and a shear") {
  auto src = five_points();
  SimilarityTransform sim{1.5, 0.4, 3.0, -2.0};
  auto m = affine_fit(src, transformed(src, sim));
  auto expect = sim.matrix();
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) CHECK(m(r, c) == doctest::Approx(expect(r, c)).epsilon(1e-9));

  // a pure shear is representable by the affine fit but not the similarity one
  LandmarkSet sheared;
  for (const auto& p : src) sheared.emplace_back(p.x() + 0.3 * p.y(), p.y());
  auto ms = affine_fit(src, sheared);
  CHECK(ms(0, 1) == doctest::Approx(0.3).epsilon(1e-9));
  CHECK(ms(1, 1) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("warp_image identity and translation of a constant image") {
  auto img = smooth_image(32);
  auto same = warp_image(img, SimilarityTransform{}, 32, 32);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(same[i] == doctest::Approx(img[i]));

  Tensor<double> flat({16, 16}, 0.42);
  auto moved = warp_image(flat, SimilarityTransform{1.0, 0.0, 3.0, -2.0}, 16, 16);
  for (std::size_t i = 0; i < moved.numel(); ++i) CHECK(moved[i] == doctest::Approx(0.42));
}

TEST_CASE("warp round trip theta then -theta restores the interior") {
  auto img = smooth_image(48);
  SimilarityTransform rot{1.0, 0.35, 0.0, 0.0};
  // rotate about the image center: conjugate with center translations
  const double c = 23.5;
  SimilarityTransform about_center = rot;
  const Eigen::Vector2d rc = Eigen::Rotation2Dd(rot.theta) * Eigen::Vector2d(c, c);
  about_center.tx = c - rc.x();
  about_center.ty = c - rc.y();
  SimilarityTransform back = about_center.inverse();

  auto once = warp_image(img, about_center, 48, 48);
  auto round = warp_image(once, back, 48, 48);
  double mad = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 12; y < 36; ++y)
    for (std::size_t x = 12; x < 36; ++x) {
      mad += std::abs(round(y, x) - img(y, x));
      ++count;
    }
  CHECK(mad / double(count) < 2e-2);
}

TEST_CASE("similarity inverse composes to the identity") {
  SimilarityTransform xf{1.7, -0.9, 4.0, 11.0};
  auto inv = xf.inverse();
  Eigen::Vector2d p(3.0, -7.0);
  auto q = inv.apply(xf.apply(p));
  CHECK(q.x() == doctest::Approx(p.x()).epsilon(1e-12));
  CHECK(q.y() == doctest::Approx(p.y()).epsilon(1e-12));
  CHECK_THROWS_AS((SimilarityTransform{0.0, 0, 0, 0}.validate()), AlignError);
}

TEST_CASE("crop_lip index arithmetic") {
  Tensor<double> img({96, 96});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = double(i);

  auto full = crop_lip(img, 48, 48, 96);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(full[i] == img[i]);

  // cx=48, cy=60, k=40 -> rows [40,80), cols [28,68)
  auto win = crop_lip(img, 48, 60, 40);
  CHECK(win(0, 0) == img(40, 28));
  CHECK(win(39, 39) == img(79, 67));

  // clamped window replicates edges
  auto corner = crop_lip(img, 0, 0, 8);
  CHECK(corner(0, 0) == img(0, 0));
  CHECK(corner(0, 1) == img(0, 0));  // col -3 clamps to 0
  CHECK(corner(7, 7) == img(3, 3));

  CHECK_THROWS_AS(crop_lip(img, 48, 48, 97), AlignError);
}

TEST_CASE("warp then crop commutes with pre-translated warp on interior windows") {
  auto img = smooth_image(64);
  SimilarityTransform xf{1.0, 0.2, 1.0, -1.5};
  auto warped = warp_image(img, xf, 64, 64);
  auto a = crop_lip(warped, 32, 30, 16);
  // shift the transform so the window origin maps to (0, 0)
  SimilarityTransform shifted = xf;
  shifted.tx -= 32.0 - 8.0;
  shifted.ty -= 30.0 - 8.0;
  auto b = warp_image(img, shifted, 16, 16);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-6));
}

TEST_CASE("align_clip normalizes rotated copies of a frame") {
  auto base = smooth_image(64);
  AlignTemplate tpl;
  tpl.points = {{22, 22}, {42, 22}, {32, 34}, {24, 44}, {40, 44}};
  tpl.lip_cx = 32;
  tpl.lip_cy = 40;
  tpl.crop_side = 24;

  const std::size_t T = 4;
  Tensor<double> frames({T, 64, 64});
  std::vector<LandmarkSet> landmarks(T);
  RngHandle rng(13);
  for (std::size_t t = 0; t < T; ++t) {
    // each frame is the base rotated/scaled/translated by a known jitter;
    // landmarks are the template points pushed through the same transform
    SimilarityTransform jitter;
    jitter.s = 1.0 + 0.05 * rng.uniform(-1, 1);
    jitter.theta = 0.15 * rng.uniform(-1, 1);
    jitter.tx = 1.5 * rng.uniform(-1, 1);
    jitter.ty = 1.5 * rng.uniform(-1, 1);
    auto frame = warp_image(base, jitter, 64, 64);
    std::copy_n(frame.data(), frame.numel(), frames.data() + t * frame.numel());
    landmarks[t] = transformed(tpl.points, jitter);
  }

  auto aligned = align_clip(frames, landmarks, tpl);
  CHECK(aligned.shape() == Shape{T, 24, 24});
  const std::size_t F = 24 * 24;
  for (std::size_t t = 1; t < T; ++t) {
    double mad = 0.0;
    for (std::size_t i = 0; i < F; ++i) mad += std::abs(aligned[t * F + i] - aligned[i]);
    CHECK(mad / double(F) < 2e-2);
  }

  // identity landmarks -> passthrough crop
  std::vector<LandmarkSet> ident(T, tpl.points);
  auto pass = align_clip(frames, ident, tpl);
  auto frame0 = Tensor<double>({64, 64});
  std::copy_n(frames.data(), frame0.numel(), frame0.data());
  auto direct = crop_lip(frame0, tpl.lip_cx, tpl.lip_cy, tpl.crop_side);
  for (std::size_t i = 0; i < F; ++i) CHECK(pass[i] == doctest::Approx(direct[i]));

  // mismatched landmark count aborts with the frame index
  std::vector<LandmarkSet> bad = ident;
  bad[2].pop_back();
  try {
    align_clip(frames, bad, tpl);
    FAIL("expected AlignError");
  } catch (const AlignError& e) {
    CHECK(std::string(e.what()).find("frame 2") != std::string::npos);
  }
  bad.pop_back();
  CHECK_THROWS_AS(align_clip(frames, bad, tpl), AlignError);
}

TEST_CASE("landmark and template files round trip") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "lipkit_test_align";
  fs::remove_all(dir);
  fs::create_directories(dir);

  std::vector<LandmarkSet> lms{five_points(), five_points()};
  lms[1][0] += Eigen::Vector2d(1.5, -0.5);
  save_landmarks((dir / "lm.json").string(), lms);
  auto back = load_landmarks((dir / "lm.json").string());
  REQUIRE(back.size() == 2);
  CHECK(back[1][0].x() == doctest::Approx(11.5));
  CHECK(back[0][4].y() == doctest::Approx(31));

  AlignTemplate tpl;
  tpl.points = five_points();
  tpl.lip_cx = 20;
  tpl.lip_cy = 26;
  tpl.crop_side = 12;
  save_template((dir / "tpl.json").string(), tpl);
  auto tb = load_template((dir / "tpl.json").string());
  CHECK(tb.points.size() == 5);
  CHECK(tb.lip_cx == doctest::Approx(20));
  CHECK(tb.lip_cy == doctest::Approx(26));
  CHECK(tb.crop_side == 12);

  CHECK_THROWS_AS(load_template((dir / "missing.json").string()), AlignError);
}
