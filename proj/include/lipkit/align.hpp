#pragma once

// Landmark-based face alignment: closed-form Procrustes fit of a similarity
// transform against a canonical template, inverse-mapped bilinear warping,
// and fixed-square lip cropping.

#include <json.hpp>

#include <Eigen/Dense>
#include <fstream>
#include <string>
#include <vector>

#include "lipkit/tensor.hpp"

namespace lipkit {

struct AlignError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using LandmarkSet = std::vector<Eigen::Vector2d>;

inline void validate_landmarks(const LandmarkSet& pts) {
  if (pts.size() < 2) throw AlignError("landmark set needs at least 2 points");
  for (const auto& p : pts)
    if (!std::isfinite(p.x()) || !std::isfinite(p.y()))
      throw AlignError("landmark set contains non-finite coordinates");
}

/// p -> s * R(theta) * p + t. Scale is strictly positive and the rotation is
/// proper (determinant +1), so no reflection can be represented.
struct SimilarityTransform {
  double s = 1.0;
  double theta = 0.0;
  double tx = 0.0;
  double ty = 0.0;

  void validate() const {
    if (!(s > 0.0)) throw AlignError("SimilarityTransform: scale must be positive");
  }

  Eigen::Matrix<double, 2, 3> matrix() const {
    validate();
    const double c = s * std::cos(theta), si = s * std::sin(theta);
    Eigen::Matrix<double, 2, 3> m;
    m << c, -si, tx, si, c, ty;
    return m;
  }

  Eigen::Vector2d apply(const Eigen::Vector2d& p) const {
    const double c = s * std::cos(theta), si = s * std::sin(theta);
    return {c * p.x() - si * p.y() + tx, si * p.x() + c * p.y() + ty};
  }

  SimilarityTransform inverse() const {
    validate();
    SimilarityTransform inv;
    inv.s = 1.0 / s;
    inv.theta = -theta;
    const Eigen::Vector2d t0 = inv.s * (Eigen::Rotation2Dd(inv.theta) * Eigen::Vector2d(tx, ty));
    inv.tx = -t0.x();
    inv.ty = -t0.y();
    return inv;
  }
};

/// Least-squares similarity fit: argmin_{s,theta,t} sum_j ||s R x_j + t - y_j||^2.
/// Closed form via centered moment sums.
inline SimilarityTransform procrustes_fit(const LandmarkSet& src, const LandmarkSet& canonical) {
  validate_landmarks(src);
  validate_landmarks(canonical);
  if (src.size() != canonical.size())
    throw AlignError("procrustes_fit: point counts differ (" + std::to_string(src.size()) +
                     " vs " + std::to_string(canonical.size()) + ")");
  const std::size_t L = src.size();
  Eigen::Vector2d cx = Eigen::Vector2d::Zero(), cy = Eigen::Vector2d::Zero();
  for (std::size_t j = 0; j < L; ++j) {
    cx += src[j];
    cy += canonical[j];
  }
  cx /= double(L);
  cy /= double(L);

  double dot = 0.0, cross = 0.0, var = 0.0;
  for (std::size_t j = 0; j < L; ++j) {
    const Eigen::Vector2d a = src[j] - cx, b = canonical[j] - cy;
    dot += a.dot(b);
    cross += a.x() * b.y() - a.y() * b.x();
    var += a.squaredNorm();
  }
  if (!(var > 0.0)) throw AlignError("procrustes_fit: source points are coincident");

  SimilarityTransform xf;
  xf.theta = std::atan2(cross, dot);
  xf.s = std::sqrt(dot * dot + cross * cross) / var;
  if (!(xf.s > 0.0)) throw AlignError("procrustes_fit: degenerate fit (zero scale)");
  const Eigen::Vector2d rot_cx = xf.s * (Eigen::Rotation2Dd(xf.theta) * cx);
  xf.tx = cy.x() - rot_cx.x();
  xf.ty = cy.y() - rot_cx.y();
  return xf;
}

/// Full-affine variant (2x3 matrix, least squares). Kept behind its own entry
/// point; the default pipeline is the similarity fit above.
inline Eigen::Matrix<double, 2, 3> affine_fit(const LandmarkSet& src, const LandmarkSet& canonical) {
  validate_landmarks(src);
  validate_landmarks(canonical);
  if (src.size() != canonical.size() || src.size() < 3)
    throw AlignError("affine_fit: needs matching point counts with at least 3 points");
  const std::size_t L = src.size();
  Eigen::MatrixXd A(L, 3), Y(L, 2);
  for (std::size_t j = 0; j < L; ++j) {
    A.row(j) << src[j].x(), src[j].y(), 1.0;
    Y.row(j) << canonical[j].x(), canonical[j].y();
  }
  const Eigen::MatrixXd sol = A.colPivHouseholderQr().solve(Y);  // 3x2
  return sol.transpose();
}

namespace detail {

template <typename S>
S sample_bilinear_clamped(const Tensor<S>& img, double y, double x) {
  const std::ptrdiff_t H = std::ptrdiff_t(img.dim(0)), W = std::ptrdiff_t(img.dim(1));
  const double yc = std::clamp(y, 0.0, double(H - 1));
  const double xc = std::clamp(x, 0.0, double(W - 1));
  const std::ptrdiff_t y0 = std::min<std::ptrdiff_t>(std::ptrdiff_t(yc), H - 2 >= 0 ? H - 2 : 0);
  const std::ptrdiff_t x0 = std::min<std::ptrdiff_t>(std::ptrdiff_t(xc), W - 2 >= 0 ? W - 2 : 0);
  const double wy = yc - double(y0), wx = xc - double(x0);
  const std::ptrdiff_t y1 = std::min<std::ptrdiff_t>(y0 + 1, H - 1);
  const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(x0 + 1, W - 1);
  return static_cast<S>((1 - wy) * ((1 - wx) * img(y0, x0) + wx * img(y0, x1)) +
                        wy * ((1 - wx) * img(y1, x0) + wx * img(y1, x1)));
}

}  // namespace detail

/// Applies xf to the image domain: output(y, x) = image(xf^{-1}(x, y)).
/// Out-of-bounds samples replicate the nearest edge pixel.
template <typename S>
Tensor<S> warp_image(const Tensor<S>& image, const SimilarityTransform& xf, std::size_t out_h,
                     std::size_t out_w) {
  if (image.rank() != 2) throw ShapeError("warp_image: expected [H x W]");
  xf.validate();
  const SimilarityTransform inv = xf.inverse();
  Tensor<S> out({out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      const Eigen::Vector2d src = inv.apply({double(x), double(y)});
      out(y, x) = detail::sample_bilinear_clamped(image, src.y(), src.x());
    }
  return out;
}

/// Fixed square centered at the canonical lip position, clamped to the image
/// bounds with edge replication. cx indexes columns, cy rows.
template <typename S>
Tensor<S> crop_lip(const Tensor<S>& image, double cx, double cy, std::size_t k) {
  if (image.rank() != 2) throw ShapeError("crop_lip: expected [H x W]");
  const std::ptrdiff_t H = std::ptrdiff_t(image.dim(0)), W = std::ptrdiff_t(image.dim(1));
  if (std::ptrdiff_t(k) > H || std::ptrdiff_t(k) > W)
    throw AlignError("crop_lip: square side " + std::to_string(k) + " exceeds image " +
                     shape_str(image.shape()));
  const std::ptrdiff_t row0 = std::ptrdiff_t(std::llround(cy)) - std::ptrdiff_t(k / 2);
  const std::ptrdiff_t col0 = std::ptrdiff_t(std::llround(cx)) - std::ptrdiff_t(k / 2);
  Tensor<S> out({k, k});
  for (std::size_t y = 0; y < k; ++y)
    for (std::size_t x = 0; x < k; ++x) {
      const std::ptrdiff_t sy = std::clamp<std::ptrdiff_t>(row0 + std::ptrdiff_t(y), 0, H - 1);
      const std::ptrdiff_t sx = std::clamp<std::ptrdiff_t>(col0 + std::ptrdiff_t(x), 0, W - 1);
      out(y, x) = image(sy, sx);
    }
  return out;
}

struct AlignTemplate {
  LandmarkSet points;
  double lip_cx = 0.0;
  double lip_cy = 0.0;
  std::size_t crop_side = 0;
};

/// Per-frame fit + warp + lip crop. Any per-frame failure aborts the clip
/// with the frame index attached.
template <typename S>
Tensor<S> align_clip(const Tensor<S>& frames, const std::vector<LandmarkSet>& landmarks,
                     const AlignTemplate& tpl) {
  if (frames.rank() != 3) throw ShapeError("align_clip: expected [T x H x W]");
  const std::size_t T = frames.dim(0), H = frames.dim(1), W = frames.dim(2);
  if (landmarks.size() != T)
    throw AlignError("align_clip: " + std::to_string(landmarks.size()) + " landmark frames for " +
                     std::to_string(T) + " video frames");
  Tensor<S> out({T, tpl.crop_side, tpl.crop_side});
  for (std::size_t t = 0; t < T; ++t) {
    try {
      Tensor<S> frame({H, W});
      std::copy_n(frames.data() + t * H * W, H * W, frame.data());
      const SimilarityTransform xf = procrustes_fit(landmarks[t], tpl.points);
      Tensor<S> warped = warp_image(frame, xf, H, W);
      Tensor<S> lip = crop_lip(warped, tpl.lip_cx, tpl.lip_cy, tpl.crop_side);
      std::copy_n(lip.data(), lip.numel(), out.data() + t * lip.numel());
    } catch (const std::exception& e) {
      throw AlignError("align_clip: frame " + std::to_string(t) + ": " + e.what());
    }
  }
  return out;
}

// --- file formats ---------------------------------------------------------

/// Landmarks file: JSON array [[x, y] * L] * T.
inline std::vector<LandmarkSet> load_landmarks(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw AlignError("cannot open landmarks: " + path);
  nlohmann::json j;
  try {
    is >> j;
    std::vector<LandmarkSet> out;
    for (const auto& frame : j) {
      LandmarkSet pts;
      for (const auto& p : frame) pts.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
      validate_landmarks(pts);
      out.push_back(std::move(pts));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw AlignError("landmarks parse error in " + path + ": " + e.what());
  }
}

inline void save_landmarks(const std::string& path, const std::vector<LandmarkSet>& frames) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& pts : frames) {
    nlohmann::json f = nlohmann::json::array();
    for (const auto& p : pts) f.push_back({p.x(), p.y()});
    j.push_back(std::move(f));
  }
  std::ofstream os(path);
  if (!os) throw AlignError("cannot write landmarks: " + path);
  os << j.dump() << "\n";
}

/// Template file: JSON { points: [[x,y]...], lip_center: [cx, cy], crop_side: k }.
inline AlignTemplate load_template(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw AlignError("cannot open template: " + path);
  nlohmann::json j;
  try {
    is >> j;
    AlignTemplate tpl;
    for (const auto& p : j.at("points"))
      tpl.points.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
    tpl.lip_cx = j.at("lip_center").at(0).get<double>();
    tpl.lip_cy = j.at("lip_center").at(1).get<double>();
    tpl.crop_side = j.at("crop_side").get<std::size_t>();
    validate_landmarks(tpl.points);
    if (tpl.crop_side == 0) throw AlignError("template: crop_side must be positive");
    return tpl;
  } catch (const nlohmann::json::exception& e) {
    throw AlignError("template parse error in " + path + ": " + e.what());
  }
}

inline void save_template(const std::string& path, const AlignTemplate& tpl) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : tpl.points) pts.push_back({p.x(), p.y()});
  nlohmann::json j{{"points", pts},
                   {"lip_center", {tpl.lip_cx, tpl.lip_cy}},
                   {"crop_side", tpl.crop_side}};
  std::ofstream os(path);
  if (!os) throw AlignError("cannot write template: " + path);
  os << j.dump(1) << "\n";
}

}  // namespace lipkit
