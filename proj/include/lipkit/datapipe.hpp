#pragma once

// Sample/batch data model, training-time augmentations, the 40-frame
// word-centering rule, epoch shuffling, and the deterministic synthetic
// video-word dataset generator that stands in for the licensed corpora.

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lipkit/model.hpp"
#include "lipkit/rng.hpp"
#include "lipkit/tensor.hpp"

namespace lipkit {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename S>
struct VideoSample {
  Tensor<S> frames;  // [T x H x W], grayscale in [0, 1]
  std::size_t label = 0;
  BoundaryMask boundary;
  std::string id;
};

struct ManifestEntry {
  std::string path;
  std::size_t label = 0;
  std::size_t boundary_start = 0;
  std::size_t boundary_end = 0;
  std::string split;  // train | val | test
  std::string id;
};

struct DatasetManifest {
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> samples;

  void validate() const {
    for (const auto& s : samples) {
      if (s.label >= class_names.size())
        throw DataError("manifest: label " + std::to_string(s.label) + " out of range for " +
                        std::to_string(class_names.size()) + " classes (" + s.id + ")");
      if (s.boundary_start >= s.boundary_end)
        throw DataError("manifest: empty boundary interval for " + s.id);
    }
  }

  std::vector<const ManifestEntry*> split(const std::string& tag) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& s : samples)
      if (s.split == tag) out.push_back(&s);
    return out;
  }
};

inline void save_manifest(const std::string& path, const DatasetManifest& m) {
  nlohmann::json j;
  j["class_names"] = m.class_names;
  j["samples"] = nlohmann::json::array();
  for (const auto& s : m.samples)
    j["samples"].push_back({{"path", s.path},
                            {"label", s.label},
                            {"boundary_start", s.boundary_start},
                            {"boundary_end", s.boundary_end},
                            {"split", s.split},
                            {"id", s.id}});
  std::ofstream os(path);
  if (!os) throw DataError("cannot write manifest: " + path);
  os << j.dump(1) << "\n";
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest parse error in " + path + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& s : j.at("samples"))
      m.samples.push_back({s.at("path").get<std::string>(), s.at("label").get<std::size_t>(),
                           s.at("boundary_start").get<std::size_t>(),
                           s.at("boundary_end").get<std::size_t>(),
                           s.at("split").get<std::string>(), s.at("id").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest schema error in " + path + ": " + e.what());
  }
  m.validate();
  return m;
}

template <typename S>
VideoSample<S> load_sample(const std::string& data_dir, const ManifestEntry& e) {
  VideoSample<S> s;
  s.frames = load_lkt1_file<S>((std::filesystem::path(data_dir) / e.path).string());
  if (s.frames.rank() != 3) throw DataError("sample " + e.id + ": expected a [T x H x W] tensor");
  s.label = e.label;
  s.boundary = BoundaryMask{s.frames.dim(0), e.boundary_start, e.boundary_end};
  s.boundary.validate();
  s.id = e.id;
  return s;
}

// --- augmentations --------------------------------------------------------

/// BT.601 luma: 0.299 R + 0.587 G + 0.114 B.
template <typename S>
Tensor<S> to_grayscale(const Tensor<S>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3)
    throw ShapeError("to_grayscale: expected [3 x H x W], got " + shape_str(rgb.shape()));
  const std::size_t HW = rgb.dim(1) * rgb.dim(2);
  Tensor<S> out({rgb.dim(1), rgb.dim(2)});
  for (std::size_t i = 0; i < HW; ++i)
    out[i] = S(0.299) * rgb[i] + S(0.587) * rgb[HW + i] + S(0.114) * rgb[2 * HW + i];
  return out;
}

/// Corner-aligned bilinear resize of a single [H x W] frame.
template <typename S>
Tensor<S> resize_bilinear(const Tensor<S>& frame, std::size_t out_h, std::size_t out_w) {
  if (frame.rank() != 2 || frame.dim(0) < 2 || frame.dim(1) < 2)
    throw ShapeError("resize_bilinear: source must be at least 2x2");
  const std::size_t H = frame.dim(0), W = frame.dim(1);
  Tensor<S> out({out_h, out_w});
  const double sy = out_h > 1 ? double(H - 1) / double(out_h - 1) : 0.0;
  const double sx = out_w > 1 ? double(W - 1) / double(out_w - 1) : 0.0;
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double fy = oy * sy;
    const std::size_t y0 = std::min(std::size_t(fy), H - 2);
    const double wy = fy - double(y0);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double fx = ox * sx;
      const std::size_t x0 = std::min(std::size_t(fx), W - 2);
      const double wx = fx - double(x0);
      const double v = (1 - wy) * ((1 - wx) * frame(y0, x0) + wx * frame(y0, x0 + 1)) +
                       wy * ((1 - wx) * frame(y0 + 1, x0) + wx * frame(y0 + 1, x0 + 1));
      out(oy, ox) = static_cast<S>(v);
    }
  }
  return out;
}

template <typename S>
Tensor<S> resize_video_bilinear(const Tensor<S>& video, std::size_t out_h, std::size_t out_w) {
  const std::size_t T = video.dim(0);
  Tensor<S> out({T, out_h, out_w});
  for (std::size_t t = 0; t < T; ++t) {
    Tensor<S> frame({video.dim(1), video.dim(2)});
    std::copy_n(video.data() + t * frame.numel(), frame.numel(), frame.data());
    Tensor<S> r = resize_bilinear(frame, out_h, out_w);
    std::copy_n(r.data(), r.numel(), out.data() + t * r.numel());
  }
  return out;
}

enum class CropMode { kRandom, kCenter };

/// One window per clip (same offset for every frame of the video).
template <typename S>
Tensor<S> crop(const Tensor<S>& video, std::size_t win_h, std::size_t win_w, CropMode mode,
               RngHandle* rng = nullptr) {
  if (video.rank() != 3 || video.dim(1) < win_h || video.dim(2) < win_w)
    throw ShapeError("crop: window " + std::to_string(win_h) + "x" + std::to_string(win_w) +
                     " exceeds source " + shape_str(video.shape()));
  const std::size_t T = video.dim(0), H = video.dim(1), W = video.dim(2);
  std::size_t oy, ox;
  if (mode == CropMode::kRandom) {
    if (!rng) throw std::invalid_argument("crop: random mode requires an rng");
    oy = rng->uniform_int(H - win_h + 1);
    ox = rng->uniform_int(W - win_w + 1);
  } else {
    oy = (H - win_h) / 2;
    ox = (W - win_w) / 2;
  }
  Tensor<S> out({T, win_h, win_w});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t y = 0; y < win_h; ++y)
      std::copy_n(video.data() + (t * H + oy + y) * W + ox, win_w,
                  out.data() + (t * win_h + y) * win_w);
  return out;
}

/// Whole-clip horizontal flip, applied with probability p (one draw).
template <typename S>
Tensor<S> hflip(const Tensor<S>& video, double p, RngHandle& rng) {
  if (!rng.bernoulli(p)) return video;
  const std::size_t T = video.dim(0), H = video.dim(1), W = video.dim(2);
  Tensor<S> out(video.shape());
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out(t, y, x) = video(t, y, W - 1 - x);
  return out;
}

/// Extract a fixed-length window centered on the word interval; out-of-range
/// indices replicate the nearest valid frame.
template <typename S>
VideoSample<S> center_window(const VideoSample<S>& sample, std::size_t target = 40) {
  sample.boundary.validate();
  const std::size_t T = sample.frames.dim(0), H = sample.frames.dim(1), W = sample.frames.dim(2);
  const std::ptrdiff_t center = std::ptrdiff_t((sample.boundary.start + sample.boundary.end) / 2);
  const std::ptrdiff_t lo = center - std::ptrdiff_t(target / 2);

  VideoSample<S> out;
  out.frames = Tensor<S>({target, H, W});
  for (std::size_t j = 0; j < target; ++j) {
    const std::ptrdiff_t src = std::clamp<std::ptrdiff_t>(lo + std::ptrdiff_t(j), 0,
                                                          std::ptrdiff_t(T) - 1);
    std::copy_n(sample.frames.data() + std::size_t(src) * H * W, H * W,
                out.frames.data() + j * H * W);
  }
  auto clamp_ix = [&](std::ptrdiff_t v) {
    return std::size_t(std::clamp<std::ptrdiff_t>(v, 0, std::ptrdiff_t(target)));
  };
  out.boundary = BoundaryMask{target, clamp_ix(std::ptrdiff_t(sample.boundary.start) - lo),
                              clamp_ix(std::ptrdiff_t(sample.boundary.end) - lo)};
  out.label = sample.label;
  out.id = sample.id;
  return out;
}

/// Uniform permutation of [0, n), fresh per call, deterministic given rng.
inline std::vector<std::size_t> epoch_shuffle(std::size_t n, RngHandle& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  return order;
}

// --- synthetic dataset ----------------------------------------------------

struct SyntheticConfig {
  std::size_t classes = 10;
  std::size_t per_class = 50;
  std::size_t frames = 16;
  std::size_t image_size = 48;
  double noise = 0.04;
  bool boundary_context = false;
  std::uint64_t seed = 0;
};

/// Oscillation frequency (cycles per frame) assigned to a class. Adjacent
/// classes are separated by a fixed gap by construction.
inline double class_frequency(const SyntheticConfig& cfg, std::size_t cls) {
  return 0.06 + 0.32 * double(cls) / double(std::max<std::size_t>(1, cfg.classes - 1));
}

inline double class_frequency_gap(const SyntheticConfig& cfg) {
  return 0.32 / double(std::max<std::size_t>(1, cfg.classes - 1));
}

namespace detail {

/// Renders one frame: a soft-edged filled ellipse over a dark background,
/// plus a global brightness offset.
template <typename S>
void render_frame(Tensor<S>& frames, std::size_t t, double cx, double cy, double ax, double ay,
                  double brightness) {
  const std::size_t Hh = frames.dim(1), Ww = frames.dim(2);
  S* p = frames.data() + t * Hh * Ww;
  for (std::size_t y = 0; y < Hh; ++y)
    for (std::size_t x = 0; x < Ww; ++x) {
      const double dx = (double(x) - cx) / ax;
      const double dy = (double(y) - cy) / ay;
      const double r = std::sqrt(dx * dx + dy * dy);
      const double coverage = std::clamp(3.0 * (1.0 - r), 0.0, 1.0);
      p[y * Ww + x] = static_cast<S>(0.05 + 0.75 * coverage + brightness);
    }
}

}  // namespace detail

/// One rendered video clip. Classes are told apart by the frequency and
/// phase with which the ellipse opening oscillates during the word interval;
/// in boundary-context mode that signal is damped and a class-correlated
/// brightness level appears on the out-of-word frames instead, with a
/// misleading level inside the interval.
template <typename S>
VideoSample<S> synthesize_sample(const SyntheticConfig& cfg, std::size_t cls, RngHandle& rng,
                                 const std::string& id) {
  const std::size_t T = cfg.frames, Sz = cfg.image_size, K = cfg.classes;
  // Leave at least two out-of-word frames so the context cue always exists;
  // the wide length range makes the in/out frame ratio vary a lot per clip.
  const std::size_t min_len = std::max<std::size_t>(3, T / 3);
  const std::size_t max_len = std::max(min_len + 1, std::min(T - 2, 5 * T / 6));
  const std::size_t len = min_len + rng.uniform_int(max_len - min_len + 1);
  const std::size_t start = rng.uniform_int(T - len + 1);

  const double freq = class_frequency(cfg, cls);
  const double phase = 2.0 * M_PI * double(cls) / double(K);

  const double cx = Sz / 2.0 + rng.uniform(-double(Sz) / 12.0, double(Sz) / 12.0);
  const double cy = Sz / 2.0 + rng.uniform(-double(Sz) / 12.0, double(Sz) / 12.0);
  const double ax = Sz / 4.0 + rng.uniform(-1.0, 1.0);
  const double b_mid = Sz / 8.0;
  const double amp_scale = cfg.boundary_context ? 0.10 : 1.0;
  const double amp = amp_scale * Sz / 14.0;
  const double base_brightness = rng.uniform(-cfg.noise, cfg.noise);

  // Brightness cue levels (boundary-context mode): the out-of-word level
  // encodes the class, the in-word level mimics a random other class.
  const std::size_t fake_cls = K > 1 ? (cls + 1 + rng.uniform_int(K - 1)) % K : cls;
  const double cue_out = 0.06 + 0.36 * double(cls) / double(std::max<std::size_t>(1, K - 1));
  const double cue_in = 0.06 + 0.36 * double(fake_cls) / double(std::max<std::size_t>(1, K - 1));

  VideoSample<S> s;
  s.frames = Tensor<S>({T, Sz, Sz});
  for (std::size_t t = 0; t < T; ++t) {
    const bool in_word = t >= start && t < start + len;
    double b = b_mid;
    if (in_word) {
      b += amp * std::sin(2.0 * M_PI * freq * double(t - start) + phase);
      if (cfg.boundary_context) b += rng.uniform(-0.5, 0.5) * Sz / 18.0;
    }
    double brightness = base_brightness;
    if (cfg.boundary_context) brightness += in_word ? cue_in : cue_out;
    detail::render_frame(s.frames, t, cx, cy, ax, std::max(1.5, b), brightness);
  }
  // per-pixel noise, clamped into [0, 1]
  for (std::size_t i = 0; i < s.frames.numel(); ++i) {
    const double v = double(s.frames[i]) + rng.uniform(-cfg.noise, cfg.noise);
    s.frames[i] = static_cast<S>(std::clamp(v, 0.0, 1.0));
  }
  s.label = cls;
  s.boundary = BoundaryMask{T, start, start + len};
  s.id = id;
  return s;
}

/// Renders the whole dataset to out_dir (LKT1 clips + manifest.json) with a
/// 70/15/15 split per class. Deterministic given cfg.seed.
inline DatasetManifest generate_synthetic(const std::string& out_dir, const SyntheticConfig& cfg) {
  if (cfg.classes < 2 || cfg.per_class < 2 || cfg.frames < 8)
    throw std::invalid_argument("generate_synthetic: need K >= 2, n >= 2, T >= 8");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "clips", ec);
  if (ec) throw DataError("generate_synthetic: cannot create " + out_dir + ": " + ec.message());

  DatasetManifest m;
  for (std::size_t k = 0; k < cfg.classes; ++k) m.class_names.push_back("word" + std::to_string(k));

  const std::size_t n_val = std::max<std::size_t>(1, (cfg.per_class * 15) / 100);
  const std::size_t n_test = n_val;
  for (std::size_t k = 0; k < cfg.classes; ++k)
    for (std::size_t i = 0; i < cfg.per_class; ++i) {
      const std::string id = "c" + std::to_string(k) + "_s" + std::to_string(i);
      RngHandle rng = RngHandle::derive(cfg.seed, k * 1000003 + i);
      auto sample = synthesize_sample<float>(cfg, k, rng, id);
      const std::string rel = "clips/" + id + ".lkt1";
      save_lkt1_file((fs::path(out_dir) / rel).string(), sample.frames);
      const std::string split =
          i < cfg.per_class - n_val - n_test ? "train" : (i < cfg.per_class - n_test ? "val" : "test");
      m.samples.push_back({rel, k, sample.boundary.start, sample.boundary.end, split, id});
    }
  save_manifest((fs::path(out_dir) / "manifest.json").string(), m);
  return m;
}

}  // namespace lipkit
