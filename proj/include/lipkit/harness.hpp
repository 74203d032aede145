#pragma once

// Experiment harness: JSON configuration, training/validation loops with
// metrics CSV output, LKPT1 checkpointing with exact resume, evaluation,
// and the ablation suites.

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "lipkit/datapipe.hpp"
#include "lipkit/model.hpp"
#include "lipkit/recipe.hpp"

namespace lipkit {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Data-handling knobs for a run (geometry + augmentation seeds).
struct DataConfig {
  std::size_t crop = 40;       // square crop side fed to the model
  std::size_t frames = 0;      // 0: use clips as stored; else word-centered window length
  double hflip_prob = 0.5;
  std::uint64_t seed = 1;

  void validate() const {
    if (crop == 0) throw ConfigError("data.crop must be positive");
    if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0))
      throw ConfigError("data.hflip_prob must be in [0, 1]");
  }
};

struct ExperimentConfig {
  ModelConfig model;
  RecipeConfig recipe;
  DataConfig data;

  void validate() const {
    model.validate();
    recipe.validate();
    data.validate();
  }
};

// --- config (de)serialization --------------------------------------------

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::string& path,
                           std::initializer_list<const char*> known) {
  if (!obj.is_object()) throw ConfigError(path + " must be a JSON object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) ok = true;
    if (!ok) throw ConfigError("unknown config field: " + path + "." + key);
  }
}

template <typename T>
void read_field(const nlohmann::json& obj, const std::string& path, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for " + path + "." + key + ": " + e.what());
  }
}

inline void read_triple(const nlohmann::json& obj, const std::string& path, const char* key,
                        Triple& out) {
  if (!obj.contains(key)) return;
  const auto& a = obj.at(key);
  if (!a.is_array() || a.size() != 3)
    throw ConfigError(path + "." + key + " must be a [t, h, w] triple");
  out = Triple{a[0].get<std::size_t>(), a[1].get<std::size_t>(), a[2].get<std::size_t>()};
}

}  // namespace detail

inline GruInit gru_init_from_name(const std::string& s) {
  if (s == "paper_literal") return GruInit::kPaperLiteral;
  if (s == "scaled") return GruInit::kScaled;
  throw ConfigError("model.backend.init must be \"paper_literal\" or \"scaled\", got \"" + s + "\"");
}

inline std::string gru_init_name(GruInit i) {
  return i == GruInit::kPaperLiteral ? "paper_literal" : "scaled";
}

inline SchedulerKind scheduler_from_name(const std::string& s) {
  if (s == "plateau") return SchedulerKind::kPlateau;
  if (s == "cosine") return SchedulerKind::kCosine;
  if (s == "exponential") return SchedulerKind::kExponential;
  throw ConfigError("recipe.scheduler must be plateau|cosine|exponential, got \"" + s + "\"");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, "config", {"model", "recipe", "data"});
  ExperimentConfig cfg;

  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m, "model", {"frontend", "backend", "num_classes", "use_word_boundary"});
    if (m.contains("frontend")) {
      const auto& f = m.at("frontend");
      detail::reject_unknown(f, "model.frontend",
                             {"stem_kernel", "stem_stride", "stem_pad", "stem_pool", "widths",
                              "blocks", "se_enabled", "se_reduction"});
      detail::read_triple(f, "model.frontend", "stem_kernel", cfg.model.frontend.stem_kernel);
      detail::read_triple(f, "model.frontend", "stem_stride", cfg.model.frontend.stem_stride);
      detail::read_triple(f, "model.frontend", "stem_pad", cfg.model.frontend.stem_pad);
      detail::read_field(f, "model.frontend", "stem_pool", cfg.model.frontend.stem_pool);
      detail::read_field(f, "model.frontend", "widths", cfg.model.frontend.widths);
      detail::read_field(f, "model.frontend", "blocks", cfg.model.frontend.blocks);
      detail::read_field(f, "model.frontend", "se_enabled", cfg.model.frontend.se_enabled);
      detail::read_field(f, "model.frontend", "se_reduction", cfg.model.frontend.se_reduction);
    }
    if (m.contains("backend")) {
      const auto& b = m.at("backend");
      detail::reject_unknown(b, "model.backend",
                             {"layers", "hidden", "bidirectional", "inter_layer_dropout", "init"});
      detail::read_field(b, "model.backend", "layers", cfg.model.backend.layers);
      detail::read_field(b, "model.backend", "hidden", cfg.model.backend.hidden);
      detail::read_field(b, "model.backend", "bidirectional", cfg.model.backend.bidirectional);
      detail::read_field(b, "model.backend", "inter_layer_dropout",
                         cfg.model.backend.inter_layer_dropout);
      if (b.contains("init")) cfg.model.backend.init = gru_init_from_name(b.at("init").get<std::string>());
    }
    detail::read_field(m, "model", "num_classes", cfg.model.num_classes);
    detail::read_field(m, "model", "use_word_boundary", cfg.model.use_word_boundary);
  }

  if (j.contains("recipe")) {
    const auto& r = j.at("recipe");
    detail::reject_unknown(
        r, "recipe",
        {"base_lr", "weight_decay", "base_batch", "batch", "epsilon", "alpha", "total_epochs",
         "plateau_patience", "plateau_factor", "min_lr", "exp_decay", "scheduler", "mixup_enabled",
         "mixup_per_sample", "label_smooth_enabled", "adam_beta1", "adam_beta2", "adam_eps",
         "decoupled_weight_decay"});
    detail::read_field(r, "recipe", "base_lr", cfg.recipe.base_lr);
    detail::read_field(r, "recipe", "weight_decay", cfg.recipe.weight_decay);
    detail::read_field(r, "recipe", "base_batch", cfg.recipe.base_batch);
    detail::read_field(r, "recipe", "batch", cfg.recipe.batch);
    detail::read_field(r, "recipe", "epsilon", cfg.recipe.epsilon);
    detail::read_field(r, "recipe", "alpha", cfg.recipe.alpha);
    detail::read_field(r, "recipe", "total_epochs", cfg.recipe.total_epochs);
    detail::read_field(r, "recipe", "plateau_patience", cfg.recipe.plateau_patience);
    detail::read_field(r, "recipe", "plateau_factor", cfg.recipe.plateau_factor);
    detail::read_field(r, "recipe", "min_lr", cfg.recipe.min_lr);
    detail::read_field(r, "recipe", "exp_decay", cfg.recipe.exp_decay);
    if (r.contains("scheduler"))
      cfg.recipe.scheduler = scheduler_from_name(r.at("scheduler").get<std::string>());
    detail::read_field(r, "recipe", "mixup_enabled", cfg.recipe.mixup_enabled);
    detail::read_field(r, "recipe", "mixup_per_sample", cfg.recipe.mixup_per_sample);
    detail::read_field(r, "recipe", "label_smooth_enabled", cfg.recipe.label_smooth_enabled);
    detail::read_field(r, "recipe", "adam_beta1", cfg.recipe.adam_beta1);
    detail::read_field(r, "recipe", "adam_beta2", cfg.recipe.adam_beta2);
    detail::read_field(r, "recipe", "adam_eps", cfg.recipe.adam_eps);
    detail::read_field(r, "recipe", "decoupled_weight_decay", cfg.recipe.decoupled_weight_decay);
  }

  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, "data", {"crop", "frames", "hflip_prob", "seed"});
    detail::read_field(d, "data", "crop", cfg.data.crop);
    detail::read_field(d, "data", "frames", cfg.data.frames);
    detail::read_field(d, "data", "hflip_prob", cfg.data.hflip_prob);
    detail::read_field(d, "data", "seed", cfg.data.seed);
  }

  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  const auto& f = cfg.model.frontend;
  j["model"]["frontend"] = {{"stem_kernel", {f.stem_kernel.t, f.stem_kernel.h, f.stem_kernel.w}},
                            {"stem_stride", {f.stem_stride.t, f.stem_stride.h, f.stem_stride.w}},
                            {"stem_pad", {f.stem_pad.t, f.stem_pad.h, f.stem_pad.w}},
                            {"stem_pool", f.stem_pool},
                            {"widths", f.widths},
                            {"blocks", f.blocks},
                            {"se_enabled", f.se_enabled},
                            {"se_reduction", f.se_reduction}};
  const auto& b = cfg.model.backend;
  j["model"]["backend"] = {{"layers", b.layers},
                           {"hidden", b.hidden},
                           {"bidirectional", b.bidirectional},
                           {"inter_layer_dropout", b.inter_layer_dropout},
                           {"init", gru_init_name(b.init)}};
  j["model"]["num_classes"] = cfg.model.num_classes;
  j["model"]["use_word_boundary"] = cfg.model.use_word_boundary;
  const auto& r = cfg.recipe;
  j["recipe"] = {{"base_lr", r.base_lr},
                 {"weight_decay", r.weight_decay},
                 {"base_batch", r.base_batch},
                 {"batch", r.batch},
                 {"epsilon", r.epsilon},
                 {"alpha", r.alpha},
                 {"total_epochs", r.total_epochs},
                 {"plateau_patience", r.plateau_patience},
                 {"plateau_factor", r.plateau_factor},
                 {"min_lr", r.min_lr},
                 {"exp_decay", r.exp_decay},
                 {"scheduler", scheduler_kind_name(r.scheduler)},
                 {"mixup_enabled", r.mixup_enabled},
                 {"mixup_per_sample", r.mixup_per_sample},
                 {"label_smooth_enabled", r.label_smooth_enabled},
                 {"adam_beta1", r.adam_beta1},
                 {"adam_beta2", r.adam_beta2},
                 {"adam_eps", r.adam_eps},
                 {"decoupled_weight_decay", r.decoupled_weight_decay}};
  j["data"] = {{"crop", cfg.data.crop},
               {"frames", cfg.data.frames},
               {"hflip_prob", cfg.data.hflip_prob},
               {"seed", cfg.data.seed}};
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// --- checkpoints (LKPT1) --------------------------------------------------

/// Everything needed to resume a run exactly.
struct TrainState {
  ExperimentConfig config;
  std::size_t epoch = 0;  // completed epochs
  SchedulerState scheduler;
  double best_val_acc = 0.0;
  std::size_t adam_step = 0;
};

/// LKPT1 layout: 5-byte magic, u64 LE manifest length, JSON manifest,
/// then one LKT1 blob per manifest-listed tensor, in order.
template <typename S>
void save_checkpoint(const std::string& path, Model<S>& model, const Adam<S>& adam_const,
                     const TrainState& st) {
  auto& adam = const_cast<Adam<S>&>(adam_const);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);

  auto params = model.params();
  nlohmann::json manifest;
  manifest["format"] = 1;
  manifest["config"] = config_to_json(st.config);
  manifest["epoch"] = st.epoch;
  manifest["adam_step"] = st.adam_step;
  manifest["best_val_acc"] = st.best_val_acc;
  // +infinity (the pre-validation sentinel) is not representable in JSON;
  // store it as null
  manifest["scheduler"] = {{"kind", scheduler_kind_name(st.scheduler.kind)},
                           {"epoch", st.scheduler.epoch},
                           {"best_val_error", std::isfinite(st.scheduler.best_val_error)
                                                  ? nlohmann::json(st.scheduler.best_val_error)
                                                  : nlohmann::json(nullptr)},
                           {"since_best", st.scheduler.since_best},
                           {"lr", st.scheduler.lr}};
  nlohmann::json names = nlohmann::json::array();
  for (Param<S>* p : params) names.push_back(p->name);
  manifest["tensors"] = names;
  manifest["bn_state_count"] = model.bn_states().size();

  const std::string mtext = manifest.dump();
  os.write("LKPT1", 5);
  detail::write_le<std::uint64_t>(os, mtext.size());
  os.write(mtext.data(), std::streamsize(mtext.size()));
  for (Param<S>* p : params) save_lkt1(os, p->value);
  for (BatchNormState<S>* bn : model.bn_states()) {
    save_lkt1(os, bn->running_mean);
    save_lkt1(os, bn->running_var);
  }
  for (auto& slot : adam.slots()) {
    save_lkt1(os, slot.m);
    save_lkt1(os, slot.v);
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

template <typename S>
struct LoadedCheckpoint {
  Model<S> model;
  Adam<S> adam;
  TrainState state;
};

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::string(magic, 5) != "LKPT1")
    throw std::runtime_error("not an LKPT1 checkpoint: " + path);
  const std::uint64_t mlen = detail::read_le<std::uint64_t>(is);
  std::string mtext(mlen, '\0');
  is.read(mtext.data(), std::streamsize(mlen));
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint manifest parse error: ") + e.what());
  }

  LoadedCheckpoint<S> out;
  out.state.config = config_from_json(manifest.at("config"));
  out.state.epoch = manifest.at("epoch").get<std::size_t>();
  out.state.adam_step = manifest.at("adam_step").get<std::size_t>();
  out.state.best_val_acc = manifest.at("best_val_acc").get<double>();
  const auto& sj = manifest.at("scheduler");
  out.state.scheduler.kind = scheduler_from_name(sj.at("kind").get<std::string>());
  out.state.scheduler.epoch = sj.at("epoch").get<std::size_t>();
  out.state.scheduler.best_val_error = sj.at("best_val_error").is_null()
                                           ? std::numeric_limits<double>::infinity()
                                           : sj.at("best_val_error").get<double>();
  out.state.scheduler.since_best = sj.at("since_best").get<std::size_t>();
  out.state.scheduler.lr = sj.at("lr").get<double>();

  // Architecture comes from the config echo; the stored tensors must then
  // agree with it name-by-name and shape-by-shape.
  RngHandle init_rng(0);  // values are overwritten below
  out.model = Model<S>(out.state.config.model, init_rng);
  auto params = out.model.params();
  const auto names = manifest.at("tensors").get<std::vector<std::string>>();
  if (names.size() != params.size())
    throw std::runtime_error("checkpoint lists " + std::to_string(names.size()) +
                             " tensors, model has " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (names[i] != params[i]->name)
      throw std::runtime_error("checkpoint tensor order mismatch at " + names[i] + " vs " +
                               params[i]->name);
    Tensor<S> v = load_lkt1<S>(is);
    if (v.shape() != params[i]->value.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + names[i] + ": stored " +
                               shape_str(v.shape()) + ", model " +
                               shape_str(params[i]->value.shape()));
    params[i]->value = std::move(v);
  }
  auto bns = out.model.bn_states();
  if (manifest.at("bn_state_count").get<std::size_t>() != bns.size())
    throw std::runtime_error("checkpoint batchnorm state count mismatch");
  for (BatchNormState<S>* bn : bns) {
    Tensor<S> m = load_lkt1<S>(is), v = load_lkt1<S>(is);
    if (m.shape() != bn->running_mean.shape() || v.shape() != bn->running_var.shape())
      throw std::runtime_error("checkpoint batchnorm state shape mismatch");
    bn->running_mean = std::move(m);
    bn->running_var = std::move(v);
  }
  out.adam = Adam<S>(params, out.state.config.recipe.adam_beta1,
                     out.state.config.recipe.adam_beta2, out.state.config.recipe.adam_eps,
                     out.state.config.recipe.decoupled_weight_decay);
  for (auto& slot : out.adam.slots()) {
    slot.m = load_lkt1<S>(is);
    slot.v = load_lkt1<S>(is);
  }
  out.adam.set_step_count(out.state.adam_step);
  if (!is) throw std::runtime_error("checkpoint truncated: " + path);
  return out;
}

// --- training loop --------------------------------------------------------

/// In-memory dataset: clips loaded once, augmented per epoch.
struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<VideoSample<float>> train, val, test;

  const std::vector<VideoSample<float>>& split(const std::string& tag) const {
    if (tag == "train") return train;
    if (tag == "val") return val;
    if (tag == "test") return test;
    throw DataError("unknown split: " + tag);
  }
};

inline LoadedDataset load_dataset(const std::string& data_dir) {
  LoadedDataset ds;
  ds.manifest = load_manifest((std::filesystem::path(data_dir) / "manifest.json").string());
  for (const auto& e : ds.manifest.samples) {
    auto s = load_sample<float>(data_dir, e);
    if (e.split == "train")
      ds.train.push_back(std::move(s));
    else if (e.split == "val")
      ds.val.push_back(std::move(s));
    else
      ds.test.push_back(std::move(s));
  }
  return ds;
}

namespace detail {

/// Stacks already-augmented samples into model inputs.
struct AssembledBatch {
  Tensor<float> x;                         // [B x 1 x T x h x w]
  std::optional<Tensor<float>> boundary;   // [B x T]
  Tensor<float> targets;                   // [B x N]
  std::vector<std::size_t> labels;
  std::vector<std::string> ids;
};

inline AssembledBatch assemble_batch(const std::vector<VideoSample<float>>& samples,
                                     std::size_t num_classes, bool with_boundary,
                                     bool smooth, double epsilon) {
  if (samples.empty()) throw DataError("assemble_batch: empty batch");
  const std::size_t B = samples.size();
  const std::size_t T = samples[0].frames.dim(0), H = samples[0].frames.dim(1),
                    W = samples[0].frames.dim(2);
  AssembledBatch out;
  out.x = Tensor<float>({B, 1, T, H, W});
  out.targets = Tensor<float>({B, num_classes}, 0.0f);
  if (with_boundary) out.boundary = Tensor<float>({B, T});
  for (std::size_t b = 0; b < B; ++b) {
    const auto& s = samples[b];
    if (s.frames.shape() != samples[0].frames.shape())
      throw DataError("assemble_batch: inconsistent clip shapes (" + s.id + ")");
    std::copy_n(s.frames.data(), s.frames.numel(), out.x.data() + b * s.frames.numel());
    Tensor<float> q = smooth ? label_smooth<float>(s.label, num_classes, epsilon)
                             : label_smooth<float>(s.label, num_classes, 0.0);
    std::copy_n(q.data(), num_classes, out.targets.data() + b * num_classes);
    if (with_boundary) {
      auto ind = s.boundary.indicator<float>();
      std::copy_n(ind.data(), T, out.boundary->data() + b * T);
    }
    out.labels.push_back(s.label);
    out.ids.push_back(s.id);
  }
  return out;
}

inline std::size_t argmax_row(const Tensor<float>& m, std::size_t row) {
  const std::size_t N = m.dim(1);
  const float* p = m.data() + row * N;
  return std::size_t(std::max_element(p, p + N) - p);
}

}  // namespace detail

/// Training-time view of one sample (word window, random crop, flip).
inline VideoSample<float> augment_train(const VideoSample<float>& s, const DataConfig& data,
                                        RngHandle& rng) {
  VideoSample<float> v = data.frames > 0 ? center_window(s, data.frames) : s;
  v.frames = crop(v.frames, data.crop, data.crop, CropMode::kRandom, &rng);
  v.frames = hflip(v.frames, data.hflip_prob, rng);
  return v;
}

/// Eval-time view: word window + center crop, no stochastic ops.
inline VideoSample<float> augment_eval(const VideoSample<float>& s, const DataConfig& data) {
  VideoSample<float> v = data.frames > 0 ? center_window(s, data.frames) : s;
  v.frames = crop(v.frames, data.crop, data.crop, CropMode::kCenter);
  return v;
}

struct EvalReport {
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::pair<std::string, std::size_t>> predictions;  // (id, predicted label)
};

/// Deterministic full pass over a split in eval mode.
inline EvalReport evaluate_split(Model<float>& model, const std::vector<VideoSample<float>>& samples,
                          const ExperimentConfig& cfg) {
  if (samples.empty()) throw DataError("evaluate_split: empty split");
  const std::size_t N = cfg.model.num_classes;
  EvalReport rep;
  std::vector<std::size_t> correct(N, 0), total(N, 0);
  RngHandle unused(0);
  const std::size_t B = cfg.recipe.batch;
  for (std::size_t at = 0; at < samples.size(); at += B) {
    std::vector<VideoSample<float>> chunk;
    for (std::size_t b = at; b < std::min(at + B, samples.size()); ++b)
      chunk.push_back(augment_eval(samples[b], cfg.data));
    auto batch = detail::assemble_batch(chunk, N, cfg.model.use_word_boundary, false, 0.0);
    Tensor<float> logits = model.forward(batch.x, batch.boundary, unused, Mode::kEval);
    rep.loss += double(cross_entropy_batch<float>(logits, batch.targets, nullptr)) *
                double(chunk.size());
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const std::size_t pred = detail::argmax_row(logits, b);
      rep.predictions.emplace_back(batch.ids[b], pred);
      ++total[batch.labels[b]];
      if (pred == batch.labels[b]) ++correct[batch.labels[b]];
    }
  }
  std::size_t hits = 0, n = 0;
  for (std::size_t c = 0; c < N; ++c) {
    hits += correct[c];
    n += total[c];
    rep.per_class_accuracy.push_back(total[c] ? double(correct[c]) / double(total[c]) : 0.0);
  }
  rep.accuracy = double(hits) / double(n);
  rep.loss /= double(n);
  return rep;
}

struct TrainResult {
  double best_val_acc = 0.0;
  double last_val_acc = 0.0;
  std::size_t epochs_run = 0;
  std::string metrics_path, best_path, last_path;
};

/// Runs (or resumes) one training job. Byte-deterministic given config+data.
/// stop_after caps the number of completed epochs (for interrupt/resume);
/// the schedule itself is always cfg.recipe.total_epochs long.
inline TrainResult run_train(const ExperimentConfig& cfg, const LoadedDataset& ds,
                             const std::string& out_dir, const std::string& resume_ckpt = "",
                             std::size_t stop_after = std::numeric_limits<std::size_t>::max()) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create output dir " + out_dir + ": " + ec.message());
  if (ds.train.empty() || ds.val.empty())
    throw DataError("run_train: dataset needs non-empty train and val splits");

  const std::size_t N = cfg.model.num_classes;
  const std::uint64_t seed = cfg.data.seed;

  Model<float> model;
  Adam<float> adam;
  TrainState st;
  if (!resume_ckpt.empty()) {
    auto loaded = load_checkpoint<float>(resume_ckpt);
    model = std::move(loaded.model);
    adam = std::move(loaded.adam);
    st = loaded.state;
  } else {
    RngHandle init_rng = RngHandle::derive(seed, 1);
    model = Model<float>(cfg.model, init_rng);
    adam = Adam<float>(model.params(), cfg.recipe.adam_beta1, cfg.recipe.adam_beta2,
                       cfg.recipe.adam_eps, cfg.recipe.decoupled_weight_decay);
    st.config = cfg;
    st.scheduler = SchedulerState::init(cfg.recipe);
  }

  TrainResult res;
  res.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  res.best_path = (fs::path(out_dir) / "best.lkpt1").string();
  res.last_path = (fs::path(out_dir) / "last.lkpt1").string();

  std::ofstream metrics;
  if (st.epoch == 0) {
    metrics.open(res.metrics_path);
    metrics << "epoch,phase,lr,loss,acc\n";
  } else {
    metrics.open(res.metrics_path, std::ios::app);
  }
  if (!metrics) throw DataError("cannot write metrics: " + res.metrics_path);
  // round-trippable doubles, so logged values parse back bit-exactly
  metrics << std::setprecision(17);

  auto params = model.params();
  const std::size_t end_epoch = std::min(cfg.recipe.total_epochs, stop_after);
  for (std::size_t epoch = st.epoch; epoch < end_epoch; ++epoch) {
    const double lr = st.scheduler.lr;
    // All stochastic choices of the epoch come from streams derived from
    // (seed, epoch), so a resumed run replays them exactly.
    RngHandle aug_rng = RngHandle::derive(seed, 1000 + epoch);
    RngHandle mix_rng = RngHandle::derive(seed, 2000 + epoch);
    RngHandle drop_rng = RngHandle::derive(seed, 3000 + epoch);

    auto order = epoch_shuffle(ds.train.size(), aug_rng);
    double train_loss = 0.0;
    std::size_t train_hits = 0, seen = 0, step = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.recipe.batch, ++step) {
      std::vector<VideoSample<float>> chunk;
      for (std::size_t b = at; b < std::min(at + cfg.recipe.batch, order.size()); ++b)
        chunk.push_back(augment_train(ds.train[order[b]], cfg.data, aug_rng));
      auto batch = detail::assemble_batch(chunk, N, cfg.model.use_word_boundary,
                                          cfg.recipe.label_smooth_enabled, cfg.recipe.epsilon);
      if (cfg.recipe.mixup_enabled) {
        MixupBatch<float> mb{std::move(batch.x), std::move(batch.targets), std::move(batch.boundary)};
        mixup_batch(mb, cfg.recipe.alpha, mix_rng, cfg.recipe.mixup_per_sample);
        batch.x = std::move(mb.x);
        batch.targets = std::move(mb.targets);
        batch.boundary = std::move(mb.boundary);
      }
      Tensor<float> logits = model.forward(batch.x, batch.boundary, drop_rng, Mode::kTrain);
      Tensor<float> dlogits;
      const float loss = cross_entropy_batch(logits, batch.targets, &dlogits);
      if (!std::isfinite(loss))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           " step " + std::to_string(step));
      model.backward(dlogits);
      adam.step(params, lr, cfg.recipe.weight_decay);

      train_loss += double(loss) * double(chunk.size());
      for (std::size_t b = 0; b < chunk.size(); ++b)
        if (detail::argmax_row(logits, b) == detail::argmax_row(batch.targets, b)) ++train_hits;
      seen += chunk.size();
    }
    train_loss /= double(seen);

    EvalReport val = evaluate_split(model, ds.val, cfg);

    metrics << epoch << ",train," << lr << "," << train_loss << ","
            << double(train_hits) / double(seen) << "\n";
    metrics << epoch << ",val," << lr << "," << val.loss << "," << val.accuracy << "\n";
    metrics.flush();

    scheduler_epoch_end(st.scheduler, 1.0 - val.accuracy, cfg.recipe);
    st.epoch = epoch + 1;
    st.adam_step = adam.step_count();
    res.last_val_acc = val.accuracy;
    if (val.accuracy > st.best_val_acc) {
      st.best_val_acc = val.accuracy;
      save_checkpoint(res.best_path, model, adam, st);
    }
    save_checkpoint(res.last_path, model, adam, st);
    res.epochs_run = st.epoch;
  }
  res.best_val_acc = st.best_val_acc;
  return res;
}

// --- ablation suites ------------------------------------------------------

struct ExperimentPreset {
  std::string name;
  ExperimentConfig config;
};

/// Desk-scale baseline used by the ablation suites: small widths and a short
/// schedule so a full suite stays within a CPU time budget.
inline ExperimentConfig desk_config(std::size_t num_classes, std::size_t epochs = 30) {
  ExperimentConfig cfg;
  cfg.model.frontend.stem_kernel = {3, 5, 5};
  cfg.model.frontend.stem_stride = {1, 2, 2};
  cfg.model.frontend.stem_pad = {1, 2, 2};
  cfg.model.frontend.stem_pool = true;
  cfg.model.frontend.widths = {4, 8, 16, 32};
  cfg.model.frontend.blocks = {1, 1, 1, 1};
  cfg.model.frontend.se_enabled = false;
  cfg.model.frontend.se_reduction = 4;
  cfg.model.backend.layers = 3;
  cfg.model.backend.hidden = 32;
  cfg.model.backend.bidirectional = true;
  cfg.model.backend.inter_layer_dropout = 0.2;
  cfg.model.backend.init = GruInit::kScaled;
  cfg.model.num_classes = num_classes;
  cfg.model.use_word_boundary = false;
  cfg.recipe.base_lr = 1e-3;
  cfg.recipe.base_batch = 8;
  cfg.recipe.batch = 8;
  cfg.recipe.alpha = 0.1;    // gentler mixing suits the small clip counts
  cfg.recipe.epsilon = 0.05;  // likewise for label smoothing
  cfg.recipe.total_epochs = epochs;
  cfg.recipe.scheduler = SchedulerKind::kCosine;
  cfg.data.crop = 40;
  cfg.data.frames = 0;
  return cfg;
}

/// The refined pipeline: SE + mixup + label smoothing + cosine + boundary.
inline ExperimentConfig refined_desk_config(std::size_t num_classes, std::size_t epochs = 18) {
  ExperimentConfig cfg = desk_config(num_classes, epochs);
  cfg.model.frontend.se_enabled = true;
  cfg.model.use_word_boundary = true;
  cfg.recipe.mixup_enabled = true;
  cfg.recipe.label_smooth_enabled = true;
  cfg.recipe.scheduler = SchedulerKind::kCosine;
  return cfg;
}

inline std::vector<ExperimentPreset> ablation_presets(const std::string& suite,
                                                      std::size_t num_classes) {
  auto base = [&] { return desk_config(num_classes); };
  std::vector<ExperimentPreset> out;
  if (suite == "frontend") {
    out.push_back({"baseline", base()});
    auto se = base();
    se.model.frontend.se_enabled = true;
    out.push_back({"se", se});
  } else if (suite == "backend") {
    auto drop = base();
    drop.model.backend.inter_layer_dropout = 0.2;
    out.push_back({"gru_dropout", drop});
    auto nodrop = base();
    nodrop.model.backend.inter_layer_dropout = 0.0;
    out.push_back({"gru_no_dropout", nodrop});
  } else if (suite == "data") {
    out.push_back({"baseline", base()});
    auto wb = base();
    wb.model.use_word_boundary = true;
    out.push_back({"word_boundary", wb});
    out.push_back({"alignment", base()});  // runs on realigned clips, see run_ablation
  } else if (suite == "tweaks") {
    out.push_back({"baseline", base()});
    auto mx = base();
    mx.recipe.mixup_enabled = true;
    out.push_back({"mixup", mx});
    auto ls = base();
    ls.recipe.label_smooth_enabled = true;
    out.push_back({"label_smooth", ls});
  } else if (suite == "schedulers") {
    auto pl = base();
    pl.recipe.scheduler = SchedulerKind::kPlateau;
    out.push_back({"plateau", pl});
    auto co = base();
    co.recipe.scheduler = SchedulerKind::kCosine;
    out.push_back({"cosine", co});
    auto ex = base();
    ex.recipe.scheduler = SchedulerKind::kExponential;
    out.push_back({"exponential", ex});
  } else if (suite == "final") {
    out.push_back({"basic", base()});
    out.push_back({"refined", refined_desk_config(num_classes)});
  } else {
    throw ConfigError("unknown ablation suite: " + suite +
                      " (expected frontend|backend|data|tweaks|schedulers|final)");
  }
  return out;
}

struct AblationCell {
  std::string suite, preset;
  std::uint64_t seed = 0;
  double val_acc = 0.0;
  bool failed = false;
  std::string error;
};

struct AblationResult {
  std::vector<AblationCell> cells;
  std::string csv_path, table_path;
};

namespace detail {

/// Applies a random in-plane jitter to every frame and then realigns the
/// clip from the jitter's landmark trace — exercises the alignment path on
/// data whose misalignment is known.
inline LoadedDataset jitter_and_align(const LoadedDataset& ds, bool align, std::uint64_t seed);

}  // namespace detail

inline void write_ablation_outputs(AblationResult& res, const std::string& out_dir) {
  namespace fs = std::filesystem;
  res.csv_path = (fs::path(out_dir) / "ablation.csv").string();
  res.table_path = (fs::path(out_dir) / "ablation.txt").string();
  std::ofstream csv(res.csv_path);
  if (!csv) throw DataError("cannot write " + res.csv_path);
  csv << "suite,preset,seed,val_acc\n" << std::setprecision(10);
  for (const auto& c : res.cells)
    if (!c.failed) csv << c.suite << "," << c.preset << "," << c.seed << "," << c.val_acc << "\n";

  // mean +/- spread (half the max-min range) per preset
  std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
  for (const auto& c : res.cells)
    if (!c.failed) groups[{c.suite, c.preset}].push_back(c.val_acc);
  std::ofstream tab(res.table_path);
  tab << std::left << std::setw(12) << "suite" << std::setw(18) << "preset"
      << "val_acc (mean +/- spread over seeds)\n";
  tab << std::string(66, '-') << "\n" << std::fixed << std::setprecision(4);
  for (const auto& [key, accs] : groups) {
    double mean = 0.0, lo = accs[0], hi = accs[0];
    for (double a : accs) {
      mean += a;
      lo = std::min(lo, a);
      hi = std::max(hi, a);
    }
    mean /= double(accs.size());
    tab << std::left << std::setw(12) << key.first << std::setw(18) << key.second << mean
        << " +/- " << (hi - lo) / 2.0 << "  (n=" << accs.size() << ")\n";
  }
  for (const auto& c : res.cells)
    if (c.failed)
      tab << c.suite << "/" << c.preset << " seed " << c.seed << " FAILED: " << c.error << "\n";
}

/// Runs every (preset, seed) cell of a suite; failures are recorded and the
/// suite continues.
inline AblationResult run_ablation(const std::string& suite, const LoadedDataset& ds,
                                   const std::string& out_dir,
                                   const std::vector<std::uint64_t>& seeds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create output dir " + out_dir + ": " + ec.message());
  const std::size_t K = ds.manifest.class_names.size();

  AblationResult res;
  for (const auto& preset : ablation_presets(suite, K)) {
    // The alignment preset trains on clips corrupted by a known in-plane
    // jitter and then restored by align_clip; the other presets see the
    // dataset as stored.
    const bool realign = suite == "data" && preset.name == "alignment";
    LoadedDataset local;
    if (realign) local = detail::jitter_and_align(ds, true, 77);
    const LoadedDataset& use = realign ? local : ds;
    for (std::uint64_t seed : seeds) {
      AblationCell cell{suite, preset.name, seed};
      try {
        ExperimentConfig cfg = preset.config;
        cfg.data.seed = seed;
        const std::string run_dir =
            (fs::path(out_dir) / (suite + "_" + preset.name + "_s" + std::to_string(seed)))
                .string();
        TrainResult tr = run_train(cfg, use, run_dir);
        cell.val_acc = tr.best_val_acc;
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
      }
      res.cells.push_back(cell);
    }
  }
  write_ablation_outputs(res, out_dir);
  return res;
}

}  // namespace lipkit

#include "lipkit/align.hpp"

namespace lipkit {
namespace detail {

inline LoadedDataset jitter_and_align(const LoadedDataset& ds, bool align, std::uint64_t seed) {
  LoadedDataset out;
  out.manifest = ds.manifest;
  AlignTemplate tpl;
  // synthetic 5-point template spanning the frame
  const auto jitter_split = [&](const std::vector<VideoSample<float>>& in,
                                std::vector<VideoSample<float>>& dst, std::uint64_t tag) {
    for (std::size_t i = 0; i < in.size(); ++i) {
      const auto& s = in[i];
      const std::size_t T = s.frames.dim(0), H = s.frames.dim(1), W = s.frames.dim(2);
      if (tpl.points.empty()) {
        const double q = double(W) / 4.0;
        tpl.points = {{q, q}, {3 * q, q}, {2 * q, 2 * q}, {q, 3 * q}, {3 * q, 3 * q}};
        tpl.lip_cx = double(W) / 2.0;
        tpl.lip_cy = double(H) / 2.0;
        tpl.crop_side = std::min(H, W);
      }
      RngHandle rng = RngHandle::derive(seed, tag * 100003 + i);
      VideoSample<float> v = s;
      std::vector<LandmarkSet> lms(T);
      for (std::size_t t = 0; t < T; ++t) {
        SimilarityTransform xf;
        xf.s = 1.0 + 0.06 * rng.uniform(-1, 1);
        xf.theta = 0.18 * rng.uniform(-1, 1);
        xf.tx = 2.5 * rng.uniform(-1, 1);
        xf.ty = 2.5 * rng.uniform(-1, 1);
        Tensor<float> frame({H, W});
        std::copy_n(s.frames.data() + t * H * W, H * W, frame.data());
        Tensor<float> warped = warp_image(frame, xf, H, W);
        std::copy_n(warped.data(), H * W, v.frames.data() + t * H * W);
        LandmarkSet pts;
        for (const auto& p : tpl.points) pts.push_back(xf.apply(p));
        lms[t] = std::move(pts);
      }
      if (align) v.frames = align_clip(v.frames, lms, tpl);
      dst.push_back(std::move(v));
    }
  };
  jitter_split(ds.train, out.train, 1);
  jitter_split(ds.val, out.val, 2);
  jitter_split(ds.test, out.test, 3);
  return out;
}

}  // namespace detail
}  // namespace lipkit
