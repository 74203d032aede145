#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "lipkit/harness.hpp"

using namespace lipkit;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("lipkit_harness_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string read_text(const std::string& path) {
  std::ifstream is(path);
  REQUIRE(bool(is));
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Tiny but complete config used across the training tests.
ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.model.frontend.stem_kernel = {3, 3, 3};
  cfg.model.frontend.stem_stride = {1, 2, 2};
  cfg.model.frontend.stem_pad = {1, 1, 1};
  cfg.model.frontend.stem_pool = false;
  cfg.model.frontend.widths = {2, 4};
  cfg.model.frontend.blocks = {1, 1};
  cfg.model.frontend.se_enabled = false;
  cfg.model.backend.layers = 1;
  cfg.model.backend.hidden = 4;
  cfg.model.backend.bidirectional = true;
  cfg.model.backend.inter_layer_dropout = 0.0;
  cfg.model.backend.init = GruInit::kScaled;
  cfg.model.num_classes = 3;
  cfg.recipe.batch = 4;
  cfg.recipe.base_batch = 4;
  cfg.recipe.base_lr = 1e-3;
  cfg.recipe.total_epochs = 3;
  cfg.recipe.scheduler = SchedulerKind::kCosine;
  cfg.data.crop = 16;
  cfg.data.frames = 0;
  cfg.data.seed = 7;
  return cfg;
}

const LoadedDataset& tiny_dataset() {
  static LoadedDataset ds = [] {
    SyntheticConfig sc;
    sc.classes = 3;
    sc.per_class = 10;
    sc.frames = 10;
    sc.image_size = 20;
    sc.seed = 99;
    std::string dir = temp_dir("dataset");
    generate_synthetic(dir, sc);
    return load_dataset(dir);
  }();
  return ds;
}

std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

struct MetricsRow {
  std::size_t epoch;
  std::string phase;
  double lr, loss, acc;
};

std::vector<MetricsRow> parse_metrics(const std::string& path) {
  auto lines = csv_lines(read_text(path));
  REQUIRE(lines.at(0) == "epoch,phase,lr,loss,acc");
  std::vector<MetricsRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::istringstream is(lines[i]);
    MetricsRow r;
    char c;
    std::getline(is, r.phase, ',');
    r.epoch = std::stoul(r.phase);
    std::getline(is, r.phase, ',');
    is >> r.lr >> c >> r.loss >> c >> r.acc;
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

TEST_CASE("config json: defaults, round trip, unknown fields with path") {
  auto cfg = config_from_json(nlohmann::json::object());
  CHECK(cfg.recipe.base_lr == 3e-4);
  CHECK(cfg.model.frontend.widths == std::vector<std::size_t>{64, 128, 256, 512});

  ExperimentConfig full = tiny_config();
  full.recipe.mixup_enabled = true;
  full.model.use_word_boundary = true;
  auto back = config_from_json(config_to_json(full));
  CHECK(config_to_json(back) == config_to_json(full));

  nlohmann::json bad = config_to_json(full);
  bad["model"]["frontend"]["kernel"] = 3;
  try {
    config_from_json(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("model.frontend.kernel") != std::string::npos);
  }

  nlohmann::json bad2 = nlohmann::json::object();
  bad2["recipe"]["scheduler"] = "linear";
  CHECK_THROWS_AS(config_from_json(bad2), ConfigError);
  nlohmann::json bad3 = nlohmann::json::object();
  bad3["optimizer"] = nlohmann::json::object();
  CHECK_THROWS_AS(config_from_json(bad3), ConfigError);
  nlohmann::json bad4 = nlohmann::json::object();
  bad4["recipe"]["base_lr"] = -1.0;
  CHECK_THROWS_AS(config_from_json(bad4), ConfigError);
}

TEST_CASE("checkpoint round trip yields bit-identical logits and state") {
  ExperimentConfig cfg = tiny_config();
  RngHandle rng(3);
  Model<float> model(cfg.model, rng);
  Adam<float> adam(model.params());

  // take a few optimizer steps so the slots are non-trivial
  const auto& ds = tiny_dataset();
  std::vector<VideoSample<float>> chunk;
  for (std::size_t i = 0; i < 4; ++i) chunk.push_back(augment_eval(ds.train[i], cfg.data));
  auto batch = detail::assemble_batch(chunk, 3, false, false, 0.0);
  RngHandle drop(1);
  for (int it = 0; it < 2; ++it) {
    auto logits = model.forward(batch.x, batch.boundary, drop, Mode::kTrain);
    Tensor<float> dlogits;
    cross_entropy_batch(logits, batch.targets, &dlogits);
    model.backward(dlogits);
    adam.step(model.params(), 1e-3, 1e-4);
  }

  TrainState st;
  st.config = cfg;
  st.epoch = 2;
  st.adam_step = adam.step_count();
  st.best_val_acc = 0.5;
  st.scheduler = SchedulerState::init(cfg.recipe);
  st.scheduler.epoch = 2;
  st.scheduler.lr = 1.25e-4;

  std::string dir = temp_dir("ckpt");
  save_checkpoint(dir + "/m.lkpt1", model, adam, st);
  auto loaded = load_checkpoint<float>(dir + "/m.lkpt1");

  RngHandle unused(0);
  auto a = model.forward(batch.x, batch.boundary, unused, Mode::kEval);
  auto b = loaded.model.forward(batch.x, batch.boundary, unused, Mode::kEval);
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);  // bitwise

  CHECK(loaded.state.epoch == 2);
  CHECK(loaded.state.adam_step == adam.step_count());
  CHECK(loaded.state.best_val_acc == 0.5);
  CHECK(loaded.state.scheduler.lr == 1.25e-4);
  CHECK(config_to_json(loaded.state.config) == config_to_json(cfg));

  // adam slots restored: one more identical step stays in lockstep
  auto step_once = [&](Model<float>& m, Adam<float>& opt) {
    RngHandle d(5);
    auto lg = m.forward(batch.x, batch.boundary, d, Mode::kTrain);
    Tensor<float> dl;
    cross_entropy_batch(lg, batch.targets, &dl);
    m.backward(dl);
    opt.step(m.params(), 1e-3, 1e-4);
  };
  step_once(model, adam);
  step_once(loaded.model, loaded.adam);
  auto pa = model.params(), pb = loaded.model.params();
  for (std::size_t k = 0; k < pa.size(); ++k)
    for (std::size_t i = 0; i < pa[k]->value.numel(); ++i)
      CHECK(pa[k]->value[i] == pb[k]->value[i]);

  CHECK_THROWS(load_checkpoint<float>(dir + "/missing.lkpt1"));
  std::ofstream(dir + "/junk.lkpt1") << "not a checkpoint";
  CHECK_THROWS(load_checkpoint<float>(dir + "/junk.lkpt1"));
}

TEST_CASE("run_train: determinism, lr schedule, metrics schema") {
  ExperimentConfig cfg = tiny_config();
  const auto& ds = tiny_dataset();
  std::string d1 = temp_dir("train1");
  std::string d2 = temp_dir("train2");
  auto r1 = run_train(cfg, ds, d1);
  auto r2 = run_train(cfg, ds, d2);

  // byte-identical metrics across identical runs
  CHECK(read_text(r1.metrics_path) == read_text(r2.metrics_path));

  auto rows = parse_metrics(r1.metrics_path);
  REQUIRE(rows.size() == 2 * cfg.recipe.total_epochs);
  const double eta = scale_lr(cfg.recipe.base_lr, cfg.recipe.batch, cfg.recipe.base_batch);
  for (std::size_t e = 0; e < cfg.recipe.total_epochs; ++e) {
    CHECK(rows[2 * e].phase == "train");
    CHECK(rows[2 * e + 1].phase == "val");
    CHECK(rows[2 * e].epoch == e);
    // lr column follows the cosine closed form at epoch start
    CHECK(rows[2 * e].lr == doctest::Approx(cosine_lr(e, cfg.recipe.total_epochs, eta)).epsilon(1e-12));
    CHECK(rows[2 * e].lr == rows[2 * e + 1].lr);
    CHECK(std::isfinite(rows[2 * e].loss));
    CHECK(rows[2 * e].acc >= 0.0);
    CHECK(rows[2 * e].acc <= 1.0);
  }
  CHECK(fs::exists(r1.best_path));
  CHECK(fs::exists(r1.last_path));
}

TEST_CASE("run_train: resume reproduces the uninterrupted run") {
  ExperimentConfig cfg = tiny_config();
  cfg.recipe.total_epochs = 4;
  const auto& ds = tiny_dataset();

  std::string full_dir = temp_dir("resume_full");
  auto full = run_train(cfg, ds, full_dir);

  std::string part_dir = temp_dir("resume_part");
  run_train(cfg, ds, part_dir, "", /*stop_after=*/2);
  std::string cont_dir = temp_dir("resume_cont");
  auto cont = run_train(cfg, ds, cont_dir, part_dir + "/last.lkpt1");

  // remaining-epoch rows identical to the uninterrupted run
  auto rows_full = parse_metrics(full.metrics_path);
  auto full_text = csv_lines(read_text(full.metrics_path));
  auto cont_text = csv_lines(read_text(cont.metrics_path));
  REQUIRE(rows_full.size() == 8);
  REQUIRE(cont_text.size() == 4);  // epochs 2 and 3, no header
  CHECK(cont_text[0] == full_text[5]);  // epoch 2 train
  CHECK(cont_text[1] == full_text[6]);
  CHECK(cont_text[2] == full_text[7]);
  CHECK(cont_text[3] == full_text[8]);
  CHECK(cont.best_val_acc == full.best_val_acc);
}

TEST_CASE("evaluate_split matches logged validation accuracy; order invariance") {
  ExperimentConfig cfg = tiny_config();
  const auto& ds = tiny_dataset();
  std::string dir = temp_dir("eval");
  auto res = run_train(cfg, ds, dir);

  auto rows = parse_metrics(res.metrics_path);
  double best_logged = 0.0;
  for (const auto& r : rows)
    if (r.phase == "val") best_logged = std::max(best_logged, r.acc);

  auto loaded = load_checkpoint<float>(res.best_path);
  auto rep = evaluate_split(loaded.model, ds.val, loaded.state.config);
  CHECK(rep.accuracy == best_logged);  // same code path, exact

  CHECK(rep.per_class_accuracy.size() == 3);
  CHECK(rep.predictions.size() == ds.val.size());

  // shuffled evaluation order leaves accuracy unchanged
  auto shuffled = ds.val;
  RngHandle rng(4);
  std::vector<std::size_t> order = epoch_shuffle(shuffled.size(), rng);
  std::vector<VideoSample<float>> reordered;
  for (std::size_t i : order) reordered.push_back(shuffled[i]);
  auto rep2 = evaluate_split(loaded.model, reordered, loaded.state.config);
  CHECK(rep2.accuracy == rep.accuracy);

  std::vector<VideoSample<float>> empty;
  CHECK_THROWS_AS(evaluate_split(loaded.model, empty, loaded.state.config), DataError);
}

TEST_CASE("ablation preset grids match the suite definitions") {
  auto names = [](const std::vector<ExperimentPreset>& ps) {
    std::vector<std::string> out;
    for (const auto& p : ps) out.push_back(p.name);
    return out;
  };
  CHECK(names(ablation_presets("frontend", 5)) == std::vector<std::string>{"baseline", "se"});
  CHECK(names(ablation_presets("backend", 5)) ==
        std::vector<std::string>{"gru_dropout", "gru_no_dropout"});
  CHECK(names(ablation_presets("data", 5)) ==
        std::vector<std::string>{"baseline", "word_boundary", "alignment"});
  CHECK(names(ablation_presets("tweaks", 5)) ==
        std::vector<std::string>{"baseline", "mixup", "label_smooth"});
  CHECK(names(ablation_presets("schedulers", 5)) ==
        std::vector<std::string>{"plateau", "cosine", "exponential"});
  CHECK(names(ablation_presets("final", 5)) == std::vector<std::string>{"basic", "refined"});
  CHECK_THROWS_AS(ablation_presets("nope", 5), ConfigError);

  // the refined preset stacks every trick
  auto fin = ablation_presets("final", 5);
  const auto& refined = fin[1].config;
  CHECK(refined.model.frontend.se_enabled);
  CHECK(refined.model.use_word_boundary);
  CHECK(refined.recipe.mixup_enabled);
  CHECK(refined.recipe.label_smooth_enabled);
  CHECK(refined.recipe.scheduler == SchedulerKind::kCosine);
  for (const auto& p : ablation_presets("tweaks", 5)) {
    CHECK(p.config.model.num_classes == 5);
    p.config.validate();
  }
}

TEST_CASE("ablation output files: csv schema and aggregated table") {
  AblationResult res;
  res.cells = {{"tweaks", "baseline", 1, 0.8, false, ""},
               {"tweaks", "baseline", 2, 0.9, false, ""},
               {"tweaks", "mixup", 1, 0.85, false, ""},
               {"tweaks", "mixup", 2, 0.0, true, "boom"}};
  std::string dir = temp_dir("abl_out");
  write_ablation_outputs(res, dir);

  auto lines = csv_lines(read_text(res.csv_path));
  REQUIRE(lines.size() == 4);  // header + 3 successful cells
  CHECK(lines[0] == "suite,preset,seed,val_acc");
  CHECK(lines[1].rfind("tweaks,baseline,1,", 0) == 0);

  auto table = read_text(res.table_path);
  CHECK(table.find("baseline") != std::string::npos);
  CHECK(table.find("0.8500") != std::string::npos);
  CHECK(table.find("FAILED: boom") != std::string::npos);
}

TEST_CASE("jitter_and_align restores jittered clips near the originals") {
  const auto& ds = tiny_dataset();
  auto jittered = detail::jitter_and_align(ds, false, 3);
  auto aligned = detail::jitter_and_align(ds, true, 3);
  REQUIRE(jittered.train.size() == ds.train.size());

  double mad_jit = 0.0, mad_fix = 0.0;
  const auto& ref = ds.train[0].frames;
  for (std::size_t i = 0; i < ref.numel(); ++i) {
    mad_jit += std::abs(jittered.train[0].frames[i] - ref[i]);
    mad_fix += std::abs(aligned.train[0].frames[i] - ref[i]);
  }
  mad_jit /= double(ref.numel());
  mad_fix /= double(ref.numel());
  CHECK(mad_fix < mad_jit);   // alignment undoes most of the jitter
  CHECK(mad_fix < 2.5e-2);
}
