// lipkit command-line entry point.
//
// Subcommands: gen-data, train, eval, ablate, align.
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "lipkit/align.hpp"
#include "lipkit/harness.hpp"

namespace fs = std::filesystem;
using namespace lipkit;

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ','))
    if (!tok.empty()) out.push_back(std::stoull(tok));
  if (out.empty()) throw ConfigError("--seeds: expected a comma-separated list, got \"" + csv + "\"");
  return out;
}

int cmd_gen_data(const std::string& out_dir, std::size_t classes, std::size_t per_class,
                 std::size_t frames, std::size_t image_size, double noise, bool boundary_context,
                 std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.classes = classes;
  cfg.per_class = per_class;
  cfg.frames = frames;
  cfg.image_size = image_size;
  cfg.noise = noise;
  cfg.boundary_context = boundary_context;
  cfg.seed = seed;
  auto manifest = generate_synthetic(out_dir, cfg);
  std::cout << "wrote " << manifest.samples.size() << " clips (" << classes << " classes) to "
            << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& resume) {
  ExperimentConfig cfg = load_config(config_path);
  LoadedDataset ds = load_dataset(data_dir);
  TrainResult res = run_train(cfg, ds, out_dir, resume);
  std::cout << "trained " << res.epochs_run << " epochs; best val acc " << res.best_val_acc
            << "\nmetrics: " << res.metrics_path << "\nbest checkpoint: " << res.best_path << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split) {
  auto loaded = load_checkpoint<float>(ckpt);
  LoadedDataset ds = load_dataset(data_dir);
  EvalReport rep = evaluate_split(loaded.model, ds.split(split), loaded.state.config);
  std::cout << std::setprecision(17) << "split: " << split << "\naccuracy: " << rep.accuracy
            << "\nloss: " << rep.loss << "\n";
  for (std::size_t c = 0; c < rep.per_class_accuracy.size(); ++c)
    std::cout << "class " << ds.manifest.class_names[c] << ": " << rep.per_class_accuracy[c]
              << "\n";
  std::cout << "predictions:\n";
  for (const auto& [id, pred] : rep.predictions)
    std::cout << id << "," << ds.manifest.class_names[pred] << "\n";
  return 0;
}

int cmd_ablate(const std::string& suite, const std::string& data_dir, const std::string& out_dir,
               const std::string& seeds_csv) {
  LoadedDataset ds = load_dataset(data_dir);
  AblationResult res = run_ablation(suite, ds, out_dir, parse_seeds(seeds_csv));
  std::cout << std::ifstream(res.table_path).rdbuf();
  std::cout << "csv: " << res.csv_path << "\n";
  std::size_t failures = 0;
  for (const auto& c : res.cells) failures += c.failed ? 1 : 0;
  if (failures) std::cout << failures << " cell(s) failed; see " << res.table_path << "\n";
  return 0;
}

int cmd_align(const std::string& frames_path, const std::string& landmarks_path,
              const std::string& template_path, const std::string& out_dir) {
  // --frames accepts either one [T x H x W] clip tensor or a directory of
  // [H x W] frame tensors in lexicographic order.
  Tensor<float> clip;
  if (fs::is_directory(frames_path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(frames_path))
      if (e.path().extension() == ".lkt1") files.push_back(e.path());
    if (files.empty()) throw DataError("no .lkt1 frames in " + frames_path);
    std::sort(files.begin(), files.end());
    Tensor<float> first = load_lkt1_file<float>(files[0].string());
    if (first.rank() != 2) throw DataError("frame files must be [H x W] tensors");
    clip = Tensor<float>({files.size(), first.dim(0), first.dim(1)});
    for (std::size_t t = 0; t < files.size(); ++t) {
      Tensor<float> f = load_lkt1_file<float>(files[t].string());
      if (f.shape() != first.shape())
        throw DataError("frame size mismatch at " + files[t].string());
      std::copy_n(f.data(), f.numel(), clip.data() + t * f.numel());
    }
  } else {
    clip = load_lkt1_file<float>(frames_path);
    if (clip.rank() != 3) throw DataError("clip file must be a [T x H x W] tensor");
  }

  auto landmarks = load_landmarks(landmarks_path);
  auto tpl = load_template(template_path);
  Tensor<float> aligned = align_clip(clip, landmarks, tpl);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir + ": " + ec.message());
  const std::string out_file = (fs::path(out_dir) / "aligned.lkt1").string();
  save_lkt1_file(out_file, aligned);
  std::cout << "wrote " << shape_str(aligned.shape()) << " to " << out_file << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lipkit: deterministic CPU-scale lip-reading training toolkit"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_out;
  std::size_t gd_classes = 10, gd_per_class = 50, gd_frames = 16, gd_image = 48;
  double gd_noise = 0.04;
  bool gd_boundary = false;
  std::uint64_t gd_seed = 1;
  auto* gen = app.add_subcommand("gen-data", "render a synthetic video-word dataset");
  gen->add_option("--out", gd_out, "output directory")->required();
  gen->add_option("--classes", gd_classes, "number of word classes");
  gen->add_option("--per-class", gd_per_class, "samples per class");
  gen->add_option("--frames", gd_frames, "frames per clip");
  gen->add_option("--image-size", gd_image, "rendered square frame side");
  gen->add_option("--noise", gd_noise, "nuisance noise level");
  gen->add_flag("--boundary-context", gd_boundary,
                "put a class cue outside the word interval only");
  gen->add_option("--seed", gd_seed, "generator seed");

  // train
  std::string tr_config, tr_data, tr_out, tr_resume;
  auto* train = app.add_subcommand("train", "train a model from a JSON config");
  train->add_option("--config", tr_config, "config JSON file")->required();
  train->add_option("--data", tr_data, "dataset directory (manifest.json + clips)")->required();
  train->add_option("--out", tr_out, "output directory")->required();
  train->add_option("--resume", tr_resume, "checkpoint to resume from");

  // eval
  std::string ev_ckpt, ev_data, ev_split = "val";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->add_option("--ckpt", ev_ckpt, "LKPT1 checkpoint")->required();
  eval->add_option("--data", ev_data, "dataset directory")->required();
  eval->add_option("--split", ev_split, "train|val|test")
      ->check(CLI::IsMember({"train", "val", "test"}));

  // ablate
  std::string ab_suite, ab_data, ab_out, ab_seeds = "1,2,3";
  auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
  ablate->add_option("--suite", ab_suite, "frontend|backend|data|tweaks|schedulers|final")
      ->required();
  ablate->add_option("--data", ab_data, "dataset directory")->required();
  ablate->add_option("--out", ab_out, "output directory")->required();
  ablate->add_option("--seeds", ab_seeds, "comma-separated seed list");

  // align
  std::string al_frames, al_landmarks, al_template, al_out;
  auto* align = app.add_subcommand("align", "align a clip against a landmark template");
  align->add_option("--frames", al_frames, "clip .lkt1 file or directory of frame files")
      ->required();
  align->add_option("--landmarks", al_landmarks, "per-frame landmarks JSON")->required();
  align->add_option("--template", al_template, "canonical template JSON")->required();
  align->add_option("--out", al_out, "output directory")->required();

  try {
    app.parse(argc, argv);
    if (*gen)
      return cmd_gen_data(gd_out, gd_classes, gd_per_class, gd_frames, gd_image, gd_noise,
                          gd_boundary, gd_seed);
    if (*train) return cmd_train(tr_config, tr_data, tr_out, tr_resume);
    if (*eval) return cmd_eval(ev_ckpt, ev_data, ev_split);
    if (*ablate) return cmd_ablate(ab_suite, ab_data, ab_out, ab_seeds);
    if (*align) return cmd_align(al_frames, al_landmarks, al_template, al_out);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // usage problems are config errors
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
