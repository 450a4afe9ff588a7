#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "spotter/checkpoint.hpp"
#include "spotter/config.hpp"
#include "spotter/dataset.hpp"
#include "spotter/gradcheck.hpp"
#include "spotter/image_io.hpp"
#include "spotter/model.hpp"
#include "spotter/scene_synth.hpp"
#include "spotter/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;  // validation/check failures, divergence
constexpr int kExitUsageOrIo = 2;    // bad usage, config, missing files

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  int threads = 0;  // 0 = take from config file
  bool deterministic = false;
  std::vector<std::string> overrides;
};

spotter::ConfigFile load_config(const CommonArgs& args, bool required) {
  spotter::ConfigFile cfg;
  if (!args.config_path.empty()) {
    cfg = spotter::ConfigFile::parse_file(args.config_path);
  } else if (required) {
    throw spotter::ConfigError("a --config file is required for this command");
  }
  for (const auto& ov : args.overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw spotter::ConfigError("override must look like section.key=value: " + ov);
    cfg.apply_override(ov.substr(0, eq), ov.substr(eq + 1));
  }
  return cfg;
}

// --out wins, then the SPOTTER_OUT environment variable, then the default.
std::string resolve_out_dir(const std::string& cli_out, const std::string& fallback) {
  if (!cli_out.empty()) return cli_out;
  if (const char* env = std::getenv("SPOTTER_OUT"); env != nullptr && *env != '\0')
    return env;
  return fallback;
}

int cmd_synth(const CommonArgs& args, int count, const std::string& split_arg) {
  spotter::ConfigFile cfg = load_config(args, true);
  spotter::SceneSpec spec = spotter::scene_spec_from(cfg, args.seed);
  cfg.check_all_consumed();
  if (args.seed != 0) spec.seed = args.seed;

  std::array<double, 3> split{0.8, 0.1, 0.1};
  if (!split_arg.empty()) {
    if (std::sscanf(split_arg.c_str(), "%lf,%lf,%lf", &split[0], &split[1], &split[2]) != 3)
      throw spotter::ConfigError("--split expects three comma-separated fractions");
  }
  const std::string out = resolve_out_dir(args.out_dir, "dataset-out");
  const auto counts = spotter::make_dataset(spec, count, split, out);
  std::cout << "wrote " << counts[0] << " train / " << counts[1] << " val / "
            << counts[2] << " test samples to " << out << "\n";
  return kExitOk;
}

int cmd_train(const CommonArgs& args, const std::string& resume) {
  spotter::ConfigFile cfg = load_config(args, true);
  const spotter::ModelConfig mc = spotter::model_config_from(cfg);
  const spotter::TrainFileSettings ts = spotter::train_settings_from(cfg);
  std::vector<spotter::StageConfig> stages = spotter::stages_from(cfg);
  cfg.check_all_consumed();
  if (stages.empty()) throw spotter::ConfigError("config declares no [stage ...] sections");

  spotter::TrainOptions opts;
  opts.batch_size = ts.batch_size;
  opts.threads = args.threads > 0 ? args.threads : ts.threads;
  opts.seed = args.seed;
  opts.deterministic = args.deterministic;
  opts.out_dir = resolve_out_dir(args.out_dir, "train-out");
  opts.eval_max_samples = ts.eval_max_samples;
  opts.resume_checkpoint = resume;
  opts.verbose = true;

  spotter::Rng rng(spotter::mix_seed(args.seed, 0x5EED));
  spotter::TextSpotter model = spotter::TextSpotter::build(mc, rng);
  const spotter::TrainResult result = spotter::run_curriculum(model, stages, opts);

  if (!result.history.empty()) {
    const auto& last = result.history.back();
    std::cout << "final: stage " << last.stage << " epoch " << last.epoch << " loss "
              << last.train_loss << " seq_acc " << last.eval.seq_acc << " char_acc "
              << last.eval.char_acc << "\n";
  }
  std::cout << "metrics: " << (fs::path(opts.out_dir) / "metrics.jsonl").string() << "\n";
  if (!result.checkpoints.empty())
    std::cout << "last checkpoint: " << result.checkpoints.back() << "\n";
  return kExitOk;
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt_path,
             const std::string& data_dir) {
  const spotter::CheckpointData data = spotter::load_checkpoint(ckpt_path);
  const spotter::TextSpotter model = spotter::restore_model(data);
  const spotter::Dataset dataset = spotter::Dataset::load(data_dir);
  const int threads = args.threads > 0 ? args.threads : 1;
  const spotter::EvalReport report =
      spotter::evaluate(model, dataset, args.deterministic ? 1 : threads);

  json j{{"samples", report.samples},
         {"seq_acc", report.seq_acc},
         {"char_acc", report.char_acc},
         {"mean_loss", report.mean_loss}};
  if (report.mean_iou >= 0.0) j["mean_iou"] = report.mean_iou;
  std::cout << j.dump(2) << "\n";
  if (!args.out_dir.empty()) {
    fs::create_directories(args.out_dir);
    std::ofstream f(fs::path(args.out_dir) / "eval.json");
    f << j.dump(2) << "\n";
  }
  return kExitOk;
}

int cmd_predict(const CommonArgs& args, const std::string& ckpt_path,
                const std::string& image_path, bool strict_size) {
  const spotter::CheckpointData data = spotter::load_checkpoint(ckpt_path);
  const spotter::TextSpotter model = spotter::restore_model(data);
  const spotter::ModelConfig& mc = model.config();

  const spotter::ImageU8 raw = spotter::read_png(image_path);
  spotter::Tensor image = spotter::image_to_tensor(raw);
  if (image.dim(0) != mc.input_channels)
    throw spotter::DataError("image " + image_path + " has the wrong channel count");
  if (image.dim(1) != mc.input_h || image.dim(2) != mc.input_w) {
    if (strict_size)
      throw spotter::DataError(
          "image " + image_path + " is " + std::to_string(image.dim(2)) + "x" +
          std::to_string(image.dim(1)) + " but the model expects " +
          std::to_string(mc.input_w) + "x" + std::to_string(mc.input_h) +
          " (strict mode)");
    // Bilinear resize through the sampler with a full-extent identity grid.
    spotter::Tape tape;
    tape.set_recording(false);
    const spotter::SamplingGrid grid =
        spotter::generate_grid(spotter::AffineParams::identity(), mc.input_h, mc.input_w,
                               static_cast<int>(image.dim(1)), static_cast<int>(image.dim(2)));
    image = spotter::bilinear_sample(tape, image, grid);
  }

  const auto regions = model.predict(image);
  json out;
  out["regions"] = json::array();
  for (const auto& r : regions) {
    out["regions"].push_back(json{
        {"box", {r.box.min_x(), r.box.min_y(), r.box.max_x(), r.box.max_y()}},
        {"text", r.text},
        {"confidence", r.confidence}});
  }

  const std::string out_dir = resolve_out_dir(args.out_dir, "predict-out");
  fs::create_directories(out_dir);
  const std::string stem = fs::path(image_path).stem().string();
  {
    std::ofstream f(fs::path(out_dir) / (stem + ".json"));
    f << out.dump(2) << "\n";
  }
  spotter::ImageU8 annotated = spotter::to_rgb(spotter::tensor_to_image(image));
  for (const auto& r : regions)
    spotter::draw_box_outline(annotated, r.box.min_x(), r.box.min_y(), r.box.max_x(),
                              r.box.max_y(), 230, 40, 40);
  spotter::write_png((fs::path(out_dir) / (stem + "_boxes.png")).string(), annotated);

  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

int cmd_gradcheck(const CommonArgs& args, const std::string& op_filter, int instances) {
  const auto reports = spotter::gradcheck::run_all(args.seed, instances, op_filter);
  bool all_pass = true;
  for (const auto& r : reports) {
    std::printf("%-24s max_rel_err %.3e  tol %.1e  [%s]\n", r.op.c_str(), r.max_rel_err,
                r.tolerance, r.pass ? "PASS" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  return all_pass ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scene-text localisation + recognition trainer"};
  app.require_subcommand(1);

  CommonArgs common;
  app.add_option("--seed", common.seed, "master random seed")->capture_default_str();
  app.add_option("--threads", common.threads, "worker threads (1 = fully deterministic)");
  app.add_flag("--deterministic", common.deterministic, "force single-threaded determinism");
  app.add_option("--out", common.out_dir, "output directory (env SPOTTER_OUT as fallback)");
  app.add_option("--config", common.config_path, "configuration file");
  app.add_option("--set", common.overrides, "override: section.key=value");

  auto* synth = app.add_subcommand("synth", "generate a synthetic digit-scene dataset");
  int synth_count = 1000;
  std::string synth_split;
  synth->add_option("--count", synth_count, "total samples")->capture_default_str();
  synth->add_option("--split", synth_split, "train,val,test fractions (default 0.8,0.1,0.1)");
  synth->add_option("--spec", common.config_path, "scene spec file (alias for --config)");

  auto* train = app.add_subcommand("train", "run the curriculum declared in the config");
  std::string resume;
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();

  auto* predict = app.add_subcommand("predict", "run one image through a checkpoint");
  std::string pred_ckpt, pred_image;
  bool strict_size = false;
  predict->add_option("--checkpoint", pred_ckpt, "checkpoint file")->required();
  predict->add_option("--image", pred_image, "input PNG")->required();
  predict->add_flag("--strict-size", strict_size, "reject images that need resizing");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  std::string op_filter;
  int instances = 20;
  gradcheck->add_option("--op", op_filter, "only run ops whose name contains this");
  gradcheck->add_option("--instances", instances, "random instances per op")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsageOrIo;
  }

  try {
    if (*synth) return cmd_synth(common, synth_count, synth_split);
    if (*train) return cmd_train(common, resume);
    if (*eval) return cmd_eval(common, eval_ckpt, eval_data);
    if (*predict) return cmd_predict(common, pred_ckpt, pred_image, strict_size);
    if (*gradcheck) return cmd_gradcheck(common, op_filter, instances);
  } catch (const spotter::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const spotter::CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsageOrIo;
  } catch (const spotter::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsageOrIo;
  } catch (const spotter::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsageOrIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsageOrIo;
  }
  return kExitUsageOrIo;
}
