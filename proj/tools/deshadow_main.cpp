#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "deshadow/selftest.hpp"
#include "deshadow/trainer.hpp"

using namespace deshadow;
namespace fs = std::filesystem;

namespace {

int run_synth(const std::string& out_dir, std::size_t count, std::size_t size,
              std::uint64_t seed) {
  synth_dataset(out_dir, count, size, seed);
  std::cout << (fs::path(out_dir) / "manifest.txt").string() << "\n";
  return 0;
}

int run_train(const std::string& config_path) {
  TrainConfig cfg = parse_config_file(config_path);
  TrainArtifacts art = train_loop(cfg, &std::cout);
  std::cout << "loss log: " << art.log_path << "\n"
            << "checkpoint: " << art.checkpoint_path << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& manifest,
             const std::string& out_csv) {
  EvalOutcome eo = evaluate_checkpoint(checkpoint, manifest);
  if (!eo.full_reference) {
    std::cout << "no ground truth found; entropy-only report\n";
  }
  std::cout << "model:\n" << eval_table(eo.model);
  std::cout << "identity baseline:\n" << eval_table(eo.identity);
  if (eo.full_reference && eo.identity.rmse_shadow > 0.0) {
    const double gain = 100.0 *
        (eo.identity.rmse_shadow - eo.model.rmse_shadow) /
        eo.identity.rmse_shadow;
    std::printf("shadow rmse improvement over identity: %.2f%%\n", gain);
  }
  if (!out_csv.empty()) {
    std::ofstream out(out_csv, std::ios::binary);
    out << "role," << eval_csv_header() << "\n"
        << "model," << eval_csv_line(eo.model) << "\n"
        << "identity," << eval_csv_line(eo.identity) << "\n";
    if (!out) throw DomainError("eval: cannot write '" + out_csv + "'");
    std::cout << "csv: " << out_csv << "\n";
  }
  return 0;
}

int run_infer(const std::string& checkpoint, const std::string& image_path,
              const std::string& mask_path, const std::string& ir_path) {
  Tensor visible = load_image(image_path);
  if (visible.shape()[0] != 3) {
    throw DomainError("infer: '" + image_path + "' is not an RGB image");
  }
  if (visible.shape()[1] != visible.shape()[2]) {
    throw DomainError("infer: image must be square, got " +
                      shape_str(visible.shape()));
  }
  const std::size_t H = visible.shape()[1];
  RestoredModel rm = restore(load_checkpoint(checkpoint), H);
  Tensor infrared =
      ir_path.empty() ? pseudo_infrared(visible) : load_image(ir_path);
  Tensor pred = infer_image(rm.g, visible, infrared);
  if (!mask_path.empty()) {
    Tensor mask = load_mask(mask_path);
    if (mask.shape() != Shape{1, H, H}) {
      throw DomainError("infer: mask size differs from the image");
    }
    const auto pv = pred.data();
    const auto vv = visible.data();
    const auto mv = mask.data();
    std::vector<double> mixed(pv.size());
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < H * H; ++i) {
        const double m = mv[i];
        mixed[c * H * H + i] =
            m * pv[c * H * H + i] + (1.0 - m) * vv[c * H * H + i];
      }
    }
    pred = Tensor::from_data({3, H, H}, std::move(mixed));
  }
  fs::path out = image_path;
  out.replace_extension();
  out += ".deshadow.png";
  save_image(out.string(), pred);
  std::cout << out.string() << "\n";
  return 0;
}

int run_selftest(double radius, double eps_pole) {
  const int failures = run_sphere_selftest(radius, eps_pole, std::cout);
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"shadow removal via spherical feature decomposition"};
  app.require_subcommand(1);

  auto* synth_cmd =
      app.add_subcommand("synth", "render a synthetic shadow dataset");
  std::string out_dir;
  std::size_t count = 200, size = 64;
  std::uint64_t seed = 7;
  synth_cmd->add_option("--out", out_dir, "output directory")->required();
  synth_cmd->add_option("--count", count, "number of images (200)");
  synth_cmd->add_option("--size", size, "square image side (64)");
  synth_cmd->add_option("--seed", seed, "rng seed (7)");

  auto* train_cmd = app.add_subcommand("train", "train from a config file");
  std::string config_path;
  train_cmd->add_option("--config", config_path, "key = value config file")
      ->required();
  train_cmd->footer("config keys:\n" + config_keys_help());

  auto* eval_cmd =
      app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  std::string checkpoint, manifest, out_csv;
  eval_cmd->add_option("--checkpoint", checkpoint, "trained .dsc file")
      ->required();
  eval_cmd->add_option("--manifest", manifest, "dataset manifest")->required();
  eval_cmd->add_option("--out", out_csv, "also write the report as csv");

  auto* infer_cmd =
      app.add_subcommand("infer", "remove the shadow from one image");
  std::string in_ckpt, in_image, in_mask, in_ir;
  infer_cmd->add_option("--checkpoint", in_ckpt, "trained .dsc file")
      ->required();
  infer_cmd->add_option("--image", in_image, "square RGB png")->required();
  infer_cmd->add_option("--mask", in_mask,
                        "restrict the edit to this mask region");
  infer_cmd->add_option("--infrared", in_ir,
                        "measured infrared png (default: synthesized)");

  auto* self_cmd =
      app.add_subcommand("selftest", "sphere-geometry property suite");
  double radius = 1.0, eps_pole = 1e-6;
  self_cmd->add_option("--r", radius, "sphere radius (1.0)");
  self_cmd->add_option("--eps-pole", eps_pole, "pole series cutoff (1e-6)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth_cmd->parsed()) return run_synth(out_dir, count, size, seed);
    if (train_cmd->parsed()) return run_train(config_path);
    if (eval_cmd->parsed()) return run_eval(checkpoint, manifest, out_csv);
    if (infer_cmd->parsed()) return run_infer(in_ckpt, in_image, in_mask, in_ir);
    if (self_cmd->parsed()) return run_selftest(radius, eps_pole);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
