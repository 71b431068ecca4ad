#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "deshadow/trainer.hpp"

using namespace deshadow;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() / (std::string("deshadow_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), {}};
}

int run_cli(const std::string& args, const std::string& stdout_file = {}) {
  std::string cmd = std::string(DESHADOW_CLI_PATH) + " " + args;
  cmd += stdout_file.empty() ? " >/dev/null 2>&1"
                             : " >" + stdout_file + " 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  REQUIRE(WIFEXITED(rc));
  return WEXITSTATUS(rc);
}

std::string text_of(const fs::path& p) {
  const std::vector<char> b = slurp(p);
  return {b.begin(), b.end()};
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += (c == '\n');
  return n;
}

void write_tiny_config(const fs::path& path, const fs::path& manifest,
                       const fs::path& out_dir, std::size_t iterations,
                       std::uint64_t seed) {
  std::ofstream out(path);
  out << "seed = " << seed << "\n"
      << "iterations = " << iterations << "\n"
      << "batch_size = 1\n"
      << "log_interval = 5\n"
      << "checkpoint_interval = 0\n"
      << "manifest = " << manifest.string() << "\n"
      << "out_dir = " << out_dir.string() << "\n"
      << "image_size = 32\n"
      << "patch_size = 16\n"
      << "model_dim = 8\n"
      << "heads = 2\n"
      << "window = 2\n"
      << "num_blocks = 1\n"
      << "fusion_blocks = 1\n";
  REQUIRE(out.good());
}

}  // namespace

TEST_CASE("cli: usage and help contracts") {
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("synth --help") == 0);
  CHECK(run_cli("") == 2);              // a subcommand is required
  CHECK(run_cli("synth") == 2);         // --out is required
  CHECK(run_cli("warp --out x") == 2);  // unknown subcommand
  CHECK(run_cli("synth --out x --count notanumber") == 2);

  const fs::path dir = tmp_dir("cli_help");
  const std::string help_file = (dir / "train_help.txt").string();
  CHECK(run_cli("train --help", help_file) == 0);
  const std::string help = text_of(help_file);
  CHECK(help.find("config keys:") != std::string::npos);
  CHECK(help.find("checkpoint_interval") != std::string::npos);
  CHECK(help.find("eps_pole") != std::string::npos);
}

TEST_CASE("cli: synth writes the dataset and reruns bit for bit") {
  const fs::path dir = tmp_dir("cli_synth");
  const std::string out_file = (dir / "synth_out.txt").string();
  CHECK(run_cli("synth --out " + (dir / "a").string() +
                    " --count 3 --size 32 --seed 9",
                out_file) == 0);
  CHECK(text_of(out_file).find("manifest.txt") != std::string::npos);

  DatasetManifest man = load_manifest((dir / "a" / "manifest.txt").string());
  CHECK(man.entries.size() == 3);
  for (const char* stem : {"img", "mask", "gt", "field"}) {
    for (int i = 0; i < 3; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%s_%04d.png", stem, i);
      CAPTURE(name);
      CHECK(fs::exists(dir / "a" / name));
    }
  }

  CHECK(run_cli("synth --out " + (dir / "b").string() +
                " --count 3 --size 32 --seed 9") == 0);
  for (const auto& entry : fs::directory_iterator(dir / "a")) {
    const fs::path twin = dir / "b" / entry.path().filename();
    CAPTURE(entry.path().filename().string());
    REQUIRE(fs::exists(twin));
    CHECK(slurp(entry.path()) == slurp(twin));
  }

  CHECK(run_cli("synth --out " + (dir / "c").string() +
                " --count 3 --size 32 --seed 10") == 0);
  CHECK(slurp(dir / "a" / "img_0000.png") != slurp(dir / "c" / "img_0000.png"));
}

TEST_CASE("cli: selftest gate, radius override, singular negative control") {
  const fs::path dir = tmp_dir("cli_self");
  const std::string out_file = (dir / "self.txt").string();
  CHECK(run_cli("selftest", out_file) == 0);
  const std::string report = text_of(out_file);
  CHECK(report.find("[ok]") != std::string::npos);
  CHECK(report.find("[FAIL]") == std::string::npos);
  CHECK(run_cli("selftest --r 2.5") == 0);
  CHECK(run_cli("selftest --eps-pole 0") != 0);
}

TEST_CASE("cli: train smoke run, log contract, determinism") {
  const fs::path dir = tmp_dir("cli_train");
  CHECK(run_cli("synth --out " + (dir / "ds").string() +
                " --count 4 --size 32 --seed 3") == 0);
  const fs::path manifest = dir / "ds" / "manifest.txt";

  write_tiny_config(dir / "run.cfg", manifest, dir / "run_a", 10, 5);
  CHECK(run_cli("train --config " + (dir / "run.cfg").string()) == 0);
  REQUIRE(fs::exists(dir / "run_a" / "loss_log.csv"));
  REQUIRE(fs::exists(dir / "run_a" / "ckpt_final.dsc"));
  const std::string log_a = text_of(dir / "run_a" / "loss_log.csv");
  CHECK(count_lines(log_a) == 11);  // header + ten records

  write_tiny_config(dir / "rerun.cfg", manifest, dir / "run_b", 10, 5);
  CHECK(run_cli("train --config " + (dir / "rerun.cfg").string()) == 0);
  CHECK(text_of(dir / "run_b" / "loss_log.csv") == log_a);
  CHECK(slurp(dir / "run_b" / "ckpt_final.dsc") ==
        slurp(dir / "run_a" / "ckpt_final.dsc"));

  CHECK(run_cli("train --config " + (dir / "missing.cfg").string()) == 1);
  {
    std::ofstream bad(dir / "bad.cfg");
    bad << "not a config at all\n";
  }
  CHECK(run_cli("train --config " + (dir / "bad.cfg").string()) == 1);
}

TEST_CASE("cli: eval prints both reports and matches a recomputation") {
  const fs::path dir = tmp_dir("cli_eval");
  REQUIRE(run_cli("synth --out " + (dir / "ds").string() +
                  " --count 3 --size 32 --seed 8") == 0);
  const fs::path manifest = dir / "ds" / "manifest.txt";
  write_tiny_config(dir / "run.cfg", manifest, dir / "run", 2, 6);
  REQUIRE(run_cli("train --config " + (dir / "run.cfg").string()) == 0);
  const fs::path ckpt = dir / "run" / "ckpt_final.dsc";

  const std::string out_file = (dir / "eval.txt").string();
  const fs::path csv = dir / "report.csv";
  CHECK(run_cli("eval --checkpoint " + ckpt.string() + " --manifest " +
                    manifest.string() + " --out " + csv.string(),
                out_file) == 0);
  const std::string printed = text_of(out_file);
  CHECK(printed.find("model:") != std::string::npos);
  CHECK(printed.find("identity baseline:") != std::string::npos);
  CHECK(printed.find("improvement over identity") != std::string::npos);

  REQUIRE(fs::exists(csv));
  std::istringstream rows(text_of(csv));
  std::string header, model_row, identity_row;
  REQUIRE(std::getline(rows, header));
  REQUIRE(std::getline(rows, model_row));
  REQUIRE(std::getline(rows, identity_row));
  CHECK(header == "role," + eval_csv_header());
  CHECK(model_row.rfind("model,", 0) == 0);

  // the identity row must agree with evaluating input-vs-gt by hand
  DatasetManifest man = load_manifest(manifest.string());
  std::vector<EvalReport> reports;
  for (const ManifestEntry& e : man.entries) {
    const std::string name = fs::path(e.image).filename().string();
    Tensor visible = load_image((fs::path(man.dir) / e.image).string());
    Tensor gt = load_image(
        (fs::path(man.dir) / ("gt" + name.substr(3))).string());
    Tensor mask = load_mask((fs::path(man.dir) / e.mask).string());
    reports.push_back(evaluate_pair(visible, gt, mask));
  }
  CHECK(identity_row ==
        "identity," + eval_csv_line(average_reports(reports)));

  // without gt images only entropy is reported
  const fs::path blind = dir / "blind";
  fs::create_directories(blind);
  fs::copy_file(dir / "ds" / "img_0000.png", blind / "scene.png");
  fs::copy_file(dir / "ds" / "mask_0000.png", blind / "scene_mask.png");
  {
    std::ofstream out(blind / "manifest.txt");
    out << "scene.png\tscene_mask.png\n";
  }
  const std::string blind_file = (dir / "blind.txt").string();
  CHECK(run_cli("eval --checkpoint " + ckpt.string() + " --manifest " +
                    (blind / "manifest.txt").string(),
                blind_file) == 0);
  CHECK(text_of(blind_file).find("entropy-only") != std::string::npos);

  CHECK(run_cli("eval --checkpoint " + (dir / "no.dsc").string() +
                " --manifest " + manifest.string()) == 1);
}

TEST_CASE("cli: infer writes the sidecar, keeps dims, honors the mask") {
  const fs::path dir = tmp_dir("cli_infer");
  REQUIRE(run_cli("synth --out " + (dir / "ds").string() +
                  " --count 2 --size 32 --seed 4") == 0);
  const fs::path manifest = dir / "ds" / "manifest.txt";
  write_tiny_config(dir / "run.cfg", manifest, dir / "run", 2, 9);
  REQUIRE(run_cli("train --config " + (dir / "run.cfg").string()) == 0);
  const fs::path ckpt = dir / "run" / "ckpt_final.dsc";
  const fs::path image = dir / "ds" / "img_0001.png";
  const fs::path mask = dir / "ds" / "mask_0001.png";

  CHECK(run_cli("infer --checkpoint " + ckpt.string() + " --image " +
                image.string()) == 0);
  const fs::path sidecar = dir / "ds" / "img_0001.deshadow.png";
  REQUIRE(fs::exists(sidecar));
  Tensor pred = load_image(sidecar.string());
  CHECK(pred.shape() == Shape{3, 32, 32});
  for (double v : pred.data()) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }

  // masked inference passes the input through untouched outside the mask
  CHECK(run_cli("infer --checkpoint " + ckpt.string() + " --image " +
                image.string() + " --mask " + mask.string()) == 0);
  Tensor blended = load_image(sidecar.string());
  Tensor visible = load_image(image.string());
  Tensor m = load_mask(mask.string());
  std::size_t outside = 0, changed_inside = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < 32 * 32; ++i) {
      const double mv = m.data()[i];
      const double a = blended.data()[c * 32 * 32 + i];
      const double b = visible.data()[c * 32 * 32 + i];
      if (mv == 0.0) {
        ++outside;
        CHECK(a == b);
      } else if (a != b) {
        ++changed_inside;
      }
    }
  }
  CHECK(outside > 0);
  CHECK(changed_inside > 0);

  // a never-trained checkpoint (zero iterations) still infers cleanly
  write_tiny_config(dir / "fresh.cfg", manifest, dir / "fresh", 0, 9);
  REQUIRE(run_cli("train --config " + (dir / "fresh.cfg").string()) == 0);
  CHECK(run_cli("infer --checkpoint " +
                (dir / "fresh" / "ckpt_final.dsc").string() + " --image " +
                image.string()) == 0);

  // literally zeroed weights produce zero-length feature rows, which the
  // sphere projection rejects as degenerate rather than dividing by zero
  Checkpoint c = load_checkpoint(ckpt.string());
  for (auto& [name, t] : c.tensors) t = Tensor::zeros(t.shape());
  const fs::path zero = dir / "zero.dsc";
  save_checkpoint(zero.string(), c);
  CHECK(run_cli("infer --checkpoint " + zero.string() + " --image " +
                image.string()) == 1);

  CHECK(run_cli("infer --checkpoint " + ckpt.string() + " --image " +
                (dir / "nothere.png").string()) == 1);
}
