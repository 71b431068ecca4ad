#include "deshadow/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace deshadow {

namespace {

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw DomainError("config: expected a boolean, got '" + v + "'");
}

std::size_t parse_size(const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw DomainError("config: expected a non-negative integer, got '" + v +
                      "'");
  }
  return out;
}

double parse_real(const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw DomainError("config: expected a number, got '" + v + "'");
  }
}

}  // namespace

ModelConfig TrainConfig::model(std::size_t size) const {
  ModelConfig m;
  m.image_size = size;
  m.patch_size = model_patch;
  m.dim = model_dim;
  m.heads = heads;
  m.window = window;
  m.num_blocks = num_blocks;
  m.fusion_blocks = fusion_blocks;
  m.radius = radius;
  m.eps_pole = eps_pole;
  return m;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw DomainError("config: batch_size must be >= 1");
  if (lr <= 0.0) throw DomainError("config: lr must be positive");
  if (patch_size > image_size) {
    throw DomainError("config: patch_size cannot exceed image_size");
  }
  if (!(coverage_lo >= 0.0 && coverage_lo < coverage_hi &&
        coverage_hi <= 1.0)) {
    throw DomainError("config: need 0 <= coverage_lo < coverage_hi <= 1");
  }
  model(patch_size).validate();  // training geometry
  model(image_size).validate();  // evaluation geometry
}

TrainConfig parse_config_text(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DomainError("config: line " + std::to_string(lineno) +
                        " is not key = value");
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty()) {
      throw DomainError("config: line " + std::to_string(lineno) +
                        " has an empty key or value");
    }

    if (key == "seed") c.seed = parse_size(val);
    else if (key == "iterations") c.iterations = parse_size(val);
    else if (key == "batch_size") c.batch_size = parse_size(val);
    else if (key == "lr") c.lr = parse_real(val);
    else if (key == "log_interval") c.log_interval = parse_size(val);
    else if (key == "checkpoint_interval") c.checkpoint_interval = parse_size(val);
    else if (key == "manifest") c.manifest = val;
    else if (key == "out_dir") c.out_dir = val;
    else if (key == "image_size") c.image_size = parse_size(val);
    else if (key == "patch_size") c.patch_size = parse_size(val);
    else if (key == "coverage_hi") c.coverage_hi = parse_real(val);
    else if (key == "coverage_lo") c.coverage_lo = parse_real(val);
    else if (key == "model_patch") c.model_patch = parse_size(val);
    else if (key == "model_dim") c.model_dim = parse_size(val);
    else if (key == "heads") c.heads = parse_size(val);
    else if (key == "window") c.window = parse_size(val);
    else if (key == "num_blocks") c.num_blocks = parse_size(val);
    else if (key == "fusion_blocks") c.fusion_blocks = parse_size(val);
    else if (key == "radius") c.radius = parse_real(val);
    else if (key == "eps_pole") c.eps_pole = parse_real(val);
    else if (key == "w_ort") c.loss.w_ort = parse_real(val);
    else if (key == "w_sim") c.loss.w_sim = parse_real(val);
    else if (key == "w_adv") c.loss.w_adv = parse_real(val);
    else if (key == "w_ide") c.loss.w_ide = parse_real(val);
    else if (key == "w_rec") c.loss.w_rec = parse_real(val);
    else if (key == "use_post_transform") c.loss.use_post_transform = parse_bool(val);
    else if (key == "ort_normalized") c.loss.ort_normalized = parse_bool(val);
    else if (key == "swap_adv_roles") c.loss.swap_adv_roles = parse_bool(val);
    else {
      throw DomainError("config: unknown key '" + key + "' (line " +
                        std::to_string(lineno) + ")");
    }
  }
  c.validate();
  return c;
}

TrainConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DomainError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string config_keys_help() {
  return
      "seed                 rng seed (default 7)\n"
      "iterations           training steps (2000)\n"
      "batch_size           images per step (2)\n"
      "lr                   Adam learning rate (1e-4)\n"
      "log_interval         echo every N steps (100); the csv logs all steps\n"
      "checkpoint_interval  save every N steps, 0 = final only (500)\n"
      "manifest             training manifest path (required for train)\n"
      "out_dir              logs + checkpoints directory (run)\n"
      "image_size           full-frame side used at evaluation (64)\n"
      "patch_size           training crop side (32)\n"
      "coverage_hi          min mask coverage of the shadow crop (0.7)\n"
      "coverage_lo          max mask coverage of the clean crop (0.02)\n"
      "model_patch          token patch side (4)\n"
      "model_dim            token channels (32)\n"
      "heads                attention heads (4)\n"
      "window               attention window in tokens (8)\n"
      "num_blocks           encoder depth (4)\n"
      "fusion_blocks        decoder depth (2)\n"
      "radius               sphere radius (1.0)\n"
      "eps_pole             series cutoff near the pole (1e-6)\n"
      "w_ort w_sim w_adv w_ide w_rec   loss weights (all 1.0)\n"
      "use_post_transform   0/1, objectives on on-sphere features (0)\n"
      "ort_normalized       0/1, cosine-normalized orthogonality (1)\n"
      "swap_adv_roles       0/1, removal output plays \"real\" (0)\n";
}

}  // namespace deshadow
