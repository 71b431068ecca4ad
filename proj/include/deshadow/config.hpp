#pragma once
// Flat key=value run configuration. Every key is documented in
// config_keys_help(); unknown keys are hard errors so a typo cannot
// silently fall back to a default.

#include <cstdint>
#include <string>

#include "deshadow/losses.hpp"
#include "deshadow/model.hpp"

namespace deshadow {

struct TrainConfig {
  std::uint64_t seed = 7;
  std::size_t iterations = 2000;
  std::size_t batch_size = 2;
  double lr = 1e-4;
  std::size_t log_interval = 100;       // stdout echo cadence
  std::size_t checkpoint_interval = 500;  // 0 = final checkpoint only
  std::string manifest;
  std::string out_dir = "run";
  std::size_t image_size = 64;  // full-frame size used at evaluation
  std::size_t patch_size = 32;  // training crop fed to the network
  double coverage_hi = 0.7;
  double coverage_lo = 0.02;
  std::size_t model_patch = 4;
  std::size_t model_dim = 32;
  std::size_t heads = 4;
  std::size_t window = 8;
  std::size_t num_blocks = 4;
  std::size_t fusion_blocks = 2;
  double radius = 1.0;
  double eps_pole = 1e-6;
  LossOptions loss;

  // network geometry for a given input side length
  ModelConfig model(std::size_t size) const;
  void validate() const;  // values only; file existence is checked at use
};

TrainConfig parse_config_text(const std::string& text);
TrainConfig parse_config_file(const std::string& path);
std::string config_keys_help();

}  // namespace deshadow
