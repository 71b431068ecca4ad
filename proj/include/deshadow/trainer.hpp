#pragma once
// The training loop (alternating generator/discriminator Adam steps on
// cropped patch pairs) and checkpoint-driven evaluation. Everything is a
// pure function of (config, dataset contents): logs and checkpoints are
// byte-reproducible.

#include <ostream>
#include <string>

#include "deshadow/checkpoint.hpp"
#include "deshadow/config.hpp"
#include "deshadow/data.hpp"
#include "deshadow/losses.hpp"
#include "deshadow/metrics.hpp"
#include "deshadow/model.hpp"

namespace deshadow {

struct TrainArtifacts {
  std::string log_csv;          // header + one record per step
  std::string log_path;         // where the csv was written
  std::string checkpoint_path;  // final checkpoint
  LossReport last;
  std::size_t steps = 0;
};

// runs cfg.iterations steps; echoes progress when echo is non-null
TrainArtifacts train_loop(const TrainConfig& cfg, std::ostream* echo = nullptr);

Checkpoint snapshot(const Generator& g, const Discriminator& d,
                    const Tensor& raw_gamma, const TrainConfig& cfg,
                    std::size_t step);

// rebuilds the saved trio with the generator laid out for `image_size`
// inputs (the weights themselves are size-agnostic)
struct RestoredModel {
  Generator g;
  Discriminator d;
  Tensor raw_gamma;
  TrainConfig cfg;  // dims and loss switches; paths left empty
};
RestoredModel restore(const Checkpoint& c, std::size_t image_size);

struct EvalOutcome {
  bool full_reference = false;  // true when every entry has a gt image
  EvalReport model;
  EvalReport identity;  // untouched input vs gt, same protocol
};

// ground truth is found by the gt_/img_ filename convention of the
// synthesizer; without it only entropy is reported
EvalOutcome evaluate_model(const Generator& g, const DatasetManifest& m);
EvalOutcome evaluate_checkpoint(const std::string& checkpoint_path,
                                const std::string& manifest_path);

// shadow removal for one [3,H,W] image (H = W required by the encoder grid)
Tensor infer_image(const Generator& g, const Tensor& visible,
                   const Tensor& infrared);

}  // namespace deshadow
