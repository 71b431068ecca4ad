#pragma once
// Training objectives: Gram-matrix orthogonality between shared and private
// feature halves, windowed SSIM agreement between the shared halves of the
// two modalities, a non-saturating adversarial pair against a small patch
// discriminator, and L1 identity terms. All losses are scalar tensors wired
// into the active tape.

#include <string>
#include <utility>
#include <vector>

#include "deshadow/model.hpp"
#include "deshadow/rng.hpp"
#include "deshadow/tensor.hpp"

namespace deshadow {

// channel co-activation matrix F F^T / (H*W) for feat [C,H,W] or [C,N];
// a leading batch axis ([B,C,H,W] / [B,C,N]) yields one Gram per item
Tensor gram(const Tensor& feat);

// absolute cosine between the flattened Gram matrices of the two feature
// maps, in [0,1]; with normalized=false returns the raw signed inner
// product instead (unbounded, kept for ablation)
Tensor orthogonality_loss(const Tensor& align, const Tensor& separ,
                          bool normalized = true);

// 1 - mean SSIM over channels, computed on per-channel min-max normalized
// maps with an 11x11 Gaussian window (sigma 1.5); maps smaller than the
// window fall back to one global window; result in [0,2]
Tensor ssim_loss(const Tensor& a, const Tensor& b);

// mean absolute difference
Tensor identity_loss(const Tensor& a, const Tensor& b);

// strided conv patch classifier, channels in->16->32->64->1, LeakyReLU(0.2)
struct Discriminator {
  std::size_t in_channels = 3;
  std::vector<Tensor> conv_w;
  std::vector<Tensor> conv_b;

  static Discriminator init(std::size_t in_channels, Rng& rng);
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::vector<Tensor> params() const;
};

// pre-sigmoid realness map [B,1,h,w]
Tensor disc_logits(const Discriminator& d, const Tensor& image);
// sigmoid realness map, values in (0,1)
Tensor disc_forward(const Discriminator& d, const Tensor& image);

struct AdvPair {
  Tensor generator;      // -E[log D(fake)]  (non-saturating)
  Tensor discriminator;  // -E[log D(real)] - E[log(1 - D(fake))]
};

// evaluated in logit space so the logs never see a saturated probability
AdvPair adversarial_losses(const Tensor& fake, const Tensor& real,
                           const Discriminator& d);

struct LossReport {
  double ort_visible = 0.0;
  double ort_infrared = 0.0;
  double sim = 0.0;
  double adv_generator = 0.0;
  double adv_discriminator = 0.0;
  double ide = 0.0;
  double total = 0.0;  // = ort_visible + ort_infrared + sim + adv_generator + ide
};

struct LossOptions {
  bool use_post_transform = false;  // feed the on-sphere features instead
  bool ort_normalized = true;
  bool swap_adv_roles = false;   // treat the removal output as "real"
  bool with_discriminator = true;  // skip the D-side term when the caller
                                   // evaluates it on its own tape
  double w_ort = 1.0;
  double w_sim = 1.0;
  double w_adv = 1.0;
  double w_ide = 1.0;  // contamination vs cropped shadow
  double w_rec = 1.0;  // removal output vs shadow-free crop (folded into ide)
};

// everything produced by one training step that the objectives consume
struct StepInputs {
  FeatureBundle vis;     // features of the contaminated visible patch
  FeatureBundle inf;     // features of its pseudo-infrared rendering
  Tensor clean;          // removal output
  Tensor shadow_patch;   // genuine shadow crop
  Tensor pseudo_shadow;  // rendered contamination of the shadow-free crop
  Tensor shadow_free;    // shadow-free crop (reconstruction target)
  ModelConfig cfg;
};

struct LossBundle {
  Tensor ort_visible, ort_infrared, sim, adv_generator, adv_discriminator,
      ide, total;
  LossReport report() const;
};

// assembles the combination the generator trains on; component fields carry
// their weights so the report's total always equals the component sum
LossBundle total_loss(const StepInputs& in, const Discriminator& d,
                      const LossOptions& opt = {});

// tokens [B,T,C] -> feature map [B,C,G,G] for the losses above
Tensor tokens_to_map(const Tensor& tokens, std::size_t grid);

// one line of comma-separated values: step, six components, total
std::string loss_csv_header();
std::string loss_csv_line(std::size_t step, const LossReport& r);

}  // namespace deshadow
