#pragma once
// Two-branch removal network: per-modality patch encoders built from windowed
// self-attention blocks, a spherical feature decomposition into aligned and
// modality-specific halves, and a fusion decoder that reconstructs the clean
// image from the visible features plus the aligned infrared half. The
// modality-specific infrared half is deliberately excluded from fusion.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "deshadow/rng.hpp"
#include "deshadow/sphere.hpp"
#include "deshadow/tensor.hpp"

namespace deshadow {

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 4;
  std::size_t dim = 32;   // token channels; split in half for the sphere step
  std::size_t heads = 4;
  std::size_t window = 8;        // in tokens; clipped to the grid if larger
  std::size_t num_blocks = 4;    // per encoder
  std::size_t fusion_blocks = 2; // decoder depth
  double radius = 1.0;
  double eps_pole = 1e-6;

  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t half_dim() const { return dim / 2; }
  std::size_t fused_dim() const { return dim + dim / 2; }
  std::size_t eff_window() const { return window < grid() ? window : grid(); }
  std::size_t shift() const { return eff_window() / 2; }
  SphereConfig sphere() const { return SphereConfig{radius, eps_pole}; }
};

struct SwinBlock {
  Tensor ln1_g, ln1_b;
  Tensor qkv_w, qkv_b;    // [C, 3C], [3C]
  Tensor proj_w, proj_b;  // [C, C], [C]
  Tensor relpos;          // [(2w-1)^2, heads]
  Tensor ln2_g, ln2_b;
  Tensor mlp1_w, mlp1_b;  // [C, 4C], [4C]
  Tensor mlp2_w, mlp2_b;  // [4C, C], [C]
  bool shifted = false;
};

struct Encoder {
  std::size_t in_channels = 3;
  Tensor patch_w, patch_b;  // [in_ch * p^2, C], [C]
  std::vector<SwinBlock> blocks;
};

struct SphereBranch {
  Tensor w_align, b_align;  // [k, k], [k] with k = dim/2 - 1
  Tensor w_separ, b_separ;
};

struct Decoder {
  std::vector<SwinBlock> blocks;  // at fused_dim channels
  Tensor expand_w, expand_b;      // [fused_dim, 3 p^2], [3 p^2]
};

// raw channel halves and their spherical transforms, all [B, T, dim/2]
struct FeatureBundle {
  Tensor align_pre, separ_pre;
  Tensor align, separ;
};

struct Generator {
  ModelConfig cfg;
  Encoder enc_visible, enc_infrared;
  SphereBranch sph_visible, sph_infrared;
  Decoder dec;

  static Generator init(const ModelConfig& cfg, Rng& rng);
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::vector<Tensor> params() const;
};

struct RemovalOutput {
  Tensor clean;                       // [B, 3, H, W] in (0, 1)
  Tensor psi_visible, psi_infrared;   // encoder tokens [B, T, dim]
  FeatureBundle vis, inf;
};

// image [B, in_ch, H, W] -> tokens [B, T, dim]
Tensor encode(const Encoder& enc, const ModelConfig& cfg, const Tensor& image);

// tokens [B, T, dim] -> aligned/specific halves through the sphere transform
FeatureBundle decompose(const SphereBranch& br, const ModelConfig& cfg,
                        const Tensor& tokens);

// visible tokens [B, T, dim] + infrared aligned half [B, T, dim/2] -> image
Tensor fuse(const Decoder& dec, const ModelConfig& cfg,
            const Tensor& visible_hat, const Tensor& infrared_align_hat);

RemovalOutput remove_shadow(const Generator& g, const Tensor& visible,
                            const Tensor& infrared);

// building blocks, exposed for tests
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);
Tensor window_partition(const Tensor& grid_tokens, std::size_t win);
Tensor window_merge(const Tensor& windows, std::size_t batch, std::size_t grid,
                    std::size_t win);
Tensor swin_block_forward(const SwinBlock& blk, const ModelConfig& cfg,
                          const Tensor& tokens);

SwinBlock init_swin_block(std::size_t channels, std::size_t heads,
                          std::size_t win, bool shifted, Rng& rng);

}  // namespace deshadow
