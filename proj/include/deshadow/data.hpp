#pragma once
// Weakly supervised data plumbing: PNG image/mask I/O, rejection-sampled
// shadow / shadow-free patch pairs, the pseudo-infrared and pseudo-shadow
// surrogates, and a small synthetic dataset generator used by the training
// smoke tests.

#include <cstdint>
#include <string>
#include <vector>

#include "deshadow/rng.hpp"
#include "deshadow/tensor.hpp"

namespace deshadow {

// 8-bit PNG -> [C,H,W] in [0,1]; C follows the file (3 for color, 1 for gray)
Tensor load_image(const std::string& path);
// grayscale or color PNG -> [1,H,W] binarized at 0.5 (255 = shadow)
Tensor load_mask(const std::string& path);
// [1|3,H,W] in [0,1] -> 8-bit PNG
void save_image(const std::string& path, const Tensor& img);

struct CropPair {
  Tensor shadow_patch;      // [3,P,P], mask coverage >= hi
  Tensor shadowfree_patch;  // [3,P,P], mask coverage <= lo
  std::size_t shadow_row = 0, shadow_col = 0;
  std::size_t free_row = 0, free_col = 0;
  double shadow_coverage = 0.0, free_coverage = 0.0;
};

// rejection-samples windows (max 1000 attempts per kind)
CropPair crop_pair(const Tensor& visible, const Tensor& mask,
                   std::size_t patch, double coverage_hi, double coverage_lo,
                   Rng& rng);

// visible [(B,)3,H,W] -> [(B,)1,H,W]: luminance, 5x5 Gaussian blur (sigma 1),
// gamma lift x^0.6; differentiable, constant-preserving at borders
Tensor pseudo_infrared(const Tensor& visible);

// sigmoid reparameterization of the raw darkening parameters into (0.1, 0.9)
Tensor darkening_gamma(const Tensor& raw);

// patch [(B,)3,P,P] darkened per channel by gamma(raw), with a 4-pixel linear
// penumbra ramp at the patch border; differentiable in raw
Tensor pseudo_shadow(const Tensor& patch, const Tensor& raw_gamma);

struct ManifestEntry {
  std::string image;
  std::string mask;
  std::string infrared;  // empty -> synthesize from the visible image
};

struct DatasetManifest {
  std::string dir;  // entries are relative to this
  std::vector<ManifestEntry> entries;
  std::string split = "train";
  std::uint64_t seed = 0;
};

// one tab-separated record per line: image<TAB>mask[<TAB>infrared]
DatasetManifest load_manifest(const std::string& path);

// writes count shadowed images with masks, pre-shadow ground truth, and the
// darkening fields (img/mask/gt/field_%04d.png) plus a manifest; the same
// seed reproduces the files bit for bit
DatasetManifest synth_dataset(const std::string& out_dir, std::size_t count,
                              std::size_t size, std::uint64_t seed);

struct ShadowSample {
  Tensor visible;   // [3,H,W]
  Tensor mask;      // [1,H,W] in {0,1}
  Tensor infrared;  // [1,H,W]
  Tensor shadow_patch;
  Tensor shadowfree_patch;
  std::size_t shadow_row = 0, shadow_col = 0;
  std::size_t free_row = 0, free_col = 0;
};

// loads one manifest entry and draws its patch pair
ShadowSample make_sample(const DatasetManifest& m, std::size_t index,
                         std::size_t patch, double coverage_hi,
                         double coverage_lo, Rng& rng);

}  // namespace deshadow
