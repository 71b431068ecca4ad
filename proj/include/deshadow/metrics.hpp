#pragma once
// Full-reference evaluation on [0,1] images: RMSE / PSNR / SSIM restricted to
// the shadow region, its complement, or the whole frame, plus no-reference
// Shannon entropy. Plain double arithmetic, no autodiff involvement.

#include <cstddef>
#include <string>
#include <vector>

#include "deshadow/tensor.hpp"

namespace deshadow {

enum class Region { Shadow, NonShadow, All };

// sqrt of the mean squared difference over region pixels and channels,
// reported on the 8-bit scale (x255)
double rmse_region(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                   Region region);

// 20*log10(255 / rmse); identical inputs give +infinity
double psnr_region(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                   Region region);

// mean SSIM (11x11 Gaussian window, sigma 1.5, c1=0.01^2, c2=0.03^2, per
// channel then averaged) over pixels whose window center lies in the region;
// windows near the frame edge are completed by mirror padding
double ssim_image(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                  Region region);

// Shannon entropy of the 256-bin luminance histogram, in [0,8] bits
double entropy(const Tensor& image);

struct EvalReport {
  std::size_t count = 0;
  double rmse_shadow = 0, rmse_nonshadow = 0, rmse_all = 0;
  double psnr_shadow = 0, psnr_nonshadow = 0, psnr_all = 0;
  double ssim_shadow = 0, ssim_nonshadow = 0, ssim_all = 0;
  double entropy_mean = 0;
};

// all metrics for one prediction/ground-truth/mask triple (count = 1)
EvalReport evaluate_pair(const Tensor& pred, const Tensor& gt,
                         const Tensor& mask);

// arithmetic mean of per-image reports; counts add up
EvalReport average_reports(const std::vector<EvalReport>& reports);

std::string eval_csv_header();
std::string eval_csv_line(const EvalReport& r);
// aligned table; notes the region-SSIM convention in its footer
std::string eval_table(const EvalReport& r);

}  // namespace deshadow
