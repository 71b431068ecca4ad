#include "deshadow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace deshadow {

namespace {

void check_triple(const Tensor& pred, const Tensor& gt, const Tensor& mask) {
  if (pred.ndim() != 3 || pred.shape() != gt.shape()) {
    throw ShapeError("metrics: prediction " + shape_str(pred.shape()) +
                     " and reference " + shape_str(gt.shape()) +
                     " must be equal [C,H,W]");
  }
  if (mask.ndim() != 3 || mask.shape()[0] != 1 ||
      mask.shape()[1] != pred.shape()[1] ||
      mask.shape()[2] != pred.shape()[2]) {
    throw ShapeError("metrics: mask " + shape_str(mask.shape()) +
                     " does not match image " + shape_str(pred.shape()));
  }
}

bool selected(Region region, double mask_value) {
  switch (region) {
    case Region::Shadow: return mask_value != 0.0;
    case Region::NonShadow: return mask_value == 0.0;
    default: return true;
  }
}

std::size_t reflect(std::ptrdiff_t k, std::size_t n) {
  if (k < 0) k = -k;
  if (k >= static_cast<std::ptrdiff_t>(n)) {
    k = 2 * static_cast<std::ptrdiff_t>(n) - 2 - k;
  }
  return static_cast<std::size_t>(k);
}

const double* gaussian11() {
  static double k[121];
  static bool ready = false;
  if (!ready) {
    double sum = 0.0;
    for (int y = -5; y <= 5; ++y) {
      for (int x = -5; x <= 5; ++x) {
        const double v = std::exp(-(x * x + y * y) / (2.0 * 1.5 * 1.5));
        k[(y + 5) * 11 + x + 5] = v;
        sum += v;
      }
    }
    for (double& v : k) v /= sum;
    ready = true;
  }
  return k;
}

// per-pixel SSIM with mirror-completed windows, laid out like the image
std::vector<double> ssim_map(const Tensor& pred, const Tensor& gt) {
  const std::size_t C = pred.shape()[0], H = pred.shape()[1],
                    W = pred.shape()[2];
  const double* a = pred.data().data();
  const double* b = gt.data().data();
  const double* k = gaussian11();
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> map(C * H * W);
  for (std::size_t c = 0; c < C; ++c) {
    const double* ac = a + c * H * W;
    const double* bc = b + c * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double ma = 0, mb = 0, eaa = 0, ebb = 0, eab = 0;
        for (int dy = -5; dy <= 5; ++dy) {
          const std::size_t sy = reflect(std::ptrdiff_t(y) + dy, H);
          for (int dx = -5; dx <= 5; ++dx) {
            const std::size_t sx = reflect(std::ptrdiff_t(x) + dx, W);
            const double kw = k[(dy + 5) * 11 + dx + 5];
            const double av = ac[sy * W + sx];
            const double bv = bc[sy * W + sx];
            ma += kw * av;
            mb += kw * bv;
            eaa += kw * (av * av);
            ebb += kw * (bv * bv);
            eab += kw * (av * bv);
          }
        }
        const double va = eaa - ma * ma;
        const double vb = ebb - mb * mb;
        const double cab = eab - ma * mb;
        map[(c * H + y) * W + x] = ((2 * (ma * mb) + c1) * (2 * cab + c2)) /
                                   ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
    }
  }
  return map;
}

double region_mean(const std::vector<double>& map, const Tensor& mask,
                   std::size_t C, Region region) {
  const double* m = mask.data().data();
  const std::size_t hw = mask.shape()[1] * mask.shape()[2];
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < C; ++c) {
    double ch = 0.0;
    std::size_t cn = 0;
    for (std::size_t p = 0; p < hw; ++p) {
      if (!selected(region, m[p])) continue;
      ch += map[c * hw + p];
      ++cn;
    }
    if (cn == 0) throw DomainError("metrics: empty region");
    acc += ch / double(cn);
    n = cn;
  }
  (void)n;
  return acc / double(C);
}

}  // namespace

double rmse_region(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                   Region region) {
  check_triple(pred, gt, mask);
  const std::size_t C = pred.shape()[0];
  const std::size_t hw = pred.shape()[1] * pred.shape()[2];
  const double* a = pred.data().data();
  const double* b = gt.data().data();
  const double* m = mask.data().data();
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < hw; ++p) {
    if (!selected(region, m[p])) continue;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = a[c * hw + p] - b[c * hw + p];
      acc += d * d;
    }
    ++n;
  }
  if (n == 0) throw DomainError("metrics: empty region");
  return std::sqrt(acc / double(n * C)) * 255.0;
}

double psnr_region(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                   Region region) {
  const double r = rmse_region(pred, gt, mask, region);
  if (r == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(255.0 / r);
}

double ssim_image(const Tensor& pred, const Tensor& gt, const Tensor& mask,
                  Region region) {
  check_triple(pred, gt, mask);
  return region_mean(ssim_map(pred, gt), mask, pred.shape()[0], region);
}

double entropy(const Tensor& image) {
  if (image.ndim() != 3 ||
      (image.shape()[0] != 1 && image.shape()[0] != 3)) {
    throw ShapeError("entropy: expected [1|3,H,W], got " +
                     shape_str(image.shape()));
  }
  const std::size_t hw = image.shape()[1] * image.shape()[2];
  const double* v = image.data().data();
  std::vector<std::size_t> hist(256, 0);
  for (std::size_t p = 0; p < hw; ++p) {
    const double lum = image.shape()[0] == 1
                           ? v[p]
                           : 0.299 * v[p] + 0.587 * v[hw + p] +
                                 0.114 * v[2 * hw + p];
    ++hist[std::lround(std::clamp(lum, 0.0, 1.0) * 255.0)];
  }
  double h = 0.0;
  for (std::size_t count : hist) {
    if (count == 0) continue;
    const double p = double(count) / double(hw);
    h -= p * std::log2(p);
  }
  return h;
}

EvalReport evaluate_pair(const Tensor& pred, const Tensor& gt,
                         const Tensor& mask) {
  check_triple(pred, gt, mask);
  EvalReport r;
  r.count = 1;
  r.rmse_shadow = rmse_region(pred, gt, mask, Region::Shadow);
  r.rmse_nonshadow = rmse_region(pred, gt, mask, Region::NonShadow);
  r.rmse_all = rmse_region(pred, gt, mask, Region::All);
  auto psnr = [](double rmse) {
    return rmse == 0.0 ? std::numeric_limits<double>::infinity()
                       : 20.0 * std::log10(255.0 / rmse);
  };
  r.psnr_shadow = psnr(r.rmse_shadow);
  r.psnr_nonshadow = psnr(r.rmse_nonshadow);
  r.psnr_all = psnr(r.rmse_all);
  std::vector<double> map = ssim_map(pred, gt);
  const std::size_t C = pred.shape()[0];
  r.ssim_shadow = region_mean(map, mask, C, Region::Shadow);
  r.ssim_nonshadow = region_mean(map, mask, C, Region::NonShadow);
  r.ssim_all = region_mean(map, mask, C, Region::All);
  r.entropy_mean = entropy(pred);
  return r;
}

EvalReport average_reports(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw DomainError("average_reports: nothing to average");
  EvalReport out;
  for (const EvalReport& r : reports) {
    out.count += r.count;
    out.rmse_shadow += r.rmse_shadow;
    out.rmse_nonshadow += r.rmse_nonshadow;
    out.rmse_all += r.rmse_all;
    out.psnr_shadow += r.psnr_shadow;
    out.psnr_nonshadow += r.psnr_nonshadow;
    out.psnr_all += r.psnr_all;
    out.ssim_shadow += r.ssim_shadow;
    out.ssim_nonshadow += r.ssim_nonshadow;
    out.ssim_all += r.ssim_all;
    out.entropy_mean += r.entropy_mean;
  }
  const double n = double(reports.size());
  out.rmse_shadow /= n;
  out.rmse_nonshadow /= n;
  out.rmse_all /= n;
  out.psnr_shadow /= n;
  out.psnr_nonshadow /= n;
  out.psnr_all /= n;
  out.ssim_shadow /= n;
  out.ssim_nonshadow /= n;
  out.ssim_all /= n;
  out.entropy_mean /= n;
  return out;
}

std::string eval_csv_header() {
  return "images,rmse_shadow,rmse_nonshadow,rmse_all,psnr_shadow,"
         "psnr_nonshadow,psnr_all,ssim_shadow,ssim_nonshadow,ssim_all,"
         "entropy";
}

std::string eval_csv_line(const EvalReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,"
                "%.10g",
                r.count, r.rmse_shadow, r.rmse_nonshadow, r.rmse_all,
                r.psnr_shadow, r.psnr_nonshadow, r.psnr_all, r.ssim_shadow,
                r.ssim_nonshadow, r.ssim_all, r.entropy_mean);
  return buf;
}

std::string eval_table(const EvalReport& r) {
  char buf[1024];
  std::snprintf(
      buf, sizeof buf,
      "metric        shadow  non-shadow         all\n"
      "rmse      %10.4f  %10.4f  %10.4f\n"
      "psnr      %10.4f  %10.4f  %10.4f\n"
      "ssim      %10.4f  %10.4f  %10.4f\n"
      "entropy   %10.4f  (luminance, 256 bins)\n"
      "images    %10zu\n"
      "note: ssim uses 11x11 gaussian windows (sigma 1.5) centered on region"
      " pixels,\n      mirror-completed at the frame edge\n",
      r.rmse_shadow, r.rmse_nonshadow, r.rmse_all, r.psnr_shadow,
      r.psnr_nonshadow, r.psnr_all, r.ssim_shadow, r.ssim_nonshadow,
      r.ssim_all, r.entropy_mean, r.count);
  return buf;
}

}  // namespace deshadow
