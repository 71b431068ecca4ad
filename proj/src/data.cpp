#include "deshadow/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace deshadow {

namespace {

std::vector<unsigned char> read_png(const std::string& path, unsigned& w,
                                    unsigned& h, unsigned& channels) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DomainError("png: cannot open '" + path + "': " + img.message);
  }
  const bool color = PNG_IMAGE_PIXEL_CHANNELS(img.format) >= 3;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  channels = color ? 3u : 1u;
  w = img.width;
  h = img.height;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    throw DomainError("png: decode failed for '" + path + "': " + img.message);
  }
  return buf;
}

void write_png(const std::string& path, const unsigned char* interleaved,
               unsigned w, unsigned h, unsigned channels) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = w;
  img.height = h;
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, interleaved, 0,
                               nullptr)) {
    throw DomainError("png: write failed for '" + path + "': " + img.message);
  }
}

// inclusive-sum table: sums[y+1][x+1] = sum of mask[0..y][0..x]
std::vector<double> integral(const double* m, std::size_t h, std::size_t w) {
  std::vector<double> s((h + 1) * (w + 1), 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    double row = 0.0;
    for (std::size_t x = 0; x < w; ++x) {
      row += m[y * w + x];
      s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
    }
  }
  return s;
}

double window_sum(const std::vector<double>& s, std::size_t w, std::size_t r,
                  std::size_t c, std::size_t p) {
  const std::size_t W = w + 1;
  return s[(r + p) * W + c + p] - s[r * W + c + p] - s[(r + p) * W + c] +
         s[r * W + c];
}

Tensor crop3(const Tensor& img, std::size_t r, std::size_t c, std::size_t p) {
  const std::size_t H = img.shape()[1], W = img.shape()[2];
  const std::size_t C = img.shape()[0];
  std::vector<double> out(C * p * p);
  const double* src = img.data().data();
  for (std::size_t ch = 0; ch < C; ++ch) {
    for (std::size_t y = 0; y < p; ++y) {
      for (std::size_t x = 0; x < p; ++x) {
        out[(ch * p + y) * p + x] = src[(ch * H + r + y) * W + c + x];
      }
    }
  }
  return Tensor::from_data({C, p, p}, std::move(out));
}

Tensor gaussian5() {
  std::vector<double> k(25);
  double sum = 0.0;
  for (int y = -2; y <= 2; ++y) {
    for (int x = -2; x <= 2; ++x) {
      const double v = std::exp(-(x * x + y * y) / 2.0);
      k[(y + 2) * 5 + x + 2] = v;
      sum += v;
    }
  }
  for (double& v : k) v /= sum;
  return Tensor::from_data({1, 1, 5, 5}, std::move(k));
}

// ---- synthetic scene pieces -------------------------------------------

std::vector<double> value_noise(std::size_t size, std::size_t cells,
                                Rng& rng) {
  std::vector<double> lattice((cells + 1) * (cells + 1));
  for (double& v : lattice) v = rng.uniform(-1.0, 1.0);
  std::vector<double> out(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double fy = static_cast<double>(y) * cells / size;
      const double fx = static_cast<double>(x) * cells / size;
      const std::size_t iy = static_cast<std::size_t>(fy);
      const std::size_t ix = static_cast<std::size_t>(fx);
      const double ty = fy - iy, tx = fx - ix;
      auto at = [&](std::size_t yy, std::size_t xx) {
        return lattice[yy * (cells + 1) + xx];
      };
      out[y * size + x] = (1 - ty) * ((1 - tx) * at(iy, ix) +
                                      tx * at(iy, ix + 1)) +
                          ty * ((1 - tx) * at(iy + 1, ix) +
                                tx * at(iy + 1, ix + 1));
    }
  }
  return out;
}

std::vector<double> smooth_background(std::size_t size, Rng& rng) {
  std::vector<double> p(size * size, 0.0);
  for (int k = 0; k < 4; ++k) {
    const double fx = 1.0 + rng.index(3);
    const double fy = 1.0 + rng.index(3);
    const double amp = rng.uniform(0.5, 1.0);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        p[y * size + x] += amp * std::sin(6.283185307179586 *
                                              (fx * x + fy * y) / size +
                                          phase);
      }
    }
  }
  std::vector<double> v1 = value_noise(size, 8, rng);
  std::vector<double> v2 = value_noise(size, 16, rng);
  double mn = 1e300, mx = -1e300;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] += 1.2 * v1[i] + 0.5 * v2[i];
    mn = std::min(mn, p[i]);
    mx = std::max(mx, p[i]);
  }
  const double inv = mx > mn ? 1.0 / (mx - mn) : 0.0;
  for (double& v : p) v = (v - mn) * inv;
  return p;  // in [0,1]
}

// One blob anchored at a quadrant center, sized to overfill a half-size
// window slightly: that leaves both a dense window and, in the opposite
// quadrant, a clean one, which is exactly what the crop search needs.
std::vector<double> random_mask(std::size_t size, Rng& rng) {
  std::vector<double> m(size * size, 0.0);
  const double P = size / 2.0;
  const double cx = (rng.index(2) ? 0.75 : 0.25) * size +
                    rng.uniform(-0.015, 0.015) * size;
  const double cy = (rng.index(2) ? 0.75 : 0.25) * size +
                    rng.uniform(-0.015, 0.015) * size;
  const double c0 = rng.uniform(0.74, 0.78);  // window coverage to aim for
  if (rng.index(2) == 0) {  // rotated ellipse
    const double ab = c0 * P * P / 3.141592653589793;
    const double a = std::min(std::sqrt(ab * rng.uniform(0.85, 1.18)),
                              0.5 * P);
    const double b = ab / a;
    const double th = rng.uniform(0.0, 3.141592653589793);
    const double ct = std::cos(th), st = std::sin(th);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double u = (dx * ct + dy * st) / a;
        const double v = (-dx * st + dy * ct) / b;
        if (u * u + v * v <= 1.0) m[y * size + x] = 1.0;
      }
    }
  } else {  // near-regular polygon with jittered vertices
    const std::size_t n = 9 + rng.index(4);
    const double rbar = std::sqrt(
        c0 * P * P / (0.5 * n * std::sin(6.283185307179586 / n)));
    std::vector<double> px(n), py(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double ang =
          (k + rng.uniform(-0.15, 0.15)) * 6.283185307179586 / n;
      const double rad = std::min(rbar * rng.uniform(0.95, 1.05), 0.53 * P);
      px[k] = cx + rad * std::cos(ang);
      py[k] = cy + rad * std::sin(ang);
    }
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        bool inside = false;  // even-odd ray crossing
        for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
          const bool cross = (py[i] > y) != (py[j] > y);
          if (cross &&
              x < (px[j] - px[i]) * (y - py[i]) / (py[j] - py[i]) + px[i]) {
            inside = !inside;
          }
        }
        if (inside) m[y * size + x] = 1.0;
      }
    }
  }
  return m;
}

// a mask is usable when plenty of p-windows qualify on each side, so a
// random rejection search finds them quickly
bool mask_workable(const std::vector<double>& m, std::size_t size,
                   std::size_t p, double hi, double lo) {
  if (p > size) return false;
  std::vector<double> s = integral(m.data(), size, size);
  std::size_t n_hi = 0, n_lo = 0, total = 0;
  const double area = static_cast<double>(p) * p;
  for (std::size_t r = 0; r + p <= size; ++r) {
    for (std::size_t c = 0; c + p <= size; ++c) {
      const double cov = window_sum(s, size, r, c, p) / area;
      n_hi += cov >= hi;
      n_lo += cov <= lo;
      ++total;
    }
  }
  const std::size_t need = std::max<std::size_t>(1, total / 50);
  return n_hi >= need && n_lo >= need;
}

// L1 distance (in pixels) to the nearest unmasked pixel, via BFS
std::vector<int> interior_distance(const std::vector<double>& m,
                                   std::size_t size) {
  std::vector<int> dist(size * size, -1);
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] == 0.0) {
      dist[i] = 0;
      queue.push_back(i);
    }
  }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    const std::size_t y = i / size, x = i % size;
    const std::size_t nbr[4][2] = {{y, x + 1}, {y, x - 1}, {y + 1, x},
                                   {y - 1, x}};
    for (auto& [ny, nx] : nbr) {
      if (ny >= size || nx >= size) continue;  // unsigned wrap covers < 0
      const std::size_t j = ny * size + nx;
      if (dist[j] < 0) {
        dist[j] = dist[i] + 1;
        queue.push_back(j);
      }
    }
  }
  for (int& d : dist) {
    if (d < 0) d = static_cast<int>(2 * size);  // fully masked image
  }
  return dist;
}

}  // namespace

Tensor load_image(const std::string& path) {
  unsigned w = 0, h = 0, c = 0;
  std::vector<unsigned char> buf = read_png(path, w, h, c);
  std::vector<double> out(static_cast<std::size_t>(c) * h * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out[(ch * h + y) * w + x] = buf[(y * w + x) * c + ch] / 255.0;
      }
    }
  }
  return Tensor::from_data({c, h, w}, std::move(out));
}

Tensor load_mask(const std::string& path) {
  unsigned w = 0, h = 0, c = 0;
  std::vector<unsigned char> buf = read_png(path, w, h, c);
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      out[y * w + x] = buf[(y * w + x) * c] > 127 ? 1.0 : 0.0;
    }
  }
  return Tensor::from_data({1, h, w}, std::move(out));
}

void save_image(const std::string& path, const Tensor& img) {
  if (img.ndim() != 3 || (img.shape()[0] != 1 && img.shape()[0] != 3)) {
    throw ShapeError("save_image: expected [1|3,H,W], got " +
                     shape_str(img.shape()));
  }
  const std::size_t c = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
  std::vector<unsigned char> buf(c * h * w);
  const double* src = img.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double v = std::clamp(src[(ch * h + y) * w + x], 0.0, 1.0);
        buf[(y * w + x) * c + ch] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  write_png(path, buf.data(), static_cast<unsigned>(w),
            static_cast<unsigned>(h), static_cast<unsigned>(c));
}

CropPair crop_pair(const Tensor& visible, const Tensor& mask,
                   std::size_t patch, double coverage_hi, double coverage_lo,
                   Rng& rng) {
  if (visible.ndim() != 3 || mask.ndim() != 3 || mask.shape()[0] != 1 ||
      visible.shape()[1] != mask.shape()[1] ||
      visible.shape()[2] != mask.shape()[2]) {
    throw ShapeError("crop_pair: image " + shape_str(visible.shape()) +
                     " and mask " + shape_str(mask.shape()) + " disagree");
  }
  const std::size_t H = visible.shape()[1], W = visible.shape()[2];
  if (patch == 0 || patch > H || patch > W) {
    throw DomainError("crop_pair: patch size " + std::to_string(patch) +
                      " does not fit a " + std::to_string(H) + "x" +
                      std::to_string(W) + " image");
  }
  std::vector<double> sums = integral(mask.data().data(), H, W);
  const double area = static_cast<double>(patch) * patch;

  auto search = [&](bool want_shadow, std::size_t& row, std::size_t& col,
                    double& cov) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const std::size_t r = rng.index(H - patch + 1);
      const std::size_t c = rng.index(W - patch + 1);
      const double coverage = window_sum(sums, W, r, c, patch) / area;
      if (want_shadow ? coverage >= coverage_hi : coverage <= coverage_lo) {
        row = r;
        col = c;
        cov = coverage;
        return;
      }
    }
    throw DomainError(std::string("crop_pair: no ") +
                      (want_shadow ? "shadow" : "shadow-free") +
                      " window found after 1000 attempts");
  };

  CropPair out;
  search(true, out.shadow_row, out.shadow_col, out.shadow_coverage);
  search(false, out.free_row, out.free_col, out.free_coverage);
  out.shadow_patch = crop3(visible, out.shadow_row, out.shadow_col, patch);
  out.shadowfree_patch = crop3(visible, out.free_row, out.free_col, patch);
  return out;
}

Tensor pseudo_infrared(const Tensor& visible) {
  const bool batched = visible.ndim() == 4;
  if ((batched ? visible.shape()[1] : visible.shape()[0]) != 3 ||
      (!batched && visible.ndim() != 3)) {
    throw ShapeError("pseudo_infrared: expected [(B,)3,H,W], got " +
                     shape_str(visible.shape()));
  }
  Tensor x = batched ? visible
                     : reshape(visible, {1, 3, visible.shape()[1],
                                         visible.shape()[2]});
  Tensor lum = add(add(mul_scalar(slice(x, 1, 0, 1), 0.299),
                       mul_scalar(slice(x, 1, 1, 1), 0.587)),
                   mul_scalar(slice(x, 1, 2, 1), 0.114));
  Tensor blurred = conv2d(pad2d_reflect(lum, 2, 2, 2, 2), gaussian5(),
                          Tensor::zeros({1}), 1, 0);
  Tensor out = clamp01(pow_scalar(clamp01(blurred), 0.6));
  if (batched) return out;
  return reshape(out, {1, out.shape()[2], out.shape()[3]});
}

Tensor darkening_gamma(const Tensor& raw) {
  return add_scalar(mul_scalar(sigmoid(raw), 0.8), 0.1);
}

Tensor pseudo_shadow(const Tensor& patch, const Tensor& raw_gamma) {
  const bool batched = patch.ndim() == 4;
  if ((batched ? patch.shape()[1] : patch.shape()[0]) != 3 ||
      (!batched && patch.ndim() != 3) || raw_gamma.shape() != Shape{3}) {
    throw ShapeError("pseudo_shadow: expected patch [(B,)3,P,P] and 3 raw"
                     " darkening parameters");
  }
  Tensor x = batched
                 ? patch
                 : reshape(patch, {1, 3, patch.shape()[1], patch.shape()[2]});
  const std::size_t H = x.shape()[2], W = x.shape()[3];
  std::vector<double> ramp(H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x2 = 0; x2 < W; ++x2) {
      const std::size_t d =
          std::min(std::min(y, x2), std::min(H - 1 - y, W - 1 - x2));
      ramp[y * W + x2] = std::min<std::size_t>(d, 4) / 4.0;
    }
  }
  Tensor w = Tensor::from_data({1, 1, H, W}, std::move(ramp));
  Tensor gamma = reshape(darkening_gamma(raw_gamma), {3, 1, 1});
  Tensor factor = sub(Tensor::ones({1, 1, 1, 1}),
                      mul(w, sub(Tensor::ones({3, 1, 1}), gamma)));
  Tensor out = mul(x, factor);
  if (batched) return out;
  return reshape(out, {3, H, W});
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DomainError("manifest: cannot open '" + path + "'");
  DatasetManifest m;
  m.dir = fs::path(path).parent_path().string();
  if (m.dir.empty()) m.dir = ".";
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ManifestEntry e;
    const auto t1 = line.find('\t');
    if (t1 == std::string::npos) {
      throw DomainError("manifest: line " + std::to_string(lineno) +
                        " needs image<TAB>mask");
    }
    e.image = line.substr(0, t1);
    const auto t2 = line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      e.mask = line.substr(t1 + 1);
    } else {
      e.mask = line.substr(t1 + 1, t2 - t1 - 1);
      e.infrared = line.substr(t2 + 1);
    }
    for (const std::string* p : {&e.image, &e.mask, &e.infrared}) {
      if (!p->empty() && !fs::exists(fs::path(m.dir) / *p)) {
        throw DomainError("manifest: missing file '" + *p + "' (line " +
                          std::to_string(lineno) + ")");
      }
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

DatasetManifest synth_dataset(const std::string& out_dir, std::size_t count,
                              std::size_t size, std::uint64_t seed) {
  fs::create_directories(out_dir);
  Rng master(seed);
  DatasetManifest m;
  m.dir = out_dir;
  m.seed = seed;
  std::string manifest_text;
  char name[64];

  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = master.fork(i);

    const std::size_t hw = size * size;
    std::vector<double> pat = smooth_background(size, rng);
    std::vector<double> gt8(3 * hw);
    for (int c = 0; c < 3; ++c) {
      const double base = rng.uniform(0.25, 0.35);
      const double gain = rng.uniform(0.45, 0.6);
      for (std::size_t p = 0; p < hw; ++p) {
        gt8[c * hw + p] =
            std::lround(std::clamp(base + gain * pat[p], 0.0, 1.0) * 255.0);
      }
    }

    // draw masks until the crop search has room to work and the shadowed
    // region really is darker on average than the rest
    std::vector<double> mask, f8(hw), sh8(3 * hw), mask8(hw);
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      mask = random_mask(size, rng);
      if (!mask_workable(mask, size, size / 2, 0.7, 0.02)) continue;

      // darkening field: interior factor in [0.3, 0.6], 2-pixel soft edge;
      // quantize the field and ground truth first so the shadow image
      // recomposes from the stored 8-bit files within one gray level
      std::vector<int> dist = interior_distance(mask, size);
      const double d0 = rng.uniform(0.35, 0.55);
      const double freq = 1.0 + rng.index(2);
      const double phase = rng.uniform(0.0, 6.283185307179586);
      for (std::size_t p = 0; p < hw; ++p) {
        double field = 1.0;
        if (mask[p] != 0.0) {
          const std::size_t y = p / size, x = p % size;
          const double mod = 0.05 * std::sin(6.283185307179586 * freq *
                                                 (x + y) / size +
                                             phase);
          const double dk = std::clamp(d0 + mod, 0.3, 0.6);
          field = 1.0 - std::min(dist[p], 2) / 2.0 * (1.0 - dk);
        }
        f8[p] = std::lround(field * 255.0);
        mask8[p] = mask[p] * 255.0;
      }
      double in_sum = 0.0, out_sum = 0.0, in_n = 0.0, out_n = 0.0;
      for (int c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < hw; ++p) {
          sh8[c * hw + p] = std::lround(gt8[c * hw + p] * f8[p] / 255.0);
          (mask[p] != 0.0 ? in_sum : out_sum) += sh8[c * hw + p];
          (mask[p] != 0.0 ? in_n : out_n) += 1.0;
        }
      }
      ok = in_sum * out_n < out_sum * in_n;
    }
    if (!ok) {
      throw DomainError("synth_dataset: could not draw a usable mask");
    }

    auto dump = [&](const char* prefix, const std::vector<double>& bytes,
                    std::size_t channels) {
      std::snprintf(name, sizeof name, "%s_%04zu.png", prefix, i);
      std::vector<double> scaled(bytes.size());
      for (std::size_t p = 0; p < bytes.size(); ++p) {
        scaled[p] = bytes[p] / 255.0;
      }
      save_image((fs::path(out_dir) / name).string(),
                 Tensor::from_data({channels, size, size}, std::move(scaled)));
      return std::string(name);
    };
    const std::string img_name = dump("img", sh8, 3);
    const std::string mask_name = dump("mask", mask8, 1);
    dump("gt", gt8, 3);
    dump("field", f8, 1);

    m.entries.push_back({img_name, mask_name, ""});
    manifest_text += img_name + "\t" + mask_name + "\n";
  }

  std::ofstream out(fs::path(out_dir) / "manifest.txt");
  out << manifest_text;
  if (!out) throw DomainError("synth_dataset: manifest write failed");
  return m;
}

ShadowSample make_sample(const DatasetManifest& m, std::size_t index,
                         std::size_t patch, double coverage_hi,
                         double coverage_lo, Rng& rng) {
  if (index >= m.entries.size()) {
    throw DomainError("make_sample: index out of range");
  }
  const ManifestEntry& e = m.entries[index];
  ShadowSample s;
  s.visible = load_image((fs::path(m.dir) / e.image).string());
  if (s.visible.shape()[0] != 3) {
    throw DomainError("make_sample: visible image must be RGB: " + e.image);
  }
  s.mask = load_mask((fs::path(m.dir) / e.mask).string());
  if (s.mask.shape()[1] != s.visible.shape()[1] ||
      s.mask.shape()[2] != s.visible.shape()[2]) {
    throw DomainError("make_sample: image and mask dimensions differ: " +
                      e.image);
  }
  if (e.infrared.empty()) {
    s.infrared = pseudo_infrared(s.visible);
  } else {
    s.infrared = load_image((fs::path(m.dir) / e.infrared).string());
    if (s.infrared.shape()[0] != 1 ||
        s.infrared.shape()[1] != s.visible.shape()[1] ||
        s.infrared.shape()[2] != s.visible.shape()[2]) {
      throw DomainError("make_sample: infrared must be single-channel and"
                        " match the visible size: " + e.infrared);
    }
  }
  CropPair pair = crop_pair(s.visible, s.mask, patch, coverage_hi, coverage_lo,
                            rng);
  s.shadow_patch = pair.shadow_patch;
  s.shadowfree_patch = pair.shadowfree_patch;
  s.shadow_row = pair.shadow_row;
  s.shadow_col = pair.shadow_col;
  s.free_row = pair.free_row;
  s.free_col = pair.free_col;
  return s;
}

}  // namespace deshadow
