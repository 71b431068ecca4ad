#include "deshadow/losses.hpp"

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace deshadow {

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;
constexpr std::size_t kWin = 11;

// [C,N] / [C,H,W] / [B,C,H,W] -> [B, C, N]
Tensor to_batched_rows(const Tensor& feat, bool& had_batch) {
  const Shape& s = feat.shape();
  had_batch = s.size() == 4;
  if (s.size() == 2) return reshape(feat, {1, s[0], s[1]});
  if (s.size() == 3) return reshape(feat, {1, s[0], s[1] * s[2]});
  if (s.size() == 4) return reshape(feat, {s[0], s[1], s[2] * s[3]});
  throw ShapeError("gram: expected rank 2..4, got " + shape_str(s));
}

Tensor gaussian_kernel11() {
  const double sigma = 1.5;
  std::vector<double> k(kWin * kWin);
  double sum = 0.0;
  for (std::size_t y = 0; y < kWin; ++y) {
    for (std::size_t x = 0; x < kWin; ++x) {
      const double dy = static_cast<double>(y) - 5.0;
      const double dx = static_cast<double>(x) - 5.0;
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      k[y * kWin + x] = v;
      sum += v;
    }
  }
  for (double& v : k) v /= sum;
  return Tensor::from_data({1, 1, kWin, kWin}, std::move(k));
}

// per-map min-max rescale to [0,1]; constant maps pass through untouched
Tensor minmax_normalize(const Tensor& x) {
  const std::size_t M = x.shape()[0];
  Tensor mx = reduce(Reduce::Max, x, {2, 3}, true);
  Tensor mn = neg(reduce(Reduce::Max, neg(x), {2, 3}, true));
  Tensor range = sub(mx, mn);
  std::vector<double> gate(M);
  for (std::size_t i = 0; i < M; ++i) gate[i] = range.at(i) > 1e-12 ? 1.0 : 0.0;
  Tensor g = Tensor::from_data({M, 1, 1, 1}, gate);
  Tensor inv_ok = div(g, add(range, sub(Tensor::ones({M, 1, 1, 1}), g)));
  // gated blend: normalized where the range is usable, identity elsewhere
  return add(mul(sub(x, mn), inv_ok),
             mul(x, sub(Tensor::ones({M, 1, 1, 1}), g)));
}

Tensor ssim_mean(const Tensor& a, const Tensor& b) {
  const std::size_t H = a.shape()[2], W = a.shape()[3];
  Tensor mu_a, mu_b, e_aa, e_bb, e_ab;
  if (H >= kWin && W >= kWin) {
    Tensor k = gaussian_kernel11();
    Tensor zb = Tensor::zeros({1});
    auto smooth = [&](const Tensor& t) { return conv2d(t, k, zb, 1, 0); };
    mu_a = smooth(a);
    mu_b = smooth(b);
    e_aa = smooth(mul(a, a));
    e_bb = smooth(mul(b, b));
    e_ab = smooth(mul(a, b));
  } else {  // too small for a sliding window: one global window
    auto stat = [&](const Tensor& t) {
      return reduce(Reduce::Mean, t, {2, 3}, true);
    };
    mu_a = stat(a);
    mu_b = stat(b);
    e_aa = stat(mul(a, a));
    e_bb = stat(mul(b, b));
    e_ab = stat(mul(a, b));
  }
  Tensor va = sub(e_aa, mul(mu_a, mu_a));
  Tensor vb = sub(e_bb, mul(mu_b, mu_b));
  Tensor cab = sub(e_ab, mul(mu_a, mu_b));
  Tensor num = mul(add_scalar(mul_scalar(mul(mu_a, mu_b), 2.0), kC1),
                   add_scalar(mul_scalar(cab, 2.0), kC2));
  Tensor den = mul(add_scalar(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), kC1),
                   add_scalar(add(va, vb), kC2));
  return mean_all(div(num, den));
}

Tensor weighted(const Tensor& t, double w) {
  return w == 1.0 ? t : mul_scalar(t, w);
}

}  // namespace

Tensor gram(const Tensor& feat) {
  if (feat.size() == 0) throw ShapeError("gram: empty feature map");
  bool had_batch = false;
  Tensor f = to_batched_rows(feat, had_batch);
  const std::size_t n = f.shape()[2];
  Tensor g = mul_scalar(matmul(f, permute(f, {0, 2, 1})),
                        1.0 / static_cast<double>(n));
  if (had_batch) return g;
  return reshape(g, {g.shape()[1], g.shape()[2]});
}

Tensor orthogonality_loss(const Tensor& align, const Tensor& separ,
                          bool normalized) {
  if (align.shape() != separ.shape()) {
    throw ShapeError("orthogonality_loss: feature shapes differ: " +
                     shape_str(align.shape()) + " vs " +
                     shape_str(separ.shape()));
  }
  Tensor ga = gram(align);
  Tensor gs = gram(separ);
  if (ga.ndim() == 2) {
    ga = reshape(ga, {1, ga.shape()[0], ga.shape()[1]});
    gs = reshape(gs, {1, gs.shape()[0], gs.shape()[1]});
  }
  Tensor inner = reduce(Reduce::Sum, mul(ga, gs), {1, 2});
  if (!normalized) return mean_all(inner);
  Tensor na = sqrt(reduce(Reduce::Sum, mul(ga, ga), {1, 2}));
  Tensor ns = sqrt(reduce(Reduce::Sum, mul(gs, gs), {1, 2}));
  return mean_all(div(abs(inner), add_scalar(mul(na, ns), 1e-12)));
}

Tensor ssim_loss(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("ssim_loss: shapes differ: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  const Shape& s = a.shape();
  Shape maps;  // [M,1,H,W]
  if (s.size() == 2) {
    maps = {s[0], 1, 1, s[1]};
  } else if (s.size() == 3) {
    maps = {s[0], 1, s[1], s[2]};
  } else if (s.size() == 4) {
    maps = {s[0] * s[1], 1, s[2], s[3]};
  } else {
    throw ShapeError("ssim_loss: expected rank 2..4, got " + shape_str(s));
  }
  Tensor na = minmax_normalize(reshape(a, maps));
  Tensor nb = minmax_normalize(reshape(b, maps));
  return add_scalar(neg(ssim_mean(na, nb)), 1.0);
}

Tensor identity_loss(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("identity_loss: shapes differ: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  return mean_all(abs(sub(a, b)));
}

Discriminator Discriminator::init(std::size_t in_channels, Rng& rng) {
  const double sd = 0.02;
  Discriminator d;
  d.in_channels = in_channels;
  const std::size_t chans[] = {in_channels, 16, 32, 64, 1};
  for (int i = 0; i < 4; ++i) {
    d.conv_w.push_back(
        Tensor::randn({chans[i + 1], chans[i], 3, 3}, rng, sd, true));
    d.conv_b.push_back(Tensor::zeros({chans[i + 1]}, true));
  }
  return d;
}

std::vector<std::pair<std::string, Tensor>> Discriminator::named_params()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < conv_w.size(); ++i) {
    out.emplace_back("disc.conv" + std::to_string(i) + ".w", conv_w[i]);
    out.emplace_back("disc.conv" + std::to_string(i) + ".b", conv_b[i]);
  }
  return out;
}

std::vector<Tensor> Discriminator::params() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

Tensor disc_logits(const Discriminator& d, const Tensor& image) {
  if (image.ndim() != 4 || image.shape()[1] != d.in_channels) {
    throw ShapeError("discriminator: expected [B," +
                     std::to_string(d.in_channels) + ",H,W], got " +
                     shape_str(image.shape()));
  }
  Tensor h = image;
  for (int i = 0; i < 3; ++i) {
    h = leaky_relu(conv2d(h, d.conv_w[i], d.conv_b[i], 2, 1), 0.2);
  }
  return conv2d(h, d.conv_w[3], d.conv_b[3], 1, 1);
}

Tensor disc_forward(const Discriminator& d, const Tensor& image) {
  return sigmoid(disc_logits(d, image));
}

AdvPair adversarial_losses(const Tensor& fake, const Tensor& real,
                           const Discriminator& d) {
  for (const Tensor* t : {&fake, &real}) {
    for (double v : t->data()) {
      if (v < -1e-9 || v > 1.0 + 1e-9) {
        throw DomainError("adversarial_losses: images must lie in [0,1]");
      }
    }
  }
  // log D = -softplus(-z) and log(1-D) = -softplus(z) keep the logs exact
  // even where a sigmoid would round to 0 or 1
  Tensor zf = disc_logits(d, fake);
  Tensor zr = disc_logits(d, real);
  AdvPair out;
  out.generator = mean_all(softplus(neg(zf)));
  out.discriminator =
      add(mean_all(softplus(neg(zr))), mean_all(softplus(zf)));
  return out;
}

Tensor tokens_to_map(const Tensor& tokens, std::size_t grid) {
  const Shape& s = tokens.shape();
  if (s.size() != 3 || s[1] != grid * grid) {
    throw ShapeError("tokens_to_map: expected [B," +
                     std::to_string(grid * grid) + ",C], got " + shape_str(s));
  }
  return permute(reshape(tokens, {s[0], grid, grid, s[2]}), {0, 3, 1, 2});
}

LossReport LossBundle::report() const {
  LossReport r;
  r.ort_visible = ort_visible.item();
  r.ort_infrared = ort_infrared.item();
  r.sim = sim.item();
  r.adv_generator = adv_generator.item();
  r.adv_discriminator =
      adv_discriminator.defined() ? adv_discriminator.item() : 0.0;
  r.ide = ide.item();
  r.total = total.item();
  return r;
}

LossBundle total_loss(const StepInputs& in, const Discriminator& d,
                      const LossOptions& opt) {
  const std::size_t g = in.cfg.grid();
  const Tensor& va = opt.use_post_transform ? in.vis.align : in.vis.align_pre;
  const Tensor& vs = opt.use_post_transform ? in.vis.separ : in.vis.separ_pre;
  const Tensor& ia = opt.use_post_transform ? in.inf.align : in.inf.align_pre;
  const Tensor& is = opt.use_post_transform ? in.inf.separ : in.inf.separ_pre;
  Tensor map_va = tokens_to_map(va, g);
  Tensor map_vs = tokens_to_map(vs, g);
  Tensor map_ia = tokens_to_map(ia, g);
  Tensor map_is = tokens_to_map(is, g);

  LossBundle out;
  out.ort_visible =
      weighted(orthogonality_loss(map_va, map_vs, opt.ort_normalized),
               opt.w_ort);
  out.ort_infrared =
      weighted(orthogonality_loss(map_ia, map_is, opt.ort_normalized),
               opt.w_ort);
  out.sim = weighted(ssim_loss(map_va, map_ia), opt.w_sim);

  const Tensor& fake = in.pseudo_shadow;
  const Tensor& real = opt.swap_adv_roles ? in.clean : in.shadow_patch;
  out.adv_generator =
      weighted(mean_all(softplus(neg(disc_logits(d, fake)))), opt.w_adv);
  if (opt.with_discriminator) {
    out.adv_discriminator =
        adversarial_losses(fake.detach(), real.detach(), d).discriminator;
  }

  out.ide = add(weighted(identity_loss(in.pseudo_shadow, in.shadow_patch),
                         opt.w_ide),
                weighted(identity_loss(in.clean, in.shadow_free), opt.w_rec));

  out.total = add(add(add(out.ort_visible, out.ort_infrared),
                      add(out.sim, out.adv_generator)),
                  out.ide);
  return out;
}

std::string loss_csv_header() {
  return "step,ort_visible,ort_infrared,sim,adv_generator,adv_discriminator,"
         "ide,total";
}

std::string loss_csv_line(std::size_t step, const LossReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", step,
                r.ort_visible, r.ort_infrared, r.sim, r.adv_generator,
                r.adv_discriminator, r.ide, r.total);
  return buf;
}

}  // namespace deshadow
