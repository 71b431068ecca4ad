#include "deshadow/model.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace deshadow {

namespace {

// region labels for the shifted-window attention mask: positions are graded
// by the standard three slices per axis, and only same-label pairs within a
// window may attend (this isolates content that wrapped around in the roll)
Tensor build_shift_mask(std::size_t batch, std::size_t grid, std::size_t win,
                        std::size_t shift) {
  const std::size_t nw_side = grid / win;
  const std::size_t nw = nw_side * nw_side;
  const std::size_t tw = win * win;
  auto region = [&](std::size_t v) {
    if (v < grid - win) return 0;
    if (v < grid - shift) return 1;
    return 2;
  };
  std::vector<int> label(grid * grid);
  for (std::size_t i = 0; i < grid; ++i) {
    for (std::size_t j = 0; j < grid; ++j) {
      label[i * grid + j] = 3 * region(i) + region(j);
    }
  }
  std::vector<double> mask(nw * tw * tw);
  for (std::size_t wy = 0; wy < nw_side; ++wy) {
    for (std::size_t wx = 0; wx < nw_side; ++wx) {
      const std::size_t wi = wy * nw_side + wx;
      for (std::size_t a = 0; a < tw; ++a) {
        const int la = label[(wy * win + a / win) * grid + wx * win + a % win];
        for (std::size_t b = 0; b < tw; ++b) {
          const int lb =
              label[(wy * win + b / win) * grid + wx * win + b % win];
          mask[(wi * tw + a) * tw + b] = la == lb ? 0.0 : -1e9;
        }
      }
    }
  }
  std::vector<double> tiled(batch * nw * tw * tw);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(mask.begin(), mask.end(), tiled.begin() + b * mask.size());
  }
  return Tensor::from_data({batch * nw, 1, tw, tw}, std::move(tiled));
}

// cyclic shift of the two grid axes of [B, G, G, C]
Tensor roll_grid(const Tensor& x, std::ptrdiff_t sh, std::ptrdiff_t sw) {
  const Shape& s = x.shape();
  const std::size_t B = s[0], G = s[1], C = s[3];
  Tensor a = reshape(x, {B, G, G * C});
  a = roll2d(a, sh, 0);
  Tensor b = reshape(a, {B * G, G, C});
  b = roll2d(b, sw, 0);
  return reshape(b, {B, G, G, C});
}

std::vector<std::size_t> relpos_rows(std::size_t win) {
  const std::size_t tw = win * win;
  const std::size_t span = 2 * win - 1;
  std::vector<std::size_t> rows(tw * tw);
  for (std::size_t i = 0; i < tw; ++i) {
    const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i / win);
    const std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(i % win);
    for (std::size_t j = 0; j < tw; ++j) {
      const std::ptrdiff_t dy = yi - static_cast<std::ptrdiff_t>(j / win) +
                                static_cast<std::ptrdiff_t>(win) - 1;
      const std::ptrdiff_t dx = xi - static_cast<std::ptrdiff_t>(j % win) +
                                static_cast<std::ptrdiff_t>(win) - 1;
      rows[i * tw + j] = static_cast<std::size_t>(dy) * span +
                         static_cast<std::size_t>(dx);
    }
  }
  return rows;
}

Tensor window_attention(const SwinBlock& blk, std::size_t heads,
                        std::size_t win, const Tensor& xw,
                        const Tensor* mask) {
  const std::size_t nw = xw.shape()[0];
  const std::size_t tw = xw.shape()[1];
  const std::size_t c = xw.shape()[2];
  const std::size_t d = c / heads;
  Tensor qkv = add(matmul(xw, blk.qkv_w), blk.qkv_b);
  auto split_heads = [&](Tensor t) {
    return permute(reshape(t, {nw, tw, heads, d}), {0, 2, 1, 3});
  };
  Tensor q = mul_scalar(split_heads(slice(qkv, 2, 0, c)),
                        1.0 / std::sqrt(static_cast<double>(d)));
  Tensor k = split_heads(slice(qkv, 2, c, c));
  Tensor v = split_heads(slice(qkv, 2, 2 * c, c));
  Tensor attn = matmul(q, permute(k, {0, 1, 3, 2}));  // [nw, h, tw, tw]
  Tensor bias = permute(
      reshape(index_rows(blk.relpos, relpos_rows(win)), {tw, tw, heads}),
      {2, 0, 1});
  attn = add(attn, bias);
  if (mask) attn = add(attn, *mask);
  Tensor p = softmax_lastdim(attn);
  Tensor out = reshape(permute(matmul(p, v), {0, 2, 1, 3}), {nw, tw, c});
  return add(matmul(out, blk.proj_w), blk.proj_b);
}

void check_image(const Tensor& img, std::size_t channels, std::size_t size,
                 const char* what) {
  if (img.ndim() != 4 || img.shape()[1] != channels ||
      img.shape()[2] != size || img.shape()[3] != size) {
    throw ShapeError(std::string(what) + ": expected [B," +
                     std::to_string(channels) + "," + std::to_string(size) +
                     "," + std::to_string(size) + "], got " +
                     shape_str(img.shape()));
  }
  for (double v : img.data()) {
    if (v < 0.0 || v > 1.0) {
      throw DomainError(std::string(what) + ": values must lie in [0,1]");
    }
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw DomainError("model: image_size must be a multiple of patch_size");
  }
  if (dim < 4 || dim % 2 != 0) {
    throw DomainError("model: dim must be even and >= 4");
  }
  if (heads == 0 || dim % heads != 0 || fused_dim() % heads != 0) {
    throw DomainError(
        "model: heads must divide both dim and the fused dimension");
  }
  if (window == 0) throw DomainError("model: window must be positive");
  if (grid() % eff_window() != 0) {
    throw DomainError("model: token grid must be a multiple of the window");
  }
  if (num_blocks == 0 || fusion_blocks == 0) {
    throw DomainError("model: block counts must be positive");
  }
  sphere().validate();
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t last = x.ndim() - 1;
  Tensor mu = reduce(Reduce::Mean, x, {last}, true);
  Tensor xc = sub(x, mu);
  Tensor var = reduce(Reduce::Mean, mul(xc, xc), {last}, true);
  Tensor norm = div(xc, sqrt(add_scalar(var, 1e-5)));
  return add(mul(norm, gamma), beta);
}

Tensor window_partition(const Tensor& grid_tokens, std::size_t win) {
  const Shape& s = grid_tokens.shape();
  if (s.size() != 4 || s[1] != s[2] || s[1] % win != 0) {
    throw ShapeError("window_partition: expected [B,G,G,C] with G % win == 0");
  }
  const std::size_t B = s[0], G = s[1], C = s[3], n = G / win;
  Tensor x = reshape(grid_tokens, {B, n, win, n, win, C});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  return reshape(x, {B * n * n, win * win, C});
}

Tensor window_merge(const Tensor& windows, std::size_t batch, std::size_t grid,
                    std::size_t win) {
  const Shape& s = windows.shape();
  const std::size_t n = grid / win;
  if (s.size() != 3 || s[0] != batch * n * n || s[1] != win * win) {
    throw ShapeError("window_merge: window tensor does not match the grid");
  }
  const std::size_t C = s[2];
  Tensor x = reshape(windows, {batch, n, n, win, win, C});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  return reshape(x, {batch, grid, grid, C});
}

Tensor swin_block_forward(const SwinBlock& blk, const ModelConfig& cfg,
                          const Tensor& tokens) {
  const Shape& s = tokens.shape();
  if (s.size() != 3 || s[1] != cfg.tokens()) {
    throw ShapeError("swin_block: expected [B," + std::to_string(cfg.tokens()) +
                     ",C], got " + shape_str(s));
  }
  const std::size_t B = s[0], C = s[2];
  const std::size_t G = cfg.grid();
  const std::size_t w = cfg.eff_window();
  const std::size_t sh = blk.shifted ? cfg.shift() : 0;

  Tensor h = layer_norm(tokens, blk.ln1_g, blk.ln1_b);
  Tensor g4 = reshape(h, {B, G, G, C});
  if (sh) {
    g4 = roll_grid(g4, -static_cast<std::ptrdiff_t>(sh),
                   -static_cast<std::ptrdiff_t>(sh));
  }
  Tensor xw = window_partition(g4, w);
  Tensor att;
  if (sh) {
    Tensor mask = build_shift_mask(B, G, w, sh);
    att = window_attention(blk, cfg.heads, w, xw, &mask);
  } else {
    att = window_attention(blk, cfg.heads, w, xw, nullptr);
  }
  Tensor m4 = window_merge(att, B, G, w);
  if (sh) {
    m4 = roll_grid(m4, static_cast<std::ptrdiff_t>(sh),
                   static_cast<std::ptrdiff_t>(sh));
  }
  Tensor x = add(tokens, reshape(m4, {B, G * G, C}));
  Tensor h2 = layer_norm(x, blk.ln2_g, blk.ln2_b);
  Tensor mid = gelu(add(matmul(h2, blk.mlp1_w), blk.mlp1_b));
  Tensor mlp = add(matmul(mid, blk.mlp2_w), blk.mlp2_b);
  return add(x, mlp);
}

Tensor encode(const Encoder& enc, const ModelConfig& cfg, const Tensor& image) {
  check_image(image, enc.in_channels, cfg.image_size, "encode");
  const std::size_t B = image.shape()[0];
  const std::size_t ch = enc.in_channels;
  const std::size_t p = cfg.patch_size;
  const std::size_t G = cfg.grid();
  Tensor x = reshape(image, {B, ch, G, p, G, p});
  x = permute(x, {0, 2, 4, 1, 3, 5});
  x = reshape(x, {B, G * G, ch * p * p});
  Tensor tok = add(matmul(x, enc.patch_w), enc.patch_b);
  for (const SwinBlock& blk : enc.blocks) {
    tok = swin_block_forward(blk, cfg, tok);
  }
  return tok;
}

FeatureBundle decompose(const SphereBranch& br, const ModelConfig& cfg,
                        const Tensor& tokens) {
  if (tokens.ndim() != 3 || tokens.shape()[2] != cfg.dim) {
    throw ShapeError("decompose: expected [B,T," + std::to_string(cfg.dim) +
                     "], got " + shape_str(tokens.shape()));
  }
  const std::size_t c2 = cfg.half_dim();
  const SphereConfig sph = cfg.sphere();
  FeatureBundle out;
  out.align_pre = slice(tokens, 2, 0, c2);
  out.separ_pre = slice(tokens, 2, c2, c2);
  out.align = sphere_transform(project_to_sphere(out.align_pre, sph),
                               br.w_align, br.b_align, sph);
  out.separ = sphere_transform(project_to_sphere(out.separ_pre, sph),
                               br.w_separ, br.b_separ, sph);
  return out;
}

Tensor fuse(const Decoder& dec, const ModelConfig& cfg,
            const Tensor& visible_hat, const Tensor& infrared_align_hat) {
  if (visible_hat.ndim() != 3 || visible_hat.shape()[2] != cfg.dim ||
      infrared_align_hat.ndim() != 3 ||
      infrared_align_hat.shape()[2] != cfg.half_dim()) {
    throw ShapeError("fuse: feature shapes do not match the configuration");
  }
  Tensor fused = concat({visible_hat, infrared_align_hat}, 2);
  for (const SwinBlock& blk : dec.blocks) {
    fused = swin_block_forward(blk, cfg, fused);
  }
  Tensor x = add(matmul(fused, dec.expand_w), dec.expand_b);
  const std::size_t B = x.shape()[0];
  const std::size_t p = cfg.patch_size;
  const std::size_t G = cfg.grid();
  x = reshape(x, {B, G, G, 3, p, p});
  x = permute(x, {0, 3, 1, 4, 2, 5});
  x = reshape(x, {B, 3, cfg.image_size, cfg.image_size});
  return sigmoid(x);
}

RemovalOutput remove_shadow(const Generator& g, const Tensor& visible,
                            const Tensor& infrared) {
  check_image(visible, 3, g.cfg.image_size, "remove_shadow/visible");
  check_image(infrared, 1, g.cfg.image_size, "remove_shadow/infrared");
  RemovalOutput out;
  out.psi_visible = encode(g.enc_visible, g.cfg, visible);
  out.psi_infrared = encode(g.enc_infrared, g.cfg, infrared);
  out.vis = decompose(g.sph_visible, g.cfg, out.psi_visible);
  out.inf = decompose(g.sph_infrared, g.cfg, out.psi_infrared);
  Tensor v_hat = concat({out.vis.align, out.vis.separ}, 2);
  out.clean = fuse(g.dec, g.cfg, v_hat, out.inf.align);
  return out;
}

SwinBlock init_swin_block(std::size_t channels, std::size_t heads,
                          std::size_t win, bool shifted, Rng& rng) {
  const double sd = 0.02;
  const std::size_t span = 2 * win - 1;
  SwinBlock b;
  b.ln1_g = Tensor::ones({channels}, true);
  b.ln1_b = Tensor::zeros({channels}, true);
  b.qkv_w = Tensor::randn({channels, 3 * channels}, rng, sd, true);
  b.qkv_b = Tensor::zeros({3 * channels}, true);
  b.proj_w = Tensor::randn({channels, channels}, rng, sd, true);
  b.proj_b = Tensor::zeros({channels}, true);
  b.relpos = Tensor::zeros({span * span, heads}, true);
  b.ln2_g = Tensor::ones({channels}, true);
  b.ln2_b = Tensor::zeros({channels}, true);
  b.mlp1_w = Tensor::randn({channels, 4 * channels}, rng, sd, true);
  b.mlp1_b = Tensor::zeros({4 * channels}, true);
  b.mlp2_w = Tensor::randn({4 * channels, channels}, rng, sd, true);
  b.mlp2_b = Tensor::zeros({channels}, true);
  b.shifted = shifted;
  return b;
}

Generator Generator::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const double sd = 0.02;
  const std::size_t p = cfg.patch_size;
  const bool can_shift = cfg.eff_window() < cfg.grid() && cfg.shift() > 0;
  Generator g;
  g.cfg = cfg;

  auto make_encoder = [&](std::size_t in_ch) {
    Encoder e;
    e.in_channels = in_ch;
    e.patch_w = Tensor::randn({in_ch * p * p, cfg.dim}, rng, sd, true);
    e.patch_b = Tensor::zeros({cfg.dim}, true);
    for (std::size_t i = 0; i < cfg.num_blocks; ++i) {
      e.blocks.push_back(init_swin_block(cfg.dim, cfg.heads, cfg.eff_window(),
                                         can_shift && i % 2 == 1, rng));
    }
    return e;
  };
  g.enc_visible = make_encoder(3);
  g.enc_infrared = make_encoder(1);

  auto make_branch = [&]() {
    const std::size_t k = cfg.half_dim() - 1;
    SphereBranch s;
    s.w_align = Tensor::randn({k, k}, rng, sd, true);
    s.b_align = Tensor::zeros({k}, true);
    s.w_separ = Tensor::randn({k, k}, rng, sd, true);
    s.b_separ = Tensor::zeros({k}, true);
    return s;
  };
  g.sph_visible = make_branch();
  g.sph_infrared = make_branch();

  for (std::size_t i = 0; i < cfg.fusion_blocks; ++i) {
    g.dec.blocks.push_back(init_swin_block(cfg.fused_dim(), cfg.heads,
                                           cfg.eff_window(),
                                           can_shift && i % 2 == 1, rng));
  }
  g.dec.expand_w = Tensor::randn({cfg.fused_dim(), 3 * p * p}, rng, sd, true);
  g.dec.expand_b = Tensor::zeros({3 * p * p}, true);
  return g;
}

namespace {

void push_block(std::vector<std::pair<std::string, Tensor>>& out,
                const std::string& prefix, const SwinBlock& b) {
  out.emplace_back(prefix + ".ln1.g", b.ln1_g);
  out.emplace_back(prefix + ".ln1.b", b.ln1_b);
  out.emplace_back(prefix + ".qkv.w", b.qkv_w);
  out.emplace_back(prefix + ".qkv.b", b.qkv_b);
  out.emplace_back(prefix + ".proj.w", b.proj_w);
  out.emplace_back(prefix + ".proj.b", b.proj_b);
  out.emplace_back(prefix + ".relpos", b.relpos);
  out.emplace_back(prefix + ".ln2.g", b.ln2_g);
  out.emplace_back(prefix + ".ln2.b", b.ln2_b);
  out.emplace_back(prefix + ".mlp1.w", b.mlp1_w);
  out.emplace_back(prefix + ".mlp1.b", b.mlp1_b);
  out.emplace_back(prefix + ".mlp2.w", b.mlp2_w);
  out.emplace_back(prefix + ".mlp2.b", b.mlp2_b);
}

void push_encoder(std::vector<std::pair<std::string, Tensor>>& out,
                  const std::string& prefix, const Encoder& e) {
  out.emplace_back(prefix + ".patch.w", e.patch_w);
  out.emplace_back(prefix + ".patch.b", e.patch_b);
  for (std::size_t i = 0; i < e.blocks.size(); ++i) {
    push_block(out, prefix + ".blk" + std::to_string(i), e.blocks[i]);
  }
}

void push_branch(std::vector<std::pair<std::string, Tensor>>& out,
                 const std::string& prefix, const SphereBranch& s) {
  out.emplace_back(prefix + ".align.w", s.w_align);
  out.emplace_back(prefix + ".align.b", s.b_align);
  out.emplace_back(prefix + ".separ.w", s.w_separ);
  out.emplace_back(prefix + ".separ.b", s.b_separ);
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> Generator::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  push_encoder(out, "enc_v", enc_visible);
  push_encoder(out, "enc_i", enc_infrared);
  push_branch(out, "sph_v", sph_visible);
  push_branch(out, "sph_i", sph_infrared);
  for (std::size_t i = 0; i < dec.blocks.size(); ++i) {
    push_block(out, "dec.blk" + std::to_string(i), dec.blocks[i]);
  }
  out.emplace_back("dec.expand.w", dec.expand_w);
  out.emplace_back("dec.expand.b", dec.expand_b);
  return out;
}

std::vector<Tensor> Generator::params() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

}  // namespace deshadow
