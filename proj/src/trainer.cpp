#include "deshadow/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace deshadow {

namespace {

struct Item {
  Tensor visible, mask, infrared;
};

std::vector<Item> preload(const DatasetManifest& man) {
  std::vector<Item> items;
  items.reserve(man.entries.size());
  for (const ManifestEntry& e : man.entries) {
    Item it;
    it.visible = load_image((fs::path(man.dir) / e.image).string());
    if (it.visible.shape()[0] != 3) {
      throw DomainError("train: '" + e.image + "' is not an RGB image");
    }
    it.mask = load_mask((fs::path(man.dir) / e.mask).string());
    if (it.mask.shape()[1] != it.visible.shape()[1] ||
        it.mask.shape()[2] != it.visible.shape()[2]) {
      throw DomainError("train: mask size differs from '" + e.image + "'");
    }
    it.infrared = e.infrared.empty()
                      ? pseudo_infrared(it.visible)
                      : load_image((fs::path(man.dir) / e.infrared).string());
    if (it.infrared.shape() !=
        Shape{1, it.visible.shape()[1], it.visible.shape()[2]}) {
      throw DomainError("train: infrared size differs from '" + e.image +
                        "'");
    }
    items.push_back(std::move(it));
  }
  return items;
}

void append_crop(std::vector<double>& out, const Tensor& t) {
  out.insert(out.end(), t.data().begin(), t.data().end());
}

void check_report(const LossReport& r, std::size_t step) {
  const std::pair<const char*, double> parts[] = {
      {"ort_visible", r.ort_visible},   {"ort_infrared", r.ort_infrared},
      {"sim", r.sim},                   {"adv_generator", r.adv_generator},
      {"adv_discriminator", r.adv_discriminator},
      {"ide", r.ide},                   {"total", r.total}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) {
      throw DomainError("train: " + std::string(name) +
                        " became non-finite at step " + std::to_string(step));
    }
  }
}

std::string gt_path_for(const std::string& dir, const std::string& image) {
  const fs::path p = fs::path(dir) / image;
  const std::string name = p.filename().string();
  if (name.rfind("img", 0) != 0) return {};
  const fs::path gt = p.parent_path() / ("gt" + name.substr(3));
  return fs::exists(gt) ? gt.string() : std::string();
}

}  // namespace

Checkpoint snapshot(const Generator& g, const Discriminator& d,
                    const Tensor& raw_gamma, const TrainConfig& cfg,
                    std::size_t step) {
  Checkpoint c;
  c.meta = {{"step", double(step)},
            {"seed", double(cfg.seed)},
            {"image_size", double(cfg.image_size)},
            {"patch_size", double(cfg.patch_size)},
            {"model_patch", double(cfg.model_patch)},
            {"model_dim", double(cfg.model_dim)},
            {"heads", double(cfg.heads)},
            {"window", double(cfg.window)},
            {"num_blocks", double(cfg.num_blocks)},
            {"fusion_blocks", double(cfg.fusion_blocks)},
            {"radius", cfg.radius},
            {"eps_pole", cfg.eps_pole},
            {"w_ort", cfg.loss.w_ort},
            {"w_sim", cfg.loss.w_sim},
            {"w_adv", cfg.loss.w_adv},
            {"w_ide", cfg.loss.w_ide},
            {"w_rec", cfg.loss.w_rec},
            {"use_post_transform", cfg.loss.use_post_transform ? 1.0 : 0.0},
            {"ort_normalized", cfg.loss.ort_normalized ? 1.0 : 0.0},
            {"swap_adv_roles", cfg.loss.swap_adv_roles ? 1.0 : 0.0}};
  c.tensors = g.named_params();
  c.tensors.emplace_back("gamma.raw", raw_gamma);
  for (auto& [name, t] : d.named_params()) c.tensors.emplace_back(name, t);
  return c;
}

RestoredModel restore(const Checkpoint& c, std::size_t image_size) {
  TrainConfig cfg;
  cfg.manifest.clear();
  cfg.out_dir.clear();
  cfg.seed = std::uint64_t(c.meta_value("seed"));
  cfg.image_size = std::size_t(c.meta_value("image_size"));
  cfg.patch_size = std::size_t(c.meta_value("patch_size"));
  cfg.model_patch = std::size_t(c.meta_value("model_patch"));
  cfg.model_dim = std::size_t(c.meta_value("model_dim"));
  cfg.heads = std::size_t(c.meta_value("heads"));
  cfg.window = std::size_t(c.meta_value("window"));
  cfg.num_blocks = std::size_t(c.meta_value("num_blocks"));
  cfg.fusion_blocks = std::size_t(c.meta_value("fusion_blocks"));
  cfg.radius = c.meta_value("radius");
  cfg.eps_pole = c.meta_value("eps_pole");
  cfg.loss.w_ort = c.meta_value("w_ort");
  cfg.loss.w_sim = c.meta_value("w_sim");
  cfg.loss.w_adv = c.meta_value("w_adv");
  cfg.loss.w_ide = c.meta_value("w_ide");
  cfg.loss.w_rec = c.meta_value("w_rec");
  cfg.loss.use_post_transform = c.meta_value("use_post_transform") != 0.0;
  cfg.loss.ort_normalized = c.meta_value("ort_normalized") != 0.0;
  cfg.loss.swap_adv_roles = c.meta_value("swap_adv_roles") != 0.0;

  Rng scratch(0);
  RestoredModel r{Generator::init(cfg.model(image_size), scratch),
                  Discriminator::init(3, scratch), Tensor::zeros({3}, true),
                  cfg};
  std::size_t used = 0;
  auto fill = [&](const std::string& name, Tensor& param) {
    const Tensor& stored = c.tensor(name);
    if (stored.shape() != param.shape()) {
      throw DomainError("checkpoint: tensor '" + name + "' is " +
                        shape_str(stored.shape()) + ", model expects " +
                        shape_str(param.shape()));
    }
    param.set_data({stored.data().begin(), stored.data().end()});
    ++used;
  };
  for (auto& [name, t] : r.g.named_params()) fill(name, t);
  fill("gamma.raw", r.raw_gamma);
  for (auto& [name, t] : r.d.named_params()) fill(name, t);
  if (used != c.tensors.size()) {
    throw DomainError("checkpoint: file carries tensors the model"
                      " does not have");
  }
  return r;
}

TrainArtifacts train_loop(const TrainConfig& cfg, std::ostream* echo) {
  cfg.validate();
  if (cfg.manifest.empty()) {
    throw DomainError("train: config needs a manifest path");
  }
  DatasetManifest man = load_manifest(cfg.manifest);
  if (man.entries.empty()) throw DomainError("train: manifest is empty");
  fs::create_directories(cfg.out_dir);
  std::vector<Item> items = preload(man);

  Rng root(cfg.seed);
  Rng init_rng = root.fork(0);
  Rng data_rng = root.fork(1);
  const ModelConfig mc = cfg.model(cfg.patch_size);
  Generator g = Generator::init(mc, init_rng);
  Discriminator d = Discriminator::init(3, init_rng);
  Tensor raw_gamma = Tensor::zeros({3}, true);

  std::vector<Tensor> g_all = g.params();
  g_all.push_back(raw_gamma);
  std::vector<Tensor> d_params = d.params();
  // the infrared-specific sphere half feeds neither the fused output nor the
  // default patch objectives, so the optimizer list keeps only parameters the
  // objective actually reaches; settled after the first backward
  std::vector<Tensor> g_params;
  AdamState g_state, d_state;

  const std::size_t P = cfg.patch_size;
  TrainArtifacts art;
  art.log_csv = loss_csv_header() + "\n";

  for (std::size_t step = 1; step <= cfg.iterations; ++step) {
    LossReport rep;
    try {
    std::vector<double> shadow_v, free_v, ir_v;
    shadow_v.reserve(cfg.batch_size * 3 * P * P);
    free_v.reserve(cfg.batch_size * 3 * P * P);
    ir_v.reserve(cfg.batch_size * P * P);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const Item& it = items[data_rng.index(items.size())];
      CropPair pair = crop_pair(it.visible, it.mask, P, cfg.coverage_hi,
                                cfg.coverage_lo, data_rng);
      append_crop(shadow_v, pair.shadow_patch);
      append_crop(free_v, pair.shadowfree_patch);
      append_crop(ir_v, slice(slice(it.infrared, 1, pair.shadow_row, P), 2,
                              pair.shadow_col, P));
    }
    Tensor shadow_b =
        Tensor::from_data({cfg.batch_size, 3, P, P}, std::move(shadow_v));
    Tensor free_b =
        Tensor::from_data({cfg.batch_size, 3, P, P}, std::move(free_v));
    Tensor ir_b = Tensor::from_data({cfg.batch_size, 1, P, P},
                                    std::move(ir_v));

    Tensor fake_value, real_value;
    {
      Tape tape;
      Tensor ps = pseudo_shadow(free_b, raw_gamma);
      RemovalOutput out = remove_shadow(g, shadow_b, ir_b);
      StepInputs in{out.vis, out.inf, out.clean, shadow_b, ps, free_b, mc};
      LossBundle lb = total_loss(in, d, cfg.loss);
      rep = lb.report();
      check_report(rep, step);
      tape.backward(lb.total);
      if (g_params.empty()) {
        for (Tensor& t : g_all) {
          if (t.has_grad()) g_params.push_back(t);
        }
      }
      adam_step(g_params, g_state, cfg.lr);  // rejects non-finite updates
      // the generator's adversarial term ran through the discriminator;
      // drop those gradients before the discriminator's own step
      for (Tensor& t : d_params) t.zero_grad();
      fake_value = ps.detach();
      real_value = cfg.loss.swap_adv_roles ? out.clean.detach() : shadow_b;
    }
    {
      Tape tape;
      AdvPair adv = adversarial_losses(fake_value, real_value, d);
      tape.backward(adv.discriminator);
      adam_step(d_params, d_state, cfg.lr);
    }
    } catch (const DomainError& e) {
      // every abort names the step; ops that trip the finite scan throw
      // before the report-level component guard can see them
      const std::string msg = e.what();
      if (msg.rfind("train:", 0) == 0) throw;
      throw DomainError("train: step " + std::to_string(step) + ": " + msg);
    }

    art.log_csv += loss_csv_line(step, rep) + "\n";
    art.last = rep;
    art.steps = step;
    if (echo && cfg.log_interval &&
        (step % cfg.log_interval == 0 || step == cfg.iterations)) {
      (*echo) << "step " << step << "/" << cfg.iterations << "  total "
              << rep.total << "  ide " << rep.ide << "\n";
    }
    if (cfg.checkpoint_interval && step % cfg.checkpoint_interval == 0 &&
        step != cfg.iterations) {
      char name[48];
      std::snprintf(name, sizeof name, "ckpt_%06zu.dsc", step);
      save_checkpoint((fs::path(cfg.out_dir) / name).string(),
                      snapshot(g, d, raw_gamma, cfg, step));
    }
  }

  art.checkpoint_path = (fs::path(cfg.out_dir) / "ckpt_final.dsc").string();
  save_checkpoint(art.checkpoint_path,
                  snapshot(g, d, raw_gamma, cfg, cfg.iterations));
  art.log_path = (fs::path(cfg.out_dir) / "loss_log.csv").string();
  std::ofstream log(art.log_path, std::ios::binary);
  log << art.log_csv;
  if (!log) throw DomainError("train: cannot write " + art.log_path);
  return art;
}

Tensor infer_image(const Generator& g, const Tensor& visible,
                   const Tensor& infrared) {
  if (visible.ndim() != 3 || visible.shape()[0] != 3 ||
      visible.shape()[1] != visible.shape()[2]) {
    throw ShapeError("infer: expected a square [3,H,H] image, got " +
                     shape_str(visible.shape()));
  }
  const std::size_t H = visible.shape()[1];
  if (H != g.cfg.image_size) {
    throw ShapeError("infer: image side " + std::to_string(H) +
                     " does not match the network size " +
                     std::to_string(g.cfg.image_size));
  }
  if (infrared.shape() != Shape{1, H, H}) {
    throw ShapeError("infer: infrared must be [1," + std::to_string(H) + "," +
                     std::to_string(H) + "]");
  }
  RemovalOutput out = remove_shadow(g, reshape(visible, {1, 3, H, H}),
                                    reshape(infrared, {1, 1, H, H}));
  return reshape(out.clean, {3, H, H});
}

EvalOutcome evaluate_model(const Generator& g, const DatasetManifest& m) {
  if (m.entries.empty()) throw DomainError("eval: manifest is empty");
  EvalOutcome out;
  out.full_reference = true;
  std::vector<EvalReport> model_reports, identity_reports;
  for (const ManifestEntry& e : m.entries) {
    if (gt_path_for(m.dir, e.image).empty()) {
      out.full_reference = false;
      break;
    }
  }
  for (const ManifestEntry& e : m.entries) {
    Tensor visible = load_image((fs::path(m.dir) / e.image).string());
    Tensor infrared =
        e.infrared.empty()
            ? pseudo_infrared(visible)
            : load_image((fs::path(m.dir) / e.infrared).string());
    Tensor pred = infer_image(g, visible, infrared);
    if (out.full_reference) {
      Tensor mask = load_mask((fs::path(m.dir) / e.mask).string());
      Tensor gt = load_image(gt_path_for(m.dir, e.image));
      model_reports.push_back(evaluate_pair(pred, gt, mask));
      identity_reports.push_back(evaluate_pair(visible, gt, mask));
    } else {
      EvalReport mr;
      mr.count = 1;
      mr.entropy_mean = entropy(pred);
      model_reports.push_back(mr);
      EvalReport ir;
      ir.count = 1;
      ir.entropy_mean = entropy(visible);
      identity_reports.push_back(ir);
    }
  }
  out.model = average_reports(model_reports);
  out.identity = average_reports(identity_reports);
  return out;
}

EvalOutcome evaluate_checkpoint(const std::string& checkpoint_path,
                                const std::string& manifest_path) {
  DatasetManifest man = load_manifest(manifest_path);
  if (man.entries.empty()) throw DomainError("eval: manifest is empty");
  Tensor probe =
      load_image((fs::path(man.dir) / man.entries.front().image).string());
  if (probe.shape()[1] != probe.shape()[2]) {
    throw DomainError("eval: images must be square");
  }
  RestoredModel rm =
      restore(load_checkpoint(checkpoint_path), probe.shape()[1]);
  return evaluate_model(rm.g, man);
}

}  // namespace deshadow
