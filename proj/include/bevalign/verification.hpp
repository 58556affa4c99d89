#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "bevalign/losses.hpp"
#include "bevalign/model.hpp"

namespace bevalign {

// Finite-difference verification of every backward rule, from single
// primitives up to the full per-sample training loss. The CLI runs this
// suite as `gradcheck`; the acceptance harness runs it with pinned seeds.

struct CheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  bool ok = false;
};

struct SuiteReport {
  std::vector<CheckResult> checks;
  bool ok = true;
  std::string worst_name;  // largest error relative to its tolerance
  double worst_rel_error = 0.0;
};

namespace detail {

// Identity whose backward flips the sign: a stand-in for a buggy backward
// rule. The suite routes one named check through it to prove a broken
// rule cannot pass.
inline Tensor sabotaged_identity(Tape& tape, Tensor a) {
  Tensor out = Tensor::from_values(a.rows(), a.cols(), a.values(), a.requires_grad());
  tape.record("sabotaged_identity", [a, out]() mutable {
    if (!out.grad_allocated()) return;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a.requires_grad()) a.accumulate_grad(i, -out.grad_at(i));
    }
  });
  return out;
}

inline Tensor random_param(Rng& rng, std::size_t rows, std::size_t cols, double sd = 0.5) {
  return Tensor::from_values(rows, cols, random_normal_values(rng, rows * cols, sd), true);
}

using LossBuilder = std::function<Tensor(Tape&)>;
using CheckFixture = std::pair<LossBuilder, std::vector<Tensor>>;

struct SuiteCheck {
  std::string name;
  double tolerance;
  // draws fresh leaves and returns a builder that reuses those exact
  // nodes, so finite differencing sees every perturbation
  std::function<CheckFixture(Rng&)> make;
};

inline std::vector<SuiteCheck> make_suite_checks() {
  std::vector<SuiteCheck> checks;
  const double tol = 1e-4;

  auto primitive = [&](std::string name, std::function<CheckFixture(Rng&)> make) {
    checks.push_back({std::move(name), tol, std::move(make)});
  };

  primitive("add", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4), b = random_param(rng, 3, 4);
    return {[a, b](Tape& t) { return mean(t, gelu(t, add(t, a, b))); }, {a, b}};
  });
  primitive("sub", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4), b = random_param(rng, 3, 4);
    return {[a, b](Tape& t) { return mean(t, gelu(t, sub(t, a, b))); }, {a, b}};
  });
  primitive("mul", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4), b = random_param(rng, 3, 4);
    return {[a, b](Tape& t) { return mean(t, gelu(t, mul(t, a, b))); }, {a, b}};
  });
  primitive("scale_add_scalar", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4);
    return {[a](Tape& t) { return mean(t, gelu(t, add_scalar(t, scale(t, a, 1.7), 0.3))); }, {a}};
  });
  primitive("matmul", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4), b = random_param(rng, 4, 2);
    return {[a, b](Tape& t) { return mean(t, gelu(t, matmul(t, a, b))); }, {a, b}};
  });
  primitive("transpose", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4);
    return {[a](Tape& t) { return mean(t, gelu(t, matmul(t, transpose(t, a), a))); }, {a}};
  });
  primitive("add_rowwise", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4), r = random_param(rng, 1, 4);
    return {[a, r](Tape& t) { return mean(t, gelu(t, add_rowwise(t, a, r))); }, {a, r}};
  });
  primitive("mul_rowwise", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4), r = random_param(rng, 1, 4);
    return {[a, r](Tape& t) { return mean(t, gelu(t, mul_rowwise(t, a, r))); }, {a, r}};
  });
  primitive("exp", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4);
    return {[a](Tape& t) { return mean(t, exp(t, scale(t, a, 0.5))); }, {a}};
  });
  primitive("log", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4);
    return {[a](Tape& t) { return mean(t, log(t, add_scalar(t, mul(t, a, a), 1.0))); }, {a}};
  });
  primitive("gelu", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4);
    return {[a](Tape& t) { return mean(t, gelu(t, a)); }, {a}};
  });
  primitive("softmax_lastaxis", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 5), b = random_param(rng, 3, 5);
    return {[a, b](Tape& t) { return mean(t, mul(t, softmax_lastaxis(t, a), b)); }, {a, b}};
  });
  primitive("log_softmax_lastaxis", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 5), b = random_param(rng, 3, 5);
    return {[a, b](Tape& t) { return mean(t, mul(t, log_softmax_lastaxis(t, a), b)); }, {a, b}};
  });
  primitive("layer_norm", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 6), b = random_param(rng, 3, 6);
    return {[a, b](Tape& t) { return mean(t, mul(t, layer_norm(t, a), b)); }, {a, b}};
  });
  primitive("sum", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4);
    return {[a](Tape& t) { return gelu(t, scale(t, sum(t, a), 0.2)); }, {a}};
  });
  primitive("mean", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4);
    return {[a](Tape& t) { return gelu(t, scale(t, mean(t, a), 2.0)); }, {a}};
  });
  primitive("gather_rows", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 4, 3);
    // a repeated index exercises gradient accumulation
    return {[a](Tape& t) { return mean(t, gelu(t, gather_rows(t, a, {2, 0, 2}))); }, {a}};
  });
  primitive("concat_rows", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 2, 3), b = random_param(rng, 3, 3);
    Tensor c = random_param(rng, 3, 2);
    return {[a, b, c](Tape& t) { return mean(t, gelu(t, matmul(t, concat_rows(t, {a, b}), c))); },
            {a, b, c}};
  });
  primitive("concat_cols", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 2), b = random_param(rng, 3, 3);
    Tensor w = random_param(rng, 3, 5);
    return {[a, b, w](Tape& t) { return mean(t, mul(t, concat_cols(t, {a, b}), w)); }, {a, b, w}};
  });
  primitive("slice_cols", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 5);
    return {[a](Tape& t) { return mean(t, gelu(t, slice_cols(t, a, 1, 4))); }, {a}};
  });
  primitive("reshape", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4), b = random_param(rng, 6, 2);
    return {[a, b](Tape& t) { return mean(t, gelu(t, matmul(t, reshape(t, a, 2, 6), b))); },
            {a, b}};
  });
  primitive("l2_normalize_rows", [](Rng& rng) -> CheckFixture {
    Tensor a = random_param(rng, 3, 4), b = random_param(rng, 3, 4);
    return {[a, b](Tape& t) { return mean(t, mul(t, l2_normalize_rows(t, a), b)); }, {a, b}};
  });

  checks.push_back({"lift_splat", tol, [](Rng& rng) -> CheckFixture {
                      SceneParams sp;
                      sp.camera_count = 2;
                      sp.image_height = 4;
                      sp.image_width = 4;
                      const CameraRig rig = make_scene_rig(sp, {rng.uniform(-0.3, 0.3)});
                      const BevGridSpec grid{-8.0, 8.0, -8.0, 8.0, 4, 0};
                      const DepthBins bins{1.0, 9.0, 3};
                      const LiftSplatPlan plan = plan_lift_splat(rig, 2, 2, bins, grid);
                      std::vector<Tensor> feats, logits, leaves;
                      for (std::size_t cam = 0; cam < rig.size(); ++cam) {
                        feats.push_back(random_param(rng, 4, 3));
                        logits.push_back(random_param(rng, 4, 3));
                        leaves.push_back(feats.back());
                        leaves.push_back(logits.back());
                      }
                      Tensor target = random_param(rng, grid.cell_count(), 3);
                      return {[plan, feats, logits, target](Tape& t) {
                                return mean(t, mul(t, lift_splat(t, plan, feats, logits), target));
                              },
                              leaves};
                    }});

  checks.push_back({"nce_loss", tol, [](Rng& rng) -> CheckFixture {
                      Tensor img = random_param(rng, 6, 4);
                      Tensor pcd = random_param(rng, 6, 4);
                      ContrastiveConfig cfg;
                      cfg.k = 4;
                      cfg.tau = 0.7;
                      cfg.sample_seed = rng.bits();
                      cfg.normalize_features = true;
                      return {[img, pcd, cfg](Tape& t) {
                                return nce_loss(t, img, pcd, std::vector<bool>(6, true), cfg).loss;
                              },
                              {img, pcd}};
                    }});

  checks.push_back({"mae_loss", tol, [](Rng& rng) -> CheckFixture {
                      auto target = std::make_shared<PatchGrid>();
                      target->patch_rows = 2;
                      target->patch_cols = 2;
                      target->patch_size = 2;
                      target->channels = 1;
                      target->patches = random_param(rng, 4, 4);
                      target->mask = {true, false, true, false};
                      Tensor recon = random_param(rng, 4, 4);
                      return {[recon, target](Tape& t) {
                                return mae_loss(t, recon, *target, target->mask);
                              },
                              {recon, target->patches}};
                    }});

  checks.push_back({"prompt_norm", tol, [](Rng& rng) -> CheckFixture {
                      auto reg = std::make_shared<PromptRegistry>();
                      auto store = std::make_shared<ParameterStore>();
                      reg->prompt_dim = 3;
                      reg->register_dataset(*store, "src");
                      reg->register_site(*store, "site", 4);
                      // zero-initialized adapter halves would hide a wrong
                      // sign; give every piece a random value
                      std::vector<Tensor> leaves;
                      for (const std::string& name : store->names()) {
                        Tensor p = store->get(name);
                        for (double& v : p.mutable_values()) v = rng.normal() * 0.3;
                        leaves.push_back(p);
                      }
                      Tensor x = random_param(rng, 3, 4);
                      Tensor probe = random_param(rng, 3, 4);
                      leaves.push_back(x);
                      leaves.push_back(probe);
                      return {[reg, store, x, probe](Tape& t) {
                                NormContext ctx;
                                ctx.registry = reg.get();
                                ctx.dataset = "src";
                                return mean(t, mul(t, prompt_norm(t, x, "site", ctx), probe));
                              },
                              leaves};
                    }});

  checks.push_back({"end_to_end_loss", 1e-3, [](Rng& rng) -> CheckFixture {
                      SceneParams sp;
                      sp.box_count = 2;
                      sp.lidar_azimuth_steps = 24;
                      sp.lidar_rings = 3;
                      sp.camera_count = 2;
                      sp.image_height = 8;
                      sp.image_width = 8;
                      DatasetDescriptor desc;
                      desc.dataset_id = "fd";
                      desc.name = "fd";
                      desc.frame_count = 1;
                      desc.generator_seed = rng.bits();

                      ModelConfig mc;
                      mc.image.image_height = 8;
                      mc.image.image_width = 8;
                      mc.image.patch_size = 4;
                      mc.image.embed_dim = 8;
                      mc.image.window_size = 2;
                      mc.image.head_count = 2;
                      mc.image.depth_bins = 2;
                      mc.image.bev_feature_dim = 8;
                      mc.point.bev_feature_dim = 8;
                      mc.grid = BevGridSpec{-8.0, 8.0, -8.0, 8.0, 4, 8};
                      mc.depth = DepthBins{1.0, 9.0, 2};
                      mc.prompt_dim = 4;
                      mc.init_seed = rng.bits();

                      auto model = std::make_shared<Model>(build_model(mc, {"fd"}));
                      auto sample = std::make_shared<SceneSample>(generate_frame(desc, sp, 0));
                      // flat sky/ground patches give tokens near-zero
                      // variance, where normalization curvature outruns
                      // h = 1e-4 differencing; rich pixels keep the check
                      // inside its tolerance without touching the rules
                      for (Tensor& img : sample->images) {
                        for (double& v : img.mutable_values()) v = rng.uniform(0.05, 0.95);
                      }

                      // one small leaf per parameter group: the primitives
                      // above cover each rule in isolation, this checks
                      // their composition through the whole forward; the
                      // prompt and adapter leaves reach inside every norm
                      // site of both backbones
                      std::vector<Tensor> leaves = {
                          model->store.get("img/bev_proj/b"), model->store.get("pcd/embed/b"),
                          model->store.get("aux/mae/out/b"), model->store.get("aux/depth_head/b"),
                          model->registry.prompt("fd")};
                      for (const std::string& name :
                           model->store.names_in_group(ParamGroup::adapters)) {
                        if (name.ends_with("/b2")) {
                          leaves.push_back(model->store.get(name));
                          break;
                        }
                      }
                      return {[model, sample](Tape& t) {
                                ForwardOutput fwd =
                                    forward_sample(t, *model, *sample, 7, std::string("fd"));
                                ContrastiveConfig cc;
                                cc.k = 4;
                                cc.sample_seed = 5;
                                // a soft temperature keeps the score
                                // curvature inside what h = 1e-4 central
                                // differencing resolves
                                cc.tau = 8.0;
                                return combined_loss(t, {fwd.loss_inputs}, cc).l_all;
                              },
                              leaves};
                    }});

  return checks;
}

}  // namespace detail

// Runs every check over `seed_count` seeds. `corrupt_op` routes that
// check's loss through a sign-flipped backward so callers can verify the
// suite fails loudly on a broken rule.
inline SuiteReport run_gradcheck_suite(std::size_t seed_count = 10, double h = 1e-4,
                                       const std::string& corrupt_op = "") {
  SuiteReport report;
  double worst_ratio = -1.0;
  for (const detail::SuiteCheck& check : detail::make_suite_checks()) {
    CheckResult result;
    result.name = check.name;
    result.tolerance = check.tolerance;
    result.ok = true;
    const bool corrupt = check.name == corrupt_op;
    for (std::size_t seed = 1; seed <= seed_count; ++seed) {
      Rng rng(mix_seed(0x67726164ULL, seed));
      auto [builder, leaves] = check.make(rng);
      detail::LossBuilder wrapped =
          corrupt ? detail::LossBuilder([builder](Tape& t) {
              return detail::sabotaged_identity(t, builder(t));
            })
                  : builder;
      const GradCheckReport g = gradcheck(wrapped, leaves, h, check.tolerance);
      result.max_rel_error = std::max(result.max_rel_error, g.max_rel_error);
      result.checked += g.checked;
      result.ok = result.ok && g.ok;
    }
    report.ok = report.ok && result.ok;
    const double ratio = result.max_rel_error / result.tolerance;
    if (ratio > worst_ratio) {
      worst_ratio = ratio;
      report.worst_name = result.name;
      report.worst_rel_error = result.max_rel_error;
    }
    report.checks.push_back(std::move(result));
  }
  return report;
}

}  // namespace bevalign
