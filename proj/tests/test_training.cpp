#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <unistd.h>
#include <vector>

#include "bevalign/training.hpp"

using namespace bevalign;
namespace fs = std::filesystem;

namespace {

fs::path make_temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const fs::path dir = fs::temp_directory_path() /
                       ("bevalign_train_" + tag + "_" + std::to_string(getpid()) + "_" +
                        std::to_string(counter.fetch_add(1)));
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

SceneParams micro_scene() {
  SceneParams sp;
  sp.box_count = 3;
  sp.box_side_min = 1.5;
  sp.box_side_max = 2.5;
  sp.place_r_min = 2.5;
  sp.place_r_max = 6.5;
  sp.lidar_azimuth_steps = 32;
  sp.lidar_rings = 4;
  sp.camera_count = 2;
  sp.image_height = 8;
  sp.image_width = 8;
  return sp;
}

ModelConfig micro_model() {
  ModelConfig mc;
  mc.image.image_height = 8;
  mc.image.image_width = 8;
  mc.image.channels = 1;
  mc.image.patch_size = 4;
  mc.image.embed_dim = 8;
  mc.image.block_count = 1;
  mc.image.window_size = 2;
  mc.image.head_count = 2;
  mc.image.mask_ratio = 0.5;
  mc.image.depth_bins = 2;
  mc.image.bev_feature_dim = 8;
  mc.point.input_feature_dim = 4;
  mc.point.embed_dim = 8;
  mc.point.block_count = 1;
  mc.point.head_count = 2;
  mc.point.bev_feature_dim = 8;
  mc.grid = BevGridSpec{-8.0, 8.0, -8.0, 8.0, 8, 8};
  mc.depth = DepthBins{1.0, 9.0, 2};
  mc.prompts_enabled = true;
  mc.prompt_dim = 4;
  mc.init_seed = 3;
  return mc;
}

// two tiny datasets, four frames each
fs::path make_micro_root(const std::string& tag) {
  const fs::path root = make_temp_dir(tag);
  const SceneParams sp = micro_scene();
  std::vector<ManifestEntry> manifest;
  std::uint64_t seed = 11;
  for (const std::string id : {"alpha", "beta"}) {
    DatasetDescriptor d;
    d.dataset_id = id;
    d.name = "micro " + id;
    d.frame_count = 4;
    d.repeat_times = 1;
    d.generator_seed = seed++;
    manifest.push_back({d, sp});
    generate_dataset(d, sp, root);
  }
  write_manifest(manifest, root);
  return root;
}

PretrainConfig micro_pretrain() {
  PretrainConfig cfg;
  cfg.model = micro_model();
  cfg.contrastive.k = 8;
  cfg.schedule.peak_lr = 4e-4;
  cfg.schedule.warmup_epochs = 1;
  cfg.schedule.total_epochs = 3;
  cfg.batch_size = 2;
  cfg.run_seed = 21;
  return cfg;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("lr schedule follows warmup then cosine to the floor") {
  LrSchedule s;
  s.peak_lr = 4e-4;
  s.warmup_epochs = 5;
  s.total_epochs = 50;
  s.floor_ratio = 0.01;
  s.steps_per_epoch = 2;  // warm = 10, total = 100
  validate_schedule(s);
  const double floor = s.floor_ratio * s.peak_lr;

  CHECK(lr_at(s, 0) == 0.0);
  CHECK(lr_at(s, 1) == Catch::Approx(4e-4 / 10.0).margin(1e-18));
  CHECK(lr_at(s, 10) == 4e-4);  // end of warmup hits the peak exactly
  CHECK(lr_at(s, 100) == floor);
  CHECK(lr_at(s, 400) == floor);  // clamps past the end

  // halfway through the decay the cosine sits at the midpoint
  const double mid = floor + 0.5 * (s.peak_lr - floor);
  CHECK(lr_at(s, 55) == Catch::Approx(mid).margin(1e-12));

  // continuous at the junction, then monotone nonincreasing
  CHECK(lr_at(s, 11) < lr_at(s, 10));
  CHECK(lr_at(s, 10) - lr_at(s, 11) < 1e-6);
  for (std::size_t step = 10; step < 110; ++step) {
    CHECK(lr_at(s, step + 1) <= lr_at(s, step) + 1e-18);
  }

  LrSchedule bad = s;
  bad.warmup_epochs = 50;
  CHECK_THROWS_AS(validate_schedule(bad), std::invalid_argument);
  bad = s;
  bad.floor_ratio = 0.0;
  CHECK_THROWS_AS(validate_schedule(bad), std::invalid_argument);
  bad = s;
  bad.floor_ratio = 1.5;
  CHECK_THROWS_AS(validate_schedule(bad), std::invalid_argument);
  bad = s;
  bad.peak_lr = 0.0;
  CHECK_THROWS_AS(validate_schedule(bad), std::invalid_argument);
  bad = s;
  bad.steps_per_epoch = 0;
  CHECK_THROWS_AS(validate_schedule(bad), std::invalid_argument);
}

TEST_CASE("adamw steps match hand-computed values") {
  SECTION("unit gradient moves the parameter by roughly the learning rate") {
    ParameterStore store;
    Tensor p = store.create("p", ParamGroup::auxiliary, 1, 1, {1.0});
    p.accumulate_grad(0, 1.0);
    OptimState state;
    OptimConfig cfg{0.9, 0.999, 1e-8, 0.0};
    CHECK(optimizer_step(store, state, cfg, 0.1) == 1);
    // m-hat = v-hat = 1 after one step, so the move is lr / (1 + eps)
    CHECK(p.at(0) == Catch::Approx(0.9).margin(1e-8));
    CHECK(state.step == 1);
  }

  SECTION("zero gradient and zero decay leave the parameter untouched") {
    ParameterStore store;
    Tensor p = store.create("p", ParamGroup::auxiliary, 1, 1, {0.7});
    OptimState state;
    OptimConfig cfg{0.9, 0.999, 1e-8, 0.0};
    optimizer_step(store, state, cfg, 0.1);
    CHECK(p.at(0) == 0.7);
  }

  SECTION("decay is decoupled: zero gradient still shrinks the weight") {
    ParameterStore store;
    Tensor p = store.create("p", ParamGroup::auxiliary, 1, 1, {1.0});
    OptimState state;
    OptimConfig cfg{0.9, 0.999, 1e-8, 0.5};
    optimizer_step(store, state, cfg, 0.1);
    CHECK(p.at(0) == 1.0 * (1.0 - 0.1 * 0.5));
  }

  SECTION("every parameter is visited even without gradients") {
    ParameterStore store;
    store.create("a", ParamGroup::backbone_img, 2, 2, {1, 2, 3, 4});
    store.create("b", ParamGroup::prompts, 1, 3, {0, 0, 0});
    Tensor c = store.create("c", ParamGroup::auxiliary, 1, 1, {5.0});
    c.accumulate_grad(0, 2.0);
    OptimState state;
    CHECK(optimizer_step(store, state, OptimConfig{}, 1e-3) == 3);
    CHECK(state.m.size() == 3);
  }

  SECTION("non-finite gradients abort") {
    ParameterStore store;
    Tensor p = store.create("p", ParamGroup::auxiliary, 1, 1, {1.0});
    p.accumulate_grad(0, std::numeric_limits<double>::quiet_NaN());
    OptimState state;
    CHECK_THROWS_AS(optimizer_step(store, state, OptimConfig{}, 0.1), NumericError);
  }

  SECTION("moment shape drift is rejected") {
    ParameterStore store;
    store.create("p", ParamGroup::auxiliary, 1, 2, {1.0, 2.0});
    OptimState state;
    state.m["p"] = {0.0};  // wrong length
    state.v["p"] = {0.0};
    CHECK_THROWS_AS(optimizer_step(store, state, OptimConfig{}, 0.1), std::invalid_argument);
  }
}

TEST_CASE("metrics csv is stable and carries the header") {
  const fs::path dir = make_temp_dir("csv");
  const std::vector<MetricsRow> rows{{1, 1, 0.5, 1.25, 2.5, 3.75}, {2, 1, 0.25, 1.0, 2.0, 3.0}};
  write_metrics_csv(rows, dir / "m.csv");
  const std::string text = slurp(dir / "m.csv");
  CHECK(text.rfind("step,epoch,lr,l_cl,l_mae,l_all\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  CHECK(text.find("1,1,0.5,1.25,2.5,3.75\n") != std::string::npos);
  write_metrics_csv(rows, dir / "m2.csv");
  CHECK(slurp(dir / "m.csv") == slurp(dir / "m2.csv"));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip preserves every bit") {
  const fs::path dir = make_temp_dir("ckpt");
  Model a = build_model(micro_model(), {"alpha", "beta"});

  // nontrivial weights and optimizer state: two synthetic steps
  OptimState state;
  Rng rng(99);
  for (int step = 0; step < 2; ++step) {
    for (const std::string& name : a.store.names()) {
      Tensor p = a.store.get(name);
      for (std::size_t i = 0; i < p.size(); ++i) p.accumulate_grad(i, rng.normal());
    }
    optimizer_step(a.store, state, OptimConfig{}, 1e-3);
    a.store.clear_grads();
  }

  save_checkpoint(a, dir / "a.ckpt", &state);

  OptimState restored;
  Model b = load_checkpoint(dir / "a.ckpt", LoadMode::full, &restored);

  REQUIRE(b.store.names() == a.store.names());
  CHECK(b.dataset_ids == a.dataset_ids);
  for (const std::string& name : a.store.names()) {
    INFO(name);
    CHECK(bits_equal(b.store.get(name).values(), a.store.get(name).values()));
    CHECK(b.store.group_of(name) == a.store.group_of(name));
  }
  CHECK(restored.step == state.step);
  REQUIRE(restored.m.size() == state.m.size());
  for (const auto& [name, m] : state.m) {
    INFO(name);
    CHECK(bits_equal(restored.m.at(name), m));
    CHECK(bits_equal(restored.v.at(name), state.v.at(name)));
  }

  // a re-save of the loaded model reproduces the file byte for byte
  save_checkpoint(b, dir / "b.ckpt", &restored);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("backbone-only load keeps heads and prompts fresh") {
  const fs::path dir = make_temp_dir("bbonly");
  const ModelConfig mc = micro_model();
  Model a = build_model(mc, {"alpha", "beta"});
  for (const std::string& name : a.store.names()) {
    for (double& v : a.store.get(name).mutable_values()) v += 0.123;
  }
  OptimState state;
  state.step = 5;
  state.m["img/patch_embed/w"] = std::vector<double>(
      a.store.get("img/patch_embed/w").size(), 1.0);
  state.v["img/patch_embed/w"] = std::vector<double>(
      a.store.get("img/patch_embed/w").size(), 2.0);
  save_checkpoint(a, dir / "a.ckpt", &state);

  Model fresh = build_model(mc, {"alpha", "beta"});
  OptimState untouched;
  Model d = load_checkpoint(dir / "a.ckpt", LoadMode::backbone_only, &untouched);

  std::size_t backbone_seen = 0, other_seen = 0;
  for (const std::string& name : d.store.names()) {
    INFO(name);
    const ParamGroup g = d.store.group_of(name);
    if (g == ParamGroup::backbone_img || g == ParamGroup::backbone_pcd) {
      CHECK(bits_equal(d.store.get(name).values(), a.store.get(name).values()));
      ++backbone_seen;
    } else {
      CHECK(bits_equal(d.store.get(name).values(), fresh.store.get(name).values()));
      ++other_seen;
    }
  }
  CHECK(backbone_seen > 0);
  CHECK(other_seen > 0);
  CHECK(!d.store.names_in_group(ParamGroup::prompts).empty());
  CHECK(!d.store.names_in_group(ParamGroup::adapters).empty());
  CHECK(!d.store.names_in_group(ParamGroup::auxiliary).empty());

  // optimizer state stays out of a backbone-only load
  CHECK(untouched.step == 0);
  CHECK(untouched.m.empty());
  fs::remove_all(dir);
}

TEST_CASE("checkpoint errors are explicit") {
  const fs::path dir = make_temp_dir("ckpterr");
  const ModelConfig mc = micro_model();
  Model a = build_model(mc, {"alpha"});
  save_checkpoint(a, dir / "a.ckpt");

  SECTION("shape drift names the parameter") {
    ModelConfig narrow = mc;
    narrow.image.bev_feature_dim = 4;
    narrow.point.bev_feature_dim = 4;
    Model e = build_model(narrow, {"alpha"});
    try {
      load_checkpoint_into(e, dir / "a.ckpt");
      FAIL("expected a shape drift error");
    } catch (const FormatError& err) {
      const std::string msg = err.what();
      CHECK(msg.find("shape drift") != std::string::npos);
      const auto open = msg.find('\'');
      const auto close = msg.find('\'', open + 1);
      REQUIRE(open != std::string::npos);
      REQUIRE(close != std::string::npos);
      const std::string culprit = msg.substr(open + 1, close - open - 1);
      INFO(msg);
      CHECK(e.store.has(culprit));
    }
  }

  SECTION("missing parameters are reported on a full load") {
    Model f = build_model(mc, {"alpha", "gamma"});  // extra prompt in the live model
    CHECK_THROWS_AS(load_checkpoint_into(f, dir / "a.ckpt"), FormatError);
  }

  SECTION("bad magic") {
    detail::write_file_bytes(dir / "junk.ckpt", "NOTACKPT????????");
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), FormatError);
  }

  SECTION("truncated payload") {
    std::string bytes = slurp(dir / "a.ckpt");
    bytes.resize(bytes.size() - 64);
    detail::write_file_bytes(dir / "trunc.ckpt", bytes);
    CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), FormatError);
  }

  SECTION("a checkpoint without optimizer state leaves the target state alone") {
    OptimState passed;
    passed.step = 7;
    Model g = load_checkpoint(dir / "a.ckpt", LoadMode::full, &passed);
    CHECK(passed.step == 7);
    CHECK(g.store.size() == a.store.size());
  }
  fs::remove_all(dir);
}

TEST_CASE("pretrain runs deterministically and logs the schedule") {
  const fs::path root = make_micro_root("pretrain");
  const PretrainConfig cfg = micro_pretrain();

  PretrainResult run1 = pretrain(root, cfg);
  REQUIRE(run1.metrics.size() == 12);  // 8 frames / batch 2 = 4 steps, 3 epochs

  LrSchedule schedule = cfg.schedule;
  schedule.steps_per_epoch = 4;
  for (std::size_t i = 0; i < run1.metrics.size(); ++i) {
    const MetricsRow& r = run1.metrics[i];
    CHECK(r.step == i + 1);
    CHECK(r.epoch == 1 + i / 4);
    CHECK(r.lr == lr_at(schedule, i + 1));
    CHECK(std::isfinite(r.l_all));
    CHECK(r.l_cl >= 0.0);
    CHECK(r.l_mae >= 0.0);
    CHECK(r.l_all == r.l_cl + r.l_mae);
  }
  CHECK(run1.optimizer.step == 12);
  CHECK(run1.optimizer.m.size() == run1.model.store.size());

  PretrainResult run2 = pretrain(root, cfg);
  const fs::path dir = make_temp_dir("repro");
  write_metrics_csv(run1.metrics, dir / "m1.csv");
  write_metrics_csv(run2.metrics, dir / "m2.csv");
  CHECK(slurp(dir / "m1.csv") == slurp(dir / "m2.csv"));
  save_checkpoint(run1.model, dir / "c1.ckpt", &run1.optimizer);
  save_checkpoint(run2.model, dir / "c2.ckpt", &run2.optimizer);
  CHECK(slurp(dir / "c1.ckpt") == slurp(dir / "c2.ckpt"));

  PretrainConfig other = cfg;
  other.run_seed = 22;
  PretrainResult run3 = pretrain(root, other);
  bool any_differs = false;
  for (std::size_t i = 0; i < run3.metrics.size(); ++i) {
    any_differs = any_differs || run3.metrics[i].l_all != run1.metrics[i].l_all;
  }
  CHECK(any_differs);

  fs::remove_all(dir);
  fs::remove_all(root);
}

TEST_CASE("pretrain aborts on a non-finite loss with step context") {
  const fs::path root = make_micro_root("blowup");
  PretrainConfig cfg = micro_pretrain();
  cfg.schedule.peak_lr = 1e200;  // one warmup step lifts weights past overflow
  try {
    pretrain(root, cfg);
    FAIL("expected a numeric abort");
  } catch (const NumericError& err) {
    CHECK(std::string(err.what()).find("step") != std::string::npos);
  }
  fs::remove_all(root);
}

TEST_CASE("pretrain rejects empty data") {
  const fs::path root = make_temp_dir("empty");
  write_manifest({}, root);
  CHECK_THROWS_AS(pretrain(root, micro_pretrain()), std::invalid_argument);
  fs::remove_all(root);
}

TEST_CASE("linear probe learns a head over frozen features") {
  const fs::path root = make_micro_root("probe");

  SECTION("correspond strategy trains and reports sane metrics") {
    Model m = build_model(micro_model(), {"alpha", "beta"});
    ProbeConfig pc;
    pc.epochs = 30;
    pc.batch_size = 2;
    pc.lr = 0.005;
    pc.seed = 5;
    const ProbeReport report = linear_probe(m, root, "alpha", pc);
    CHECK(report.frames == 4);
    CHECK(report.prompt_used == "alpha");
    CHECK(report.accuracy >= 0.0);
    CHECK(report.accuracy <= 1.0);
    CHECK(report.iou >= 0.0);
    CHECK(report.iou <= 1.0);
    CHECK(std::isfinite(report.first_loss));
    CHECK(report.final_loss < report.first_loss);
  }

  SECTION("the none strategy runs the norms plain") {
    Model m = build_model(micro_model(), {"alpha", "beta"});
    ProbeConfig pc;
    pc.epochs = 2;
    pc.strategy = PromptStrategy::none;
    const ProbeReport report = linear_probe(m, root, "alpha", pc);
    CHECK(report.prompt_used.empty());
    CHECK_FALSE(m.registry.enabled);
  }

  SECTION("the wrong strategy runs under a donor prompt") {
    Model m = build_model(micro_model(), {"alpha", "beta"});
    ProbeConfig pc;
    pc.epochs = 2;
    pc.strategy = PromptStrategy::wrong;
    pc.source_dataset = "beta";
    const ProbeReport report = linear_probe(m, root, "alpha", pc);
    CHECK(report.prompt_used == "alpha");
    Model fresh = build_model(micro_model(), {"alpha", "beta"});
    CHECK(bits_equal(m.registry.prompt("alpha").values(),
                     fresh.registry.prompt("beta").values()));
  }

  SECTION("unknown datasets are rejected") {
    Model m = build_model(micro_model(), {"alpha", "beta"});
    CHECK_THROWS_AS(linear_probe(m, root, "missing", ProbeConfig{}), std::invalid_argument);
  }
  fs::remove_all(root);
}
