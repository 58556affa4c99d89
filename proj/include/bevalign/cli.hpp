#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bevalign/training.hpp"
#include "bevalign/verification.hpp"

namespace bevalign::cli {

// One run described as data: where the datasets live, where outputs go,
// and the full pretraining configuration. The constructor is the desk
// preset, sized for the default synthetic scenes (16x16 images, six
// cameras, a 16x16 BEV grid).
struct RunConfig {
  std::string data_root;  // directory holding manifest.json and the datasets
  std::string out_dir;    // receives checkpoint + metrics
  PretrainConfig train;

  RunConfig() {
    train.model.image.image_height = 16;
    train.model.image.image_width = 16;
    train.model.image.channels = 1;
    train.model.image.patch_size = 4;
    train.model.image.embed_dim = 16;
    train.model.image.block_count = 2;
    train.model.image.window_size = 2;
    train.model.image.head_count = 2;
    train.model.image.mask_ratio = 0.5;
    train.model.image.depth_bins = 4;
    train.model.image.bev_feature_dim = 16;
    train.model.point.input_feature_dim = 4;
    train.model.point.embed_dim = 16;
    train.model.point.block_count = 2;
    train.model.point.head_count = 2;
    train.model.point.bev_feature_dim = 16;
    train.model.grid = BevGridSpec{-8.0, 8.0, -8.0, 8.0, 16, 16};
    train.model.depth = DepthBins{1.0, 9.0, 4};
    train.model.prompt_dim = 16;
    train.contrastive.k = 64;
  }
};

inline nlohmann::json run_config_to_json(const RunConfig& rc) {
  const PretrainConfig& t = rc.train;
  return {{"schema_version", 1},
          {"data_root", rc.data_root},
          {"out_dir", rc.out_dir},
          {"model", model_config_to_json(t.model)},
          {"contrastive",
           {{"k", t.contrastive.k},
            {"tau", t.contrastive.tau},
            {"normalize_features", t.contrastive.normalize_features},
            {"restrict_to_occupied", t.contrastive.restrict_to_occupied}}},
          {"schedule",
           {{"peak_lr", t.schedule.peak_lr},
            {"warmup_epochs", t.schedule.warmup_epochs},
            {"total_epochs", t.schedule.total_epochs},
            {"floor_ratio", t.schedule.floor_ratio}}},
          {"optim",
           {{"beta1", t.optim.beta1},
            {"beta2", t.optim.beta2},
            {"eps", t.optim.eps},
            {"weight_decay", t.optim.weight_decay}}},
          {"batch_size", t.batch_size},
          {"masked_only", t.masked_only},
          {"run_seed", t.run_seed}};
}

namespace detail {

// Overlays `user` onto `base` key by key. Any key absent from the default
// document is unknown, so partial configs and typo rejection fall out of
// the same walk.
inline void merge_checked(nlohmann::json& base, const nlohmann::json& user,
                          const std::string& where) {
  for (const auto& [key, value] : user.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw FormatError("config: unknown key '" + path + "'");
    if (base[key].is_object()) {
      if (!value.is_object()) throw FormatError("config: '" + path + "' must be an object");
      merge_checked(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& user) {
  if (!user.is_object()) throw FormatError("config: top level must be a JSON object");
  if (!user.contains("schema_version")) throw FormatError("config: missing schema_version");
  nlohmann::json doc = run_config_to_json(RunConfig{});
  detail::merge_checked(doc, user, "");
  RunConfig rc;
  try {
    if (doc.at("schema_version").get<std::int64_t>() != 1) {
      throw FormatError("config: schema_version must be 1");
    }
    rc.data_root = doc.at("data_root").get<std::string>();
    rc.out_dir = doc.at("out_dir").get<std::string>();
    rc.train.model = model_config_from_json(doc.at("model"));
    const auto& c = doc.at("contrastive");
    rc.train.contrastive.k = c.at("k").get<std::size_t>();
    rc.train.contrastive.tau = c.at("tau").get<double>();
    rc.train.contrastive.normalize_features = c.at("normalize_features").get<bool>();
    rc.train.contrastive.restrict_to_occupied = c.at("restrict_to_occupied").get<bool>();
    const auto& s = doc.at("schedule");
    rc.train.schedule.peak_lr = s.at("peak_lr").get<double>();
    rc.train.schedule.warmup_epochs = s.at("warmup_epochs").get<std::size_t>();
    rc.train.schedule.total_epochs = s.at("total_epochs").get<std::size_t>();
    rc.train.schedule.floor_ratio = s.at("floor_ratio").get<double>();
    const auto& o = doc.at("optim");
    rc.train.optim.beta1 = o.at("beta1").get<double>();
    rc.train.optim.beta2 = o.at("beta2").get<double>();
    rc.train.optim.eps = o.at("eps").get<double>();
    rc.train.optim.weight_decay = o.at("weight_decay").get<double>();
    rc.train.batch_size = doc.at("batch_size").get<std::size_t>();
    rc.train.masked_only = doc.at("masked_only").get<bool>();
    rc.train.run_seed = doc.at("run_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: bad field: ") + e.what());
  }
  return rc;
}

namespace detail {

inline void create_dir_or_throw(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create directory " + dir.string() + ": " + ec.message());
}

// 16-bit binary PGM, samples most significant byte first, max-normalized.
// An all-zero map stays all zero.
inline std::string encode_pgm16(const std::vector<double>& display, std::size_t rows,
                                std::size_t cols) {
  double peak = 0.0;
  for (double v : display) peak = std::max(peak, v);
  std::string bytes =
      "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n65535\n";
  for (double v : display) {
    const long q = peak > 0.0 ? std::lround(65535.0 * v / peak) : 0;
    const auto u = static_cast<unsigned>(std::clamp(q, 0L, 65535L));
    bytes.push_back(static_cast<char>((u >> 8) & 0xff));
    bytes.push_back(static_cast<char>(u & 0xff));
  }
  return bytes;
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline int cmd_gen_data(const std::string& manifest_path, const std::string& out_dir,
                        std::size_t threads, std::ostream& out) {
  const std::vector<ManifestEntry> entries = read_manifest_file(manifest_path);
  if (entries.empty()) throw FormatError("manifest lists no datasets");
  const std::filesystem::path root(out_dir);
  create_dir_or_throw(root);
  for (const ManifestEntry& e : entries) {
    generate_dataset(e.descriptor, e.scene, root, threads);
    out << e.descriptor.dataset_id << ": " << e.descriptor.frame_count << " frames\n";
  }
  write_manifest(entries, root);
  out << "manifest: " << (root / "manifest.json").string() << "\n";
  return 0;
}

inline int cmd_pretrain(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  if (rc.data_root.empty()) throw FormatError("config: data_root is empty (or pass --data)");
  if (rc.out_dir.empty()) throw FormatError("config: out_dir is empty (or pass --out)");
  const PretrainResult result = pretrain(rc.data_root, rc.train);
  if (result.clamped_any) {
    err << "warning: some batches had fewer occupied cells than k\n";
  }
  const std::filesystem::path out_root(rc.out_dir);
  create_dir_or_throw(out_root);
  const std::filesystem::path ckpt = out_root / "checkpoint.ckpt";
  const std::filesystem::path csv = out_root / "metrics.csv";
  save_checkpoint(result.model, ckpt, &result.optimizer);
  write_metrics_csv(result.metrics, csv);
  out << "steps: " << result.metrics.size() << "\n";
  if (!result.metrics.empty()) {
    out << "final l_all: " << fmt_double(result.metrics.back().l_all) << "\n";
  }
  out << "checkpoint: " << ckpt.string() << "\n";
  out << "metrics: " << csv.string() << "\n";
  return 0;
}

inline int cmd_probe(const std::string& checkpoint, const std::string& data_root,
                     const std::string& dataset, const std::string& strategy_name,
                     const ProbeConfig& base, std::ostream& out) {
  const PromptStrategy strategy = *prompt_strategy_from_name(strategy_name);
  Model model = load_checkpoint(checkpoint);
  if ((strategy == PromptStrategy::correspond || strategy == PromptStrategy::wrong) &&
      !model.cfg.prompts_enabled) {
    throw FormatError("checkpoint has no prompt parameters; strategy '" + strategy_name +
                      "' needs them");
  }
  ProbeConfig cfg = base;
  cfg.strategy = strategy;
  const ProbeReport report = linear_probe(model, data_root, dataset, cfg);
  const nlohmann::json doc{{"dataset", dataset},
                           {"strategy", strategy_name},
                           {"prompt_used", report.prompt_used},
                           {"frames", report.frames},
                           {"accuracy", report.accuracy},
                           {"iou", report.iou},
                           {"first_loss", report.first_loss},
                           {"final_loss", report.final_loss}};
  out << doc.dump(2) << "\n";
  return 0;
}

inline int cmd_gradcheck(std::size_t seeds, double h, const std::string& corrupt,
                         std::ostream& out, std::ostream& err) {
  const SuiteReport report = run_gradcheck_suite(seeds, h, corrupt);
  char line[96];
  for (const CheckResult& c : report.checks) {
    std::snprintf(line, sizeof(line), "%-22s %10.3e  tol %7.1e  %s\n", c.name.c_str(),
                  c.max_rel_error, c.tolerance, c.ok ? "ok" : "FAIL");
    out << line;
  }
  std::snprintf(line, sizeof(line), "worst: %s (max rel %.3e)\n", report.worst_name.c_str(),
                report.worst_rel_error);
  out << line;
  if (!report.ok) {
    err << "gradcheck failed:";
    for (const CheckResult& c : report.checks) {
      if (!c.ok) err << " " << c.name;
    }
    err << "\n";
    return 1;
  }
  return 0;
}

inline int cmd_inspect_bev(const std::string& checkpoint, const std::string& sample_file,
                           const std::string& prompt, const std::string& out_file,
                           std::ostream& out) {
  Model model = load_checkpoint(checkpoint);
  const SceneSample sample = read_sample(sample_file);
  std::optional<std::string> context;
  if (prompt == "none") {
    model.registry.enabled = false;
  } else {
    if (!model.cfg.prompts_enabled || !model.registry.has_dataset(prompt)) {
      throw std::invalid_argument("unknown prompt '" + prompt + "'");
    }
    context = prompt;
  }
  Tape tape;
  const ForwardOutput fwd = forward_sample(tape, model, sample, 0, context, nullptr, false);
  const Tensor& bev = fwd.loss_inputs.bev_img;
  const std::size_t g = model.cfg.grid.resolution;

  // Display order: top row is x_max so vehicle forward points up; columns
  // run y_min to y_max left to right.
  std::vector<double> display(g * g, 0.0);
  for (std::size_t row = 0; row < g; ++row) {
    for (std::size_t col = 0; col < g; ++col) {
      const std::size_t cell = (g - 1 - row) * g + col;
      double sq = 0.0;
      for (std::size_t f = 0; f < bev.cols(); ++f) sq += bev.value(cell, f) * bev.value(cell, f);
      display[row * g + col] = std::sqrt(sq);
    }
  }

  const std::filesystem::path pgm_path(out_file);
  std::filesystem::path csv_path(out_file);
  csv_path.replace_extension(".csv");
  bevalign::detail::write_file_bytes(pgm_path, encode_pgm16(display, g, g));
  std::string csv;
  for (std::size_t row = 0; row < g; ++row) {
    for (std::size_t col = 0; col < g; ++col) {
      if (col) csv += ",";
      csv += fmt_double(display[row * g + col]);
    }
    csv += "\n";
  }
  bevalign::detail::write_file_bytes(csv_path, csv);
  out << "pgm: " << pgm_path.string() << "\n";
  out << "csv: " << csv_path.string() << "\n";
  out << "grid: " << g << " x " << g << "\n";
  return 0;
}

}  // namespace detail

// Dispatches one command. `args` is argv without the program name, in
// natural order. Exit codes: 0 success, 1 verification failure, 2 usage
// or config error, 3 numeric abort.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-supervised multimodal BEV pretraining at desk scale"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic datasets a manifest lists");
  std::string gen_manifest, gen_out;
  std::size_t gen_threads = 0;
  gen->add_option("--manifest", gen_manifest, "Manifest JSON file")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--threads", gen_threads, "Worker threads per dataset (0 = auto)")
      ->capture_default_str();

  auto* pre = app.add_subcommand("pretrain", "Run the self-supervised pretraining loop");
  std::string pre_config, pre_data, pre_out;
  std::uint64_t pre_seed = 0;
  bool pre_no_prompt = false;
  pre->add_option("--config", pre_config, "Run config JSON file")->required();
  auto* pre_seed_opt = pre->add_option("--seed", pre_seed, "Override the config's run_seed");
  pre->add_flag("--no-prompt", pre_no_prompt, "Train with prompts disabled");
  pre->add_option("--data", pre_data, "Override the config's data_root");
  pre->add_option("--out", pre_out, "Override the config's out_dir");
  pre->footer("Config defaults (unknown keys are rejected):\n" +
              run_config_to_json(RunConfig{}).dump(2));

  auto* probe = app.add_subcommand("probe", "Fit a linear occupancy probe on frozen features");
  std::string probe_ckpt, probe_data, probe_dataset, probe_strategy, probe_source;
  ProbeConfig probe_cfg;
  probe->add_option("--checkpoint", probe_ckpt, "Checkpoint file")->required();
  probe->add_option("--data", probe_data, "Directory holding manifest.json and the datasets")
      ->required();
  probe->add_option("--dataset", probe_dataset, "Dataset to probe on")->required();
  probe
      ->add_option("--strategy", probe_strategy,
                   "Prompt handling: correspond, wrong, random, or none")
      ->required()
      ->check(CLI::IsMember({"correspond", "wrong", "random", "none"}));
  probe->add_option("--source", probe_source, "Donor dataset for the wrong strategy");
  probe->add_option("--seed", probe_cfg.seed, "Probe seed")->capture_default_str();
  probe->add_option("--epochs", probe_cfg.epochs, "Head training epochs")->capture_default_str();
  probe->add_option("--batch", probe_cfg.batch_size, "Frames per head update")
      ->capture_default_str();
  probe->add_option("--lr", probe_cfg.lr, "Head learning rate")->capture_default_str();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
  std::size_t grad_seeds = 10;
  double grad_h = 1e-4;
  std::string grad_corrupt;
  grad->add_option("--seeds", grad_seeds, "Seeds per check")->capture_default_str();
  grad->add_option("--step", grad_h, "Central difference step")->capture_default_str();
  grad->add_option("--corrupt", grad_corrupt,
                   "Route this check through a sign-flipped backward (fault fixture)");

  auto* inspect = app.add_subcommand("inspect-bev", "Export an image-branch BEV heatmap");
  std::string ins_ckpt, ins_sample, ins_prompt, ins_out;
  inspect->add_option("--checkpoint", ins_ckpt, "Checkpoint file")->required();
  inspect->add_option("--sample", ins_sample, "Sample container file")->required();
  inspect->add_option("--prompt", ins_prompt, "Dataset id for the prompt context, or 'none'")
      ->required();
  inspect->add_option("--out", ins_out, "PGM output path (CSV lands beside it)")->required();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return detail::cmd_gen_data(gen_manifest, gen_out, gen_threads, out);
    if (pre->parsed()) {
      const std::string text = bevalign::detail::read_file_bytes(pre_config);
      const nlohmann::json user = nlohmann::json::parse(text, nullptr, false);
      if (user.is_discarded()) throw FormatError("config: unparsable JSON: " + pre_config);
      RunConfig rc = run_config_from_json(user);
      if (!pre_data.empty()) rc.data_root = pre_data;
      if (!pre_out.empty()) rc.out_dir = pre_out;
      if (pre_seed_opt->count() > 0) rc.train.run_seed = pre_seed;
      if (pre_no_prompt) rc.train.model.prompts_enabled = false;
      return detail::cmd_pretrain(rc, out, err);
    }
    if (probe->parsed()) {
      probe_cfg.source_dataset = probe_source;
      return detail::cmd_probe(probe_ckpt, probe_data, probe_dataset, probe_strategy, probe_cfg,
                               out);
    }
    if (grad->parsed()) return detail::cmd_gradcheck(grad_seeds, grad_h, grad_corrupt, out, err);
    if (inspect->parsed()) {
      return detail::cmd_inspect_bev(ins_ckpt, ins_sample, ins_prompt, ins_out, out);
    }
    err << "error: no command\n";
    return 2;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace bevalign::cli
