#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bevalign/data.hpp"
#include "bevalign/model.hpp"
#include "bevalign/optim.hpp"

namespace bevalign {

// ---------------------------------------------------------------------------
// Checkpoint container: "BVALCKPT" magic, u32 little-endian JSON header
// length, JSON header (config snapshot, parameter table, optimizer table),
// then f64 little-endian payloads in header order.

namespace detail {

inline constexpr char kCheckpointMagic[9] = "BVALCKPT";

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t take_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

inline double take_f64(const unsigned char* p) { return std::bit_cast<double>(take_u64(p)); }

}  // namespace detail

inline void save_checkpoint(const Model& model, const std::filesystem::path& path,
                            const OptimState* opt = nullptr) {
  nlohmann::json params = nlohmann::json::array();
  for (const std::string& name : model.store.names()) {
    const Tensor t = model.store.get(name);
    params.push_back({{"name", name},
                      {"group", group_name(model.store.group_of(name))},
                      {"rows", t.rows()},
                      {"cols", t.cols()}});
  }
  nlohmann::json header{{"version", 1},
                        {"config", model_config_to_json(model.cfg)},
                        {"dataset_ids", model.dataset_ids},
                        {"params", std::move(params)}};
  if (opt) {
    std::vector<std::string> entries;
    for (const auto& [name, m] : opt->m) {
      if (model.store.has(name)) entries.push_back(name);
    }
    header["optimizer"] = {{"step", opt->step}, {"entries", entries}};
  }

  const std::string header_text = header.dump();
  std::string bytes;
  bytes.append(detail::kCheckpointMagic, 8);
  detail::put_u32(bytes, static_cast<std::uint32_t>(header_text.size()));
  bytes += header_text;
  for (const std::string& name : model.store.names()) {
    const Tensor t = model.store.get(name);
    for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64(bytes, t.at(i));
  }
  if (opt) {
    for (const auto& jname : header.at("optimizer").at("entries")) {
      const std::string name = jname.get<std::string>();
      for (double v : opt->m.at(name)) detail::put_f64(bytes, v);
      for (double v : opt->v.at(name)) detail::put_f64(bytes, v);
    }
  }
  detail::write_file_bytes(path, bytes);
}

enum class LoadMode { full, backbone_only };

namespace detail {

struct CheckpointFile {
  nlohmann::json header;
  std::string bytes;
  std::size_t payload_offset = 0;
};

inline CheckpointFile open_checkpoint(const std::filesystem::path& path) {
  CheckpointFile f;
  f.bytes = read_file_bytes(path);
  if (f.bytes.size() < 12 || f.bytes.compare(0, 8, kCheckpointMagic, 8) != 0) {
    throw FormatError("bad checkpoint magic: " + path.string());
  }
  const auto* base = reinterpret_cast<const unsigned char*>(f.bytes.data());
  const std::uint32_t header_len = take_u32(base + 8);
  if (12 + static_cast<std::size_t>(header_len) > f.bytes.size()) {
    throw FormatError("truncated checkpoint header: " + path.string());
  }
  f.header = nlohmann::json::parse(f.bytes.begin() + 12, f.bytes.begin() + 12 + header_len,
                                   nullptr, false);
  if (f.header.is_discarded() || !f.header.is_object()) {
    throw FormatError("unparsable checkpoint header: " + path.string());
  }
  if (f.header.value("version", 0) != 1) {
    throw FormatError("unsupported checkpoint version: " + path.string());
  }
  f.payload_offset = 12 + header_len;
  return f;
}

}  // namespace detail

// Copies stored values into an existing model. `full` requires the stored
// and live parameter sets to agree exactly; `backbone_only` copies the two
// encoder backbones and leaves prompts, adapters, and auxiliaries at their
// fresh initialization. Optimizer state is restored only on a full load.
inline void load_checkpoint_into(Model& model, const std::filesystem::path& path,
                                 LoadMode mode = LoadMode::full, OptimState* opt_out = nullptr) {
  const detail::CheckpointFile f = detail::open_checkpoint(path);
  const auto* base = reinterpret_cast<const unsigned char*>(f.bytes.data());

  auto wanted = [&](ParamGroup g) {
    return mode == LoadMode::full ||
           (g == ParamGroup::backbone_img || g == ParamGroup::backbone_pcd);
  };

  std::size_t cursor = f.payload_offset;
  std::size_t stored_count = 0;
  try {
    for (const auto& entry : f.header.at("params")) {
      const std::string name = entry.at("name").get<std::string>();
      const std::size_t rows = entry.at("rows").get<std::size_t>();
      const std::size_t cols = entry.at("cols").get<std::size_t>();
      const std::string group = entry.at("group").get<std::string>();
      ++stored_count;
      if (cursor + rows * cols * 8 > f.bytes.size()) {
        throw FormatError("truncated checkpoint payload at '" + name + "'");
      }
      const auto parsed_group = group_from_name(group);
      if (!parsed_group) throw FormatError("unknown parameter group '" + group + "'");
      const ParamGroup stored_group = *parsed_group;
      if (!wanted(stored_group)) {
        cursor += rows * cols * 8;
        continue;
      }
      if (!model.store.has(name)) {
        throw FormatError("checkpoint parameter '" + name + "' does not exist in the model");
      }
      Tensor t = model.store.get(name);
      if (t.rows() != rows || t.cols() != cols) {
        throw FormatError("shape drift for parameter '" + name + "': checkpoint " +
                          std::to_string(rows) + "x" + std::to_string(cols) + ", model " +
                          std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
      }
      if (model.store.group_of(name) != stored_group) {
        throw FormatError("group drift for parameter '" + name + "'");
      }
      auto& vals = t.mutable_values();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        vals[i] = detail::take_f64(base + cursor);
        cursor += 8;
      }
    }
    if (mode == LoadMode::full) {
      if (stored_count != model.store.size()) {
        for (const std::string& name : model.store.names()) {
          bool found = false;
          for (const auto& entry : f.header.at("params")) {
            found = found || entry.at("name").get<std::string>() == name;
          }
          if (!found) throw FormatError("model parameter '" + name + "' missing from checkpoint");
        }
      }
      if (opt_out && f.header.contains("optimizer")) {
        opt_out->step = f.header.at("optimizer").at("step").get<std::size_t>();
        opt_out->m.clear();
        opt_out->v.clear();
        for (const auto& jname : f.header.at("optimizer").at("entries")) {
          const std::string name = jname.get<std::string>();
          if (!model.store.has(name)) {
            throw FormatError("optimizer state for unknown parameter '" + name + "'");
          }
          const std::size_t n = model.store.get(name).size();
          if (cursor + 2 * n * 8 > f.bytes.size()) {
            throw FormatError("truncated optimizer payload at '" + name + "'");
          }
          auto& m = opt_out->m[name];
          auto& v = opt_out->v[name];
          m.resize(n);
          v.resize(n);
          for (std::size_t i = 0; i < n; ++i, cursor += 8) m[i] = detail::take_f64(base + cursor);
          for (std::size_t i = 0; i < n; ++i, cursor += 8) v[i] = detail::take_f64(base + cursor);
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint header field: " + std::string(e.what()));
  }
}

// Rebuilds the model the checkpoint describes (fresh init from its config
// snapshot), then loads by mode.
inline Model load_checkpoint(const std::filesystem::path& path, LoadMode mode = LoadMode::full,
                             OptimState* opt_out = nullptr) {
  const detail::CheckpointFile f = detail::open_checkpoint(path);
  ModelConfig cfg;
  std::vector<std::string> ids;
  try {
    cfg = model_config_from_json(f.header.at("config"));
    ids = f.header.at("dataset_ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint config: " + std::string(e.what()));
  }
  Model model = build_model(cfg, std::move(ids));
  load_checkpoint_into(model, path, mode, opt_out);
  return model;
}

// ---------------------------------------------------------------------------
// Pretraining loop.

struct MetricsRow {
  std::size_t step = 0, epoch = 0;
  double lr = 0, l_cl = 0, l_mae = 0, l_all = 0;
};

inline void write_metrics_csv(const std::vector<MetricsRow>& rows,
                              const std::filesystem::path& path) {
  std::string out = "step,epoch,lr,l_cl,l_mae,l_all\n";
  char line[160];
  for (const MetricsRow& r : rows) {
    std::snprintf(line, sizeof(line), "%zu,%zu,%.17g,%.17g,%.17g,%.17g\n", r.step, r.epoch, r.lr,
                  r.l_cl, r.l_mae, r.l_all);
    out += line;
  }
  detail::write_file_bytes(path, out);
}

struct PretrainConfig {
  ModelConfig model;
  ContrastiveConfig contrastive;
  LrSchedule schedule;  // steps_per_epoch is derived from the data
  OptimConfig optim;
  std::size_t batch_size = 8;
  bool masked_only = true;
  std::uint64_t run_seed = 1;  // drives epoch shuffles, masking, cell sampling
};

struct PretrainResult {
  Model model;
  OptimState optimizer;
  std::vector<MetricsRow> metrics;
  bool clamped_any = false;  // some batch had fewer occupied cells than k
};

// One self-supervised run over the datasets under `root`: mixed epoch
// schedule, per-sample prompt resolution, combined loss, one optimizer
// step per batch. Deterministic for a fixed config and seed.
inline PretrainResult pretrain(const std::filesystem::path& root, const PretrainConfig& cfg) {
  const std::vector<ManifestEntry> manifest = read_manifest(root);
  if (manifest.empty()) throw std::invalid_argument("pretrain: manifest lists no datasets");
  std::vector<DatasetDescriptor> descs;
  std::vector<std::string> ids;
  std::size_t entries_per_epoch = 0;
  for (const ManifestEntry& e : manifest) {
    descs.push_back(e.descriptor);
    ids.push_back(e.descriptor.dataset_id);
    entries_per_epoch += e.descriptor.frame_count * e.descriptor.repeat_times;
  }
  if (entries_per_epoch == 0) throw std::invalid_argument("pretrain: no frames to train on");

  PretrainResult result;
  result.model = build_model(cfg.model, ids);
  Model& model = result.model;

  LrSchedule schedule = cfg.schedule;
  schedule.steps_per_epoch = (entries_per_epoch + cfg.batch_size - 1) / cfg.batch_size;
  validate_schedule(schedule);

  std::size_t global_step = 0;
  for (std::size_t epoch = 1; epoch <= schedule.total_epochs; ++epoch) {
    const MixSchedule mix =
        build_epoch_schedule(descs, mix_seed(cfg.run_seed, 0x65706f63ULL, epoch));
    for (std::size_t start = 0; start < mix.entries.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(start + cfg.batch_size, mix.entries.size());
      Tape tape;
      LossReport report;
      try {
        std::vector<SampleForward> batch;
        for (std::size_t slot = start; slot < stop; ++slot) {
          const auto& [dataset_id, frame_id] = mix.entries[slot];
          const SceneSample sample = read_sample(sample_path(root, dataset_id, frame_id));
          const std::optional<std::string> prompt =
              model.registry.enabled && model.registry.has_dataset(dataset_id)
                  ? std::optional<std::string>(dataset_id)
                  : std::nullopt;
          const std::uint64_t mask_seed = mix_seed(cfg.run_seed, global_step + 1, slot - start);
          batch.push_back(
              forward_sample(tape, model, sample, mask_seed, prompt).loss_inputs);
        }
        ContrastiveConfig ccfg = cfg.contrastive;
        ccfg.sample_seed = mix_seed(cfg.run_seed, 0x6e636531ULL, global_step + 1);
        report = combined_loss(tape, batch, ccfg, cfg.masked_only);
        result.clamped_any = result.clamped_any || report.clamped;
        if (!std::isfinite(report.l_all.item())) {
          throw NumericError("non-finite loss");
        }
        tape.backward(report.l_all);
      } catch (const NumericError& e) {
        throw NumericError("pretrain step " + std::to_string(global_step + 1) + " (epoch " +
                           std::to_string(epoch) + "): " + e.what());
      }
      const double l_all = report.l_all.item();
      ++global_step;
      const double lr = lr_at(schedule, global_step);
      optimizer_step(model.store, result.optimizer, cfg.optim, lr);
      model.store.clear_grads();
      result.metrics.push_back(
          {global_step, epoch, lr, report.l_cl.item(), report.l_mae.item(), l_all});
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Linear probe: frozen backbones, one linear layer from the concatenated
// BEV features to per-cell box occupancy.

struct ProbeConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 4;  // frames per head update
  double lr = 0.05;
  OptimConfig optim{0.9, 0.999, 1e-8, 0.0};
  PromptStrategy strategy = PromptStrategy::correspond;
  std::string source_dataset;  // donor prompt for the wrong strategy
  std::uint64_t seed = 0;
};

struct ProbeReport {
  double accuracy = 0, iou = 0;
  double first_loss = 0, final_loss = 0;  // epoch means
  std::size_t frames = 0;
  std::string prompt_used;  // empty when norms ran plain
};

// The probe consumes the model: the prompt strategy may rewrite the
// dataset's prompt or disable the registry. Backbones stay frozen by
// construction: features are extracted once, detached, and only the head
// sees the optimizer.
inline ProbeReport linear_probe(Model& model, const std::filesystem::path& root,
                                const std::string& dataset_id, const ProbeConfig& cfg) {
  const std::vector<ManifestEntry> manifest = read_manifest(root);
  const ManifestEntry* entry = nullptr;
  for (const ManifestEntry& e : manifest) {
    if (e.descriptor.dataset_id == dataset_id) entry = &e;
  }
  if (!entry) throw std::invalid_argument("probe: dataset '" + dataset_id + "' not in manifest");
  if (entry->descriptor.frame_count == 0) throw std::invalid_argument("probe: dataset is empty");

  std::optional<std::string> prompt;
  if (model.registry.enabled) {
    prompt = init_finetune_prompt(model.registry, dataset_id, cfg.strategy, cfg.source_dataset,
                                  cfg.seed);
  }

  // frozen-backbone features, masking off, one pass per frame
  std::vector<Tensor> features, labels;
  for (std::size_t f = 0; f < entry->descriptor.frame_count; ++f) {
    const SceneSample sample = read_sample(sample_path(root, dataset_id, f));
    Tape tape;
    ForwardOutput fwd = forward_sample(tape, model, sample, 0, prompt, nullptr, false);
    Tensor cat = concat_cols(tape, {fwd.loss_inputs.bev_pcd, fwd.loss_inputs.bev_img});
    features.push_back(Tensor::from_values(cat.rows(), cat.cols(), cat.values()));
    labels.push_back(occupancy_labels(sample.boxes, model.cfg.grid));
  }
  const std::size_t width = features[0].cols();

  ParameterStore head;
  head.create_zeros("probe/w", ParamGroup::auxiliary, width, 1);
  head.create_zeros("probe/b", ParamGroup::auxiliary, 1, 1);
  OptimState state;

  Rng order_rng(mix_seed(cfg.seed, 0x70726f62ULL));
  std::vector<std::size_t> order(features.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  ProbeReport report;
  report.prompt_used = prompt.value_or("");
  report.frames = features.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(start + cfg.batch_size, order.size());
      Tape tape;
      Tensor total = Tensor::scalar(0.0);
      for (std::size_t i = start; i < stop; ++i) {
        const std::size_t f = order[i];
        Tensor z = add_rowwise(tape, matmul(tape, features[f], head.get("probe/w")),
                               head.get("probe/b"));
        Tensor diff = sub(tape, z, labels[f]);
        total = add(tape, total, mean(tape, mul(tape, diff, diff)));
      }
      total = scale(tape, total, 1.0 / static_cast<double>(stop - start));
      epoch_loss += total.item();
      ++steps;
      tape.backward(total);
      optimizer_step(head, state, cfg.optim, cfg.lr);
      head.clear_grads();
    }
    epoch_loss /= static_cast<double>(steps);
    if (epoch == 0) report.first_loss = epoch_loss;
    report.final_loss = epoch_loss;
  }

  // threshold the regression head at 0.5 for the cell-wise metrics
  const Tensor w = head.get("probe/w");
  const double b = head.get("probe/b").item();
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t f = 0; f < features.size(); ++f) {
    for (std::size_t cell = 0; cell < features[f].rows(); ++cell) {
      double z = b;
      for (std::size_t c = 0; c < width; ++c) z += features[f].value(cell, c) * w.at(c);
      const bool pred = z >= 0.5;
      const bool truth = labels[f].at(cell) > 0.5;
      tp += pred && truth;
      fp += pred && !truth;
      fn += !pred && truth;
      tn += !pred && !truth;
    }
  }
  const std::size_t total_cells = tp + fp + fn + tn;
  report.accuracy = total_cells ? static_cast<double>(tp + tn) / static_cast<double>(total_cells)
                                : 1.0;
  report.iou = (tp + fp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fp + fn) : 1.0;
  return report;
}

}  // namespace bevalign
