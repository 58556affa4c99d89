#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "bevalign/data.hpp"
#include "bevalign/losses.hpp"

namespace bevalign {

struct ModelConfig {
  ImageEncoderConfig image;
  PointEncoderConfig point;
  BevGridSpec grid;
  DepthBins depth;
  bool prompts_enabled = true;
  std::size_t prompt_dim = 16;
  std::uint64_t init_seed = 1;
};

inline void validate_model_config(const ModelConfig& c) {
  validate_image_config(c.image);
  validate_point_config(c.point);
  validate_grid(c.grid);
  validate_bins(c.depth);
  if (c.image.bev_feature_dim != c.point.bev_feature_dim) {
    throw std::invalid_argument("model: the two BEV feature widths must match");
  }
  if (c.image.depth_bins != c.depth.count) {
    throw std::invalid_argument("model: depth head width must match the bin count");
  }
  if (c.prompt_dim < 1) throw std::invalid_argument("model: prompt_dim must be >= 1");
}

// Everything trainable under one roof. Parameters live in `store`; the
// encoder param structs hold shared handles into it, so a Model must not
// be copied (twins would alias weights).
struct Model {
  ModelConfig cfg;
  std::vector<std::string> dataset_ids;
  ParameterStore store;
  PromptRegistry registry;
  ImageEncoderParams image;
  MaeDecoderParams decoder;
  PointEncoderParams point;

  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
};

// Init order (image encoder, decoder, point encoder) is part of the
// checkpoint contract: fresh-init comparisons depend on it.
inline Model build_model(const ModelConfig& cfg, std::vector<std::string> dataset_ids) {
  validate_model_config(cfg);
  std::sort(dataset_ids.begin(), dataset_ids.end());
  dataset_ids.erase(std::unique(dataset_ids.begin(), dataset_ids.end()), dataset_ids.end());

  Model m;
  m.cfg = cfg;
  m.dataset_ids = std::move(dataset_ids);
  m.registry.enabled = cfg.prompts_enabled;
  m.registry.prompt_dim = cfg.prompt_dim;
  PromptRegistry* reg = cfg.prompts_enabled ? &m.registry : nullptr;
  if (reg) {
    for (const std::string& id : m.dataset_ids) m.registry.register_dataset(m.store, id);
  }
  Rng rng(cfg.init_seed);
  m.image = init_image_encoder(m.store, reg, cfg.image, rng);
  m.decoder = init_mae_decoder(m.store, cfg.image, rng);
  m.point = init_point_encoder(m.store, reg, cfg.point, m.cfg.grid.cell_count(), rng);
  return m;
}

inline void check_sample_compatible(const Model& m, const SceneSample& s) {
  for (const Tensor& img : s.images) {
    if (img.rows() != m.cfg.image.image_height ||
        img.cols() != m.cfg.image.image_width * m.cfg.image.channels) {
      throw std::invalid_argument("forward: sample image size differs from the model config");
    }
  }
  if (s.channels != m.cfg.image.channels) {
    throw std::invalid_argument("forward: sample channel count differs from the model config");
  }
  if (s.points.rows() > 0 && s.points.cols() != m.cfg.point.input_feature_dim) {
    throw std::invalid_argument("forward: point feature width differs from the model config");
  }
}

struct ForwardOutput {
  SampleForward loss_inputs;
  ImageForwardResult image;
  PointForwardResult point;
};

// One sample through both encoders plus the reconstruction decoder. The
// prompt context is resolved per sample: a dataset id selects its prompt,
// nullopt runs every norm plain. `masked` off disables patch masking
// (feature extraction for probes).
inline ForwardOutput forward_sample(Tape& tape, Model& m, const SceneSample& sample,
                                    std::uint64_t mask_seed,
                                    const std::optional<std::string>& prompt_dataset,
                                    NormStats* stats = nullptr, bool masked = true) {
  check_sample_compatible(m, sample);
  if (prompt_dataset && m.registry.enabled && !m.registry.has_dataset(*prompt_dataset)) {
    throw std::invalid_argument("forward: unregistered dataset '" + *prompt_dataset + "'");
  }
  NormContext ctx;
  ctx.registry = m.registry.enabled ? &m.registry : nullptr;
  ctx.dataset = m.registry.enabled ? prompt_dataset : std::nullopt;
  ctx.stats = stats;

  ImageEncoderParams image_params = m.image;  // handle copies, same weights
  if (!masked) image_params.cfg.mask_ratio = 0.0;

  ForwardOutput out;
  out.image = image_forward(tape, image_params, sample.images, sample.rig, m.cfg.grid,
                            m.cfg.depth, ctx, mask_seed);
  out.point = point_forward(tape, m.point, sample.points, m.cfg.grid, ctx);

  out.loss_inputs.bev_img = out.image.bev.features;
  out.loss_inputs.bev_pcd = out.point.bev.features;
  out.loss_inputs.occupied = out.point.occupied;
  for (std::size_t cam = 0; cam < out.image.tokens.size(); ++cam) {
    out.loss_inputs.recon.push_back(mae_decode(tape, m.decoder, out.image.tokens[cam]));
    out.loss_inputs.targets.push_back(out.image.originals[cam]);
    out.loss_inputs.masks.push_back(out.image.masks[cam]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config snapshot serialization, shared by checkpoints and run configs.

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"image",
           {{"image_height", c.image.image_height},
            {"image_width", c.image.image_width},
            {"channels", c.image.channels},
            {"patch_size", c.image.patch_size},
            {"embed_dim", c.image.embed_dim},
            {"block_count", c.image.block_count},
            {"window_size", c.image.window_size},
            {"head_count", c.image.head_count},
            {"mask_ratio", c.image.mask_ratio},
            {"depth_bins", c.image.depth_bins},
            {"bev_feature_dim", c.image.bev_feature_dim}}},
          {"point",
           {{"input_feature_dim", c.point.input_feature_dim},
            {"embed_dim", c.point.embed_dim},
            {"block_count", c.point.block_count},
            {"head_count", c.point.head_count},
            {"bev_feature_dim", c.point.bev_feature_dim}}},
          {"grid",
           {{"x_min", c.grid.x_min},
            {"x_max", c.grid.x_max},
            {"y_min", c.grid.y_min},
            {"y_max", c.grid.y_max},
            {"resolution", c.grid.resolution},
            {"feature_dim", c.grid.feature_dim}}},
          {"depth", {{"d_min", c.depth.d_min}, {"d_max", c.depth.d_max}, {"count", c.depth.count}}},
          {"prompts_enabled", c.prompts_enabled},
          {"prompt_dim", c.prompt_dim},
          {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  const auto& img = j.at("image");
  c.image.image_height = img.at("image_height").get<std::size_t>();
  c.image.image_width = img.at("image_width").get<std::size_t>();
  c.image.channels = img.at("channels").get<std::size_t>();
  c.image.patch_size = img.at("patch_size").get<std::size_t>();
  c.image.embed_dim = img.at("embed_dim").get<std::size_t>();
  c.image.block_count = img.at("block_count").get<std::size_t>();
  c.image.window_size = img.at("window_size").get<std::size_t>();
  c.image.head_count = img.at("head_count").get<std::size_t>();
  c.image.mask_ratio = img.at("mask_ratio").get<double>();
  c.image.depth_bins = img.at("depth_bins").get<std::size_t>();
  c.image.bev_feature_dim = img.at("bev_feature_dim").get<std::size_t>();
  const auto& pt = j.at("point");
  c.point.input_feature_dim = pt.at("input_feature_dim").get<std::size_t>();
  c.point.embed_dim = pt.at("embed_dim").get<std::size_t>();
  c.point.block_count = pt.at("block_count").get<std::size_t>();
  c.point.head_count = pt.at("head_count").get<std::size_t>();
  c.point.bev_feature_dim = pt.at("bev_feature_dim").get<std::size_t>();
  const auto& g = j.at("grid");
  c.grid.x_min = g.at("x_min").get<double>();
  c.grid.x_max = g.at("x_max").get<double>();
  c.grid.y_min = g.at("y_min").get<double>();
  c.grid.y_max = g.at("y_max").get<double>();
  c.grid.resolution = g.at("resolution").get<std::size_t>();
  c.grid.feature_dim = g.at("feature_dim").get<std::size_t>();
  const auto& d = j.at("depth");
  c.depth.d_min = d.at("d_min").get<double>();
  c.depth.d_max = d.at("d_max").get<double>();
  c.depth.count = d.at("count").get<std::size_t>();
  c.prompts_enabled = j.at("prompts_enabled").get<bool>();
  c.prompt_dim = j.at("prompt_dim").get<std::size_t>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

}  // namespace bevalign
