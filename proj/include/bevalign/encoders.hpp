#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bevalign/geometry.hpp"
#include "bevalign/params.hpp"
#include "bevalign/prompt.hpp"
#include "bevalign/random.hpp"
#include "bevalign/tensor.hpp"

namespace bevalign {

struct ImageEncoderConfig {
  std::size_t image_height = 8, image_width = 8, channels = 1;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 8;
  std::size_t block_count = 1;
  std::size_t window_size = 2;  // tokens per window side
  std::size_t head_count = 2;
  double mask_ratio = 0.5;
  std::size_t depth_bins = 2;
  std::size_t bev_feature_dim = 8;

  std::size_t token_rows() const { return image_height / patch_size; }
  std::size_t token_cols() const { return image_width / patch_size; }
  std::size_t patch_count() const { return token_rows() * token_cols(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
};

inline void validate_image_config(const ImageEncoderConfig& c) {
  if (c.patch_size == 0 || c.image_height % c.patch_size || c.image_width % c.patch_size) {
    throw std::invalid_argument("image config: image size not divisible by patch size");
  }
  if (c.head_count == 0 || c.embed_dim % c.head_count) {
    throw std::invalid_argument("image config: embed_dim not divisible by head_count");
  }
  if (c.window_size == 0 || c.token_rows() % c.window_size || c.token_cols() % c.window_size) {
    throw std::invalid_argument("image config: token grid not divisible by window size");
  }
  if (!(c.mask_ratio >= 0.0 && c.mask_ratio < 1.0)) {
    throw std::invalid_argument("image config: mask_ratio must be in [0, 1)");
  }
  if (c.depth_bins < 2) throw std::invalid_argument("image config: need at least 2 depth bins");
  if (c.bev_feature_dim == 0 || c.embed_dim == 0 || c.block_count == 0 || c.channels == 0) {
    throw std::invalid_argument("image config: zero-sized dimension");
  }
}

struct PointEncoderConfig {
  std::size_t input_feature_dim = 4;  // raw point columns (x, y, z, intensity)
  std::size_t embed_dim = 8;
  std::size_t block_count = 1;
  std::size_t head_count = 2;
  std::size_t bev_feature_dim = 8;

  std::size_t voxel_feature_dim() const { return input_feature_dim + 1; }  // + count
};

inline void validate_point_config(const PointEncoderConfig& c) {
  if (c.input_feature_dim < 3) {
    throw std::invalid_argument("point config: need at least (x, y, z) features");
  }
  if (c.head_count == 0 || c.embed_dim % c.head_count) {
    throw std::invalid_argument("point config: embed_dim not divisible by head_count");
  }
  if (c.bev_feature_dim == 0 || c.embed_dim == 0 || c.block_count == 0) {
    throw std::invalid_argument("point config: zero-sized dimension");
  }
}

// Patches are flattened row-major within the patch, pixel-major over
// channels; patches themselves are row-major over the token grid.
struct PatchGrid {
  std::size_t patch_rows = 0, patch_cols = 0;
  std::size_t patch_size = 0, channels = 0;
  Tensor patches;  // P x (patch_size^2 * channels)
  std::vector<bool> mask;

  std::size_t patch_count() const { return patch_rows * patch_cols; }
};

// image layout: rows = H, cols = W * channels, channel-fastest per pixel
inline PatchGrid patchify(const Tensor& image, std::size_t patch_size, std::size_t channels) {
  const std::size_t h = image.rows();
  if (channels == 0 || image.cols() % channels) {
    throw std::invalid_argument("patchify: columns not divisible by channel count");
  }
  const std::size_t w = image.cols() / channels;
  if (patch_size == 0 || h % patch_size || w % patch_size) {
    throw std::invalid_argument("patchify: image size not divisible by patch size");
  }
  PatchGrid grid;
  grid.patch_rows = h / patch_size;
  grid.patch_cols = w / patch_size;
  grid.patch_size = patch_size;
  grid.channels = channels;
  grid.mask.assign(grid.patch_count(), false);
  const std::size_t dim = patch_size * patch_size * channels;
  std::vector<double> vals(grid.patch_count() * dim);
  std::size_t k = 0;
  for (std::size_t pr = 0; pr < grid.patch_rows; ++pr) {
    for (std::size_t pc = 0; pc < grid.patch_cols; ++pc) {
      for (std::size_t dy = 0; dy < patch_size; ++dy) {
        for (std::size_t dx = 0; dx < patch_size; ++dx) {
          for (std::size_t c = 0; c < channels; ++c) {
            vals[k++] = image.value(pr * patch_size + dy, (pc * patch_size + dx) * channels + c);
          }
        }
      }
    }
  }
  grid.patches = Tensor::from_values(grid.patch_count(), dim, std::move(vals));
  return grid;
}

inline Tensor unpatchify(const PatchGrid& grid) {
  const std::size_t h = grid.patch_rows * grid.patch_size;
  const std::size_t w = grid.patch_cols * grid.patch_size;
  std::vector<double> vals(h * w * grid.channels);
  for (std::size_t pr = 0; pr < grid.patch_rows; ++pr) {
    for (std::size_t pc = 0; pc < grid.patch_cols; ++pc) {
      const std::size_t p = pr * grid.patch_cols + pc;
      std::size_t k = 0;
      for (std::size_t dy = 0; dy < grid.patch_size; ++dy) {
        for (std::size_t dx = 0; dx < grid.patch_size; ++dx) {
          for (std::size_t c = 0; c < grid.channels; ++c) {
            vals[(pr * grid.patch_size + dy) * w * grid.channels +
                 (pc * grid.patch_size + dx) * grid.channels + c] = grid.patches.value(p, k++);
          }
        }
      }
    }
  }
  return Tensor::from_values(h, w * grid.channels, std::move(vals));
}

// Zero out round(ratio * P) patches drawn without replacement from the
// seeded stream. Masked patches keep their grid positions.
inline PatchGrid apply_mask(const PatchGrid& grid, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("apply_mask: ratio must be in [0, 1)");
  }
  PatchGrid out = grid;
  out.patches = Tensor::from_values(grid.patches.rows(), grid.patches.cols(),
                                    grid.patches.values());
  out.mask.assign(grid.patch_count(), false);
  const auto k = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(grid.patch_count())));
  if (k == 0) return out;
  Rng rng(mix_seed(seed, 0x6d61736bULL));
  auto& vals = out.patches.mutable_values();
  const std::size_t dim = out.patches.cols();
  for (std::size_t p : rng.sample_without_replacement(grid.patch_count(), k)) {
    out.mask[p] = true;
    for (std::size_t j = 0; j < dim; ++j) vals[p * dim + j] = 0.0;
  }
  return out;
}

// ---- shared transformer pieces ----

struct AttentionParams {
  Tensor wq, wk, wv, wo;
};

struct MlpParams {
  Tensor w1, b1, w2, b2;
};

struct BlockParams {
  AttentionParams attn;
  MlpParams mlp;
  std::string norm1_site, norm2_site;
};

// Scaled dot-product attention over one token set, heads side by side in
// the embedding axis. Optionally exposes the per-head probability rows.
inline Tensor multi_head_attention(Tape& tape, Tensor x, const AttentionParams& p,
                                   std::size_t head_count,
                                   std::vector<Tensor>* probs_out = nullptr) {
  const std::size_t e = x.cols();
  if (head_count == 0 || e % head_count) {
    throw std::invalid_argument("attention: embed width not divisible by heads");
  }
  const std::size_t dh = e / head_count;
  Tensor q = matmul(tape, x, p.wq);
  Tensor k = matmul(tape, x, p.wk);
  Tensor v = matmul(tape, x, p.wv);
  std::vector<Tensor> heads;
  heads.reserve(head_count);
  for (std::size_t h = 0; h < head_count; ++h) {
    Tensor qh = slice_cols(tape, q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(tape, k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(tape, v, h * dh, (h + 1) * dh);
    Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)),
                          1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor probs = softmax_lastaxis(tape, scores);
    if (probs_out) probs_out->push_back(probs);
    heads.push_back(matmul(tape, probs, vh));
  }
  return matmul(tape, head_count == 1 ? heads[0] : concat_cols(tape, heads), p.wo);
}

inline Tensor mlp_forward(Tape& tape, Tensor x, const MlpParams& p) {
  Tensor h = gelu(tape, add_rowwise(tape, matmul(tape, x, p.w1), p.b1));
  return add_rowwise(tape, matmul(tape, h, p.w2), p.b2);
}

// Token index lists for non-overlapping square windows over a row-major
// token grid. A window covering the whole grid degrades to full attention.
inline std::vector<std::vector<std::size_t>> window_partition(std::size_t rows, std::size_t cols,
                                                              std::size_t window) {
  if (window == 0 || rows % window || cols % window) {
    throw std::invalid_argument("window_partition: grid not divisible by window");
  }
  std::vector<std::vector<std::size_t>> windows;
  for (std::size_t wr = 0; wr < rows / window; ++wr) {
    for (std::size_t wc = 0; wc < cols / window; ++wc) {
      std::vector<std::size_t> idx;
      idx.reserve(window * window);
      for (std::size_t dy = 0; dy < window; ++dy) {
        for (std::size_t dx = 0; dx < window; ++dx) {
          idx.push_back((wr * window + dy) * cols + wc * window + dx);
        }
      }
      windows.push_back(std::move(idx));
    }
  }
  return windows;
}

inline std::vector<std::vector<std::size_t>> full_window(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return {std::move(idx)};
}

inline Tensor windowed_attention(Tape& tape, Tensor x, const AttentionParams& p,
                                 std::size_t head_count,
                                 const std::vector<std::vector<std::size_t>>& windows,
                                 std::vector<Tensor>* probs_out = nullptr) {
  if (windows.size() == 1) {
    return multi_head_attention(tape, x, p, head_count, probs_out);
  }
  std::vector<Tensor> outs;
  std::vector<std::size_t> inverse(x.rows());
  std::size_t pos = 0;
  for (const auto& idx : windows) {
    Tensor xw = gather_rows(tape, x, idx);
    outs.push_back(multi_head_attention(tape, xw, p, head_count, probs_out));
    for (std::size_t i : idx) inverse[i] = pos++;
  }
  return gather_rows(tape, concat_rows(tape, outs), inverse);
}

// pre-norm residual block; both norms are prompt sites
inline Tensor encoder_block(Tape& tape, Tensor x, const BlockParams& p, std::size_t head_count,
                            const std::vector<std::vector<std::size_t>>& windows,
                            const NormContext& ctx) {
  Tensor h = add(tape, x,
                 windowed_attention(tape, prompt_norm(tape, x, p.norm1_site, ctx), p.attn,
                                    head_count, windows));
  return add(tape, h, mlp_forward(tape, prompt_norm(tape, h, p.norm2_site, ctx), p.mlp));
}

// ---- parameter bundles ----

namespace detail {

inline AttentionParams init_attention(ParameterStore& store, const std::string& prefix,
                                      std::size_t e, Rng& rng, ParamGroup group) {
  const double s = 1.0 / std::sqrt(static_cast<double>(e));
  AttentionParams p;
  p.wq = store.create_normal(prefix + "wq", group, e, e, rng, s);
  p.wk = store.create_normal(prefix + "wk", group, e, e, rng, s);
  p.wv = store.create_normal(prefix + "wv", group, e, e, rng, s);
  p.wo = store.create_normal(prefix + "wo", group, e, e, rng, s);
  return p;
}

inline MlpParams init_mlp(ParameterStore& store, const std::string& prefix, std::size_t e,
                          std::size_t hidden, Rng& rng, ParamGroup group) {
  MlpParams p;
  p.w1 = store.create_normal(prefix + "w1", group, e, hidden, rng,
                             1.0 / std::sqrt(static_cast<double>(e)));
  p.b1 = store.create_zeros(prefix + "b1", group, 1, hidden);
  p.w2 = store.create_normal(prefix + "w2", group, hidden, e, rng,
                             1.0 / std::sqrt(static_cast<double>(hidden)));
  p.b2 = store.create_zeros(prefix + "b2", group, 1, e);
  return p;
}

inline BlockParams init_block(ParameterStore& store, PromptRegistry* reg,
                              const std::string& prefix, std::size_t e, std::size_t hidden,
                              Rng& rng, ParamGroup group) {
  BlockParams b;
  b.attn = init_attention(store, prefix + "attn/", e, rng, group);
  b.mlp = init_mlp(store, prefix + "mlp/", e, hidden, rng, group);
  b.norm1_site = prefix + "norm1";
  b.norm2_site = prefix + "norm2";
  if (reg) {
    reg->register_site(store, b.norm1_site, e);
    reg->register_site(store, b.norm2_site, e);
  }
  return b;
}

}  // namespace detail

struct ImageEncoderParams {
  ImageEncoderConfig cfg;
  Tensor patch_w, patch_b;
  Tensor pos;
  std::vector<BlockParams> blocks;
  std::string final_norm_site;
  Tensor bev_w, bev_b;      // BEV output head (backbone)
  Tensor depth_w, depth_b;  // depth-bin logits (auxiliary)
};

inline ImageEncoderParams init_image_encoder(ParameterStore& store, PromptRegistry* reg,
                                             const ImageEncoderConfig& cfg, Rng& rng) {
  validate_image_config(cfg);
  ImageEncoderParams p;
  p.cfg = cfg;
  const std::size_t e = cfg.embed_dim;
  const auto group = ParamGroup::backbone_img;
  p.patch_w = store.create_normal("img/patch_embed/w", group, cfg.patch_dim(), e, rng,
                                  1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
  p.patch_b = store.create_zeros("img/patch_embed/b", group, 1, e);
  p.pos = store.create_normal("img/pos", group, cfg.patch_count(), e, rng, 0.02);
  for (std::size_t b = 0; b < cfg.block_count; ++b) {
    p.blocks.push_back(detail::init_block(store, reg, "img/block" + std::to_string(b) + "/", e,
                                          2 * e, rng, group));
  }
  p.final_norm_site = "img/final_norm";
  if (reg) reg->register_site(store, p.final_norm_site, e);
  p.bev_w = store.create_normal("img/bev_proj/w", group, e, cfg.bev_feature_dim, rng,
                                1.0 / std::sqrt(static_cast<double>(e)));
  p.bev_b = store.create_zeros("img/bev_proj/b", group, 1, cfg.bev_feature_dim);
  p.depth_w = store.create_normal("aux/depth_head/w", ParamGroup::auxiliary, e, cfg.depth_bins,
                                  rng, 1.0 / std::sqrt(static_cast<double>(e)));
  p.depth_b = store.create_zeros("aux/depth_head/b", ParamGroup::auxiliary, 1, cfg.depth_bins);
  return p;
}

struct PointEncoderParams {
  PointEncoderConfig cfg;
  Tensor embed_w, embed_b;
  Tensor pos;  // one row per BEV cell
  std::vector<BlockParams> blocks;
  std::string final_norm_site;
  Tensor bev_w, bev_b;
};

inline PointEncoderParams init_point_encoder(ParameterStore& store, PromptRegistry* reg,
                                             const PointEncoderConfig& cfg,
                                             std::size_t cell_count, Rng& rng) {
  validate_point_config(cfg);
  PointEncoderParams p;
  p.cfg = cfg;
  const std::size_t e = cfg.embed_dim;
  const auto group = ParamGroup::backbone_pcd;
  p.embed_w = store.create_normal("pcd/embed/w", group, cfg.voxel_feature_dim(), e, rng,
                                  1.0 / std::sqrt(static_cast<double>(cfg.voxel_feature_dim())));
  p.embed_b = store.create_zeros("pcd/embed/b", group, 1, e);
  p.pos = store.create_normal("pcd/pos", group, cell_count, e, rng, 0.02);
  for (std::size_t b = 0; b < cfg.block_count; ++b) {
    p.blocks.push_back(detail::init_block(store, reg, "pcd/block" + std::to_string(b) + "/", e,
                                          2 * e, rng, group));
  }
  p.final_norm_site = "pcd/final_norm";
  if (reg) reg->register_site(store, p.final_norm_site, e);
  p.bev_w = store.create_normal("pcd/bev_proj/w", group, e, cfg.bev_feature_dim, rng,
                                1.0 / std::sqrt(static_cast<double>(e)));
  p.bev_b = store.create_zeros("pcd/bev_proj/b", group, 1, cfg.bev_feature_dim);
  return p;
}

// Reconstruction decoder: one plain-norm attention block at half width.
// Stays outside the prompt mechanism by design.
struct MaeDecoderParams {
  std::size_t dec_dim = 0;
  Tensor in_w, in_b;
  AttentionParams attn;
  MlpParams mlp;
  Tensor out_w, out_b;
};

inline MaeDecoderParams init_mae_decoder(ParameterStore& store, const ImageEncoderConfig& cfg,
                                         Rng& rng) {
  MaeDecoderParams p;
  p.dec_dim = std::max<std::size_t>(2, cfg.embed_dim / 2);
  const auto group = ParamGroup::auxiliary;
  p.in_w = store.create_normal("aux/mae/in/w", group, cfg.embed_dim, p.dec_dim, rng,
                               1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
  p.in_b = store.create_zeros("aux/mae/in/b", group, 1, p.dec_dim);
  p.attn = detail::init_attention(store, "aux/mae/attn/", p.dec_dim, rng, group);
  p.mlp = detail::init_mlp(store, "aux/mae/mlp/", p.dec_dim, 2 * p.dec_dim, rng, group);
  p.out_w = store.create_normal("aux/mae/out/w", group, p.dec_dim, cfg.patch_dim(), rng,
                                1.0 / std::sqrt(static_cast<double>(p.dec_dim)));
  p.out_b = store.create_zeros("aux/mae/out/b", group, 1, cfg.patch_dim());
  return p;
}

inline Tensor mae_decode(Tape& tape, const MaeDecoderParams& p, Tensor tokens) {
  Tensor x = add_rowwise(tape, matmul(tape, tokens, p.in_w), p.in_b);
  Tensor h = add(tape, x, multi_head_attention(tape, layer_norm(tape, x), p.attn, 1));
  Tensor y = add(tape, h, mlp_forward(tape, layer_norm(tape, h), p.mlp));
  return add_rowwise(tape, matmul(tape, y, p.out_w), p.out_b);
}

// ---- forward passes ----

struct BevFeatureMap {
  std::size_t resolution = 0;
  std::string modality;
  Tensor features;  // resolution^2 x feature_dim
};

inline BevFeatureMap make_bev_map(std::size_t resolution, std::string modality,
                                  Tensor features) {
  if (features.rows() != resolution * resolution) {
    throw std::invalid_argument("bev map: cell count does not match resolution");
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (!std::isfinite(features.at(i))) {
      throw NumericError("bev map (" + modality + "): non-finite feature");
    }
  }
  return BevFeatureMap{resolution, std::move(modality), std::move(features)};
}

struct ImageForwardResult {
  std::vector<PatchGrid> originals;  // pre-mask patches, reconstruction targets
  std::vector<std::vector<bool>> masks;
  std::vector<Tensor> tokens;        // per camera: P x embed_dim
  std::vector<Tensor> depth_logits;  // per camera: P x depth_bins
  BevFeatureMap bev;
};

// patchify -> mask -> embed -> windowed blocks -> per-token BEV features
// and depth logits -> lift-splat. Masked patches travel through the
// encoder as zeroed content at their real positions.
inline ImageForwardResult image_forward(Tape& tape, const ImageEncoderParams& p,
                                        const std::vector<Tensor>& images, const CameraRig& rig,
                                        const BevGridSpec& grid, const DepthBins& bins,
                                        const NormContext& ctx, std::uint64_t mask_seed) {
  const ImageEncoderConfig& cfg = p.cfg;
  if (images.size() != rig.size()) {
    throw std::invalid_argument("image_forward: image count != camera count");
  }
  const auto windows = window_partition(cfg.token_rows(), cfg.token_cols(), cfg.window_size);

  CameraRig token_rig;
  const double inv_p = 1.0 / static_cast<double>(cfg.patch_size);
  for (const auto& cam : rig.cameras) token_rig.cameras.push_back(scale_camera(cam, inv_p, inv_p));
  const auto plan = plan_lift_splat(token_rig, cfg.token_rows(), cfg.token_cols(), bins, grid);

  ImageForwardResult out;
  std::vector<Tensor> feats, logits;
  for (std::size_t cam = 0; cam < images.size(); ++cam) {
    PatchGrid original = patchify(images[cam], cfg.patch_size, cfg.channels);
    PatchGrid masked = apply_mask(original, cfg.mask_ratio, mix_seed(mask_seed, cam));

    Tensor x = add(tape, add_rowwise(tape, matmul(tape, masked.patches, p.patch_w), p.patch_b),
                   p.pos);
    for (const auto& block : p.blocks) {
      x = encoder_block(tape, x, block, cfg.head_count, windows, ctx);
    }
    x = prompt_norm(tape, x, p.final_norm_site, ctx);

    feats.push_back(add_rowwise(tape, matmul(tape, x, p.bev_w), p.bev_b));
    logits.push_back(add_rowwise(tape, matmul(tape, x, p.depth_w), p.depth_b));
    out.tokens.push_back(x);
    out.masks.push_back(masked.mask);
    out.originals.push_back(std::move(original));
  }
  out.depth_logits = logits;
  out.bev = make_bev_map(grid.resolution, "image", lift_splat(tape, plan, feats, logits));
  return out;
}

struct PointForwardResult {
  Tensor voxels;  // cell_count x (F + 1), plain data
  std::vector<bool> occupied;
  Tensor tokens;
  BevFeatureMap bev;
};

// voxel pooling -> per-cell embed -> full attention over the cell
// sequence. Empty clouds still produce finite output from bias and
// positional terms.
inline PointForwardResult point_forward(Tape& tape, const PointEncoderParams& p,
                                        const Tensor& points, const BevGridSpec& grid,
                                        const NormContext& ctx) {
  const PointEncoderConfig& cfg = p.cfg;
  if (points.size() != 0 && points.cols() != cfg.input_feature_dim) {
    throw std::invalid_argument("point_forward: unexpected point feature width");
  }
  PointForwardResult out;
  out.voxels = voxelize(points, grid);
  const std::size_t cells = grid.cell_count();
  if (p.pos.rows() != cells) {
    throw std::invalid_argument("point_forward: positional table sized for another grid");
  }
  out.occupied.assign(cells, false);
  for (std::size_t c = 0; c < cells; ++c) {
    out.occupied[c] = out.voxels.value(c, cfg.input_feature_dim) > 0.0;
  }

  const auto windows = full_window(cells);
  Tensor x = add(tape, add_rowwise(tape, matmul(tape, out.voxels, p.embed_w), p.embed_b), p.pos);
  for (const auto& block : p.blocks) {
    x = encoder_block(tape, x, block, cfg.head_count, windows, ctx);
  }
  x = prompt_norm(tape, x, p.final_norm_site, ctx);
  out.tokens = x;
  out.bev = make_bev_map(grid.resolution, "points",
                         add_rowwise(tape, matmul(tape, x, p.bev_w), p.bev_b));
  return out;
}

}  // namespace bevalign
