#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "bevalign/encoders.hpp"
#include "bevalign/random.hpp"
#include "bevalign/tensor.hpp"

namespace bevalign {

struct ContrastiveConfig {
  std::size_t k = 64;  // sampled cells per sample
  double tau = 1.0;
  std::uint64_t sample_seed = 0;
  bool normalize_features = false;  // when on, tau = 0.07 is the intended preset
  bool restrict_to_occupied = true;
};

inline void validate_contrastive(const ContrastiveConfig& cfg) {
  if (cfg.k < 1) throw std::invalid_argument("contrastive: k must be >= 1");
  if (!(cfg.tau > 0.0)) throw std::invalid_argument("contrastive: tau must be positive");
}

struct NceResult {
  Tensor loss;  // scalar
  std::vector<std::size_t> sampled_cells;
  bool clamped = false;  // fewer occupied cells than k
};

// Cell-level alignment loss between the two BEV maps of one sample:
// sample K cells, score every sampled pair by scaled dot product, and pull
// the matching positions together against the other K-1 cells.
inline NceResult nce_loss(Tape& tape, Tensor bev_img, Tensor bev_pcd,
                          const std::vector<bool>& occupied, const ContrastiveConfig& cfg) {
  validate_contrastive(cfg);
  if (bev_img.rows() != bev_pcd.rows() || bev_img.cols() != bev_pcd.cols()) {
    throw std::invalid_argument("nce_loss: BEV maps disagree in shape");
  }
  const std::size_t cells = bev_img.rows();

  std::vector<std::size_t> candidates;
  if (cfg.restrict_to_occupied) {
    if (occupied.size() != cells) {
      throw std::invalid_argument("nce_loss: occupancy mask size mismatch");
    }
    for (std::size_t c = 0; c < cells; ++c) {
      if (occupied[c]) candidates.push_back(c);
    }
  } else {
    if (cfg.k > cells) {
      throw std::invalid_argument("nce_loss: k exceeds the cell count");
    }
    candidates.resize(cells);
    for (std::size_t c = 0; c < cells; ++c) candidates[c] = c;
  }

  NceResult out;
  if (candidates.empty()) {
    // nothing to align against; reported, not fatal
    out.loss = Tensor::scalar(0.0);
    out.clamped = true;
    return out;
  }
  const std::size_t k_eff = std::min(cfg.k, candidates.size());
  out.clamped = k_eff < cfg.k;

  Rng rng(mix_seed(cfg.sample_seed, 0x6e6365ULL));
  for (std::size_t pick : rng.sample_without_replacement(candidates.size(), k_eff)) {
    out.sampled_cells.push_back(candidates[pick]);
  }

  Tensor x = gather_rows(tape, bev_img, out.sampled_cells);
  Tensor y = gather_rows(tape, bev_pcd, out.sampled_cells);
  if (cfg.normalize_features) {
    x = l2_normalize_rows(tape, x);
    y = l2_normalize_rows(tape, y);
  }
  Tensor scores = scale(tape, matmul(tape, x, transpose(tape, y)), 1.0 / cfg.tau);
  Tensor logp = log_softmax_lastaxis(tape, scores);

  // diagonal picked with a constant identity mask
  Tensor eye = Tensor::zeros(k_eff, k_eff);
  for (std::size_t i = 0; i < k_eff; ++i) eye.mutable_values()[i * k_eff + i] = 1.0;
  out.loss = scale(tape, sum(tape, mul(tape, logp, eye)),
                   -1.0 / static_cast<double>(k_eff));
  return out;
}

// Mean squared reconstruction error over masked patches (optionally all
// patches). An empty mask contributes an exact zero.
inline Tensor mae_loss(Tape& tape, Tensor recon, const PatchGrid& target,
                       const std::vector<bool>& mask, bool masked_only = true) {
  if (recon.rows() != target.patch_count() || recon.cols() != target.patches.cols()) {
    throw std::invalid_argument("mae_loss: reconstruction shape mismatch");
  }
  if (mask.size() != target.patch_count()) {
    throw std::invalid_argument("mae_loss: mask size mismatch");
  }
  std::vector<std::size_t> rows;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!masked_only || mask[p]) rows.push_back(p);
  }
  if (rows.empty()) return Tensor::scalar(0.0);
  Tensor diff = sub(tape, gather_rows(tape, recon, rows),
                    gather_rows(tape, target.patches, rows));
  return mean(tape, mul(tape, diff, diff));
}

// Everything the losses need from one sample's forward passes.
struct SampleForward {
  Tensor bev_img;   // cells x C
  Tensor bev_pcd;   // cells x C
  std::vector<bool> occupied;
  std::vector<Tensor> recon;        // per camera: P x patch_dim
  std::vector<PatchGrid> targets;   // pre-mask patches per camera
  std::vector<std::vector<bool>> masks;
};

struct LossReport {
  Tensor l_cl, l_mae, l_all;  // scalars, batch means
  std::vector<std::vector<std::size_t>> sampled_cells;  // per sample
  bool clamped = false;
};

// Batch objective: the alignment term plus the reconstruction term, each
// averaged over samples. Reconstruction touches image-side parameters
// only; alignment reaches both encoders.
inline LossReport combined_loss(Tape& tape, const std::vector<SampleForward>& batch,
                                const ContrastiveConfig& cfg, bool masked_only = true) {
  if (batch.empty()) throw std::invalid_argument("combined_loss: empty batch");
  LossReport report;
  Tensor cl_sum = Tensor::scalar(0.0);
  Tensor mae_sum = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SampleForward& s = batch[i];
    ContrastiveConfig per_sample = cfg;
    per_sample.sample_seed = mix_seed(cfg.sample_seed, i);
    NceResult nce = nce_loss(tape, s.bev_img, s.bev_pcd, s.occupied, per_sample);
    report.sampled_cells.push_back(nce.sampled_cells);
    report.clamped = report.clamped || nce.clamped;
    cl_sum = add(tape, cl_sum, nce.loss);

    if (s.recon.size() != s.targets.size() || s.recon.size() != s.masks.size()) {
      throw std::invalid_argument("combined_loss: per-camera reconstruction mismatch");
    }
    Tensor sample_mae = Tensor::scalar(0.0);
    for (std::size_t cam = 0; cam < s.recon.size(); ++cam) {
      Tensor m = mae_loss(tape, s.recon[cam], s.targets[cam], s.masks[cam], masked_only);
      sample_mae = add(tape, sample_mae, m);
    }
    if (!s.recon.empty()) {
      sample_mae = scale(tape, sample_mae, 1.0 / static_cast<double>(s.recon.size()));
    }
    mae_sum = add(tape, mae_sum, sample_mae);
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  report.l_cl = scale(tape, cl_sum, inv_b);
  report.l_mae = scale(tape, mae_sum, inv_b);
  report.l_all = add(tape, report.l_cl, report.l_mae);
  if (report.l_cl.item() < -1e-12 || report.l_mae.item() < -1e-12) {
    throw NumericError("combined_loss: negative loss term");
  }
  return report;
}

}  // namespace bevalign
