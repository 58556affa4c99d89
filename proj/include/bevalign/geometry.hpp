#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "bevalign/tensor.hpp"

namespace bevalign {

// Frames are fixed project-wide: ego x-forward, y-left, z-up;
// camera z-forward, x-right, y-down.

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
          m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

inline Vec3 mat3_apply_transposed(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
          m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
          m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}

inline double mat3_det(const Mat3& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

struct Camera {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  Mat3 rot{};    // ego -> camera rotation
  Vec3 trans{};  // translation in camera frame, p_cam = R p_ego + t
};

inline void validate_camera(const Camera& cam) {
  if (!(cam.fx > 0.0) || !(cam.fy > 0.0)) {
    throw std::invalid_argument("camera: focal lengths must be positive");
  }
  // R R^T = I and det = +1, both within 1e-9
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += cam.rot[i * 3 + k] * cam.rot[j * 3 + k];
      const double want = (i == j) ? 1.0 : 0.0;
      if (std::abs(dot - want) > 1e-9) {
        throw std::invalid_argument("camera: rotation is not orthonormal");
      }
    }
  }
  if (std::abs(mat3_det(cam.rot) - 1.0) > 1e-9) {
    throw std::invalid_argument("camera: rotation determinant is not +1");
  }
}

// Camera at `position` (ego frame), heading `yaw` (radians, 0 = +x, ccw),
// tilted down by `pitch`.
inline Camera make_camera(double fx, double fy, double cx, double cy, const Vec3& position,
                          double yaw, double pitch = 0.0) {
  const Vec3 forward{std::cos(yaw) * std::cos(pitch), std::sin(yaw) * std::cos(pitch),
                     -std::sin(pitch)};
  // horizontal right vector: forward x world-up, normalized
  Vec3 right{forward[1], -forward[0], 0.0};
  const double rn = std::sqrt(right[0] * right[0] + right[1] * right[1]);
  if (rn < 1e-12) throw std::invalid_argument("make_camera: looking straight up or down");
  right = {right[0] / rn, right[1] / rn, 0.0};
  const Vec3 down{forward[1] * right[2] - forward[2] * right[1],
                  forward[2] * right[0] - forward[0] * right[2],
                  forward[0] * right[1] - forward[1] * right[0]};
  Camera cam;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = cx;
  cam.cy = cy;
  cam.rot = {right[0], right[1], right[2], down[0], down[1], down[2],
             forward[0], forward[1], forward[2]};
  const Vec3 rp = mat3_apply(cam.rot, position);
  cam.trans = {-rp[0], -rp[1], -rp[2]};
  validate_camera(cam);
  return cam;
}

// Rescale intrinsics to a resampled image plane (e.g. patch-level feature
// maps): pixel (u, v) maps to (u * sx, v * sy).
inline Camera scale_camera(Camera cam, double sx, double sy) {
  cam.fx *= sx;
  cam.cx *= sx;
  cam.fy *= sy;
  cam.cy *= sy;
  return cam;
}

struct CameraRig {
  std::vector<Camera> cameras;

  std::size_t size() const { return cameras.size(); }
  const Camera& at(std::size_t i) const {
    if (i >= cameras.size()) throw std::out_of_range("camera index out of range");
    return cameras[i];
  }
};

inline void validate_rig(const CameraRig& rig) {
  if (rig.cameras.empty()) throw std::invalid_argument("rig: no cameras");
  for (const auto& cam : rig.cameras) validate_camera(cam);
}

struct PixelPoint {
  double u = 0.0, v = 0.0, depth = 0.0;
};

// Pinhole projection; absent when the point is at or behind the image plane.
inline std::optional<PixelPoint> project_point(const CameraRig& rig, std::size_t cam_index,
                                               const Vec3& p_ego) {
  const Camera& cam = rig.at(cam_index);
  const Vec3 r = mat3_apply(cam.rot, p_ego);
  const Vec3 p_cam{r[0] + cam.trans[0], r[1] + cam.trans[1], r[2] + cam.trans[2]};
  if (p_cam[2] <= 0.0) return std::nullopt;
  PixelPoint out;
  out.depth = p_cam[2];
  out.u = cam.fx * p_cam[0] / p_cam[2] + cam.cx;
  out.v = cam.fy * p_cam[1] / p_cam[2] + cam.cy;
  return out;
}

inline Vec3 back_project(const Camera& cam, double u, double v, double depth) {
  const Vec3 p_cam{(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth};
  const Vec3 d{p_cam[0] - cam.trans[0], p_cam[1] - cam.trans[1], p_cam[2] - cam.trans[2]};
  return mat3_apply_transposed(cam.rot, d);
}

struct BevGridSpec {
  double x_min = -8.0, x_max = 8.0;
  double y_min = -8.0, y_max = 8.0;
  std::size_t resolution = 16;  // cells per axis
  std::size_t feature_dim = 0;

  std::size_t cell_count() const { return resolution * resolution; }
  double cell_size_x() const { return (x_max - x_min) / static_cast<double>(resolution); }
  double cell_size_y() const { return (y_max - y_min) / static_cast<double>(resolution); }

  // row-major (row from x, col from y); [min, max) bins; -1 outside
  std::int64_t cell_of(double x, double y) const {
    if (x < x_min || x >= x_max || y < y_min || y >= y_max) return -1;
    const auto r = static_cast<std::int64_t>(std::floor((x - x_min) / cell_size_x()));
    const auto c = static_cast<std::int64_t>(std::floor((y - y_min) / cell_size_y()));
    const auto g = static_cast<std::int64_t>(resolution);
    return std::min(r, g - 1) * g + std::min(c, g - 1);
  }

  std::array<double, 2> cell_center(std::size_t index) const {
    const std::size_t r = index / resolution, c = index % resolution;
    return {x_min + (static_cast<double>(r) + 0.5) * cell_size_x(),
            y_min + (static_cast<double>(c) + 0.5) * cell_size_y()};
  }
};

inline void validate_grid(const BevGridSpec& grid) {
  if (!(grid.x_max > grid.x_min) || !(grid.y_max > grid.y_min)) {
    throw std::invalid_argument("grid: empty extent");
  }
  if (grid.resolution < 2) throw std::invalid_argument("grid: resolution must be >= 2");
}

struct DepthBins {
  double d_min = 1.0, d_max = 9.0;
  std::size_t count = 4;

  double center(std::size_t k) const {
    return d_min + (static_cast<double>(k) + 0.5) * (d_max - d_min) / static_cast<double>(count);
  }
};

inline void validate_bins(const DepthBins& bins) {
  if (!(bins.d_min > 0.0) || !(bins.d_max > bins.d_min) || bins.count < 2) {
    throw std::invalid_argument("depth bins: need 0 < d_min < d_max and count >= 2");
  }
}

// Pool an N x F point array (rows = (x, y, z, ...)) into a
// cell_count x (F + 1) map: per-cell feature means plus a trailing count
// channel. Accumulation order is canonicalized by sorting, so the result
// is bit-identical under input row permutation.
inline Tensor voxelize(const Tensor& points, const BevGridSpec& grid) {
  validate_grid(grid);
  const std::size_t f = points.cols();
  if (points.size() != 0 && f < 3) {
    throw std::invalid_argument("voxelize: points need at least (x, y, z) columns");
  }
  const std::size_t cells = grid.cell_count();
  Tensor out = Tensor::zeros(cells, f + 1);

  std::vector<std::pair<std::int64_t, std::size_t>> order;
  order.reserve(points.rows());
  for (std::size_t i = 0; i < points.rows(); ++i) {
    const std::int64_t cell = grid.cell_of(points.value(i, 0), points.value(i, 1));
    if (cell >= 0) order.emplace_back(cell, i);
  }
  std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    for (std::size_t j = 0; j < f; ++j) {
      const double x = points.value(a.second, j), y = points.value(b.second, j);
      if (x != y) return x < y;
    }
    return false;
  });

  auto& ov = out.mutable_values();
  const std::size_t stride = f + 1;
  for (const auto& [cell, row] : order) {
    const auto c = static_cast<std::size_t>(cell);
    for (std::size_t j = 0; j < f; ++j) ov[c * stride + j] += points.value(row, j);
    ov[c * stride + f] += 1.0;
  }
  for (std::size_t c = 0; c < cells; ++c) {
    const double n = ov[c * stride + f];
    if (n > 0.0) {
      for (std::size_t j = 0; j < f; ++j) ov[c * stride + j] /= n;
    }
  }
  return out;
}

// Precomputed pixel/bin -> BEV cell assignment for one rig layout.
// cell_of[cam][(h * W + w) * D + k] is the cell receiving that lifted
// point, or -1 when it falls outside the grid.
struct LiftSplatPlan {
  std::size_t height = 0, width = 0, depth_bins = 0, cell_count = 0;
  std::vector<std::vector<std::int64_t>> cell_of;
};

inline LiftSplatPlan plan_lift_splat(const CameraRig& rig, std::size_t height, std::size_t width,
                                     const DepthBins& bins, const BevGridSpec& grid) {
  validate_rig(rig);
  validate_bins(bins);
  validate_grid(grid);
  LiftSplatPlan plan;
  plan.height = height;
  plan.width = width;
  plan.depth_bins = bins.count;
  plan.cell_count = grid.cell_count();
  plan.cell_of.resize(rig.size());
  for (std::size_t cam = 0; cam < rig.size(); ++cam) {
    auto& table = plan.cell_of[cam];
    table.assign(height * width * bins.count, -1);
    for (std::size_t h = 0; h < height; ++h) {
      for (std::size_t w = 0; w < width; ++w) {
        const double u = static_cast<double>(w) + 0.5;
        const double v = static_cast<double>(h) + 0.5;
        for (std::size_t k = 0; k < bins.count; ++k) {
          const Vec3 p = back_project(rig.at(cam), u, v, bins.center(k));
          table[(h * width + w) * bins.count + k] = grid.cell_of(p[0], p[1]);
        }
      }
    }
  }
  return plan;
}

// Image-to-BEV projection: each feature pixel's vector is distributed
// along its ray according to softmax(depth_logits) and sum-pooled into the
// receiving cells. features[cam]: (H*W) x C, depth_logits[cam]: (H*W) x D.
// Differentiable in both inputs; the backward pair is hand-derived
// (scatter-gather for features, softmax chain rule for logits).
inline Tensor lift_splat(Tape& tape, const LiftSplatPlan& plan, std::vector<Tensor> features,
                         std::vector<Tensor> depth_logits) {
  if (features.size() != plan.cell_of.size() || depth_logits.size() != plan.cell_of.size()) {
    throw std::invalid_argument("lift_splat: camera count mismatch");
  }
  const std::size_t pixels = plan.height * plan.width;
  const std::size_t d = plan.depth_bins;
  if (pixels == 0 || features.empty()) throw std::invalid_argument("lift_splat: empty input");
  const std::size_t c = features[0].cols();
  bool rg = false;
  for (std::size_t cam = 0; cam < features.size(); ++cam) {
    if (features[cam].rows() != pixels || features[cam].cols() != c) {
      throw std::invalid_argument("lift_splat: feature shape mismatch");
    }
    if (depth_logits[cam].rows() != pixels || depth_logits[cam].cols() != d) {
      throw std::invalid_argument("lift_splat: depth logit shape mismatch");
    }
    rg = rg || features[cam].requires_grad() || depth_logits[cam].requires_grad();
  }

  // per-camera softmax weights over depth bins, saved for backward
  auto weights = std::make_shared<std::vector<std::vector<double>>>(features.size());
  for (std::size_t cam = 0; cam < features.size(); ++cam) {
    auto& w = (*weights)[cam];
    w.resize(pixels * d);
    const Tensor& logits = depth_logits[cam];
    for (std::size_t p = 0; p < pixels; ++p) {
      double mx = logits.at(p * d);
      for (std::size_t k = 1; k < d; ++k) mx = std::max(mx, logits.at(p * d + k));
      double z = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        w[p * d + k] = std::exp(logits.at(p * d + k) - mx);
        z += w[p * d + k];
      }
      for (std::size_t k = 0; k < d; ++k) w[p * d + k] /= z;
    }
  }

  Tensor out = Tensor::zeros(plan.cell_count, c, rg);
  auto& ov = out.mutable_values();
  for (std::size_t cam = 0; cam < features.size(); ++cam) {
    const auto& table = plan.cell_of[cam];
    const auto& w = (*weights)[cam];
    const Tensor& feat = features[cam];
    for (std::size_t p = 0; p < pixels; ++p) {
      for (std::size_t k = 0; k < d; ++k) {
        const std::int64_t cell = table[p * d + k];
        if (cell < 0) continue;
        const double wk = w[p * d + k];
        for (std::size_t j = 0; j < c; ++j) {
          ov[static_cast<std::size_t>(cell) * c + j] += wk * feat.at(p * c + j);
        }
      }
    }
  }

  if (rg) {
    // the plan may not outlive the tape; keep our own reference to the tables
    auto tables = std::make_shared<std::vector<std::vector<std::int64_t>>>(plan.cell_of);
    tape.record("lift_splat", [tables, features = std::move(features),
                               depth_logits = std::move(depth_logits), weights, out, pixels, d,
                               c]() mutable {
      if (!out.grad_allocated()) return;
      for (std::size_t cam = 0; cam < features.size(); ++cam) {
        const auto& table = (*tables)[cam];
        const auto& w = (*weights)[cam];
        Tensor& feat = features[cam];
        Tensor& logits = depth_logits[cam];
        for (std::size_t p = 0; p < pixels; ++p) {
          // s_k = dOut[cell(p,k)] . feat[p], zero when the bin left the grid
          std::vector<double> s(d, 0.0);
          for (std::size_t k = 0; k < d; ++k) {
            const std::int64_t cell = table[p * d + k];
            if (cell < 0) continue;
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              acc += out.grad_at(static_cast<std::size_t>(cell) * c + j) * feat.at(p * c + j);
            }
            s[k] = acc;
            if (feat.requires_grad()) {
              for (std::size_t j = 0; j < c; ++j) {
                feat.accumulate_grad(
                    p * c + j,
                    w[p * d + k] * out.grad_at(static_cast<std::size_t>(cell) * c + j));
              }
            }
          }
          if (logits.requires_grad()) {
            double sbar = 0.0;
            for (std::size_t k = 0; k < d; ++k) sbar += w[p * d + k] * s[k];
            for (std::size_t k = 0; k < d; ++k) {
              logits.accumulate_grad(p * d + k, w[p * d + k] * (s[k] - sbar));
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace bevalign
