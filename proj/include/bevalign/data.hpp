#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bevalign/geometry.hpp"
#include "bevalign/random.hpp"
#include "bevalign/tensor.hpp"

namespace bevalign {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Upright box on the ground plane: z spans [0, height], yaw about +z.
struct Box {
  double x = 0, y = 0, yaw = 0;
  double length = 1, width = 1, height = 1;
};

struct SceneSample {
  std::string dataset_id;
  std::size_t frame_id = 0;
  Tensor points;               // N x 4: x, y, z, intensity
  std::vector<Tensor> images;  // per camera: H x (W * channels), values in [0, 1]
  std::size_t channels = 1;
  CameraRig rig;
  std::vector<Box> boxes;      // ground truth carried alongside the sensors
};

struct DatasetDescriptor {
  std::string dataset_id;
  std::string name;
  std::size_t frame_count = 0;
  std::size_t repeat_times = 1;
  std::uint64_t generator_seed = 0;
  std::vector<double> rig_bias;  // per-camera yaw offsets, radians
};

inline void validate_descriptor(const DatasetDescriptor& d) {
  if (d.dataset_id.empty()) throw std::invalid_argument("descriptor: empty dataset_id");
  if (d.repeat_times < 1) throw std::invalid_argument("descriptor: repeat_times must be >= 1");
}

struct SceneParams {
  std::size_t box_count = 4;
  double place_r_min = 3.5, place_r_max = 7.5;  // radial annulus for box centers
  double box_side_min = 0.8, box_side_max = 2.2;
  double box_h_min = 0.8, box_h_max = 1.8;

  std::size_t lidar_azimuth_steps = 120;
  std::size_t lidar_rings = 8;
  double lidar_elev_min_deg = -35.0, lidar_elev_max_deg = -5.0;
  double lidar_height = 1.8;
  double lidar_range = 16.0;
  double noise_sigma = 0.01;

  double ground_extent = 10.0;

  std::size_t camera_count = 6;
  std::size_t image_height = 16, image_width = 16, channels = 1;
  double camera_height = 1.6;
  double focal_scale = 0.65;  // fx = focal_scale * image_width
  double shade_range = 12.0;  // depth where renders fade to black
  double ground_shade = 0.35;
};

inline void validate_scene_params(const SceneParams& p) {
  if (p.place_r_min <= 0 || p.place_r_max <= p.place_r_min) {
    throw std::invalid_argument("scene: bad placement annulus");
  }
  if (p.place_r_max > p.ground_extent) {
    throw std::invalid_argument("scene: boxes placed beyond the ground");
  }
  if (p.box_side_min <= 0 || p.box_side_max < p.box_side_min || p.box_h_min <= 0 ||
      p.box_h_max < p.box_h_min) {
    throw std::invalid_argument("scene: bad box size range");
  }
  if (p.lidar_azimuth_steps < 1 || p.lidar_rings < 1 || p.lidar_range <= 0) {
    throw std::invalid_argument("scene: bad lidar layout");
  }
  if (p.lidar_elev_max_deg <= p.lidar_elev_min_deg || p.lidar_elev_max_deg >= 90 ||
      p.lidar_elev_min_deg <= -90) {
    throw std::invalid_argument("scene: bad elevation span");
  }
  if (p.camera_count < 1 || p.image_height < 4 || p.image_width < 4 || p.channels < 1) {
    throw std::invalid_argument("scene: bad camera layout");
  }
  if (p.focal_scale <= 0 || p.shade_range <= 0) {
    throw std::invalid_argument("scene: bad render constants");
  }
  if (p.noise_sigma < 0) throw std::invalid_argument("scene: negative noise");
}

namespace detail {

struct RayHit {
  double t = 0;
  int box_index = -1;  // -1 = ground
};

// Nearest intersection of origin + t*dir with the ground square and the
// boxes. Slab test runs in each box's yaw-aligned frame.
inline std::optional<RayHit> cast_ray(const Vec3& origin, const Vec3& dir,
                                      const std::vector<Box>& boxes, double ground_extent,
                                      double max_range) {
  std::optional<RayHit> best;
  auto consider = [&](double t, int idx) {
    if (t <= 1e-6 || t > max_range) return;
    if (!best || t < best->t) best = RayHit{t, idx};
  };

  if (dir[2] < -1e-12) {
    const double t = -origin[2] / dir[2];
    const double gx = origin[0] + t * dir[0], gy = origin[1] + t * dir[1];
    if (std::abs(gx) <= ground_extent && std::abs(gy) <= ground_extent) consider(t, -1);
  }

  for (std::size_t b = 0; b < boxes.size(); ++b) {
    const Box& box = boxes[b];
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    const double ox = origin[0] - box.x, oy = origin[1] - box.y;
    const double oz = origin[2] - box.height * 0.5;
    const double lo[3] = {c * ox + s * oy, -s * ox + c * oy, oz};
    const double ld[3] = {c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]};
    const double half[3] = {box.length * 0.5, box.width * 0.5, box.height * 0.5};

    double tnear = -1e300, tfar = 1e300;
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      if (std::abs(ld[a]) < 1e-12) {
        if (std::abs(lo[a]) > half[a]) miss = true;
        continue;
      }
      double t0 = (-half[a] - lo[a]) / ld[a];
      double t1 = (half[a] - lo[a]) / ld[a];
      if (t0 > t1) std::swap(t0, t1);
      tnear = std::max(tnear, t0);
      tfar = std::min(tfar, t1);
    }
    if (!miss && tnear <= tfar && tfar > 0) consider(tnear, static_cast<int>(b));
  }
  return best;
}

inline double yaw_bias_for(const std::vector<double>& bias, std::size_t cam_index,
                           std::size_t camera_count) {
  if (bias.empty()) return 0.0;
  if (bias.size() == 1) return bias[0];
  if (bias.size() != camera_count) {
    throw std::invalid_argument("rig_bias: size must be 0, 1, or the camera count");
  }
  return bias[cam_index];
}

inline double quantize(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

// Ring of outward-looking cameras at the ego center, evenly spaced in yaw
// plus the dataset's per-camera bias.
inline CameraRig make_scene_rig(const SceneParams& p, const std::vector<double>& rig_bias) {
  CameraRig rig;
  const double fx = p.focal_scale * static_cast<double>(p.image_width);
  const double fy = p.focal_scale * static_cast<double>(p.image_height);
  for (std::size_t i = 0; i < p.camera_count; ++i) {
    const double yaw = 2.0 * std::acos(-1.0) * static_cast<double>(i) /
                           static_cast<double>(p.camera_count) +
                       detail::yaw_bias_for(rig_bias, i, p.camera_count);
    rig.cameras.push_back(make_camera(fx, fy, static_cast<double>(p.image_width) * 0.5,
                                      static_cast<double>(p.image_height) * 0.5,
                                      {0, 0, p.camera_height}, yaw));
  }
  validate_rig(rig);
  return rig;
}

// Spinning-scanner sweep: fixed azimuth/elevation lattice, nearest surface
// hit per ray, Gaussian position noise. Intensity marks the surface kind:
// 0.8 box, 0.3 ground.
inline Tensor lidar_scan(const std::vector<Box>& boxes, const SceneParams& p, Rng& rng) {
  const double pi = std::acos(-1.0);
  const Vec3 origin{0, 0, p.lidar_height};
  std::vector<double> vals;
  for (std::size_t ring = 0; ring < p.lidar_rings; ++ring) {
    const double frac = p.lidar_rings == 1
                            ? 0.5
                            : static_cast<double>(ring) / static_cast<double>(p.lidar_rings - 1);
    const double elev =
        (p.lidar_elev_min_deg + frac * (p.lidar_elev_max_deg - p.lidar_elev_min_deg)) * pi / 180.0;
    for (std::size_t step = 0; step < p.lidar_azimuth_steps; ++step) {
      const double az =
          2.0 * pi * static_cast<double>(step) / static_cast<double>(p.lidar_azimuth_steps);
      const Vec3 dir{std::cos(elev) * std::cos(az), std::cos(elev) * std::sin(az),
                     std::sin(elev)};
      auto hit = detail::cast_ray(origin, dir, boxes, p.ground_extent, p.lidar_range);
      if (!hit) continue;
      const double nx = rng.normal(0.0, p.noise_sigma);
      const double ny = rng.normal(0.0, p.noise_sigma);
      const double nz = rng.normal(0.0, p.noise_sigma);
      vals.push_back(detail::quantize(origin[0] + hit->t * dir[0] + nx));
      vals.push_back(detail::quantize(origin[1] + hit->t * dir[1] + ny));
      vals.push_back(detail::quantize(origin[2] + hit->t * dir[2] + nz));
      vals.push_back(detail::quantize(hit->box_index >= 0 ? 0.8 : 0.3));
    }
  }
  const std::size_t n = vals.size() / 4;
  return Tensor::from_values(n, 4, std::move(vals));
}

// Depth-shaded render of the same geometry through one rig: brightness
// falls off linearly to shade_range, ground dimmed, sky black.
inline std::vector<Tensor> render_images(const std::vector<Box>& boxes, const CameraRig& rig,
                                         const SceneParams& p) {
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < rig.size(); ++i) {
    const Camera& cam = rig.at(i);
    const Vec3 t_neg{-cam.trans[0], -cam.trans[1], -cam.trans[2]};
    const Vec3 pos = mat3_apply_transposed(cam.rot, t_neg);
    std::vector<double> px(p.image_height * p.image_width * p.channels, 0.0);
    for (std::size_t v = 0; v < p.image_height; ++v) {
      for (std::size_t u = 0; u < p.image_width; ++u) {
        const double xc = (static_cast<double>(u) + 0.5 - cam.cx) / cam.fx;
        const double yc = (static_cast<double>(v) + 0.5 - cam.cy) / cam.fy;
        Vec3 dir = mat3_apply_transposed(cam.rot, {xc, yc, 1.0});
        const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
        dir = {dir[0] / norm, dir[1] / norm, dir[2] / norm};
        auto hit = detail::cast_ray(pos, dir, boxes, p.ground_extent, p.shade_range);
        if (!hit) continue;
        double shade = std::clamp(1.0 - hit->t / p.shade_range, 0.0, 1.0);
        if (hit->box_index < 0) shade *= p.ground_shade;
        shade = detail::quantize(shade);
        for (std::size_t c = 0; c < p.channels; ++c) {
          px[(v * p.image_width + u) * p.channels + c] = shade;
        }
      }
    }
    images.push_back(
        Tensor::from_values(p.image_height, p.image_width * p.channels, std::move(px)));
  }
  return images;
}

inline std::vector<Box> random_boxes(const SceneParams& p, Rng& rng) {
  const double pi = std::acos(-1.0);
  std::vector<Box> boxes;
  for (std::size_t b = 0; b < p.box_count; ++b) {
    Box box;
    const double r = rng.uniform(p.place_r_min, p.place_r_max);
    const double angle = rng.uniform(0.0, 2.0 * pi);
    box.x = r * std::cos(angle);
    box.y = r * std::sin(angle);
    box.yaw = rng.uniform(0.0, 2.0 * pi);
    box.length = rng.uniform(p.box_side_min, p.box_side_max);
    box.width = rng.uniform(p.box_side_min, p.box_side_max);
    box.height = rng.uniform(p.box_h_min, p.box_h_max);
    boxes.push_back(box);
  }
  return boxes;
}

// Both sensors observe the same boxes, so image and point features of one
// BEV cell describe the same surface. All payload values pass through f32
// so a sample in memory equals the sample read back from disk.
inline SceneSample generate_frame(const DatasetDescriptor& desc, const SceneParams& p,
                                  std::size_t frame_id) {
  validate_descriptor(desc);
  validate_scene_params(p);
  Rng rng(mix_seed(desc.generator_seed, frame_id));
  SceneSample s;
  s.dataset_id = desc.dataset_id;
  s.frame_id = frame_id;
  s.channels = p.channels;
  s.boxes = random_boxes(p, rng);
  s.points = lidar_scan(s.boxes, p, rng);
  s.rig = make_scene_rig(p, desc.rig_bias);
  s.images = render_images(s.boxes, s.rig, p);
  return s;
}

inline void validate_sample(const SceneSample& s) {
  if (s.points.size() > 0 && s.points.cols() != 4) {
    throw std::invalid_argument("sample: points must be N x 4");
  }
  validate_rig(s.rig);
  if (s.images.size() != s.rig.size()) {
    throw std::invalid_argument("sample: image count must match the rig");
  }
  for (const Tensor& img : s.images) {
    for (std::size_t i = 0; i < img.size(); ++i) {
      if (!std::isfinite(img.at(i))) throw std::invalid_argument("sample: non-finite image");
    }
  }
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    if (!std::isfinite(s.points.at(i))) throw std::invalid_argument("sample: non-finite point");
  }
}

// ---------------------------------------------------------------------------
// Sample container: "BVALSMP1" magic, u32 little-endian JSON header length,
// UTF-8 JSON header, then f32 little-endian payloads in header-declared
// order.

namespace detail {

inline constexpr char kSampleMagic[9] = "BVALSMP1";

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t take_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float take_f32(const unsigned char* p) { return std::bit_cast<float>(take_u32(p)); }

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline nlohmann::json camera_to_json(const Camera& cam) {
  return {{"fx", cam.fx},
          {"fy", cam.fy},
          {"cx", cam.cx},
          {"cy", cam.cy},
          {"rot", std::vector<double>(cam.rot.begin(), cam.rot.end())},
          {"trans", std::vector<double>{cam.trans[0], cam.trans[1], cam.trans[2]}}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera cam;
  cam.fx = j.at("fx").get<double>();
  cam.fy = j.at("fy").get<double>();
  cam.cx = j.at("cx").get<double>();
  cam.cy = j.at("cy").get<double>();
  const auto rot = j.at("rot").get<std::vector<double>>();
  if (rot.size() != 9) throw FormatError("camera: rot must have 9 entries");
  std::copy(rot.begin(), rot.end(), cam.rot.begin());
  const auto tr = j.at("trans").get<std::vector<double>>();
  if (tr.size() != 3) throw FormatError("camera: trans must have 3 entries");
  cam.trans = {tr[0], tr[1], tr[2]};
  return cam;
}

inline nlohmann::json box_to_json(const Box& b) {
  return {{"x", b.x},      {"y", b.y},          {"yaw", b.yaw},
          {"length", b.length}, {"width", b.width}, {"height", b.height}};
}

inline Box box_from_json(const nlohmann::json& j) {
  Box b;
  b.x = j.at("x").get<double>();
  b.y = j.at("y").get<double>();
  b.yaw = j.at("yaw").get<double>();
  b.length = j.at("length").get<double>();
  b.width = j.at("width").get<double>();
  b.height = j.at("height").get<double>();
  return b;
}

}  // namespace detail

inline void write_sample(const SceneSample& s, const std::filesystem::path& path) {
  validate_sample(s);
  const std::size_t h = s.images.empty() ? 0 : s.images[0].rows();
  const std::size_t wc = s.images.empty() ? 0 : s.images[0].cols();
  for (const Tensor& img : s.images) {
    if (img.rows() != h || img.cols() != wc) {
      throw std::invalid_argument("write_sample: ragged image stack");
    }
  }
  nlohmann::json header{
      {"version", 1},
      {"dataset_id", s.dataset_id},
      {"frame_id", s.frame_id},
      {"point_count", s.points.rows()},
      {"point_dim", 4},
      {"camera_count", s.images.size()},
      {"image_height", h},
      {"image_width", s.channels ? wc / s.channels : 0},
      {"channels", s.channels},
      {"payload", nlohmann::json::array({"points", "images"})},
  };
  nlohmann::json rig = nlohmann::json::array();
  for (std::size_t i = 0; i < s.rig.size(); ++i) rig.push_back(detail::camera_to_json(s.rig.at(i)));
  header["rig"] = std::move(rig);
  nlohmann::json boxes = nlohmann::json::array();
  for (const Box& b : s.boxes) boxes.push_back(detail::box_to_json(b));
  header["boxes"] = std::move(boxes);

  const std::string header_text = header.dump();
  std::string bytes;
  bytes.append(detail::kSampleMagic, 8);
  detail::put_u32(bytes, static_cast<std::uint32_t>(header_text.size()));
  bytes += header_text;
  for (const std::string& segment : {std::string("points"), std::string("images")}) {
    if (segment == "points") {
      for (std::size_t i = 0; i < s.points.size(); ++i) {
        detail::put_f32(bytes, static_cast<float>(s.points.at(i)));
      }
    } else {
      for (const Tensor& img : s.images) {
        for (std::size_t i = 0; i < img.size(); ++i) {
          detail::put_f32(bytes, static_cast<float>(img.at(i)));
        }
      }
    }
  }
  detail::write_file_bytes(path, bytes);
}

inline SceneSample read_sample(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file_bytes(path);
  if (bytes.size() < 12 || bytes.compare(0, 8, detail::kSampleMagic, 8) != 0) {
    throw FormatError("bad magic: " + path.string());
  }
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t header_len = detail::take_u32(base + 8);
  if (12 + static_cast<std::size_t>(header_len) > bytes.size()) {
    throw FormatError("truncated header: " + path.string());
  }
  const nlohmann::json header =
      nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len, nullptr, false);
  if (header.is_discarded() || !header.is_object()) {
    throw FormatError("unparsable header: " + path.string());
  }
  if (header.value("version", 0) != 1) {
    throw FormatError("unsupported container version: " + path.string());
  }

  SceneSample s;
  try {
    s.dataset_id = header.at("dataset_id").get<std::string>();
    s.frame_id = header.at("frame_id").get<std::size_t>();
    s.channels = header.at("channels").get<std::size_t>();
    const std::size_t n = header.at("point_count").get<std::size_t>();
    const std::size_t cams = header.at("camera_count").get<std::size_t>();
    const std::size_t h = header.at("image_height").get<std::size_t>();
    const std::size_t w = header.at("image_width").get<std::size_t>();
    for (const auto& j : header.at("rig")) s.rig.cameras.push_back(detail::camera_from_json(j));
    if (header.contains("boxes")) {
      for (const auto& j : header.at("boxes")) s.boxes.push_back(detail::box_from_json(j));
    }

    std::size_t cursor = 12 + header_len;
    auto take_floats = [&](std::size_t count) {
      if (cursor + count * 4 > bytes.size()) {
        throw FormatError("truncated payload: " + path.string());
      }
      std::vector<double> out(count);
      for (std::size_t i = 0; i < count; ++i) {
        out[i] = static_cast<double>(detail::take_f32(base + cursor));
        cursor += 4;
      }
      return out;
    };

    bool saw_points = false, saw_images = false;
    for (const auto& segment : header.at("payload")) {
      const std::string name = segment.get<std::string>();
      if (name == "points" && !saw_points) {
        saw_points = true;
        s.points = Tensor::from_values(n, 4, take_floats(n * 4));
      } else if (name == "images" && !saw_images) {
        saw_images = true;
        for (std::size_t c = 0; c < cams; ++c) {
          s.images.push_back(
              Tensor::from_values(h, w * s.channels, take_floats(h * w * s.channels)));
        }
      } else {
        throw FormatError("unknown or repeated payload segment: " + name);
      }
    }
    if (!saw_points || !saw_images) throw FormatError("missing payload segment: " + path.string());
    if (cursor != bytes.size()) throw FormatError("trailing bytes: " + path.string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad header field in " + path.string() + ": " + e.what());
  }
  validate_sample(s);
  return s;
}

inline std::filesystem::path sample_path(const std::filesystem::path& root,
                                         const std::string& dataset_id, std::size_t frame_id) {
  char name[32];
  std::snprintf(name, sizeof(name), "frame_%06zu.smp", frame_id);
  return root / dataset_id / name;
}

// Frames are independent and deterministic given (seed, frame), so they
// generate in parallel and land byte-identical regardless of thread count.
inline void generate_dataset(const DatasetDescriptor& desc, const SceneParams& params,
                             const std::filesystem::path& root, std::size_t threads = 0) {
  validate_descriptor(desc);
  validate_scene_params(params);
  std::filesystem::create_directories(root / desc.dataset_id);
  if (threads == 0) {
    threads = std::max<std::size_t>(1, std::min<std::size_t>(4, std::thread::hardware_concurrency()));
  }
  threads = std::max<std::size_t>(1, std::min(threads, std::max<std::size_t>(1, desc.frame_count)));

  std::mutex error_mutex;
  std::exception_ptr first_error;
  std::atomic<bool> abort{false};
  auto worker = [&](std::size_t start) {
    for (std::size_t f = start; f < desc.frame_count && !abort.load(); f += threads) {
      try {
        write_sample(generate_frame(desc, params, f), sample_path(root, desc.dataset_id, f));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        abort.store(true);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker, t);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Manifest: one JSON file listing every dataset's descriptor and scene
// parameters, written next to the per-dataset directories.

struct ManifestEntry {
  DatasetDescriptor descriptor;
  SceneParams scene;
};

namespace detail {

inline nlohmann::json scene_to_json(const SceneParams& p) {
  return {{"box_count", p.box_count},
          {"place_r_min", p.place_r_min},
          {"place_r_max", p.place_r_max},
          {"box_side_min", p.box_side_min},
          {"box_side_max", p.box_side_max},
          {"box_h_min", p.box_h_min},
          {"box_h_max", p.box_h_max},
          {"lidar_azimuth_steps", p.lidar_azimuth_steps},
          {"lidar_rings", p.lidar_rings},
          {"lidar_elev_min_deg", p.lidar_elev_min_deg},
          {"lidar_elev_max_deg", p.lidar_elev_max_deg},
          {"lidar_height", p.lidar_height},
          {"lidar_range", p.lidar_range},
          {"noise_sigma", p.noise_sigma},
          {"ground_extent", p.ground_extent},
          {"camera_count", p.camera_count},
          {"image_height", p.image_height},
          {"image_width", p.image_width},
          {"channels", p.channels},
          {"camera_height", p.camera_height},
          {"focal_scale", p.focal_scale},
          {"shade_range", p.shade_range},
          {"ground_shade", p.ground_shade}};
}

inline SceneParams scene_from_json(const nlohmann::json& j) {
  SceneParams p;
  p.box_count = j.at("box_count").get<std::size_t>();
  p.place_r_min = j.at("place_r_min").get<double>();
  p.place_r_max = j.at("place_r_max").get<double>();
  p.box_side_min = j.at("box_side_min").get<double>();
  p.box_side_max = j.at("box_side_max").get<double>();
  p.box_h_min = j.at("box_h_min").get<double>();
  p.box_h_max = j.at("box_h_max").get<double>();
  p.lidar_azimuth_steps = j.at("lidar_azimuth_steps").get<std::size_t>();
  p.lidar_rings = j.at("lidar_rings").get<std::size_t>();
  p.lidar_elev_min_deg = j.at("lidar_elev_min_deg").get<double>();
  p.lidar_elev_max_deg = j.at("lidar_elev_max_deg").get<double>();
  p.lidar_height = j.at("lidar_height").get<double>();
  p.lidar_range = j.at("lidar_range").get<double>();
  p.noise_sigma = j.at("noise_sigma").get<double>();
  p.ground_extent = j.at("ground_extent").get<double>();
  p.camera_count = j.at("camera_count").get<std::size_t>();
  p.image_height = j.at("image_height").get<std::size_t>();
  p.image_width = j.at("image_width").get<std::size_t>();
  p.channels = j.at("channels").get<std::size_t>();
  p.camera_height = j.at("camera_height").get<double>();
  p.focal_scale = j.at("focal_scale").get<double>();
  p.shade_range = j.at("shade_range").get<double>();
  p.ground_shade = j.at("ground_shade").get<double>();
  return p;
}

}  // namespace detail

inline void write_manifest(const std::vector<ManifestEntry>& entries,
                           const std::filesystem::path& root) {
  nlohmann::json datasets = nlohmann::json::array();
  for (const ManifestEntry& e : entries) {
    validate_descriptor(e.descriptor);
    datasets.push_back({{"dataset_id", e.descriptor.dataset_id},
                        {"name", e.descriptor.name},
                        {"frame_count", e.descriptor.frame_count},
                        {"repeat_times", e.descriptor.repeat_times},
                        {"generator_seed", e.descriptor.generator_seed},
                        {"rig_bias", e.descriptor.rig_bias},
                        {"scene", detail::scene_to_json(e.scene)}});
  }
  const nlohmann::json manifest{{"version", 1}, {"datasets", std::move(datasets)}};
  detail::write_file_bytes(root / "manifest.json", manifest.dump(2) + "\n");
}

inline std::vector<ManifestEntry> read_manifest_file(const std::filesystem::path& file) {
  const std::string text = detail::read_file_bytes(file);
  const nlohmann::json manifest = nlohmann::json::parse(text, nullptr, false);
  if (manifest.is_discarded()) throw FormatError("unparsable manifest");
  if (manifest.value("version", 0) != 1) throw FormatError("unsupported manifest version");
  std::vector<ManifestEntry> entries;
  try {
    for (const auto& j : manifest.at("datasets")) {
      ManifestEntry e;
      e.descriptor.dataset_id = j.at("dataset_id").get<std::string>();
      e.descriptor.name = j.at("name").get<std::string>();
      e.descriptor.frame_count = j.at("frame_count").get<std::size_t>();
      e.descriptor.repeat_times = j.at("repeat_times").get<std::size_t>();
      e.descriptor.generator_seed = j.at("generator_seed").get<std::uint64_t>();
      e.descriptor.rig_bias = j.at("rig_bias").get<std::vector<double>>();
      e.scene = detail::scene_from_json(j.at("scene"));
      validate_descriptor(e.descriptor);
      entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad manifest field: ") + e.what());
  }
  return entries;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root) {
  return read_manifest_file(root / "manifest.json");
}

// ---------------------------------------------------------------------------
// Epoch schedule: every dataset contributes frame_count * repeat_times
// entries, the concatenation is shuffled as one list.

struct MixSchedule {
  std::vector<std::pair<std::string, std::size_t>> entries;  // (dataset_id, frame_id)
  std::uint64_t shuffle_seed = 0;
};

inline MixSchedule build_epoch_schedule(const std::vector<DatasetDescriptor>& descs,
                                        std::uint64_t shuffle_seed) {
  MixSchedule schedule;
  schedule.shuffle_seed = shuffle_seed;
  for (const DatasetDescriptor& d : descs) {
    validate_descriptor(d);
    for (std::size_t r = 0; r < d.repeat_times; ++r) {
      for (std::size_t f = 0; f < d.frame_count; ++f) {
        schedule.entries.emplace_back(d.dataset_id, f);
      }
    }
  }
  Rng rng(shuffle_seed);
  rng.shuffle(schedule.entries);
  return schedule;
}

// Per-cell box presence from ground truth: 1 when the cell center lies in
// some box footprint. The linear probe's target.
inline Tensor occupancy_labels(const std::vector<Box>& boxes, const BevGridSpec& grid) {
  Tensor labels = Tensor::zeros(grid.cell_count(), 1);
  auto& vals = labels.mutable_values();
  for (std::size_t cell = 0; cell < grid.cell_count(); ++cell) {
    const auto center = grid.cell_center(cell);
    for (const Box& b : boxes) {
      const double c = std::cos(b.yaw), s = std::sin(b.yaw);
      const double dx = center[0] - b.x, dy = center[1] - b.y;
      const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
      if (std::abs(lx) <= b.length * 0.5 && std::abs(ly) <= b.width * 0.5) {
        vals[cell] = 1.0;
        break;
      }
    }
  }
  return labels;
}

}  // namespace bevalign
