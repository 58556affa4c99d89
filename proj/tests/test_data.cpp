#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

#include "bevalign/data.hpp"

using namespace bevalign;
namespace fs = std::filesystem;

namespace {

fs::path make_temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  fs::path dir = fs::temp_directory_path() /
                 ("bevalign_" + tag + "_" + std::to_string(counter.fetch_add(1)) + "_" +
                  std::to_string(static_cast<unsigned>(::getpid())));
  fs::create_directories(dir);
  return dir;
}

SceneParams small_params() {
  SceneParams p;
  p.box_count = 2;
  p.lidar_azimuth_steps = 48;
  p.lidar_rings = 4;
  p.camera_count = 2;
  p.image_height = 8;
  p.image_width = 8;
  return p;
}

bool same_file_bytes(const fs::path& a, const fs::path& b) {
  return detail::read_file_bytes(a) == detail::read_file_bytes(b);
}

// Point-in-footprint by a different route: build the rotated corner
// polygon and test with cross-product signs.
bool in_footprint_polygon(const Box& b, double px, double py) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hx = b.length * 0.5, hy = b.width * 0.5;
  const double corners[4][2] = {
      {b.x + c * hx - s * hy, b.y + s * hx + c * hy},
      {b.x + c * hx + s * hy, b.y + s * hx - c * hy},
      {b.x - c * hx + s * hy, b.y - s * hx - c * hy},
      {b.x - c * hx - s * hy, b.y - s * hx + c * hy},
  };
  int sign = 0;
  for (int i = 0; i < 4; ++i) {
    const double ex = corners[(i + 1) % 4][0] - corners[i][0];
    const double ey = corners[(i + 1) % 4][1] - corners[i][1];
    const double cross = ex * (py - corners[i][1]) - ey * (px - corners[i][0]);
    if (std::abs(cross) < 1e-12) continue;  // on an edge: accept either side
    const int here = cross > 0 ? 1 : -1;
    if (sign == 0) sign = here;
    if (here != sign) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("regenerating a dataset produces byte-identical files") {
  DatasetDescriptor desc;
  desc.dataset_id = "alpha";
  desc.name = "Alpha";
  desc.frame_count = 3;
  desc.generator_seed = 42;
  const SceneParams params = small_params();

  const fs::path a = make_temp_dir("regen_a"), b = make_temp_dir("regen_b");
  generate_dataset(desc, params, a, 1);
  generate_dataset(desc, params, b, 3);  // thread count must not matter
  for (std::size_t f = 0; f < desc.frame_count; ++f) {
    CHECK(same_file_bytes(sample_path(a, "alpha", f), sample_path(b, "alpha", f)));
  }
  // frames differ from each other
  CHECK(!same_file_bytes(sample_path(a, "alpha", 0), sample_path(a, "alpha", 1)));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("write then read round-trips a generated frame exactly") {
  DatasetDescriptor desc;
  desc.dataset_id = "beta";
  desc.frame_count = 1;
  desc.generator_seed = 7;
  desc.rig_bias = {0.05, -0.1};
  const SceneParams params = small_params();
  SceneSample s = generate_frame(desc, params, 0);
  REQUIRE(s.points.rows() > 0);

  const fs::path dir = make_temp_dir("roundtrip");
  const fs::path file = dir / "one.smp";
  write_sample(s, file);
  SceneSample r = read_sample(file);

  CHECK(r.dataset_id == s.dataset_id);
  CHECK(r.frame_id == s.frame_id);
  CHECK(r.channels == s.channels);
  CHECK(r.points.rows() == s.points.rows());
  CHECK(r.points.values() == s.points.values());  // payload was f32-exact already
  REQUIRE(r.images.size() == s.images.size());
  for (std::size_t i = 0; i < s.images.size(); ++i) {
    CHECK(r.images[i].values() == s.images[i].values());
  }
  REQUIRE(r.rig.size() == s.rig.size());
  for (std::size_t i = 0; i < s.rig.size(); ++i) {
    CHECK(r.rig.at(i).fx == s.rig.at(i).fx);
    CHECK(r.rig.at(i).rot == s.rig.at(i).rot);
    CHECK(r.rig.at(i).trans == s.rig.at(i).trans);
  }
  REQUIRE(r.boxes.size() == s.boxes.size());
  for (std::size_t i = 0; i < s.boxes.size(); ++i) {
    CHECK(r.boxes[i].x == s.boxes[i].x);
    CHECK(r.boxes[i].yaw == s.boxes[i].yaw);
    CHECK(r.boxes[i].height == s.boxes[i].height);
  }

  // a second write of the read-back sample is byte-identical
  const fs::path file2 = dir / "two.smp";
  write_sample(r, file2);
  CHECK(same_file_bytes(file, file2));
  fs::remove_all(dir);
}

TEST_CASE("an empty point cloud round-trips") {
  const SceneParams params = small_params();
  SceneSample s;
  s.dataset_id = "gamma";
  s.frame_id = 9;
  s.channels = params.channels;
  s.rig = make_scene_rig(params, {});
  s.points = Tensor::zeros(0, 4);
  s.images = render_images({}, s.rig, params);

  const fs::path dir = make_temp_dir("empty");
  write_sample(s, dir / "empty.smp");
  SceneSample r = read_sample(dir / "empty.smp");
  CHECK(r.points.rows() == 0);
  CHECK(r.boxes.empty());
  CHECK(r.images.size() == s.images.size());
  fs::remove_all(dir);
}

TEST_CASE("corrupted containers are rejected") {
  DatasetDescriptor desc;
  desc.dataset_id = "delta";
  desc.frame_count = 1;
  const SceneParams params = small_params();
  const fs::path dir = make_temp_dir("corrupt");
  const fs::path file = dir / "f.smp";
  write_sample(generate_frame(desc, params, 0), file);
  const std::string good = detail::read_file_bytes(file);

  SECTION("flipped magic byte") {
    std::string bad = good;
    bad[0] = 'X';
    detail::write_file_bytes(file, bad);
    CHECK_THROWS_AS(read_sample(file), FormatError);
  }
  SECTION("truncated payload") {
    detail::write_file_bytes(file, good.substr(0, good.size() - 5));
    CHECK_THROWS_AS(read_sample(file), FormatError);
  }
  SECTION("trailing junk") {
    detail::write_file_bytes(file, good + "zz");
    CHECK_THROWS_AS(read_sample(file), FormatError);
  }
  SECTION("unknown payload segment name") {
    std::string bad = good;
    const auto pos = bad.find("\"points\"");
    REQUIRE(pos != std::string::npos);
    bad.replace(pos, 8, "\"poinst\"");
    detail::write_file_bytes(file, bad);
    CHECK_THROWS_AS(read_sample(file), FormatError);
  }
  SECTION("unsupported version") {
    std::string header = "{\"version\":2}";
    std::string bad;
    bad.append("BVALSMP1", 8);
    detail::put_u32(bad, static_cast<std::uint32_t>(header.size()));
    bad += header;
    detail::write_file_bytes(file, bad);
    CHECK_THROWS_AS(read_sample(file), FormatError);
  }
  SECTION("missing file") { CHECK_THROWS_AS(read_sample(dir / "absent.smp"), FormatError); }
  fs::remove_all(dir);
}

TEST_CASE("a known box shows up in the cloud and in the render") {
  SceneParams p;  // defaults: 6 cameras, 16x16
  p.noise_sigma = 0.0;
  const Box box{5.0, 0.0, 0.3, 1.6, 1.2, 1.5};
  const CameraRig rig = make_scene_rig(p, {});

  Rng rng(3);
  Tensor points = lidar_scan({box}, p, rng);
  std::vector<std::size_t> box_rows;
  for (std::size_t r = 0; r < points.rows(); ++r) {
    if (points.value(r, 3) > 0.5) box_rows.push_back(r);
  }
  REQUIRE(!box_rows.empty());

  // every box return lies on the box (noise off): local coordinates
  // within the half extents
  for (std::size_t r : box_rows) {
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    const double dx = points.value(r, 0) - box.x, dy = points.value(r, 1) - box.y;
    const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
    CHECK(std::abs(lx) <= box.length * 0.5 + 1e-4);
    CHECK(std::abs(ly) <= box.width * 0.5 + 1e-4);
    CHECK(points.value(r, 2) >= -1e-4);
    CHECK(points.value(r, 2) <= box.height + 1e-4);
  }

  // camera 0 looks along +x straight at the box; its return pixels are lit
  std::vector<Tensor> images = render_images({box}, rig, p);
  std::size_t projected = 0, lit = 0;
  for (std::size_t r : box_rows) {
    const Vec3 pt{points.value(r, 0), points.value(r, 1), points.value(r, 2)};
    auto pix = project_point(rig, 0, pt);
    if (!pix) continue;
    const auto u = static_cast<std::int64_t>(std::floor(pix->u));
    const auto v = static_cast<std::int64_t>(std::floor(pix->v));
    if (u < 0 || v < 0 || u >= static_cast<std::int64_t>(p.image_width) ||
        v >= static_cast<std::int64_t>(p.image_height)) {
      continue;
    }
    ++projected;
    if (images[0].value(static_cast<std::size_t>(v), static_cast<std::size_t>(u)) > 0.0) ++lit;
  }
  REQUIRE(projected > 0);
  CHECK(lit == projected);
}

TEST_CASE("box returns are visible to the rig") {
  // at least 95% of box surface points project inside some camera
  DatasetDescriptor desc;
  desc.dataset_id = "vis";
  desc.frame_count = 3;
  desc.generator_seed = 11;
  SceneParams p;  // full 360-degree six-camera rig

  std::size_t box_points = 0, visible = 0;
  for (std::size_t f = 0; f < desc.frame_count; ++f) {
    SceneSample s = generate_frame(desc, p, f);
    for (std::size_t r = 0; r < s.points.rows(); ++r) {
      if (s.points.value(r, 3) < 0.5) continue;
      ++box_points;
      const Vec3 pt{s.points.value(r, 0), s.points.value(r, 1), s.points.value(r, 2)};
      for (std::size_t cam = 0; cam < s.rig.size(); ++cam) {
        auto pix = project_point(s.rig, cam, pt);
        if (pix && pix->u >= 0 && pix->u < static_cast<double>(p.image_width) && pix->v >= 0 &&
            pix->v < static_cast<double>(p.image_height)) {
          ++visible;
          break;
        }
      }
    }
  }
  REQUIRE(box_points > 50);
  INFO("visible " << visible << " of " << box_points);
  CHECK(static_cast<double>(visible) >= 0.95 * static_cast<double>(box_points));
}

TEST_CASE("zero boxes give ground-only frames") {
  DatasetDescriptor desc;
  desc.dataset_id = "flat";
  desc.frame_count = 1;
  SceneParams p = small_params();
  p.box_count = 0;
  SceneSample s = generate_frame(desc, p, 0);
  REQUIRE(s.points.rows() > 0);
  for (std::size_t r = 0; r < s.points.rows(); ++r) {
    CHECK(s.points.value(r, 3) == static_cast<double>(static_cast<float>(0.3)));
  }
  CHECK(s.boxes.empty());
  // the ground still shades the lower image rows
  double max_px = 0;
  for (const Tensor& img : s.images) {
    for (std::size_t i = 0; i < img.size(); ++i) max_px = std::max(max_px, img.at(i));
  }
  CHECK(max_px > 0.0);
  CHECK(max_px <= 1.0);
}

TEST_CASE("image values stay in range and finite") {
  DatasetDescriptor desc;
  desc.dataset_id = "rng";
  desc.frame_count = 2;
  desc.generator_seed = 23;
  const SceneParams p = small_params();
  for (std::size_t f = 0; f < desc.frame_count; ++f) {
    SceneSample s = generate_frame(desc, p, f);
    for (const Tensor& img : s.images) {
      for (std::size_t i = 0; i < img.size(); ++i) {
        CHECK(img.at(i) >= 0.0);
        CHECK(img.at(i) <= 1.0);
      }
    }
  }
}

TEST_CASE("epoch schedules have exact per-dataset counts") {
  SECTION("three equal datasets, no repeats") {
    std::vector<DatasetDescriptor> descs(3);
    for (int i = 0; i < 3; ++i) {
      descs[i].dataset_id = "d" + std::to_string(i);
      descs[i].frame_count = 13300;
    }
    MixSchedule sched = build_epoch_schedule(descs, 5);
    CHECK(sched.entries.size() == 39900);
  }
  SECTION("two repeated datasets plus one large") {
    std::vector<DatasetDescriptor> descs(3);
    descs[0] = {"a", "", 28130, 4, 0, {}};
    descs[1] = {"b", "", 22680, 4, 0, {}};
    descs[2] = {"c", "", 200000, 1, 0, {}};
    MixSchedule sched = build_epoch_schedule(descs, 5);
    REQUIRE(sched.entries.size() == 403240);
    std::map<std::string, std::size_t> counts;
    for (const auto& [id, frame] : sched.entries) ++counts[id];
    CHECK(counts["a"] == 28130u * 4);
    CHECK(counts["b"] == 22680u * 4);
    CHECK(counts["c"] == 200000u);
  }
}

TEST_CASE("the shuffle is a permutation of the same multiset") {
  std::vector<DatasetDescriptor> descs(2);
  descs[0] = {"x", "", 40, 3, 0, {}};
  descs[1] = {"y", "", 70, 1, 0, {}};
  auto s1 = build_epoch_schedule(descs, 1).entries;
  auto s2 = build_epoch_schedule(descs, 2).entries;
  CHECK(s1 != s2);  // different seeds reorder
  std::sort(s1.begin(), s1.end());
  std::sort(s2.begin(), s2.end());
  CHECK(s1 == s2);

  SECTION("single dataset, repeat 1: a permutation of its indices") {
    std::vector<DatasetDescriptor> one(1);
    one[0] = {"solo", "", 100, 1, 0, {}};
    auto entries = build_epoch_schedule(one, 9).entries;
    REQUIRE(entries.size() == 100);
    std::vector<std::size_t> frames;
    bool identity = true;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      frames.push_back(entries[i].second);
      identity = identity && entries[i].second == i;
    }
    CHECK(!identity);
    std::sort(frames.begin(), frames.end());
    for (std::size_t i = 0; i < frames.size(); ++i) CHECK(frames[i] == i);
  }
}

TEST_CASE("manifest round-trips every field") {
  std::vector<ManifestEntry> entries(2);
  entries[0].descriptor = {"near", "Near Field", 12, 4, 100, {0.1}};
  entries[0].scene = small_params();
  entries[0].scene.noise_sigma = 0.02;
  entries[1].descriptor = {"far", "Far Field", 30, 1, 200, {0.0, -0.2}};
  entries[1].scene.camera_count = 2;
  entries[1].scene.box_count = 7;

  const fs::path dir = make_temp_dir("manifest");
  write_manifest(entries, dir);
  auto back = read_manifest(dir);
  REQUIRE(back.size() == 2);
  CHECK(back[0].descriptor.dataset_id == "near");
  CHECK(back[0].descriptor.repeat_times == 4);
  CHECK(back[0].descriptor.rig_bias == std::vector<double>{0.1});
  CHECK(back[0].scene.noise_sigma == 0.02);
  CHECK(back[1].descriptor.name == "Far Field");
  CHECK(back[1].descriptor.generator_seed == 200);
  CHECK(back[1].scene.camera_count == 2);
  CHECK(back[1].scene.box_count == 7);

  SECTION("garbage manifest is a format error") {
    detail::write_file_bytes(dir / "manifest.json", "{not json");
    CHECK_THROWS_AS(read_manifest(dir), FormatError);
  }
  fs::remove_all(dir);
}

TEST_CASE("occupancy labels agree with a polygon oracle") {
  BevGridSpec grid;
  grid.resolution = 16;
  Rng rng(31);
  for (int trial = 0; trial < 4; ++trial) {
    std::vector<Box> boxes;
    for (int b = 0; b < 3; ++b) {
      Box box;
      box.x = rng.uniform(-6, 6);
      box.y = rng.uniform(-6, 6);
      box.yaw = rng.uniform(0, 6.28);
      box.length = rng.uniform(1.0, 3.0);
      box.width = rng.uniform(1.0, 3.0);
      box.height = 1.0;
      boxes.push_back(box);
    }
    Tensor labels = occupancy_labels(boxes, grid);
    REQUIRE(labels.rows() == grid.cell_count());
    std::size_t ones = 0;
    for (std::size_t cell = 0; cell < grid.cell_count(); ++cell) {
      const auto center = grid.cell_center(cell);
      bool expect = false;
      for (const Box& box : boxes) {
        expect = expect || in_footprint_polygon(box, center[0], center[1]);
      }
      CHECK(labels.at(cell) == (expect ? 1.0 : 0.0));
      ones += labels.at(cell) > 0.5;
    }
    CHECK(ones > 0);  // 1 m+ boxes on a 1 m grid always cover some center
  }
}

TEST_CASE("rig bias bends camera headings") {
  SceneParams p = small_params();
  p.camera_count = 3;
  const double bias = 0.7;
  CameraRig plain = make_scene_rig(p, {});
  CameraRig biased = make_scene_rig(p, {bias});  // broadcast to all cameras

  // forward vector is the third rotation row
  for (std::size_t i = 0; i < 3; ++i) {
    const double base_yaw = std::atan2(plain.at(i).rot[7], plain.at(i).rot[6]);
    const double got_yaw = std::atan2(biased.at(i).rot[7], biased.at(i).rot[6]);
    double delta = got_yaw - base_yaw;
    while (delta > 3.15) delta -= 2 * std::acos(-1.0);
    while (delta < -3.15) delta += 2 * std::acos(-1.0);
    CHECK(delta == Catch::Approx(bias).margin(1e-12));
  }

  CHECK_THROWS_AS(make_scene_rig(p, {0.1, 0.2}), std::invalid_argument);  // 2 biases, 3 cameras
}

TEST_CASE("scene parameter validation rejects bad layouts") {
  SceneParams p = small_params();
  p.place_r_max = p.ground_extent + 1;
  CHECK_THROWS_AS(validate_scene_params(p), std::invalid_argument);
  p = small_params();
  p.lidar_rings = 0;
  CHECK_THROWS_AS(validate_scene_params(p), std::invalid_argument);
  p = small_params();
  p.camera_count = 0;
  CHECK_THROWS_AS(validate_scene_params(p), std::invalid_argument);

  DatasetDescriptor d;
  d.dataset_id = "ok";
  d.repeat_times = 0;
  CHECK_THROWS_AS(validate_descriptor(d), std::invalid_argument);
}
