#include <filesystem>
#include <fstream>
#include <sstream>

#include "boxseg/scene.hpp"
#include "doctest.h"

using namespace boxseg;
namespace fs = std::filesystem;

namespace {

SceneConfig small_config() {
  SceneConfig config;
  config.k_min = 3;
  config.k_max = 6;
  config.points_per_instance_min = 40;
  config.points_per_instance_max = 80;
  config.background_points = 100;
  return config;
}

fs::path temp_dir() {
  fs::path dir = fs::temp_directory_path() / "boxseg_scene_tests";
  fs::create_directories(dir);
  return dir;
}

std::string file_text(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Two boxes laid out by hand: [0,2]^3 and [1,3]x[0,2]^2 overlap in
// [1,2]x[0,2]^2.
Scene hand_scene() {
  Scene scene;
  auto push = [&scene](double x, double y, double z, int gt) {
    scene.points.push_back({x, y, z, 0.5, 0.5, 0.5});
    scene.gt_instance.push_back(gt);
  };
  push(0.0, 0.0, 0.0, 0);   // box 0 only
  push(2.0, 2.0, 2.0, 0);   // boundary point inside both (inclusive bounds)
  push(1.5, 1.0, 1.0, 1);   // strictly inside both
  push(3.0, 0.0, 0.0, 1);   // box 1 only
  push(9.0, 9.0, 9.0, -1);  // background

  Instance box0{{0, 0, 0}, {2, 2, 2}, {1, 1, 1}, 0};
  Instance box1{{1, 0, 0}, {3, 2, 2}, {2, 1, 1}, 1};
  scene.instances = {box0, box1};
  return scene;
}

}  // namespace

TEST_CASE("generation is deterministic") {
  SceneConfig config = small_config();
  Scene a = generate_scene(config, 11);
  Scene b = generate_scene(config, 11);
  CHECK(a == b);

  fs::path dir = temp_dir();
  save_scene(a, dir / "det_a.json");
  save_scene(b, dir / "det_b.json");
  CHECK(file_text(dir / "det_a.json") == file_text(dir / "det_b.json"));

  Scene c = generate_scene(config, 12);
  CHECK_FALSE(a == c);
}

TEST_CASE("single-box scenes have no overlap points") {
  SceneConfig config = small_config();
  config.k_min = 1;
  config.k_max = 1;
  Scene scene = generate_scene(config, 3);
  RegionPartition partition = partition_regions(scene);
  CHECK(partition.n_u() == 0);
  std::size_t instance_points = 0;
  for (int gt : scene.gt_instance)
    if (gt >= 0) ++instance_points;
  CHECK(partition.n_l() == instance_points);
}

TEST_CASE("generated scenes satisfy the structural invariants") {
  SceneConfig config = small_config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Scene scene = generate_scene(config, seed);
    REQUIRE(scene.size() > 0);
    REQUIRE(scene.instances.size() >= 1);

    // tight boxes: componentwise min/max of each instance's points
    std::size_t k = scene.instances.size();
    std::vector<Vec3> lo(k, {1e300, 1e300, 1e300}), hi(k, {-1e300, -1e300, -1e300});
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t j = 0; j < scene.size(); ++j) {
      int gt = scene.gt_instance[j];
      if (gt < 0) continue;
      ++counts[gt];
      for (int a = 0; a < 3; ++a) {
        lo[gt][a] = std::min(lo[gt][a], scene.points[j][a]);
        hi[gt][a] = std::max(hi[gt][a], scene.points[j][a]);
      }
    }
    for (std::size_t i = 0; i < k; ++i) {
      CHECK(counts[i] >= 1);
      for (int a = 0; a < 3; ++a) {
        CHECK(scene.instances[i].box_min[a] == lo[i][a]);
        CHECK(scene.instances[i].box_max[a] == hi[i][a]);
        CHECK(scene.instances[i].center[a] ==
              0.5 * (scene.instances[i].box_min[a] + scene.instances[i].box_max[a]));
      }
    }

    // partition exhaustiveness and candidate membership
    RegionPartition partition = partition_regions(scene);
    CHECK(partition.n_l() + partition.n_u() + partition.n_background() == scene.size());
    CHECK(partition.n_u() > 0);  // overlap target enforced
    std::vector<int> oracle = macc_oracle(partition, scene);
    CHECK(oracle.size() == partition.n_u());

    // rgb channels stay in [0, 1]
    for (const auto& p : scene.points)
      for (int c = 3; c < 6; ++c) {
        CHECK(p[c] >= 0.0);
        CHECK(p[c] <= 1.0);
      }
  }
}

TEST_CASE("realized overlap fraction lands near the target") {
  SceneConfig config = small_config();
  config.overlap_min = 0.10;
  config.overlap_max = 0.20;  // centered on 0.15
  double total = 0.0;
  int seeds = 100;
  for (int s = 0; s < seeds; ++s) {
    Scene scene = generate_scene(config, 40000 + s);
    RegionPartition partition = partition_regions(scene);
    total += static_cast<double>(partition.n_u()) /
             static_cast<double>(partition.n_u() + partition.n_l());
  }
  double mean = total / seeds;
  CHECK(mean >= 0.10);
  CHECK(mean <= 0.30);
}

TEST_CASE("partition classifies hand-placed points") {
  Scene scene = hand_scene();
  RegionPartition partition = partition_regions(scene);

  CHECK(partition.label[0].kind == RegionKind::Single);
  CHECK(partition.label[0].single_instance == 0);
  CHECK(partition.label[1].kind == RegionKind::Overlap);
  CHECK(partition.label[2].kind == RegionKind::Overlap);
  CHECK(partition.label[3].kind == RegionKind::Single);
  CHECK(partition.label[3].single_instance == 1);
  CHECK(partition.label[4].kind == RegionKind::Background);

  REQUIRE(partition.n_u() == 2);
  CHECK(partition.overlap_candidates[0] == std::vector<int>{0, 1});
  CHECK(partition.overlap_candidates[1] == std::vector<int>{0, 1});

  std::vector<int> oracle = macc_oracle(partition, scene);
  CHECK(oracle == std::vector<int>{0, 1});
}

TEST_CASE("macc_oracle flags an impossible ground truth") {
  Scene scene = hand_scene();
  scene.gt_instance[1] = -1;  // background point sitting inside two boxes
  RegionPartition partition = partition_regions(scene);
  CHECK_THROWS_AS(macc_oracle(partition, scene), GenerationError);
}

TEST_CASE("macc_oracle on a scene without overlap is empty") {
  Scene scene = hand_scene();
  scene.points.erase(scene.points.begin() + 1, scene.points.begin() + 3);
  scene.gt_instance.erase(scene.gt_instance.begin() + 1, scene.gt_instance.begin() + 3);
  RegionPartition partition = partition_regions(scene);
  CHECK(partition.n_u() == 0);
  CHECK(macc_oracle(partition, scene).empty());
}

TEST_CASE("scene files round-trip losslessly") {
  Scene scene = generate_scene(small_config(), 77);
  fs::path path = temp_dir() / "roundtrip.json";
  save_scene(scene, path);
  Scene loaded = load_scene(path);
  CHECK(scene == loaded);

  save_scene(loaded, temp_dir() / "roundtrip2.json");
  CHECK(file_text(path) == file_text(temp_dir() / "roundtrip2.json"));
}

TEST_CASE("malformed scene files are rejected") {
  fs::path dir = temp_dir();

  fs::path truncated = dir / "truncated.json";
  {
    Scene scene = generate_scene(small_config(), 5);
    save_scene(scene, truncated);
    std::string text = file_text(truncated);
    std::ofstream out(truncated);
    out << text.substr(0, text.size() / 2);
  }
  CHECK_THROWS_AS(load_scene(truncated), IoError);

  fs::path versioned = dir / "future_version.json";
  {
    std::ofstream out(versioned);
    out << R"({"version": 99, "points": [], "gt_instance": [], "instances": []})";
  }
  CHECK_THROWS_WITH_AS(load_scene(versioned), doctest::Contains("99"), VersionError);

  CHECK_THROWS_AS(load_scene(dir / "does_not_exist.json"), IoError);
}

TEST_CASE("generation rejects impossible configs") {
  SceneConfig config = small_config();
  config.overlap_min = 0.0;
  CHECK_THROWS_AS(generate_scene(config, 1), ConfigError);

  config = small_config();
  config.k_min = 0;
  CHECK_THROWS_AS(generate_scene(config, 1), ConfigError);

  // an unreachable overlap target reports the closest achieved fraction
  config = small_config();
  config.overlap_min = 0.97;
  config.overlap_max = 0.99;
  CHECK_THROWS_AS(generate_scene(config, 1), GenerationError);
}
