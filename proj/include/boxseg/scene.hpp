#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "boxseg/assign.hpp"

namespace boxseg {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Instance {
  Vec3 box_min{};
  Vec3 box_max{};
  Vec3 center{};  // (box_min + box_max) / 2
  int class_id = 0;
};

// Point cloud with per-point ground truth; column layout x,y,z,r,g,b.
struct Scene {
  std::vector<std::array<double, 6>> points;
  std::vector<int> gt_instance;  // -1 = background
  std::vector<Instance> instances;

  std::size_t size() const { return points.size(); }
  Vec3 coords(std::size_t j) const { return {points[j][0], points[j][1], points[j][2]}; }

  bool operator==(const Scene& other) const;
};

enum class RegionKind { Background, Single, Overlap };

// Per-point label region derived from box membership (inclusive bounds).
struct RegionPartition {
  struct Label {
    RegionKind kind = RegionKind::Background;
    int single_instance = -1;  // valid when kind == Single
  };

  std::vector<Label> label;                      // per global point
  std::vector<std::size_t> single_points;        // global indices, ascending
  std::vector<int> single_instance;              // box owning each single point
  std::vector<std::size_t> overlap_points;       // global indices, ascending
  std::vector<std::vector<int>> overlap_candidates;  // sorted, size >= 2 each

  std::size_t n_l() const { return single_points.size(); }
  std::size_t n_u() const { return overlap_points.size(); }
  std::size_t n_background() const {
    return label.size() - single_points.size() - overlap_points.size();
  }
};

struct SceneConfig {
  int k_min = 3;
  int k_max = 8;
  int points_per_instance_min = 220;
  int points_per_instance_max = 380;
  int background_points = 350;
  double room_extent = 8.0;       // scene is the cube [0, room_extent]^3
  double overlap_min = 0.10;      // accepted range for N_u / (N_u + N_l)
  double overlap_max = 0.30;
  double color_signal = 0.8;      // weight of the class base color
  double color_noise = 0.08;      // stddev of per-channel color noise
  int num_classes = 4;
  std::uint64_t seed = 0;         // base seed used by corpus generation
};

// Anisotropic Gaussian blobs truncated at 2.5 sigma, chained so that box
// overlaps carry points; retries until the realized overlap fraction lands
// in [overlap_min, overlap_max]. Deterministic in (config, seed).
Scene generate_scene(const SceneConfig& config, std::uint64_t seed);

RegionPartition partition_regions(const Scene& scene);

// True instance id for every overlap point (aligned with overlap_points).
// Throws GenerationError if a true id is missing from its candidate set.
std::vector<int> macc_oracle(const RegionPartition& partition, const Scene& scene);

// One JSON document per scene; lossless round trip.
void save_scene(const Scene& scene, const std::filesystem::path& path);
Scene load_scene(const std::filesystem::path& path);

struct CorpusEntry {
  std::string name;  // file stem, e.g. "scene_7"
  Scene scene;
};

// Loads every scene_*.json in the directory, ordered by filename.
std::vector<CorpusEntry> load_corpus(const std::filesystem::path& dir);

// Normalization to the unit cube: (p - scene_min) / max_extent.
struct CoordFrame {
  Vec3 origin{};
  double inv_extent = 1.0;

  Vec3 apply(const Vec3& p) const {
    return {(p[0] - origin[0]) * inv_extent, (p[1] - origin[1]) * inv_extent,
            (p[2] - origin[2]) * inv_extent};
  }
};

CoordFrame coord_frame(const Scene& scene);
std::vector<Vec3> normalized_coords(const Scene& scene);
std::vector<Vec3> normalized_centers(const Scene& scene);

inline bool box_contains(const Instance& inst, const Vec3& p) {
  return p[0] >= inst.box_min[0] && p[0] <= inst.box_max[0] && p[1] >= inst.box_min[1] &&
         p[1] <= inst.box_max[1] && p[2] >= inst.box_min[2] && p[2] <= inst.box_max[2];
}

}  // namespace boxseg
