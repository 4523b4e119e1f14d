#include "boxseg/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "boxseg/common.hpp"
#include "json.hpp"

namespace boxseg {

namespace {

constexpr double kTruncSigma = 2.5;
constexpr int kMaxAttempts = 60;
constexpr int kSceneVersion = 1;

double truncated_normal(Rng& rng) {
  double z = rng.normal();
  while (std::abs(z) > kTruncSigma) z = rng.normal();
  return z;
}

// Fixed palette on a hue wheel; classes beyond the table wrap around.
std::array<double, 3> class_base_color(int class_id, int num_classes) {
  double hue = (class_id % std::max(num_classes, 1)) / static_cast<double>(std::max(num_classes, 1));
  double h6 = hue * 6.0;
  int sector = static_cast<int>(h6) % 6;
  double f = h6 - std::floor(h6);
  switch (sector) {
    case 0: return {1.0, f, 0.0};
    case 1: return {1.0 - f, 1.0, 0.0};
    case 2: return {0.0, 1.0, f};
    case 3: return {0.0, 1.0 - f, 1.0};
    case 4: return {f, 0.0, 1.0};
    default: return {1.0, 0.0, 1.0 - f};
  }
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

struct Blob {
  Vec3 center;
  Vec3 sigma;
  int class_id;
  int point_count;
};

double measured_overlap_fraction(const Scene& scene) {
  std::size_t n_single = 0, n_overlap = 0;
  for (std::size_t j = 0; j < scene.size(); ++j) {
    Vec3 p = scene.coords(j);
    int inside = 0;
    for (const Instance& inst : scene.instances)
      if (box_contains(inst, p)) ++inside;
    if (inside == 1) ++n_single;
    if (inside >= 2) ++n_overlap;
  }
  std::size_t annotated = n_single + n_overlap;
  return annotated == 0 ? 0.0 : static_cast<double>(n_overlap) / static_cast<double>(annotated);
}

Scene generate_attempt(const SceneConfig& config, std::uint64_t attempt_seed) {
  Rng rng(attempt_seed);
  int k = rng.uniform_int(config.k_min, config.k_max);
  double extent = config.room_extent;

  std::vector<Blob> blobs;
  blobs.reserve(k);
  for (int i = 0; i < k; ++i) {
    Blob blob;
    blob.class_id = rng.uniform_int(0, config.num_classes - 1);
    blob.point_count = rng.uniform_int(config.points_per_instance_min, config.points_per_instance_max);
    for (int a = 0; a < 3; ++a) blob.sigma[a] = rng.uniform(0.25, 0.70);

    if (i == 0) {
      for (int a = 0; a < 3; ++a)
        blob.center[a] = rng.uniform(kTruncSigma * blob.sigma[a], extent - kTruncSigma * blob.sigma[a]);
    } else {
      // Chain onto an earlier blob at a distance that makes boxes meet.
      const Blob& anchor = blobs[rng.uniform_index(blobs.size())];
      Vec3 dir;
      double norm = 0.0;
      do {
        norm = 0.0;
        for (int a = 0; a < 3; ++a) {
          dir[a] = rng.normal();
          norm += dir[a] * dir[a];
        }
        norm = std::sqrt(norm);
      } while (norm < 1e-9);
      double closeness = rng.uniform(1.4, 2.2);
      for (int a = 0; a < 3; ++a) {
        double gap = closeness * (anchor.sigma[a] + blob.sigma[a]);
        blob.center[a] = anchor.center[a] + dir[a] / norm * gap;
      }
    }
    // Keep the truncated blob inside the room.
    for (int a = 0; a < 3; ++a) {
      double margin = kTruncSigma * blob.sigma[a];
      blob.center[a] = std::min(std::max(blob.center[a], margin), extent - margin);
    }
    blobs.push_back(blob);
  }

  Scene scene;
  for (int i = 0; i < k; ++i) {
    const Blob& blob = blobs[i];
    std::array<double, 3> base = class_base_color(blob.class_id, config.num_classes);
    Instance inst;
    inst.class_id = blob.class_id;
    inst.box_min = {1e300, 1e300, 1e300};
    inst.box_max = {-1e300, -1e300, -1e300};
    for (int p = 0; p < blob.point_count; ++p) {
      std::array<double, 6> point{};
      for (int a = 0; a < 3; ++a) {
        point[a] = blob.center[a] + blob.sigma[a] * truncated_normal(rng);
        inst.box_min[a] = std::min(inst.box_min[a], point[a]);
        inst.box_max[a] = std::max(inst.box_max[a], point[a]);
      }
      for (int c = 0; c < 3; ++c) {
        double signal = base[c] * config.color_signal + 0.5 * (1.0 - config.color_signal);
        point[3 + c] = clamp01(signal + config.color_noise * rng.normal());
      }
      scene.points.push_back(point);
      scene.gt_instance.push_back(i);
    }
    for (int a = 0; a < 3; ++a) inst.center[a] = 0.5 * (inst.box_min[a] + inst.box_max[a]);
    scene.instances.push_back(inst);
  }

  // Background points live outside every instance box.
  for (int b = 0; b < config.background_points; ++b) {
    std::array<double, 6> point{};
    bool placed = false;
    for (int tries = 0; tries < 1000 && !placed; ++tries) {
      Vec3 candidate{rng.uniform(0.0, extent), rng.uniform(0.0, extent), rng.uniform(0.0, extent)};
      bool inside = false;
      for (const Instance& inst : scene.instances)
        if (box_contains(inst, candidate)) {
          inside = true;
          break;
        }
      if (inside) continue;
      point[0] = candidate[0];
      point[1] = candidate[1];
      point[2] = candidate[2];
      placed = true;
    }
    if (!placed) throw GenerationError("generate_scene: room too crowded to place background points");
    for (int c = 0; c < 3; ++c) point[3 + c] = clamp01(0.5 + config.color_noise * rng.normal());
    scene.points.push_back(point);
    scene.gt_instance.push_back(-1);
  }

  return scene;
}

}  // namespace

bool Scene::operator==(const Scene& other) const {
  if (points != other.points || gt_instance != other.gt_instance ||
      instances.size() != other.instances.size())
    return false;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const Instance& a = instances[i];
    const Instance& b = other.instances[i];
    if (a.box_min != b.box_min || a.box_max != b.box_max || a.center != b.center ||
        a.class_id != b.class_id)
      return false;
  }
  return true;
}

Scene generate_scene(const SceneConfig& config, std::uint64_t seed) {
  if (config.k_min < 1 || config.k_max < config.k_min)
    throw ConfigError("generate_scene: invalid instance count range");
  if (config.points_per_instance_min < 1 ||
      config.points_per_instance_max < config.points_per_instance_min)
    throw ConfigError("generate_scene: invalid points-per-instance range");
  if (!(config.overlap_min > 0.0 && config.overlap_min < config.overlap_max &&
        config.overlap_max < 1.0))
    throw ConfigError("generate_scene: overlap fraction range must satisfy 0 < min < max < 1");
  if (config.room_extent <= 2.0 * kTruncSigma * 0.70)
    throw ConfigError("generate_scene: room extent too small for blob truncation radius");

  double best_fraction = -1.0;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Scene scene = generate_attempt(config, Rng::mix(seed, static_cast<std::uint64_t>(attempt)));
    if (config.k_max == 1) return scene;  // a single box cannot overlap
    double fraction = measured_overlap_fraction(scene);
    if (fraction >= config.overlap_min && fraction <= config.overlap_max) return scene;
    if (best_fraction < 0.0 ||
        std::abs(fraction - 0.5 * (config.overlap_min + config.overlap_max)) <
            std::abs(best_fraction - 0.5 * (config.overlap_min + config.overlap_max)))
      best_fraction = fraction;
  }
  std::ostringstream os;
  os << "generate_scene: overlap target [" << config.overlap_min << ", " << config.overlap_max
     << "] unreachable after " << kMaxAttempts << " attempts; closest achieved fraction "
     << best_fraction;
  throw GenerationError(os.str());
}

RegionPartition partition_regions(const Scene& scene) {
  RegionPartition partition;
  partition.label.resize(scene.size());
  for (std::size_t j = 0; j < scene.size(); ++j) {
    Vec3 p = scene.coords(j);
    std::vector<int> inside;
    for (std::size_t i = 0; i < scene.instances.size(); ++i)
      if (box_contains(scene.instances[i], p)) inside.push_back(static_cast<int>(i));

    if (inside.empty()) {
      partition.label[j] = {RegionKind::Background, -1};
    } else if (inside.size() == 1) {
      partition.label[j] = {RegionKind::Single, inside[0]};
      partition.single_points.push_back(j);
      partition.single_instance.push_back(inside[0]);
    } else {
      partition.label[j] = {RegionKind::Overlap, -1};
      partition.overlap_points.push_back(j);
      partition.overlap_candidates.push_back(std::move(inside));
    }
  }
  return partition;
}

std::vector<int> macc_oracle(const RegionPartition& partition, const Scene& scene) {
  std::vector<int> truth;
  truth.reserve(partition.n_u());
  for (std::size_t u = 0; u < partition.n_u(); ++u) {
    std::size_t j = partition.overlap_points[u];
    int gt = scene.gt_instance[j];
    const std::vector<int>& candidates = partition.overlap_candidates[u];
    if (std::find(candidates.begin(), candidates.end(), gt) == candidates.end())
      throw GenerationError("macc_oracle: overlap point " + std::to_string(j) +
                            " has true instance " + std::to_string(gt) +
                            " outside its candidate boxes");
    truth.push_back(gt);
  }
  return truth;
}

void save_scene(const Scene& scene, const std::filesystem::path& path) {
  nlohmann::json doc;
  doc["version"] = kSceneVersion;
  doc["points"] = scene.points;
  doc["gt_instance"] = scene.gt_instance;
  nlohmann::json insts = nlohmann::json::array();
  for (const Instance& inst : scene.instances) {
    insts.push_back({{"box_min", inst.box_min}, {"box_max", inst.box_max}, {"class_id", inst.class_id}});
  }
  doc["instances"] = std::move(insts);

  std::ofstream out(path);
  if (!out) throw IoError("save_scene: cannot open " + path.string() + " for writing");
  out << doc.dump();
  out << "\n";
  if (!out) throw IoError("save_scene: write failed for " + path.string());
}

Scene load_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_scene: cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("load_scene: " + path.string() + ": " + e.what());
  }

  try {
    int version = doc.at("version").get<int>();
    if (version != kSceneVersion)
      throw VersionError("load_scene: " + path.string() + ": file version " +
                         std::to_string(version) + ", expected " + std::to_string(kSceneVersion));
    Scene scene;
    doc.at("points").get_to(scene.points);
    doc.at("gt_instance").get_to(scene.gt_instance);
    for (const auto& item : doc.at("instances")) {
      Instance inst;
      item.at("box_min").get_to(inst.box_min);
      item.at("box_max").get_to(inst.box_max);
      inst.class_id = item.at("class_id").get<int>();
      for (int a = 0; a < 3; ++a) inst.center[a] = 0.5 * (inst.box_min[a] + inst.box_max[a]);
      scene.instances.push_back(inst);
    }
    if (scene.points.size() != scene.gt_instance.size())
      throw IoError("load_scene: " + path.string() + ": points/gt_instance length mismatch");
    for (int gt : scene.gt_instance)
      if (gt < -1 || gt >= static_cast<int>(scene.instances.size()))
        throw IoError("load_scene: " + path.string() + ": instance id out of range");
    return scene;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_scene: " + path.string() + ": " + e.what());
  }
}

std::vector<CorpusEntry> load_corpus(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw IoError("load_corpus: " + dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.rfind("scene_", 0) == 0 &&
        entry.path().extension() == ".json")
      files.push_back(entry.path());
  }
  if (files.empty()) throw IoError("load_corpus: no scene_*.json files in " + dir.string());
  std::sort(files.begin(), files.end());

  std::vector<CorpusEntry> corpus;
  corpus.reserve(files.size());
  for (const auto& file : files) corpus.push_back({file.stem().string(), load_scene(file)});
  return corpus;
}

CoordFrame coord_frame(const Scene& scene) {
  Vec3 lo{1e300, 1e300, 1e300};
  Vec3 hi{-1e300, -1e300, -1e300};
  for (std::size_t j = 0; j < scene.size(); ++j) {
    Vec3 p = scene.coords(j);
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  }
  double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  CoordFrame frame;
  frame.origin = lo;
  frame.inv_extent = extent > 0.0 ? 1.0 / extent : 1.0;
  return frame;
}

std::vector<Vec3> normalized_coords(const Scene& scene) {
  CoordFrame frame = coord_frame(scene);
  std::vector<Vec3> out(scene.size());
  for (std::size_t j = 0; j < scene.size(); ++j) out[j] = frame.apply(scene.coords(j));
  return out;
}

std::vector<Vec3> normalized_centers(const Scene& scene) {
  CoordFrame frame = coord_frame(scene);
  std::vector<Vec3> out(scene.instances.size());
  for (std::size_t i = 0; i < scene.instances.size(); ++i)
    out[i] = frame.apply(scene.instances[i].center);
  return out;
}

}  // namespace boxseg
