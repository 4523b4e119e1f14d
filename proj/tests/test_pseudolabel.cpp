#include <algorithm>
#include <functional>
#include <limits>

#include "boxseg/common.hpp"
#include "boxseg/eval.hpp"
#include "boxseg/pseudolabel.hpp"
#include "doctest.h"

using namespace boxseg;
using D = Tensor<double>;

namespace {

Scene overlap_scene(std::uint64_t seed, int k = 3) {
  SceneConfig config;
  config.k_min = k;
  config.k_max = k;
  config.points_per_instance_min = 30;
  config.points_per_instance_max = 50;
  config.background_points = 40;
  config.num_classes = 3;
  return generate_scene(config, seed);
}

double brute_force_min_cost(const CostMatrix& cost) {
  std::vector<bool> used(cost.cols, false);
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, double)> walk = [&](std::size_t row, double acc) {
    if (row == cost.rows) {
      best = std::min(best, acc);
      return;
    }
    for (std::size_t col = 0; col < cost.cols; ++col) {
      if (used[col]) continue;
      used[col] = true;
      walk(row + 1, acc + cost.at(row, col));
      used[col] = false;
    }
  };
  walk(0, 0.0);
  return best;
}

// Mask logits that make query plant[k] predict exactly the points of
// instance k (hot everywhere gt == k), plus class logits favoring the
// instance's class.
struct Planted {
  D mask_logits;
  D class_logits;
};

Planted plant_queries(const Scene& scene, std::size_t n_q, std::size_t num_classes,
                      const std::vector<std::size_t>& plant) {
  std::size_t n = scene.size();
  std::vector<double> logits(n_q * n, -8.0);
  std::vector<double> cls(n_q * (num_classes + 1), 0.0);
  for (std::size_t q = 0; q < n_q; ++q) cls[q * (num_classes + 1) + num_classes] = 5.0;
  for (std::size_t k = 0; k < plant.size(); ++k) {
    std::size_t q = plant[k];
    for (std::size_t j = 0; j < n; ++j)
      if (scene.gt_instance[j] == static_cast<int>(k)) logits[q * n + j] = 8.0;
    std::fill(cls.begin() + q * (num_classes + 1), cls.begin() + (q + 1) * (num_classes + 1), 0.0);
    cls[q * (num_classes + 1) + scene.instances[k].class_id] = 5.0;
  }
  return {D::from_values({n_q, n}, std::move(logits)),
          D::from_values({n_q, num_classes + 1}, std::move(cls))};
}

}  // namespace

TEST_CASE("planted queries are matched back to their instances") {
  Scene scene = overlap_scene(10);
  RegionPartition partition = partition_regions(scene);
  std::size_t n_q = 6;
  std::vector<std::size_t> plant{4, 0, 5};  // instance k -> query plant[k]
  Planted planted = plant_queries(scene, n_q, 3, plant);

  LossWeights weights;
  MatchedSimilarity<double> matched =
      match_queries(planted.mask_logits, planted.class_logits, partition, scene.instances, weights);
  CHECK(matched.assignment.query_for_instance == plant);
  CHECK(matched.rho_prime.rows() == scene.instances.size());

  // planted pseudo-masks recover the ground truth on overlap points
  std::vector<double> rho_prime(matched.rho_prime.values().begin(),
                                matched.rho_prime.values().end());
  std::vector<int> assignment =
      assign_overlap_points(rho_prime, scene.instances.size(), scene.size(), partition);
  std::vector<int> oracle = macc_oracle(partition, scene);
  CHECK(assignment == oracle);

  PseudoMasks pseudo = build_targets(assignment, partition, scene.instances.size());
  auto macc = compute_macc(pseudo, oracle, partition);
  REQUIRE(macc.has_value());
  CHECK(*macc == 1.0);
}

TEST_CASE("matched cost equals the brute-force optimum") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    Scene scene = overlap_scene(500 + trial, 2 + static_cast<int>(rng.uniform_index(4)));
    RegionPartition partition = partition_regions(scene);
    std::size_t n_q = scene.instances.size() + 1 + rng.uniform_index(3);

    std::vector<double> logits(n_q * scene.size());
    for (double& v : logits) v = rng.uniform(-2.0, 2.0);
    std::vector<double> cls(n_q * 4);
    for (double& v : cls) v = rng.uniform(-1.0, 1.0);
    D mask_logits = D::from_values({n_q, scene.size()}, std::move(logits));
    D class_logits = D::from_values({n_q, 4}, std::move(cls));

    LossWeights weights;
    MatchedSimilarity<double> matched =
        match_queries(mask_logits, class_logits, partition, scene.instances, weights);

    std::vector<std::size_t> subset;
    for (std::size_t j = 0; j < scene.size(); ++j)
      if (partition.label[j].kind != RegionKind::Overlap) subset.push_back(j);
    std::vector<std::vector<std::uint8_t>> targets(scene.instances.size(),
                                                   std::vector<std::uint8_t>(subset.size(), 0));
    for (std::size_t s = 0; s < subset.size(); ++s)
      if (partition.label[subset[s]].kind == RegionKind::Single)
        targets[partition.label[subset[s]].single_instance][s] = 1;
    std::vector<int> classes;
    for (const Instance& inst : scene.instances) classes.push_back(inst.class_id);
    CostMatrix cost =
        matching_costs(mask_logits, class_logits, subset, targets, classes, weights);
    CHECK(matched.assignment.total_cost == doctest::Approx(brute_force_min_cost(cost)));
  }
}

TEST_CASE("match_queries rejects more instances than queries") {
  Scene scene = overlap_scene(77, 4);
  RegionPartition partition = partition_regions(scene);
  D mask_logits = D::zeros({2, scene.size()});
  D class_logits = D::zeros({2, 4});
  CHECK_THROWS_AS(
      match_queries(mask_logits, class_logits, partition, scene.instances, LossWeights{}),
      std::invalid_argument);
}

TEST_CASE("overlap assignment follows the candidate-restricted argmax") {
  // 3 instances, 4 points; point layout built by hand
  RegionPartition partition;
  partition.label.resize(4);
  partition.label[0] = {RegionKind::Overlap, -1};
  partition.label[1] = {RegionKind::Overlap, -1};
  partition.label[2] = {RegionKind::Overlap, -1};
  partition.label[3] = {RegionKind::Single, 0};
  partition.overlap_points = {0, 1, 2};
  partition.overlap_candidates = {{1, 2}, {1, 2}, {0, 1}};
  partition.single_points = {3};
  partition.single_instance = {0};

  // rho' rows: instance 0 has the global max at point 0 but is not a candidate
  std::vector<double> rho_prime{
      0.99, 0.99, 0.99, 0.5,   // instance 0
      0.70, 0.40, 0.40, 0.5,   // instance 1
      0.40, 0.40, 0.40, 0.5,   // instance 2
  };
  std::vector<int> assignment = assign_overlap_points(rho_prime, 3, 4, partition);
  CHECK(assignment[0] == 1);  // 0.70 beats 0.40; non-candidate 0.99 ignored
  CHECK(assignment[1] == 1);  // tie 0.40 vs 0.40 -> smallest index
  CHECK(assignment[2] == 0);  // here instance 0 is a candidate and wins

  PseudoMasks pseudo = build_targets(assignment, partition, 3);
  // disjoint cover of the overlap points
  for (std::size_t u = 0; u < 3; ++u) {
    int owners = 0;
    for (std::size_t k = 0; k < 3; ++k) owners += pseudo.overlap_masks[k][u];
    CHECK(owners == 1);
  }
  // merged targets: single point belongs to instance 0 only
  CHECK(pseudo.merged_target[0][3] == 1);
  CHECK(pseudo.merged_target[1][3] == 0);
}

TEST_CASE("build_targets on a scene without overlap embeds m_l") {
  Scene scene = overlap_scene(42);
  RegionPartition partition = partition_regions(scene);
  RegionPartition no_overlap = partition;
  no_overlap.overlap_points.clear();
  no_overlap.overlap_candidates.clear();
  for (auto& label : no_overlap.label)
    if (label.kind == RegionKind::Overlap) label = {RegionKind::Background, -1};

  PseudoMasks pseudo = build_targets({}, no_overlap, scene.instances.size());
  for (std::size_t s = 0; s < no_overlap.n_l(); ++s) {
    std::size_t j = no_overlap.single_points[s];
    for (std::size_t k = 0; k < scene.instances.size(); ++k)
      CHECK(pseudo.merged_target[k][j] ==
            (static_cast<int>(k) == no_overlap.single_instance[s] ? 1 : 0));
  }
}

TEST_CASE("merged targets: annotated points owned once, background all-zero") {
  Scene scene = overlap_scene(321);
  RegionPartition partition = partition_regions(scene);
  Rng rng(8);
  std::vector<int> random_assignment;
  for (const auto& candidates : partition.overlap_candidates)
    random_assignment.push_back(candidates[rng.uniform_index(candidates.size())]);
  PseudoMasks pseudo = build_targets(random_assignment, partition, scene.instances.size());

  for (std::size_t j = 0; j < scene.size(); ++j) {
    int owners = 0;
    for (std::size_t k = 0; k < scene.instances.size(); ++k)
      owners += pseudo.merged_target[k][j];
    if (partition.label[j].kind == RegionKind::Background)
      CHECK(owners == 0);
    else
      CHECK(owners == 1);
  }
}

TEST_CASE("teacher_step with an untrained teacher keeps the structural guarantees") {
  ModelConfig config;
  config.feature_dim = 8;
  config.decoder_layers = 2;
  config.num_queries = 8;
  config.attention_heads = 2;
  config.ffn_dim = 16;
  config.num_classes = 3;
  config.fourier_frequencies = 2;

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Scene scene = overlap_scene(900 + seed);
    RegionPartition partition = partition_regions(scene);
    SceneInputs<double> inputs = make_scene_inputs<double>(scene);
    auto teacher = ModelParams<double>::init(config, seed);
    teacher.set_requires_grad(false);

    TeacherOutputs<double> out =
        teacher_step(teacher, scene, partition, inputs, LossWeights{}, true);

    // disjoint cover and candidate respect
    for (std::size_t u = 0; u < partition.n_u(); ++u) {
      int owners = 0;
      for (std::size_t k = 0; k < scene.instances.size(); ++k)
        owners += out.pseudo.overlap_masks[k][u];
      CHECK(owners == 1);
      const auto& candidates = partition.overlap_candidates[u];
      CHECK(std::find(candidates.begin(), candidates.end(), out.overlap_assignment[u]) !=
            candidates.end());
    }

    // deterministic given (params, scene)
    TeacherOutputs<double> again =
        teacher_step(teacher, scene, partition, inputs, LossWeights{}, true);
    CHECK(again.overlap_assignment == out.overlap_assignment);
    for (std::size_t i = 0; i < out.content.numel(); ++i)
      CHECK(again.content.values()[i] == out.content.values()[i]);
  }
}
