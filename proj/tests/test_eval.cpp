#include <algorithm>
#include <cmath>
#include <set>

#include "boxseg/common.hpp"
#include "boxseg/eval.hpp"
#include "doctest.h"

using namespace boxseg;

namespace {

Scene labeled_scene(std::uint64_t seed, int k = 3) {
  SceneConfig config;
  config.k_min = k;
  config.k_max = k;
  config.points_per_instance_min = 25;
  config.points_per_instance_max = 45;
  config.background_points = 30;
  config.num_classes = 3;
  return generate_scene(config, seed);
}

PredictionSet perfect_predictions(const Scene& scene) {
  PredictionSet preds;
  for (std::size_t k = 0; k < scene.instances.size(); ++k) {
    Prediction p;
    p.mask.assign(scene.size(), 0);
    for (std::size_t j = 0; j < scene.size(); ++j)
      if (scene.gt_instance[j] == static_cast<int>(k)) p.mask[j] = 1;
    p.class_id = scene.instances[k].class_id;
    p.confidence = 0.9;
    preds.push_back(std::move(p));
  }
  return preds;
}

double iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    inter += (a[j] && b[j]) ? 1 : 0;
    uni += (a[j] || b[j]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Independent PR construction: explicit per-prediction match decisions,
// then AP as sum over unique recall levels of the best precision at or
// beyond that recall.
double reference_class_ap(const std::vector<PredictionSet>& predictions,
                          const std::vector<Scene>& scenes, int class_id, double threshold) {
  struct Row {
    double confidence;
    std::size_t scene, index;
  };
  std::vector<Row> rows;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (std::size_t p = 0; p < predictions[s].size(); ++p)
      if (predictions[s][p].class_id == class_id)
        rows.push_back({predictions[s][p].confidence, s, p});
  std::stable_sort(rows.begin(), rows.end(),
                   [](const Row& a, const Row& b) { return a.confidence > b.confidence; });

  std::size_t total_gt = 0;
  std::vector<std::vector<std::vector<std::uint8_t>>> gts(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (std::size_t k = 0; k < scenes[s].instances.size(); ++k) {
      if (scenes[s].instances[k].class_id != class_id) continue;
      std::vector<std::uint8_t> mask(scenes[s].size(), 0);
      for (std::size_t j = 0; j < scenes[s].size(); ++j)
        if (scenes[s].gt_instance[j] == static_cast<int>(k)) mask[j] = 1;
      gts[s].push_back(std::move(mask));
      ++total_gt;
    }
  if (total_gt == 0) return 0.0;

  std::vector<std::vector<bool>> taken(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) taken[s].assign(gts[s].size(), false);

  std::vector<double> prec, rec;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Row& row = rows[i];
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < gts[row.scene].size(); ++g) {
      if (taken[row.scene][g]) continue;
      double v = iou(predictions[row.scene][row.index].mask, gts[row.scene][g]);
      if (v > best) {
        best = v;
        arg = g;
      }
    }
    if (best >= threshold) {
      taken[row.scene][arg] = true;
      ++tp;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  std::set<double> levels(rec.begin(), rec.end());
  double ap = 0.0, prev = 0.0;
  for (double r : levels) {
    if (r <= prev) continue;
    double best_prec = 0.0;
    for (std::size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= r) best_prec = std::max(best_prec, prec[i]);
    ap += (r - prev) * best_prec;
    prev = r;
  }
  return ap;
}

}  // namespace

TEST_CASE("perfect predictions score 1.0 everywhere") {
  std::vector<Scene> scenes{labeled_scene(1), labeled_scene(2)};
  std::vector<PredictionSet> preds{perfect_predictions(scenes[0]),
                                   perfect_predictions(scenes[1])};
  MetricReport report = compute_ap(preds, scenes, default_ap_thresholds());
  CHECK(report.ap == doctest::Approx(1.0));
  CHECK(report.ap50 == doctest::Approx(1.0));
  CHECK(report.ap25 == doctest::Approx(1.0));
  for (const ClassMetrics& cm : report.per_class) CHECK(cm.ap == doctest::Approx(1.0));
}

TEST_CASE("empty predictions score 0") {
  std::vector<Scene> scenes{labeled_scene(3)};
  std::vector<PredictionSet> preds{{}};
  MetricReport report = compute_ap(preds, scenes, default_ap_thresholds());
  CHECK(report.ap == 0.0);
  CHECK(report.ap50 == 0.0);
  CHECK(report.ap25 == 0.0);
}

TEST_CASE("hand-built case: one perfect mask, one at IoU 0.4") {
  Scene scene;
  for (int j = 0; j < 10; ++j) {
    scene.points.push_back({static_cast<double>(j), 0.0, 0.0, 0.5, 0.5, 0.5});
    scene.gt_instance.push_back(j < 5 ? 0 : 1);
  }
  scene.instances.push_back({{0, 0, 0}, {4, 0, 0}, {2, 0, 0}, 0});
  scene.instances.push_back({{5, 0, 0}, {9, 0, 0}, {7, 0, 0}, 0});

  Prediction perfect;
  perfect.mask = {1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
  perfect.class_id = 0;
  perfect.confidence = 0.9;
  Prediction partial;  // overlaps gt instance 1 in 2 of 5 points: IoU 2/5
  partial.mask = {0, 0, 0, 0, 0, 1, 1, 0, 0, 0};
  partial.class_id = 0;
  partial.confidence = 0.8;

  std::vector<Scene> scenes{scene};
  std::vector<PredictionSet> preds{{perfect, partial}};
  MetricReport report = compute_ap(preds, scenes, default_ap_thresholds());
  CHECK(report.ap50 == doctest::Approx(0.5));
  CHECK(report.ap25 == doctest::Approx(1.0));
}

TEST_CASE("compute_ap equals the reference PR enumeration on random corpora") {
  Rng rng(404);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<Scene> scenes;
    std::vector<PredictionSet> preds;
    std::size_t scene_count = 1 + rng.uniform_index(3);
    for (std::size_t s = 0; s < scene_count; ++s) {
      Scene scene = labeled_scene(1000 + trial * 10 + s, 1 + static_cast<int>(rng.uniform_index(3)));
      PredictionSet set;
      std::size_t n_pred = rng.uniform_index(6);  // up to 5 predictions
      for (std::size_t p = 0; p < n_pred; ++p) {
        Prediction pred;
        pred.class_id = static_cast<int>(rng.uniform_index(3));
        pred.confidence = rng.uniform();
        pred.mask.assign(scene.size(), 0);
        // noisy copy of a random instance's mask
        int source = static_cast<int>(rng.uniform_index(scene.instances.size()));
        for (std::size_t j = 0; j < scene.size(); ++j) {
          bool inside = scene.gt_instance[j] == source;
          if (rng.uniform() < 0.15) inside = !inside;
          pred.mask[j] = inside ? 1 : 0;
        }
        set.push_back(std::move(pred));
      }
      scenes.push_back(std::move(scene));
      preds.push_back(std::move(set));
    }

    std::set<int> classes;
    for (const Scene& scene : scenes)
      for (const Instance& inst : scene.instances) classes.insert(inst.class_id);

    std::vector<double> thresholds = default_ap_thresholds();
    MetricReport report = compute_ap(preds, scenes, thresholds);
    for (double tau : {0.25, 0.5, 0.75}) {
      double expected = 0.0;
      for (int c : classes) expected += reference_class_ap(preds, scenes, c, tau);
      expected /= static_cast<double>(classes.size());
      double actual = compute_ap(preds, scenes, {tau}).ap;
      CHECK(actual == doctest::Approx(expected).epsilon(1e-12));
    }

    // AP over 0.50:0.95 can never beat the fixed-threshold scores
    CHECK(report.ap <= report.ap50 + 1e-12);
    CHECK(report.ap50 <= report.ap25 + 1e-12);
  }
}

TEST_CASE("macc of the oracle is exactly 1 and of its complement exactly 0") {
  Scene scene = labeled_scene(55);
  RegionPartition partition = partition_regions(scene);
  REQUIRE(partition.n_u() > 0);
  std::vector<int> oracle = macc_oracle(partition, scene);

  PseudoMasks truth = build_targets(oracle, partition, scene.instances.size());
  auto perfect = compute_macc(truth, oracle, partition);
  REQUIRE(perfect.has_value());
  CHECK(*perfect == 1.0);

  PseudoMasks flipped = truth;
  for (auto& mask : flipped.overlap_masks)
    for (auto& bit : mask) bit = bit ? 0 : 1;
  auto zero = compute_macc(flipped, oracle, partition);
  REQUIRE(zero.has_value());
  CHECK(*zero == 0.0);
}

TEST_CASE("macc is undefined without overlap points") {
  RegionPartition empty;
  empty.label.assign(4, {RegionKind::Background, -1});
  PseudoMasks pseudo;
  pseudo.overlap_masks.assign(2, {});
  CHECK_FALSE(compute_macc(pseudo, {}, empty).has_value());
}

TEST_CASE("random assignment on balanced 2-candidate overlaps scores about one half") {
  std::size_t n_u = 5000;
  RegionPartition partition;
  partition.label.assign(n_u, {RegionKind::Overlap, -1});
  Rng rng(31337);
  std::vector<int> truth;
  std::vector<int> guess;
  for (std::size_t u = 0; u < n_u; ++u) {
    partition.overlap_points.push_back(u);
    partition.overlap_candidates.push_back({0, 1});
    truth.push_back(static_cast<int>(rng.uniform_index(2)));
    guess.push_back(static_cast<int>(rng.uniform_index(2)));
  }
  PseudoMasks pseudo = build_targets(guess, partition, 2);
  auto macc = compute_macc(pseudo, truth, partition);
  REQUIRE(macc.has_value());
  CHECK(*macc == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("nearest-center baseline follows distance with index tie-break") {
  Scene scene;
  scene.points.push_back({1.0, 0.0, 0.0, 0.5, 0.5, 0.5});  // exactly at center of box 1
  scene.points.push_back({0.5, 0.0, 0.0, 0.5, 0.5, 0.5});  // equidistant between centers
  scene.gt_instance = {1, 0};
  scene.instances.push_back({{-1, -1, -1}, {1, 1, 1}, {0, 0, 0}, 0});
  scene.instances.push_back({{0, -1, -1}, {2, 1, 1}, {1, 0, 0}, 0});

  RegionPartition partition = partition_regions(scene);
  REQUIRE(partition.n_u() == 2);
  PseudoMasks pseudo = nearest_center_baseline(partition, scene);
  CHECK(pseudo.overlap_masks[1][0] == 1);  // sits on instance 1's center
  CHECK(pseudo.overlap_masks[0][1] == 1);  // tie -> smaller index

  // structural invariants hold
  for (std::size_t u = 0; u < partition.n_u(); ++u) {
    int owners = 0;
    for (std::size_t k = 0; k < 2; ++k) owners += pseudo.overlap_masks[k][u];
    CHECK(owners == 1);
  }
}

TEST_CASE("extract_predictions filters and stays deterministic") {
  ModelConfig config;
  config.feature_dim = 8;
  config.decoder_layers = 2;
  config.num_queries = 6;
  config.attention_heads = 2;
  config.ffn_dim = 16;
  config.num_classes = 3;
  config.fourier_frequencies = 2;

  Scene scene = labeled_scene(212);
  auto params = ModelParams<double>::init(config, 5);

  PredictionSet a = extract_predictions(params, scene);
  PredictionSet b = extract_predictions(params, scene);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].confidence == b[i].confidence);
    CHECK(a[i].class_id == b[i].class_id);
    CHECK(a[i].mask == b[i].mask);
    CHECK(a[i].confidence >= 0.0);
    CHECK(a[i].confidence <= 1.0);
    CHECK(a[i].class_id < static_cast<int>(config.num_classes));
  }

  // a head that always predicts no-object yields an empty set
  auto muted = params.clone();
  std::fill(muted.class_w.values_mut().begin(), muted.class_w.values_mut().end(), 0.0);
  std::fill(muted.class_b.values_mut().begin(), muted.class_b.values_mut().end(), 0.0);
  muted.class_b.values_mut()[config.num_classes] = 50.0;  // no-object column
  CHECK(extract_predictions(muted, scene).empty());
}
