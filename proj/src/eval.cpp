#include "boxseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace boxseg {

std::vector<double> default_ap_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
  return t;
}

namespace {

double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    bool pa = a[j] != 0, pb = b[j] != 0;
    inter += (pa && pb) ? 1 : 0;
    uni += (pa || pb) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct PooledPrediction {
  double confidence;
  std::size_t scene;
  std::size_t index;  // within the scene's PredictionSet
};

// Average precision for one class at one IoU threshold, pooled over scenes.
double class_ap_at(const std::vector<PredictionSet>& predictions,
                   const std::vector<Scene>& scenes, int class_id, double threshold) {
  std::size_t total_gt = 0;
  std::vector<std::vector<std::vector<std::uint8_t>>> gt_masks(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const Scene& scene = scenes[s];
    for (std::size_t k = 0; k < scene.instances.size(); ++k) {
      if (scene.instances[k].class_id != class_id) continue;
      std::vector<std::uint8_t> mask(scene.size(), 0);
      for (std::size_t j = 0; j < scene.size(); ++j)
        mask[j] = scene.gt_instance[j] == static_cast<int>(k) ? 1 : 0;
      gt_masks[s].push_back(std::move(mask));
      ++total_gt;
    }
  }
  if (total_gt == 0) return 0.0;

  std::vector<PooledPrediction> pooled;
  for (std::size_t s = 0; s < predictions.size(); ++s)
    for (std::size_t p = 0; p < predictions[s].size(); ++p)
      if (predictions[s][p].class_id == class_id)
        pooled.push_back({predictions[s][p].confidence, s, p});
  std::stable_sort(pooled.begin(), pooled.end(),
                   [](const PooledPrediction& a, const PooledPrediction& b) {
                     return a.confidence > b.confidence;
                   });

  std::vector<std::set<std::size_t>> matched(scenes.size());
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const PooledPrediction& pred : pooled) {
    const std::vector<std::uint8_t>& mask = predictions[pred.scene][pred.index].mask;
    double best_iou = -1.0;
    std::size_t best_gt = 0;
    for (std::size_t g = 0; g < gt_masks[pred.scene].size(); ++g) {
      if (matched[pred.scene].count(g)) continue;
      double iou = mask_iou(mask, gt_masks[pred.scene][g]);
      if (iou > best_iou) {
        best_iou = iou;
        best_gt = g;
      }
    }
    if (best_iou >= threshold) {
      matched[pred.scene].insert(best_gt);
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  // All-point interpolation: running max of precision from the right.
  double ap = 0.0;
  double best_prec = 0.0;
  for (std::size_t i = precision.size(); i-- > 0;) {
    best_prec = std::max(best_prec, precision[i]);
    double prev_recall = i == 0 ? 0.0 : recall[i - 1];
    if (recall[i] > prev_recall) ap += (recall[i] - prev_recall) * best_prec;
  }
  return ap;
}

}  // namespace

MetricReport compute_ap(const std::vector<PredictionSet>& predictions,
                        const std::vector<Scene>& scenes, const std::vector<double>& thresholds) {
  if (predictions.size() != scenes.size())
    throw std::invalid_argument("compute_ap: prediction/scene counts differ");

  std::set<int> classes;
  for (const Scene& scene : scenes)
    for (const Instance& inst : scene.instances) classes.insert(inst.class_id);

  MetricReport report;
  if (classes.empty()) return report;

  double ap_sum = 0.0, ap50_sum = 0.0, ap25_sum = 0.0;
  for (int class_id : classes) {
    ClassMetrics cm;
    cm.class_id = class_id;
    double acc = 0.0;
    for (double t : thresholds) acc += class_ap_at(predictions, scenes, class_id, t);
    cm.ap = thresholds.empty() ? 0.0 : acc / static_cast<double>(thresholds.size());
    cm.ap50 = class_ap_at(predictions, scenes, class_id, 0.50);
    cm.ap25 = class_ap_at(predictions, scenes, class_id, 0.25);
    ap_sum += cm.ap;
    ap50_sum += cm.ap50;
    ap25_sum += cm.ap25;
    report.per_class.push_back(cm);
  }
  double n = static_cast<double>(classes.size());
  report.ap = ap_sum / n;
  report.ap50 = ap50_sum / n;
  report.ap25 = ap25_sum / n;
  return report;
}

std::optional<double> compute_macc(const PseudoMasks& pseudo,
                                   const std::vector<int>& oracle_assignment,
                                   const RegionPartition& partition) {
  std::size_t n_u = partition.n_u();
  if (n_u == 0) return std::nullopt;
  if (oracle_assignment.size() != n_u)
    throw std::invalid_argument("compute_macc: oracle assignment length mismatch");

  std::size_t k = pseudo.overlap_masks.size();
  std::vector<bool> has_candidate(k, false);
  for (const std::vector<int>& candidates : partition.overlap_candidates)
    for (int c : candidates)
      if (c >= 0 && static_cast<std::size_t>(c) < k) has_candidate[c] = true;

  double acc_sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t inst = 0; inst < k; ++inst) {
    if (!has_candidate[inst]) continue;
    std::size_t correct = 0;
    for (std::size_t u = 0; u < n_u; ++u) {
      bool predicted = pseudo.overlap_masks[inst][u] != 0;
      bool truth = oracle_assignment[u] == static_cast<int>(inst);
      correct += predicted == truth ? 1 : 0;
    }
    acc_sum += static_cast<double>(correct) / static_cast<double>(n_u);
    ++counted;
  }
  if (counted == 0) return std::nullopt;
  return acc_sum / static_cast<double>(counted);
}

PseudoMasks nearest_center_baseline(const RegionPartition& partition, const Scene& scene) {
  std::vector<int> assignment;
  assignment.reserve(partition.n_u());
  // Candidate ids ascend, so strict < keeps the smallest index on ties.
  for (std::size_t u = 0; u < partition.n_u(); ++u) {
    Vec3 p = scene.coords(partition.overlap_points[u]);
    const std::vector<int>& candidates = partition.overlap_candidates[u];
    int best = candidates.front();
    double best_dist = std::numeric_limits<double>::infinity();
    for (int cand : candidates) {
      const Vec3& c = scene.instances[cand].center;
      double dist = 0.0;
      for (int a = 0; a < 3; ++a) {
        double d = p[a] - c[a];
        dist += d * d;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = cand;
      }
    }
    assignment.push_back(best);
  }
  return build_targets(assignment, partition, scene.instances.size());
}

template <typename T>
PredictionSet extract_predictions(const ModelParams<T>& params, const Scene& scene) {
  SceneInputs<T> inputs = make_scene_inputs<T>(scene);
  ForwardOutputs<T> fwd = model_forward(params, inputs, CenterMode::Student);

  std::size_t n_q = params.config.num_queries;
  std::size_t n = scene.size();
  std::size_t c1 = params.config.num_classes + 1;
  auto rho = fwd.rho.values();
  auto logits = fwd.class_logits.values();

  PredictionSet predictions;
  for (std::size_t q = 0; q < n_q; ++q) {
    // class probabilities incl. the trailing no-object column
    double mx = logits[q * c1];
    for (std::size_t j = 1; j < c1; ++j) mx = std::max(mx, static_cast<double>(logits[q * c1 + j]));
    std::vector<double> probs(c1);
    double total = 0.0;
    for (std::size_t j = 0; j < c1; ++j) {
      probs[j] = std::exp(static_cast<double>(logits[q * c1 + j]) - mx);
      total += probs[j];
    }
    for (double& p : probs) p /= total;

    std::size_t arg_all = 0;
    for (std::size_t j = 1; j < c1; ++j)
      if (probs[j] > probs[arg_all]) arg_all = j;
    if (arg_all == c1 - 1) continue;  // predicts no-object

    Prediction pred;
    pred.mask.assign(n, 0);
    double score_sum = 0.0;
    std::size_t mask_size = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (rho[q * n + j] >= T(0.5)) {
        pred.mask[j] = 1;
        score_sum += static_cast<double>(rho[q * n + j]);
        ++mask_size;
      }
    }
    if (mask_size == 0) continue;

    std::size_t arg_real = 0;
    for (std::size_t j = 1; j + 1 < c1; ++j)
      if (probs[j] > probs[arg_real]) arg_real = j;
    pred.class_id = static_cast<int>(arg_real);
    pred.confidence = probs[arg_real] * (score_sum / static_cast<double>(mask_size));
    predictions.push_back(std::move(pred));
  }
  return predictions;
}

template PredictionSet extract_predictions<float>(const ModelParams<float>&, const Scene&);
template PredictionSet extract_predictions<double>(const ModelParams<double>&, const Scene&);

}  // namespace boxseg
