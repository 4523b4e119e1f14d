#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "boxseg/model.hpp"
#include "boxseg/pseudolabel.hpp"
#include "boxseg/scene.hpp"

namespace boxseg {

struct Prediction {
  std::vector<std::uint8_t> mask;  // hard mask over the scene's N points
  int class_id = 0;
  double confidence = 0.0;  // mask score x class probability
};

using PredictionSet = std::vector<Prediction>;

struct ClassMetrics {
  int class_id = 0;
  double ap = 0.0;
  double ap50 = 0.0;
  double ap25 = 0.0;
};

struct MetricReport {
  double ap = 0.0;    // mean over IoU 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap25 = 0.0;
  std::vector<ClassMetrics> per_class;
  std::optional<double> macc;  // absent when no scene has overlap points
};

// IoU thresholds 0.50:0.05:0.95 plus the fixed AP50/AP25 points.
std::vector<double> default_ap_thresholds();

// ScanNet-style protocol: per class, predictions sorted by descending
// confidence greedily match the unmatched ground-truth instance of the
// same class with highest IoU >= threshold; all-point interpolated PR
// integration; mean over classes present in ground truth, then over
// thresholds.
MetricReport compute_ap(const std::vector<PredictionSet>& predictions,
                        const std::vector<Scene>& scenes, const std::vector<double>& thresholds);

// Per-instance binary accuracy of overlap pseudo-masks against the truth
// over all overlap points, averaged over instances with at least one
// candidate point; std::nullopt when the scene has no overlap points.
std::optional<double> compute_macc(const PseudoMasks& pseudo,
                                   const std::vector<int>& oracle_assignment,
                                   const RegionPartition& partition);

// Overlap points go to the candidate with the nearest box center.
PseudoMasks nearest_center_baseline(const RegionPartition& partition, const Scene& scene);

// Student forward; queries predicting no-object or an empty mask are
// dropped. Deterministic given (params, scene).
template <typename T>
PredictionSet extract_predictions(const ModelParams<T>& params, const Scene& scene);

}  // namespace boxseg
