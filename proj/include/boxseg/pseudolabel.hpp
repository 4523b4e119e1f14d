#pragma once

#include <cstdint>
#include <vector>

#include "boxseg/assign.hpp"
#include "boxseg/losses.hpp"
#include "boxseg/model.hpp"
#include "boxseg/scene.hpp"

namespace boxseg {

template <typename T>
struct MatchedSimilarity {
  Tensor<T> rho_prime;    // K x N, rows of rho reordered to instance order
  Assignment assignment;  // instance -> query
};

struct PseudoMasks {
  // K binary vectors over the N_u overlap points; pairwise disjoint and
  // jointly covering every overlap point.
  std::vector<std::vector<std::uint8_t>> overlap_masks;
  // K binary vectors over all N points: single-box membership union the
  // assigned overlap points; background always 0.
  std::vector<std::vector<std::uint8_t>> merged_target;
};

// Matching cost over a chosen point subset:
//   cost(k, q) = w_bce * BCE(sigma(z_q), t_k) + w_dice * Dice(sigma(z_q), t_k)
//                - w_cls * softmax(class_logits_q)[class_k]
// evaluated on detached values; matching itself carries no gradient.
template <typename T>
CostMatrix matching_costs(const Tensor<T>& mask_logits, const Tensor<T>& class_logits,
                          const std::vector<std::size_t>& point_subset,
                          const std::vector<std::vector<std::uint8_t>>& subset_targets,
                          const std::vector<int>& instance_classes, const LossWeights& weights);

// Hungarian matching between queries and instances. Mask costs use only
// single-box plus background points; overlap points are what the teacher
// is estimating and stay out of the cost.
template <typename T>
MatchedSimilarity<T> match_queries(const Tensor<T>& mask_logits, const Tensor<T>& class_logits,
                                   const RegionPartition& partition,
                                   const std::vector<Instance>& instances,
                                   const LossWeights& weights);

// Per overlap point: the candidate instance with maximal matched
// similarity, ties to the smallest instance index.
std::vector<int> assign_overlap_points(const std::vector<double>& rho_prime_values,
                                       std::size_t num_instances, std::size_t num_points,
                                       const RegionPartition& partition);

// Builds PseudoMasks from a per-overlap-point instance assignment.
PseudoMasks build_targets(const std::vector<int>& overlap_assignment,
                          const RegionPartition& partition, std::size_t num_instances);

template <typename T>
struct TeacherOutputs {
  PseudoMasks pseudo;
  Assignment assignment;
  std::vector<int> overlap_assignment;  // a_j per overlap point
  Tensor<T> content;                    // Q^T_{c,L}, gradient-constant
  Tensor<T> features;                   // F^T, gradient-constant
};

// Full teacher pipeline: encode -> center-seeded decoder -> masks ->
// matching -> overlap assignment -> merged targets. Runs without
// gradient recording; all outputs are constants to the student's loss.
template <typename T>
TeacherOutputs<T> teacher_step(const ModelParams<T>& teacher, const Scene& scene,
                               const RegionPartition& partition, const SceneInputs<T>& inputs,
                               const LossWeights& weights, bool center_refine = true,
                               std::size_t fps_start = 0);

}  // namespace boxseg
