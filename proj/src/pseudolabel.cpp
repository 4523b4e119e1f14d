#include "boxseg/pseudolabel.hpp"

#include <cmath>

#include "boxseg/common.hpp"

namespace boxseg {

namespace {

double stable_softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

template <typename T>
CostMatrix matching_costs(const Tensor<T>& mask_logits, const Tensor<T>& class_logits,
                          const std::vector<std::size_t>& point_subset,
                          const std::vector<std::vector<std::uint8_t>>& subset_targets,
                          const std::vector<int>& instance_classes, const LossWeights& weights) {
  std::size_t n_q = mask_logits.rows();
  std::size_t k = subset_targets.size();
  std::size_t subset = point_subset.size();
  auto zv = mask_logits.values();
  auto cv = class_logits.values();
  std::size_t n = mask_logits.cols();
  std::size_t c1 = class_logits.cols();

  // softmax over class logits, per query
  std::vector<double> class_probs(n_q * c1);
  for (std::size_t q = 0; q < n_q; ++q) {
    double mx = cv[q * c1];
    for (std::size_t j = 1; j < c1; ++j) mx = std::max(mx, static_cast<double>(cv[q * c1 + j]));
    double total = 0.0;
    for (std::size_t j = 0; j < c1; ++j) {
      class_probs[q * c1 + j] = std::exp(static_cast<double>(cv[q * c1 + j]) - mx);
      total += class_probs[q * c1 + j];
    }
    for (std::size_t j = 0; j < c1; ++j) class_probs[q * c1 + j] /= total;
  }

  CostMatrix cost = CostMatrix::zeros(k, n_q);
  for (std::size_t q = 0; q < n_q; ++q) {
    // per-query prediction stats over the subset, shared across instances
    std::vector<double> prob(subset);
    double prob_sum = 0.0;
    for (std::size_t s = 0; s < subset; ++s) {
      prob[s] = stable_sigmoid(static_cast<double>(zv[q * n + point_subset[s]]));
      prob_sum += prob[s];
    }
    for (std::size_t inst = 0; inst < k; ++inst) {
      const std::vector<std::uint8_t>& target = subset_targets[inst];
      double bce = 0.0, intersection = 0.0, target_sum = 0.0;
      for (std::size_t s = 0; s < subset; ++s) {
        double z = static_cast<double>(zv[q * n + point_subset[s]]);
        double t = target[s] ? 1.0 : 0.0;
        bce += stable_softplus(z) - z * t;
        intersection += prob[s] * t;
        target_sum += t;
      }
      bce = subset > 0 ? bce / static_cast<double>(subset) : 0.0;
      double dice = 1.0 - (2.0 * intersection + 1.0) / (prob_sum + target_sum + 1.0);
      double class_term = class_probs[q * c1 + static_cast<std::size_t>(instance_classes[inst])];
      cost.at(inst, q) = weights.bce * bce + weights.dice * dice - weights.cls * class_term;
    }
  }
  return cost;
}

template <typename T>
MatchedSimilarity<T> match_queries(const Tensor<T>& mask_logits, const Tensor<T>& class_logits,
                                   const RegionPartition& partition,
                                   const std::vector<Instance>& instances,
                                   const LossWeights& weights) {
  std::size_t k = instances.size();
  std::size_t n_q = mask_logits.rows();
  if (k > n_q)
    throw std::invalid_argument("match_queries: " + std::to_string(k) + " instances exceed " +
                                std::to_string(n_q) + " queries");

  // Mask terms see single-box points plus background negatives only.
  std::vector<std::size_t> subset;
  subset.reserve(partition.label.size() - partition.n_u());
  for (std::size_t j = 0; j < partition.label.size(); ++j)
    if (partition.label[j].kind != RegionKind::Overlap) subset.push_back(j);

  std::vector<std::vector<std::uint8_t>> targets(k, std::vector<std::uint8_t>(subset.size(), 0));
  std::vector<std::size_t> single_count(k, 0);
  for (std::size_t s = 0; s < subset.size(); ++s) {
    const auto& label = partition.label[subset[s]];
    if (label.kind == RegionKind::Single) {
      targets[label.single_instance][s] = 1;
      ++single_count[label.single_instance];
    }
  }
  for (std::size_t inst = 0; inst < k; ++inst)
    if (single_count[inst] == 0)
      log_warn("match_queries: instance " + std::to_string(inst) +
               " has no single-box points; its mask cost uses background negatives only");

  std::vector<int> classes;
  classes.reserve(k);
  for (const Instance& inst : instances) classes.push_back(inst.class_id);

  MatchedSimilarity<T> matched;
  matched.assignment =
      hungarian(matching_costs(mask_logits, class_logits, subset, targets, classes, weights));
  matched.rho_prime = take_rows(sigmoid(mask_logits), matched.assignment.query_for_instance);
  return matched;
}

std::vector<int> assign_overlap_points(const std::vector<double>& rho_prime_values,
                                       std::size_t num_instances, std::size_t num_points,
                                       const RegionPartition& partition) {
  std::vector<int> assignment;
  assignment.reserve(partition.n_u());
  for (std::size_t u = 0; u < partition.n_u(); ++u) {
    std::size_t j = partition.overlap_points[u];
    const std::vector<int>& candidates = partition.overlap_candidates[u];
    int best = candidates.front();
    double best_score = -1.0;
    for (int cand : candidates) {  // ascending ids: strict > keeps the smallest on ties
      if (static_cast<std::size_t>(cand) >= num_instances) continue;
      double score = rho_prime_values[static_cast<std::size_t>(cand) * num_points + j];
      if (score > best_score) {
        best_score = score;
        best = cand;
      }
    }
    assignment.push_back(best);
  }
  return assignment;
}

PseudoMasks build_targets(const std::vector<int>& overlap_assignment,
                          const RegionPartition& partition, std::size_t num_instances) {
  std::size_t n = partition.label.size();
  PseudoMasks pseudo;
  pseudo.overlap_masks.assign(num_instances, std::vector<std::uint8_t>(partition.n_u(), 0));
  pseudo.merged_target.assign(num_instances, std::vector<std::uint8_t>(n, 0));

  for (std::size_t s = 0; s < partition.n_l(); ++s)
    pseudo.merged_target[partition.single_instance[s]][partition.single_points[s]] = 1;
  for (std::size_t u = 0; u < partition.n_u(); ++u) {
    int inst = overlap_assignment[u];
    pseudo.overlap_masks[inst][u] = 1;
    pseudo.merged_target[inst][partition.overlap_points[u]] = 1;
  }
  return pseudo;
}

template <typename T>
TeacherOutputs<T> teacher_step(const ModelParams<T>& teacher, const Scene& scene,
                               const RegionPartition& partition, const SceneInputs<T>& inputs,
                               const LossWeights& weights, bool center_refine,
                               std::size_t fps_start) {
  ForwardOutputs<T> fwd = model_forward(
      teacher, inputs, center_refine ? CenterMode::TeacherCenters : CenterMode::Student, fps_start);

  MatchedSimilarity<T> matched =
      match_queries(fwd.mask_logits, fwd.class_logits, partition, scene.instances, weights);

  std::vector<double> rho_prime(matched.rho_prime.values().begin(),
                                matched.rho_prime.values().end());
  TeacherOutputs<T> out;
  out.overlap_assignment =
      assign_overlap_points(rho_prime, scene.instances.size(), scene.size(), partition);
  out.pseudo = build_targets(out.overlap_assignment, partition, scene.instances.size());
  out.assignment = matched.assignment;
  out.content = fwd.queries.content;
  out.features = fwd.features;
  return out;
}

#define BOXSEG_INSTANTIATE_PSEUDOLABEL(T)                                                       \
  template CostMatrix matching_costs(const Tensor<T>&, const Tensor<T>&,                        \
                                     const std::vector<std::size_t>&,                           \
                                     const std::vector<std::vector<std::uint8_t>>&,             \
                                     const std::vector<int>&, const LossWeights&);              \
  template MatchedSimilarity<T> match_queries(const Tensor<T>&, const Tensor<T>&,               \
                                              const RegionPartition&,                           \
                                              const std::vector<Instance>&, const LossWeights&); \
  template TeacherOutputs<T> teacher_step(const ModelParams<T>&, const Scene&,                  \
                                          const RegionPartition&, const SceneInputs<T>&,        \
                                          const LossWeights&, bool, std::size_t);

BOXSEG_INSTANTIATE_PSEUDOLABEL(float)
BOXSEG_INSTANTIATE_PSEUDOLABEL(double)

#undef BOXSEG_INSTANTIATE_PSEUDOLABEL

}  // namespace boxseg
