#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "boxseg/assign.hpp"
#include "boxseg/tensor.hpp"

namespace boxseg {

struct LossWeights {
  double bce = 1.0;
  double dice = 1.0;
  double cls = 0.5;
  double query = 0.5;
  double feature = 0.5;

  // (5.0, 1.0, 2.0, 2.0, 2.0); accepted but not re-validated at desk scale.
  static LossWeights s3dis_preset();

  void validate() const;
};

struct LossReport {
  double bce = 0.0;
  double dice = 0.0;
  double cls = 0.0;
  double query = 0.0;
  double feature = 0.0;
  double total = 0.0;
};

// Raised when a loss term comes out non-finite; the training step is
// aborted and the partial report is preserved for the metrics stream.
struct NonFiniteLossError : std::runtime_error {
  NonFiniteLossError(const std::string& term_name, LossReport partial)
      : std::runtime_error("non-finite loss term: " + term_name),
        term(term_name),
        report(partial) {}
  std::string term;
  LossReport report;
};

// Mean binary cross-entropy over all entries, computed in log space from
// mask logits: softplus(z) - z*t.
template <typename T>
Tensor<T> bce_mask_loss(const Tensor<T>& matched_mask_logits, const Tensor<T>& targets);

// Mean over instances of 1 - (2*sum(p*t) + 1) / (sum(p) + sum(t) + 1).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& matched_pred, const Tensor<T>& targets);

// Cross-entropy over all queries; matched queries target their instance
// class, the rest target the trailing no-object class.
template <typename T>
Tensor<T> classification_loss(const Tensor<T>& class_logits, const Assignment& assignment,
                              const std::vector<int>& instance_classes, std::size_t num_classes);

// Entrywise L1 between student and teacher content queries, normalized by
// the element count; the teacher side must be gradient-constant.
template <typename T>
Tensor<T> query_consistency(const Tensor<T>& student_content, const Tensor<T>& teacher_content);

// Mean of feature rows selected by a binary mask; count 0 reports empty.
template <typename T>
std::pair<std::vector<T>, std::size_t> masked_feature_mean(const Tensor<T>& features,
                                                           const std::vector<std::uint8_t>& mask);

// Mean over instances (both masks non-empty) of the squared L2 distance
// between teacher and student masked-feature means. Masks are constant
// selectors; gradient flows only through student features.
template <typename T>
Tensor<T> masked_feature_consistency(const Tensor<T>& teacher_features,
                                     const std::vector<std::vector<std::uint8_t>>& teacher_masks,
                                     const Tensor<T>& student_features,
                                     const std::vector<std::vector<std::uint8_t>>& student_masks);

template <typename T>
struct LossTerms {
  Tensor<T> bce;
  Tensor<T> dice;
  Tensor<T> cls;
  Tensor<T> query;
  Tensor<T> feature;
};

// Weighted sum; throws NonFiniteLossError naming the offending term.
template <typename T>
std::pair<Tensor<T>, LossReport> total_loss(const LossTerms<T>& terms, const LossWeights& weights);

}  // namespace boxseg
