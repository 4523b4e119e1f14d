#include "boxseg/losses.hpp"

#include <cmath>

#include "boxseg/common.hpp"

namespace boxseg {

LossWeights LossWeights::s3dis_preset() { return LossWeights{5.0, 1.0, 2.0, 2.0, 2.0}; }

void LossWeights::validate() const {
  for (double w : {bce, dice, cls, query, feature})
    if (!(std::isfinite(w) && w >= 0.0))
      throw std::invalid_argument("loss weights must be finite and nonnegative");
}

template <typename T>
Tensor<T> bce_mask_loss(const Tensor<T>& matched_mask_logits, const Tensor<T>& targets) {
  if (matched_mask_logits.shape() != targets.shape())
    tensor_error("bce_mask_loss: prediction/target shapes differ");
  // softplus(z) - z*t, entrywise
  Tensor<T> penalty = sub(softplus(matched_mask_logits), mul(matched_mask_logits, targets));
  return reduce_mean(penalty);
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& matched_pred, const Tensor<T>& targets) {
  if (matched_pred.shape() != targets.shape())
    tensor_error("dice_loss: prediction/target shapes differ");
  std::size_t k = matched_pred.rows();
  Tensor<T> ones = Tensor<T>::full({k}, T(1));
  Tensor<T> intersection = reduce_sum_axis(mul(matched_pred, targets), 1);
  Tensor<T> pred_sum = reduce_sum_axis(matched_pred, 1);
  Tensor<T> target_sum = reduce_sum_axis(targets, 1);
  Tensor<T> numer = add(scale(intersection, T(2)), ones);
  Tensor<T> denom = add(add(pred_sum, target_sum), ones);
  return reduce_mean(sub(ones, divide(numer, denom)));
}

template <typename T>
Tensor<T> classification_loss(const Tensor<T>& class_logits, const Assignment& assignment,
                              const std::vector<int>& instance_classes, std::size_t num_classes) {
  std::size_t n_q = class_logits.rows();
  std::vector<int> targets(n_q, static_cast<int>(num_classes));  // no-object by default
  for (std::size_t k = 0; k < assignment.query_for_instance.size(); ++k)
    targets[assignment.query_for_instance[k]] = instance_classes[k];
  return softmax_cross_entropy(class_logits, targets);
}

template <typename T>
Tensor<T> query_consistency(const Tensor<T>& student_content, const Tensor<T>& teacher_content) {
  if (student_content.shape() != teacher_content.shape())
    tensor_error("query_consistency: student/teacher query shapes differ");
  T norm = T(1) / static_cast<T>(student_content.numel());
  return scale(reduce_l1(sub(student_content, teacher_content)), norm);
}

template <typename T>
std::pair<std::vector<T>, std::size_t> masked_feature_mean(const Tensor<T>& features,
                                                           const std::vector<std::uint8_t>& mask) {
  std::size_t n = features.rows(), c = features.cols();
  if (mask.size() != n) tensor_error("masked_feature_mean: mask length does not match rows");
  std::vector<T> mean(c, T(0));
  std::size_t count = 0;
  auto fv = features.values();
  for (std::size_t j = 0; j < n; ++j) {
    if (!mask[j]) continue;
    ++count;
    for (std::size_t d = 0; d < c; ++d) mean[d] += fv[j * c + d];
  }
  if (count > 0)
    for (T& v : mean) v /= static_cast<T>(count);
  return {std::move(mean), count};
}

template <typename T>
Tensor<T> masked_feature_consistency(const Tensor<T>& teacher_features,
                                     const std::vector<std::vector<std::uint8_t>>& teacher_masks,
                                     const Tensor<T>& student_features,
                                     const std::vector<std::vector<std::uint8_t>>& student_masks) {
  if (teacher_masks.size() != student_masks.size())
    tensor_error("masked_feature_consistency: instance counts differ");
  std::size_t n = student_features.rows(), c = student_features.cols();

  Tensor<T> accum;
  std::size_t included = 0;
  for (std::size_t k = 0; k < teacher_masks.size(); ++k) {
    auto [teacher_mean, teacher_count] = masked_feature_mean(teacher_features, teacher_masks[k]);
    std::size_t student_count = 0;
    for (std::uint8_t m : student_masks[k]) student_count += m ? 1 : 0;
    if (teacher_count == 0 || student_count == 0) {
      log_warn("masked_feature_consistency: instance " + std::to_string(k) +
               " excluded (empty mask)");
      continue;
    }
    std::vector<T> selector(n, T(0));
    for (std::size_t j = 0; j < n; ++j)
      if (student_masks[k][j]) selector[j] = T(1) / static_cast<T>(student_count);
    Tensor<T> student_mean =
        matmul(Tensor<T>::from_values({1, n}, std::move(selector)), student_features);
    Tensor<T> teacher_mean_t = Tensor<T>::from_values({1, c}, std::move(teacher_mean));
    Tensor<T> term = reduce_sq_l2(sub(student_mean, teacher_mean_t));
    accum = accum.defined() ? add(accum, term) : term;
    ++included;
  }
  if (included == 0) {
    log_warn("masked_feature_consistency: every instance empty on one side; loss is 0");
    return Tensor<T>::scalar(T(0));
  }
  return scale(accum, T(1) / static_cast<T>(included));
}

template <typename T>
std::pair<Tensor<T>, LossReport> total_loss(const LossTerms<T>& terms, const LossWeights& weights) {
  weights.validate();
  LossReport report;
  report.bce = static_cast<double>(terms.bce.item());
  report.dice = static_cast<double>(terms.dice.item());
  report.cls = static_cast<double>(terms.cls.item());
  report.query = static_cast<double>(terms.query.item());
  report.feature = static_cast<double>(terms.feature.item());
  report.total = weights.bce * report.bce + weights.dice * report.dice + weights.cls * report.cls +
                 weights.query * report.query + weights.feature * report.feature;

  const std::pair<const char*, double> named[] = {{"bce", report.bce},
                                                  {"dice", report.dice},
                                                  {"cls", report.cls},
                                                  {"query", report.query},
                                                  {"feature", report.feature}};
  for (const auto& [name, value] : named)
    if (!std::isfinite(value)) throw NonFiniteLossError(name, report);

  Tensor<T> total = scale(terms.bce, static_cast<T>(weights.bce));
  total = add(total, scale(terms.dice, static_cast<T>(weights.dice)));
  total = add(total, scale(terms.cls, static_cast<T>(weights.cls)));
  total = add(total, scale(terms.query, static_cast<T>(weights.query)));
  total = add(total, scale(terms.feature, static_cast<T>(weights.feature)));
  return {total, report};
}

#define BOXSEG_INSTANTIATE_LOSSES(T)                                                             \
  template Tensor<T> bce_mask_loss(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> classification_loss(const Tensor<T>&, const Assignment&,                    \
                                         const std::vector<int>&, std::size_t);                  \
  template Tensor<T> query_consistency(const Tensor<T>&, const Tensor<T>&);                      \
  template std::pair<std::vector<T>, std::size_t> masked_feature_mean(                           \
      const Tensor<T>&, const std::vector<std::uint8_t>&);                                       \
  template Tensor<T> masked_feature_consistency(                                                 \
      const Tensor<T>&, const std::vector<std::vector<std::uint8_t>>&, const Tensor<T>&,         \
      const std::vector<std::vector<std::uint8_t>>&);                                            \
  template std::pair<Tensor<T>, LossReport> total_loss(const LossTerms<T>&, const LossWeights&);

BOXSEG_INSTANTIATE_LOSSES(float)
BOXSEG_INSTANTIATE_LOSSES(double)

#undef BOXSEG_INSTANTIATE_LOSSES

}  // namespace boxseg
