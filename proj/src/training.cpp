#include "boxseg/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "boxseg/common.hpp"

namespace boxseg {

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train config: steps must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning rate must be positive");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0))
    throw ConfigError("train config: ema_decay must lie in [0, 1]");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
    throw ConfigError("train config: warmup_fraction must lie in (0, 1)");
  if (precision != "f32" && precision != "f64")
    throw ConfigError("train config: precision must be 'f32' or 'f64'");
  weights.validate();
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = weights;
  if (!use_query_loss) w.query = 0.0;
  if (!use_feature_loss) w.feature = 0.0;
  return w;
}

double one_cycle_lr(std::size_t step, const TrainConfig& config) {
  if (step >= config.steps) throw ConfigError("one_cycle_lr: step beyond schedule");
  constexpr double pi = 3.14159265358979323846;
  double initial = config.learning_rate;
  double peak = config.learning_rate * config.max_lr_factor;
  double floor = config.learning_rate / config.final_lr_divisor;
  if (config.steps == 1) return initial;

  double last = static_cast<double>(config.steps - 1);
  double warmup_end = std::round(config.warmup_fraction * last);
  if (static_cast<double>(step) <= warmup_end) {
    double u = warmup_end > 0.0 ? static_cast<double>(step) / warmup_end : 1.0;
    return initial + (peak - initial) * 0.5 * (1.0 - std::cos(pi * u));
  }
  double u = (static_cast<double>(step) - warmup_end) / (last - warmup_end);
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(pi * u));
}

template <typename T>
TrainState<T> init_train_state(const ModelConfig& model_config, const TrainConfig& config) {
  config.validate();
  TrainState<T> state;
  state.student = ModelParams<T>::init(model_config, config.seed);
  state.teacher = state.student.clone();
  state.teacher.set_requires_grad(false);
  visit_params(state.student, [&state](const std::string&, const Tensor<T>& t) {
    state.optimizer.first_moment.emplace_back(t.numel(), T(0));
    state.optimizer.second_moment.emplace_back(t.numel(), T(0));
  });
  return state;
}

template <typename T>
void ema_update(ModelParams<T>& teacher, const ModelParams<T>& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("ema_update: alpha must lie in [0, 1]");
  T a = static_cast<T>(alpha);
  std::vector<Tensor<T>*> teacher_tensors;
  visit_params(teacher, [&](const std::string&, Tensor<T>& t) { teacher_tensors.push_back(&t); });
  std::size_t i = 0;
  visit_params(student, [&](const std::string& name, const Tensor<T>& s) {
    Tensor<T>& t = *teacher_tensors[i++];
    if (t.shape() != s.shape())
      throw std::invalid_argument("ema_update: shape mismatch for " + name);
    auto tv = t.values_mut();
    auto sv = s.values();
    for (std::size_t j = 0; j < tv.size(); ++j) tv[j] = a * tv[j] + (T(1) - a) * sv[j];
  });
}

namespace {

template <typename T>
Tensor<T> merged_target_tensor(const PseudoMasks& pseudo, std::size_t n) {
  std::size_t k = pseudo.merged_target.size();
  std::vector<T> values(k * n, T(0));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (pseudo.merged_target[i][j]) values[i * n + j] = T(1);
  return Tensor<T>::from_values({k, n}, std::move(values));
}

template <typename T>
void clip_and_apply_adamw(TrainState<T>& state, const TrainConfig& config, double lr) {
  std::vector<Tensor<T>*> params;
  visit_params(state.student, [&](const std::string&, Tensor<T>& t) { params.push_back(&t); });

  double norm_sq = 0.0;
  for (Tensor<T>* p : params) {
    if (!p->has_grad()) continue;
    for (T g : p->grad()) norm_sq += static_cast<double>(g) * static_cast<double>(g);
  }
  double norm = std::sqrt(norm_sq);
  T clip_scale = T(1);
  if (config.grad_clip > 0.0 && norm > config.grad_clip)
    clip_scale = static_cast<T>(config.grad_clip / norm);

  AdamState<T>& opt = state.optimizer;
  ++opt.updates;
  double bias1 = 1.0 - std::pow(config.beta1, static_cast<double>(opt.updates));
  double bias2 = 1.0 - std::pow(config.beta2, static_cast<double>(opt.updates));
  T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  T eps = static_cast<T>(config.adam_eps);
  T step_size = static_cast<T>(lr / bias1);
  T decay = static_cast<T>(lr * config.weight_decay);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    auto values = p.values_mut();
    std::vector<T>& m = opt.first_moment[i];
    std::vector<T>& v = opt.second_moment[i];
    std::span<const T> grads = p.has_grad() ? p.grad() : std::span<const T>();
    for (std::size_t j = 0; j < values.size(); ++j) {
      T g = grads.empty() ? T(0) : grads[j] * clip_scale;
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      T denom = std::sqrt(v[j] / static_cast<T>(bias2)) + eps;
      values[j] -= step_size * m[j] / denom + decay * values[j];
    }
  }
}

}  // namespace

template <typename T>
StudentLoss<T> student_loss(const ModelParams<T>& student, const Scene& scene,
                            const SceneInputs<T>& inputs, const TeacherOutputs<T>& teacher_out,
                            const TrainConfig& config) {
  LossWeights weights = config.effective_weights();
  ForwardOutputs<T> fwd = model_forward(student, inputs, CenterMode::Student);

  // Student-side matching against the merged (now complete) targets.
  std::vector<std::size_t> all_points(scene.size());
  for (std::size_t j = 0; j < scene.size(); ++j) all_points[j] = j;
  std::vector<int> classes;
  for (const Instance& inst : scene.instances) classes.push_back(inst.class_id);
  Assignment assignment = hungarian(matching_costs(fwd.mask_logits, fwd.class_logits, all_points,
                                                   teacher_out.pseudo.merged_target, classes,
                                                   weights));

  Tensor<T> targets = merged_target_tensor<T>(teacher_out.pseudo, scene.size());
  Tensor<T> matched_logits = take_rows(fwd.mask_logits, assignment.query_for_instance);
  Tensor<T> matched_pred = take_rows(fwd.rho, assignment.query_for_instance);

  LossTerms<T> terms;
  terms.bce = bce_mask_loss(matched_logits, targets);
  terms.dice = dice_loss(matched_pred, targets);
  terms.cls = classification_loss(fwd.class_logits, assignment, classes,
                                  student.config.num_classes);
  terms.query = config.use_query_loss ? query_consistency(fwd.queries.content, teacher_out.content)
                                      : Tensor<T>::scalar(T(0));
  if (config.use_feature_loss) {
    // Hard student masks act as constant selectors; only features carry grad.
    std::vector<std::vector<std::uint8_t>> student_masks;
    auto pred_values = matched_pred.values();
    for (std::size_t k = 0; k < scene.instances.size(); ++k) {
      std::vector<std::uint8_t> mask(scene.size(), 0);
      for (std::size_t j = 0; j < scene.size(); ++j)
        mask[j] = pred_values[k * scene.size() + j] >= T(0.5) ? 1 : 0;
      student_masks.push_back(std::move(mask));
    }
    terms.feature = masked_feature_consistency(teacher_out.features,
                                               teacher_out.pseudo.merged_target, fwd.features,
                                               student_masks);
  } else {
    terms.feature = Tensor<T>::scalar(T(0));
  }

  auto [total, report] = total_loss(terms, weights);
  return StudentLoss<T>{total, report, std::move(assignment)};
}

template <typename T>
StepRecord train_step(TrainState<T>& state, const Scene& scene, const RegionPartition& partition,
                      const TrainConfig& config) {
  StepRecord record;
  record.step = state.step;
  record.lr = one_cycle_lr(std::min(state.step, config.steps - 1), config);

  SceneInputs<T> inputs = make_scene_inputs<T>(scene);

  // Teacher pseudo-labels are produced outside any tape.
  TeacherOutputs<T> teacher_out = teacher_step(state.teacher, scene, partition, inputs,
                                               config.effective_weights(), config.center_refine);

  Tape<T> tape;
  try {
    typename Tape<T>::Scope scope(tape);
    StudentLoss<T> loss = student_loss(state.student, scene, inputs, teacher_out, config);
    record.report = loss.report;

    state.student.zero_grad();
    tape.backward(loss.total);
    clip_and_apply_adamw(state, config, record.lr);
    ema_update(state.teacher, state.student, config.ema_decay);
    ++state.step;
  } catch (const NonFiniteLossError& e) {
    record.report = e.report;
    record.aborted = true;
    log_warn("train_step: aborted at step " + std::to_string(state.step) + " (seed " +
             std::to_string(config.seed) + "): " + e.what() + "; state rolled back");
  }
  return record;
}

template <typename T>
TrainState<T> train_corpus(const std::vector<Scene>& scenes, const ModelConfig& model_config,
                           const TrainConfig& config) {
  if (scenes.empty()) throw ConfigError("train_corpus: empty corpus");
  TrainState<T> state = init_train_state<T>(model_config, config);

  std::vector<RegionPartition> partitions;
  partitions.reserve(scenes.size());
  for (const Scene& scene : scenes) partitions.push_back(partition_regions(scene));

  std::vector<std::size_t> order(scenes.size());
  std::size_t epoch = 0, cursor = 0;
  for (std::size_t s = 0; s < config.steps; ++s) {
    if (cursor == 0) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng(Rng::mix(config.seed, 0xe90c4 + epoch));
      rng.shuffle(order);
      ++epoch;
    }
    std::size_t scene_idx = order[cursor];
    cursor = (cursor + 1) % order.size();

    StepRecord record = train_step(state, scenes[scene_idx], partitions[scene_idx], config);
    record.step = s;
    state.metrics.push_back(record);
    if (record.aborted) ++state.step;  // keep the schedule aligned with planned steps
  }
  return state;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<StepRecord>& metrics) {
  std::ofstream out(path);
  if (!out) throw IoError("write_metrics_csv: cannot open " + path.string());
  out << "step,bce,dice,cls,q,f,total,lr\n";
  char line[512];
  for (const StepRecord& r : metrics) {
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step,
                  r.report.bce, r.report.dice, r.report.cls, r.report.query, r.report.feature,
                  r.report.total, r.lr);
    out << line;
  }
  if (!out) throw IoError("write_metrics_csv: write failed for " + path.string());
}

#define BOXSEG_INSTANTIATE_TRAINING(T)                                                        \
  template struct TrainState<T>;                                                              \
  template TrainState<T> init_train_state<T>(const ModelConfig&, const TrainConfig&);         \
  template void ema_update(ModelParams<T>&, const ModelParams<T>&, double);                   \
  template StudentLoss<T> student_loss(const ModelParams<T>&, const Scene&,                   \
                                       const SceneInputs<T>&, const TeacherOutputs<T>&,       \
                                       const TrainConfig&);                                   \
  template StepRecord train_step(TrainState<T>&, const Scene&, const RegionPartition&,        \
                                 const TrainConfig&);                                         \
  template TrainState<T> train_corpus<T>(const std::vector<Scene>&, const ModelConfig&,       \
                                         const TrainConfig&);

BOXSEG_INSTANTIATE_TRAINING(float)
BOXSEG_INSTANTIATE_TRAINING(double)

#undef BOXSEG_INSTANTIATE_TRAINING

}  // namespace boxseg
