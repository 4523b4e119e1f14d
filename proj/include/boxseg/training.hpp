#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "boxseg/losses.hpp"
#include "boxseg/model.hpp"
#include "boxseg/pseudolabel.hpp"
#include "boxseg/scene.hpp"

namespace boxseg {

struct TrainConfig {
  std::size_t steps = 500;
  double learning_rate = 1e-4;  // one-cycle initial lr
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.05;  // decoupled
  double adam_eps = 1e-8;
  double warmup_fraction = 0.3;
  double max_lr_factor = 10.0;     // peak = learning_rate * factor
  double final_lr_divisor = 25.0;  // floor = learning_rate / divisor
  double ema_decay = 0.99;
  double grad_clip = 1.0;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::string precision = "f32";  // or "f64"
  bool center_refine = true;      // teacher position queries from instance centers
  bool use_query_loss = true;
  bool use_feature_loss = true;

  void validate() const;
  LossWeights effective_weights() const;  // ablation flags zero their term
};

// Cosine ramp from learning_rate to the peak over the warmup fraction,
// cosine decay to the floor over the remainder; continuous in step.
double one_cycle_lr(std::size_t step, const TrainConfig& config);

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::size_t updates = 0;
};

struct StepRecord {
  std::size_t step = 0;
  LossReport report;
  double lr = 0.0;
  bool aborted = false;
};

template <typename T>
struct TrainState {
  ModelParams<T> student;
  ModelParams<T> teacher;  // EMA copy; never receives gradients
  AdamState<T> optimizer;
  std::size_t step = 0;
  std::vector<StepRecord> metrics;
};

template <typename T>
TrainState<T> init_train_state(const ModelConfig& model_config, const TrainConfig& config);

// theta_T <- alpha * theta_T + (1 - alpha) * theta_S, elementwise.
template <typename T>
void ema_update(ModelParams<T>& teacher, const ModelParams<T>& student, double alpha);

template <typename T>
struct StudentLoss {
  Tensor<T> total;
  LossReport report;
  Assignment assignment;  // student-side matching against merged targets
};

// Student forward, Hungarian matching against the merged targets and the
// composite objective. Records on the active tape; teacher outputs enter
// as constants.
template <typename T>
StudentLoss<T> student_loss(const ModelParams<T>& student, const Scene& scene,
                            const SceneInputs<T>& inputs, const TeacherOutputs<T>& teacher_out,
                            const TrainConfig& config);

// One optimization step on a single scene: teacher pseudo-labels (no
// gradients), student forward, Hungarian matching against the merged
// targets, composite loss, clipped AdamW update, EMA sync. A non-finite
// loss aborts the step with state untouched.
template <typename T>
StepRecord train_step(TrainState<T>& state, const Scene& scene, const RegionPartition& partition,
                      const TrainConfig& config);

// Seed-shuffled passes over the corpus for config.steps steps.
template <typename T>
TrainState<T> train_corpus(const std::vector<Scene>& scenes, const ModelConfig& model_config,
                           const TrainConfig& config);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<StepRecord>& metrics);

}  // namespace boxseg
