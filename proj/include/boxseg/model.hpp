#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "boxseg/scene.hpp"
#include "boxseg/tensor.hpp"

namespace boxseg {

struct ModelConfig {
  std::size_t feature_dim = 32;     // paper full scale: 256
  std::size_t decoder_layers = 2;   // paper full scale: 6
  std::size_t num_queries = 16;
  std::size_t attention_heads = 4;  // paper full scale: 8
  std::size_t ffn_dim = 64;         // paper full scale: 1024
  std::size_t num_classes = 4;
  std::size_t fourier_frequencies = 8;  // octaves over the unit cube

  // Full-scale transformer dimensions, kept as a documented preset; the
  // desk defaults above are what tests and the CLI run.
  static ModelConfig full_scale_preset();

  void validate() const;
};

template <typename T>
struct Queries {
  Tensor<T> content;   // N_Q x C_f
  Tensor<T> position;  // N_Q x 3
};

template <typename T>
struct DecoderLayerParams {
  Tensor<T> cross_wq, cross_bq, cross_wk, cross_bk, cross_wv, cross_bv, cross_wo, cross_bo;
  Tensor<T> self_wq, self_bq, self_wk, self_bk, self_wv, self_bv, self_wo, self_bo;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias, ln3_gain, ln3_bias;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> enc_w1, enc_b1, enc_w2, enc_b2;      // per-point MLP 6 -> C -> C
  Tensor<T> pos_sin_proj, pos_cos_proj;          // [3*freqs, C_f]
  std::vector<DecoderLayerParams<T>> layers;
  Tensor<T> class_w, class_b;                    // [C_f, classes+1]
  Tensor<T> position_bank;                       // [N_Q, 3] learnable student position queries

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  ModelParams clone() const;
  void set_requires_grad(bool value);
  void zero_grad();
  std::size_t parameter_count() const;
};

// Visits every parameter tensor in a fixed order shared by the optimizer,
// EMA update and checkpoint format.
template <typename Params, typename F>
void visit_params(Params& params, F&& f) {
  f("enc_w1", params.enc_w1);
  f("enc_b1", params.enc_b1);
  f("enc_w2", params.enc_w2);
  f("enc_b2", params.enc_b2);
  f("pos_sin_proj", params.pos_sin_proj);
  f("pos_cos_proj", params.pos_cos_proj);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& layer = params.layers[l];
    std::string prefix = "layers." + std::to_string(l) + ".";
    f(prefix + "cross_wq", layer.cross_wq);
    f(prefix + "cross_bq", layer.cross_bq);
    f(prefix + "cross_wk", layer.cross_wk);
    f(prefix + "cross_bk", layer.cross_bk);
    f(prefix + "cross_wv", layer.cross_wv);
    f(prefix + "cross_bv", layer.cross_bv);
    f(prefix + "cross_wo", layer.cross_wo);
    f(prefix + "cross_bo", layer.cross_bo);
    f(prefix + "self_wq", layer.self_wq);
    f(prefix + "self_bq", layer.self_bq);
    f(prefix + "self_wk", layer.self_wk);
    f(prefix + "self_bk", layer.self_bk);
    f(prefix + "self_wv", layer.self_wv);
    f(prefix + "self_bv", layer.self_bv);
    f(prefix + "self_wo", layer.self_wo);
    f(prefix + "self_bo", layer.self_bo);
    f(prefix + "ffn_w1", layer.ffn_w1);
    f(prefix + "ffn_b1", layer.ffn_b1);
    f(prefix + "ffn_w2", layer.ffn_w2);
    f(prefix + "ffn_b2", layer.ffn_b2);
    f(prefix + "ln1_gain", layer.ln1_gain);
    f(prefix + "ln1_bias", layer.ln1_bias);
    f(prefix + "ln2_gain", layer.ln2_gain);
    f(prefix + "ln2_bias", layer.ln2_bias);
    f(prefix + "ln3_gain", layer.ln3_gain);
    f(prefix + "ln3_bias", layer.ln3_bias);
  }
  f("class_w", params.class_w);
  f("class_b", params.class_b);
  f("position_bank", params.position_bank);
}

enum class CenterMode { Student, TeacherCenters };

// Per-scene tensors in the model's coordinate frame (unit cube).
template <typename T>
struct SceneInputs {
  Tensor<T> model_input;  // N x 6: normalized xyz + rgb
  Tensor<T> coords;       // N x 3 normalized
  Tensor<T> centers;      // K x 3 normalized
  std::vector<Vec3> coords_vec;
  std::vector<Vec3> centers_vec;
};

template <typename T>
SceneInputs<T> make_scene_inputs(const Scene& scene);

// Per-point MLP with relu; no cross-point mixing.
template <typename T>
Tensor<T> encode_points(const ModelParams<T>& params, const Tensor<T>& points);

// sin/cos Fourier features of 3-d coordinates, linearly projected to C_f.
template <typename T>
Tensor<T> fourier_posenc(const ModelParams<T>& params, const Tensor<T>& coords);

// Zero content plus the learnable position bank.
template <typename T>
Queries<T> init_student_queries(const ModelParams<T>& params);

// Attention-weighted aggregation of instance centers at FPS seed points.
template <typename T>
Tensor<T> init_teacher_position(const std::vector<Vec3>& centers,
                                const std::vector<Vec3>& coords_normalized, std::size_t n_q,
                                std::size_t fps_start);

// One step of center-based position refinement: softmax(q . C^T) . C.
template <typename T>
Tensor<T> refine_teacher_position(const Tensor<T>& q_pos, const Tensor<T>& centers);

// L decoder layers of cross-attention, self-attention and feed-forward,
// each with residual + layer norm. Teacher mode re-aggregates position
// queries from instance centers between layers; student positions are
// left untouched within the forward pass.
template <typename T>
Queries<T> decoder_forward(const ModelParams<T>& params, const Tensor<T>& features,
                           Queries<T> queries, const Tensor<T>& coords, CenterMode mode,
                           const Tensor<T>& centers = {});

template <typename T>
Tensor<T> mask_logits(const Tensor<T>& q_content, const Tensor<T>& features);

// rho = sigmoid(Q_c . F^T), entries strictly inside (0, 1).
template <typename T>
Tensor<T> predict_masks(const Tensor<T>& q_content, const Tensor<T>& features);

// Linear head; last column is the no-object class.
template <typename T>
Tensor<T> predict_classes(const ModelParams<T>& params, const Tensor<T>& q_content);

template <typename T>
struct ForwardOutputs {
  Tensor<T> features;      // N x C_f
  Queries<T> queries;      // refined (content Q_{c,L}, position Q_{p,L})
  Tensor<T> mask_logits;   // N_Q x N
  Tensor<T> rho;           // N_Q x N
  Tensor<T> class_logits;  // N_Q x (classes+1)
};

template <typename T>
ForwardOutputs<T> model_forward(const ModelParams<T>& params, const SceneInputs<T>& inputs,
                                CenterMode mode, std::size_t fps_start = 0);

// Versioned JSON checkpoint holding both parameter sets; loading validates
// array shapes against the expected ModelConfig.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& student,
                     const ModelParams<T>& teacher);

template <typename T>
struct Checkpoint {
  ModelParams<T> student;
  ModelParams<T> teacher;
};

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace boxseg
