#include "boxseg/model.hpp"

#include <cmath>
#include <fstream>

#include "boxseg/common.hpp"
#include "json.hpp"

namespace boxseg {

namespace {

constexpr int kCheckpointVersion = 1;

template <typename T>
const char* precision_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
Tensor<T> xavier(Rng& rng, std::size_t rows, std::size_t cols) {
  double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<T> values(rows * cols);
  for (T& v : values) v = static_cast<T>(rng.uniform(-limit, limit));
  return Tensor<T>::from_values({rows, cols}, std::move(values)).set_requires_grad(true);
}

template <typename T>
Tensor<T> const_vector(std::size_t n, T value, bool track = true) {
  Tensor<T> t = Tensor<T>::full({n}, value);
  t.set_requires_grad(track);
  return t;
}

// Block-diagonal octave frequencies: column a*freqs + k carries 2^k * pi
// for coordinate a.
template <typename T>
Tensor<T> frequency_matrix(std::size_t freqs) {
  std::vector<T> values(3 * 3 * freqs, T(0));
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t k = 0; k < freqs; ++k)
      values[a * 3 * freqs + a * freqs + k] =
          static_cast<T>(std::pow(2.0, static_cast<double>(k)) * 3.14159265358979323846);
  return Tensor<T>::from_values({3, 3 * freqs}, std::move(values));
}

template <typename T>
Tensor<T> tensor_from_vec3(const std::vector<Vec3>& rows) {
  std::vector<T> values;
  values.reserve(rows.size() * 3);
  for (const Vec3& r : rows)
    for (double v : r) values.push_back(static_cast<T>(v));
  return Tensor<T>::from_values({rows.size(), 3}, std::move(values));
}

template <typename T>
Tensor<T> attention_block(const Tensor<T>& q_in, const Tensor<T>& k_in, const Tensor<T>& v_in,
                          const Tensor<T>& wq, const Tensor<T>& bq, const Tensor<T>& wk,
                          const Tensor<T>& bk, const Tensor<T>& wv, const Tensor<T>& bv,
                          const Tensor<T>& wo, const Tensor<T>& bo, std::size_t heads) {
  Tensor<T> q = add(matmul(q_in, wq), bq);
  Tensor<T> k = add(matmul(k_in, wk), bk);
  Tensor<T> v = add(matmul(v_in, wv), bv);
  std::size_t head_dim = wq.cols() / heads;
  T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));

  std::vector<Tensor<T>> head_outputs;
  head_outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> qh = slice_cols(q, h * head_dim, head_dim);
    Tensor<T> kh = slice_cols(k, h * head_dim, head_dim);
    Tensor<T> vh = slice_cols(v, h * head_dim, head_dim);
    Tensor<T> attn = rowwise_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
    head_outputs.push_back(matmul(attn, vh));
  }
  return add(matmul(concat_cols(head_outputs), wo), bo);
}

}  // namespace

ModelConfig ModelConfig::full_scale_preset() {
  ModelConfig config;
  config.feature_dim = 256;
  config.decoder_layers = 6;
  config.attention_heads = 8;
  config.ffn_dim = 1024;
  return config;
}

void ModelConfig::validate() const {
  if (feature_dim == 0 || feature_dim % attention_heads != 0)
    throw ConfigError("model config: feature_dim must be a positive multiple of attention_heads");
  if (decoder_layers < 1) throw ConfigError("model config: decoder_layers must be >= 1");
  if (num_queries < 1) throw ConfigError("model config: num_queries must be >= 1");
  if (num_classes < 1) throw ConfigError("model config: num_classes must be >= 1");
  if (fourier_frequencies < 1) throw ConfigError("model config: fourier_frequencies must be >= 1");
}

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(Rng::mix(seed, 0xb0c5e6));
  std::size_t c = config.feature_dim;
  std::size_t f = 3 * config.fourier_frequencies;

  ModelParams<T> params;
  params.config = config;
  params.enc_w1 = xavier<T>(rng, 6, c);
  params.enc_b1 = const_vector<T>(c, T(0));
  params.enc_w2 = xavier<T>(rng, c, c);
  params.enc_b2 = const_vector<T>(c, T(0));
  params.pos_sin_proj = xavier<T>(rng, f, c);
  params.pos_cos_proj = xavier<T>(rng, f, c);
  for (std::size_t l = 0; l < config.decoder_layers; ++l) {
    DecoderLayerParams<T> layer;
    layer.cross_wq = xavier<T>(rng, c, c);
    layer.cross_bq = const_vector<T>(c, T(0));
    layer.cross_wk = xavier<T>(rng, c, c);
    layer.cross_bk = const_vector<T>(c, T(0));
    layer.cross_wv = xavier<T>(rng, c, c);
    layer.cross_bv = const_vector<T>(c, T(0));
    layer.cross_wo = xavier<T>(rng, c, c);
    layer.cross_bo = const_vector<T>(c, T(0));
    layer.self_wq = xavier<T>(rng, c, c);
    layer.self_bq = const_vector<T>(c, T(0));
    layer.self_wk = xavier<T>(rng, c, c);
    layer.self_bk = const_vector<T>(c, T(0));
    layer.self_wv = xavier<T>(rng, c, c);
    layer.self_bv = const_vector<T>(c, T(0));
    layer.self_wo = xavier<T>(rng, c, c);
    layer.self_bo = const_vector<T>(c, T(0));
    layer.ffn_w1 = xavier<T>(rng, c, config.ffn_dim);
    layer.ffn_b1 = const_vector<T>(config.ffn_dim, T(0));
    layer.ffn_w2 = xavier<T>(rng, config.ffn_dim, c);
    layer.ffn_b2 = const_vector<T>(c, T(0));
    layer.ln1_gain = const_vector<T>(c, T(1));
    layer.ln1_bias = const_vector<T>(c, T(0));
    layer.ln2_gain = const_vector<T>(c, T(1));
    layer.ln2_bias = const_vector<T>(c, T(0));
    layer.ln3_gain = const_vector<T>(c, T(1));
    layer.ln3_bias = const_vector<T>(c, T(0));
    params.layers.push_back(std::move(layer));
  }
  params.class_w = xavier<T>(rng, c, config.num_classes + 1);
  params.class_b = const_vector<T>(config.num_classes + 1, T(0));

  std::vector<T> bank(config.num_queries * 3);
  for (T& v : bank) v = static_cast<T>(rng.uniform());
  params.position_bank =
      Tensor<T>::from_values({config.num_queries, 3}, std::move(bank)).set_requires_grad(true);
  return params;
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  ModelParams<T> copy = *this;
  visit_params(copy, [](const std::string&, Tensor<T>& t) {
    bool track = t.requires_grad();
    std::vector<T> values(t.values().begin(), t.values().end());
    t = Tensor<T>::from_values(t.shape(), std::move(values));
    t.set_requires_grad(track);
  });
  return copy;
}

template <typename T>
void ModelParams<T>::set_requires_grad(bool value) {
  visit_params(*this, [value](const std::string&, Tensor<T>& t) { t.set_requires_grad(value); });
}

template <typename T>
void ModelParams<T>::zero_grad() {
  visit_params(*this, [](const std::string&, Tensor<T>& t) { t.zero_grad(); });
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t total = 0;
  visit_params(*this, [&total](const std::string&, const Tensor<T>& t) { total += t.numel(); });
  return total;
}

template <typename T>
SceneInputs<T> make_scene_inputs(const Scene& scene) {
  SceneInputs<T> inputs;
  inputs.coords_vec = normalized_coords(scene);
  inputs.centers_vec = normalized_centers(scene);
  inputs.coords = tensor_from_vec3<T>(inputs.coords_vec);
  inputs.centers = tensor_from_vec3<T>(inputs.centers_vec);

  std::vector<T> model_input;
  model_input.reserve(scene.size() * 6);
  for (std::size_t j = 0; j < scene.size(); ++j) {
    for (double v : inputs.coords_vec[j]) model_input.push_back(static_cast<T>(v));
    for (int c = 0; c < 3; ++c) model_input.push_back(static_cast<T>(scene.points[j][3 + c]));
  }
  inputs.model_input = Tensor<T>::from_values({scene.size(), 6}, std::move(model_input));
  return inputs;
}

template <typename T>
Tensor<T> encode_points(const ModelParams<T>& params, const Tensor<T>& points) {
  Tensor<T> hidden = relu(add(matmul(points, params.enc_w1), params.enc_b1));
  return add(matmul(hidden, params.enc_w2), params.enc_b2);
}

template <typename T>
Tensor<T> fourier_posenc(const ModelParams<T>& params, const Tensor<T>& coords) {
  Tensor<T> phases = matmul(coords, frequency_matrix<T>(params.config.fourier_frequencies));
  return add(matmul(sine(phases), params.pos_sin_proj),
             matmul(cosine(phases), params.pos_cos_proj));
}

template <typename T>
Queries<T> init_student_queries(const ModelParams<T>& params) {
  Queries<T> queries;
  queries.content =
      Tensor<T>::zeros({params.config.num_queries, params.config.feature_dim});
  queries.position = params.position_bank;
  return queries;
}

template <typename T>
Tensor<T> init_teacher_position(const std::vector<Vec3>& centers,
                                const std::vector<Vec3>& coords_normalized, std::size_t n_q,
                                std::size_t fps_start) {
  if (centers.empty())
    throw std::invalid_argument("init_teacher_position: scene has no instance centers");
  std::vector<std::size_t> picked = farthest_point_sampling(coords_normalized, n_q, fps_start);
  std::vector<Vec3> fps_points;
  fps_points.reserve(n_q);
  for (std::size_t idx : picked) fps_points.push_back(coords_normalized[idx]);
  Tensor<T> p_fps = tensor_from_vec3<T>(fps_points);
  Tensor<T> center_mat = tensor_from_vec3<T>(centers);
  return refine_teacher_position(p_fps, center_mat);
}

template <typename T>
Tensor<T> refine_teacher_position(const Tensor<T>& q_pos, const Tensor<T>& centers) {
  Tensor<T> weights = rowwise_softmax(matmul(q_pos, transpose(centers)));
  return matmul(weights, centers);
}

template <typename T>
Queries<T> decoder_forward(const ModelParams<T>& params, const Tensor<T>& features,
                           Queries<T> queries, const Tensor<T>& coords, CenterMode mode,
                           const Tensor<T>& centers) {
  if (mode == CenterMode::TeacherCenters && !centers.defined())
    throw std::invalid_argument("decoder_forward: teacher mode needs instance centers");

  std::size_t heads = params.config.attention_heads;
  Tensor<T> keys = add(features, fourier_posenc(params, coords));

  std::size_t layer_count = params.layers.size();
  for (std::size_t l = 0; l < layer_count; ++l) {
    const DecoderLayerParams<T>& p = params.layers[l];
    Tensor<T> pos_embed = fourier_posenc(params, queries.position);

    Tensor<T> cross = attention_block(add(queries.content, pos_embed), keys, features, p.cross_wq,
                                      p.cross_bq, p.cross_wk, p.cross_bk, p.cross_wv, p.cross_bv,
                                      p.cross_wo, p.cross_bo, heads);
    queries.content = layer_norm(add(queries.content, cross), p.ln1_gain, p.ln1_bias);

    Tensor<T> with_pos = add(queries.content, pos_embed);
    Tensor<T> self_out =
        attention_block(with_pos, with_pos, queries.content, p.self_wq, p.self_bq, p.self_wk,
                        p.self_bk, p.self_wv, p.self_bv, p.self_wo, p.self_bo, heads);
    queries.content = layer_norm(add(queries.content, self_out), p.ln2_gain, p.ln2_bias);

    Tensor<T> ffn = add(
        matmul(relu(add(matmul(queries.content, p.ffn_w1), p.ffn_b1)), p.ffn_w2), p.ffn_b2);
    queries.content = layer_norm(add(queries.content, ffn), p.ln3_gain, p.ln3_bias);

    // Position timesteps t = 1..L-1; the last layer's output position is
    // not consumed again, so it is left as produced by step L-1.
    if (mode == CenterMode::TeacherCenters && l + 1 < layer_count)
      queries.position = refine_teacher_position(queries.position, centers);
  }
  return queries;
}

template <typename T>
Tensor<T> mask_logits(const Tensor<T>& q_content, const Tensor<T>& features) {
  return matmul(q_content, transpose(features));
}

template <typename T>
Tensor<T> predict_masks(const Tensor<T>& q_content, const Tensor<T>& features) {
  return sigmoid(mask_logits(q_content, features));
}

template <typename T>
Tensor<T> predict_classes(const ModelParams<T>& params, const Tensor<T>& q_content) {
  return add(matmul(q_content, params.class_w), params.class_b);
}

template <typename T>
ForwardOutputs<T> model_forward(const ModelParams<T>& params, const SceneInputs<T>& inputs,
                                CenterMode mode, std::size_t fps_start) {
  ForwardOutputs<T> out;
  out.features = encode_points(params, inputs.model_input);

  Queries<T> queries;
  if (mode == CenterMode::TeacherCenters) {
    queries.content = Tensor<T>::zeros({params.config.num_queries, params.config.feature_dim});
    queries.position = init_teacher_position<T>(inputs.centers_vec, inputs.coords_vec,
                                                params.config.num_queries, fps_start);
  } else {
    queries = init_student_queries(params);
  }

  out.queries = decoder_forward(params, out.features, std::move(queries), inputs.coords, mode,
                                inputs.centers);
  out.mask_logits = mask_logits(out.queries.content, out.features);
  out.rho = sigmoid(out.mask_logits);
  out.class_logits = predict_classes(params, out.queries.content);
  return out;
}

// ------------------------------------------------------------- checkpoint

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& student,
                     const ModelParams<T>& teacher) {
  nlohmann::json doc;
  doc["version"] = kCheckpointVersion;
  doc["precision"] = precision_name<T>();
  doc["model_config"] = {{"feature_dim", student.config.feature_dim},
                         {"decoder_layers", student.config.decoder_layers},
                         {"num_queries", student.config.num_queries},
                         {"attention_heads", student.config.attention_heads},
                         {"ffn_dim", student.config.ffn_dim},
                         {"num_classes", student.config.num_classes},
                         {"fourier_frequencies", student.config.fourier_frequencies}};

  auto dump_params = [](const ModelParams<T>& params) {
    nlohmann::json arrays;
    visit_params(params, [&arrays](const std::string& name, const Tensor<T>& t) {
      arrays[name] = {{"shape", t.shape()},
                      {"values", std::vector<double>(t.values().begin(), t.values().end())}};
    });
    return arrays;
  };
  doc["student"] = dump_params(student);
  doc["teacher"] = dump_params(teacher);

  std::ofstream out(path);
  if (!out) throw IoError("save_checkpoint: cannot open " + path.string() + " for writing");
  out << doc.dump() << "\n";
  if (!out) throw IoError("save_checkpoint: write failed for " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  std::ifstream in(path);
  if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("load_checkpoint: " + path.string() + ": " + e.what());
  }

  int version = doc.value("version", -1);
  if (version != kCheckpointVersion)
    throw VersionError("load_checkpoint: " + path.string() + ": file version " +
                       std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  std::string precision = doc.value("precision", "");
  if (precision != precision_name<T>())
    throw VersionError("load_checkpoint: " + path.string() + ": precision '" + precision +
                       "', expected '" + precision_name<T>() + "'");

  auto read_params = [&](const char* key) {
    if (!doc.contains(key))
      throw VersionError("load_checkpoint: " + path.string() + ": missing '" + key + "' section");
    const nlohmann::json& arrays = doc[key];
    ModelParams<T> params = ModelParams<T>::init(expected, 0);
    visit_params(params, [&](const std::string& name, Tensor<T>& t) {
      if (!arrays.contains(name))
        throw VersionError("load_checkpoint: " + path.string() + ": missing array '" + name + "'");
      const nlohmann::json& entry = arrays[name];
      std::vector<std::size_t> shape = entry.at("shape").get<std::vector<std::size_t>>();
      if (shape != t.shape())
        throw VersionError("load_checkpoint: " + path.string() + ": array '" + name +
                           "' has incompatible shape for the configured model");
      std::vector<double> raw = entry.at("values").get<std::vector<double>>();
      bool track = t.requires_grad();
      t = Tensor<T>::from_values(shape, std::vector<T>(raw.begin(), raw.end()));
      t.set_requires_grad(track);
    });
    return params;
  };

  Checkpoint<T> checkpoint{read_params("student"), read_params("teacher")};
  checkpoint.teacher.set_requires_grad(false);
  return checkpoint;
}

// --------------------------------------------------------- instantiations

#define BOXSEG_INSTANTIATE_MODEL(T)                                                              \
  template struct ModelParams<T>;                                                                \
  template SceneInputs<T> make_scene_inputs<T>(const Scene&);                                    \
  template Tensor<T> encode_points(const ModelParams<T>&, const Tensor<T>&);                     \
  template Tensor<T> fourier_posenc(const ModelParams<T>&, const Tensor<T>&);                    \
  template Queries<T> init_student_queries(const ModelParams<T>&);                               \
  template Tensor<T> init_teacher_position<T>(const std::vector<Vec3>&, const std::vector<Vec3>&, \
                                              std::size_t, std::size_t);                         \
  template Tensor<T> refine_teacher_position(const Tensor<T>&, const Tensor<T>&);                \
  template Queries<T> decoder_forward(const ModelParams<T>&, const Tensor<T>&, Queries<T>,       \
                                      const Tensor<T>&, CenterMode, const Tensor<T>&);           \
  template Tensor<T> mask_logits(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> predict_masks(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> predict_classes(const ModelParams<T>&, const Tensor<T>&);                   \
  template ForwardOutputs<T> model_forward(const ModelParams<T>&, const SceneInputs<T>&,         \
                                           CenterMode, std::size_t);                             \
  template void save_checkpoint(const std::filesystem::path&, const ModelParams<T>&,             \
                                const ModelParams<T>&);                                          \
  template Checkpoint<T> load_checkpoint(const std::filesystem::path&, const ModelConfig&);

BOXSEG_INSTANTIATE_MODEL(float)
BOXSEG_INSTANTIATE_MODEL(double)

#undef BOXSEG_INSTANTIATE_MODEL

}  // namespace boxseg
