#include "boxseg/runconfig.hpp"

#include <fstream>

#include "json.hpp"

namespace boxseg {

namespace {

using nlohmann::json;

void check_keys(const json& section, const char* name, std::initializer_list<const char*> known) {
  for (auto it = section.begin(); it != section.end(); ++it) {
    bool ok = false;
    for (const char* key : known)
      if (it.key() == key) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError(std::string("config: unknown key '") + it.key() + "' in " + name);
  }
}

template <typename V>
void pick(const json& section, const char* key, V& value) {
  if (section.contains(key)) section.at(key).get_to(value);
}

void overlay_scene(const json& section, SceneConfig& scene) {
  check_keys(section, "scene",
             {"k_min", "k_max", "points_per_instance_min", "points_per_instance_max",
              "background_points", "room_extent", "overlap_min", "overlap_max", "color_signal",
              "color_noise", "num_classes", "seed"});
  pick(section, "k_min", scene.k_min);
  pick(section, "k_max", scene.k_max);
  pick(section, "points_per_instance_min", scene.points_per_instance_min);
  pick(section, "points_per_instance_max", scene.points_per_instance_max);
  pick(section, "background_points", scene.background_points);
  pick(section, "room_extent", scene.room_extent);
  pick(section, "overlap_min", scene.overlap_min);
  pick(section, "overlap_max", scene.overlap_max);
  pick(section, "color_signal", scene.color_signal);
  pick(section, "color_noise", scene.color_noise);
  pick(section, "num_classes", scene.num_classes);
  pick(section, "seed", scene.seed);
}

void overlay_model(const json& section, ModelConfig& model) {
  check_keys(section, "model",
             {"feature_dim", "decoder_layers", "num_queries", "attention_heads", "ffn_dim",
              "num_classes", "fourier_frequencies"});
  pick(section, "feature_dim", model.feature_dim);
  pick(section, "decoder_layers", model.decoder_layers);
  pick(section, "num_queries", model.num_queries);
  pick(section, "attention_heads", model.attention_heads);
  pick(section, "ffn_dim", model.ffn_dim);
  pick(section, "num_classes", model.num_classes);
  pick(section, "fourier_frequencies", model.fourier_frequencies);
}

void overlay_train(const json& section, TrainConfig& train) {
  check_keys(section, "train",
             {"steps", "learning_rate", "beta1", "beta2", "weight_decay", "adam_eps",
              "warmup_fraction", "max_lr_factor", "final_lr_divisor", "ema_decay", "grad_clip",
              "weights", "seed", "precision", "center_refine", "use_query_loss",
              "use_feature_loss"});
  pick(section, "steps", train.steps);
  pick(section, "learning_rate", train.learning_rate);
  pick(section, "beta1", train.beta1);
  pick(section, "beta2", train.beta2);
  pick(section, "weight_decay", train.weight_decay);
  pick(section, "adam_eps", train.adam_eps);
  pick(section, "warmup_fraction", train.warmup_fraction);
  pick(section, "max_lr_factor", train.max_lr_factor);
  pick(section, "final_lr_divisor", train.final_lr_divisor);
  pick(section, "ema_decay", train.ema_decay);
  pick(section, "grad_clip", train.grad_clip);
  pick(section, "seed", train.seed);
  pick(section, "precision", train.precision);
  pick(section, "center_refine", train.center_refine);
  pick(section, "use_query_loss", train.use_query_loss);
  pick(section, "use_feature_loss", train.use_feature_loss);
  if (section.contains("weights")) {
    const json& w = section.at("weights");
    check_keys(w, "train.weights", {"bce", "dice", "cls", "query", "feature"});
    pick(w, "bce", train.weights.bce);
    pick(w, "dice", train.weights.dice);
    pick(w, "cls", train.weights.cls);
    pick(w, "query", train.weights.query);
    pick(w, "feature", train.weights.feature);
  }
}

json to_json(const RunConfig& config) {
  json doc;
  doc["scene"] = {{"k_min", config.scene.k_min},
                  {"k_max", config.scene.k_max},
                  {"points_per_instance_min", config.scene.points_per_instance_min},
                  {"points_per_instance_max", config.scene.points_per_instance_max},
                  {"background_points", config.scene.background_points},
                  {"room_extent", config.scene.room_extent},
                  {"overlap_min", config.scene.overlap_min},
                  {"overlap_max", config.scene.overlap_max},
                  {"color_signal", config.scene.color_signal},
                  {"color_noise", config.scene.color_noise},
                  {"num_classes", config.scene.num_classes},
                  {"seed", config.scene.seed}};
  doc["model"] = {{"feature_dim", config.model.feature_dim},
                  {"decoder_layers", config.model.decoder_layers},
                  {"num_queries", config.model.num_queries},
                  {"attention_heads", config.model.attention_heads},
                  {"ffn_dim", config.model.ffn_dim},
                  {"num_classes", config.model.num_classes},
                  {"fourier_frequencies", config.model.fourier_frequencies}};
  doc["train"] = {{"steps", config.train.steps},
                  {"learning_rate", config.train.learning_rate},
                  {"beta1", config.train.beta1},
                  {"beta2", config.train.beta2},
                  {"weight_decay", config.train.weight_decay},
                  {"adam_eps", config.train.adam_eps},
                  {"warmup_fraction", config.train.warmup_fraction},
                  {"max_lr_factor", config.train.max_lr_factor},
                  {"final_lr_divisor", config.train.final_lr_divisor},
                  {"ema_decay", config.train.ema_decay},
                  {"grad_clip", config.train.grad_clip},
                  {"weights",
                   {{"bce", config.train.weights.bce},
                    {"dice", config.train.weights.dice},
                    {"cls", config.train.weights.cls},
                    {"query", config.train.weights.query},
                    {"feature", config.train.weights.feature}}},
                  {"seed", config.train.seed},
                  {"precision", config.train.precision},
                  {"center_refine", config.train.center_refine},
                  {"use_query_loss", config.train.use_query_loss},
                  {"use_feature_loss", config.train.use_feature_loss}};
  return doc;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (model.num_queries < static_cast<std::size_t>(scene.k_max))
    throw ConfigError("config: num_queries must be >= the largest scene instance count");
  if (model.num_classes != static_cast<std::size_t>(scene.num_classes))
    throw ConfigError("config: model.num_classes must match scene.num_classes");
}

RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file) {
  RunConfig config;
  if (!file) return config;

  std::ifstream in(*file);
  if (!in) throw IoError("config: cannot open " + file->string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + file->string() + ": " + e.what());
  }
  try {
    check_keys(doc, "config root", {"scene", "model", "train"});
    if (doc.contains("scene")) overlay_scene(doc.at("scene"), config.scene);
    if (doc.contains("model")) overlay_model(doc.at("model"), config.model);
    if (doc.contains("train")) overlay_train(doc.at("train"), config.train);
  } catch (const json::exception& e) {
    throw ConfigError("config: " + file->string() + ": " + e.what());
  }
  return config;
}

void write_resolved_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("config: cannot open " + path.string() + " for writing");
  out << to_json(config).dump(2) << "\n";
  if (!out) throw IoError("config: write failed for " + path.string());
}

}  // namespace boxseg
