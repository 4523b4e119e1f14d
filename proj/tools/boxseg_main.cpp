#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "boxseg/common.hpp"
#include "boxseg/eval.hpp"
#include "boxseg/model.hpp"
#include "boxseg/pseudolabel.hpp"
#include "boxseg/runconfig.hpp"
#include "boxseg/scene.hpp"
#include "boxseg/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace boxseg;

namespace {

// Exit codes: 2 config, 3 io/path, 4 version mismatch, 5 generation.
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitVersion = 4;
constexpr int kExitGeneration = 5;

struct CommonFlags {
  std::optional<fs::path> config_file;
  std::optional<std::uint64_t> seed;
  bool no_center_refine = false;
  bool no_loss_q = false;
  bool no_loss_f = false;
  std::optional<std::size_t> steps;
  std::optional<std::string> precision;
};

RunConfig resolve(const CommonFlags& flags) {
  RunConfig config = resolve_run_config(flags.config_file);
  if (flags.seed) {
    config.train.seed = *flags.seed;
    config.scene.seed = *flags.seed;
  }
  if (flags.steps) config.train.steps = *flags.steps;
  if (flags.precision) config.train.precision = *flags.precision;
  if (flags.no_center_refine) config.train.center_refine = false;
  if (flags.no_loss_q) config.train.use_query_loss = false;
  if (flags.no_loss_f) config.train.use_feature_loss = false;
  config.validate();
  return config;
}

void ensure_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw IoError("cannot create output directory " + dir.string());
}

int cmd_gen_scenes(std::size_t count, const CommonFlags& flags, const fs::path& out_dir) {
  RunConfig config = resolve(flags);
  ensure_out_dir(out_dir);
  write_resolved_config(config, out_dir / "config_resolved.json");

  std::vector<std::string> failures(count);
  parallel_for(count, [&](std::size_t i) {
    std::uint64_t seed = config.scene.seed + i;
    try {
      Scene scene = generate_scene(config.scene, seed);
      save_scene(scene, out_dir / ("scene_" + std::to_string(seed) + ".json"));
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  });
  for (const std::string& f : failures)
    if (!f.empty()) throw GenerationError(f);
  std::cout << "wrote " << count << " scenes to " << out_dir.string() << "\n";
  return 0;
}

template <typename T>
int run_train(const RunConfig& config, const fs::path& corpus_dir, const fs::path& out_dir) {
  std::vector<CorpusEntry> corpus = load_corpus(corpus_dir);
  std::vector<Scene> scenes;
  scenes.reserve(corpus.size());
  for (auto& entry : corpus) scenes.push_back(std::move(entry.scene));

  TrainState<T> state = train_corpus<T>(scenes, config.model, config.train);
  write_metrics_csv(out_dir / "metrics.csv", state.metrics);
  save_checkpoint(out_dir / "checkpoint_final.json", state.student, state.teacher);

  double final_total = state.metrics.empty() ? 0.0 : state.metrics.back().report.total;
  std::cout << "trained " << config.train.steps << " steps on " << scenes.size()
            << " scenes; final total loss " << final_total << "\n";
  return 0;
}

int cmd_train(const CommonFlags& flags, const fs::path& corpus_dir, const fs::path& out_dir) {
  RunConfig config = resolve(flags);
  ensure_out_dir(out_dir);
  write_resolved_config(config, out_dir / "config_resolved.json");
  if (config.train.precision == "f64") return run_train<double>(config, corpus_dir, out_dir);
  return run_train<float>(config, corpus_dir, out_dir);
}

template <typename T>
int run_pseudo_label(const RunConfig& config, const fs::path& corpus_dir,
                     const fs::path& checkpoint_path, const fs::path& out_dir) {
  Checkpoint<T> checkpoint = load_checkpoint<T>(checkpoint_path, config.model);
  std::vector<CorpusEntry> corpus = load_corpus(corpus_dir);
  ensure_out_dir(out_dir);

  LossWeights weights = config.train.effective_weights();
  std::vector<std::optional<double>> maccs(corpus.size());
  std::vector<std::string> failures(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    try {
      const Scene& scene = corpus[i].scene;
      RegionPartition partition = partition_regions(scene);
      SceneInputs<T> inputs = make_scene_inputs<T>(scene);
      TeacherOutputs<T> teacher = teacher_step(checkpoint.teacher, scene, partition, inputs,
                                               weights, config.train.center_refine);
      std::vector<int> oracle = macc_oracle(partition, scene);
      maccs[i] = compute_macc(teacher.pseudo, oracle, partition);

      json doc;
      json assignments = json::object();
      for (std::size_t u = 0; u < partition.n_u(); ++u)
        assignments[std::to_string(partition.overlap_points[u])] = teacher.overlap_assignment[u];
      doc["assignments"] = std::move(assignments);
      if (maccs[i])
        doc["macc"] = *maccs[i];
      else
        doc["macc"] = nullptr;

      fs::path out_file = out_dir / ("pseudo_" + corpus[i].name + ".json");
      std::ofstream out(out_file);
      if (!out) throw IoError("cannot open " + out_file.string() + " for writing");
      out << doc.dump() << "\n";
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  });
  for (const std::string& f : failures)
    if (!f.empty()) throw IoError(f);

  double sum = 0.0;
  std::size_t counted = 0;
  for (const auto& m : maccs)
    if (m) {
      sum += *m;
      ++counted;
    }
  if (counted == 0)
    std::cout << "corpus mACC: undefined (no overlap points in any scene)\n";
  else
    std::cout << "corpus mACC: " << sum / static_cast<double>(counted) << " over " << counted
              << " scenes\n";
  return 0;
}

int cmd_pseudo_label(const CommonFlags& flags, const fs::path& corpus_dir,
                     const fs::path& checkpoint_path, const fs::path& out_dir) {
  RunConfig config = resolve(flags);
  if (config.train.precision == "f64")
    return run_pseudo_label<double>(config, corpus_dir, checkpoint_path, out_dir);
  return run_pseudo_label<float>(config, corpus_dir, checkpoint_path, out_dir);
}

template <typename T>
int run_eval(const RunConfig& config, const fs::path& corpus_dir, const fs::path& checkpoint_path,
             const fs::path& out_file) {
  Checkpoint<T> checkpoint = load_checkpoint<T>(checkpoint_path, config.model);
  std::vector<CorpusEntry> corpus = load_corpus(corpus_dir);

  LossWeights weights = config.train.effective_weights();
  std::vector<PredictionSet> predictions(corpus.size());
  std::vector<std::optional<double>> maccs(corpus.size());
  std::vector<std::string> failures(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    try {
      const Scene& scene = corpus[i].scene;
      predictions[i] = extract_predictions(checkpoint.student, scene);
      RegionPartition partition = partition_regions(scene);
      SceneInputs<T> inputs = make_scene_inputs<T>(scene);
      TeacherOutputs<T> teacher = teacher_step(checkpoint.teacher, scene, partition, inputs,
                                               weights, config.train.center_refine);
      maccs[i] = compute_macc(teacher.pseudo, macc_oracle(partition, scene), partition);
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  });
  for (const std::string& f : failures)
    if (!f.empty()) throw IoError(f);

  std::vector<Scene> scenes;
  scenes.reserve(corpus.size());
  for (auto& entry : corpus) scenes.push_back(std::move(entry.scene));
  MetricReport report = compute_ap(predictions, scenes, default_ap_thresholds());

  double sum = 0.0;
  std::size_t counted = 0;
  for (const auto& m : maccs)
    if (m) {
      sum += *m;
      ++counted;
    }
  if (counted > 0) report.macc = sum / static_cast<double>(counted);

  json doc;
  doc["ap"] = report.ap;
  doc["ap50"] = report.ap50;
  doc["ap25"] = report.ap25;
  doc["macc"] = report.macc ? json(*report.macc) : json(nullptr);
  doc["scenes"] = scenes.size();
  json per_class = json::array();
  for (const ClassMetrics& cm : report.per_class)
    per_class.push_back(
        {{"class_id", cm.class_id}, {"ap", cm.ap}, {"ap50", cm.ap50}, {"ap25", cm.ap25}});
  doc["per_class"] = std::move(per_class);

  std::ofstream out(out_file);
  if (!out) throw IoError("cannot open " + out_file.string() + " for writing");
  out << doc.dump(2) << "\n";

  std::cout << "AP " << report.ap << "  AP50 " << report.ap50 << "  AP25 " << report.ap25;
  if (report.macc)
    std::cout << "  mACC " << *report.macc;
  else
    std::cout << "  mACC undefined";
  std::cout << "\n";
  return 0;
}

int cmd_eval(const CommonFlags& flags, const fs::path& corpus_dir, const fs::path& checkpoint_path,
             const fs::path& out_file) {
  RunConfig config = resolve(flags);
  if (config.train.precision == "f64")
    return run_eval<double>(config, corpus_dir, checkpoint_path, out_file);
  return run_eval<float>(config, corpus_dir, checkpoint_path, out_file);
}

int cmd_report(const fs::path& metrics_file, const fs::path& out_file) {
  std::ifstream in(metrics_file);
  if (!in) throw IoError("cannot open " + metrics_file.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError(metrics_file.string() + ": " + e.what());
  }

  std::ofstream out(out_file);
  if (!out) throw IoError("cannot open " + out_file.string() + " for writing");
  out << "metric,class_id,value\n";
  auto emit = [&out](const std::string& name, const json& value) {
    if (value.is_null())
      out << name << ",,\n";
    else
      out << name << ",," << value.dump() << "\n";
  };
  emit("ap", doc.value("ap", json()));
  emit("ap50", doc.value("ap50", json()));
  emit("ap25", doc.value("ap25", json()));
  emit("macc", doc.value("macc", json()));
  if (doc.contains("per_class"))
    for (const json& cm : doc["per_class"]) {
      int class_id = cm.value("class_id", -1);
      out << "ap," << class_id << "," << cm.value("ap", 0.0) << "\n";
      out << "ap50," << class_id << "," << cm.value("ap50", 0.0) << "\n";
      out << "ap25," << class_id << "," << cm.value("ap25", 0.0) << "\n";
    }
  std::cout << "wrote " << out_file.string() << "\n";
  return 0;
}

void add_config_flags(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_file, "JSON config file");
  cmd->add_option("--seed", flags.seed, "override config seed");
  cmd->add_option("--steps", flags.steps, "override training step count");
  cmd->add_option("--precision", flags.precision, "f32 or f64");
  cmd->add_flag("--no-center-refine", flags.no_center_refine,
                "teacher uses learnable position queries instead of instance centers");
  cmd->add_flag("--no-loss-q", flags.no_loss_q, "disable the query consistency loss");
  cmd->add_flag("--no-loss-f", flags.no_loss_f, "disable the masked-feature consistency loss");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"box-supervised pseudo-mask generation pipeline"};
  app.require_subcommand(1);

  CommonFlags flags;

  auto* gen = app.add_subcommand("gen-scenes", "generate a synthetic scene corpus");
  std::size_t gen_count = 50;
  fs::path gen_out;
  gen->add_option("--n", gen_count, "number of scenes")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  add_config_flags(gen, flags);

  auto* train = app.add_subcommand("train", "train the student/teacher pair on a corpus");
  fs::path train_corpus_dir, train_out;
  train->add_option("--corpus", train_corpus_dir, "corpus directory")->required();
  train->add_option("--out", train_out, "run output directory")->required();
  add_config_flags(train, flags);

  auto* pseudo = app.add_subcommand("pseudo-label",
                                    "score a checkpointed teacher's pseudo-masks without training");
  fs::path pseudo_corpus, pseudo_checkpoint, pseudo_out;
  pseudo->add_option("--corpus", pseudo_corpus, "corpus directory")->required();
  pseudo->add_option("--checkpoint", pseudo_checkpoint, "checkpoint file")->required();
  pseudo->add_option("--out", pseudo_out, "output directory")->required();
  add_config_flags(pseudo, flags);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
  fs::path eval_corpus, eval_checkpoint, eval_out;
  eval_cmd->add_option("--corpus", eval_corpus, "corpus directory")->required();
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--out", eval_out, "metrics.json output path")->required();
  add_config_flags(eval_cmd, flags);

  auto* report = app.add_subcommand("report", "convert metrics.json to plot-ready CSV");
  fs::path report_metrics, report_out;
  report->add_option("--metrics", report_metrics, "metrics.json input")->required();
  report->add_option("--out", report_out, "CSV output path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_scenes(gen_count, flags, gen_out);
    if (train->parsed()) return cmd_train(flags, train_corpus_dir, train_out);
    if (pseudo->parsed()) return cmd_pseudo_label(flags, pseudo_corpus, pseudo_checkpoint, pseudo_out);
    if (eval_cmd->parsed()) return cmd_eval(flags, eval_corpus, eval_checkpoint, eval_out);
    if (report->parsed()) return cmd_report(report_metrics, report_out);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kExitConfig;
  } catch (const VersionError& e) {
    std::cerr << "error: version: " << e.what() << "\n";
    return kExitVersion;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return kExitIo;
  } catch (const GenerationError& e) {
    std::cerr << "error: generation: " << e.what() << "\n";
    return kExitGeneration;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
