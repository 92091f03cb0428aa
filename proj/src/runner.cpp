#include "vitcil/runner.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "vitcil/checkpoint.hpp"
#include "vitcil/pks.hpp"
#include "vitcil/util.hpp"

namespace fs = std::filesystem;

namespace vitcil {

namespace {

constexpr const char* kCodeVersion = "vitcil 0.1.0";

void write_file_atomic(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw RejectedInput("cannot write " + tmp);
    out << content;
  }
  fs::rename(tmp, path);
}

std::vector<uint64_t> parse_seed_list(const std::string& s) {
  std::vector<uint64_t> seeds;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    seeds.push_back(std::stoull(item));
  }
  if (seeds.empty()) throw ConfigError("ablate.seeds is empty");
  return seeds;
}

}  // namespace

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = {
      "run.dir",
      "model.image_size",
      "model.channels",
      "model.patch_size",
      "model.embed_dim",
      "model.num_heads",
      "model.num_encoder_blocks",
      "model.num_decoder_blocks",
      "model.mlp_ratio",
      "data.source",
      "data.path",
      "data.num_classes",
      "data.train_per_class",
      "data.test_per_class",
      "data.seed",
      "data.base_classes",
      "data.classes_per_task",
      "data.num_incremental_tasks",
      "trainer.epochs",
      "trainer.batch_size",
      "trainer.lr",
      "trainer.lr_min_ratio",
      "trainer.lambda_pks",
      "trainer.lambda_pr",
      "trainer.seed",
      "trainer.eval_every_epoch",
      "pks.enabled",
      "pks.mode",
      "pks.epsilon",
      "pr.enabled",
      "pr.restore_count_per_sample",
      "aug.flip",
      "aug.pad",
      "ablate.seeds",
  };
  return keys;
}

RunSetup parse_run_setup(const Config& cfg) {
  cfg.validate_keys(known_config_keys());
  RunSetup s;
  s.run_dir = cfg.get_string("run.dir", s.run_dir);

  s.model.image_size = static_cast<int>(cfg.get_int("model.image_size", 16));
  s.model.channels = static_cast<int>(cfg.get_int("model.channels", 1));
  s.model.patch_size = static_cast<int>(cfg.get_int("model.patch_size", 4));
  s.model.embed_dim = static_cast<int>(cfg.get_int("model.embed_dim", 32));
  s.model.num_heads = static_cast<int>(cfg.get_int("model.num_heads", 4));
  s.model.num_encoder_blocks = static_cast<int>(cfg.get_int("model.num_encoder_blocks", 2));
  s.model.num_decoder_blocks = static_cast<int>(cfg.get_int("model.num_decoder_blocks", 1));
  s.model.mlp_ratio = static_cast<int>(cfg.get_int("model.mlp_ratio", 4));
  s.model.num_classes_initial = 0;
  s.model.validate();

  s.data_source = cfg.get_string("data.source", "synthetic");
  s.data_path = cfg.get_string("data.path", "");
  s.data_seed = static_cast<uint64_t>(cfg.get_int("data.seed", 7));
  s.synth.num_classes = static_cast<int>(cfg.get_int("data.num_classes", 10));
  s.synth.train_per_class = static_cast<int>(cfg.get_int("data.train_per_class", 64));
  s.synth.test_per_class = static_cast<int>(cfg.get_int("data.test_per_class", 16));
  s.synth.image_size = s.model.image_size;
  s.synth.channels = s.model.channels;
  s.synth.seed = s.data_seed;

  s.base_classes = static_cast<int>(cfg.get_int("data.base_classes", 4));
  s.classes_per_task = static_cast<int>(cfg.get_int("data.classes_per_task", 3));
  s.num_incremental_tasks = static_cast<int>(cfg.get_int("data.num_incremental_tasks", 2));

  s.hyper.epochs = static_cast<int>(cfg.get_int("trainer.epochs", 20));
  s.hyper.batch_size = static_cast<int>(cfg.get_int("trainer.batch_size", 32));
  s.hyper.lr = cfg.get_double("trainer.lr", 3e-3);
  s.hyper.lr_min_ratio = cfg.get_double("trainer.lr_min_ratio", 0.01);
  s.hyper.lambda_pks = cfg.get_double("trainer.lambda_pks", 10.0);
  s.hyper.lambda_pr = cfg.get_double("trainer.lambda_pr", 10.0);
  s.hyper.seed = static_cast<uint64_t>(cfg.get_int("trainer.seed", 1));
  s.hyper.eval_every_epoch = cfg.get_bool("trainer.eval_every_epoch", true);
  s.hyper.pks_enabled = cfg.get_bool("pks.enabled", true);
  s.hyper.pks_mode = weight_mode_from_string(cfg.get_string("pks.mode", "inverse_distance"));
  s.hyper.pks_epsilon = cfg.get_double("pks.epsilon", 1e-8);
  s.hyper.pr_enabled = cfg.get_bool("pr.enabled", true);
  s.hyper.restore_count_per_sample =
      static_cast<int>(cfg.get_int("pr.restore_count_per_sample", 1));
  s.hyper.aug.flip = cfg.get_bool("aug.flip", true);
  s.hyper.aug.pad = static_cast<int>(cfg.get_int("aug.pad", 2));
  return s;
}

namespace {

nlohmann::json manifest_base(const Config& cfg, const RunSetup& s, const Dataset& data,
                             const TaskSpec& spec) {
  nlohmann::json j;
  j["code_version"] = kCodeVersion;
  j["config"] = cfg.entries();
  j["config_hash"] = cfg.hash();
  j["seed"] = s.hyper.seed;
  j["dataset_fingerprint"] = hex64(data.fingerprint());
  nlohmann::json ts;
  ts["base_classes"] = spec.base_classes;
  ts["classes_per_task"] = spec.classes_per_task;
  ts["num_incremental_tasks"] = spec.num_incremental_tasks;
  ts["seed"] = spec.seed;
  ts["task_classes"] = spec.task_classes;
  j["task_spec"] = ts;
  j["metrics_csv"] = "metrics.csv";
  j["checkpoints"] = nlohmann::json::array();
  return j;
}

TaskSpec task_spec_from_manifest(const nlohmann::json& j) {
  TaskSpec spec;
  const auto& ts = j.at("task_spec");
  spec.base_classes = ts.at("base_classes").get<int>();
  spec.classes_per_task = ts.at("classes_per_task").get<int>();
  spec.num_incremental_tasks = ts.at("num_incremental_tasks").get<int>();
  spec.seed = ts.at("seed").get<uint64_t>();
  spec.task_classes = ts.at("task_classes").get<std::vector<std::vector<int>>>();
  return spec;
}

nlohmann::json read_manifest(const std::string& run_dir) {
  std::ifstream in(run_dir + "/manifest.json");
  if (!in) throw RejectedInput("cannot open run manifest: " + run_dir + "/manifest.json");
  nlohmann::json j;
  in >> j;
  return j;
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  out << "task,epoch,loss_total,loss_cil,loss_pks,loss_pr,eval_acc\n";
  for (const MetricsRow& r : rows) {
    out << r.task << "," << r.epoch << "," << fmt_sci(r.loss_total) << "," << fmt_sci(r.loss_cil)
        << "," << fmt_sci(r.loss_pks) << "," << fmt_sci(r.loss_pr) << ",";
    if (r.has_eval) out << fmt_double(r.eval_acc, 12);
    out << "\n";
  }
  write_file_atomic(path, out.str());
}

std::string run_train(const Config& cfg) {
  RunSetup s = parse_run_setup(cfg);
  Dataset data = load_dataset(s.data_source, s.data_path, s.synth);
  TaskSpec spec = build_split(data.train_labels, s.base_classes, s.classes_per_task,
                              s.num_incremental_tasks, s.data_seed);

  fs::create_directories(s.run_dir);
  fs::create_directories(s.run_dir + "/checkpoints");

  nlohmann::json manifest = manifest_base(cfg, s, data, spec);
  write_file_atomic(s.run_dir + "/manifest.json", manifest.dump(2) + "\n");

  Trainer trainer(s.model, data, spec, s.hyper);
  for (int t = 1; t <= spec.num_tasks(); ++t) {
    trainer.train_task(t);

    CheckpointManifest cm;
    cm.task_index = t;
    cm.class_count = trainer.model().head().num_classes();
    cm.seed = s.hyper.seed;
    cm.config = cfg.entries();
    std::vector<int> head_order = spec.head_order();
    head_order.resize(static_cast<size_t>(cm.class_count));
    cm.head_order = head_order;
    Checkpoint ckpt = make_checkpoint(trainer.model(), trainer.store(), cm);
    std::string rel = "checkpoints/task_" + std::to_string(t) + ".ckpt";
    save_checkpoint(s.run_dir + "/" + rel, ckpt);

    manifest["checkpoints"].push_back(rel);
    write_file_atomic(s.run_dir + "/manifest.json", manifest.dump(2) + "\n");
    write_metrics_csv(s.run_dir + "/metrics.csv", trainer.metrics());
  }
  return s.run_dir;
}

EvalReport run_eval(const std::string& run_dir) {
  nlohmann::json manifest = read_manifest(run_dir);
  Config cfg;
  for (const auto& [k, v] : manifest.at("config").get<std::map<std::string, std::string>>())
    cfg.set(k, v);
  RunSetup s = parse_run_setup(cfg);
  Dataset data = load_dataset(s.data_source, s.data_path, s.synth);
  TaskSpec spec = task_spec_from_manifest(manifest);
  const int num_tasks = spec.num_tasks();

  EvalReport report;
  report.num_tasks = num_tasks;
  AccuracyMatrix matrix(num_tasks);

  for (int m = 1; m <= num_tasks; ++m) {
    std::string path = run_dir + "/checkpoints/task_" + std::to_string(m) + ".ckpt";
    if (!fs::exists(path))
      throw RejectedInput("missing checkpoint for task " + std::to_string(m) + ": " + path);
    VitModel<float> model(s.model, 0);
    PrototypeStore<float> store(s.model.embed_dim);
    apply_checkpoint(load_checkpoint(path), model, store);

    std::vector<EvalGroup> groups;
    for (int n = 1; n <= m; ++n) {
      EvalGroup gr;
      gr.task_id = n - 1;
      const std::vector<int>& task_classes = spec.task_classes[n - 1];
      for (size_t i = 0; i < data.test_labels.size(); ++i) {
        int cls = data.test_labels[i];
        if (std::find(task_classes.begin(), task_classes.end(), cls) != task_classes.end()) {
          gr.sample_indices.push_back(static_cast<int>(i));
          gr.head_labels.push_back(spec.head_index_of(cls));
        }
      }
      groups.push_back(std::move(gr));
    }
    TaskAccuracyResult res = task_accuracy(model, data.test_images, groups);
    for (int n = 1; n <= m; ++n) matrix.set(m - 1, n - 1, res.per_task[n - 1]);
    report.acc_per_task.push_back(res.overall);
  }

  report.avg_acc = avg_accuracy(report.acc_per_task);
  report.last_acc = report.acc_per_task.back();
  if (num_tasks >= 2) report.forget = forgetting(matrix, num_tasks);

  report.matrix_csv = run_dir + "/accuracy_matrix.csv";
  matrix.save_csv(report.matrix_csv);

  std::ostringstream out;
  out << "metric,task,value\n";
  for (int i = 0; i < num_tasks; ++i)
    out << "acc_after_task," << (i + 1) << "," << fmt_double(report.acc_per_task[i], 12) << "\n";
  out << "avg_acc,," << fmt_double(report.avg_acc, 12) << "\n";
  out << "last_acc,," << fmt_double(report.last_acc, 12) << "\n";
  if (num_tasks >= 2) {
    for (size_t i = 0; i < report.forget.per_task.size(); ++i)
      out << "forgetting," << (i + 1) << "," << fmt_double(report.forget.per_task[i], 12) << "\n";
    out << "avg_forgetting,," << fmt_double(report.forget.average, 12) << "\n";
  }
  report.report_csv = run_dir + "/metrics_report.csv";
  write_file_atomic(report.report_csv, out.str());
  return report;
}

std::string run_dump_weights(const std::string& run_dir, int task, int image_id) {
  nlohmann::json manifest = read_manifest(run_dir);
  Config cfg;
  for (const auto& [k, v] : manifest.at("config").get<std::map<std::string, std::string>>())
    cfg.set(k, v);
  RunSetup s = parse_run_setup(cfg);
  std::string path = run_dir + "/checkpoints/task_" + std::to_string(task) + ".ckpt";
  if (!fs::exists(path))
    throw RejectedInput("missing checkpoint for task " + std::to_string(task) + ": " + path);
  Dataset data = load_dataset(s.data_source, s.data_path, s.synth);
  if (image_id < 0 || image_id >= static_cast<int>(data.test_images.size()))
    throw RejectedInput("unknown image id: " + std::to_string(image_id));

  VitModel<float> model(s.model, 0);
  PrototypeStore<float> store(s.model.embed_dim);
  apply_checkpoint(load_checkpoint(path), model, store);

  TokenSet<float> tokens = model.forward_infer(data.test_images[image_id]);
  PatchWeights<float> w = compute_patch_weights(tokens, s.hyper.pks_mode,
                                                static_cast<float>(s.hyper.pks_epsilon));
  const int grid = s.model.patch_grid();
  std::ostringstream out;
  for (int c = 0; c < grid; ++c) out << (c ? "," : "") << "col_" << c;
  out << "\n";
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c)
      out << (c ? "," : "") << fmt_sci(static_cast<double>(w.normalized(r * grid + c, 0)));
    out << "\n";
  }
  std::string out_path = run_dir + "/patch_weights_task" + std::to_string(task) + "_img" +
                         std::to_string(image_id) + ".csv";
  write_file_atomic(out_path, out.str());
  return out_path;
}

std::vector<AblationRow> run_ablate(const Config& base_cfg, const std::string& axis,
                                    const std::string& out_dir) {
  struct Variant {
    std::string name;
    std::vector<std::pair<std::string, std::string>> overrides;
  };
  std::vector<Variant> variants;
  if (axis == "pks_on_off") {
    variants = {{"pks_off", {{"pks.enabled", "false"}}}, {"pks_on", {{"pks.enabled", "true"}}}};
  } else if (axis == "pr_on_off") {
    variants = {{"pr_off", {{"pr.enabled", "false"}}}, {"pr_on", {{"pr.enabled", "true"}}}};
  } else if (axis == "weight_mode") {
    variants = {{"inverse_distance", {{"pks.mode", "inverse_distance"}}},
                {"uniform", {{"pks.mode", "uniform"}}},
                {"distance", {{"pks.mode", "distance"}}}};
  } else {
    throw RejectedInput("unknown ablation axis: " + axis);
  }

  std::vector<uint64_t> seeds = parse_seed_list(base_cfg.get_string("ablate.seeds", "1,2,3"));
  fs::create_directories(out_dir);

  std::vector<AblationRow> rows;
  for (const Variant& variant : variants) {
    AblationRow row;
    row.variant = variant.name;
    double sum_last = 0, sum_avg = 0, sum_forget = 0;
    for (uint64_t seed : seeds) {
      Config cfg = base_cfg;
      for (const auto& [k, v] : variant.overrides) cfg.set(k, v);
      cfg.set("trainer.seed", std::to_string(seed));
      cfg.set("trainer.eval_every_epoch", "false");
      std::string run_dir =
          out_dir + "/" + variant.name + "_seed" + std::to_string(seed);
      cfg.set("run.dir", run_dir);
      run_train(cfg);
      EvalReport report = run_eval(run_dir);
      sum_last += report.last_acc;
      sum_avg += report.avg_acc;
      sum_forget += report.num_tasks >= 2 ? report.forget.average : 0.0;
      ++row.num_seeds;
    }
    row.last_mean = sum_last / row.num_seeds;
    row.avg_mean = sum_avg / row.num_seeds;
    row.forget_mean = sum_forget / row.num_seeds;
    rows.push_back(row);
  }

  std::ostringstream out;
  out << "axis,variant,seeds,last_acc_mean,avg_acc_mean,avg_forgetting_mean\n";
  for (const AblationRow& r : rows)
    out << axis << "," << r.variant << "," << r.num_seeds << "," << fmt_double(r.last_mean, 12)
        << "," << fmt_double(r.avg_mean, 12) << "," << fmt_double(r.forget_mean, 12) << "\n";
  write_file_atomic(out_dir + "/ablation_" + axis + ".csv", out.str());
  return rows;
}

}  // namespace vitcil
