#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vitcil/config.hpp"
#include "vitcil/runner.hpp"
#include "vitcil/util.hpp"

namespace {

vitcil::Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
  vitcil::Config cfg = vitcil::Config::from_file(path);
  for (const std::string& kv : overrides) cfg.apply_override(kv);
  return cfg;
}

void print_eval_report(const vitcil::EvalReport& report) {
  std::printf("task  acc_after_task\n");
  for (int i = 0; i < report.num_tasks; ++i)
    std::printf("%4d  %.4f\n", i + 1, report.acc_per_task[i]);
  std::printf("avg_acc  %.4f\n", report.avg_acc);
  std::printf("last_acc %.4f\n", report.last_acc);
  if (report.num_tasks >= 2) std::printf("avg_forgetting %.4f\n", report.forget.average);
  std::printf("matrix: %s\nreport: %s\n", report.matrix_csv.c_str(), report.report_csv.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"non-exemplar class-incremental learning with a small vision transformer"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "run all incremental tasks");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--override", overrides, "override config key (key=value, repeatable)");

  std::string eval_dir;
  auto* eval = app.add_subcommand("eval", "evaluate a finished run's checkpoints");
  eval->add_option("run_dir", eval_dir, "run directory")->required();

  std::string dump_dir;
  int dump_task = 1;
  int dump_image = 0;
  auto* dump = app.add_subcommand("dump-weights", "export a patch-weight heatmap grid");
  dump->add_option("run_dir", dump_dir, "run directory")->required();
  dump->add_option("--task", dump_task, "task checkpoint to load")->required();
  dump->add_option("--image", dump_image, "test-set image id")->required();

  std::string ablate_config;
  std::string ablate_axis;
  std::string ablate_out = "runs/ablation";
  std::vector<std::string> ablate_overrides;
  auto* ablate = app.add_subcommand("ablate", "run an ablation axis across seeds");
  ablate->add_option("--config", ablate_config, "config file")->required();
  ablate->add_option("--axis", ablate_axis, "pks_on_off | pr_on_off | weight_mode")->required();
  ablate->add_option("--out", ablate_out, "output directory");
  ablate->add_option("--override", ablate_overrides, "override config key (repeatable)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      std::string dir = vitcil::run_train(load_config(config_path, overrides));
      std::printf("run complete: %s\n", dir.c_str());
    } else if (eval->parsed()) {
      print_eval_report(vitcil::run_eval(eval_dir));
    } else if (dump->parsed()) {
      std::string path = vitcil::run_dump_weights(dump_dir, dump_task, dump_image);
      std::printf("weights: %s\n", path.c_str());
    } else if (ablate->parsed()) {
      auto rows = vitcil::run_ablate(load_config(ablate_config, ablate_overrides), ablate_axis,
                                     ablate_out);
      std::printf("%-18s %6s %10s %10s %10s\n", "variant", "seeds", "last", "avg", "forget");
      for (const auto& r : rows)
        std::printf("%-18s %6d %10.4f %10.4f %10.4f\n", r.variant.c_str(), r.num_seeds,
                    r.last_mean, r.avg_mean, r.forget_mean);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
