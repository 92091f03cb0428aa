#pragma once

#include <string>
#include <vector>

#include "vitcil/config.hpp"
#include "vitcil/data.hpp"
#include "vitcil/evalkit.hpp"
#include "vitcil/model.hpp"
#include "vitcil/trainer.hpp"

namespace vitcil {

// Every key a run config may contain; anything else is a ConfigError.
const std::vector<std::string>& known_config_keys();

// Config resolved against defaults.
struct RunSetup {
  ModelConfig model;
  SyntheticSpec synth;
  std::string data_source = "synthetic";
  std::string data_path;
  int base_classes = 4;
  int classes_per_task = 3;
  int num_incremental_tasks = 2;
  uint64_t data_seed = 7;
  TrainHyper hyper;
  std::string run_dir = "runs/out";
};

RunSetup parse_run_setup(const Config& cfg);

// Executes all tasks; writes manifest.json, checkpoints/task_<t>.ckpt and
// metrics.csv under the run directory. Returns the run directory.
std::string run_train(const Config& cfg);

struct EvalReport {
  int num_tasks = 0;
  std::vector<double> acc_per_task;  // Acc_i
  double avg_acc = 0.0;
  double last_acc = 0.0;
  ForgettingResult forget;  // filled when num_tasks >= 2
  std::string matrix_csv;
  std::string report_csv;
};

// Re-evaluates every per-task checkpoint of a finished run, writes
// accuracy_matrix.csv and metrics_report.csv, and returns the summary.
EvalReport run_eval(const std::string& run_dir);

// Normalized patch-weight grid for one test image under the checkpoint of
// `task`; written row-major as CSV. Returns the output path.
std::string run_dump_weights(const std::string& run_dir, int task, int image_id);

struct AblationRow {
  std::string variant;
  int num_seeds = 0;
  double last_mean = 0.0;
  double avg_mean = 0.0;
  double forget_mean = 0.0;
};

// Runs the axis cross-product at the seeds in ablate.seeds and writes a
// side-by-side table. axis: pks_on_off | pr_on_off | weight_mode.
std::vector<AblationRow> run_ablate(const Config& cfg, const std::string& axis,
                                    const std::string& out_dir);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

}  // namespace vitcil
