#pragma once

#include <string>
#include <vector>

#include "vitcil/errors.hpp"
#include "vitcil/model.hpp"

namespace vitcil {

// Lower-triangular a_{m,n}: accuracy on task n's test classes after learning
// task m (0-based internally; CSV uses 1-based task ids).
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(int num_tasks);

  int num_tasks() const { return num_tasks_; }
  void set(int after_task, int task, double accuracy);
  double at(int after_task, int task) const;
  bool filled(int after_task, int task) const;

  void save_csv(const std::string& path) const;
  static AccuracyMatrix load_csv(const std::string& path);

 private:
  int num_tasks_;
  std::vector<double> entries_;
  std::vector<char> present_;
};

// Arithmetic mean of Acc_1..Acc_T.
double avg_accuracy(const std::vector<double>& acc_per_task);

struct ForgettingResult {
  std::vector<double> per_task;  // f_k^i for i = 1..k-1
  double average = 0.0;          // F_k
};

// f_k^i = max over prior rows containing task i of (a_{t,i} - a_{k,i});
// F_k = mean over i < k. Negative values are kept (no clamping).
// k is the 1-based count of learned tasks; requires k >= 2.
ForgettingResult forgetting(const AccuracyMatrix& matrix, int k);

// Test samples of one task, labels already mapped to classifier rows.
struct EvalGroup {
  int task_id = 0;  // 0-based
  std::vector<int> sample_indices;
  std::vector<int> head_labels;
};

struct TaskAccuracyResult {
  double overall = 0.0;             // Acc_m over all learned classes
  std::vector<double> per_task;     // a_{m,n} for n <= m
  long correct = 0;
  long total = 0;
};

// Task-agnostic top-1 evaluation: argmax over the full learned-class logit
// range. Counts are integers; accuracies are exact 64-bit ratios.
TaskAccuracyResult task_accuracy(const VitModel<float>& model,
                                 const std::vector<Image<float>>& test_images,
                                 const std::vector<EvalGroup>& groups);

}  // namespace vitcil
