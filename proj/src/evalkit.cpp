#include "vitcil/evalkit.hpp"

#include <fstream>
#include <sstream>

#include "vitcil/util.hpp"

namespace vitcil {

AccuracyMatrix::AccuracyMatrix(int num_tasks) : num_tasks_(num_tasks) {
  if (num_tasks < 1) throw RejectedInput("AccuracyMatrix: need at least one task");
  entries_.assign(static_cast<size_t>(num_tasks) * num_tasks, 0.0);
  present_.assign(entries_.size(), 0);
}

void AccuracyMatrix::set(int after_task, int task, double accuracy) {
  if (after_task < 0 || after_task >= num_tasks_ || task < 0 || task > after_task)
    throw RejectedInput("AccuracyMatrix::set: index outside lower triangle");
  if (accuracy < 0.0 || accuracy > 1.0)
    throw RejectedInput("AccuracyMatrix::set: accuracy outside [0, 1]");
  entries_[static_cast<size_t>(after_task) * num_tasks_ + task] = accuracy;
  present_[static_cast<size_t>(after_task) * num_tasks_ + task] = 1;
}

double AccuracyMatrix::at(int after_task, int task) const {
  if (after_task < 0 || after_task >= num_tasks_ || task < 0 || task > after_task)
    throw RejectedInput("AccuracyMatrix::at: index outside lower triangle");
  if (!present_[static_cast<size_t>(after_task) * num_tasks_ + task])
    throw RejectedInput("AccuracyMatrix::at: entry not filled");
  return entries_[static_cast<size_t>(after_task) * num_tasks_ + task];
}

bool AccuracyMatrix::filled(int after_task, int task) const {
  if (after_task < 0 || after_task >= num_tasks_ || task < 0 || task > after_task) return false;
  return present_[static_cast<size_t>(after_task) * num_tasks_ + task] != 0;
}

void AccuracyMatrix::save_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RejectedInput("AccuracyMatrix::save_csv: cannot open " + path);
  out << "row_task,col_task,accuracy\n";
  for (int m = 0; m < num_tasks_; ++m)
    for (int n = 0; n <= m; ++n)
      if (filled(m, n))
        out << (m + 1) << "," << (n + 1) << "," << fmt_double(at(m, n), 12) << "\n";
}

AccuracyMatrix AccuracyMatrix::load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RejectedInput("AccuracyMatrix::load_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw RejectedInput("AccuracyMatrix::load_csv: empty file");
  struct Row {
    int m, n;
    double a;
  };
  std::vector<Row> rows;
  int max_task = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    Row r{};
    char c1, c2;
    if (!(ss >> r.m >> c1 >> r.n >> c2 >> r.a) || c1 != ',' || c2 != ',')
      throw RejectedInput("AccuracyMatrix::load_csv: malformed line: " + line);
    max_task = std::max(max_task, r.m);
    rows.push_back(r);
  }
  AccuracyMatrix out(max_task);
  for (const Row& r : rows) out.set(r.m - 1, r.n - 1, r.a);
  return out;
}

double avg_accuracy(const std::vector<double>& acc_per_task) {
  if (acc_per_task.empty()) throw RejectedInput("avg_accuracy: empty input");
  double sum = 0.0;
  for (double a : acc_per_task) sum += a;
  return sum / static_cast<double>(acc_per_task.size());
}

ForgettingResult forgetting(const AccuracyMatrix& matrix, int k) {
  if (k < 2) throw RejectedInput("forgetting: k must be >= 2");
  if (k > matrix.num_tasks()) throw RejectedInput("forgetting: k exceeds matrix size");
  ForgettingResult out;
  double sum = 0.0;
  for (int i = 0; i < k - 1; ++i) {
    // max over the prior rows that contain task i (rows t = i .. k-2, 0-based)
    double best = matrix.at(i, i) - matrix.at(k - 1, i);
    for (int t = i + 1; t <= k - 2; ++t) {
      double v = matrix.at(t, i) - matrix.at(k - 1, i);
      if (v > best) best = v;
    }
    out.per_task.push_back(best);
    sum += best;
  }
  out.average = sum / static_cast<double>(k - 1);
  return out;
}

TaskAccuracyResult task_accuracy(const VitModel<float>& model,
                                 const std::vector<Image<float>>& test_images,
                                 const std::vector<EvalGroup>& groups) {
  TaskAccuracyResult res;
  const int num_classes = model.head().num_classes();
  for (const EvalGroup& gr : groups) {
    for (int label : gr.head_labels)
      if (label < 0 || label >= num_classes)
        throw RejectedInput("task_accuracy: label outside classifier range");
  }
  for (const EvalGroup& gr : groups) {
    long correct = 0;
    for (size_t i = 0; i < gr.sample_indices.size(); ++i) {
      const Image<float>& img = test_images[gr.sample_indices[i]];
      TokenSet<float> tokens = model.forward_infer(img);
      Mat<float> logits = head_logits(tokens.cls_token, model.head());
      Eigen::Index pred = 0;
      logits.row(0).maxCoeff(&pred);
      if (static_cast<int>(pred) == gr.head_labels[i]) ++correct;
    }
    res.per_task.push_back(static_cast<double>(correct) /
                           static_cast<double>(gr.sample_indices.size()));
    res.correct += correct;
    res.total += static_cast<long>(gr.sample_indices.size());
  }
  res.overall = res.total > 0 ? static_cast<double>(res.correct) / static_cast<double>(res.total)
                              : 0.0;
  return res;
}

}  // namespace vitcil
