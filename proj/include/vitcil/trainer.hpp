#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "vitcil/data.hpp"
#include "vitcil/util.hpp"
#include "vitcil/errors.hpp"
#include "vitcil/evalkit.hpp"
#include "vitcil/graph.hpp"
#include "vitcil/model.hpp"
#include "vitcil/pks.hpp"
#include "vitcil/pr.hpp"
#include "vitcil/prototypes.hpp"

namespace vitcil {

// lambda_pks and lambda_pr weight the selection and restoration terms in the
// combined objective.
template <typename S>
struct LossHyper {
  S lambda_pks = S(10);
  S lambda_pr = S(10);
  bool pks_enabled = true;
  bool pr_enabled = true;
  WeightMode pks_mode = WeightMode::inverse_distance;
  S pks_epsilon = S(1e-8);
};

struct PlannedRestoration {
  int donor_index = -1;
  int old_task = -1;
  int old_class = -1;
  int old_head_label = -1;
};

// All rng-dependent choices of one training step, drawn up front so a loss
// evaluation is a pure function of the parameters (finite differences pin it).
struct StepPlan {
  BatchSplit split;                              // batch positions
  std::vector<std::pair<int, int>> pairs;        // batch positions
  std::vector<PlannedRestoration> restorations;  // donor positions
};

template <typename S>
StepPlan make_step_plan(int batch_size, const PrototypeStore<S>& store, bool pr_enabled,
                        int restore_count_per_sample,
                        const std::vector<int>& head_of_class_order,
                        std::mt19937_64& rng) {
  StepPlan plan;
  if (!pr_enabled || batch_size < 2) return plan;
  std::vector<int> positions(batch_size);
  for (int i = 0; i < batch_size; ++i) positions[i] = i;
  plan.split = split_batch(positions, rng);
  plan.pairs = pair_offsets(plan.split, rng);
  if (store.num_finalized() > 0 && restore_count_per_sample > 0) {
    std::vector<RestorationPlan> raw = plan_restorations<S>(
        batch_size, restore_count_per_sample * batch_size, store, rng);
    for (const RestorationPlan& r : raw) {
      PlannedRestoration p;
      p.donor_index = r.donor_index;
      p.old_task = r.old_task;
      p.old_class = r.old_class;
      p.old_head_label = -1;
      for (size_t i = 0; i < head_of_class_order.size(); ++i)
        if (head_of_class_order[i] == r.old_class) p.old_head_label = static_cast<int>(i);
      if (p.old_head_label < 0)
        throw ProtocolViolation("make_step_plan: old class missing from head order");
      plan.restorations.push_back(p);
    }
  }
  return plan;
}

template <typename S>
std::vector<ForwardVars<S>> forward_batch(Graph<S>& g, const VitModel<S>& model,
                                          const BoundModel<S>& bound,
                                          const std::vector<Image<S>>& images) {
  std::vector<ForwardVars<S>> out;
  out.reserve(images.size());
  for (const Image<S>& img : images) out.push_back(model.forward(g, bound, img));
  return out;
}

template <typename S>
std::vector<TokenSet<S>> forward_batch_values(const VitModel<S>& model,
                                              const std::vector<Image<S>>& images) {
  std::vector<TokenSet<S>> out;
  out.reserve(images.size());
  for (const Image<S>& img : images) out.push_back(model.forward_infer(img));
  return out;
}

template <typename S>
struct StepLoss {
  Var<S> total;
  S total_value = S(0);
  S cil = S(0);
  S pks = S(0);
  S pr = S(0);
  std::vector<PatchWeights<S>> weights;  // per image (empty when PKS inactive)
};

// L_all = L_CIL + lambda_pks * L_pks + lambda_pr * L_pr over one batch.
// At t = 1 (old_tokens == nullptr) the PKS and PR terms are exactly zero.
// Per-sample losses aggregate as batch means. pinned_weights, when given,
// replaces the per-image weight computation (finite-difference harness).
template <typename S>
StepLoss<S> compose_step_loss(Graph<S>& g, const BoundModel<S>& bound,
                              const std::vector<ForwardVars<S>>& fv,
                              const std::vector<TokenSet<S>>* old_tokens,
                              const std::vector<int>& head_labels,
                              const std::vector<int>& class_ids,
                              const PrototypeStore<S>& store, const StepPlan& plan,
                              const LossHyper<S>& hp,
                              const std::vector<PatchWeights<S>>* pinned_weights = nullptr) {
  const int bs = static_cast<int>(fv.size());
  if (bs == 0) throw RejectedInput("compose_step_loss: empty batch");
  if (static_cast<int>(head_labels.size()) != bs || static_cast<int>(class_ids.size()) != bs)
    throw RejectedInput("compose_step_loss: label count mismatch");

  StepLoss<S> out;
  std::vector<Var<S>> embeddings;
  std::vector<int> labels = head_labels;
  embeddings.reserve(bs + plan.restorations.size());
  for (int i = 0; i < bs; ++i) embeddings.push_back(fv[i].cls_token);

  const bool has_old = old_tokens != nullptr;

  if (has_old && hp.pr_enabled) {
    for (const PlannedRestoration& r : plan.restorations) {
      const Mat<S>& mu_old = store.center(r.old_class);
      const Mat<S>& mu_cur = store.center(class_ids[r.donor_index]);
      embeddings.push_back(
          restore_prototype_graph(g, fv[r.donor_index].cls_token, mu_old, mu_cur));
      labels.push_back(r.old_head_label);
    }
  }

  Var<S> cil = cil_loss_graph(g, embeddings, labels, bound.head_w, bound.head_b);
  out.cil = g.value(cil)(0, 0);
  if (!std::isfinite(static_cast<double>(out.cil)))
    throw NumericalFailure("loss term cil is non-finite");
  Var<S> total = cil;

  if (has_old && hp.pks_enabled) {
    if (static_cast<int>(old_tokens->size()) != bs)
      throw RejectedInput("compose_step_loss: old token count mismatch");
    Var<S> acc;
    for (int i = 0; i < bs; ++i) {
      PatchWeights<S> w;
      if (pinned_weights) {
        w = (*pinned_weights)[i];
      } else {
        TokenSet<S> cur{g.value(fv[i].patch_tokens), g.value(fv[i].cls_token)};
        w = compute_patch_weights(cur, hp.pks_mode, hp.pks_epsilon);
      }
      out.weights.push_back(w);
      Var<S> term = pks_loss_graph(g, fv[i].patch_tokens, fv[i].cls_token,
                                   (*old_tokens)[i].patch_tokens, (*old_tokens)[i].cls_token, w);
      acc = acc.valid() ? g.add(acc, term) : term;
    }
    Var<S> pks = g.scale(acc, S(1) / S(bs));
    out.pks = g.value(pks)(0, 0);
    if (!std::isfinite(static_cast<double>(out.pks)))
      throw NumericalFailure("loss term pks is non-finite");
    total = g.add(total, g.scale(pks, hp.lambda_pks));
  }

  if (has_old && hp.pr_enabled && !plan.pairs.empty()) {
    std::vector<Var<S>> cls_vars;
    std::vector<Mat<S>> cls_old;
    std::vector<Mat<S>> centers;
    cls_vars.reserve(bs);
    for (int i = 0; i < bs; ++i) {
      cls_vars.push_back(fv[i].cls_token);
      cls_old.push_back((*old_tokens)[i].cls_token);
      centers.push_back(store.center(class_ids[i]));
    }
    Var<S> pr = pr_loss_graph(g, cls_vars, cls_old, centers, plan.pairs);
    out.pr = g.value(pr)(0, 0);
    if (!std::isfinite(static_cast<double>(out.pr)))
      throw NumericalFailure("loss term pr is non-finite");
    total = g.add(total, g.scale(pr, hp.lambda_pr));
  }

  out.total = total;
  out.total_value = g.value(total)(0, 0);
  if (!std::isfinite(static_cast<double>(out.total_value)))
    throw NumericalFailure("loss term total is non-finite");
  return out;
}

// Adam with per-task cosine step-size decay; state is created fresh at each
// task start so tensor shapes may change between tasks (classifier growth).
template <typename S>
class AdamOptimizer {
 public:
  AdamOptimizer(S lr, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void attach(const VitModel<S>& model) {
    m_.clear();
    v_.clear();
    for (int i = 0; i < model.num_tensors(); ++i) {
      const Mat<S>& t = model.tensor_value(i);
      m_.push_back(Mat<S>::Zero(t.rows(), t.cols()));
      v_.push_back(Mat<S>::Zero(t.rows(), t.cols()));
    }
    step_count_ = 0;
  }

  void step(VitModel<S>& model, const std::vector<Mat<S>>& grads, S lr_scale) {
    if (static_cast<int>(grads.size()) != model.num_tensors())
      throw RejectedInput("AdamOptimizer::step: gradient count mismatch");
    ++step_count_;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1_), step_count_));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2_), step_count_));
    const S lr = lr_ * lr_scale;
    for (int i = 0; i < model.num_tensors(); ++i) {
      Mat<S>& p = model.tensor_value(i);
      const Mat<S>& grad = grads[i];
      m_[i] = beta1_ * m_[i] + (S(1) - beta1_) * grad;
      v_[i] = Mat<S>(beta2_ * v_[i].array() + (S(1) - beta2_) * grad.array().square());
      Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mhat =
          m_[i].array() / bc1;
      Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> vhat =
          v_[i].array() / bc2;
      p.array() -= lr * mhat / (vhat.sqrt() + eps_);
    }
  }

 private:
  S lr_, beta1_, beta2_, eps_;
  long step_count_ = 0;
  std::vector<Mat<S>> m_;
  std::vector<Mat<S>> v_;
};

inline double cosine_lr_scale(long step, long total_steps, double min_ratio) {
  if (total_steps <= 1) return 1.0;
  double progress = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return min_ratio + 0.5 * (1.0 - min_ratio) * (1.0 + std::cos(M_PI * progress));
}

struct TrainHyper {
  int epochs = 20;
  int batch_size = 32;
  double lr = 3e-3;
  double lr_min_ratio = 0.01;
  double lambda_pks = 10.0;
  double lambda_pr = 10.0;
  bool pks_enabled = true;
  bool pr_enabled = true;
  WeightMode pks_mode = WeightMode::inverse_distance;
  double pks_epsilon = 1e-8;
  int restore_count_per_sample = 1;
  bool eval_every_epoch = true;
  uint64_t seed = 1;
  AugmentSpec aug;
};

struct MetricsRow {
  int task = 0;   // 1-based
  int epoch = 0;  // 1-based
  double loss_total = 0.0;
  double loss_cil = 0.0;
  double loss_pks = 0.0;
  double loss_pr = 0.0;
  double eval_acc = 0.0;
  bool has_eval = false;
};

// Runs the per-task training loop: snapshot the previous model, grow the
// classifier, maintain running prototypes every step, minimize the combined
// objective, finalize prototypes at task end. Deterministic under seed.
class Trainer {
 public:
  Trainer(const ModelConfig& cfg, const Dataset& data, const TaskSpec& spec,
          const TrainHyper& hyper)
      : data_(data),
        spec_(spec),
        hyper_(hyper),
        model_(with_no_classes(cfg), mix_seed(hyper.seed, 1)),
        store_(cfg.embed_dim) {
    head_order_ = spec.head_order();
  }

  void train_task(int task) {
    const int t = task;  // 1-based
    if (t != tasks_done_ + 1)
      throw ProtocolViolation("train_task: tasks must run in order; expected task " +
                              std::to_string(tasks_done_ + 1));
    if (t > spec_.num_tasks()) throw ProtocolViolation("train_task: task beyond TaskSpec");
    const std::vector<int>& classes = spec_.task_classes[t - 1];
    for (int c : classes)
      if (store_.has_class(c))
        throw ProtocolViolation("train_task: class " + std::to_string(c) +
                                " overlaps an earlier task");

    if (t >= 2) old_model_ = std::make_unique<VitModel<float>>(model_);  // frozen snapshot
    model_.grow_head(static_cast<int>(classes.size()));
    store_.begin_task(t, classes);

    BatchProducer producer(data_, classes, hyper_.batch_size, mix_seed(hyper_.seed, 100 + t),
                           hyper_.aug);
    std::mt19937_64 plan_rng(mix_seed(hyper_.seed, 200 + t));

    AdamOptimizer<float> opt(static_cast<float>(hyper_.lr));
    opt.attach(model_);
    const long steps_per_epoch =
        (producer.samples_per_epoch() + hyper_.batch_size - 1) / hyper_.batch_size;
    const long total_steps = steps_per_epoch * hyper_.epochs;

    LossHyper<float> hp;
    hp.lambda_pks = static_cast<float>(hyper_.lambda_pks);
    hp.lambda_pr = static_cast<float>(hyper_.lambda_pr);
    hp.pks_enabled = hyper_.pks_enabled;
    hp.pr_enabled = hyper_.pr_enabled;
    hp.pks_mode = hyper_.pks_mode;
    hp.pks_epsilon = static_cast<float>(hyper_.pks_epsilon);

    long step_index = 0;
    for (int epoch = 1; epoch <= hyper_.epochs; ++epoch) {
      double sum_total = 0, sum_cil = 0, sum_pks = 0, sum_pr = 0;
      long steps = 0;
      for (const Batch& batch : producer.next_epoch()) {
        StepLoss<float> loss = train_step(batch, plan_rng, hp);
        double lr_scale = cosine_lr_scale(step_index, total_steps, hyper_.lr_min_ratio);
        apply_gradients(opt, static_cast<float>(lr_scale));
        ++step_index;
        sum_total += loss.total_value;
        sum_cil += loss.cil;
        sum_pks += loss.pks;
        sum_pr += loss.pr;
        ++steps;
      }
      MetricsRow row;
      row.task = t;
      row.epoch = epoch;
      row.loss_total = sum_total / steps;
      row.loss_cil = sum_cil / steps;
      row.loss_pks = sum_pks / steps;
      row.loss_pr = sum_pr / steps;
      if (hyper_.eval_every_epoch || epoch == hyper_.epochs) {
        row.eval_acc = evaluate_seen_tasks(t).overall;
        row.has_eval = true;
      }
      metrics_.push_back(row);
    }
    store_.finalize_task(t);
    tasks_done_ = t;
  }

  TaskAccuracyResult evaluate_seen_tasks(int up_to_task) const {
    return task_accuracy(model_, data_.test_images, eval_groups(up_to_task));
  }

  std::vector<EvalGroup> eval_groups(int up_to_task) const {
    std::vector<EvalGroup> groups;
    for (int n = 1; n <= up_to_task; ++n) {
      EvalGroup gr;
      gr.task_id = n - 1;
      for (size_t i = 0; i < data_.test_labels.size(); ++i) {
        int cls = data_.test_labels[i];
        const std::vector<int>& task_classes = spec_.task_classes[n - 1];
        if (std::find(task_classes.begin(), task_classes.end(), cls) != task_classes.end()) {
          gr.sample_indices.push_back(static_cast<int>(i));
          gr.head_labels.push_back(spec_.head_index_of(cls));
        }
      }
      groups.push_back(std::move(gr));
    }
    return groups;
  }

  const VitModel<float>& model() const { return model_; }
  VitModel<float>& model() { return model_; }
  const PrototypeStore<float>& store() const { return store_; }
  PrototypeStore<float>& store() { return store_; }
  const VitModel<float>* old_model() const { return old_model_.get(); }
  const std::vector<MetricsRow>& metrics() const { return metrics_; }
  int tasks_done() const { return tasks_done_; }
  const TaskSpec& task_spec() const { return spec_; }
  const TrainHyper& hyper() const { return hyper_; }

 private:
  static ModelConfig with_no_classes(ModelConfig cfg) {
    cfg.num_classes_initial = 0;
    return cfg;
  }

  StepLoss<float> train_step(const Batch& batch, std::mt19937_64& plan_rng,
                             const LossHyper<float>& hp) {
    const int bs = static_cast<int>(batch.images.size());
    Graph<float> g;
    BoundModel<float> bound = model_.bind(g, true);
    std::vector<ForwardVars<float>> fv = forward_batch(g, model_, bound, batch.images);

    // Running prototype means fold in this batch before the offsets are taken,
    // so every label in the batch has a center from the first step on.
    for (int i = 0; i < bs; ++i)
      store_.update_center(batch.labels[i], g.value(fv[i].cls_token));

    std::vector<TokenSet<float>> old_tokens;
    const std::vector<TokenSet<float>>* old_ptr = nullptr;
    if (old_model_) {
      old_tokens = forward_batch_values(*old_model_, batch.images);
      old_ptr = &old_tokens;
    }

    StepPlan plan = make_step_plan(bs, store_, old_model_ != nullptr && hp.pr_enabled,
                                   hyper_.restore_count_per_sample, head_order_, plan_rng);

    std::vector<int> head_labels(bs);
    for (int i = 0; i < bs; ++i) head_labels[i] = spec_.head_index_of(batch.labels[i]);

    StepLoss<float> loss = compose_step_loss(g, bound, fv, old_ptr, head_labels, batch.labels,
                                             store_, plan, hp);
    g.backward(loss.total);
    pending_grads_.clear();
    for (size_t i = 0; i < bound.backbone.size(); ++i)
      pending_grads_.push_back(g.grad(bound.backbone[i]));
    pending_grads_.push_back(g.grad(bound.head_w));
    pending_grads_.push_back(g.grad(bound.head_b));
    return loss;
  }

  void apply_gradients(AdamOptimizer<float>& opt, float lr_scale) {
    opt.step(model_, pending_grads_, lr_scale);
  }

  const Dataset& data_;
  TaskSpec spec_;
  TrainHyper hyper_;
  VitModel<float> model_;
  PrototypeStore<float> store_;
  std::unique_ptr<VitModel<float>> old_model_;
  std::vector<int> head_order_;
  std::vector<MetricsRow> metrics_;
  std::vector<Mat<float>> pending_grads_;
  int tasks_done_ = 0;
};

}  // namespace vitcil
