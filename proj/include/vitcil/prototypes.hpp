#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "vitcil/errors.hpp"
#include "vitcil/graph.hpp"

namespace vitcil {

// Per-class mean [CLS] embedding with its sample count; the only per-class
// state retained from old tasks.
template <typename S>
struct ClassPrototype {
  int class_id = -1;
  int task_id = -1;
  Mat<S> center;  // 1 x d
  long sample_count = 0;
  bool finalized = false;
};

// Maintains running class centers during the current task and freezes them at
// task end. Storage is O(#classes * d) by construction; no sample is kept.
template <typename S>
class PrototypeStore {
 public:
  explicit PrototypeStore(int dim) : dim_(dim) {}

  int dim() const { return dim_; }
  int current_task() const { return current_task_; }

  void begin_task(int task_id, const std::vector<int>& class_ids) {
    if (task_id <= current_task_)
      throw ProtocolViolation("begin_task: task ids must be strictly increasing");
    for (int c : class_ids)
      if (entries_.count(c))
        throw ProtocolViolation("begin_task: class " + std::to_string(c) + " already learned");
    current_task_ = task_id;
    for (int c : class_ids) {
      Entry e;
      e.proto.class_id = c;
      e.proto.task_id = task_id;
      e.proto.center = Mat<S>::Zero(1, dim_);
      e.sum = Eigen::Matrix<double, 1, Eigen::Dynamic>::Zero(1, dim_);
      entries_[c] = std::move(e);
    }
  }

  // Fold a batch of embeddings (B x d) into the running mean of class_id.
  void update_center(int class_id, const Mat<S>& cls_embeddings) {
    auto it = entries_.find(class_id);
    if (it == entries_.end())
      throw RejectedInput("update_center: unknown class " + std::to_string(class_id));
    Entry& e = it->second;
    if (e.proto.finalized)
      throw ImmutabilityError("update_center: class " + std::to_string(class_id) +
                              " belongs to a finalized task");
    if (e.proto.task_id != current_task_)
      throw RejectedInput("update_center: class " + std::to_string(class_id) +
                          " is not in the current task");
    if (cls_embeddings.cols() != dim_)
      throw RejectedInput("update_center: embedding dimension mismatch");
    // Sums accumulate in double so streamed means stay within 1e-6 of the
    // one-shot mean up to ~1e6 contributions.
    for (Eigen::Index r = 0; r < cls_embeddings.rows(); ++r) {
      e.sum += cls_embeddings.row(r).template cast<double>();
      e.proto.sample_count += 1;
    }
    e.proto.center = (e.sum / static_cast<double>(e.proto.sample_count)).template cast<S>();
  }

  void finalize_task(int task_id) {
    if (task_id != current_task_)
      throw ProtocolViolation("finalize_task: task " + std::to_string(task_id) +
                              " is not the current task");
    for (auto& [cid, e] : entries_) {
      if (e.proto.task_id != task_id) continue;
      if (e.proto.sample_count == 0)
        throw IncompleteTaskError("finalize_task: class " + std::to_string(cid) +
                                  " received no updates");
    }
    for (auto& [cid, e] : entries_) {
      if (e.proto.task_id == task_id) e.proto.finalized = true;
    }
    rebuild_finalized_list();
  }

  bool has_class(int class_id) const { return entries_.count(class_id) != 0; }

  const ClassPrototype<S>& prototype(int class_id) const {
    auto it = entries_.find(class_id);
    if (it == entries_.end())
      throw RejectedInput("prototype: unknown class " + std::to_string(class_id));
    return it->second.proto;
  }

  // Running center while a task is open, frozen center afterwards.
  const Mat<S>& center(int class_id) const {
    const ClassPrototype<S>& p = prototype(class_id);
    if (p.sample_count == 0)
      throw RejectedInput("center: class " + std::to_string(class_id) + " has no samples yet");
    return p.center;
  }

  int num_finalized() const { return static_cast<int>(finalized_.size()); }

  // Uniform draw over all finalized old classes.
  std::pair<int, int> sample_old_class(std::mt19937_64& rng) const {
    if (finalized_.empty()) throw EmptyStoreError("sample_old_class: no finalized old classes");
    std::uniform_int_distribution<size_t> pick(0, finalized_.size() - 1);
    int cid = finalized_[pick(rng)];
    return {entries_.at(cid).proto.task_id, cid};
  }

  std::vector<const ClassPrototype<S>*> finalized_prototypes() const {
    std::vector<const ClassPrototype<S>*> out;
    out.reserve(finalized_.size());
    for (int cid : finalized_) out.push_back(&entries_.at(cid).proto);
    return out;
  }

  std::vector<int> all_class_ids() const {
    std::vector<int> out;
    for (const auto& [cid, e] : entries_) out.push_back(cid);
    return out;
  }

  // Install an already-finalized prototype (checkpoint restore path).
  void restore_finalized(const ClassPrototype<S>& proto) {
    if (proto.center.rows() != 1 || proto.center.cols() != dim_)
      throw RejectedInput("restore_finalized: center dimension mismatch");
    if (entries_.count(proto.class_id))
      throw ProtocolViolation("restore_finalized: class already present");
    Entry e;
    e.proto = proto;
    e.proto.finalized = true;
    entries_[proto.class_id] = std::move(e);
    if (proto.task_id > current_task_) current_task_ = proto.task_id;
    rebuild_finalized_list();
  }

 private:
  struct Entry {
    ClassPrototype<S> proto;
    Eigen::Matrix<double, 1, Eigen::Dynamic> sum;
  };

  void rebuild_finalized_list() {
    finalized_.clear();
    for (const auto& [cid, e] : entries_)
      if (e.proto.finalized) finalized_.push_back(cid);
  }

  int dim_;
  int current_task_ = 0;  // task ids are 1-based
  std::map<int, Entry> entries_;
  std::vector<int> finalized_;
};

}  // namespace vitcil
