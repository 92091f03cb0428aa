#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "vitcil/errors.hpp"
#include "vitcil/graph.hpp"
#include "vitcil/prototypes.hpp"

namespace vitcil {

// Disjoint random halves of a batch, each of size floor(bs / 2). With an odd
// batch one sample sits out of the offset supervision for this step (it still
// feeds the classification and selection terms).
struct BatchSplit {
  std::vector<int> s1;
  std::vector<int> s2;
};

inline BatchSplit split_batch(const std::vector<int>& batch_indices, std::mt19937_64& rng) {
  const int bs = static_cast<int>(batch_indices.size());
  if (bs < 2) throw RejectedInput("split_batch: batch size must be >= 2");
  std::vector<int> perm = batch_indices;
  std::shuffle(perm.begin(), perm.end(), rng);
  const int half = bs / 2;
  BatchSplit out;
  out.s1.assign(perm.begin(), perm.begin() + half);
  out.s2.assign(perm.begin() + half, perm.begin() + 2 * half);
  return out;
}

// floor(bs/2) offset pairs: both subsets shuffled independently, then matched
// positionally, so each element of S1 x S2 pairs without replacement.
inline std::vector<std::pair<int, int>> pair_offsets(const BatchSplit& split,
                                                     std::mt19937_64& rng) {
  std::vector<int> a = split.s1;
  std::vector<int> b = split.s2;
  std::shuffle(a.begin(), a.end(), rng);
  std::shuffle(b.begin(), b.end(), rng);
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(a.size());
  for (size_t i = 0; i < a.size() && i < b.size(); ++i) pairs.emplace_back(a[i], b[i]);
  return pairs;
}

// Mean over sampled pairs of the MSE between current-model offsets (subset S1)
// and old-model offsets (subset S2). Both offsets are taken against the
// current-task class centers; old offsets carry no gradient.
//
// cls_current: per-sample current [CLS] vars; cls_old: per-sample old-model
// [CLS] values; centers: per-sample current-task class center mu_{t, y_i}.
template <typename S>
Var<S> pr_loss_graph(Graph<S>& g, const std::vector<Var<S>>& cls_current,
                     const std::vector<Mat<S>>& cls_old, const std::vector<Mat<S>>& centers,
                     const std::vector<std::pair<int, int>>& pairs) {
  if (pairs.empty()) throw RejectedInput("pr_loss: no offset pairs");
  Var<S> acc;
  for (const auto& [i, j] : pairs) {
    Var<S> offset_cur = g.sub(cls_current[i], g.constant(centers[i]));
    Var<S> offset_old = g.constant(Mat<S>(cls_old[j] - centers[j]));
    Var<S> d = g.sub(offset_cur, offset_old);
    Var<S> mse = g.mean_all(g.mul_elem(d, d));
    acc = acc.valid() ? g.add(acc, mse) : mse;
  }
  return g.scale(acc, S(1) / S(pairs.size()));
}

// One planned restoration: donor sample index in the batch plus the old
// (task, class) whose prototype is being synthesized.
struct RestorationPlan {
  int donor_index = -1;
  int old_task = -1;
  int old_class = -1;
};

template <typename S>
std::vector<RestorationPlan> plan_restorations(int batch_size, int count,
                                               const PrototypeStore<S>& store,
                                               std::mt19937_64& rng) {
  if (count < 1) throw RejectedInput("plan_restorations: count must be >= 1");
  std::vector<RestorationPlan> out;
  if (store.num_finalized() == 0) return out;  // t = 1: nothing to restore
  out.reserve(count);
  std::uniform_int_distribution<int> donor(0, batch_size - 1);
  for (int i = 0; i < count; ++i) {
    RestorationPlan p;
    p.donor_index = donor(rng);
    auto [t_old, k_old] = store.sample_old_class(rng);
    p.old_task = t_old;
    p.old_class = k_old;
    out.push_back(p);
  }
  return out;
}

// restored = mu_old + (donor_embedding - mu_donor_class); the gradient flows
// through the donor embedding into the backbone.
template <typename S>
Var<S> restore_prototype_graph(Graph<S>& g, Var<S> donor_cls, const Mat<S>& mu_old,
                               const Mat<S>& mu_donor_class) {
  return g.add(donor_cls, g.constant(Mat<S>(mu_old - mu_donor_class)));
}

template <typename S>
struct RestoredPrototype {
  Mat<S> embedding;  // 1 x d
  int label = -1;    // old class id
  int donor_index = -1;
};

// Value-level restoration over a batch of donor embeddings.
template <typename S>
std::vector<RestoredPrototype<S>> restore_prototypes(
    const std::vector<Mat<S>>& donor_cls, const std::vector<int>& donor_class_ids,
    const PrototypeStore<S>& store, int count, std::mt19937_64& rng) {
  std::vector<RestorationPlan> plans =
      plan_restorations<S>(static_cast<int>(donor_cls.size()), count, store, rng);
  std::vector<RestoredPrototype<S>> out;
  out.reserve(plans.size());
  for (const RestorationPlan& p : plans) {
    RestoredPrototype<S> r;
    r.donor_index = p.donor_index;
    r.label = p.old_class;
    const Mat<S>& mu_old = store.center(p.old_class);
    const Mat<S>& mu_cur = store.center(donor_class_ids[p.donor_index]);
    r.embedding = mu_old + (donor_cls[p.donor_index] - mu_cur);
    out.push_back(std::move(r));
  }
  return out;
}

// Cross entropy over real and restored embeddings jointly, averaged over the
// combined set. Labels are classifier row indices.
template <typename S>
Var<S> cil_loss_graph(Graph<S>& g, const std::vector<Var<S>>& embeddings,
                      const std::vector<int>& labels, Var<S> head_w, Var<S> head_b) {
  if (embeddings.empty()) throw RejectedInput("cil_loss: no embeddings");
  if (embeddings.size() != labels.size())
    throw RejectedInput("cil_loss: embedding/label count mismatch");
  Var<S> stacked = g.vstack(embeddings);
  Var<S> logits = g.add_rowvec(g.matmul_nt(stacked, head_w), head_b);
  return g.cross_entropy_mean(logits, labels);
}

}  // namespace vitcil
