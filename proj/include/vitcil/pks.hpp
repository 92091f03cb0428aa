#pragma once

#include <string>
#include <vector>

#include "vitcil/errors.hpp"
#include "vitcil/graph.hpp"
#include "vitcil/model.hpp"

namespace vitcil {

enum class WeightMode { inverse_distance, uniform, distance };

inline WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "inverse_distance") return WeightMode::inverse_distance;
  if (s == "uniform") return WeightMode::uniform;
  if (s == "distance") return WeightMode::distance;
  throw ConfigError("unknown pks.mode: " + s);
}

inline std::string to_string(WeightMode m) {
  switch (m) {
    case WeightMode::inverse_distance: return "inverse_distance";
    case WeightMode::uniform: return "uniform";
    case WeightMode::distance: return "distance";
  }
  return "?";
}

// Per-patch distillation weights. raw holds W_i, normalized holds w_i after
// division by max(W). Weights are data, not graph nodes: no gradient flows
// through them into the selection loss.
template <typename S>
struct PatchWeights {
  Mat<S> raw;         // N x 1
  Mat<S> normalized;  // N x 1
  WeightMode mode = WeightMode::inverse_distance;
};

// inverse_distance: W_i = 1 / (||cls - patch_i|| + eps), then w = W / max(W).
// uniform: all w_i = 1. distance: W_i = ||cls - patch_i||, same normalization.
template <typename S>
PatchWeights<S> compute_patch_weights(const TokenSet<S>& tokens, WeightMode mode, S epsilon) {
  if (epsilon <= S(0)) throw RejectedInput("compute_patch_weights: epsilon must be > 0");
  if (tokens.cls_token.rows() != 1 || tokens.cls_token.cols() != tokens.patch_tokens.cols())
    throw RejectedInput("compute_patch_weights: cls/patch dimension mismatch");
  const Eigen::Index n = tokens.patch_tokens.rows();
  PatchWeights<S> w;
  w.mode = mode;
  w.raw.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    S dist = (tokens.cls_token.row(0) - tokens.patch_tokens.row(i)).norm();
    switch (mode) {
      case WeightMode::inverse_distance: w.raw(i, 0) = S(1) / (dist + epsilon); break;
      case WeightMode::uniform: w.raw(i, 0) = S(1); break;
      case WeightMode::distance: w.raw(i, 0) = dist; break;
    }
  }
  S mx = w.raw.maxCoeff();
  // distance mode can legitimately produce an all-zero vector.
  w.normalized = mx > S(0) ? Mat<S>(w.raw / mx) : w.raw;
  return w;
}

// Sum_i w_i ||P_t,i - P_{t-1},i|| + ||cls_t - cls_{t-1}||. Old tokens and
// weights enter as constants; the gradient reaches only the current tokens.
template <typename S>
Var<S> pks_loss_graph(Graph<S>& g, Var<S> patches_cur, Var<S> cls_cur,
                      const Mat<S>& patches_old, const Mat<S>& cls_old,
                      const PatchWeights<S>& weights) {
  const Mat<S>& pc = g.value(patches_cur);
  if (pc.rows() != patches_old.rows() || pc.cols() != patches_old.cols())
    throw RejectedInput("pks_loss: patch token shape mismatch");
  if (g.value(cls_cur).cols() != cls_old.cols())
    throw RejectedInput("pks_loss: cls token shape mismatch");
  if (weights.normalized.rows() != pc.rows())
    throw RejectedInput("pks_loss: weight count != patch count");
  Var<S> diffs = g.sub(patches_cur, g.constant(patches_old));
  Var<S> norms = g.row_norms(diffs);
  Var<S> weighted = g.sum_all(g.mul_elem(norms, g.constant(weights.normalized)));
  Var<S> cls_term = g.sum_all(g.row_norms(g.sub(cls_cur, g.constant(cls_old))));
  return g.add(weighted, cls_term);
}

// Value-level form of the selection loss for inference-side consumers.
template <typename S>
S pks_loss(const TokenSet<S>& current, const TokenSet<S>& old, const PatchWeights<S>& weights) {
  Graph<S> g;
  Var<S> pc = g.constant(current.patch_tokens);
  Var<S> cc = g.constant(current.cls_token);
  return g.value(pks_loss_graph(g, pc, cc, old.patch_tokens, old.cls_token, weights))(0, 0);
}

}  // namespace vitcil
