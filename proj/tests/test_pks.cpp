#include <doctest.h>

#include <random>

#include "test_util.hpp"
#include "vitcil/pks.hpp"

using namespace vitcil;
using testutil::random_mat;

namespace {

// tokens with prescribed patch-to-cls distances (cls at the origin)
TokenSet<double> tokens_at_distances(const std::vector<double>& dists, int dim) {
  TokenSet<double> t;
  t.cls_token = Mat<double>::Zero(1, dim);
  t.patch_tokens = Mat<double>::Zero(static_cast<int>(dists.size()), dim);
  for (size_t i = 0; i < dists.size(); ++i) t.patch_tokens(static_cast<int>(i), 0) = dists[i];
  return t;
}

TokenSet<double> random_tokens(int n, int dim, std::mt19937_64& rng) {
  TokenSet<double> t;
  t.patch_tokens = random_mat(n, dim, rng);
  t.cls_token = random_mat(1, dim, rng);
  return t;
}

// independent scalar-loop evaluation of the selection loss
double pks_oracle(const TokenSet<double>& cur, const TokenSet<double>& old,
                  const Mat<double>& w) {
  double loss = 0.0;
  for (Eigen::Index i = 0; i < cur.patch_tokens.rows(); ++i) {
    double sq = 0.0;
    for (Eigen::Index j = 0; j < cur.patch_tokens.cols(); ++j) {
      double d = cur.patch_tokens(i, j) - old.patch_tokens(i, j);
      sq += d * d;
    }
    loss += w(i, 0) * std::sqrt(sq);
  }
  double sq = 0.0;
  for (Eigen::Index j = 0; j < cur.cls_token.cols(); ++j) {
    double d = cur.cls_token(0, j) - old.cls_token(0, j);
    sq += d * d;
  }
  return loss + std::sqrt(sq);
}

}  // namespace

TEST_CASE("patch weights: all patches at the cls token give all-ones weights") {
  TokenSet<double> t;
  t.cls_token = Mat<double>::Constant(1, 4, 0.3);
  t.patch_tokens = Mat<double>::Constant(5, 4, 0.3);
  PatchWeights<double> w = compute_patch_weights(t, WeightMode::inverse_distance, 1e-8);
  for (int i = 0; i < 5; ++i) {
    CHECK(w.raw(i, 0) == doctest::Approx(1e8).epsilon(1e-9));
    CHECK(w.normalized(i, 0) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("patch weights: closed form for two patches at distances 0 and d") {
  const double d = 2.5, eps = 1e-8;
  PatchWeights<double> w =
      compute_patch_weights(tokens_at_distances({0.0, d}, 3), WeightMode::inverse_distance, eps);
  CHECK(w.raw(0, 0) == doctest::Approx(1.0 / eps));
  CHECK(w.raw(1, 0) == doctest::Approx(1.0 / (d + eps)));
  CHECK(w.normalized(0, 0) == doctest::Approx(1.0));
  CHECK(w.normalized(1, 0) == doctest::Approx(eps / (d + eps)).epsilon(1e-9));
}

TEST_CASE("patch weights: four distances against a 64-bit oracle") {
  std::vector<double> dists = {1.0, 2.0, 4.0, 0.5};
  PatchWeights<double> w =
      compute_patch_weights(tokens_at_distances(dists, 4), WeightMode::inverse_distance, 1e-8);
  // oracle: direct evaluation of the weight formula in double
  std::vector<double> raw(4), expect(4);
  double mx = 0;
  for (int i = 0; i < 4; ++i) {
    raw[i] = 1.0 / (dists[i] + 1e-8);
    mx = std::max(mx, raw[i]);
  }
  for (int i = 0; i < 4; ++i) expect[i] = raw[i] / mx;
  for (int i = 0; i < 4; ++i) CHECK(w.normalized(i, 0) == doctest::Approx(expect[i]).epsilon(1e-12));
  CHECK(w.normalized(0, 0) == doctest::Approx(0.5).epsilon(1e-7));
  CHECK(w.normalized(1, 0) == doctest::Approx(0.25).epsilon(1e-7));
  CHECK(w.normalized(2, 0) == doctest::Approx(0.125).epsilon(1e-7));
  CHECK(w.normalized(3, 0) == doctest::Approx(1.0).epsilon(1e-7));
}

TEST_CASE("patch weights: uniform and distance modes") {
  std::vector<double> dists = {1.0, 3.0, 0.0};
  PatchWeights<double> wu =
      compute_patch_weights(tokens_at_distances(dists, 3), WeightMode::uniform, 1e-8);
  for (int i = 0; i < 3; ++i) CHECK(wu.normalized(i, 0) == 1.0);

  PatchWeights<double> wd =
      compute_patch_weights(tokens_at_distances(dists, 3), WeightMode::distance, 1e-8);
  CHECK(wd.raw(0, 0) == doctest::Approx(1.0));
  CHECK(wd.normalized(0, 0) == doctest::Approx(1.0 / 3.0));
  CHECK(wd.normalized(1, 0) == doctest::Approx(1.0));
  CHECK(wd.normalized(2, 0) == doctest::Approx(0.0));

  CHECK_THROWS_AS(
      compute_patch_weights(tokens_at_distances(dists, 3), WeightMode::inverse_distance, 0.0),
      RejectedInput);
}

TEST_CASE("patch weights: inverse mode is monotone non-increasing in distance") {
  std::mt19937_64 rng(71);
  for (int trial = 0; trial < 20; ++trial) {
    TokenSet<double> t = random_tokens(8, 6, rng);
    PatchWeights<double> w = compute_patch_weights(t, WeightMode::inverse_distance, 1e-8);
    CHECK(w.normalized.maxCoeff() == doctest::Approx(1.0).epsilon(1e-12));
    for (int a = 0; a < 8; ++a)
      for (int b = 0; b < 8; ++b) {
        double da = (t.cls_token.row(0) - t.patch_tokens.row(a)).norm();
        double db = (t.cls_token.row(0) - t.patch_tokens.row(b)).norm();
        if (da < db) CHECK(w.normalized(a, 0) >= w.normalized(b, 0));
        CHECK(w.raw(a, 0) > 0.0);
        CHECK(w.normalized(a, 0) > 0.0);
        CHECK(w.normalized(a, 0) <= 1.0);
      }
  }
}

TEST_CASE("pks loss: identical token sets give zero") {
  std::mt19937_64 rng(73);
  TokenSet<double> t = random_tokens(4, 6, rng);
  PatchWeights<double> w = compute_patch_weights(t, WeightMode::inverse_distance, 1e-8);
  CHECK(pks_loss(t, t, w) == 0.0);
}

TEST_CASE("pks loss: only cls differing by norm c gives c") {
  std::mt19937_64 rng(74);
  TokenSet<double> cur = random_tokens(4, 6, rng);
  TokenSet<double> old = cur;
  Mat<double> delta = random_mat(1, 6, rng);
  old.cls_token = cur.cls_token + delta;
  PatchWeights<double> w = compute_patch_weights(cur, WeightMode::inverse_distance, 1e-8);
  CHECK(pks_loss(cur, old, w) == doctest::Approx(delta.row(0).norm()).epsilon(1e-12));
}

TEST_CASE("pks loss: hand-set N=2 d=2 case matches the per-patch summation oracle") {
  TokenSet<double> cur, old;
  cur.patch_tokens = Mat<double>(2, 2);
  cur.patch_tokens << 1.0, 2.0, -0.5, 0.25;
  cur.cls_token = Mat<double>(1, 2);
  cur.cls_token << 0.1, -0.3;
  old.patch_tokens = Mat<double>(2, 2);
  old.patch_tokens << 0.5, 1.0, 0.5, 0.5;
  old.cls_token = Mat<double>(1, 2);
  old.cls_token << -0.2, 0.4;
  PatchWeights<double> w;
  w.mode = WeightMode::inverse_distance;
  w.raw = Mat<double>(2, 1);
  w.raw << 0.5, 1.0;
  w.normalized = w.raw;
  double expect = 0.5 * std::hypot(0.5, 1.0) + 1.0 * std::hypot(-1.0, -0.25) +
                  std::hypot(0.3, -0.7);
  CHECK(pks_loss(cur, old, w) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(pks_loss(cur, old, w) == doctest::Approx(pks_oracle(cur, old, w.normalized)));
}

TEST_CASE("pks loss: shape mismatch is rejected") {
  std::mt19937_64 rng(75);
  TokenSet<double> cur = random_tokens(4, 6, rng);
  TokenSet<double> old = random_tokens(3, 6, rng);
  PatchWeights<double> w = compute_patch_weights(cur, WeightMode::inverse_distance, 1e-8);
  CHECK_THROWS_AS(pks_loss(cur, old, w), RejectedInput);
}

TEST_CASE("pks loss: non-negative on random inputs") {
  std::mt19937_64 rng(76);
  for (int trial = 0; trial < 50; ++trial) {
    TokenSet<double> cur = random_tokens(5, 4, rng);
    TokenSet<double> old = random_tokens(5, 4, rng);
    for (WeightMode mode :
         {WeightMode::inverse_distance, WeightMode::uniform, WeightMode::distance}) {
      PatchWeights<double> w = compute_patch_weights(cur, mode, 1e-8);
      CHECK(pks_loss(cur, old, w) >= 0.0);
    }
  }
}

TEST_CASE("pks loss: uniform mode reduces to unweighted token distillation") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    TokenSet<double> cur = random_tokens(6, 5, rng);
    TokenSet<double> old = random_tokens(6, 5, rng);
    PatchWeights<double> w = compute_patch_weights(cur, WeightMode::uniform, 1e-8);
    double vanilla = 0.0;
    for (int i = 0; i < 6; ++i)
      vanilla += (cur.patch_tokens.row(i) - old.patch_tokens.row(i)).norm();
    vanilla += (cur.cls_token.row(0) - old.cls_token.row(0)).norm();
    CHECK(pks_loss(cur, old, w) == doctest::Approx(vanilla).epsilon(1e-6));
  }
}

TEST_CASE("pks loss: gradient w.r.t. current tokens matches finite differences") {
  std::mt19937_64 rng(78);
  TokenSet<double> old = random_tokens(4, 8, rng);
  Mat<double> patches = random_mat(4, 8, rng);
  Mat<double> cls = random_mat(1, 8, rng);
  // weights pinned at the base point: the selection loss treats them as data
  TokenSet<double> base{patches, cls};
  PatchWeights<double> w = compute_patch_weights(base, WeightMode::inverse_distance, 1e-8);
  testutil::check_gradients(
      [&](Graph<double>& g, const std::vector<Var<double>>& v) {
        return pks_loss_graph(g, v[0], v[1], old.patch_tokens, old.cls_token, w);
      },
      {patches, cls}, 1e-4);
}
