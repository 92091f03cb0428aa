#include <doctest.h>

#include <filesystem>
#include <random>

#include "test_util.hpp"
#include "vitcil/evalkit.hpp"

using namespace vitcil;

namespace {

AccuracyMatrix random_matrix(int num_tasks, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AccuracyMatrix m(num_tasks);
  for (int r = 0; r < num_tasks; ++r)
    for (int c = 0; c <= r; ++c) m.set(r, c, u(rng));
  return m;
}

// brute-force double-loop recomputation of the forgetting measure
ForgettingResult forgetting_oracle(const AccuracyMatrix& m, int k) {
  ForgettingResult out;
  double sum = 0.0;
  for (int i = 0; i < k - 1; ++i) {
    double best = -1e300;
    for (int t = i; t <= k - 2; ++t) {
      double v = m.at(t, i) - m.at(k - 1, i);
      if (v > best) best = v;
    }
    out.per_task.push_back(best);
    sum += best;
  }
  out.average = sum / (k - 1);
  return out;
}

}  // namespace

TEST_CASE("avg_accuracy examples") {
  CHECK(avg_accuracy({0.9, 0.7}) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(avg_accuracy({0.5}) == 0.5);
  CHECK(avg_accuracy({0.6831, 0.7013, 0.6686}) ==
        doctest::Approx((0.6831 + 0.7013 + 0.6686) / 3.0).epsilon(1e-12));
  CHECK(avg_accuracy({0.6831, 0.7013, 0.6686}) == doctest::Approx(0.684333333).epsilon(1e-6));
  CHECK_THROWS_AS(avg_accuracy({}), RejectedInput);
}

TEST_CASE("avg_accuracy bounded by min and max") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> accs;
    for (int i = 0; i < 6; ++i) accs.push_back(u(rng));
    double avg = avg_accuracy(accs);
    CHECK(avg >= *std::min_element(accs.begin(), accs.end()) - 1e-15);
    CHECK(avg <= *std::max_element(accs.begin(), accs.end()) + 1e-15);
  }
}

TEST_CASE("forgetting: direct substitution example") {
  AccuracyMatrix m(2);
  m.set(0, 0, 0.8);
  m.set(1, 0, 0.6);
  m.set(1, 1, 0.9);
  ForgettingResult f = forgetting(m, 2);
  CHECK(f.per_task.size() == 1);
  CHECK(f.per_task[0] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(f.average == doctest::Approx(0.2).epsilon(1e-12));
  CHECK_THROWS_AS(forgetting(m, 1), RejectedInput);
  CHECK_THROWS_AS(forgetting(m, 3), RejectedInput);
}

TEST_CASE("forgetting: improvement yields negative values (no clamping)") {
  AccuracyMatrix m(2);
  m.set(0, 0, 0.5);
  m.set(1, 0, 0.7);  // task 1 improved after task 2
  m.set(1, 1, 0.6);
  ForgettingResult f = forgetting(m, 2);
  CHECK(f.per_task[0] == doctest::Approx(-0.2).epsilon(1e-12));
  CHECK(f.average < 0.0);
}

TEST_CASE("forgetting: random matrices match the brute-force oracle exactly") {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    int num_tasks = 4;
    AccuracyMatrix m = random_matrix(num_tasks, rng);
    for (int k = 2; k <= num_tasks; ++k) {
      ForgettingResult got = forgetting(m, k);
      ForgettingResult want = forgetting_oracle(m, k);
      REQUIRE(got.per_task.size() == want.per_task.size());
      for (size_t i = 0; i < got.per_task.size(); ++i)
        CHECK(got.per_task[i] == want.per_task[i]);
      CHECK(got.average == want.average);
    }
  }
}

TEST_CASE("forgetting: invariant under permutation of prior rows in a column") {
  std::mt19937_64 rng(34);
  const int num_tasks = 5, k = 5;
  AccuracyMatrix m = random_matrix(num_tasks, rng);
  ForgettingResult base = forgetting(m, k);
  // permute the prior-row values of column 0 (rows 0..k-2 all contain task 0)
  std::vector<double> vals;
  for (int t = 0; t <= k - 2; ++t) vals.push_back(m.at(t, 0));
  std::shuffle(vals.begin(), vals.end(), rng);
  AccuracyMatrix shuffled = m;
  for (int t = 0; t <= k - 2; ++t) shuffled.set(t, 0, vals[t]);
  ForgettingResult after = forgetting(shuffled, k);
  CHECK(after.per_task[0] == base.per_task[0]);
}

TEST_CASE("accuracy matrix: CSV round-trip reproduces metrics bit-for-bit") {
  namespace fs = std::filesystem;
  std::mt19937_64 rng(35);
  AccuracyMatrix m = random_matrix(6, rng);
  fs::path path = fs::temp_directory_path() / "vitcil_matrix_test.csv";
  m.save_csv(path.string());
  AccuracyMatrix loaded = AccuracyMatrix::load_csv(path.string());
  REQUIRE(loaded.num_tasks() == 6);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c <= r; ++c) CHECK(std::abs(loaded.at(r, c) - m.at(r, c)) < 1e-12);
  // metrics recomputed from the persisted matrix agree to the same precision
  ForgettingResult a = forgetting(m, 6);
  ForgettingResult b = forgetting(loaded, 6);
  for (size_t i = 0; i < a.per_task.size(); ++i)
    CHECK(std::abs(a.per_task[i] - b.per_task[i]) < 2e-12);
  // a second save is byte-identical
  fs::path path2 = fs::temp_directory_path() / "vitcil_matrix_test2.csv";
  loaded.save_csv(path2.string());
  std::ifstream f1(path.string()), f2(path2.string());
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  fs::remove(path);
  fs::remove(path2);
}

TEST_CASE("accuracy matrix: occupancy and range are enforced") {
  AccuracyMatrix m(3);
  CHECK_THROWS_AS(m.set(0, 1, 0.5), RejectedInput);  // upper triangle
  CHECK_THROWS_AS(m.set(1, 0, 1.5), RejectedInput);  // out of range
  CHECK_THROWS_AS(m.at(1, 0), RejectedInput);        // not filled
  m.set(1, 0, 0.5);
  CHECK(m.at(1, 0) == 0.5);
}

TEST_CASE("task_accuracy: constant class-0 predictor scores the class-0 share") {
  ModelConfig cfg;
  cfg.image_size = 4;
  cfg.channels = 1;
  cfg.patch_size = 2;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_encoder_blocks = 1;
  cfg.num_decoder_blocks = 1;
  cfg.num_classes_initial = 4;
  VitModel<float> model(cfg, 3);
  model.head().bias(0, 0) = 100.0f;  // always argmax to class 0

  std::vector<Image<float>> images;
  std::mt19937_64 rng(36);
  std::normal_distribution<float> dist(0.f, 1.f);
  for (int i = 0; i < 4; ++i) {
    Image<float> img = make_image<float>(4, 4, 1);
    for (float& p : img.pixels) p = dist(rng);
    images.push_back(img);
  }
  EvalGroup group;
  group.task_id = 0;
  group.sample_indices = {0, 1, 2, 3};
  group.head_labels = {0, 1, 2, 3};  // 25% are class 0
  TaskAccuracyResult res = task_accuracy(model, images, {group});
  CHECK(res.overall == 0.25);
  CHECK(res.correct == 1);
  CHECK(res.total == 4);

  EvalGroup bad = group;
  bad.head_labels = {0, 1, 2, 9};
  CHECK_THROWS_AS(task_accuracy(model, images, {bad}), RejectedInput);
}

TEST_CASE("task_accuracy: oracle head on separable embeddings reaches 1.0") {
  ModelConfig cfg;
  cfg.image_size = 4;
  cfg.channels = 1;
  cfg.patch_size = 2;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_encoder_blocks = 1;
  cfg.num_decoder_blocks = 1;
  cfg.num_classes_initial = 3;
  VitModel<float> model(cfg, 5);
  std::vector<Image<float>> images;
  std::mt19937_64 rng(37);
  std::normal_distribution<float> dist(0.f, 1.f);
  for (int i = 0; i < 3; ++i) {
    Image<float> img = make_image<float>(4, 4, 1);
    for (float& p : img.pixels) p = dist(rng);
    images.push_back(img);
  }
  // oracle head: rows point at each sample's own embedding
  for (int i = 0; i < 3; ++i) {
    Mat<float> cls = model.forward_infer(images[i]).cls_token;
    model.head().weight.row(i) = 50.0f * cls.row(0) / cls.row(0).squaredNorm();
    model.head().bias(0, i) = 0.0f;
  }
  EvalGroup group;
  group.task_id = 0;
  group.sample_indices = {0, 1, 2};
  group.head_labels = {0, 1, 2};
  TaskAccuracyResult res = task_accuracy(model, images, {group});
  CHECK(res.overall == 1.0);
}

TEST_CASE("task_accuracy: counts match an independent recount over 100 samples") {
  ModelConfig cfg;
  cfg.image_size = 4;
  cfg.channels = 1;
  cfg.patch_size = 2;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_encoder_blocks = 1;
  cfg.num_decoder_blocks = 1;
  cfg.num_classes_initial = 5;
  VitModel<float> model(cfg, 7);
  std::mt19937_64 rng(38);
  testutil::randomize_params<float>(model, rng);

  std::vector<Image<float>> images;
  std::normal_distribution<float> dist(0.f, 1.f);
  for (int i = 0; i < 100; ++i) {
    Image<float> img = make_image<float>(4, 4, 1);
    for (float& p : img.pixels) p = dist(rng);
    images.push_back(img);
  }
  std::vector<EvalGroup> groups(2);
  for (int i = 0; i < 100; ++i) {
    EvalGroup& gr = groups[i < 60 ? 0 : 1];
    gr.sample_indices.push_back(i);
    gr.head_labels.push_back(i % 5);
  }
  groups[0].task_id = 0;
  groups[1].task_id = 1;
  TaskAccuracyResult res = task_accuracy(model, images, groups);

  // independent recount: classify each sample directly
  long correct = 0;
  for (int i = 0; i < 100; ++i) {
    Mat<float> probs = classify(model.forward_infer(images[i]).cls_token, model.head());
    Eigen::Index pred;
    probs.row(0).maxCoeff(&pred);
    if (static_cast<int>(pred) == i % 5) ++correct;
  }
  CHECK(res.correct == correct);
  CHECK(res.overall == static_cast<double>(correct) / 100.0);
}
