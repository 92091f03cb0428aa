#include <doctest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "vitcil/model.hpp"

using namespace vitcil;
using testutil::random_mat;

namespace {

ModelConfig tiny_config(int image = 4, int patch = 2, int dim = 4, int heads = 2, int enc = 1,
                        int dec = 1, int channels = 1) {
  ModelConfig cfg;
  cfg.image_size = image;
  cfg.patch_size = patch;
  cfg.channels = channels;
  cfg.embed_dim = dim;
  cfg.num_heads = heads;
  cfg.num_encoder_blocks = enc;
  cfg.num_decoder_blocks = dec;
  cfg.num_classes_initial = 3;
  return cfg;
}

Image<double> random_image(const ModelConfig& cfg, std::mt19937_64& rng) {
  Image<double> img = make_image<double>(cfg.image_size, cfg.image_size, cfg.channels);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& p : img.pixels) p = dist(rng);
  return img;
}

// Independent plain-loop re-implementation of the forward pass: patch
// projection + positions, pre-norm encoder blocks over [CLS]+patches, final
// norm, decoder cross-attention on [CLS], final [CLS] norm. No tape involved.
struct Trace {
  Mat<double> patch_tokens;
  Mat<double> cls_token;
};

Mat<double> trace_ln(const Mat<double>& x, const Mat<double>& gamma, const Mat<double>& beta) {
  Mat<double> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mu = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) mu += x(r, c);
    mu /= x.cols();
    double var = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
    var /= x.cols();
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      y(r, c) = gamma(0, c) * (x(r, c) - mu) / std::sqrt(var + 1e-5) + beta(0, c);
  }
  return y;
}

Mat<double> trace_attention(const ModelConfig& cfg, const Mat<double>& q_rows,
                            const Mat<double>& kv_rows, const Mat<double>& wqkv,
                            const Mat<double>& bqkv, const Mat<double>& wo,
                            const Mat<double>& bo) {
  const int d = cfg.embed_dim;
  const int dh = cfg.head_dim();
  Mat<double> qkv_q = (q_rows * wqkv).rowwise() + bqkv.row(0);
  Mat<double> qkv_kv = (kv_rows * wqkv).rowwise() + bqkv.row(0);
  Mat<double> merged(q_rows.rows(), d);
  for (int h = 0; h < cfg.num_heads; ++h) {
    Mat<double> qh = qkv_q.middleCols(h * dh, dh);
    Mat<double> kh = qkv_kv.middleCols(d + h * dh, dh);
    Mat<double> vh = qkv_kv.middleCols(2 * d + h * dh, dh);
    Mat<double> scores = qh * kh.transpose() / std::sqrt(static_cast<double>(dh));
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
      double mx = scores.row(r).maxCoeff();
      double z = 0;
      for (Eigen::Index c = 0; c < scores.cols(); ++c) z += std::exp(scores(r, c) - mx);
      for (Eigen::Index c = 0; c < scores.cols(); ++c)
        scores(r, c) = std::exp(scores(r, c) - mx) / z;
    }
    merged.middleCols(h * dh, dh) = scores * vh;
  }
  return (merged * wo).rowwise() + bo.row(0);
}

Mat<double> trace_mlp(const Mat<double>& x, const Mat<double>& w1, const Mat<double>& b1,
                      const Mat<double>& w2, const Mat<double>& b2) {
  Mat<double> h = (x * w1).rowwise() + b1.row(0);
  for (Eigen::Index i = 0; i < h.size(); ++i)
    h.data()[i] = 0.5 * h.data()[i] * (1.0 + std::erf(h.data()[i] / std::sqrt(2.0)));
  return (h * w2).rowwise() + b2.row(0);
}

Trace trace_forward(const VitModel<double>& model, const Image<double>& img) {
  const ModelConfig& cfg = model.config();
  const ParamSet<double>& p = model.params();
  const int n = cfg.num_patches();
  const int k = cfg.patch_size;
  const int grid = cfg.patch_grid();

  Mat<double> patches(n, cfg.patch_dim());
  for (int py = 0; py < grid; ++py)
    for (int px = 0; px < grid; ++px) {
      int idx = 0;
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx)
          for (int ch = 0; ch < cfg.channels; ++ch)
            patches(py * grid + px, idx++) = img.at(py * k + dy, px * k + dx, ch);
    }

  Mat<double> e =
      (patches * p.value("patch_embed.weight")).rowwise() + p.value("patch_embed.bias").row(0);
  e += p.value("pos_embed");
  Mat<double> tokens(n + 1, cfg.embed_dim);
  tokens.row(0) = p.value("cls_token").row(0);
  tokens.bottomRows(n) = e;

  for (int b = 0; b < cfg.num_encoder_blocks; ++b) {
    std::string pre = "encoder." + std::to_string(b);
    Mat<double> h = trace_ln(tokens, p.value(pre + ".ln1.gamma"), p.value(pre + ".ln1.beta"));
    tokens += trace_attention(cfg, h, h, p.value(pre + ".attn.qkv_weight"),
                              p.value(pre + ".attn.qkv_bias"), p.value(pre + ".attn.out_weight"),
                              p.value(pre + ".attn.out_bias"));
    Mat<double> h2 = trace_ln(tokens, p.value(pre + ".ln2.gamma"), p.value(pre + ".ln2.beta"));
    tokens += trace_mlp(h2, p.value(pre + ".mlp.fc1_weight"), p.value(pre + ".mlp.fc1_bias"),
                        p.value(pre + ".mlp.fc2_weight"), p.value(pre + ".mlp.fc2_bias"));
  }
  tokens = trace_ln(tokens, p.value("encoder_norm.gamma"), p.value("encoder_norm.beta"));

  Trace out;
  out.patch_tokens = tokens.bottomRows(n);
  Mat<double> c = tokens.topRows(1);
  for (int b = 0; b < cfg.num_decoder_blocks; ++b) {
    std::string pre = "decoder." + std::to_string(b);
    Mat<double> cq = trace_ln(c, p.value(pre + ".ln1.gamma"), p.value(pre + ".ln1.beta"));
    Mat<double> pk = trace_ln(out.patch_tokens, p.value(pre + ".ln1.gamma"),
                              p.value(pre + ".ln1.beta"));
    c += trace_attention(cfg, cq, pk, p.value(pre + ".attn.qkv_weight"),
                         p.value(pre + ".attn.qkv_bias"), p.value(pre + ".attn.out_weight"),
                         p.value(pre + ".attn.out_bias"));
    Mat<double> h2 = trace_ln(c, p.value(pre + ".ln2.gamma"), p.value(pre + ".ln2.beta"));
    c += trace_mlp(h2, p.value(pre + ".mlp.fc1_weight"), p.value(pre + ".mlp.fc1_bias"),
                   p.value(pre + ".mlp.fc2_weight"), p.value(pre + ".mlp.fc2_bias"));
  }
  out.cls_token = trace_ln(c, p.value("cls_norm.gamma"), p.value("cls_norm.beta"));
  return out;
}

}  // namespace

TEST_CASE("patchify: 4x4 single-channel with patch 2") {
  ModelConfig cfg = tiny_config();
  Image<double> img = make_image<double>(4, 4, 1);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) img.at(y, x, 0) = y * 4 + x;
  Mat<double> p = patchify(img, cfg);
  CHECK(p.rows() == 4);
  CHECK(p.cols() == 4);
  // patch 0 is the top-left 2x2 block in row-major pixel order
  CHECK(p(0, 0) == 0.0);
  CHECK(p(0, 1) == 1.0);
  CHECK(p(0, 2) == 4.0);
  CHECK(p(0, 3) == 5.0);
  // patch 3 is the bottom-right block
  CHECK(p(3, 0) == 10.0);
  CHECK(p(3, 3) == 15.0);
}

TEST_CASE("patchify: 2x2 image with patch 2 is the identity case") {
  ModelConfig cfg = tiny_config(2, 2);
  Image<double> img = make_image<double>(2, 2, 1);
  img.at(0, 0, 0) = 1;
  img.at(0, 1, 0) = 2;
  img.at(1, 0, 0) = 3;
  img.at(1, 1, 0) = 4;
  Mat<double> p = patchify(img, cfg);
  CHECK(p.rows() == 1);
  CHECK(p(0, 0) == 1.0);
  CHECK(p(0, 1) == 2.0);
  CHECK(p(0, 2) == 3.0);
  CHECK(p(0, 3) == 4.0);
}

TEST_CASE("patchify: 32x32x3 round-trips through reassembly") {
  ModelConfig cfg = tiny_config(32, 4, 12, 2, 1, 1, 3);
  std::mt19937_64 rng(5);
  Image<double> img = random_image(cfg, rng);
  Mat<double> p = patchify(img, cfg);
  CHECK(p.rows() == 64);
  CHECK(p.cols() == 48);
  // reassembly oracle: scatter patches back and compare every pixel
  Image<double> rebuilt = make_image<double>(32, 32, 3);
  const int grid = 8, k = 4;
  for (int py = 0; py < grid; ++py)
    for (int px = 0; px < grid; ++px) {
      int idx = 0;
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx)
          for (int ch = 0; ch < 3; ++ch)
            rebuilt.at(py * k + dy, px * k + dx, ch) = p(py * grid + px, idx++);
    }
  for (size_t i = 0; i < img.pixels.size(); ++i) CHECK(rebuilt.pixels[i] == img.pixels[i]);
}

TEST_CASE("patchify: dimension mismatch is rejected") {
  ModelConfig cfg = tiny_config();
  Image<double> img = make_image<double>(6, 4, 1);
  CHECK_THROWS_AS(patchify(img, cfg), RejectedInput);
}

TEST_CASE("config invariants") {
  ModelConfig cfg = tiny_config();
  cfg.patch_size = 3;
  CHECK_THROWS_AS(cfg.validate(), RejectedInput);
  cfg = tiny_config();
  cfg.num_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), RejectedInput);
  // paper-scale values are representable
  ModelConfig paper;
  CHECK(paper.embed_dim == 384);
  CHECK(paper.num_heads == 12);
  CHECK(paper.num_encoder_blocks == 5);
  CHECK(paper.num_decoder_blocks == 1);
  paper.num_classes_initial = 50;
  paper.validate();
}

TEST_CASE("forward: deterministic for identical inputs") {
  ModelConfig cfg = tiny_config(4, 2, 8, 2, 2, 1);
  VitModel<double> model(cfg, 99);
  std::mt19937_64 rng(7);
  Image<double> img = random_image(cfg, rng);
  TokenSet<double> a = model.forward_infer(img);
  TokenSet<double> b = model.forward_infer(img);
  CHECK(a.patch_tokens == b.patch_tokens);
  CHECK(a.cls_token == b.cls_token);
  CHECK(a.patch_tokens.rows() == cfg.num_patches());
  CHECK(a.cls_token.rows() == 1);
  CHECK(a.cls_token.cols() == cfg.embed_dim);
}

TEST_CASE("forward: matches the independent scalar trace") {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    ModelConfig cfg = tiny_config(4, 2, 4, 2, 1, 1);
    VitModel<double> model(cfg, seed);
    std::mt19937_64 rng(seed + 50);
    Image<double> img = random_image(cfg, rng);
    TokenSet<double> got = model.forward_infer(img);
    Trace want = trace_forward(model, img);
    CHECK((got.patch_tokens - want.patch_tokens).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((got.cls_token - want.cls_token).cwiseAbs().maxCoeff() < 1e-10);
  }
  // two blocks as well
  ModelConfig cfg = tiny_config(6, 2, 8, 2, 2, 1);
  VitModel<double> model(cfg, 17);
  std::mt19937_64 rng(18);
  Image<double> img = random_image(cfg, rng);
  TokenSet<double> got = model.forward_infer(img);
  Trace want = trace_forward(model, img);
  CHECK((got.patch_tokens - want.patch_tokens).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((got.cls_token - want.cls_token).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("forward: zero patch projection makes cls independent of the image") {
  ModelConfig cfg = tiny_config(4, 2, 4, 2, 1, 1);
  VitModel<double> model(cfg, 3);
  model.params().value("patch_embed.weight").setZero();
  model.params().value("patch_embed.bias").setZero();
  model.params().value("pos_embed").setZero();
  model.params().value("cls_token").setZero();
  Image<double> zero = make_image<double>(4, 4, 1);
  std::mt19937_64 rng(4);
  Image<double> other = random_image(cfg, rng);
  TokenSet<double> a = model.forward_infer(zero);
  TokenSet<double> b = model.forward_infer(other);
  CHECK((a.cls_token - b.cls_token).cwiseAbs().maxCoeff() == 0.0);
  // and the hand-stepped trace agrees on the constant
  Trace want = trace_forward(model, zero);
  CHECK((a.cls_token - want.cls_token).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward: cls jacobian w.r.t. a patch projection weight matches finite differences") {
  ModelConfig cfg = tiny_config(4, 2, 8, 2, 2, 1);
  VitModel<double> model(cfg, 23);
  std::mt19937_64 rng(29);
  testutil::randomize_params<double>(model, rng);
  Image<double> img = random_image(cfg, rng);
  const int wi = 1, wj = 3;  // one element of patch_embed.weight

  for (int out = 0; out < cfg.embed_dim; ++out) {
    Graph<double> g;
    BoundModel<double> bound = model.bind(g, true);
    ForwardVars<double> fv = model.forward(g, bound, img);
    Var<double> probe = g.slice_cols(fv.cls_token, out, 1);
    g.backward(probe);
    double bp = g.grad(bound.backbone[model.params().index_of("patch_embed.weight")])(wi, wj);

    // fourth-order central stencil at the pinned step, to keep truncation
    // error below the comparison tolerance
    const double h = 1e-3;
    double& w = model.params().value("patch_embed.weight")(wi, wj);
    double orig = w;
    auto eval = [&](double x) {
      w = x;
      double v = model.forward_infer(img).cls_token(0, out);
      w = orig;
      return v;
    };
    double fd = (-eval(orig + 2 * h) + 8 * eval(orig + h) - 8 * eval(orig - h) +
                 eval(orig - 2 * h)) /
                (12 * h);
    double err = std::abs(fd - bp) / std::max({std::abs(fd), std::abs(bp), 1e-8});
    CHECK(err < 1e-4);
  }
}

TEST_CASE("forward: non-finite activations raise a numerical failure naming the layer") {
  ModelConfig cfg = tiny_config(4, 2, 4, 2, 2, 1);
  VitModel<double> model(cfg, 31);
  model.params().value("encoder.1.mlp.fc2_weight")(0, 0) =
      std::numeric_limits<double>::quiet_NaN();
  Image<double> img = make_image<double>(4, 4, 1);
  try {
    model.forward_infer(img);
    FAIL("expected NumericalFailure");
  } catch (const NumericalFailure& e) {
    CHECK(std::string(e.what()).find("encoder block 1") != std::string::npos);
  }
}

TEST_CASE("shape law: patch token count equals (image_size/patch_size)^2") {
  for (int image : {4, 8, 16}) {
    for (int patch : {2, 4}) {
      if (image % patch != 0) continue;
      ModelConfig cfg = tiny_config(image, patch, 8, 2, 1, 1);
      VitModel<double> model(cfg, 1);
      Image<double> img = make_image<double>(image, image, 1);
      TokenSet<double> t = model.forward_infer(img);
      CHECK(t.patch_tokens.rows() == (image / patch) * (image / patch));
    }
  }
}

TEST_CASE("classify: zero head gives the uniform distribution") {
  ClassifierHead<double> head = make_head<double>(3, 4);
  Mat<double> emb = Mat<double>::Ones(1, 4);
  Mat<double> p = classify(emb, head);
  for (int c = 0; c < 3; ++c) CHECK(p(0, c) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("classify: bias ln2 against zero weights gives [2/3, 1/3]") {
  ClassifierHead<double> head = make_head<double>(2, 4);
  head.bias(0, 0) = std::log(2.0);
  Mat<double> emb = Mat<double>::Ones(1, 4);
  Mat<double> p = classify(emb, head);
  CHECK(p(0, 0) == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK(p(0, 1) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("classify: random head matches an independent softmax recomputation") {
  std::mt19937_64 rng(41);
  ClassifierHead<double> head;
  head.weight = random_mat(5, 8, rng);
  head.bias = random_mat(1, 5, rng);
  Mat<double> emb = random_mat(1, 8, rng);
  Mat<double> p = classify(emb, head);
  double sum = 0.0;
  std::vector<double> logits(5);
  for (int c = 0; c < 5; ++c) {
    logits[c] = head.bias(0, c);
    for (int j = 0; j < 8; ++j) logits[c] += head.weight(c, j) * emb(0, j);
  }
  double z = 0;
  for (int c = 0; c < 5; ++c) z += std::exp(logits[c]);
  for (int c = 0; c < 5; ++c) {
    CHECK(p(0, c) == doctest::Approx(std::exp(logits[c]) / z).epsilon(1e-6));
    sum += p(0, c);
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  Mat<double> bad = random_mat(1, 7, rng);
  CHECK_THROWS_AS(classify(bad, head), RejectedInput);
}

TEST_CASE("grow_classifier: preserves old rows bit-identically") {
  std::mt19937_64 rng(43);
  ClassifierHead<double> head;
  head.weight = random_mat(5, 6, rng);
  head.bias = random_mat(1, 5, rng);
  ClassifierHead<double> grown = grow_classifier(head, 5);
  CHECK(grown.num_classes() == 10);
  CHECK(grown.weight.topRows(5) == head.weight);
  CHECK(grown.bias.leftCols(5) == head.bias);
  CHECK(grown.weight.bottomRows(5).isZero());
  CHECK_THROWS_AS(grow_classifier(head, 0), RejectedInput);

  ClassifierHead<double> twice = grow_classifier(grow_classifier(head, 5), 5);
  ClassifierHead<double> once = grow_classifier(head, 10);
  CHECK(twice.weight.topRows(5) == once.weight.topRows(5));
  CHECK(twice.bias.leftCols(5) == once.bias.leftCols(5));
}

TEST_CASE("grow_classifier: old-class logits unchanged for a fixed input") {
  std::mt19937_64 rng(47);
  ClassifierHead<double> head;
  head.weight = random_mat(4, 8, rng);
  head.bias = random_mat(1, 4, rng);
  Mat<double> emb = random_mat(1, 8, rng);
  Mat<double> before = head_logits(emb, head);
  ClassifierHead<double> grown = grow_classifier(head, 3);
  Mat<double> after = head_logits(emb, grown);
  for (int c = 0; c < 4; ++c) CHECK(after(0, c) == before(0, c));
  for (int c = 4; c < 7; ++c) CHECK(after(0, c) == 0.0);
}
