#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "vitcil/errors.hpp"
#include "vitcil/graph.hpp"

namespace vitcil {

struct ModelConfig {
  int image_size = 32;
  int channels = 3;
  int patch_size = 4;
  int embed_dim = 384;
  int num_heads = 12;
  int num_encoder_blocks = 5;
  int num_decoder_blocks = 1;
  int num_classes_initial = 0;
  int mlp_ratio = 4;

  int num_patches() const {
    int g = image_size / patch_size;
    return g * g;
  }
  int patch_grid() const { return image_size / patch_size; }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int head_dim() const { return embed_dim / num_heads; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw RejectedInput("ModelConfig: image_size must be a positive multiple of patch_size");
    if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
      throw RejectedInput("ModelConfig: embed_dim must be a positive multiple of num_heads");
    if (channels <= 0) throw RejectedInput("ModelConfig: channels must be positive");
    if (num_encoder_blocks < 1 || num_decoder_blocks < 0)
      throw RejectedInput("ModelConfig: bad block counts");
    if (num_classes_initial < 0) throw RejectedInput("ModelConfig: bad initial class count");
    if (mlp_ratio < 1) throw RejectedInput("ModelConfig: bad mlp_ratio");
  }
};

template <typename S>
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<S> pixels;  // (y * width + x) * channels + ch

  S at(int y, int x, int ch) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + ch];
  }
  S& at(int y, int x, int ch) {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + ch];
  }
};

template <typename S>
Image<S> make_image(int h, int w, int c) {
  Image<S> img;
  img.height = h;
  img.width = w;
  img.channels = c;
  img.pixels.assign(static_cast<size_t>(h) * w * c, S(0));
  return img;
}

// Final-layer per-patch embeddings plus the [CLS] embedding.
template <typename S>
struct TokenSet {
  Mat<S> patch_tokens;  // N x d
  Mat<S> cls_token;     // 1 x d
};

// Non-overlapping row-major tiling; each patch flattened as (dy, dx, ch).
// Concatenating the rows in order reconstructs the image exactly.
template <typename S>
Mat<S> patchify(const Image<S>& img, const ModelConfig& cfg) {
  if (img.height != cfg.image_size || img.width != cfg.image_size ||
      img.channels != cfg.channels)
    throw RejectedInput("patchify: image dimensions do not match config");
  const int k = cfg.patch_size;
  const int grid = cfg.patch_grid();
  Mat<S> out(cfg.num_patches(), cfg.patch_dim());
  for (int py = 0; py < grid; ++py) {
    for (int px = 0; px < grid; ++px) {
      int p = py * grid + px;
      int idx = 0;
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx)
          for (int ch = 0; ch < cfg.channels; ++ch)
            out(p, idx++) = img.at(py * k + dy, px * k + dx, ch);
    }
  }
  return out;
}

// Linear classifier over class embeddings. Rows index classes in
// first-seen order; growth preserves existing rows bit-identically.
template <typename S>
struct ClassifierHead {
  Mat<S> weight;  // C x d
  Mat<S> bias;    // 1 x C

  int num_classes() const { return static_cast<int>(weight.rows()); }
  int dim() const { return static_cast<int>(weight.cols()); }
};

template <typename S>
ClassifierHead<S> make_head(int num_classes, int dim) {
  ClassifierHead<S> h;
  h.weight = Mat<S>::Zero(num_classes, dim);
  h.bias = Mat<S>::Zero(1, num_classes);
  return h;
}

// New rows are zero-initialized so fresh classes start at uniform
// relative logits and old-class logits are untouched.
template <typename S>
ClassifierHead<S> grow_classifier(const ClassifierHead<S>& head, int new_class_count) {
  if (new_class_count < 1) throw RejectedInput("grow_classifier: new_class_count must be >= 1");
  ClassifierHead<S> out;
  int old_c = head.num_classes();
  out.weight = Mat<S>::Zero(old_c + new_class_count, head.dim());
  out.bias = Mat<S>::Zero(1, old_c + new_class_count);
  if (old_c > 0) {
    out.weight.topRows(old_c) = head.weight;
    out.bias.leftCols(old_c) = head.bias;
  }
  return out;
}

template <typename S>
Mat<S> head_logits(const Mat<S>& embedding, const ClassifierHead<S>& head) {
  if (embedding.rows() != 1 || embedding.cols() != head.dim())
    throw RejectedInput("classify: embedding dimension does not match head");
  return embedding * head.weight.transpose() + head.bias;
}

// Softmax probabilities over all learned classes.
template <typename S>
Mat<S> classify(const Mat<S>& embedding, const ClassifierHead<S>& head) {
  Mat<S> logits = head_logits(embedding, head);
  S mx = logits.maxCoeff();
  Eigen::Array<S, 1, Eigen::Dynamic> e = (logits.array() - mx).exp();
  return (e / e.sum()).matrix();
}

// Named parameter tensors in a stable order (checkpoint + optimizer order).
template <typename S>
class ParamSet {
 public:
  int add(const std::string& name, int rows, int cols) {
    names_.push_back(name);
    values_.push_back(Mat<S>::Zero(rows, cols));
    index_[name] = static_cast<int>(values_.size()) - 1;
    return static_cast<int>(values_.size()) - 1;
  }
  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw RejectedInput("ParamSet: unknown tensor " + name);
    return it->second;
  }
  int size() const { return static_cast<int>(values_.size()); }
  const std::string& name(int i) const { return names_[i]; }
  Mat<S>& value(int i) { return values_[i]; }
  const Mat<S>& value(int i) const { return values_[i]; }
  Mat<S>& value(const std::string& name) { return values_[index_of(name)]; }
  const Mat<S>& value(const std::string& name) const { return values_[index_of(name)]; }

 private:
  std::vector<std::string> names_;
  std::vector<Mat<S>> values_;
  std::unordered_map<std::string, int> index_;
};

namespace detail {
struct BlockIdx {
  int ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};
}  // namespace detail

// Parameter nodes bound onto one tape; parallel to ParamSet order.
template <typename S>
struct BoundModel {
  std::vector<Var<S>> backbone;
  Var<S> head_w;
  Var<S> head_b;
};

template <typename S>
struct ForwardVars {
  Var<S> patch_tokens;  // N x d
  Var<S> cls_token;     // 1 x d
};

// Small pre-norm vision transformer. The encoder runs self-attention over
// [CLS] + patches; each decoder block refines [CLS] by cross-attending over
// the final patch tokens. Patch tokens reported by forward are the
// encoder-final (post-norm) embeddings, the decoder output is the [CLS]
// classification embedding.
template <typename S>
class VitModel {
 public:
  VitModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    build_layout();
    init_params(seed);
    head_ = make_head<S>(cfg_.num_classes_initial, cfg_.embed_dim);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamSet<S>& params() { return params_; }
  const ParamSet<S>& params() const { return params_; }
  ClassifierHead<S>& head() { return head_; }
  const ClassifierHead<S>& head() const { return head_; }

  void grow_head(int new_class_count) { head_ = grow_classifier(head_, new_class_count); }

  // Unified tensor enumeration: backbone tensors then head.weight, head.bias.
  int num_tensors() const { return params_.size() + 2; }
  std::string tensor_name(int i) const {
    if (i < params_.size()) return params_.name(i);
    return i == params_.size() ? "head.weight" : "head.bias";
  }
  Mat<S>& tensor_value(int i) {
    if (i < params_.size()) return params_.value(i);
    return i == params_.size() ? head_.weight : head_.bias;
  }
  const Mat<S>& tensor_value(int i) const {
    if (i < params_.size()) return params_.value(i);
    return i == params_.size() ? head_.weight : head_.bias;
  }

  BoundModel<S> bind(Graph<S>& g, bool requires_grad) const {
    BoundModel<S> b;
    b.backbone.reserve(params_.size());
    for (int i = 0; i < params_.size(); ++i)
      b.backbone.push_back(g.input(params_.value(i), requires_grad));
    b.head_w = g.input(head_.weight, requires_grad);
    b.head_b = g.input(head_.bias, requires_grad);
    return b;
  }

  ForwardVars<S> forward(Graph<S>& g, const BoundModel<S>& b, const Image<S>& img) const {
    Var<S> x = g.constant(patchify(img, cfg_));
    return forward_from_patches(g, b, x);
  }

  // Forward from an already-patchified image (N x patch_dim constant).
  ForwardVars<S> forward_from_patches(Graph<S>& g, const BoundModel<S>& b, Var<S> patches) const {
    const int n = cfg_.num_patches();
    Var<S> e = g.add_rowvec(g.matmul(patches, b.backbone[idx_.patch_w]),
                            b.backbone[idx_.patch_b]);
    e = g.add(e, b.backbone[idx_.pos]);
    Var<S> tokens = g.vstack({b.backbone[idx_.cls], e});
    for (size_t i = 0; i < idx_.enc.size(); ++i) {
      tokens = encoder_block(g, b, idx_.enc[i], tokens);
      check_finite(g.value(tokens), "encoder block " + std::to_string(i));
    }
    tokens = g.layer_norm(tokens, b.backbone[idx_.enc_ln_g], b.backbone[idx_.enc_ln_b]);
    Var<S> patch_tokens = g.slice_rows(tokens, 1, n);
    Var<S> cls = g.slice_rows(tokens, 0, 1);
    for (size_t i = 0; i < idx_.dec.size(); ++i) {
      cls = decoder_block(g, b, idx_.dec[i], cls, patch_tokens);
      check_finite(g.value(cls), "decoder block " + std::to_string(i));
    }
    cls = g.layer_norm(cls, b.backbone[idx_.cls_ln_g], b.backbone[idx_.cls_ln_b]);
    check_finite(g.value(cls), "cls norm");
    return ForwardVars<S>{patch_tokens, cls};
  }

  // Inference-only forward; parameters enter a local tape as constants.
  TokenSet<S> forward_infer(const Image<S>& img) const {
    Graph<S> g;
    BoundModel<S> b = bind(g, false);
    ForwardVars<S> out = forward(g, b, img);
    return TokenSet<S>{g.value(out.patch_tokens), g.value(out.cls_token)};
  }

  Var<S> logits(Graph<S>& g, const BoundModel<S>& b, Var<S> embeddings) const {
    return g.add_rowvec(g.matmul_nt(embeddings, b.head_w), b.head_b);
  }

 private:
  void build_layout() {
    const int d = cfg_.embed_dim;
    const int hidden = d * cfg_.mlp_ratio;
    idx_.patch_w = params_.add("patch_embed.weight", cfg_.patch_dim(), d);
    idx_.patch_b = params_.add("patch_embed.bias", 1, d);
    idx_.pos = params_.add("pos_embed", cfg_.num_patches(), d);
    idx_.cls = params_.add("cls_token", 1, d);
    auto add_block = [&](const std::string& prefix) {
      detail::BlockIdx blk;
      blk.ln1_g = params_.add(prefix + ".ln1.gamma", 1, d);
      blk.ln1_b = params_.add(prefix + ".ln1.beta", 1, d);
      blk.qkv_w = params_.add(prefix + ".attn.qkv_weight", d, 3 * d);
      blk.qkv_b = params_.add(prefix + ".attn.qkv_bias", 1, 3 * d);
      blk.out_w = params_.add(prefix + ".attn.out_weight", d, d);
      blk.out_b = params_.add(prefix + ".attn.out_bias", 1, d);
      blk.ln2_g = params_.add(prefix + ".ln2.gamma", 1, d);
      blk.ln2_b = params_.add(prefix + ".ln2.beta", 1, d);
      blk.fc1_w = params_.add(prefix + ".mlp.fc1_weight", d, hidden);
      blk.fc1_b = params_.add(prefix + ".mlp.fc1_bias", 1, hidden);
      blk.fc2_w = params_.add(prefix + ".mlp.fc2_weight", hidden, d);
      blk.fc2_b = params_.add(prefix + ".mlp.fc2_bias", 1, d);
      return blk;
    };
    for (int i = 0; i < cfg_.num_encoder_blocks; ++i)
      idx_.enc.push_back(add_block("encoder." + std::to_string(i)));
    idx_.enc_ln_g = params_.add("encoder_norm.gamma", 1, d);
    idx_.enc_ln_b = params_.add("encoder_norm.beta", 1, d);
    for (int i = 0; i < cfg_.num_decoder_blocks; ++i)
      idx_.dec.push_back(add_block("decoder." + std::to_string(i)));
    idx_.cls_ln_g = params_.add("cls_norm.gamma", 1, d);
    idx_.cls_ln_b = params_.add("cls_norm.beta", 1, d);
  }

  void init_params(uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    for (int i = 0; i < params_.size(); ++i) {
      const std::string& name = params_.name(i);
      Mat<S>& m = params_.value(i);
      if (name.ends_with(".gamma")) {
        m.setOnes();
      } else if (name.ends_with(".beta") || name.ends_with("bias")) {
        m.setZero();
      } else {
        for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = S(dist(rng));
      }
    }
  }

  static void check_finite(const Mat<S>& m, const std::string& where) {
    if (!m.allFinite()) throw NumericalFailure("non-finite activations in " + where);
  }

  Var<S> attention(Graph<S>& g, const BoundModel<S>& b, const detail::BlockIdx& blk,
                   Var<S> q_rows, Var<S> kv_rows) const {
    const int d = cfg_.embed_dim;
    const int nh = cfg_.num_heads;
    const int dh = cfg_.head_dim();
    Var<S> qkv_q = g.add_rowvec(g.matmul(q_rows, b.backbone[blk.qkv_w]), b.backbone[blk.qkv_b]);
    Var<S> qkv_kv = qkv_q;
    bool self_attn = (q_rows.id == kv_rows.id);
    if (!self_attn)
      qkv_kv = g.add_rowvec(g.matmul(kv_rows, b.backbone[blk.qkv_w]), b.backbone[blk.qkv_b]);
    Var<S> q = g.slice_cols(qkv_q, 0, d);
    Var<S> k = g.slice_cols(qkv_kv, d, d);
    Var<S> v = g.slice_cols(qkv_kv, 2 * d, d);
    std::vector<Var<S>> ctx;
    ctx.reserve(nh);
    const S inv_sqrt_dh = S(1) / S(std::sqrt(static_cast<double>(dh)));
    for (int h = 0; h < nh; ++h) {
      Var<S> qh = g.slice_cols(q, h * dh, dh);
      Var<S> kh = g.slice_cols(k, h * dh, dh);
      Var<S> vh = g.slice_cols(v, h * dh, dh);
      Var<S> scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dh);
      Var<S> attn = g.softmax_rows(scores);
      ctx.push_back(g.matmul(attn, vh));
    }
    Var<S> merged = g.concat_cols(ctx);
    return g.add_rowvec(g.matmul(merged, b.backbone[blk.out_w]), b.backbone[blk.out_b]);
  }

  Var<S> mlp(Graph<S>& g, const BoundModel<S>& b, const detail::BlockIdx& blk, Var<S> x) const {
    Var<S> h = g.add_rowvec(g.matmul(x, b.backbone[blk.fc1_w]), b.backbone[blk.fc1_b]);
    h = g.gelu(h);
    return g.add_rowvec(g.matmul(h, b.backbone[blk.fc2_w]), b.backbone[blk.fc2_b]);
  }

  Var<S> encoder_block(Graph<S>& g, const BoundModel<S>& b, const detail::BlockIdx& blk,
                       Var<S> tokens) const {
    Var<S> h = g.layer_norm(tokens, b.backbone[blk.ln1_g], b.backbone[blk.ln1_b]);
    tokens = g.add(tokens, attention(g, b, blk, h, h));
    Var<S> h2 = g.layer_norm(tokens, b.backbone[blk.ln2_g], b.backbone[blk.ln2_b]);
    return g.add(tokens, mlp(g, b, blk, h2));
  }

  Var<S> decoder_block(Graph<S>& g, const BoundModel<S>& b, const detail::BlockIdx& blk,
                       Var<S> cls, Var<S> patch_tokens) const {
    Var<S> cq = g.layer_norm(cls, b.backbone[blk.ln1_g], b.backbone[blk.ln1_b]);
    Var<S> pk = g.layer_norm(patch_tokens, b.backbone[blk.ln1_g], b.backbone[blk.ln1_b]);
    cls = g.add(cls, attention(g, b, blk, cq, pk));
    Var<S> h2 = g.layer_norm(cls, b.backbone[blk.ln2_g], b.backbone[blk.ln2_b]);
    return g.add(cls, mlp(g, b, blk, h2));
  }

  struct LayoutIdx {
    int patch_w, patch_b, pos, cls;
    std::vector<detail::BlockIdx> enc;
    int enc_ln_g, enc_ln_b;
    std::vector<detail::BlockIdx> dec;
    int cls_ln_g, cls_ln_b;
  };

  ModelConfig cfg_;
  ParamSet<S> params_;
  ClassifierHead<S> head_;
  LayoutIdx idx_;
};

}  // namespace vitcil
