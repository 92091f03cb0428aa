#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vitcil/errors.hpp"

namespace vitcil {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
class Graph;

// Handle to a node on a Graph tape. Cheap to copy; owns nothing.
template <typename S>
struct Var {
  Graph<S>* graph = nullptr;
  int id = -1;
  bool valid() const { return graph != nullptr && id >= 0; }
};

// Reverse-mode tape over row-major Eigen matrices. Nodes are appended in
// topological order, so backward() is a reverse sweep over creation order.
// Subgraphs where no parent requires a gradient store no backward closure;
// a frozen old-model forward therefore costs only its value computation.
template <typename S>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<S> input(Mat<S> value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<S> constant(Mat<S> value) { return input(std::move(value), false); }

  Var<S> scalar(S v) {
    Mat<S> m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  const Mat<S>& value(Var<S> v) const { return at(v).value; }

  // Gradient of the last backward() target w.r.t. v (zeros if unreached).
  Mat<S> grad(Var<S> v) const {
    const Node& n = at(v);
    if (n.grad.size() == 0) return Mat<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }

  // ---- elementwise / affine ----

  Var<S> add(Var<S> a, Var<S> b) {
    require_same_shape(a, b, "add");
    Mat<S> v = at(a).value + at(b).value;
    return unary_or_binary(std::move(v), a, b, [this, a, b](const Mat<S>& g) {
      accumulate(a, g);
      accumulate(b, g);
    });
  }

  Var<S> sub(Var<S> a, Var<S> b) {
    require_same_shape(a, b, "sub");
    Mat<S> v = at(a).value - at(b).value;
    return unary_or_binary(std::move(v), a, b, [this, a, b](const Mat<S>& g) {
      accumulate(a, g);
      accumulate(b, Mat<S>(-g));
    });
  }

  Var<S> mul_elem(Var<S> a, Var<S> b) {
    require_same_shape(a, b, "mul_elem");
    Mat<S> v = at(a).value.cwiseProduct(at(b).value);
    return unary_or_binary(std::move(v), a, b, [this, a, b](const Mat<S>& g) {
      accumulate(a, Mat<S>(g.cwiseProduct(at(b).value)));
      accumulate(b, Mat<S>(g.cwiseProduct(at(a).value)));
    });
  }

  Var<S> scale(Var<S> a, S c) {
    Mat<S> v = at(a).value * c;
    return unary_or_binary(std::move(v), a, Var<S>{}, [this, a, c](const Mat<S>& g) {
      accumulate(a, Mat<S>(g * c));
    });
  }

  // Broadcast a 1 x C row vector over every row of a R x C matrix.
  Var<S> add_rowvec(Var<S> a, Var<S> r) {
    const Mat<S>& av = at(a).value;
    const Mat<S>& rv = at(r).value;
    if (rv.rows() != 1 || rv.cols() != av.cols())
      throw RejectedInput("add_rowvec: bias must be 1 x cols");
    Mat<S> v = av.rowwise() + rv.row(0);
    return unary_or_binary(std::move(v), a, r, [this, a, r](const Mat<S>& g) {
      accumulate(a, g);
      accumulate(r, Mat<S>(g.colwise().sum()));
    });
  }

  // ---- matrix products ----

  Var<S> matmul(Var<S> a, Var<S> b) {
    const Mat<S>& av = at(a).value;
    const Mat<S>& bv = at(b).value;
    if (av.cols() != bv.rows()) throw RejectedInput("matmul: inner dims differ");
    Mat<S> v = av * bv;
    return unary_or_binary(std::move(v), a, b, [this, a, b](const Mat<S>& g) {
      accumulate(a, Mat<S>(g * at(b).value.transpose()));
      accumulate(b, Mat<S>(at(a).value.transpose() * g));
    });
  }

  // a * b^T without materializing the transpose.
  Var<S> matmul_nt(Var<S> a, Var<S> b) {
    const Mat<S>& av = at(a).value;
    const Mat<S>& bv = at(b).value;
    if (av.cols() != bv.cols()) throw RejectedInput("matmul_nt: inner dims differ");
    Mat<S> v = av * bv.transpose();
    return unary_or_binary(std::move(v), a, b, [this, a, b](const Mat<S>& g) {
      accumulate(a, Mat<S>(g * at(b).value));
      accumulate(b, Mat<S>(g.transpose() * at(a).value));
    });
  }

  // ---- structural ----

  Var<S> vstack(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw RejectedInput("vstack: empty");
    Eigen::Index cols = at(parts[0]).value.cols();
    Eigen::Index rows = 0;
    for (Var<S> p : parts) {
      if (at(p).value.cols() != cols) throw RejectedInput("vstack: column mismatch");
      rows += at(p).value.rows();
    }
    Mat<S> v(rows, cols);
    Eigen::Index r = 0;
    for (Var<S> p : parts) {
      v.middleRows(r, at(p).value.rows()) = at(p).value;
      r += at(p).value.rows();
    }
    bool rg = false;
    for (Var<S> p : parts) rg = rg || at(p).requires_grad;
    return make_node(std::move(v), rg, [this, parts](const Mat<S>& g) {
      Eigen::Index r = 0;
      for (Var<S> p : parts) {
        Eigen::Index n = at(p).value.rows();
        accumulate(p, Mat<S>(g.middleRows(r, n)));
        r += n;
      }
    });
  }

  Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw RejectedInput("concat_cols: empty");
    Eigen::Index rows = at(parts[0]).value.rows();
    Eigen::Index cols = 0;
    for (Var<S> p : parts) {
      if (at(p).value.rows() != rows) throw RejectedInput("concat_cols: row mismatch");
      cols += at(p).value.cols();
    }
    Mat<S> v(rows, cols);
    Eigen::Index c = 0;
    for (Var<S> p : parts) {
      v.middleCols(c, at(p).value.cols()) = at(p).value;
      c += at(p).value.cols();
    }
    bool rg = false;
    for (Var<S> p : parts) rg = rg || at(p).requires_grad;
    return make_node(std::move(v), rg, [this, parts](const Mat<S>& g) {
      Eigen::Index c = 0;
      for (Var<S> p : parts) {
        Eigen::Index n = at(p).value.cols();
        accumulate(p, Mat<S>(g.middleCols(c, n)));
        c += n;
      }
    });
  }

  Var<S> slice_rows(Var<S> a, int row0, int nrows) {
    const Mat<S>& av = at(a).value;
    if (row0 < 0 || nrows < 1 || row0 + nrows > av.rows())
      throw RejectedInput("slice_rows: out of range");
    Mat<S> v = av.middleRows(row0, nrows);
    return unary_or_binary(std::move(v), a, Var<S>{},
                           [this, a, row0, nrows](const Mat<S>& g) {
                             Mat<S> full = Mat<S>::Zero(at(a).value.rows(), at(a).value.cols());
                             full.middleRows(row0, nrows) = g;
                             accumulate(a, full);
                           });
  }

  Var<S> slice_cols(Var<S> a, int col0, int ncols) {
    const Mat<S>& av = at(a).value;
    if (col0 < 0 || ncols < 1 || col0 + ncols > av.cols())
      throw RejectedInput("slice_cols: out of range");
    Mat<S> v = av.middleCols(col0, ncols);
    return unary_or_binary(std::move(v), a, Var<S>{},
                           [this, a, col0, ncols](const Mat<S>& g) {
                             Mat<S> full = Mat<S>::Zero(at(a).value.rows(), at(a).value.cols());
                             full.middleCols(col0, ncols) = g;
                             accumulate(a, full);
                           });
  }

  // ---- nonlinearities ----

  // Per-row layer normalization with learned gain/shift (1 x d each).
  Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
    const Mat<S>& xv = at(x).value;
    const Mat<S>& gv = at(gamma).value;
    const Mat<S>& bv = at(beta).value;
    if (gv.rows() != 1 || bv.rows() != 1 || gv.cols() != xv.cols() || bv.cols() != xv.cols())
      throw RejectedInput("layer_norm: gamma/beta must be 1 x d");
    const Eigen::Index rows = xv.rows(), d = xv.cols();
    Mat<S> xhat(rows, d);
    Mat<S> inv_std(rows, 1);
    for (Eigen::Index r = 0; r < rows; ++r) {
      S mu = xv.row(r).mean();
      S var = (xv.row(r).array() - mu).square().mean();
      S inv = S(1) / std::sqrt(var + eps);
      inv_std(r, 0) = inv;
      xhat.row(r) = (xv.row(r).array() - mu) * inv;
    }
    Mat<S> v(rows, d);
    for (Eigen::Index r = 0; r < rows; ++r)
      v.row(r) = xhat.row(r).cwiseProduct(gv.row(0)) + bv.row(0);
    bool rg = at(x).requires_grad || at(gamma).requires_grad || at(beta).requires_grad;
    return make_node(std::move(v), rg,
                     [this, x, gamma, beta, xhat, inv_std](const Mat<S>& g) {
                       const Mat<S>& gv = at(gamma).value;
                       const Eigen::Index rows = xhat.rows(), d = xhat.cols();
                       accumulate(beta, Mat<S>(g.colwise().sum()));
                       accumulate(gamma, Mat<S>(g.cwiseProduct(xhat).colwise().sum()));
                       Mat<S> dx(rows, d);
                       for (Eigen::Index r = 0; r < rows; ++r) {
                         Eigen::Array<S, 1, Eigen::Dynamic> dxhat =
                             g.row(r).cwiseProduct(gv.row(0)).array();
                         S m1 = dxhat.mean();
                         S m2 = (dxhat * xhat.row(r).array()).mean();
                         dx.row(r) =
                             ((dxhat - m1 - xhat.row(r).array() * m2) * inv_std(r, 0)).matrix();
                       }
                       accumulate(x, dx);
                     });
  }

  Var<S> gelu(Var<S> x) {
    const Mat<S>& xv = at(x).value;
    Mat<S> v(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      S t = xv.data()[i];
      v.data()[i] = S(0.5) * t * (S(1) + std::erf(t / S(std::sqrt(2.0))));
    }
    return unary_or_binary(std::move(v), x, Var<S>{}, [this, x](const Mat<S>& g) {
      const Mat<S>& xv = at(x).value;
      Mat<S> dx(xv.rows(), xv.cols());
      const S inv_sqrt2 = S(1) / S(std::sqrt(2.0));
      const S inv_sqrt2pi = S(1) / S(std::sqrt(2.0 * M_PI));
      for (Eigen::Index i = 0; i < xv.size(); ++i) {
        S t = xv.data()[i];
        S cdf = S(0.5) * (S(1) + std::erf(t * inv_sqrt2));
        S pdf = std::exp(S(-0.5) * t * t) * inv_sqrt2pi;
        dx.data()[i] = g.data()[i] * (cdf + t * pdf);
      }
      accumulate(x, dx);
    });
  }

  Var<S> softmax_rows(Var<S> x) {
    const Mat<S>& xv = at(x).value;
    Mat<S> p(xv.rows(), xv.cols());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      S mx = xv.row(r).maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (xv.row(r).array() - mx).exp();
      p.row(r) = (e / e.sum()).matrix();
    }
    Mat<S> pv = p;
    return unary_or_binary(std::move(pv), x, Var<S>{}, [this, x, p](const Mat<S>& g) {
      Mat<S> dx(p.rows(), p.cols());
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        S s = g.row(r).cwiseProduct(p.row(r)).sum();
        dx.row(r) = p.row(r).cwiseProduct(g.row(r) - Mat<S>::Constant(1, p.cols(), s));
      }
      accumulate(x, dx);
    });
  }

  // ---- reductions ----

  Var<S> sum_all(Var<S> a) {
    Mat<S> v(1, 1);
    v(0, 0) = at(a).value.sum();
    return unary_or_binary(std::move(v), a, Var<S>{}, [this, a](const Mat<S>& g) {
      accumulate(a, Mat<S>(Mat<S>::Constant(at(a).value.rows(), at(a).value.cols(), g(0, 0))));
    });
  }

  Var<S> mean_all(Var<S> a) {
    const Eigen::Index n = at(a).value.size();
    Mat<S> v(1, 1);
    v(0, 0) = at(a).value.sum() / S(n);
    return unary_or_binary(std::move(v), a, Var<S>{}, [this, a, n](const Mat<S>& g) {
      accumulate(a, Mat<S>(Mat<S>::Constant(at(a).value.rows(), at(a).value.cols(),
                                            g(0, 0) / S(n))));
    });
  }

  // Per-row L2 norms (R x 1). Zero rows get zero gradient (subgradient choice),
  // which keeps the first step of a task well-defined when current == snapshot.
  Var<S> row_norms(Var<S> a) {
    const Mat<S>& av = at(a).value;
    Mat<S> v(av.rows(), 1);
    for (Eigen::Index r = 0; r < av.rows(); ++r) v(r, 0) = av.row(r).norm();
    Mat<S> norms = v;
    return unary_or_binary(std::move(v), a, Var<S>{}, [this, a, norms](const Mat<S>& g) {
      const Mat<S>& av = at(a).value;
      Mat<S> dx = Mat<S>::Zero(av.rows(), av.cols());
      for (Eigen::Index r = 0; r < av.rows(); ++r) {
        if (norms(r, 0) > S(0)) dx.row(r) = av.row(r) * (g(r, 0) / norms(r, 0));
      }
      accumulate(a, dx);
    });
  }

  // Mean over rows of -log softmax(logits)[label]; stable via logsumexp.
  Var<S> cross_entropy_mean(Var<S> logits, const std::vector<int>& labels) {
    const Mat<S>& lv = at(logits).value;
    if (static_cast<Eigen::Index>(labels.size()) != lv.rows())
      throw RejectedInput("cross_entropy_mean: label count != rows");
    for (int y : labels)
      if (y < 0 || y >= lv.cols()) throw RejectedInput("cross_entropy_mean: label out of range");
    const Eigen::Index rows = lv.rows();
    Mat<S> p(rows, lv.cols());
    S total = 0;
    for (Eigen::Index r = 0; r < rows; ++r) {
      S mx = lv.row(r).maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (lv.row(r).array() - mx).exp();
      S z = e.sum();
      p.row(r) = (e / z).matrix();
      total += -(lv(r, labels[r]) - mx - std::log(z));
    }
    Mat<S> v(1, 1);
    v(0, 0) = total / S(rows);
    return unary_or_binary(std::move(v), logits, Var<S>{},
                           [this, logits, p, labels](const Mat<S>& g) {
                             Mat<S> d = p;
                             for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, labels[r]) -= S(1);
                             d *= g(0, 0) / S(d.rows());
                             accumulate(logits, d);
                           });
  }

  // ---- driver ----

  void backward(Var<S> loss) {
    const Node& ln = at(loss);
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw RejectedInput("backward: target must be 1 x 1");
    for (Node& n : nodes_) n.grad.resize(0, 0);
    nodes_[loss.id].grad = Mat<S>::Constant(1, 1, S(1));
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backprop && n.grad.size() != 0) n.backprop(n.grad);
    }
  }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;  // empty until touched by backward
    bool requires_grad = false;
    std::function<void(const Mat<S>&)> backprop;
  };

  const Node& at(Var<S> v) const {
    if (v.graph != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw RejectedInput("Var does not belong to this graph");
    return nodes_[v.id];
  }

  void accumulate(Var<S> v, const Mat<S>& g) {
    if (!v.valid()) return;
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void require_same_shape(Var<S> a, Var<S> b, const char* op) const {
    if (at(a).value.rows() != at(b).value.rows() || at(a).value.cols() != at(b).value.cols())
      throw RejectedInput(std::string(op) + ": shape mismatch");
  }

  template <typename F>
  Var<S> unary_or_binary(Mat<S> value, Var<S> a, Var<S> b, F&& fn) {
    bool rg = at(a).requires_grad || (b.valid() && at(b).requires_grad);
    return make_node(std::move(value), rg, std::forward<F>(fn));
  }

  template <typename F>
  Var<S> make_node(Mat<S> value, bool requires_grad, F&& fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backprop = std::forward<F>(fn);
    nodes_.push_back(std::move(n));
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

template <typename S>
Mat<S> row_from(const std::vector<S>& v) {
  Mat<S> m(1, static_cast<Eigen::Index>(v.size()));
  for (size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

}  // namespace vitcil
