#pragma once

#include "factcal/errors.hpp"
#include "factcal/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace factcal {

template <typename Scalar>
class Graph;

/// Handle to a tensor recorded on a Graph.
template <typename Scalar>
class Var {
 public:
  using Mat = Matrix<Scalar>;

  Var() = default;
  Var(Graph<Scalar>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Mat& value() const { return graph_->value(*this); }
  const Mat& grad() const { return graph_->grad(*this); }
  bool requires_grad() const { return graph_->requires_grad(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  Graph<Scalar>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape of primitive operations. Nodes are appended in evaluation order and
/// backward() walks them in exact reverse. Nodes whose inputs all lack
/// requires_grad record no backward closure, so frozen sub-networks cost a
/// forward pass only.
template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Graph&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var<Scalar> constant(Mat value, std::string name = {});
  /// Trainable leaf; its gradient shows up in gradients() under `name`.
  Var<Scalar> parameter(Mat value, std::string name);

  /// Appends an interior node. `backward` may be empty when no input needs a gradient.
  Var<Scalar> record(Mat value, bool requires_grad, BackwardFn backward);

  const Mat& value(Var<Scalar> v) const { return nodes_.at(v.id()).value; }
  const Mat& grad(Var<Scalar> v) const;
  bool requires_grad(Var<Scalar> v) const { return nodes_.at(v.id()).requires_grad; }

  /// Adds `delta` into the gradient of `v` (no-op when v does not require grad).
  template <typename Derived>
  void accumulate(Var<Scalar> v, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad += delta;
  }
  /// Mutable gradient buffer (allocated on demand) for sparse scatter updates.
  Mat* grad_buffer(Var<Scalar> v);

  /// Reverse-mode sweep from a 1x1 loss.
  void backward(Var<Scalar> loss);

  /// Named leaves that received a gradient during backward().
  std::map<std::string, Mat> gradients() const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::string name;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

// ---- primitive operations -------------------------------------------------

/// a[m x k] * b[k x n]
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b);

/// a[m x k] * b[n x k]^T, the H K^T form used by key-value layers and by the tied output projection.
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b);

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  return add(a, b);
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor);

/// Tanh-approximation GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> x);

/// Max-subtracted softmax along axis 0 (columns) or 1 (rows).
template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x, int axis);

/// RMS normalisation of every row: gain * x / max(rms(x), eps). No mean
/// subtraction and no bias.
template <typename Scalar>
Var<Scalar> rms_norm(Var<Scalar> x, Var<Scalar> gain, Scalar eps = Scalar(1e-6));

/// Mean negative log-likelihood over rows whose mask bit is set.
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> targets, const std::vector<bool>& mask);

/// Row gather (embedding lookup); gradient scatters back into `table`.
template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> table, std::span<const int> ids);

/// Bidirectional multi-head scaled dot-product attention over packed
/// sequences. Rows [offsets[s], offsets[s+1]) form sequence s; tokens attend
/// only within their own sequence.
template <typename Scalar>
Var<Scalar> segment_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, std::span<const int> offsets,
                              int n_heads);

// Plain (non-recorded) helpers shared by inference code.
template <typename Scalar>
Scalar gelu_scalar(Scalar x);

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x);

}  // namespace factcal
