#include "factcal/graph.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>

namespace factcal {

template <typename Scalar>
Var<Scalar> Graph<Scalar>::constant(Mat value, std::string name) {
  nodes_.push_back(Node{std::move(value), Mat{}, false, true, std::move(name), {}});
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::parameter(Mat value, std::string name) {
  nodes_.push_back(Node{std::move(value), Mat{}, true, true, std::move(name), {}});
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::record(Mat value, bool requires_grad, BackwardFn backward) {
  nodes_.push_back(Node{std::move(value), Mat{}, requires_grad, false, {}, requires_grad ? std::move(backward) : BackwardFn{}});
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
const typename Graph<Scalar>::Mat& Graph<Scalar>::grad(Var<Scalar> v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.size() == 0 && n.value.size() != 0) {
    throw std::logic_error("tensor has no gradient (not reachable from the loss or not trainable)");
  }
  return n.grad;
}

template <typename Scalar>
typename Graph<Scalar>::Mat* Graph<Scalar>::grad_buffer(Var<Scalar> v) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return nullptr;
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return &n.grad;
}

template <typename Scalar>
void Graph<Scalar>::backward(Var<Scalar> loss) {
  Node& root = nodes_.at(loss.id());
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw DimensionError("backward() needs a scalar loss, got " + shape_string(root.value));
  }
  if (!root.requires_grad) return;
  root.grad = Mat::Ones(1, 1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad.size() != 0) n.backward(*this);
  }
}

template <typename Scalar>
std::map<std::string, typename Graph<Scalar>::Mat> Graph<Scalar>::gradients() const {
  std::map<std::string, Mat> out;
  for (const Node& n : nodes_) {
    if (n.is_leaf && !n.name.empty() && n.grad.size() != 0) out[n.name] = n.grad;
  }
  return out;
}

namespace {

template <typename Scalar>
bool any_grad(std::initializer_list<Var<Scalar>> vars) {
  return std::any_of(vars.begin(), vars.end(), [](const Var<Scalar>& v) { return v.requires_grad(); });
}

template <typename Scalar>
void same_graph(Var<Scalar> a, Var<Scalar> b) {
  if (&a.graph() != &b.graph()) throw std::logic_error("operands recorded on different graphs");
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

template <typename Scalar>
Scalar gelu_scalar(Scalar x) {
  const Scalar c = Scalar(kGeluC), a = Scalar(kGeluA);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + a * x * x * x)));
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  same_graph(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.value()) + " x " +
                         shape_string(b.value()));
  }
  Matrix<Scalar> out = a.value() * b.value();
  auto& g = a.graph();
  return g.record(std::move(out), any_grad({a, b}), [a, b, self = g.size()](Graph<Scalar>& gr) {
    const auto& dy = gr.grad(Var<Scalar>(&gr, self));
    if (a.requires_grad()) gr.accumulate(a, dy * b.value().transpose());
    if (b.requires_grad()) gr.accumulate(b, a.value().transpose() * dy);
  });
}

template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  same_graph(a, b);
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_string(a.value()) + " x " +
                         shape_string(b.value()) + "^T");
  }
  Matrix<Scalar> out = a.value() * b.value().transpose();
  auto& g = a.graph();
  return g.record(std::move(out), any_grad({a, b}), [a, b, self = g.size()](Graph<Scalar>& gr) {
    const auto& dy = gr.grad(Var<Scalar>(&gr, self));
    if (a.requires_grad()) gr.accumulate(a, dy * b.value());
    if (b.requires_grad()) gr.accumulate(b, dy.transpose() * a.value());
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  same_graph(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("add: shapes differ, " + shape_string(a.value()) + " vs " + shape_string(b.value()));
  }
  Matrix<Scalar> out = a.value() + b.value();
  auto& g = a.graph();
  return g.record(std::move(out), any_grad({a, b}), [a, b, self = g.size()](Graph<Scalar>& gr) {
    const auto& dy = gr.grad(Var<Scalar>(&gr, self));
    gr.accumulate(a, dy);
    gr.accumulate(b, dy);
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor) {
  Matrix<Scalar> out = a.value() * factor;
  auto& g = a.graph();
  return g.record(std::move(out), a.requires_grad(), [a, factor, self = g.size()](Graph<Scalar>& gr) {
    gr.accumulate(a, gr.grad(Var<Scalar>(&gr, self)) * factor);
  });
}

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> x) {
  const Scalar c = Scalar(kGeluC), a = Scalar(kGeluA);
  const auto xa = x.value().array();
  // vectorized tanh; the scalar libm call dominates otherwise
  Matrix<Scalar> th;
  if constexpr (std::is_same_v<Scalar, float>) {
    th = (c * (xa + a * xa.cube())).tanh().matrix();
  } else {
    // Eigen has no packet tanh for double; go through the vectorized exp
    th = (Scalar(1) - Scalar(2) / ((Scalar(2) * c * (xa + a * xa.cube())).exp() + Scalar(1))).matrix();
  }
  Matrix<Scalar> out = (Scalar(0.5) * xa * (Scalar(1) + th.array())).matrix();
  auto& g = x.graph();
  if (!x.requires_grad()) return g.record(std::move(out), false, {});
  return g.record(std::move(out), true, [x, th = std::move(th), c, a, self = g.size()](Graph<Scalar>& gr) {
    const auto& dy = gr.grad(Var<Scalar>(&gr, self));
    const auto t = x.value().array();
    const auto h = th.array();
    const auto d = Scalar(0.5) * (Scalar(1) + h) + Scalar(0.5) * t * (Scalar(1) - h.square()) * c *
                                                       (Scalar(1) + Scalar(3) * a * t.square());
    gr.accumulate(x, (dy.array() * d).matrix());
  });
}

template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x, int axis) {
  if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1 for a 2-d tensor");
  Matrix<Scalar> out = axis == 1 ? softmax_rows<Scalar>(x.value())
                                 : Matrix<Scalar>(softmax_rows<Scalar>(x.value().transpose()).transpose());
  auto& g = x.graph();
  return g.record(std::move(out), x.requires_grad(), [x, axis, self = g.size()](Graph<Scalar>& gr) {
    Var<Scalar> y(&gr, self);
    const auto& p = y.value();
    const auto& dy = y.grad();
    Matrix<Scalar> prod = p.cwiseProduct(dy);
    if (axis == 1) {
      Matrix<Scalar> dx = prod - p.cwiseProduct(prod.rowwise().sum().replicate(1, p.cols()));
      gr.accumulate(x, dx);
    } else {
      Matrix<Scalar> dx = prod - p.cwiseProduct(prod.colwise().sum().replicate(p.rows(), 1));
      gr.accumulate(x, dx);
    }
  });
}

template <typename Scalar>
Var<Scalar> rms_norm(Var<Scalar> x, Var<Scalar> gain, Scalar eps) {
  same_graph(x, gain);
  if (gain.rows() != 1 || gain.cols() != x.cols()) {
    throw DimensionError("rms_norm: gain " + shape_string(gain.value()) + " does not match input " +
                         shape_string(x.value()));
  }
  const auto& xv = x.value();
  const Eigen::Index n = xv.rows(), d = xv.cols();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> denom(n);
  Matrix<Scalar> out(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Scalar rms = std::sqrt(xv.row(r).squaredNorm() / Scalar(d));
    denom(r) = std::max(rms, eps);
    out.row(r) = xv.row(r).cwiseProduct(gain.value()) / denom(r);
  }
  auto& g = x.graph();
  return g.record(std::move(out), any_grad({x, gain}), [x, gain, eps, denom, self = g.size()](Graph<Scalar>& gr) {
    const auto& dy = gr.grad(Var<Scalar>(&gr, self));
    const auto& xv = x.value();
    const auto& gv = gain.value();
    const Eigen::Index n = xv.rows(), d = xv.cols();
    if (x.requires_grad()) {
      Matrix<Scalar> dx(n, d);
      for (Eigen::Index r = 0; r < n; ++r) {
        RowVector<Scalar> gdy = dy.row(r).cwiseProduct(gv);
        const Scalar s = denom(r);
        dx.row(r) = gdy / s;
        if (s > eps) dx.row(r) -= xv.row(r) * (gdy.dot(xv.row(r)) / (Scalar(d) * s * s * s));
      }
      gr.accumulate(x, dx);
    }
    if (gain.requires_grad()) {
      RowVector<Scalar> dg = RowVector<Scalar>::Zero(d);
      for (Eigen::Index r = 0; r < n; ++r) dg += dy.row(r).cwiseProduct(xv.row(r)) / denom(r);
      gr.accumulate(gain, dg);
    }
  });
}

template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const int> targets, const std::vector<bool>& mask) {
  const auto& lv = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != lv.rows() || mask.size() != targets.size()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask bits for logits " + shape_string(lv));
  }
  const auto count = std::count(mask.begin(), mask.end(), true);
  if (count == 0) throw std::invalid_argument("cross_entropy: mask selects no positions");
  Scalar total = 0;
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    if (!mask[r]) continue;
    const int t = targets[r];
    if (t < 0 || t >= lv.cols()) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(lv.cols()));
    }
    const Scalar m = lv.row(r).maxCoeff();
    const Scalar lse = m + std::log((lv.row(r).array() - m).exp().sum());
    total += lse - lv(r, t);
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total / Scalar(count);
  std::vector<int> tg(targets.begin(), targets.end());
  auto& g = logits.graph();
  return g.record(std::move(out), logits.requires_grad(),
                  [logits, tg = std::move(tg), mask, count, self = g.size()](Graph<Scalar>& gr) {
                    const Scalar dy = gr.grad(Var<Scalar>(&gr, self))(0, 0);
                    const auto& lv = logits.value();
                    Matrix<Scalar> dx = Matrix<Scalar>::Zero(lv.rows(), lv.cols());
                    for (Eigen::Index r = 0; r < lv.rows(); ++r) {
                      if (!mask[r]) continue;
                      const Scalar m = lv.row(r).maxCoeff();
                      dx.row(r) = (lv.row(r).array() - m).exp();
                      dx.row(r) /= dx.row(r).sum();
                      dx(r, tg[r]) -= Scalar(1);
                    }
                    gr.accumulate(logits, dx * (dy / Scalar(count)));
                  });
}

template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> table, std::span<const int> ids) {
  const auto& tv = table.value();
  Matrix<Scalar> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(ids[i]) + " outside table " +
                              shape_string(tv));
    }
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  auto& g = table.graph();
  return g.record(std::move(out), table.requires_grad(), [table, idx = std::move(idx), self = g.size()](Graph<Scalar>& gr) {
    const auto& dy = gr.grad(Var<Scalar>(&gr, self));
    if (auto* buf = gr.grad_buffer(table)) {
      for (std::size_t i = 0; i < idx.size(); ++i) buf->row(idx[i]) += dy.row(static_cast<Eigen::Index>(i));
    }
  });
}

template <typename Scalar>
Var<Scalar> segment_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, std::span<const int> offsets,
                              int n_heads) {
  same_graph(q, k);
  same_graph(q, v);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  if (kv.rows() != qv.rows() || kv.cols() != qv.cols() || vv.rows() != qv.rows() || vv.cols() != qv.cols()) {
    throw DimensionError("segment_attention: q " + shape_string(qv) + ", k " + shape_string(kv) + ", v " +
                         shape_string(vv) + " must agree");
  }
  if (n_heads <= 0 || qv.cols() % n_heads != 0) {
    throw DimensionError("segment_attention: width " + std::to_string(qv.cols()) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != qv.rows()) {
    throw DimensionError("segment_attention: offsets must span all " + std::to_string(qv.rows()) + " rows");
  }
  const Eigen::Index dh = qv.cols() / n_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(dh));
  const std::size_t n_seg = offsets.size() - 1;
  const bool needs_grad = any_grad({q, k, v});

  Matrix<Scalar> out(qv.rows(), qv.cols());
  std::vector<Matrix<Scalar>> probs;
  if (needs_grad) probs.reserve(n_seg * n_heads);
  for (std::size_t s = 0; s < n_seg; ++s) {
    const Eigen::Index r0 = offsets[s], len = offsets[s + 1] - offsets[s];
    if (len <= 0) throw DimensionError("segment_attention: empty segment");
    for (int h = 0; h < n_heads; ++h) {
      const Eigen::Index c0 = h * dh;
      Matrix<Scalar> scores = qv.block(r0, c0, len, dh) * kv.block(r0, c0, len, dh).transpose() * inv_sqrt;
      Matrix<Scalar> p = softmax_rows<Scalar>(scores);
      out.block(r0, c0, len, dh).noalias() = p * vv.block(r0, c0, len, dh);
      if (needs_grad) probs.push_back(std::move(p));
    }
  }
  std::vector<int> offs(offsets.begin(), offsets.end());
  auto& g = q.graph();
  return g.record(std::move(out), needs_grad,
                  [q, k, v, offs = std::move(offs), probs = std::move(probs), n_heads, dh, inv_sqrt,
                   self = g.size()](Graph<Scalar>& gr) {
                    const auto& dy = gr.grad(Var<Scalar>(&gr, self));
                    const auto& qv = q.value();
                    const auto& kv = k.value();
                    const auto& vv = v.value();
                    Matrix<Scalar> dq = Matrix<Scalar>::Zero(qv.rows(), qv.cols());
                    Matrix<Scalar> dk = Matrix<Scalar>::Zero(qv.rows(), qv.cols());
                    Matrix<Scalar> dv = Matrix<Scalar>::Zero(qv.rows(), qv.cols());
                    std::size_t pi = 0;
                    for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
                      const Eigen::Index r0 = offs[s], len = offs[s + 1] - offs[s];
                      for (int h = 0; h < n_heads; ++h, ++pi) {
                        const Eigen::Index c0 = h * dh;
                        const Matrix<Scalar>& p = probs[pi];
                        const auto dout = dy.block(r0, c0, len, dh);
                        dv.block(r0, c0, len, dh).noalias() = p.transpose() * dout;
                        Matrix<Scalar> dp = dout * vv.block(r0, c0, len, dh).transpose();
                        Matrix<Scalar> pd = p.cwiseProduct(dp);
                        Matrix<Scalar> ds = pd - p.cwiseProduct(pd.rowwise().sum().replicate(1, len));
                        ds *= inv_sqrt;
                        dq.block(r0, c0, len, dh).noalias() = ds * kv.block(r0, c0, len, dh);
                        dk.block(r0, c0, len, dh).noalias() = ds.transpose() * qv.block(r0, c0, len, dh);
                      }
                    }
                    gr.accumulate(q, dq);
                    gr.accumulate(k, dk);
                    gr.accumulate(v, dv);
                  });
}

#define FACTCAL_INSTANTIATE(S)                                                                        \
  template class Graph<S>;                                                                            \
  template S gelu_scalar<S>(S);                                                                       \
  template Matrix<S> softmax_rows<S>(const Matrix<S>&);                                               \
  template Var<S> matmul<S>(Var<S>, Var<S>);                                                          \
  template Var<S> matmul_nt<S>(Var<S>, Var<S>);                                                       \
  template Var<S> add<S>(Var<S>, Var<S>);                                                             \
  template Var<S> scale<S>(Var<S>, S);                                                                \
  template Var<S> gelu<S>(Var<S>);                                                                    \
  template Var<S> softmax<S>(Var<S>, int);                                                            \
  template Var<S> rms_norm<S>(Var<S>, Var<S>, S);                                                     \
  template Var<S> cross_entropy<S>(Var<S>, std::span<const int>, const std::vector<bool>&);           \
  template Var<S> gather_rows<S>(Var<S>, std::span<const int>);                                       \
  template Var<S> segment_attention<S>(Var<S>, Var<S>, Var<S>, std::span<const int>, int);

FACTCAL_INSTANTIATE(float)
FACTCAL_INSTANTIATE(double)

#undef FACTCAL_INSTANTIATE

}  // namespace factcal
