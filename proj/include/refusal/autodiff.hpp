#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "refusal/tensor.hpp"

namespace refusal::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid until the tape is reset.
struct Var {
  Tape* tape = nullptr;
  int node = -1;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so parents
// always precede children and one reverse sweep visits each node once.
// Gradients are zeroed at the start of every backward() call, which makes
// repeated backward passes over the same tape bit-identical.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), nullptr, {}, nullptr, requires_grad});
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  // Reference an external tensor (model parameters, input images) without
  // copying. The tensor must outlive any use of this tape.
  Var leaf_ref(const Tensor* value, bool requires_grad = true) {
    nodes_.push_back(Node{Tensor{}, value, {}, nullptr, requires_grad});
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const { return value_at(v.node); }
  const Tensor& value_at(int i) const {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    return n.external ? *n.external : n.owned;
  }

  bool wants_grad(int i) const { return nodes_[static_cast<std::size_t>(i)].needs_grad; }

  // Accumulation buffer for node i; only valid during/after backward().
  Tensor& grad_buf(int i) { return grads_[static_cast<std::size_t>(i)]; }

  void backward(Var loss) {
    require(loss.tape == this, "backward: node belongs to a different tape");
    const Tensor& l = value(loss);
    require(l.numel() == 1, "backward: loss must be scalar, got shape ", shape_str(l.shape));
    require(wants_grad(loss.node), "backward: loss does not depend on any differentiable leaf");
    grads_.resize(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].needs_grad) continue;
      const Tensor& v = value_at(static_cast<int>(i));
      if (grads_[i].shape != v.shape) grads_[i] = Tensor(v.shape);
      else std::fill(grads_[i].data.begin(), grads_[i].data.end(), 0.0);
    }
    grads_[static_cast<std::size_t>(loss.node)].data[0] = 1.0;
    for (int i = loss.node; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.needs_grad && n.backward) n.backward(*this, i);
    }
    ran_backward_ = true;
  }

  const Tensor& gradient(Var v) const {
    require(ran_backward_, "gradient: call backward() first");
    require(v.tape == this && wants_grad(v.node), "gradient: node has no gradient");
    return grads_[static_cast<std::size_t>(v.node)];
  }

  // Gradient w.r.t. an external tensor, summed over every leaf_ref of it on
  // this tape. Null when the tensor was never referenced with grad enabled.
  // Merged buffers are zeroed so repeated calls stay idempotent.
  const Tensor* gradient_for(const Tensor* external) {
    require(ran_backward_, "gradient_for: call backward() first");
    Tensor* found = nullptr;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].external != external || !nodes_[i].needs_grad) continue;
      if (!found) {
        found = &grads_[i];
      } else {
        for (std::size_t j = 0; j < found->numel(); ++j) found->data[j] += grads_[i].data[j];
        std::fill(grads_[i].data.begin(), grads_[i].data.end(), 0.0);
      }
    }
    return found;
  }

  // Drop all nodes but keep vector capacity for reuse across iterations.
  void reset() {
    nodes_.clear();
    grads_.clear();
    ran_backward_ = false;
  }

  std::size_t size() const { return nodes_.size(); }

  Var push(const char* op, Tensor value, std::vector<int> parents,
           std::function<void(Tape&, int)> bw) {
    bool needs = false;
    for (int p : parents) needs = needs || nodes_[static_cast<std::size_t>(p)].needs_grad;
    require<NumericError>(value.all_finite(), op, " produced non-finite values");
    nodes_.push_back(
        Node{std::move(value), nullptr, std::move(parents), needs ? std::move(bw) : nullptr, needs});
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external;
    std::vector<int> parents;  // kept for debugging; closures capture indices
    std::function<void(Tape&, int)> backward;
    bool needs_grad;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool ran_backward_ = false;
};

namespace detail {
inline Tape& same_tape(Var a, Var b) {
  require(a.tape && a.tape == b.tape, "operands belong to different tapes");
  return *a.tape;
}
}  // namespace detail

// ---- primitives -----------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require<ShapeError>(A.rank() == 2 && B.rank() == 2 && A.cols() == B.rows(),
                      "matmul: incompatible shapes ", shape_str(A.shape), " and ",
                      shape_str(B.shape));
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C({m, n});
  gemm(false, false, m, n, k, 1.0, A.data.data(), k, B.data.data(), n, 0.0, C.data.data(), n);
  return t.push("matmul", std::move(C), {a.node, b.node}, [ai = a.node, bi = b.node](Tape& t, int self) {
    const Tensor& G = t.grad_buf(self);
    const Tensor& A = t.value_at(ai);
    const Tensor& B = t.value_at(bi);
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    if (t.wants_grad(ai))
      gemm(false, true, m, k, n, 1.0, G.data.data(), n, B.data.data(), n, 1.0,
           t.grad_buf(ai).data.data(), k);
    if (t.wants_grad(bi))
      gemm(true, false, k, n, m, 1.0, A.data.data(), k, G.data.data(), n, 1.0,
           t.grad_buf(bi).data.data(), n);
  });
}

// C = A * B^T with A [m x k], B [n x k].
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require<ShapeError>(A.rank() == 2 && B.rank() == 2 && A.cols() == B.cols(),
                      "matmul_nt: incompatible shapes ", shape_str(A.shape), " and ",
                      shape_str(B.shape));
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor C({m, n});
  gemm(false, true, m, n, k, 1.0, A.data.data(), k, B.data.data(), k, 0.0, C.data.data(), n);
  return t.push("matmul_nt", std::move(C), {a.node, b.node}, [ai = a.node, bi = b.node](Tape& t, int self) {
    const Tensor& G = t.grad_buf(self);
    const Tensor& A = t.value_at(ai);
    const Tensor& B = t.value_at(bi);
    const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
    if (t.wants_grad(ai))
      gemm(false, false, m, k, n, 1.0, G.data.data(), n, B.data.data(), k, 1.0,
           t.grad_buf(ai).data.data(), k);
    if (t.wants_grad(bi))
      gemm(true, false, n, k, m, 1.0, G.data.data(), n, A.data.data(), k, 1.0,
           t.grad_buf(bi).data.data(), k);
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require<ShapeError>(A.same_shape(B), "add: shape mismatch ", shape_str(A.shape), " vs ",
                      shape_str(B.shape));
  Tensor C(A.shape);
  for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = A.data[i] + B.data[i];
  return t.push("add", std::move(C), {a.node, b.node}, [ai = a.node, bi = b.node](Tape& t, int self) {
    const Tensor& G = t.grad_buf(self);
    for (int p : {ai, bi}) {
      if (!t.wants_grad(p)) continue;
      Tensor& g = t.grad_buf(p);
      for (std::size_t i = 0; i < G.numel(); ++i) g.data[i] += G.data[i];
    }
  });
}

// A [m x n] plus bias [n] added to every row.
inline Var add_row_bias(Var a, Var bias) {
  Tape& t = detail::same_tape(a, bias);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(bias);
  require<ShapeError>(A.rank() == 2 && B.rank() == 1 && B.shape[0] == A.cols(),
                      "add_row_bias: shape mismatch ", shape_str(A.shape), " vs ",
                      shape_str(B.shape));
  Tensor C(A.shape);
  const std::size_t m = A.rows(), n = A.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C.data[i * n + j] = A.data[i * n + j] + B.data[j];
  return t.push("add_row_bias", std::move(C), {a.node, bias.node},
                [ai = a.node, bi = bias.node](Tape& t, int self) {
                  const Tensor& G = t.grad_buf(self);
                  const std::size_t m = G.rows(), n = G.cols();
                  if (t.wants_grad(ai)) {
                    Tensor& g = t.grad_buf(ai);
                    for (std::size_t i = 0; i < G.numel(); ++i) g.data[i] += G.data[i];
                  }
                  if (t.wants_grad(bi)) {
                    Tensor& g = t.grad_buf(bi);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) g.data[j] += G.data[i * n + j];
                  }
                });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require<ShapeError>(A.same_shape(B), "mul: shape mismatch ", shape_str(A.shape), " vs ",
                      shape_str(B.shape));
  Tensor C(A.shape);
  for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = A.data[i] * B.data[i];
  return t.push("mul", std::move(C), {a.node, b.node}, [ai = a.node, bi = b.node](Tape& t, int self) {
    const Tensor& G = t.grad_buf(self);
    const Tensor& A = t.value_at(ai);
    const Tensor& B = t.value_at(bi);
    if (t.wants_grad(ai)) {
      Tensor& g = t.grad_buf(ai);
      for (std::size_t i = 0; i < G.numel(); ++i) g.data[i] += G.data[i] * B.data[i];
    }
    if (t.wants_grad(bi)) {
      Tensor& g = t.grad_buf(bi);
      for (std::size_t i = 0; i < G.numel(); ++i) g.data[i] += G.data[i] * A.data[i];
    }
  });
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  Tensor C(A.shape);
  for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = c * A.data[i];
  return t.push("scale", std::move(C), {a.node}, [ai = a.node, c](Tape& t, int self) {
    if (!t.wants_grad(ai)) return;
    const Tensor& G = t.grad_buf(self);
    Tensor& g = t.grad_buf(ai);
    for (std::size_t i = 0; i < G.numel(); ++i) g.data[i] += c * G.data[i];
  });
}

inline Var relu(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  Tensor C(A.shape);
  for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = A.data[i] > 0.0 ? A.data[i] : 0.0;
  return t.push("relu", std::move(C), {a.node}, [ai = a.node](Tape& t, int self) {
    if (!t.wants_grad(ai)) return;
    const Tensor& G = t.grad_buf(self);
    const Tensor& A = t.value_at(ai);
    Tensor& g = t.grad_buf(ai);
    for (std::size_t i = 0; i < G.numel(); ++i)
      if (A.data[i] > 0.0) g.data[i] += G.data[i];
  });
}

inline Var gelu(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  Tensor C(A.shape);
  constexpr double inv_sqrt2 = 0.7071067811865476;
  for (std::size_t i = 0; i < C.numel(); ++i) {
    const double x = A.data[i];
    C.data[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  return t.push("gelu", std::move(C), {a.node}, [ai = a.node](Tape& t, int self) {
    if (!t.wants_grad(ai)) return;
    const Tensor& G = t.grad_buf(self);
    const Tensor& A = t.value_at(ai);
    Tensor& g = t.grad_buf(ai);
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < G.numel(); ++i) {
      const double x = A.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      g.data[i] += G.data[i] * (cdf + x * pdf);
    }
  });
}

inline Var log(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  Tensor C(A.shape);
  for (std::size_t i = 0; i < C.numel(); ++i) {
    require<NumericError>(A.data[i] > 0.0, "log: non-positive input ", A.data[i]);
    C.data[i] = std::log(A.data[i]);
  }
  return t.push("log", std::move(C), {a.node}, [ai = a.node](Tape& t, int self) {
    if (!t.wants_grad(ai)) return;
    const Tensor& G = t.grad_buf(self);
    const Tensor& A = t.value_at(ai);
    Tensor& g = t.grad_buf(ai);
    for (std::size_t i = 0; i < G.numel(); ++i) g.data[i] += G.data[i] / A.data[i];
  });
}

// Row-wise softmax with max subtraction.
inline Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  require<ShapeError>(A.rank() == 2, "softmax_rows: expected rank-2, got ", shape_str(A.shape));
  const std::size_t m = A.rows(), n = A.cols();
  Tensor C(A.shape);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = &A.data[i * n];
    double* y = &C.data[i * n];
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return t.push("softmax_rows", std::move(C), {a.node}, [ai = a.node](Tape& t, int self) {
    if (!t.wants_grad(ai)) return;
    const Tensor& G = t.grad_buf(self);
    const Tensor& S = t.value_at(self);
    Tensor& g = t.grad_buf(ai);
    const std::size_t m = S.rows(), n = S.cols();
    for (std::size_t i = 0; i < m; ++i) {
      const double* s = &S.data[i * n];
      const double* gr = &G.data[i * n];
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * s[j];
      double* gx = &g.data[i * n];
      for (std::size_t j = 0; j < n; ++j) gx[j] += s[j] * (gr[j] - dot);
    }
  });
}

inline Var log_softmax_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  require<ShapeError>(A.rank() == 2, "log_softmax_rows: expected rank-2, got ", shape_str(A.shape));
  const std::size_t m = A.rows(), n = A.cols();
  Tensor C(A.shape);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = &A.data[i * n];
    double* y = &C.data[i * n];
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lse;
  }
  return t.push("log_softmax_rows", std::move(C), {a.node}, [ai = a.node](Tape& t, int self) {
    if (!t.wants_grad(ai)) return;
    const Tensor& G = t.grad_buf(self);
    const Tensor& Y = t.value_at(self);
    Tensor& g = t.grad_buf(ai);
    const std::size_t m = Y.rows(), n = Y.cols();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = &Y.data[i * n];
      const double* gr = &G.data[i * n];
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += gr[j];
      double* gx = &g.data[i * n];
      for (std::size_t j = 0; j < n; ++j) gx[j] += gr[j] - std::exp(y[j]) * gsum;
    }
  });
}

// Square attention scores; row i is softmaxed over columns 0..i, the rest 0.
inline Var causal_softmax_rows(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  require<ShapeError>(A.rank() == 2 && A.rows() == A.cols(),
                      "causal_softmax_rows: expected square matrix, got ", shape_str(A.shape));
  const std::size_t n = A.rows();
  Tensor C(A.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = &A.data[i * n];
    double* y = &C.data[i * n];
    double mx = x[0];
    for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j <= i; ++j) y[j] /= z;
  }
  return t.push("causal_softmax_rows", std::move(C), {a.node}, [ai = a.node](Tape& t, int self) {
    if (!t.wants_grad(ai)) return;
    const Tensor& G = t.grad_buf(self);
    const Tensor& S = t.value_at(self);
    Tensor& g = t.grad_buf(ai);
    const std::size_t n = S.rows();
    for (std::size_t i = 0; i < n; ++i) {
      const double* s = &S.data[i * n];
      const double* gr = &G.data[i * n];
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += gr[j] * s[j];
      double* gx = &g.data[i * n];
      for (std::size_t j = 0; j <= i; ++j) gx[j] += s[j] * (gr[j] - dot);
    }
  });
}

// Per-row normalization with learned gain/shift: gamma * (x - mu) / sigma + beta.
inline Var layer_norm_rows(Var a, Var gamma, Var beta, double eps = 1e-5) {
  Tape& t = detail::same_tape(a, gamma);
  detail::same_tape(a, beta);
  const Tensor& A = t.value(a);
  const Tensor& Gm = t.value(gamma);
  const Tensor& Bt = t.value(beta);
  require<ShapeError>(A.rank() == 2 && Gm.rank() == 1 && Bt.rank() == 1 &&
                          Gm.shape[0] == A.cols() && Bt.shape[0] == A.cols(),
                      "layer_norm_rows: shape mismatch ", shape_str(A.shape), " vs gamma ",
                      shape_str(Gm.shape), ", beta ", shape_str(Bt.shape));
  const std::size_t m = A.rows(), n = A.cols();
  Tensor C(A.shape);
  Tensor xhat(A.shape);
  Tensor inv_sigma({m});
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = &A.data[i * n];
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma.data[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (x[j] - mu) * is;
      xhat.data[i * n + j] = xh;
      C.data[i * n + j] = Gm.data[j] * xh + Bt.data[j];
    }
  }
  return t.push("layer_norm_rows", std::move(C), {a.node, gamma.node, beta.node},
                [ai = a.node, gi = gamma.node, bi = beta.node, xhat = std::move(xhat),
                 inv_sigma = std::move(inv_sigma)](Tape& t, int self) {
                  const Tensor& G = t.grad_buf(self);
                  const Tensor& Gm = t.value_at(gi);
                  const std::size_t m = G.rows(), n = G.cols();
                  if (t.wants_grad(gi)) {
                    Tensor& gg = t.grad_buf(gi);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j)
                        gg.data[j] += G.data[i * n + j] * xhat.data[i * n + j];
                  }
                  if (t.wants_grad(bi)) {
                    Tensor& gb = t.grad_buf(bi);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) gb.data[j] += G.data[i * n + j];
                  }
                  if (t.wants_grad(ai)) {
                    Tensor& gx = t.grad_buf(ai);
                    std::vector<double> dxh(n);
                    for (std::size_t i = 0; i < m; ++i) {
                      double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        dxh[j] = G.data[i * n + j] * Gm.data[j];
                        mean_dxh += dxh[j];
                        mean_dxh_xh += dxh[j] * xhat.data[i * n + j];
                      }
                      mean_dxh /= static_cast<double>(n);
                      mean_dxh_xh /= static_cast<double>(n);
                      const double is = inv_sigma.data[i];
                      for (std::size_t j = 0; j < n; ++j)
                        gx.data[i * n + j] +=
                            is * (dxh[j] - mean_dxh - xhat.data[i * n + j] * mean_dxh_xh);
                    }
                  }
                });
}

// Gather rows of an embedding table: out[k] = table[ids[k]].
inline Var embedding_rows(Var table, const std::vector<int>& ids) {
  Tape& t = *table.tape;
  const Tensor& T = t.value(table);
  require<ShapeError>(T.rank() == 2, "embedding_rows: table must be rank-2, got ",
                      shape_str(T.shape));
  const std::size_t n = T.cols();
  Tensor C({ids.size(), n});
  for (std::size_t k = 0; k < ids.size(); ++k) {
    require<ShapeError>(ids[k] >= 0 && static_cast<std::size_t>(ids[k]) < T.rows(),
                        "embedding_rows: id ", ids[k], " out of range for table ",
                        shape_str(T.shape));
    std::copy_n(&T.data[static_cast<std::size_t>(ids[k]) * n], n, &C.data[k * n]);
  }
  return t.push("embedding_rows", std::move(C), {table.node}, [ti = table.node, ids](Tape& t, int self) {
    if (!t.wants_grad(ti)) return;
    const Tensor& G = t.grad_buf(self);
    Tensor& g = t.grad_buf(ti);
    const std::size_t n = G.cols();
    for (std::size_t k = 0; k < ids.size(); ++k) {
      double* dst = &g.data[static_cast<std::size_t>(ids[k]) * n];
      const double* src = &G.data[k * n];
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: empty input");
  Tape& t = *parts[0].tape;
  std::size_t rows = 0;
  const std::size_t n = t.value(parts[0]).cols();
  std::vector<int> idx;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    detail::same_tape(parts[0], p);
    const Tensor& P = t.value(p);
    require<ShapeError>(P.rank() == 2 && P.cols() == n, "concat_rows: column mismatch ",
                        shape_str(P.shape), " vs expected cols ", n);
    idx.push_back(p.node);
    offsets.push_back(rows);
    rows += P.rows();
  }
  Tensor C({rows, n});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Tensor& P = t.value_at(idx[k]);
    std::copy(P.data.begin(), P.data.end(), &C.data[offsets[k] * n]);
  }
  return t.push("concat_rows", std::move(C), idx,
                [idx, offsets](Tape& t, int self) {
                  const Tensor& G = t.grad_buf(self);
                  const std::size_t n = G.cols();
                  for (std::size_t k = 0; k < idx.size(); ++k) {
                    if (!t.wants_grad(idx[k])) continue;
                    Tensor& g = t.grad_buf(idx[k]);
                    const std::size_t rows = g.rows();
                    const double* src = &G.data[offsets[k] * n];
                    for (std::size_t i = 0; i < rows * n; ++i) g.data[i] += src[i];
                  }
                });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: empty input");
  Tape& t = *parts[0].tape;
  const std::size_t m = t.value(parts[0]).rows();
  std::size_t cols = 0;
  std::vector<int> idx;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    detail::same_tape(parts[0], p);
    const Tensor& P = t.value(p);
    require<ShapeError>(P.rank() == 2 && P.rows() == m, "concat_cols: row mismatch ",
                        shape_str(P.shape), " vs expected rows ", m);
    idx.push_back(p.node);
    offsets.push_back(cols);
    cols += P.cols();
  }
  Tensor C({m, cols});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Tensor& P = t.value_at(idx[k]);
    const std::size_t w = P.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(&P.data[i * w], w, &C.data[i * cols + offsets[k]]);
  }
  return t.push("concat_cols", std::move(C), idx,
                [idx, offsets](Tape& t, int self) {
                  const Tensor& G = t.grad_buf(self);
                  const std::size_t m = G.rows(), cols = G.cols();
                  for (std::size_t k = 0; k < idx.size(); ++k) {
                    if (!t.wants_grad(idx[k])) continue;
                    Tensor& g = t.grad_buf(idx[k]);
                    const std::size_t w = g.cols();
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < w; ++j)
                        g.data[i * w + j] += G.data[i * cols + offsets[k] + j];
                  }
                });
}

inline Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  require<ShapeError>(A.rank() == 2 && r0 <= r1 && r1 <= A.rows(), "slice_rows: range [", r0, ",",
                      r1, ") out of bounds for ", shape_str(A.shape));
  const std::size_t n = A.cols();
  Tensor C({r1 - r0, n});
  std::copy_n(&A.data[r0 * n], (r1 - r0) * n, C.data.data());
  return t.push("slice_rows", std::move(C), {a.node}, [ai = a.node, r0](Tape& t, int self) {
    if (!t.wants_grad(ai)) return;
    const Tensor& G = t.grad_buf(self);
    Tensor& g = t.grad_buf(ai);
    const std::size_t n = G.cols();
    for (std::size_t i = 0; i < G.rows(); ++i)
      for (std::size_t j = 0; j < n; ++j) g.data[(r0 + i) * n + j] += G.data[i * n + j];
  });
}

inline Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  require<ShapeError>(A.rank() == 2 && c0 <= c1 && c1 <= A.cols(), "slice_cols: range [", c0, ",",
                      c1, ") out of bounds for ", shape_str(A.shape));
  const std::size_t m = A.rows(), n = A.cols(), w = c1 - c0;
  Tensor C({m, w});
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(&A.data[i * n + c0], w, &C.data[i * w]);
  return t.push("slice_cols", std::move(C), {a.node}, [ai = a.node, c0](Tape& t, int self) {
    if (!t.wants_grad(ai)) return;
    const Tensor& G = t.grad_buf(self);
    Tensor& g = t.grad_buf(ai);
    const std::size_t m = G.rows(), w = G.cols(), n = g.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g.data[i * n + c0 + j] += G.data[i * w + j];
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  double s = 0.0;
  for (double v : A.data) s += v;
  return t.push("sum", Tensor::scalar(s), {a.node}, [ai = a.node](Tape& t, int self) {
    if (!t.wants_grad(ai)) return;
    const double gs = t.grad_buf(self).data[0];
    Tensor& g = t.grad_buf(ai);
    for (auto& v : g.data) v += gs;
  });
}

// out[k] = a[rows[k], cols[k]]; used to pick target-token log-probs.
inline Var gather(Var a, const std::vector<std::pair<std::size_t, std::size_t>>& at) {
  Tape& t = *a.tape;
  const Tensor& A = t.value(a);
  require<ShapeError>(A.rank() == 2, "gather: expected rank-2, got ", shape_str(A.shape));
  Tensor C({at.size()});
  for (std::size_t k = 0; k < at.size(); ++k) {
    require<ShapeError>(at[k].first < A.rows() && at[k].second < A.cols(), "gather: index (",
                        at[k].first, ",", at[k].second, ") out of bounds for ",
                        shape_str(A.shape));
    C.data[k] = A.at(at[k].first, at[k].second);
  }
  return t.push("gather", std::move(C), {a.node}, [ai = a.node, at](Tape& t, int self) {
    if (!t.wants_grad(ai)) return;
    const Tensor& G = t.grad_buf(self);
    Tensor& g = t.grad_buf(ai);
    const std::size_t n = g.cols();
    for (std::size_t k = 0; k < at.size(); ++k)
      g.data[at[k].first * n + at[k].second] += G.data[k];
  });
}

// {H, W, C} image -> [num_patches x patch*patch*C], patches in row-major
// order, features ordered (dy, dx, channel).
inline Var extract_patches(Var image, std::size_t patch) {
  Tape& t = *image.tape;
  const Tensor& A = t.value(image);
  require<ShapeError>(A.rank() == 3, "extract_patches: expected rank-3 image, got ",
                      shape_str(A.shape));
  const std::size_t H = A.shape[0], W = A.shape[1], C = A.shape[2];
  require<ShapeError>(H % patch == 0 && W % patch == 0, "extract_patches: image ",
                      shape_str(A.shape), " not divisible by patch ", patch);
  const std::size_t ph = H / patch, pw = W / patch, feat = patch * patch * C;
  Tensor out({ph * pw, feat});
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px) {
      double* dst = &out.data[(py * pw + px) * feat];
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t c = 0; c < C; ++c)
            *dst++ = A.data[((py * patch + dy) * W + (px * patch + dx)) * C + c];
    }
  return t.push("extract_patches", std::move(out), {image.node},
                [ii = image.node, patch](Tape& t, int self) {
                  if (!t.wants_grad(ii)) return;
                  const Tensor& G = t.grad_buf(self);
                  Tensor& g = t.grad_buf(ii);
                  const std::size_t H = g.shape[0], W = g.shape[1], C = g.shape[2];
                  const std::size_t pw = W / patch, feat = patch * patch * C;
                  for (std::size_t p = 0; p < G.rows(); ++p) {
                    const std::size_t py = p / pw, px = p % pw;
                    const double* src = &G.data[p * feat];
                    for (std::size_t dy = 0; dy < patch; ++dy)
                      for (std::size_t dx = 0; dx < patch; ++dx)
                        for (std::size_t c = 0; c < C; ++c)
                          g.data[((py * patch + dy) * W + (px * patch + dx)) * C + c] += *src++;
                  }
                });
}

}  // namespace refusal::ad
