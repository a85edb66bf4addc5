#pragma once

#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knowbias/error.hpp"
#include "knowbias/tensor.hpp"

namespace knowbias {

enum class OpKind : std::uint8_t {
  input,         // leaf; value supplied by the caller
  matmul,        // A[m x k] . B[k x n]
  matmul_nt,     // A[m x k] . B[n x k]^T
  add,           // same shape, or B a [1 x n] row added to every row of A
  mul,           // elementwise, same shape
  silu,
  gelu,          // exact (erf) form
  softmax_row,   // row-wise, max-subtracted; optional causal offset
  rms_norm,      // x / rms(x) * g, row-wise; g is [1 x n]
  embed_lookup,  // rows of a table selected by attrs.indices
  slice,         // rows [r0, r1) x cols [c0, c1)
  concat_rows,
  concat_cols,
  scale,         // multiply by attrs.scalar
  log,
  select_index,  // flat indices -> [1 x k]
  sum,           // -> [1 x 1]
};

inline constexpr std::size_t kOpKindCount = 17;

inline const char* to_string(OpKind kind) {
  static constexpr std::array<const char*, kOpKindCount> names = {
      "input", "matmul", "matmul-nt", "add", "elementwise-mul", "silu", "gelu", "softmax-row",
      "rms-norm", "embed-lookup", "slice", "concat-rows", "concat-cols", "scale-by-constant",
      "log", "select-index", "sum"};
  const auto i = static_cast<std::size_t>(kind);
  return i < names.size() ? names[i] : "unknown";
}

inline OpKind op_kind_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kOpKindCount; ++i) {
    if (name == to_string(static_cast<OpKind>(i))) return static_cast<OpKind>(i);
  }
  fail(ErrorCode::unknown_op, "unknown op-kind '" + std::string(name) + "'");
}

struct NodeId {
  std::uint32_t index = 0;
  friend auto operator<=>(NodeId, NodeId) = default;
};

struct OpAttrs {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  double scalar = 0.0;                  // scale factor; rms-norm epsilon
  std::size_t causal_offset = npos;     // softmax-row: row j sees cols <= offset + j
  std::array<std::size_t, 4> range{};   // slice: r0, r1, c0, c1
  std::vector<std::size_t> indices;     // embed-lookup rows; select-index flat positions
};

struct Node {
  OpKind kind = OpKind::input;
  std::vector<NodeId> inputs;
  OpAttrs attrs;
  Tensor value;
  const Tensor* external = nullptr;  // non-owning constant (model weights)
  bool differentiable = true;

  const Tensor& output() const noexcept { return external ? *external : value; }
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
inline double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline void expect_matrix(const Tensor& t, const char* op) {
  if (t.rank() > 2)
    fail(ErrorCode::shape_mismatch,
         std::string(op) + ": rank " + std::to_string(t.rank()) + " tensors are not supported");
}

inline std::size_t softmax_limit(const OpAttrs& a, std::size_t row, std::size_t cols) {
  if (a.causal_offset == OpAttrs::npos) return cols;
  return std::min(cols, a.causal_offset + row + 1);
}

inline Tensor evaluate(OpKind kind, std::span<const Tensor* const> in, const OpAttrs& a) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n)
      fail(ErrorCode::shape_mismatch, std::string(to_string(kind)) + ": expected " + std::to_string(n) +
                                          " inputs, got " + std::to_string(in.size()));
  };
  for (const Tensor* t : in) expect_matrix(*t, to_string(kind));

  switch (kind) {
    case OpKind::input:
      fail(ErrorCode::invalid_argument, "input nodes are created with Tape::input");

    case OpKind::matmul: {
      arity(2);
      const Tensor& A = *in[0];
      const Tensor& B = *in[1];
      if (A.cols() != B.rows())
        fail(ErrorCode::shape_mismatch, "matmul: " + shape_str(A.shape()) + " . " + shape_str(B.shape()));
      const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
      Tensor C = Tensor::matrix(m, n);
      const double* a = A.data().data();
      const double* b = B.data().data();
      for (std::size_t i = 0; i < m; ++i) {
        double* c = C.data().data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = a[i * k + p];
          const double* brow = b + p * n;
          for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
        }
      }
      return C;
    }

    case OpKind::matmul_nt: {
      arity(2);
      const Tensor& A = *in[0];
      const Tensor& B = *in[1];
      if (A.cols() != B.cols())
        fail(ErrorCode::shape_mismatch,
             "matmul-nt: " + shape_str(A.shape()) + " . " + shape_str(B.shape()) + "^T");
      const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
      Tensor C = Tensor::matrix(m, n);
      const double* a = A.data().data();
      const double* b = B.data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
          C(i, j) = s;
        }
      }
      return C;
    }

    case OpKind::add: {
      arity(2);
      const Tensor& A = *in[0];
      const Tensor& B = *in[1];
      Tensor C = Tensor::matrix(A.rows(), A.cols());
      if (A.same_shape(B)) {
        for (std::size_t i = 0; i < A.numel(); ++i) C[i] = A[i] + B[i];
      } else {
        if (!(B.rows() == 1 && B.cols() == A.cols()))
          fail(ErrorCode::shape_mismatch, "add: " + shape_str(A.shape()) + " + " + shape_str(B.shape()));
        for (std::size_t r = 0; r < A.rows(); ++r)
          for (std::size_t c = 0; c < A.cols(); ++c) C(r, c) = A(r, c) + B[c];
      }
      return C;
    }

    case OpKind::mul: {
      arity(2);
      const Tensor& A = *in[0];
      const Tensor& B = *in[1];
      if (!A.same_shape(B))
        fail(ErrorCode::shape_mismatch,
             "elementwise-mul: " + shape_str(A.shape()) + " * " + shape_str(B.shape()));
      Tensor C = Tensor::matrix(A.rows(), A.cols());
      for (std::size_t i = 0; i < A.numel(); ++i) C[i] = A[i] * B[i];
      return C;
    }

    case OpKind::silu:
    case OpKind::gelu:
    case OpKind::log:
    case OpKind::scale: {
      arity(1);
      const Tensor& X = *in[0];
      Tensor Y = Tensor::matrix(X.rows(), X.cols());
      for (std::size_t i = 0; i < X.numel(); ++i) {
        const double x = X[i];
        switch (kind) {
          case OpKind::silu: Y[i] = x * sigmoid(x); break;
          case OpKind::gelu: Y[i] = gelu(x); break;
          case OpKind::scale: Y[i] = a.scalar * x; break;
          default:
            require(x > 0.0, ErrorCode::non_finite, "log of non-positive value");
            Y[i] = std::log(x);
        }
      }
      return Y;
    }

    case OpKind::softmax_row: {
      arity(1);
      const Tensor& X = *in[0];
      Tensor Y = Tensor::matrix(X.rows(), X.cols());
      for (std::size_t r = 0; r < X.rows(); ++r) {
        const std::size_t lim = softmax_limit(a, r, X.cols());
        require(lim > 0, ErrorCode::shape_mismatch, "softmax-row: fully masked row");
        double mx = X(r, 0);
        for (std::size_t c = 1; c < lim; ++c) mx = std::max(mx, X(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < lim; ++c) {
          Y(r, c) = std::exp(X(r, c) - mx);
          z += Y(r, c);
        }
        for (std::size_t c = 0; c < lim; ++c) Y(r, c) /= z;
      }
      return Y;
    }

    case OpKind::rms_norm: {
      arity(2);
      const Tensor& X = *in[0];
      const Tensor& G = *in[1];
      if (!(G.rows() == 1 && G.cols() == X.cols()))
        fail(ErrorCode::shape_mismatch,
             "rms-norm: gain " + shape_str(G.shape()) + " for input " + shape_str(X.shape()));
      Tensor Y = Tensor::matrix(X.rows(), X.cols());
      const double n = static_cast<double>(X.cols());
      for (std::size_t r = 0; r < X.rows(); ++r) {
        double ss = 0.0;
        for (std::size_t c = 0; c < X.cols(); ++c) ss += X(r, c) * X(r, c);
        const double inv = 1.0 / std::sqrt(ss / n + a.scalar);
        for (std::size_t c = 0; c < X.cols(); ++c) Y(r, c) = X(r, c) * inv * G[c];
      }
      return Y;
    }

    case OpKind::embed_lookup: {
      arity(1);
      const Tensor& T = *in[0];
      Tensor Y = Tensor::matrix(a.indices.size(), T.cols());
      for (std::size_t r = 0; r < a.indices.size(); ++r) {
        if (a.indices[r] >= T.rows())
          fail(ErrorCode::shape_mismatch, "embed-lookup: index " + std::to_string(a.indices[r]) +
                                              " out of range " + std::to_string(T.rows()));
        std::copy_n(&T(a.indices[r], 0), T.cols(), &Y(r, 0));
      }
      return Y;
    }

    case OpKind::slice: {
      arity(1);
      const Tensor& X = *in[0];
      const auto [r0, r1, c0, c1] = a.range;
      if (!(r0 < r1 && r1 <= X.rows() && c0 < c1 && c1 <= X.cols()))
        fail(ErrorCode::shape_mismatch, "slice: range out of bounds for " + shape_str(X.shape()));
      Tensor Y = Tensor::matrix(r1 - r0, c1 - c0);
      for (std::size_t r = r0; r < r1; ++r) std::copy_n(&X(r, c0), c1 - c0, &Y(r - r0, 0));
      return Y;
    }

    case OpKind::concat_rows: {
      require(!in.empty(), ErrorCode::shape_mismatch, "concat-rows: no inputs");
      std::size_t rows = 0;
      for (const Tensor* t : in) {
        require(t->cols() == in[0]->cols(), ErrorCode::shape_mismatch,
                "concat-rows: column mismatch");
        rows += t->rows();
      }
      Tensor Y = Tensor::matrix(rows, in[0]->cols());
      std::size_t off = 0;
      for (const Tensor* t : in) {
        std::copy(t->storage().begin(), t->storage().end(), Y.storage().begin() + static_cast<std::ptrdiff_t>(off));
        off += t->numel();
      }
      return Y;
    }

    case OpKind::concat_cols: {
      require(!in.empty(), ErrorCode::shape_mismatch, "concat-cols: no inputs");
      std::size_t cols = 0;
      for (const Tensor* t : in) {
        require(t->rows() == in[0]->rows(), ErrorCode::shape_mismatch, "concat-cols: row mismatch");
        cols += t->cols();
      }
      Tensor Y = Tensor::matrix(in[0]->rows(), cols);
      std::size_t off = 0;
      for (const Tensor* t : in) {
        for (std::size_t r = 0; r < t->rows(); ++r) std::copy_n(&(*t)(r, 0), t->cols(), &Y(r, off));
        off += t->cols();
      }
      return Y;
    }

    case OpKind::select_index: {
      arity(1);
      const Tensor& X = *in[0];
      Tensor Y = Tensor::matrix(1, a.indices.size());
      for (std::size_t i = 0; i < a.indices.size(); ++i) {
        if (a.indices[i] >= X.numel())
          fail(ErrorCode::shape_mismatch,
               "select-index: index " + std::to_string(a.indices[i]) + " out of range");
        Y[i] = X[a.indices[i]];
      }
      return Y;
    }

    case OpKind::sum: {
      arity(1);
      double s = 0.0;
      for (double v : in[0]->data()) s += v;
      return Tensor::scalar(s);
    }
  }
  fail(ErrorCode::unknown_op, "unknown op-kind " + std::to_string(static_cast<int>(kind)));
}

}  // namespace detail

// Define-by-run record of tensor operations. Nodes are appended in execution
// order, so every node's inputs precede it.
class Tape {
 public:
  NodeId input(Tensor value) {
    detail::expect_matrix(value, "input");
    require(value.all_finite(), ErrorCode::non_finite, "input: non-finite value");
    nodes_.push_back(Node{OpKind::input, {}, {}, std::move(value), nullptr, true});
    return last();
  }

  // A leaf excluded from differentiation. backward() reports zeros for it and
  // for every node that depends only on constants.
  NodeId constant(Tensor value) {
    detail::expect_matrix(value, "constant");
    require(value.all_finite(), ErrorCode::non_finite, "constant: non-finite value");
    nodes_.push_back(Node{OpKind::input, {}, {}, std::move(value), nullptr, false});
    return last();
  }

  // Like constant(), but refers to caller-owned storage that must outlive the tape.
  NodeId reference(const Tensor& value) {
    detail::expect_matrix(value, "reference");
    nodes_.push_back(Node{OpKind::input, {}, {}, Tensor{}, &value, false});
    return last();
  }

  NodeId record(OpKind kind, std::span<const NodeId> inputs, OpAttrs attrs = {}) {
    if (static_cast<std::size_t>(kind) >= kOpKindCount)
      fail(ErrorCode::unknown_op, "unknown op-kind " + std::to_string(static_cast<int>(kind)));
    std::vector<const Tensor*> values;
    values.reserve(inputs.size());
    for (NodeId id : inputs) values.push_back(&value(id));
    Tensor out = detail::evaluate(kind, values, attrs);
    if (!out.all_finite())
      fail(ErrorCode::non_finite, std::string(to_string(kind)) + ": produced a non-finite value");
    bool diff = false;
    for (NodeId id : inputs) diff = diff || nodes_[id.index].differentiable;
    nodes_.push_back(
        Node{kind, {inputs.begin(), inputs.end()}, std::move(attrs), std::move(out), nullptr, diff});
    return last();
  }

  NodeId record(OpKind kind, std::initializer_list<NodeId> inputs, OpAttrs attrs = {}) {
    return record(kind, std::span<const NodeId>(inputs.begin(), inputs.size()), std::move(attrs));
  }

  NodeId matmul(NodeId a, NodeId b) { return record(OpKind::matmul, {a, b}); }
  NodeId matmul_nt(NodeId a, NodeId b) { return record(OpKind::matmul_nt, {a, b}); }
  NodeId add(NodeId a, NodeId b) { return record(OpKind::add, {a, b}); }
  NodeId mul(NodeId a, NodeId b) { return record(OpKind::mul, {a, b}); }
  NodeId silu(NodeId x) { return record(OpKind::silu, {x}); }
  NodeId gelu(NodeId x) { return record(OpKind::gelu, {x}); }
  NodeId log(NodeId x) { return record(OpKind::log, {x}); }
  NodeId sum(NodeId x) { return record(OpKind::sum, {x}); }

  NodeId softmax_row(NodeId x, std::size_t causal_offset = OpAttrs::npos) {
    OpAttrs a;
    a.causal_offset = causal_offset;
    return record(OpKind::softmax_row, {x}, std::move(a));
  }
  NodeId rms_norm(NodeId x, NodeId gain, double eps = 1e-6) {
    OpAttrs a;
    a.scalar = eps;
    return record(OpKind::rms_norm, {x, gain}, std::move(a));
  }
  NodeId embed_lookup(NodeId table, std::vector<std::size_t> ids) {
    OpAttrs a;
    a.indices = std::move(ids);
    return record(OpKind::embed_lookup, {table}, std::move(a));
  }
  NodeId slice(NodeId x, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    OpAttrs a;
    a.range = {r0, r1, c0, c1};
    return record(OpKind::slice, {x}, std::move(a));
  }
  NodeId scale(NodeId x, double c) {
    OpAttrs a;
    a.scalar = c;
    return record(OpKind::scale, {x}, std::move(a));
  }
  NodeId select_index(NodeId x, std::vector<std::size_t> flat) {
    OpAttrs a;
    a.indices = std::move(flat);
    return record(OpKind::select_index, {x}, std::move(a));
  }
  NodeId concat_rows(std::span<const NodeId> parts) { return record(OpKind::concat_rows, parts); }
  NodeId concat_cols(std::span<const NodeId> parts) { return record(OpKind::concat_cols, parts); }

  const Tensor& value(NodeId id) const {
    check(id);
    return nodes_[id.index].output();
  }
  const Node& node(NodeId id) const {
    check(id);
    return nodes_[id.index];
  }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool contains(NodeId id) const noexcept { return id.index < nodes_.size(); }

  // Recompute every non-input node from its recorded inputs.
  std::vector<Tensor> replay() const {
    std::vector<Tensor> out;
    out.reserve(nodes_.size());
    std::vector<const Tensor*> values;
    for (const Node& n : nodes_) {
      if (n.kind == OpKind::input) {
        out.push_back(n.output());
        continue;
      }
      values.clear();
      for (NodeId id : n.inputs) values.push_back(&out[id.index]);
      out.push_back(detail::evaluate(n.kind, values, n.attrs));
    }
    return out;
  }

 private:
  NodeId last() const { return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)}; }
  void check(NodeId id) const {
    if (!contains(id))
      fail(ErrorCode::invalid_argument, "node " + std::to_string(id.index) + " is not on the tape");
  }

  std::vector<Node> nodes_;
};

// d(output)/d(node) for every node on the tape. Nodes the output does not
// depend on map to zeros.
class GradientMap {
 public:
  GradientMap(std::vector<Tensor> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  const Tensor& operator[](NodeId id) const {
    if (id.index >= grads_.size())
      fail(ErrorCode::invalid_argument, "node " + std::to_string(id.index) + " is not on the tape");
    Tensor& g = grads_[id.index];
    if (g.empty()) g = Tensor(shapes_[id.index], 0.0);
    return g;
  }
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  mutable std::vector<Tensor> grads_;  // empty entries are materialized as zeros on access
  std::vector<Shape> shapes_;
};

namespace detail {

inline void accumulate(std::vector<Tensor>& g, std::vector<bool>& live, NodeId id, const Tensor& shape_of,
                       auto&& fn) {
  Tensor& t = g[id.index];
  if (!live[id.index]) {
    t = Tensor::matrix(shape_of.rows(), shape_of.cols());
    live[id.index] = true;
  }
  fn(t);
}

}  // namespace detail

inline GradientMap backward(const Tape& tape, NodeId output) {
  if (!tape.contains(output))
    fail(ErrorCode::invalid_argument,
         "backward: node " + std::to_string(output.index) + " is not on the tape");
  if (tape.value(output).numel() != 1)
    fail(ErrorCode::shape_mismatch,
         "backward: output must be scalar, got " + shape_str(tape.value(output).shape()));

  const std::size_t n = tape.size();
  std::vector<Tensor> g(n);
  std::vector<bool> live(n, false);
  g[output.index] = Tensor(tape.value(output).shape(), 1.0);
  live[output.index] = true;

  for (std::size_t idx = output.index + 1; idx-- > 0;) {
    if (!live[idx]) continue;
    const Node& node = tape.node(NodeId{static_cast<std::uint32_t>(idx)});
    const Tensor& dy = g[idx];
    const Tensor& y = node.value;
    auto in = [&](std::size_t k) -> const Tensor& { return tape.value(node.inputs[k]); };
    auto acc = [&](std::size_t k, auto&& fn) {
      if (!tape.node(node.inputs[k]).differentiable) return;
      detail::accumulate(g, live, node.inputs[k], in(k), fn);
    };

    switch (node.kind) {
      case OpKind::input:
        break;

      case OpKind::matmul: {
        const Tensor& A = in(0);
        const Tensor& B = in(1);
        const std::size_t m = A.rows(), k = A.cols(), nn = B.cols();
        const double* a = A.data().data();
        const double* b = B.data().data();
        const double* d = dy.data().data();
        acc(0, [&](Tensor& dA) {  // dC . B^T
          double* da = dA.data().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < nn; ++j) s += d[i * nn + j] * b[p * nn + j];
              da[i * k + p] += s;
            }
        });
        acc(1, [&](Tensor& dB) {  // A^T . dC
          double* db = dB.data().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double av = a[i * k + p];
              double* row = db + p * nn;
              const double* drow = d + i * nn;
              for (std::size_t j = 0; j < nn; ++j) row[j] += av * drow[j];
            }
        });
        break;
      }

      case OpKind::matmul_nt: {
        const Tensor& A = in(0);
        const Tensor& B = in(1);
        const std::size_t m = A.rows(), k = A.cols(), nn = B.rows();
        const double* a = A.data().data();
        const double* b = B.data().data();
        const double* d = dy.data().data();
        acc(0, [&](Tensor& dA) {  // dC . B
          double* da = dA.data().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < nn; ++j) {
              const double dv = d[i * nn + j];
              for (std::size_t p = 0; p < k; ++p) da[i * k + p] += dv * b[j * k + p];
            }
        });
        acc(1, [&](Tensor& dB) {  // dC^T . A
          double* db = dB.data().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < nn; ++j) {
              const double dv = d[i * nn + j];
              for (std::size_t p = 0; p < k; ++p) db[j * k + p] += dv * a[i * k + p];
            }
        });
        break;
      }

      case OpKind::add: {
        acc(0, [&](Tensor& dA) {
          for (std::size_t i = 0; i < dy.numel(); ++i) dA[i] += dy[i];
        });
        const bool row_bias = !in(0).same_shape(in(1));
        acc(1, [&](Tensor& dB) {
          if (!row_bias) {
            for (std::size_t i = 0; i < dy.numel(); ++i) dB[i] += dy[i];
          } else {
            for (std::size_t r = 0; r < dy.rows(); ++r)
              for (std::size_t c = 0; c < dy.cols(); ++c) dB[c] += dy(r, c);
          }
        });
        break;
      }

      case OpKind::mul: {
        const Tensor& A = in(0);
        const Tensor& B = in(1);
        acc(0, [&](Tensor& dA) {
          for (std::size_t i = 0; i < dy.numel(); ++i) dA[i] += dy[i] * B[i];
        });
        acc(1, [&](Tensor& dB) {
          for (std::size_t i = 0; i < dy.numel(); ++i) dB[i] += dy[i] * A[i];
        });
        break;
      }

      case OpKind::silu: {
        const Tensor& X = in(0);
        acc(0, [&](Tensor& dX) {
          for (std::size_t i = 0; i < dy.numel(); ++i) {
            const double s = detail::sigmoid(X[i]);
            dX[i] += dy[i] * s * (1.0 + X[i] * (1.0 - s));
          }
        });
        break;
      }

      case OpKind::gelu: {
        const Tensor& X = in(0);
        acc(0, [&](Tensor& dX) {
          for (std::size_t i = 0; i < dy.numel(); ++i) dX[i] += dy[i] * detail::gelu_grad(X[i]);
        });
        break;
      }

      case OpKind::scale: {
        acc(0, [&](Tensor& dX) {
          for (std::size_t i = 0; i < dy.numel(); ++i) dX[i] += node.attrs.scalar * dy[i];
        });
        break;
      }

      case OpKind::log: {
        const Tensor& X = in(0);
        acc(0, [&](Tensor& dX) {
          for (std::size_t i = 0; i < dy.numel(); ++i) dX[i] += dy[i] / X[i];
        });
        break;
      }

      case OpKind::softmax_row: {
        acc(0, [&](Tensor& dX) {
          for (std::size_t r = 0; r < y.rows(); ++r) {
            const std::size_t lim = detail::softmax_limit(node.attrs, r, y.cols());
            double dot = 0.0;
            for (std::size_t c = 0; c < lim; ++c) dot += dy(r, c) * y(r, c);
            for (std::size_t c = 0; c < lim; ++c) dX(r, c) += y(r, c) * (dy(r, c) - dot);
          }
        });
        break;
      }

      case OpKind::rms_norm: {
        const Tensor& X = in(0);
        const Tensor& G = in(1);
        const std::size_t cols = X.cols();
        const double nn = static_cast<double>(cols);
        std::vector<double> inv(X.rows());
        for (std::size_t r = 0; r < X.rows(); ++r) {
          double ss = 0.0;
          for (std::size_t c = 0; c < cols; ++c) ss += X(r, c) * X(r, c);
          inv[r] = 1.0 / std::sqrt(ss / nn + node.attrs.scalar);
        }
        acc(0, [&](Tensor& dX) {
          for (std::size_t r = 0; r < X.rows(); ++r) {
            double dot = 0.0;  // sum_c dy*g*x
            for (std::size_t c = 0; c < cols; ++c) dot += dy(r, c) * G[c] * X(r, c);
            const double k = inv[r] * inv[r] * inv[r] * dot / nn;
            for (std::size_t c = 0; c < cols; ++c)
              dX(r, c) += dy(r, c) * G[c] * inv[r] - X(r, c) * k;
          }
        });
        acc(1, [&](Tensor& dG) {
          for (std::size_t r = 0; r < X.rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) dG[c] += dy(r, c) * X(r, c) * inv[r];
        });
        break;
      }

      case OpKind::embed_lookup: {
        acc(0, [&](Tensor& dT) {
          for (std::size_t r = 0; r < node.attrs.indices.size(); ++r) {
            const std::size_t row = node.attrs.indices[r];
            for (std::size_t c = 0; c < dy.cols(); ++c) dT(row, c) += dy(r, c);
          }
        });
        break;
      }

      case OpKind::slice: {
        const auto [r0, r1, c0, c1] = node.attrs.range;
        acc(0, [&](Tensor& dX) {
          for (std::size_t r = r0; r < r1; ++r)
            for (std::size_t c = c0; c < c1; ++c) dX(r, c) += dy(r - r0, c - c0);
        });
        break;
      }

      case OpKind::concat_rows: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          const std::size_t len = in(k).numel();
          acc(k, [&](Tensor& dX) {
            for (std::size_t i = 0; i < len; ++i) dX[i] += dy[off + i];
          });
          off += len;
        }
        break;
      }

      case OpKind::concat_cols: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          const std::size_t cols = in(k).cols();
          acc(k, [&](Tensor& dX) {
            for (std::size_t r = 0; r < dX.rows(); ++r)
              for (std::size_t c = 0; c < cols; ++c) dX(r, c) += dy(r, off + c);
          });
          off += cols;
        }
        break;
      }

      case OpKind::select_index: {
        acc(0, [&](Tensor& dX) {
          for (std::size_t i = 0; i < node.attrs.indices.size(); ++i)
            dX[node.attrs.indices[i]] += dy[i];
        });
        break;
      }

      case OpKind::sum: {
        acc(0, [&](Tensor& dX) {
          for (std::size_t i = 0; i < dX.numel(); ++i) dX[i] += dy[0];
        });
        break;
      }
    }
  }

  std::vector<Shape> shapes(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& v = tape.value(NodeId{static_cast<std::uint32_t>(i)});
    shapes[i] = v.shape();
    if (!live[i]) continue;
    if (g[i].shape() != v.shape()) g[i] = Tensor(v.shape(), std::move(g[i].storage()));
    if (!g[i].all_finite())
      fail(ErrorCode::non_finite, "backward: non-finite gradient at node " + std::to_string(i) + " (" +
                                      to_string(tape.node(NodeId{static_cast<std::uint32_t>(i)}).kind) + ")");
  }
  return GradientMap(std::move(g), std::move(shapes));
}

// A scalar function expressed on a tape: given the tape and the input node,
// return the scalar output node.
using TapeFunction = std::function<NodeId(Tape&, NodeId)>;

inline double evaluate_scalar(const TapeFunction& f, const Tensor& x) {
  Tape tape;
  const NodeId out = f(tape, tape.input(x));
  const Tensor& v = tape.value(out);
  require(v.numel() == 1, ErrorCode::shape_mismatch, "function output is not scalar");
  return v[0];
}

// Max over coordinates of |analytic - central difference| / max(|analytic|, 1e-12).
inline double finite_diff_check(const TapeFunction& f, const Tensor& x, double eps) {
  if (!(eps > 0.0 && std::isfinite(eps)))
    fail(ErrorCode::invalid_argument, "finite_diff_check: invalid step " + std::to_string(eps));
  Tape tape;
  const NodeId xin = tape.input(x);
  const NodeId out = f(tape, xin);
  const GradientMap grads = backward(tape, out);
  const Tensor& analytic = grads[xin];

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = evaluate_scalar(f, probe);
    probe[i] = orig - eps;
    const double fm = evaluate_scalar(f, probe);
    probe[i] = orig;
    require(std::isfinite(fp) && std::isfinite(fm), ErrorCode::non_finite,
            "finite_diff_check: non-finite function value");
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]), 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace knowbias
