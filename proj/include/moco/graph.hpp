#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "moco/tensor.hpp"

namespace moco {

// Handle to a node of a Graph.
struct Var {
  std::size_t id = 0;
  friend bool operator==(const Var&, const Var&) = default;
};

enum class OpKind {
  kLeaf,
  kConstant,
  kMatmul,
  kConv2d,
  kRelu,
  kAdd,
  kScale,
  kBiasAdd,
  kGlobalAvgPool,
  kL2Normalize,
  kRowDot,
  kConcatCols,
  kSoftmaxCrossEntropy,
  kSum,
};

std::string_view op_name(OpKind kind);

// Reverse-mode tape. Nodes are appended in construction order, which is
// a topological order by construction. Leaves bind to caller-owned tensors
// and receive accumulated gradients on backward(); constants are detached.
template <typename Scalar>
class Graph {
 public:
  struct Attrs {
    Index stride = 1;
    Index pad = 0;
    double factor = 1.0;
    bool transpose_rhs = false;
    std::vector<Index> labels;
  };

  struct Node {
    OpKind kind = OpKind::kConstant;
    std::vector<Var> inputs;
    Tensor<Scalar> value;
    Attrs attrs;
    std::vector<Vector<Scalar>> saved;
    Tensor<Scalar>* target = nullptr;
    bool requires_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // `t` must outlive the graph; backward() adds into t.grad.
  Var leaf(Tensor<Scalar>& t);
  Var constant(Tensor<Scalar> t);

  const Tensor<Scalar>& value(Var v) const { return node(v).value; }
  const Shape& shape(Var v) const { return node(v).value.shape; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Accumulates d(loss)/d(leaf) into every bound leaf tensor. Leaves that
  // do not reach the loss end up with an all-zero gradient buffer.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  std::size_t count(OpKind kind) const;

  // Bytes held for the backward pass: values and saved buffers of every
  // gradient-bearing interior node. Leaves and constants are excluded.
  std::size_t retained_bytes() const;

  // Hash of every relu activation pattern; changes iff some relu input
  // crossed zero.
  std::uint64_t relu_signature() const;

  // Rows that hit the l2_normalize zero-norm floor.
  std::size_t zero_norm_rows() const { return zero_norm_rows_; }

  Var record(OpKind kind, std::vector<Var> inputs, Tensor<Scalar> value,
             Attrs attrs = {}, std::vector<Vector<Scalar>> saved = {});
  const Node& node(Var v) const { return nodes_.at(v.id); }
  void note_zero_norm_rows(std::size_t n) { zero_norm_rows_ += n; }

 private:
  void backward_node(const Node& n, const Vector<Scalar>& g,
                     std::vector<Vector<Scalar>>& adj);

  std::vector<Node> nodes_;
  std::size_t zero_norm_rows_ = 0;
};

// a[M x K] * b[K x N]; inner products accumulate in double.
template <typename Scalar>
Var matmul(Graph<Scalar>& g, Var a, Var b);

// a[M x K] * b[N x K]^T.
template <typename Scalar>
Var matmul_nt(Graph<Scalar>& g, Var a, Var b);

// Cross-correlation of x[B x C x H x W] with w[F x C x kh x kw].
template <typename Scalar>
Var conv2d(Graph<Scalar>& g, Var x, Var w, Index stride, Index pad);

template <typename Scalar>
Var relu(Graph<Scalar>& g, Var x);

template <typename Scalar>
Var add(Graph<Scalar>& g, Var a, Var b);

template <typename Scalar>
Var scale(Graph<Scalar>& g, Var x, double factor);

// Adds b[C] along dimension 1 of x (rows of a matrix, channels of an image batch).
template <typename Scalar>
Var bias_add(Graph<Scalar>& g, Var x, Var b);

// x[B x C x H x W] -> [B x C].
template <typename Scalar>
Var global_avg_pool(Graph<Scalar>& g, Var x);

inline constexpr double kNormFloor = 1e-12;

// Row-wise x / (||x|| + 1e-12).
template <typename Scalar>
Var l2_normalize(Graph<Scalar>& g, Var x);

// [B x D], [B x D] -> [B x 1] of row inner products.
template <typename Scalar>
Var row_dot(Graph<Scalar>& g, Var a, Var b);

template <typename Scalar>
Var concat_cols(Graph<Scalar>& g, Var a, Var b);

// Mean over rows of -log softmax(logits)[label].
template <typename Scalar>
Var softmax_cross_entropy(Graph<Scalar>& g, Var logits,
                          std::span<const Index> labels);

template <typename Scalar>
Var sum(Graph<Scalar>& g, Var x);

}  // namespace moco
