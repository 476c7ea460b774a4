#include "moco/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace moco {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kAdd: return "add";
    case OpKind::kScale: return "scale";
    case OpKind::kBiasAdd: return "bias_add";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kL2Normalize: return "l2_normalize";
    case OpKind::kRowDot: return "row_dot";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kSum: return "sum";
  }
  return "?";
}

namespace {

void require_rank(const Shape& s, std::size_t rank, std::string_view op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " + to_string(s));
  }
}

[[noreturn]] void mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " +
                       to_string(a) + " and " + to_string(b));
}

template <typename Scalar>
RowMatrix<double> as_double(const ConstMatrixMap<Scalar>& m) {
  return m.template cast<double>();
}

struct ConvGeometry {
  Index batch, channels, height, width;
  Index filters, kh, kw;
  Index stride, pad;
  Index out_h, out_w;

  Index patch() const { return channels * kh * kw; }
  Index positions() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, Index stride, Index pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d kernel");
  if (x[1] != w[1]) mismatch("conv2d", x, w);
  if (stride <= 0 || pad < 0) {
    throw ConfigError("conv2d: stride must be positive and pad nonnegative");
  }
  ConvGeometry c{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, pad, 0, 0};
  const Index span_h = x[2] + 2 * pad - w[2];
  const Index span_w = x[3] + 2 * pad - w[3];
  // Trailing rows/columns that do not fill a whole stride are dropped.
  if (span_h < 0 || span_w < 0) {
    throw ConfigError("conv2d: output extent is not a positive integer for input " +
                      to_string(x) + ", kernel " + to_string(w) + ", stride " +
                      std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  c.out_h = span_h / stride + 1;
  c.out_w = span_w / stride + 1;
  return c;
}

// cols[(c, ki, kj), (b, oy, ox)]
template <typename Scalar>
RowMatrix<Scalar> im2col(const Scalar* x, const ConvGeometry& c) {
  RowMatrix<Scalar> cols(c.patch(), c.batch * c.positions());
  for (Index ch = 0; ch < c.channels; ++ch) {
    for (Index ki = 0; ki < c.kh; ++ki) {
      for (Index kj = 0; kj < c.kw; ++kj) {
        Scalar* row = cols.row((ch * c.kh + ki) * c.kw + kj).data();
        for (Index b = 0; b < c.batch; ++b) {
          const Scalar* plane = x + (b * c.channels + ch) * c.height * c.width;
          Scalar* out = row + b * c.positions();
          for (Index oy = 0; oy < c.out_h; ++oy) {
            const Index iy = oy * c.stride - c.pad + ki;
            for (Index ox = 0; ox < c.out_w; ++ox) {
              const Index ix = ox * c.stride - c.pad + kj;
              const bool inside = iy >= 0 && iy < c.height && ix >= 0 && ix < c.width;
              out[oy * c.out_w + ox] = inside ? plane[iy * c.width + ix] : Scalar(0);
            }
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, const ConvGeometry& c, Scalar* dx) {
  for (Index ch = 0; ch < c.channels; ++ch) {
    for (Index ki = 0; ki < c.kh; ++ki) {
      for (Index kj = 0; kj < c.kw; ++kj) {
        const Scalar* row = cols.row((ch * c.kh + ki) * c.kw + kj).data();
        for (Index b = 0; b < c.batch; ++b) {
          Scalar* plane = dx + (b * c.channels + ch) * c.height * c.width;
          const Scalar* in = row + b * c.positions();
          for (Index oy = 0; oy < c.out_h; ++oy) {
            const Index iy = oy * c.stride - c.pad + ki;
            if (iy < 0 || iy >= c.height) continue;
            for (Index ox = 0; ox < c.out_w; ++ox) {
              const Index ix = ox * c.stride - c.pad + kj;
              if (ix < 0 || ix >= c.width) continue;
              plane[iy * c.width + ix] += in[oy * c.out_w + ox];
            }
          }
        }
      }
    }
  }
}

// [F, (b, p)] <-> [b, F, p]
template <typename Scalar>
void filters_to_batch(const RowMatrix<Scalar>& fbp, const ConvGeometry& c, Scalar* out) {
  const Index p = c.positions();
  for (Index b = 0; b < c.batch; ++b) {
    for (Index f = 0; f < c.filters; ++f) {
      std::copy_n(fbp.row(f).data() + b * p, p, out + (b * c.filters + f) * p);
    }
  }
}

template <typename Scalar>
RowMatrix<Scalar> batch_to_filters(const Scalar* in, const ConvGeometry& c) {
  const Index p = c.positions();
  RowMatrix<Scalar> fbp(c.filters, c.batch * p);
  for (Index b = 0; b < c.batch; ++b) {
    for (Index f = 0; f < c.filters; ++f) {
      std::copy_n(in + (b * c.filters + f) * p, p, fbp.row(f).data() + b * p);
    }
  }
  return fbp;
}

}  // namespace

template <typename Scalar>
Var Graph<Scalar>::leaf(Tensor<Scalar>& t) {
  t.requires_grad = true;
  Node n;
  n.kind = OpKind::kLeaf;
  n.value = t;
  n.value.grad.reset();
  n.target = &t;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename Scalar>
Var Graph<Scalar>::constant(Tensor<Scalar> t) {
  Node n;
  n.kind = OpKind::kConstant;
  n.value = std::move(t);
  n.value.grad.reset();
  n.value.requires_grad = false;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename Scalar>
Var Graph<Scalar>::record(OpKind kind, std::vector<Var> inputs, Tensor<Scalar> value,
                          Attrs attrs, std::vector<Vector<Scalar>> saved) {
  Node n;
  n.kind = kind;
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [&](Var v) { return node(v).requires_grad; });
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  n.value.requires_grad = n.requires_grad;
  n.attrs = std::move(attrs);
  if (n.requires_grad) n.saved = std::move(saved);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename Scalar>
std::size_t Graph<Scalar>::count(OpKind kind) const {
  return static_cast<std::size_t>(std::count_if(
      nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.kind == kind; }));
}

template <typename Scalar>
std::size_t Graph<Scalar>::retained_bytes() const {
  std::size_t total = 0;
  for (const Node& n : nodes_) {
    if (!n.requires_grad || n.kind == OpKind::kLeaf) continue;
    std::size_t elems = static_cast<std::size_t>(n.value.numel());
    for (const auto& s : n.saved) elems += static_cast<std::size_t>(s.size());
    total += elems * sizeof(Scalar);
  }
  return total;
}

template <typename Scalar>
std::uint64_t Graph<Scalar>::relu_signature() const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const Node& n : nodes_) {
    if (n.kind != OpKind::kRelu) continue;
    for (Index i = 0; i < n.value.numel(); ++i) {
      h ^= n.value.data(i) > Scalar(0) ? 1u : 0u;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

template <typename Scalar>
void Graph<Scalar>::backward(Var loss) {
  const Node& root = node(loss);
  if (root.value.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        to_string(root.value.shape));
  }
  std::vector<Vector<Scalar>> adj(nodes_.size());
  for (std::size_t i = 0; i <= loss.id; ++i) {
    if (nodes_[i].requires_grad) adj[i] = Vector<Scalar>::Zero(nodes_[i].value.numel());
  }
  if (root.requires_grad) adj[loss.id](0) = Scalar(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.kind == OpKind::kLeaf) {
      if (!n.target->grad) n.target->grad = Vector<Scalar>::Zero(n.target->numel());
      *n.target->grad += adj[i];
      continue;
    }
    backward_node(n, adj[i], adj);
  }
  // Leaves recorded after the loss never reach it.
  for (std::size_t i = loss.id + 1; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.kind == OpKind::kLeaf && !n.target->grad) {
      n.target->grad = Vector<Scalar>::Zero(n.target->numel());
    }
  }
}

template <typename Scalar>
void Graph<Scalar>::backward_node(const Node& n, const Vector<Scalar>& g,
                                  std::vector<Vector<Scalar>>& adj) {
  auto wants = [&](std::size_t k) { return node(n.inputs[k]).requires_grad; };
  auto grad_of = [&](std::size_t k) -> Vector<Scalar>& { return adj[n.inputs[k].id]; };

  switch (n.kind) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      return;

    case OpKind::kMatmul: {
      const auto& a = value(n.inputs[0]);
      const auto& b = value(n.inputs[1]);
      const RowMatrix<double> dc =
          ConstMatrixMap<Scalar>(g.data(), n.value.dim(0), n.value.dim(1))
              .template cast<double>();
      const RowMatrix<double> bd = as_double(b.matrix());
      if (wants(0)) {
        RowMatrix<double> da = n.attrs.transpose_rhs ? RowMatrix<double>(dc * bd)
                                                     : RowMatrix<double>(dc * bd.transpose());
        MatrixMap<Scalar>(grad_of(0).data(), a.dim(0), a.dim(1)) +=
            da.template cast<Scalar>();
      }
      if (wants(1)) {
        const RowMatrix<double> ad = as_double(a.matrix());
        RowMatrix<double> db = n.attrs.transpose_rhs
                                   ? RowMatrix<double>(dc.transpose() * ad)
                                   : RowMatrix<double>(ad.transpose() * dc);
        MatrixMap<Scalar>(grad_of(1).data(), b.dim(0), b.dim(1)) +=
            db.template cast<Scalar>();
      }
      return;
    }

    case OpKind::kConv2d: {
      const auto& x = value(n.inputs[0]);
      const auto& w = value(n.inputs[1]);
      const ConvGeometry c = conv_geometry(x.shape, w.shape, n.attrs.stride, n.attrs.pad);
      const RowMatrix<Scalar> dy = batch_to_filters(g.data(), c);
      if (wants(1)) {
        const ConstMatrixMap<Scalar> cols(n.saved[0].data(), c.patch(),
                                          c.batch * c.positions());
        MatrixMap<Scalar>(grad_of(1).data(), c.filters, c.patch()).noalias() +=
            dy * cols.transpose();
      }
      if (wants(0)) {
        const ConstMatrixMap<Scalar> wm(w.data.data(), c.filters, c.patch());
        const RowMatrix<Scalar> dcols = wm.transpose() * dy;
        col2im_add(dcols, c, grad_of(0).data());
      }
      return;
    }

    case OpKind::kRelu: {
      if (wants(0)) {
        grad_of(0).array() +=
            (n.value.data.array() > Scalar(0)).select(g.array(), Scalar(0));
      }
      return;
    }

    case OpKind::kAdd:
      if (wants(0)) grad_of(0) += g;
      if (wants(1)) grad_of(1) += g;
      return;

    case OpKind::kScale:
      if (wants(0)) grad_of(0) += static_cast<Scalar>(n.attrs.factor) * g;
      return;

    case OpKind::kBiasAdd: {
      const Shape& s = n.value.shape;
      const Index rows = s[0];
      const Index ch = s[1];
      const Index inner = n.value.numel() / (rows * ch);
      if (wants(0)) grad_of(0) += g;
      if (wants(1)) {
        Vector<Scalar>& db = grad_of(1);
        for (Index c = 0; c < ch; ++c) {
          double acc = 0.0;
          for (Index r = 0; r < rows; ++r) {
            const Scalar* p = g.data() + (r * ch + c) * inner;
            for (Index k = 0; k < inner; ++k) acc += static_cast<double>(p[k]);
          }
          db(c) += static_cast<Scalar>(acc);
        }
      }
      return;
    }

    case OpKind::kGlobalAvgPool: {
      if (!wants(0)) return;
      const auto& x = value(n.inputs[0]);
      const Index planes = x.dim(0) * x.dim(1);
      const Index area = x.dim(2) * x.dim(3);
      Vector<Scalar>& dx = grad_of(0);
      for (Index p = 0; p < planes; ++p) {
        dx.segment(p * area, area).array() += g(p) / static_cast<Scalar>(area);
      }
      return;
    }

    case OpKind::kL2Normalize: {
      if (!wants(0)) return;
      const auto& x = value(n.inputs[0]);
      const Index rows = x.dim(0);
      const Index cols = x.dim(1);
      const Vector<Scalar>& norms = n.saved[0];
      Vector<Scalar>& dx = grad_of(0);
      for (Index r = 0; r < rows; ++r) {
        const double norm = static_cast<double>(norms(r));
        const double denom = norm + kNormFloor;
        const Scalar* xr = x.data.data() + r * cols;
        const Scalar* gr = g.data() + r * cols;
        double xg = 0.0;
        for (Index k = 0; k < cols; ++k) xg += static_cast<double>(xr[k]) * gr[k];
        const double coef = norm > 0.0 ? xg / (denom * denom * norm) : 0.0;
        Scalar* out = dx.data() + r * cols;
        for (Index k = 0; k < cols; ++k) {
          out[k] += static_cast<Scalar>(gr[k] / denom - xr[k] * coef);
        }
      }
      return;
    }

    case OpKind::kRowDot: {
      const auto& a = value(n.inputs[0]);
      const auto& b = value(n.inputs[1]);
      const Index cols = a.dim(1);
      for (Index r = 0; r < a.dim(0); ++r) {
        if (wants(0)) grad_of(0).segment(r * cols, cols) += g(r) * b.data.segment(r * cols, cols);
        if (wants(1)) grad_of(1).segment(r * cols, cols) += g(r) * a.data.segment(r * cols, cols);
      }
      return;
    }

    case OpKind::kConcatCols: {
      const auto& a = value(n.inputs[0]);
      const auto& b = value(n.inputs[1]);
      const Index n1 = a.dim(1);
      const Index n2 = b.dim(1);
      const ConstMatrixMap<Scalar> gm(g.data(), a.dim(0), n1 + n2);
      if (wants(0)) MatrixMap<Scalar>(grad_of(0).data(), a.dim(0), n1) += gm.leftCols(n1);
      if (wants(1)) MatrixMap<Scalar>(grad_of(1).data(), b.dim(0), n2) += gm.rightCols(n2);
      return;
    }

    case OpKind::kSoftmaxCrossEntropy: {
      if (!wants(0)) return;
      const auto& logits = value(n.inputs[0]);
      const Index rows = logits.dim(0);
      const Index cols = logits.dim(1);
      const Vector<Scalar>& probs = n.saved[0];
      const double coef = static_cast<double>(g(0)) / static_cast<double>(rows);
      Vector<Scalar>& dl = grad_of(0);
      for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) {
          const double target = c == n.attrs.labels[static_cast<std::size_t>(r)] ? 1.0 : 0.0;
          dl(r * cols + c) += static_cast<Scalar>(coef * (probs(r * cols + c) - target));
        }
      }
      return;
    }

    case OpKind::kSum:
      if (wants(0)) grad_of(0).array() += g(0);
      return;
  }
}

template <typename Scalar>
Var matmul(Graph<Scalar>& g, Var a, Var b) {
  const auto& ta = g.value(a);
  const auto& tb = g.value(b);
  require_rank(ta.shape, 2, "matmul lhs");
  require_rank(tb.shape, 2, "matmul rhs");
  if (ta.dim(1) != tb.dim(0)) mismatch("matmul", ta.shape, tb.shape);
  const RowMatrix<double> c = as_double(ta.matrix()) * as_double(tb.matrix());
  Tensor<Scalar> out({ta.dim(0), tb.dim(1)});
  out.matrix() = c.template cast<Scalar>();
  return g.record(OpKind::kMatmul, {a, b}, std::move(out));
}

template <typename Scalar>
Var matmul_nt(Graph<Scalar>& g, Var a, Var b) {
  const auto& ta = g.value(a);
  const auto& tb = g.value(b);
  require_rank(ta.shape, 2, "matmul lhs");
  require_rank(tb.shape, 2, "matmul rhs");
  if (ta.dim(1) != tb.dim(1)) mismatch("matmul_nt", ta.shape, tb.shape);
  const RowMatrix<double> c =
      as_double(ta.matrix()) * as_double(tb.matrix()).transpose();
  Tensor<Scalar> out({ta.dim(0), tb.dim(0)});
  out.matrix() = c.template cast<Scalar>();
  typename Graph<Scalar>::Attrs attrs;
  attrs.transpose_rhs = true;
  return g.record(OpKind::kMatmul, {a, b}, std::move(out), std::move(attrs));
}

template <typename Scalar>
Var conv2d(Graph<Scalar>& g, Var x, Var w, Index stride, Index pad) {
  const auto& tx = g.value(x);
  const auto& tw = g.value(w);
  const ConvGeometry c = conv_geometry(tx.shape, tw.shape, stride, pad);
  RowMatrix<Scalar> cols = im2col(tx.data.data(), c);
  const ConstMatrixMap<Scalar> wm(tw.data.data(), c.filters, c.patch());
  const RowMatrix<Scalar> y = wm * cols;
  Tensor<Scalar> out({c.batch, c.filters, c.out_h, c.out_w});
  filters_to_batch(y, c, out.data.data());
  typename Graph<Scalar>::Attrs attrs;
  attrs.stride = stride;
  attrs.pad = pad;
  std::vector<Vector<Scalar>> saved;
  if (g.requires_grad(w)) {
    saved.emplace_back(Eigen::Map<const Vector<Scalar>>(cols.data(), cols.size()));
  }
  return g.record(OpKind::kConv2d, {x, w}, std::move(out), std::move(attrs),
                  std::move(saved));
}

template <typename Scalar>
Var relu(Graph<Scalar>& g, Var x) {
  Tensor<Scalar> out = g.value(x);
  out.grad.reset();
  out.data = out.data.cwiseMax(Scalar(0));
  return g.record(OpKind::kRelu, {x}, std::move(out));
}

template <typename Scalar>
Var add(Graph<Scalar>& g, Var a, Var b) {
  const auto& ta = g.value(a);
  const auto& tb = g.value(b);
  if (ta.shape != tb.shape) mismatch("add", ta.shape, tb.shape);
  Tensor<Scalar> out(ta.shape, Vector<Scalar>(ta.data + tb.data));
  return g.record(OpKind::kAdd, {a, b}, std::move(out));
}

template <typename Scalar>
Var scale(Graph<Scalar>& g, Var x, double factor) {
  const auto& tx = g.value(x);
  Tensor<Scalar> out(tx.shape, Vector<Scalar>(tx.data * static_cast<Scalar>(factor)));
  typename Graph<Scalar>::Attrs attrs;
  attrs.factor = factor;
  return g.record(OpKind::kScale, {x}, std::move(out), std::move(attrs));
}

template <typename Scalar>
Var bias_add(Graph<Scalar>& g, Var x, Var b) {
  const auto& tx = g.value(x);
  const auto& tb = g.value(b);
  if (tx.rank() < 2 || tb.rank() != 1 || tb.dim(0) != tx.dim(1)) {
    mismatch("bias_add", tx.shape, tb.shape);
  }
  Tensor<Scalar> out(tx.shape, tx.data);
  const Index rows = tx.dim(0);
  const Index ch = tx.dim(1);
  const Index inner = tx.numel() / (rows * ch);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < ch; ++c) {
      out.data.segment((r * ch + c) * inner, inner).array() += tb.data(c);
    }
  }
  return g.record(OpKind::kBiasAdd, {x, b}, std::move(out));
}

template <typename Scalar>
Var global_avg_pool(Graph<Scalar>& g, Var x) {
  const auto& tx = g.value(x);
  require_rank(tx.shape, 4, "global_avg_pool");
  const Index planes = tx.dim(0) * tx.dim(1);
  const Index area = tx.dim(2) * tx.dim(3);
  Tensor<Scalar> out({tx.dim(0), tx.dim(1)});
  for (Index p = 0; p < planes; ++p) {
    double acc = 0.0;
    const Scalar* src = tx.data.data() + p * area;
    for (Index k = 0; k < area; ++k) acc += static_cast<double>(src[k]);
    out.data(p) = static_cast<Scalar>(acc / static_cast<double>(area));
  }
  return g.record(OpKind::kGlobalAvgPool, {x}, std::move(out));
}

template <typename Scalar>
Var l2_normalize(Graph<Scalar>& g, Var x) {
  const auto& tx = g.value(x);
  require_rank(tx.shape, 2, "l2_normalize");
  const Index rows = tx.dim(0);
  const Index cols = tx.dim(1);
  Tensor<Scalar> out(tx.shape);
  Vector<Scalar> norms(rows);
  std::size_t zero_rows = 0;
  for (Index r = 0; r < rows; ++r) {
    const Scalar* src = tx.data.data() + r * cols;
    double ss = 0.0;
    for (Index k = 0; k < cols; ++k) ss += static_cast<double>(src[k]) * src[k];
    const double norm = std::sqrt(ss);
    if (norm == 0.0) ++zero_rows;
    const double denom = norm + kNormFloor;
    for (Index k = 0; k < cols; ++k) {
      out.data(r * cols + k) = static_cast<Scalar>(src[k] / denom);
    }
    norms(r) = static_cast<Scalar>(norm);
  }
  g.note_zero_norm_rows(zero_rows);
  std::vector<Vector<Scalar>> saved;
  saved.push_back(std::move(norms));
  return g.record(OpKind::kL2Normalize, {x}, std::move(out), {}, std::move(saved));
}

template <typename Scalar>
Var row_dot(Graph<Scalar>& g, Var a, Var b) {
  const auto& ta = g.value(a);
  const auto& tb = g.value(b);
  require_rank(ta.shape, 2, "row_dot");
  if (ta.shape != tb.shape) mismatch("row_dot", ta.shape, tb.shape);
  const Index cols = ta.dim(1);
  Tensor<Scalar> out({ta.dim(0), 1});
  for (Index r = 0; r < ta.dim(0); ++r) {
    double acc = 0.0;
    for (Index k = 0; k < cols; ++k) {
      acc += static_cast<double>(ta.data(r * cols + k)) * tb.data(r * cols + k);
    }
    out.data(r) = static_cast<Scalar>(acc);
  }
  return g.record(OpKind::kRowDot, {a, b}, std::move(out));
}

template <typename Scalar>
Var concat_cols(Graph<Scalar>& g, Var a, Var b) {
  const auto& ta = g.value(a);
  const auto& tb = g.value(b);
  require_rank(ta.shape, 2, "concat_cols");
  require_rank(tb.shape, 2, "concat_cols");
  if (ta.dim(0) != tb.dim(0)) mismatch("concat_cols", ta.shape, tb.shape);
  Tensor<Scalar> out({ta.dim(0), ta.dim(1) + tb.dim(1)});
  out.matrix() << ta.matrix(), tb.matrix();
  return g.record(OpKind::kConcatCols, {a, b}, std::move(out));
}

template <typename Scalar>
Var softmax_cross_entropy(Graph<Scalar>& g, Var logits, std::span<const Index> labels) {
  const auto& tl = g.value(logits);
  require_rank(tl.shape, 2, "softmax_cross_entropy");
  const Index rows = tl.dim(0);
  const Index cols = tl.dim(1);
  if (static_cast<Index>(labels.size()) != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(rows) + " rows");
  }
  Vector<Scalar> probs(tl.numel());
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const Index label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= cols) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(label) +
                          " out of range for " + std::to_string(cols) + " classes");
    }
    const Scalar* row = tl.data.data() + r * cols;
    double peak = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < cols; ++c) peak = std::max(peak, static_cast<double>(row[c]));
    double denom = 0.0;
    for (Index c = 0; c < cols; ++c) denom += std::exp(static_cast<double>(row[c]) - peak);
    const double log_denom = std::log(denom);
    for (Index c = 0; c < cols; ++c) {
      probs(r * cols + c) =
          static_cast<Scalar>(std::exp(static_cast<double>(row[c]) - peak - log_denom));
    }
    total += peak + log_denom - static_cast<double>(row[label]);
  }
  typename Graph<Scalar>::Attrs attrs;
  attrs.labels.assign(labels.begin(), labels.end());
  std::vector<Vector<Scalar>> saved;
  saved.push_back(std::move(probs));
  return g.record(OpKind::kSoftmaxCrossEntropy, {logits},
                  Tensor<Scalar>::scalar(static_cast<Scalar>(total / static_cast<double>(rows))),
                  std::move(attrs), std::move(saved));
}

template <typename Scalar>
Var sum(Graph<Scalar>& g, Var x) {
  const auto& tx = g.value(x);
  double acc = 0.0;
  for (Index i = 0; i < tx.numel(); ++i) acc += static_cast<double>(tx.data(i));
  return g.record(OpKind::kSum, {x}, Tensor<Scalar>::scalar(static_cast<Scalar>(acc)));
}

#define MOCO_INSTANTIATE_GRAPH(S)                                              \
  template class Graph<S>;                                                     \
  template Var matmul<S>(Graph<S>&, Var, Var);                                 \
  template Var matmul_nt<S>(Graph<S>&, Var, Var);                              \
  template Var conv2d<S>(Graph<S>&, Var, Var, Index, Index);                   \
  template Var relu<S>(Graph<S>&, Var);                                        \
  template Var add<S>(Graph<S>&, Var, Var);                                    \
  template Var scale<S>(Graph<S>&, Var, double);                               \
  template Var bias_add<S>(Graph<S>&, Var, Var);                               \
  template Var global_avg_pool<S>(Graph<S>&, Var);                             \
  template Var l2_normalize<S>(Graph<S>&, Var);                                \
  template Var row_dot<S>(Graph<S>&, Var, Var);                                \
  template Var concat_cols<S>(Graph<S>&, Var, Var);                            \
  template Var softmax_cross_entropy<S>(Graph<S>&, Var, std::span<const Index>); \
  template Var sum<S>(Graph<S>&, Var);

MOCO_INSTANTIATE_GRAPH(float)
MOCO_INSTANTIATE_GRAPH(double)

#undef MOCO_INSTANTIATE_GRAPH

}  // namespace moco
