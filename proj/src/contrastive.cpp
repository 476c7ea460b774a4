#include "moco/contrastive.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace moco {

namespace {

template <typename Scalar>
void require_unit_rows(const Tensor<Scalar>& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got " + to_string(t.shape));
  }
  const auto m = t.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).template cast<double>().norm();
    if (std::abs(n - 1.0) > kUnitNormTolerance) {
      throw ContractError(std::string(what) + ": row " + std::to_string(r) + " has norm " +
                          std::to_string(n) + ", expected unit norm");
    }
  }
}

}  // namespace

template <typename Scalar>
void validate_batch(const Graph<Scalar>& g, const ContrastiveBatch& b) {
  if (!(b.tau > 0.0)) throw ContractError("contrastive: tau must be positive");
  const auto& q = g.value(b.q);
  const auto& k = g.value(b.k_pos);
  require_unit_rows(q, "queries");
  require_unit_rows(k, "positive keys");
  if (q.shape != k.shape) {
    throw DimensionError("contrastive: queries " + to_string(q.shape) +
                         " and positive keys " + to_string(k.shape) + " differ");
  }
  if (b.negatives) {
    const auto& n = g.value(*b.negatives);
    require_unit_rows(n, "negatives");
    if (n.dim(1) != q.dim(1)) {
      throw DimensionError("contrastive: queries " + to_string(q.shape) + " and negatives " +
                           to_string(n.shape) + " differ in embedding width");
    }
  }
}

template <typename Scalar>
Var similarity_logits(Graph<Scalar>& g, const ContrastiveBatch& b) {
  validate_batch(g, b);
  const double inv_tau = 1.0 / b.tau;
  Var logits = row_dot(g, b.q, b.k_pos);
  if (b.negatives) logits = concat_cols(g, logits, matmul_nt(g, b.q, *b.negatives));
  return scale(g, logits, inv_tau);
}

template <typename Scalar>
Var infonce_loss(Graph<Scalar>& g, const ContrastiveBatch& b) {
  const Var logits = similarity_logits(g, b);
  const std::vector<Index> targets(static_cast<std::size_t>(g.shape(logits)[0]), 0);
  const Var loss = softmax_cross_entropy(g, logits, targets);
  if (!std::isfinite(static_cast<double>(g.value(loss).item()))) {
    throw std::logic_error("infonce_loss: non-finite loss on normalized inputs");
  }
  return loss;
}

template <typename Scalar>
double infonce_value(const Tensor<Scalar>& q, const Tensor<Scalar>& k_pos,
                     const Tensor<Scalar>* negatives, double tau) {
  Graph<Scalar> g;
  ContrastiveBatch b{g.constant(q), g.constant(k_pos), std::nullopt, tau};
  if (negatives) b.negatives = g.constant(*negatives);
  return static_cast<double>(g.value(infonce_loss(g, b)).item());
}

#define MOCO_INSTANTIATE_CONTRASTIVE(S)                                          \
  template void validate_batch<S>(const Graph<S>&, const ContrastiveBatch&);     \
  template Var similarity_logits<S>(Graph<S>&, const ContrastiveBatch&);         \
  template Var infonce_loss<S>(Graph<S>&, const ContrastiveBatch&);              \
  template double infonce_value<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>*, double);

MOCO_INSTANTIATE_CONTRASTIVE(float)
MOCO_INSTANTIATE_CONTRASTIVE(double)

#undef MOCO_INSTANTIATE_CONTRASTIVE

}  // namespace moco
