#pragma once

#include <optional>

#include "moco/encoder.hpp"
#include "moco/graph.hpp"

namespace moco {

// One query row per positive-key row; negatives are shared by all queries.
// Every row must be unit norm (1 +/- 1e-5).
struct ContrastiveBatch {
  Var q;
  Var k_pos;
  std::optional<Var> negatives;  // absent means N = 0
  double tau = 0.2;
};

inline constexpr double kUnitNormTolerance = 1e-5;

// Temperature used when none is configured: 0.2 with the MLP head, 0.07
// with the fc head.
inline double default_tau(HeadKind head) { return head == HeadKind::kMlp ? 0.2 : 0.07; }

template <typename Scalar>
void validate_batch(const Graph<Scalar>& g, const ContrastiveBatch& b);

// [B x (1+N)]: column 0 is q_i.k+_i / tau, column 1+j is q_i.k-_j / tau.
template <typename Scalar>
Var similarity_logits(Graph<Scalar>& g, const ContrastiveBatch& b);

// Batch mean of -log softmax(logits)[0].
template <typename Scalar>
Var infonce_loss(Graph<Scalar>& g, const ContrastiveBatch& b);

// Loss on plain values through a throwaway graph.
template <typename Scalar>
double infonce_value(const Tensor<Scalar>& q, const Tensor<Scalar>& k_pos,
                     const Tensor<Scalar>* negatives, double tau);

}  // namespace moco
