#pragma once

#include "moco/contrastive.hpp"
#include "moco/encoder.hpp"

namespace moco {

// Fixed-capacity FIFO of unit-norm key embeddings. Storage starts zeroed
// and unfilled; rows are only served as negatives once the ring has
// wrapped for the first time.
template <typename Scalar>
class NegativeQueue {
 public:
  NegativeQueue() = default;
  NegativeQueue(Index capacity, Index dim);

  // Rebuilds a queue from checkpointed storage.
  static NegativeQueue restore(Tensor<Scalar> storage, Index write_ptr, bool filled);

  Index capacity() const { return capacity_; }
  Index dim() const { return dim_; }
  Index write_ptr() const { return write_ptr_; }
  bool filled() const { return filled_; }
  Index size() const { return filled_ ? capacity_ : write_ptr_; }
  double fill_fraction() const {
    return static_cast<double>(size()) / static_cast<double>(capacity_);
  }

  // Replaces the B oldest rows. Requires B <= K and K % B == 0.
  void enqueue(const Tensor<Scalar>& keys);

  // Logical contents, oldest first.
  Tensor<Scalar> contents() const;
  // Ring storage in slot order; this is what the loss uses as negatives.
  const Tensor<Scalar>& storage() const { return storage_; }

 private:
  Index capacity_ = 0;
  Index dim_ = 0;
  Tensor<Scalar> storage_;
  Index write_ptr_ = 0;
  bool filled_ = false;
};

template <typename Scalar>
struct MocoState {
  ModelParams<Scalar> q_params;
  ModelParams<Scalar> k_params;
  NegativeQueue<Scalar> queue;
  double momentum = 0.99;
  double tau = 0.2;

  // Key encoder starts as a value copy of the query encoder.
  static MocoState create(ModelParams<Scalar> q, Index queue_size, double momentum, double tau);
};

// Two augmented views per image, stacked: [B x 3 x S x S] each.
template <typename Scalar>
struct ViewBatch {
  Tensor<Scalar> query;
  Tensor<Scalar> key;

  Index batch() const { return query.dim(0); }
};

template <typename Scalar>
struct StepResult {
  bool warming = false;
  double loss = 0.0;
  double pos_sim = 0.0;
  double neg_sim = 0.0;
  Index negatives_per_query = 0;
  Tensor<Scalar> q;       // normalized query embeddings
  Tensor<Scalar> k_pos;   // normalized positive keys
  Tensor<Scalar> logits;  // empty while warming
  std::size_t retained_bytes = 0;
};

// theta_k <- m * theta_k + (1 - m) * theta_q, elementwise.
template <typename Scalar>
void momentum_update(ModelParams<Scalar>& k_params, const ModelParams<Scalar>& q_params,
                     double momentum);

// One MoCo iteration: momentum update, query/key encoding, InfoNCE against
// the queue, backward into q_params only, then enqueue of the new keys.
// While the queue is unfilled only the momentum update, key encoding and
// enqueue happen. Gradients land in q_params; the optimizer step is the
// caller's.
template <typename Scalar>
StepResult<Scalar> moco_step(MocoState<Scalar>& state, const ViewBatch<Scalar>& views);

// In-batch negatives: one shared encoder embeds both views; key i is the
// positive of query i, the other B-1 keys are its negatives, and the
// gradient flows through both paths.
template <typename Scalar>
StepResult<Scalar> e2e_step(ModelParams<Scalar>& params, const ViewBatch<Scalar>& views,
                            double tau);

// Detached embedding of a batch (no graph is kept).
template <typename Scalar>
Tensor<Scalar> encode_detached(const ModelParams<Scalar>& params, const Tensor<Scalar>& images);

}  // namespace moco
