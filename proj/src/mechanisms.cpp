#include "moco/mechanisms.hpp"

#include <cmath>
#include <numeric>
#include <vector>

namespace moco {

template <typename Scalar>
NegativeQueue<Scalar>::NegativeQueue(Index capacity, Index dim)
    : capacity_(capacity), dim_(dim) {
  if (capacity <= 0 || dim <= 0) {
    throw ConfigError("queue: capacity and dim must be positive");
  }
  storage_ = Tensor<Scalar>({capacity, dim});
}

template <typename Scalar>
NegativeQueue<Scalar> NegativeQueue<Scalar>::restore(Tensor<Scalar> storage, Index write_ptr,
                                                     bool filled) {
  if (storage.rank() != 2) throw DimensionError("queue: storage must be a matrix");
  NegativeQueue q(storage.dim(0), storage.dim(1));
  if (write_ptr < 0 || write_ptr >= q.capacity_) {
    throw ContractError("queue: write pointer out of range");
  }
  q.storage_ = std::move(storage);
  q.write_ptr_ = write_ptr;
  q.filled_ = filled;
  return q;
}

template <typename Scalar>
void NegativeQueue<Scalar>::enqueue(const Tensor<Scalar>& keys) {
  if (keys.rank() != 2 || keys.dim(1) != dim_) {
    throw DimensionError("queue: keys " + to_string(keys.shape) + " do not match width " +
                         std::to_string(dim_));
  }
  const Index b = keys.dim(0);
  if (b > capacity_ || capacity_ % b != 0) {
    throw ConfigError("queue: capacity " + std::to_string(capacity_) +
                      " must be a multiple of the batch size " + std::to_string(b));
  }
  for (Index r = 0; r < b; ++r) {
    storage_.matrix().row(write_ptr_) = keys.matrix().row(r);
    write_ptr_ = (write_ptr_ + 1) % capacity_;
    if (write_ptr_ == 0) filled_ = true;
  }
}

template <typename Scalar>
Tensor<Scalar> NegativeQueue<Scalar>::contents() const {
  const Index n = size();
  if (n == 0) return Tensor<Scalar>();
  Tensor<Scalar> out({n, dim_});
  const Index start = filled_ ? write_ptr_ : 0;
  for (Index r = 0; r < n; ++r) {
    out.matrix().row(r) = storage_.matrix().row((start + r) % capacity_);
  }
  return out;
}

template <typename Scalar>
MocoState<Scalar> MocoState<Scalar>::create(ModelParams<Scalar> q, Index queue_size,
                                            double momentum, double tau) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) {
    throw ConfigError("moco: momentum must lie in [0, 1]");
  }
  if (!(tau > 0.0)) throw ConfigError("moco: tau must be positive");
  MocoState s;
  s.k_params = q;
  for (auto& [path, t] : s.k_params.tensors) {
    t.grad.reset();
    t.requires_grad = false;
  }
  s.queue = NegativeQueue<Scalar>(queue_size, q.config.embed_dim);
  s.q_params = std::move(q);
  s.momentum = momentum;
  s.tau = tau;
  return s;
}

template <typename Scalar>
void momentum_update(ModelParams<Scalar>& k_params, const ModelParams<Scalar>& q_params,
                     double momentum) {
  if (!k_params.congruent_with(q_params)) {
    throw ContractError("momentum_update: key and query encoders are not congruent");
  }
  const auto m = static_cast<Scalar>(momentum);
  const auto rest = static_cast<Scalar>(1.0 - momentum);
  auto qi = q_params.tensors.begin();
  for (auto& [path, k] : k_params.tensors) {
    k.data = m * k.data + rest * qi->second.data;
    ++qi;
  }
}

template <typename Scalar>
Tensor<Scalar> encode_detached(const ModelParams<Scalar>& params, const Tensor<Scalar>& images) {
  Graph<Scalar> g;
  BoundParams bound;
  for (const auto& [path, t] : params.tensors) bound.emplace(path, g.constant(t));
  Tensor<Scalar> out = g.value(embed(g, bound, params.config, g.constant(images)));
  out.requires_grad = false;
  return out;
}

namespace {

template <typename Scalar>
void check_views(const ViewBatch<Scalar>& views) {
  if (views.query.shape != views.key.shape || views.query.rank() != 4) {
    throw DimensionError("views: query " + to_string(views.query.shape) + " and key " +
                         to_string(views.key.shape) + " batches differ");
  }
}

}  // namespace

template <typename Scalar>
StepResult<Scalar> moco_step(MocoState<Scalar>& state, const ViewBatch<Scalar>& views) {
  check_views(views);
  StepResult<Scalar> result;

  momentum_update(state.k_params, state.q_params, state.momentum);
  result.k_pos = encode_detached(state.k_params, views.key);

  if (!state.queue.filled()) {
    result.warming = true;
    state.queue.enqueue(result.k_pos);
    return result;
  }

  state.q_params.zero_grad();
  Graph<Scalar> g;
  const BoundParams bound = bind(g, state.q_params, true);
  const Var q = embed(g, bound, state.q_params.config, g.constant(views.query));
  const ContrastiveBatch batch{q, g.constant(result.k_pos), g.constant(state.queue.storage()),
                               state.tau};
  const Var logits = similarity_logits(g, batch);
  const std::vector<Index> targets(static_cast<std::size_t>(views.batch()), 0);
  const Var loss = softmax_cross_entropy(g, logits, targets);
  result.loss = static_cast<double>(g.value(loss).item());
  result.retained_bytes = g.retained_bytes();
  g.backward(loss);

  result.q = g.value(q);
  result.logits = g.value(logits);
  result.negatives_per_query = state.queue.capacity();
  const auto lm = result.logits.matrix().template cast<double>();
  result.pos_sim = lm.col(0).mean() * state.tau;
  result.neg_sim = lm.rightCols(lm.cols() - 1).mean() * state.tau;

  state.queue.enqueue(result.k_pos);
  return result;
}

template <typename Scalar>
StepResult<Scalar> e2e_step(ModelParams<Scalar>& params, const ViewBatch<Scalar>& views,
                            double tau) {
  check_views(views);
  const Index b = views.batch();
  if (b < 2) throw ConfigError("e2e: batch size must be at least 2 to provide negatives");
  if (!(tau > 0.0)) throw ConfigError("e2e: tau must be positive");

  StepResult<Scalar> result;
  params.zero_grad();
  Graph<Scalar> g;
  const BoundParams bound = bind(g, params, true);
  const Var q = embed(g, bound, params.config, g.constant(views.query));
  const Var k = embed(g, bound, params.config, g.constant(views.key));
  const Var logits = scale(g, matmul_nt(g, q, k), 1.0 / tau);
  std::vector<Index> targets(static_cast<std::size_t>(b));
  std::iota(targets.begin(), targets.end(), Index{0});
  const Var loss = softmax_cross_entropy(g, logits, targets);
  result.loss = static_cast<double>(g.value(loss).item());
  result.retained_bytes = g.retained_bytes();
  g.backward(loss);

  result.q = g.value(q);
  result.k_pos = g.value(k);
  result.logits = g.value(logits);
  result.negatives_per_query = b - 1;
  const RowMatrix<double> sims = result.logits.matrix().template cast<double>() * tau;
  result.pos_sim = sims.diagonal().mean();
  result.neg_sim = (sims.sum() - sims.trace()) / static_cast<double>(b * (b - 1));
  return result;
}

#define MOCO_INSTANTIATE_MECHANISMS(S)                                                   \
  template class NegativeQueue<S>;                                                       \
  template struct MocoState<S>;                                                          \
  template void momentum_update<S>(ModelParams<S>&, const ModelParams<S>&, double);      \
  template StepResult<S> moco_step<S>(MocoState<S>&, const ViewBatch<S>&);               \
  template StepResult<S> e2e_step<S>(ModelParams<S>&, const ViewBatch<S>&, double);      \
  template Tensor<S> encode_detached<S>(const ModelParams<S>&, const Tensor<S>&);

MOCO_INSTANTIATE_MECHANISMS(float)
MOCO_INSTANTIATE_MECHANISMS(double)

#undef MOCO_INSTANTIATE_MECHANISMS

}  // namespace moco
