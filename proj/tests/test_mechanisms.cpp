#include "doctest.h"

#include <cmath>
#include <deque>
#include <numeric>

#include "fixtures.hpp"
#include "moco/mechanisms.hpp"
#include "test_support.hpp"

using namespace moco;
using moco::test::random_tensor;
using moco::test::random_unit_rows;

namespace {

EncoderConfig small_encoder() {
  EncoderConfig cfg;
  cfg.input_hw = 16;
  cfg.channels = {8, 16, 16};
  cfg.head = HeadKind::kMlp;
  cfg.head_hidden = 32;
  cfg.embed_dim = 16;
  return cfg;
}

template <typename Scalar>
ViewBatch<Scalar> random_views(Index b, Index hw, std::uint64_t seed) {
  return {random_tensor<Scalar>({b, 3, hw, hw}, seed, 0, 1),
          random_tensor<Scalar>({b, 3, hw, hw}, seed + 1, 0, 1)};
}

template <typename Scalar>
ModelParams<Scalar> single(Tensor<Scalar> t) {
  ModelParams<Scalar> p;
  p.tensors.emplace("w", std::move(t));
  return p;
}

template <typename Scalar>
void fill_queue(NegativeQueue<Scalar>& q, std::uint64_t seed) {
  q.enqueue(random_unit_rows<Scalar>(q.capacity(), q.dim(), seed));
  REQUIRE(q.filled());
}

Tensor<double> rows(std::initializer_list<double> values) {
  return Tensor<double>({static_cast<Index>(values.size()), 1}, values);
}

}  // namespace

TEST_CASE("momentum_update: fixed point, copy and midpoint") {
  auto k = single(Tensor<double>({1}, {2.0}));
  const auto q = single(Tensor<double>({1}, {4.0}));
  momentum_update(k, q, 1.0);
  CHECK(k.at("w").item() == 2.0);
  momentum_update(k, q, 0.5);
  CHECK(k.at("w").item() == 3.0);
  momentum_update(k, q, 0.0);
  CHECK(k.at("w").item() == 4.0);

  auto kf = init_params<float>(small_encoder(), 1);
  const auto qf = init_params<float>(small_encoder(), 2);
  momentum_update(kf, qf, 0.0);
  for (const auto& [path, t] : kf.tensors) CHECK(t.data == qf.at(path).data);
}

TEST_CASE("momentum_update rejects incongruent encoders") {
  auto k = single(Tensor<double>({2}));
  const auto q = single(Tensor<double>({3}));
  CHECK_THROWS_AS(momentum_update(k, q, 0.9), ContractError);
}

TEST_CASE("EMA contraction identity and geometric convergence") {
  auto k = init_params<double>(small_encoder(), 1);
  const auto q = init_params<double>(small_encoder(), 2);
  for (double m : {0.9, 0.99, 0.5}) {
    std::map<std::string, double> before;
    for (const auto& [path, t] : k.tensors) before[path] = (t.data - q.at(path).data).norm();
    momentum_update(k, q, m);
    for (const auto& [path, t] : k.tensors) {
      CHECK(std::abs((t.data - q.at(path).data).norm() - m * before[path]) < 1e-6);
    }
  }
  // Frozen query encoder: the gap shrinks by exactly m per update.
  auto drift = init_params<double>(small_encoder(), 3);
  const double start = (drift.at("conv1.w").data - q.at("conv1.w").data).norm();
  for (int i = 1; i <= 50; ++i) {
    momentum_update(drift, q, 0.9);
    const double gap = (drift.at("conv1.w").data - q.at("conv1.w").data).norm();
    CHECK(std::abs(gap - start * std::pow(0.9, i)) < 1e-9);
  }
}

TEST_CASE("queue: FIFO replacement and full replacement") {
  NegativeQueue<double> q(4, 1);
  q.enqueue(rows({1, 2}));
  CHECK_FALSE(q.filled());
  CHECK(q.size() == 2);
  q.enqueue(rows({3, 4}));
  CHECK(q.filled());
  CHECK(q.contents().data == rows({1, 2, 3, 4}).data);
  q.enqueue(rows({5, 6}));
  CHECK(q.contents().data == rows({3, 4, 5, 6}).data);
  CHECK(q.size() == 4);
  q.enqueue(rows({7, 8, 9, 10}));
  CHECK(q.contents().data == rows({7, 8, 9, 10}).data);
}

TEST_CASE("queue: configuration errors") {
  NegativeQueue<double> q(4, 2);
  CHECK_THROWS_AS(q.enqueue(Tensor<double>({8, 2})), ConfigError);
  CHECK_THROWS_AS(q.enqueue(Tensor<double>({3, 2})), ConfigError);
  CHECK_THROWS_AS(q.enqueue(Tensor<double>({2, 3})), DimensionError);
  CHECK_THROWS_AS(NegativeQueue<double>(0, 2), ConfigError);
}

TEST_CASE("queue matches a keep-last-K replay list") {
  Stream s(make_key(5));
  const Index capacity = 24;
  const std::vector<Index> sizes{1, 2, 3, 4, 6, 8, 12, 24};
  NegativeQueue<double> q(capacity, 1);
  std::deque<double> replay;
  double next = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Index b = sizes[s.below(sizes.size())];
    Tensor<double> keys({b, 1});
    for (Index r = 0; r < b; ++r) {
      keys.data(r) = next;
      replay.push_back(next++);
      if (static_cast<Index>(replay.size()) > capacity) replay.pop_front();
    }
    q.enqueue(keys);
    const auto c = q.contents();
    REQUIRE(c.numel() == static_cast<Index>(replay.size()));
    for (Index r = 0; r < c.numel(); ++r) REQUIRE(c.data(r) == replay[static_cast<std::size_t>(r)]);
  }
}

TEST_CASE("moco_step: warm-up then detached key encoder") {
  const auto cfg = small_encoder();
  auto state = MocoState<float>::create(init_params<float>(cfg, 7), 32, 0.99, 0.2);
  for (const auto& [path, t] : state.k_params.tensors) CHECK(t.data == state.q_params.at(path).data);

  for (int step = 0; step < 6; ++step) {
    const auto r = moco_step(state, random_views<float>(8, 16, 100 + step));
    CHECK(r.warming == (step < 4));
    CHECK(std::abs(state.queue.fill_fraction() - std::min(1.0, (step + 1) / 4.0)) < 1e-12);
    if (!r.warming) {
      CHECK(std::isfinite(r.loss));
      CHECK(r.negatives_per_query == 32);
      CHECK(r.logits.shape == Shape{8, 33});
      CHECK(r.pos_sim >= -1.0);
      CHECK(r.pos_sim <= 1.0);
      bool any_grad = false;
      for (const auto& [path, t] : state.q_params.tensors) {
        REQUIRE(t.grad.has_value());
        any_grad = any_grad || !t.grad->isZero();
      }
      CHECK(any_grad);
    }
    for (const auto& [path, t] : state.k_params.tensors) {
      CHECK((!t.grad.has_value() || t.grad->isZero()));
    }
  }
}

TEST_CASE("moco_step loss equals offline recomputation from the logged tensors") {
  const auto cfg = small_encoder();
  auto state = MocoState<float>::create(init_params<float>(cfg, 3), 32, 0.9, 0.2);
  fill_queue(state.queue, 4);
  for (int step = 0; step < 3; ++step) {
    const Tensor<float> snapshot = state.queue.storage();
    const auto r = moco_step(state, random_views<float>(8, 16, 40 + step));
    REQUIRE_FALSE(r.warming);
    const auto q = r.q.cast<double>();
    const auto k = r.k_pos.cast<double>();
    const auto neg = snapshot.cast<double>();
    CHECK(std::abs(infonce_value(q, k, &neg, 0.2) - r.loss) < 1e-6);
    // Keys are enqueued after the loss: newest rows are this step's keys.
    const auto c = state.queue.contents();
    CHECK(c.matrix().bottomRows(8) == r.k_pos.matrix());
  }
}

TEST_CASE("moco negatives are decoupled from the batch size") {
  const auto cfg = small_encoder();
  auto base = MocoState<float>::create(init_params<float>(cfg, 11), 128, 0.99, 0.2);
  fill_queue(base.queue, 12);
  const auto views64 = random_views<float>(64, 16, 13);
  ViewBatch<float> views16{Tensor<float>({16, 3, 16, 16}), Tensor<float>({16, 3, 16, 16})};
  views16.query.data = views64.query.data.head(views16.query.numel());
  views16.key.data = views64.key.data.head(views16.key.numel());

  auto a = base;
  auto b = base;
  const auto r64 = moco_step(a, views64);
  const auto r16 = moco_step(b, views16);
  CHECK(r64.negatives_per_query == 128);
  CHECK(r16.negatives_per_query == 128);
  const auto diff = (r64.logits.matrix().topRows(16) - r16.logits.matrix()).cwiseAbs().maxCoeff();
  CHECK(diff < 1e-6);
}

TEST_CASE("e2e_step: counting, brute-force oracle, key-path gradient") {
  const auto cfg = small_encoder();
  auto params = init_params<double>(cfg, 5);
  const auto r2 = e2e_step(params, random_views<double>(2, 16, 1), 0.2);
  CHECK(r2.negatives_per_query == 1);
  CHECK(r2.logits.shape == Shape{2, 2});

  const auto views = random_views<double>(4, 16, 2);
  const auto r = e2e_step(params, views, 0.2);
  double brute = 0.0;
  for (Index i = 0; i < 4; ++i) {
    double denom = 0.0;
    double pos = 0.0;
    for (Index j = 0; j < 4; ++j) {
      double s = 0.0;
      for (Index c = 0; c < 16; ++c) s += r.q.data(i * 16 + c) * r.k_pos.data(j * 16 + c);
      denom += std::exp(s / 0.2);
      if (i == j) pos = s / 0.2;
    }
    brute += -(pos - std::log(denom));
  }
  CHECK(std::abs(r.loss - brute / 4.0) < 1e-6);

  // Same loss with the key path detached; the gradient difference is the
  // key-path contribution.
  std::map<std::string, Vector<double>> full;
  for (const auto& [path, t] : params.tensors) full[path] = *t.grad;
  params.zero_grad();
  {
    Graph<double> g;
    const auto bound = bind(g, params, true);
    const Var q = embed(g, bound, cfg, g.constant(views.query));
    const Var k = g.constant(encode_detached(params, views.key));
    const Var logits = scale(g, matmul_nt(g, q, k), 1.0 / 0.2);
    const std::vector<Index> labels{0, 1, 2, 3};
    g.backward(softmax_cross_entropy(g, logits, labels));
  }
  double key_path = 0.0;
  for (const auto& [path, t] : params.tensors) key_path += (full[path] - *t.grad).squaredNorm();
  CHECK(std::sqrt(key_path) > 1e-6);
}

TEST_CASE("e2e_step needs at least two images") {
  auto params = init_params<float>(small_encoder(), 5);
  CHECK_THROWS_AS(e2e_step(params, random_views<float>(1, 16, 1), 0.2), ConfigError);
}

TEST_CASE("moco with m=0 and in-batch negatives agrees with e2e") {
  const auto cfg = small_encoder();
  auto state = MocoState<double>::create(init_params<double>(cfg, 21), 8, 0.0, 0.2);
  auto k0 = init_params<double>(cfg, 99);
  state.k_params = k0;  // m = 0 must overwrite this with the query encoder
  const Index b = 6;
  const auto views = random_views<double>(b, 16, 31);

  momentum_update(state.k_params, state.q_params, state.momentum);
  const auto q = encode_detached(state.q_params, views.query);
  const auto k = encode_detached(state.k_params, views.key);
  double moco_loss = 0.0;
  for (Index i = 0; i < b; ++i) {
    Tensor<double> qi({1, 16}), ki({1, 16}), others({b - 1, 16});
    qi.matrix() = q.matrix().row(i);
    ki.matrix() = k.matrix().row(i);
    Index r = 0;
    for (Index j = 0; j < b; ++j) {
      if (j != i) others.matrix().row(r++) = k.matrix().row(j);
    }
    moco_loss += infonce_value(qi, ki, &others, state.tau);
  }
  moco_loss /= static_cast<double>(b);
  const auto e2e = e2e_step(state.q_params, views, 0.2);
  CHECK(std::abs(moco_loss - e2e.loss) < 1e-6);
}
