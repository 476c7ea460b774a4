#include "moco/encoder.hpp"

#include <cmath>

#include "moco/rng.hpp"

namespace moco {

std::string_view to_string(HeadKind kind) {
  return kind == HeadKind::kFc ? "fc" : "mlp";
}

HeadKind parse_head_kind(std::string_view text) {
  if (text == "fc") return HeadKind::kFc;
  if (text == "mlp") return HeadKind::kMlp;
  throw ConfigError("unknown head kind '" + std::string(text) + "' (expected fc or mlp)");
}

void EncoderConfig::validate() const {
  if (input_hw <= 0) throw ConfigError("encoder: input_hw must be positive");
  if (channels.empty()) throw ConfigError("encoder: at least one conv width is required");
  for (Index c : channels) {
    if (c <= 0) throw ConfigError("encoder: conv widths must be positive");
  }
  if (embed_dim <= 0) throw ConfigError("encoder: embed_dim must be positive");
  if (head == HeadKind::kMlp && head_hidden <= 0) {
    throw ConfigError("encoder: head_hidden must be positive");
  }
}

template <typename Scalar>
bool ModelParams<Scalar>::congruent_with(const ModelParams& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  auto it = other.tensors.begin();
  for (const auto& [path, t] : tensors) {
    if (it->first != path || it->second.shape != t.shape) return false;
    ++it;
  }
  return true;
}

template <typename Scalar>
bool ModelParams<Scalar>::all_finite() const {
  for (const auto& [path, t] : tensors) {
    if (!t.all_finite()) return false;
  }
  return true;
}

template <typename Scalar>
std::size_t ModelParams<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [path, t] : tensors) n += static_cast<std::size_t>(t.numel());
  return n;
}

template <typename Scalar>
void ModelParams<Scalar>::zero_grad() {
  for (auto& [path, t] : tensors) t.zero_grad();
}

namespace {

std::uint64_t path_hash(const std::string& path) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : path) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

template <typename Scalar>
void glorot(Tensor<Scalar>& t, Index fan_in, Index fan_out, StreamKey key) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Stream s(key);
  for (Index i = 0; i < t.numel(); ++i) t.data(i) = static_cast<Scalar>(s.uniform(-a, a));
}

}  // namespace

template <typename Scalar>
ModelParams<Scalar> init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<Scalar> p{cfg, {}};
  const StreamKey root = make_key(seed);
  auto weight = [&](const std::string& path, Shape shape, Index fan_in, Index fan_out) {
    Tensor<Scalar> t(std::move(shape));
    glorot(t, fan_in, fan_out, derive(root, path_hash(path)));
    p.tensors.emplace(path, std::move(t));
  };
  auto bias = [&](const std::string& path, Index n) { p.tensors.emplace(path, Tensor<Scalar>({n})); };

  Index in = 3;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const Index out = cfg.channels[i];
    const std::string name = "conv" + std::to_string(i);
    weight(name + ".w", {out, in, 3, 3}, in * 9, out * 9);
    bias(name + ".b", out);
    in = out;
  }
  if (cfg.head == HeadKind::kFc) {
    weight("head.fc.w", {in, cfg.embed_dim}, in, cfg.embed_dim);
    bias("head.fc.b", cfg.embed_dim);
  } else {
    weight("head.fc1.w", {in, cfg.head_hidden}, in, cfg.head_hidden);
    bias("head.fc1.b", cfg.head_hidden);
    weight("head.fc2.w", {cfg.head_hidden, cfg.embed_dim}, cfg.head_hidden, cfg.embed_dim);
    bias("head.fc2.b", cfg.embed_dim);
  }
  return p;
}

template <typename Scalar>
BoundParams bind(Graph<Scalar>& g, ModelParams<Scalar>& params, bool track) {
  BoundParams bound;
  for (auto& [path, t] : params.tensors) {
    bound.emplace(path, track ? g.leaf(t) : g.constant(t));
  }
  return bound;
}

template <typename Scalar>
Var backbone_forward(Graph<Scalar>& g, const BoundParams& p, const EncoderConfig& cfg, Var x) {
  const Shape& s = g.shape(x);
  if (s.size() != 4 || s[1] != 3 || s[2] != cfg.input_hw || s[3] != cfg.input_hw) {
    throw DimensionError("backbone_forward: expected [Bx3x" + std::to_string(cfg.input_hw) +
                         "x" + std::to_string(cfg.input_hw) + "] input, got " + to_string(s));
  }
  Var h = x;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::string name = "conv" + std::to_string(i);
    const Index stride = i == 0 ? 1 : 2;
    h = conv2d(g, h, p.at(name + ".w"), stride, 1);
    h = relu(g, bias_add(g, h, p.at(name + ".b")));
  }
  return global_avg_pool(g, h);
}

template <typename Scalar>
Var head_forward(Graph<Scalar>& g, const BoundParams& p, const EncoderConfig& cfg, Var features) {
  const Shape& s = g.shape(features);
  if (s.size() != 2 || s[1] != cfg.feature_dim()) {
    throw DimensionError("head_forward: expected [Bx" + std::to_string(cfg.feature_dim()) +
                         "] features, got " + to_string(s));
  }
  if (cfg.head == HeadKind::kFc) {
    return bias_add(g, matmul(g, features, p.at("head.fc.w")), p.at("head.fc.b"));
  }
  const Var hidden =
      relu(g, bias_add(g, matmul(g, features, p.at("head.fc1.w")), p.at("head.fc1.b")));
  return bias_add(g, matmul(g, hidden, p.at("head.fc2.w")), p.at("head.fc2.b"));
}

template <typename Scalar>
Var embed(Graph<Scalar>& g, const BoundParams& p, const EncoderConfig& cfg, Var x) {
  return l2_normalize(g, head_forward(g, p, cfg, backbone_forward(g, p, cfg, x)));
}

#define MOCO_INSTANTIATE_ENCODER(S)                                                  \
  template struct ModelParams<S>;                                                    \
  template ModelParams<S> init_params<S>(const EncoderConfig&, std::uint64_t);       \
  template BoundParams bind<S>(Graph<S>&, ModelParams<S>&, bool);                    \
  template Var backbone_forward<S>(Graph<S>&, const BoundParams&, const EncoderConfig&, Var); \
  template Var head_forward<S>(Graph<S>&, const BoundParams&, const EncoderConfig&, Var);     \
  template Var embed<S>(Graph<S>&, const BoundParams&, const EncoderConfig&, Var);

MOCO_INSTANTIATE_ENCODER(float)
MOCO_INSTANTIATE_ENCODER(double)

#undef MOCO_INSTANTIATE_ENCODER

}  // namespace moco
