#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moco/graph.hpp"

namespace moco {

enum class HeadKind { kFc, kMlp };

std::string_view to_string(HeadKind kind);
HeadKind parse_head_kind(std::string_view text);

struct EncoderConfig {
  Index input_hw = 32;
  std::vector<Index> channels{32, 64, 128};
  HeadKind head = HeadKind::kMlp;
  Index head_hidden = 256;  // ignored by the fc head
  Index embed_dim = 64;

  Index feature_dim() const { return channels.back(); }
  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Encoder weights keyed by stable parameter path ("conv0.w", "head.fc1.b", ...).
template <typename Scalar>
struct ModelParams {
  EncoderConfig config;
  std::map<std::string, Tensor<Scalar>> tensors;

  Tensor<Scalar>& at(const std::string& path) { return tensors.at(path); }
  const Tensor<Scalar>& at(const std::string& path) const { return tensors.at(path); }

  // Same paths and shapes.
  bool congruent_with(const ModelParams& other) const;
  bool all_finite() const;
  std::size_t parameter_count() const;
  void zero_grad();

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out{config, {}};
    for (const auto& [path, t] : tensors) out.tensors.emplace(path, t.template cast<Other>());
    return out;
  }
};

// Parameters as graph nodes, keyed like ModelParams::tensors.
using BoundParams = std::map<std::string, Var>;

// Glorot-uniform weights, zero biases; deterministic per seed.
template <typename Scalar>
ModelParams<Scalar> init_params(const EncoderConfig& cfg, std::uint64_t seed);

// `track` binds parameters as gradient-receiving leaves, otherwise as
// detached constants.
template <typename Scalar>
BoundParams bind(Graph<Scalar>& g, ModelParams<Scalar>& params, bool track);

// [B x 3 x H x W] -> [B x D_f]: (conv3x3, bias, relu) per width, stride 2
// from the second block on, then global average pooling.
template <typename Scalar>
Var backbone_forward(Graph<Scalar>& g, const BoundParams& p, const EncoderConfig& cfg, Var x);

// [B x D_f] -> [B x D_e], unnormalized.
template <typename Scalar>
Var head_forward(Graph<Scalar>& g, const BoundParams& p, const EncoderConfig& cfg, Var features);

// l2_normalize(head(backbone(x))): the embedding fed to the contrastive loss.
template <typename Scalar>
Var embed(Graph<Scalar>& g, const BoundParams& p, const EncoderConfig& cfg, Var x);

}  // namespace moco
