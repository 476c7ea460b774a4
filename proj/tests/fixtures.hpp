#pragma once

#include <string>
#include <vector>

#include "moco/contrastive.hpp"
#include "moco/encoder.hpp"
#include "moco/grad_check.hpp"
#include "test_support.hpp"

namespace moco::test {

inline EncoderConfig tiny_encoder(HeadKind head) {
  EncoderConfig cfg;
  cfg.input_hw = 8;
  cfg.channels = {3, 4, 5};
  cfg.head = head;
  cfg.head_hidden = 6;
  cfg.embed_dim = 4;
  return cfg;
}

// Encoder parameters flattened for grad_check. Weights carry a gain so
// embedding norms are O(1)-and-up; otherwise the l2_normalize curvature
// makes the eps^2 truncation term of central differences exceed 1e-4 on
// small-gradient coordinates. Biases are small and nonzero so no relu input
// sits exactly on its kink.
struct EncoderFixture {
  EncoderConfig cfg;
  std::vector<std::string> paths;
  std::vector<Tensor<double>> params;

  EncoderFixture(const EncoderConfig& c, std::uint64_t seed, double gain = 6.0) : cfg(c) {
    const auto init = init_params<double>(cfg, seed);
    for (const auto& [path, t] : init.tensors) {
      paths.push_back(path);
      params.push_back(t);
      if (path.ends_with(".b")) {
        params.back() = random_tensor({t.dim(0)}, seed * 131 + params.size(), -0.1, 0.1);
      } else {
        params.back().data *= gain;
      }
    }
  }

  BoundParams bound(std::span<const Var> vars) const {
    BoundParams b;
    for (std::size_t i = 0; i < paths.size(); ++i) b.emplace(paths[i], vars[i]);
    return b;
  }
};

}  // namespace moco::test
