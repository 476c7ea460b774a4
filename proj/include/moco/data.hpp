#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "moco/augment.hpp"
#include "moco/rng.hpp"
#include "moco/tensor.hpp"

namespace moco {

inline constexpr Index kCifarSide = 32;
inline constexpr Index kCifarClasses = 10;
inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

// N images of [3 x S x S] values in [0, 1], stored contiguously.
struct Dataset {
  Index side = kCifarSide;
  Index classes = kCifarClasses;
  std::vector<float> pixels;
  std::vector<int> labels;
  std::string source;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index image_numel() const { return 3 * side * side; }
  const float* image_data(Index i) const { return pixels.data() + i * image_numel(); }
  Image image(Index i) const { return Image::from_planes(image_data(i), side); }

  // [n x 3 x S x S] tensor of the listed images.
  Tensor<float> gather(std::span<const Index> indices) const;

  void validate() const;
};

// Concatenates the records of every file in order.
Dataset load_cifar10_bin(std::span<const std::filesystem::path> paths);

// Pixels are rounded to the nearest byte.
void write_cifar10_bin(const Dataset& ds, const std::filesystem::path& path);

struct SyntheticSpec {
  Index per_class = 500;
  Index classes = 4;
  Index side = 32;
  double noise = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
  std::string describe() const;
};

// Class c: HSV(c/C, 0.8, 0.7) base color plus 0.2 sin(2 pi (1+c)(x+y)/S)
// plus N(0, noise^2) per channel, clipped. Sample i of class c sits at index
// i*C + c and draws from stream (seed, c, i).
Dataset gen_synthetic(const SyntheticSpec& spec);

// Fisher-Yates permutation of [0, n) driven by `epoch_key`.
std::vector<Index> permutation(Index n, StreamKey epoch_key);

// Consecutive batches of the permutation; the final partial batch is dropped.
std::vector<std::vector<Index>> batch_iter(Index n, Index batch, StreamKey epoch_key);

}  // namespace moco
