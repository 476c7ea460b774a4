#include "moco/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "moco/error.hpp"

namespace moco {

Tensor<float> Dataset::gather(std::span<const Index> indices) const {
  if (indices.empty()) throw DimensionError("cannot gather an empty batch");
  Tensor<float> t({static_cast<Index>(indices.size()), 3, side, side});
  const Index stride = image_numel();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Index i = indices[r];
    if (i < 0 || i >= size()) {
      throw DimensionError("image index " + std::to_string(i) + " outside dataset of " +
                           std::to_string(size()));
    }
    std::copy_n(image_data(i), stride, t.data.data() + static_cast<Index>(r) * stride);
  }
  return t;
}

void Dataset::validate() const {
  if (side < 1 || classes < 1) throw ContractError("dataset extents must be positive");
  if (static_cast<Index>(pixels.size()) != size() * image_numel()) {
    throw DimensionError("dataset holds " + std::to_string(pixels.size()) + " pixel values for " +
                         std::to_string(size()) + " images of side " + std::to_string(side));
  }
  for (int y : labels) {
    if (y < 0 || y >= classes) throw ContractError("label " + std::to_string(y) + " out of range");
  }
  for (float v : pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("pixel value outside [0, 1]");
  }
}

Dataset load_cifar10_bin(std::span<const std::filesystem::path> paths) {
  Dataset ds;
  ds.source = "cifar10";
  constexpr std::size_t plane = kCifarSide * kCifarSide;
  for (const auto& path : paths) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "'");
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                           std::istreambuf_iterator<char>());
    if (bytes.size() % kCifarRecordBytes != 0) {
      const std::size_t whole = bytes.size() / kCifarRecordBytes;
      throw FormatError("'" + path.string() + "' has " + std::to_string(bytes.size()) +
                            " bytes, not a multiple of the " +
                            std::to_string(kCifarRecordBytes) + "-byte record",
                        whole * kCifarRecordBytes);
    }
    const std::size_t records = bytes.size() / kCifarRecordBytes;
    const std::size_t first = ds.labels.size();
    ds.pixels.reserve(ds.pixels.size() + records * 3 * plane);
    for (std::size_t r = 0; r < records; ++r) {
      const std::size_t offset = r * kCifarRecordBytes;
      const int label = bytes[offset];
      if (label >= kCifarClasses) {
        throw CorruptRecordError("'" + path.string() + "' record " + std::to_string(r) +
                                     " has label " + std::to_string(label),
                                 offset, first + r);
      }
      ds.labels.push_back(label);
      for (std::size_t k = 0; k < 3 * plane; ++k) {
        ds.pixels.push_back(static_cast<float>(bytes[offset + 1 + k]) / 255.0f);
      }
    }
    ds.source += ":" + path.filename().string();
  }
  return ds;
}

void write_cifar10_bin(const Dataset& ds, const std::filesystem::path& path) {
  if (ds.side != kCifarSide) {
    throw DimensionError("the binary layout stores 32x32 images, got side " +
                         std::to_string(ds.side));
  }
  ds.validate();
  std::string out;
  out.reserve(static_cast<std::size_t>(ds.size()) * kCifarRecordBytes);
  for (Index i = 0; i < ds.size(); ++i) {
    if (ds.labels[static_cast<std::size_t>(i)] >= kCifarClasses) {
      throw ContractError("label does not fit the 10-class layout");
    }
    out.push_back(static_cast<char>(ds.labels[static_cast<std::size_t>(i)]));
    const float* px = ds.image_data(i);
    for (Index k = 0; k < ds.image_numel(); ++k) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(px[k] * 255.0f))));
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

void SyntheticSpec::validate() const {
  if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (side < 8) throw ConfigError("synthetic image side must be at least 8");
  if (per_class < 1) throw ConfigError("synthetic data needs at least 1 image per class");
  if (!(noise >= 0.0) || !std::isfinite(noise)) {
    throw ConfigError("synthetic noise must be finite and non-negative");
  }
}

std::string SyntheticSpec::describe() const {
  return "synthetic(per_class=" + std::to_string(per_class) + ",classes=" +
         std::to_string(classes) + ",side=" + std::to_string(side) +
         ",noise=" + std::to_string(noise) + ",seed=" + std::to_string(seed) + ")";
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.side = spec.side;
  ds.classes = spec.classes;
  ds.source = spec.describe();
  const Index n = spec.per_class * spec.classes;
  const Index s = spec.side;
  ds.pixels.resize(static_cast<std::size_t>(n * 3 * s * s));
  ds.labels.resize(static_cast<std::size_t>(n));
  const StreamKey root = make_key(spec.seed);
  for (Index c = 0; c < spec.classes; ++c) {
    const auto base = hsv_to_rgb(static_cast<double>(c) / static_cast<double>(spec.classes), 0.8,
                                 0.7);
    const double freq = 2.0 * std::numbers::pi * static_cast<double>(1 + c) / static_cast<double>(s);
    const StreamKey class_key = derive(root, static_cast<std::uint64_t>(c));
    for (Index i = 0; i < spec.per_class; ++i) {
      const Index idx = i * spec.classes + c;
      ds.labels[static_cast<std::size_t>(idx)] = static_cast<int>(c);
      Stream rng(derive(class_key, static_cast<std::uint64_t>(i)));
      float* px = ds.pixels.data() + idx * 3 * s * s;
      for (Index ch = 0; ch < 3; ++ch) {
        for (Index y = 0; y < s; ++y) {
          for (Index x = 0; x < s; ++x) {
            double v = base[static_cast<std::size_t>(ch)] +
                       0.2 * std::sin(freq * static_cast<double>(x + y));
            if (spec.noise > 0.0) v += spec.noise * rng.normal();
            px[(ch * s + y) * s + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      }
    }
  }
  return ds;
}

std::vector<Index> permutation(Index n, StreamKey epoch_key) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  Stream rng(epoch_key);
  for (Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
  }
  return p;
}

std::vector<std::vector<Index>> batch_iter(Index n, Index batch, StreamKey epoch_key) {
  if (batch < 1) throw ConfigError("batch size must be positive");
  if (batch > n) {
    throw ConfigError("batch size " + std::to_string(batch) + " exceeds dataset size " +
                      std::to_string(n));
  }
  const std::vector<Index> p = permutation(n, epoch_key);
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start + batch <= n; start += batch) {
    out.emplace_back(p.begin() + start, p.begin() + start + batch);
  }
  return out;
}

}  // namespace moco
