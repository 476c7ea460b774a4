#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "moco/rng.hpp"
#include "moco/tensor.hpp"

namespace moco {

using Pixels = Eigen::Array<float, 3, Eigen::Dynamic, Eigen::RowMajor>;

// Square RGB image in [0, 1]; row c of `px` is channel c, row-major, so the
// memory layout is [3 x S x S].
struct Image {
  Index side = 0;
  Pixels px;

  Image() = default;
  explicit Image(Index s) : side(s), px(Pixels::Zero(3, s * s)) {}

  float& at(Index c, Index y, Index x) { return px(c, y * side + x); }
  float at(Index c, Index y, Index x) const { return px(c, y * side + x); }

  static Image from_planes(const float* data, Index side);
  Tensor<float> tensor() const;

  friend bool operator==(const Image& a, const Image& b) {
    return a.side == b.side && (a.px == b.px).all();
  }
};

enum class AugKind { kBase, kPlus };

std::string_view to_string(AugKind kind);
AugKind parse_aug_kind(std::string_view text);

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
};

struct JitterStrengths {
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double hue = 0.1;
};

// Baseline two-view stack; kind = plus adds Gaussian blur.
struct AugConfig {
  AugKind kind = AugKind::kPlus;
  Interval crop_scale{0.2, 1.0};
  Interval crop_aspect{3.0 / 4.0, 4.0 / 3.0};
  double flip_p = 0.5;
  JitterStrengths jitter;
  double jitter_p = 0.8;
  double grayscale_p = 0.2;
  double blur_p = 0.5;
  Interval blur_sigma{0.1, 2.0};

  void validate() const;
};

enum class Transform { kCrop, kFlip, kJitter, kGrayscale, kBlur };

std::string_view to_string(Transform t);

// Records which transforms ran, in order.
struct AugTrace {
  std::vector<Transform> applied;
  std::size_t blur_calls = 0;
};

struct CropBox {
  Index top = 0;
  Index left = 0;
  Index height = 0;
  Index width = 0;
};

// Up to 10 draws of (area, log-aspect); a draw is kept when the rounded box
// fits and its area fraction lies in `scale`. Falls back to a centered
// square of area fraction <= scale.hi.
CropBox sample_crop_box(Index side, Interval scale, Interval aspect, Stream& rng);

// Bilinear resampling of the box to out x out, half-pixel centers, edge clamp.
Image resized_crop(const Image& img, const CropBox& box, Index out);

Image random_resized_crop(const Image& img, Interval scale, Interval aspect, Index out,
                          Stream& rng);

Image horizontal_flip(const Image& img);

struct JitterFactors {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;  // in turns
};

JitterFactors sample_jitter(const JitterStrengths& s, Stream& rng);

// Brightness, contrast, saturation, hue in that order, clipping to [0, 1]
// after each.
Image apply_jitter(const Image& img, const JitterFactors& f);

Image color_jitter(const Image& img, const JitterStrengths& s, Stream& rng);

// ITU-R 601 luma replicated to three channels.
Image grayscale(const Image& img);

// Normalized taps for radius ceil(2 sigma).
std::vector<double> gaussian_kernel(double sigma);

// Separable blur with reflect padding.
Image gaussian_blur(const Image& img, double sigma, AugTrace* trace = nullptr);

std::array<double, 3> hsv_to_rgb(double h, double s, double v);
std::array<double, 3> rgb_to_hsv(double r, double g, double b);

// crop -> flip -> jitter -> grayscale -> blur (plus only), each gated by
// its probability.
Image augment_view(const Image& img, const AugConfig& cfg, Stream& rng, AugTrace* trace = nullptr);

struct ViewPair {
  Image view_q;
  Image view_k;
  Index source_index = 0;
};

// Views come from sub-streams derive(key, 0) and derive(key, 1).
ViewPair two_views(const Image& img, const AugConfig& cfg, StreamKey key,
                   Index source_index = 0, AugTrace* trace_q = nullptr,
                   AugTrace* trace_k = nullptr);

// Binary PPM (P6, maxval 255) of the images laid side by side with a
// 1-pixel white gutter. All images must share a side.
std::string encode_ppm(std::span<const Image> row);
void write_ppm(const std::string& path, std::span<const Image> row);

}  // namespace moco
