#include "moco/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "moco/error.hpp"

namespace moco {

namespace {

constexpr double kLumaR = 0.299;
constexpr double kLumaG = 0.587;
constexpr double kLumaB = 0.114;

float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ConfigError(std::string(name) + " must lie in [0, 1], got " + std::to_string(p));
  }
}

void check_interval(Interval iv, const char* name) {
  if (!(iv.lo <= iv.hi)) {
    throw ConfigError(std::string(name) + " interval is empty: [" + std::to_string(iv.lo) +
                      ", " + std::to_string(iv.hi) + "]");
  }
}

Index reflect(Index p, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  p %= period;
  if (p < 0) p += period;
  return p < n ? p : period - p;
}

void record(AugTrace* trace, Transform t) {
  if (trace) trace->applied.push_back(t);
}

}  // namespace

Image Image::from_planes(const float* data, Index s) {
  Image img(s);
  std::copy(data, data + 3 * s * s, img.px.data());
  return img;
}

Tensor<float> Image::tensor() const {
  Tensor<float> t({3, side, side});
  std::copy(px.data(), px.data() + px.size(), t.data.data());
  return t;
}

std::string_view to_string(AugKind kind) {
  return kind == AugKind::kBase ? "base" : "plus";
}

AugKind parse_aug_kind(std::string_view text) {
  if (text == "base") return AugKind::kBase;
  if (text == "plus") return AugKind::kPlus;
  throw ConfigError("unknown augmentation kind '" + std::string(text) +
                    "' (expected base or plus)");
}

std::string_view to_string(Transform t) {
  switch (t) {
    case Transform::kCrop: return "crop";
    case Transform::kFlip: return "flip";
    case Transform::kJitter: return "jitter";
    case Transform::kGrayscale: return "grayscale";
    case Transform::kBlur: return "blur";
  }
  return "?";
}

void AugConfig::validate() const {
  check_interval(crop_scale, "crop scale");
  check_interval(crop_aspect, "crop aspect");
  check_interval(blur_sigma, "blur sigma");
  if (!(crop_scale.lo > 0.0 && crop_scale.hi <= 1.0)) {
    throw ConfigError("crop scale must lie in (0, 1]");
  }
  if (!(crop_aspect.lo > 0.0)) throw ConfigError("crop aspect must be positive");
  if (!(blur_sigma.lo > 0.0)) throw ConfigError("blur sigma must be positive");
  check_probability(flip_p, "flip probability");
  check_probability(jitter_p, "jitter probability");
  check_probability(grayscale_p, "grayscale probability");
  check_probability(blur_p, "blur probability");
  for (double s : {jitter.brightness, jitter.contrast, jitter.saturation}) {
    if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("jitter strength must lie in [0, 1]");
  }
  if (!(jitter.hue >= 0.0 && jitter.hue <= 0.5)) {
    throw ConfigError("hue strength must lie in [0, 0.5]");
  }
}

CropBox sample_crop_box(Index side, Interval scale, Interval aspect, Stream& rng) {
  if (side < 1) throw DimensionError("crop of an empty image");
  const double area = static_cast<double>(side * side);
  const double log_lo = std::log(aspect.lo);
  const double log_hi = std::log(aspect.hi);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale.lo, scale.hi);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = static_cast<Index>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<Index>(std::lround(std::sqrt(target / ratio)));
    if (w < 1 || h < 1 || w > side || h > side) continue;
    const double frac = static_cast<double>(w * h) / area;
    if (frac < scale.lo || frac > scale.hi) continue;
    const auto top = static_cast<Index>(rng.below(static_cast<std::uint64_t>(side - h + 1)));
    const auto left = static_cast<Index>(rng.below(static_cast<std::uint64_t>(side - w + 1)));
    return {top, left, h, w};
  }
  const Index c = std::clamp<Index>(
      static_cast<Index>(std::floor(static_cast<double>(side) * std::sqrt(scale.hi))), 1, side);
  return {(side - c) / 2, (side - c) / 2, c, c};
}

Image resized_crop(const Image& img, const CropBox& box, Index out) {
  if (box.height < 1 || box.width < 1 || box.top < 0 || box.left < 0 ||
      box.top + box.height > img.side || box.left + box.width > img.side) {
    throw DimensionError("crop box outside a " + std::to_string(img.side) + "-pixel image");
  }
  if (out < 1) throw DimensionError("resize target must be positive");
  struct Tap {
    Index i0, i1;
    double w;
  };
  auto taps = [out](Index origin, Index extent) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double step = static_cast<double>(extent) / static_cast<double>(out);
    for (Index o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * step - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(extent - 1));
      const auto i0 = static_cast<Index>(std::floor(src));
      const Index i1 = std::min(i0 + 1, extent - 1);
      t[static_cast<std::size_t>(o)] = {origin + i0, origin + i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(box.top, box.height);
  const auto tx = taps(box.left, box.width);
  Image res(out);
  for (Index c = 0; c < 3; ++c) {
    for (Index y = 0; y < out; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      for (Index x = 0; x < out; ++x) {
        const Tap& b = tx[static_cast<std::size_t>(x)];
        const double top = (1.0 - b.w) * img.at(c, a.i0, b.i0) + b.w * img.at(c, a.i0, b.i1);
        const double bot = (1.0 - b.w) * img.at(c, a.i1, b.i0) + b.w * img.at(c, a.i1, b.i1);
        res.at(c, y, x) = static_cast<float>((1.0 - a.w) * top + a.w * bot);
      }
    }
  }
  return res;
}

Image random_resized_crop(const Image& img, Interval scale, Interval aspect, Index out,
                          Stream& rng) {
  return resized_crop(img, sample_crop_box(img.side, scale, aspect, rng), out);
}

Image horizontal_flip(const Image& img) {
  Image res(img.side);
  for (Index c = 0; c < 3; ++c) {
    for (Index y = 0; y < img.side; ++y) {
      for (Index x = 0; x < img.side; ++x) {
        res.at(c, y, x) = img.at(c, y, img.side - 1 - x);
      }
    }
  }
  return res;
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h -= std::floor(h);
  const double h6 = h * 6.0;
  const int sector = std::min(static_cast<int>(h6), 5);
  const double f = h6 - sector;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0.0;
  if (d > 0.0) {
    if (mx == r) {
      h = (g - b) / d;
    } else if (mx == g) {
      h = 2.0 + (b - r) / d;
    } else {
      h = 4.0 + (r - g) / d;
    }
    h /= 6.0;
    h -= std::floor(h);
  }
  return {h, mx > 0.0 ? d / mx : 0.0, mx};
}

JitterFactors sample_jitter(const JitterStrengths& s, Stream& rng) {
  JitterFactors f;
  f.brightness = std::max(0.0, rng.uniform(1.0 - s.brightness, 1.0 + s.brightness));
  f.contrast = std::max(0.0, rng.uniform(1.0 - s.contrast, 1.0 + s.contrast));
  f.saturation = std::max(0.0, rng.uniform(1.0 - s.saturation, 1.0 + s.saturation));
  f.hue = rng.uniform(-s.hue, s.hue);
  return f;
}

Image apply_jitter(const Image& img, const JitterFactors& f) {
  Image res = img;
  const Index n = img.side * img.side;
  if (f.brightness != 1.0) {
    for (Index i = 0; i < res.px.size(); ++i) {
      res.px.data()[i] = clip01(f.brightness * res.px.data()[i]);
    }
  }
  if (f.contrast != 1.0) {
    double mean = 0.0;
    for (Index i = 0; i < n; ++i) {
      mean += kLumaR * res.px(0, i) + kLumaG * res.px(1, i) + kLumaB * res.px(2, i);
    }
    mean /= static_cast<double>(n);
    for (Index i = 0; i < res.px.size(); ++i) {
      res.px.data()[i] = clip01(f.contrast * res.px.data()[i] + (1.0 - f.contrast) * mean);
    }
  }
  if (f.saturation != 1.0) {
    for (Index i = 0; i < n; ++i) {
      const double gray = kLumaR * res.px(0, i) + kLumaG * res.px(1, i) + kLumaB * res.px(2, i);
      for (Index c = 0; c < 3; ++c) {
        res.px(c, i) = clip01(f.saturation * res.px(c, i) + (1.0 - f.saturation) * gray);
      }
    }
  }
  if (f.hue != 0.0) {
    for (Index i = 0; i < n; ++i) {
      auto hsv = rgb_to_hsv(res.px(0, i), res.px(1, i), res.px(2, i));
      const auto rgb = hsv_to_rgb(hsv[0] + f.hue, hsv[1], hsv[2]);
      for (Index c = 0; c < 3; ++c) res.px(c, i) = clip01(rgb[static_cast<std::size_t>(c)]);
    }
  }
  return res;
}

Image color_jitter(const Image& img, const JitterStrengths& s, Stream& rng) {
  return apply_jitter(img, sample_jitter(s, rng));
}

Image grayscale(const Image& img) {
  Image res(img.side);
  for (Index i = 0; i < img.side * img.side; ++i) {
    const float g =
        clip01(kLumaR * img.px(0, i) + kLumaG * img.px(1, i) + kLumaB * img.px(2, i));
    res.px.col(i).setConstant(g);
  }
  return res;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ConfigError("blur sigma must be positive and finite");
  }
  const auto radius = static_cast<Index>(std::ceil(2.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (Index i = -radius; i <= radius; ++i) {
    const double w = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (double& w : k) w /= total;
  return k;
}

Image gaussian_blur(const Image& img, double sigma, AugTrace* trace) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const auto radius = static_cast<Index>(k.size() / 2);
  const Index s = img.side;
  if (trace) ++trace->blur_calls;
  Image res(s);
  std::vector<double> tmp(static_cast<std::size_t>(s * s));
  for (Index c = 0; c < 3; ++c) {
    for (Index y = 0; y < s; ++y) {
      for (Index x = 0; x < s; ++x) {
        double acc = 0.0;
        for (Index j = -radius; j <= radius; ++j) {
          acc += k[static_cast<std::size_t>(j + radius)] * img.at(c, y, reflect(x + j, s));
        }
        tmp[static_cast<std::size_t>(y * s + x)] = acc;
      }
    }
    for (Index y = 0; y < s; ++y) {
      for (Index x = 0; x < s; ++x) {
        double acc = 0.0;
        for (Index j = -radius; j <= radius; ++j) {
          acc += k[static_cast<std::size_t>(j + radius)] *
                 tmp[static_cast<std::size_t>(reflect(y + j, s) * s + x)];
        }
        res.at(c, y, x) = clip01(acc);
      }
    }
  }
  return res;
}

Image augment_view(const Image& img, const AugConfig& cfg, Stream& rng, AugTrace* trace) {
  Image v = random_resized_crop(img, cfg.crop_scale, cfg.crop_aspect, img.side, rng);
  record(trace, Transform::kCrop);
  if (rng.bernoulli(cfg.flip_p)) {
    v = horizontal_flip(v);
    record(trace, Transform::kFlip);
  }
  if (rng.bernoulli(cfg.jitter_p)) {
    v = color_jitter(v, cfg.jitter, rng);
    record(trace, Transform::kJitter);
  }
  if (rng.bernoulli(cfg.grayscale_p)) {
    v = grayscale(v);
    record(trace, Transform::kGrayscale);
  }
  if (cfg.kind == AugKind::kPlus && rng.bernoulli(cfg.blur_p)) {
    v = gaussian_blur(v, rng.uniform(cfg.blur_sigma.lo, cfg.blur_sigma.hi), trace);
    record(trace, Transform::kBlur);
  }
  return v;
}

ViewPair two_views(const Image& img, const AugConfig& cfg, StreamKey key, Index source_index,
                   AugTrace* trace_q, AugTrace* trace_k) {
  Stream rq(derive(key, 0));
  Stream rk(derive(key, 1));
  ViewPair pair;
  pair.view_q = augment_view(img, cfg, rq, trace_q);
  pair.view_k = augment_view(img, cfg, rk, trace_k);
  pair.source_index = source_index;
  return pair;
}

std::string encode_ppm(std::span<const Image> row) {
  if (row.empty()) throw ContractError("no images to encode");
  const Index s = row.front().side;
  for (const Image& im : row) {
    if (im.side != s) throw DimensionError("images in a row must share a side");
  }
  const auto n = static_cast<Index>(row.size());
  const Index width = n * s + (n - 1);
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(s) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(3 * width * s));
  for (Index y = 0; y < s; ++y) {
    for (Index i = 0; i < n; ++i) {
      if (i > 0) out.append(3, static_cast<char>(255));
      const Image& im = row[static_cast<std::size_t>(i)];
      for (Index x = 0; x < s; ++x) {
        for (Index c = 0; c < 3; ++c) {
          const double v = std::clamp<double>(im.at(c, y, x), 0.0, 1.0);
          out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
      }
    }
  }
  return out;
}

void write_ppm(const std::string& path, std::span<const Image> row) {
  const std::string bytes = encode_ppm(row);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing '" + path + "'");
}

}  // namespace moco
