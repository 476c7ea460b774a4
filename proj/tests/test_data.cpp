#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "moco/data.hpp"

using namespace moco;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mocolab_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

unsigned char fixture_byte(std::size_t record, std::size_t k) {
  return static_cast<unsigned char>((record * 131 + k * 7) % 256);
}

std::string two_record_file() {
  std::string bytes;
  const int labels[2] = {3, 9};
  for (std::size_t r = 0; r < 2; ++r) {
    bytes.push_back(static_cast<char>(labels[r]));
    for (std::size_t k = 0; k < 3072; ++k) bytes.push_back(static_cast<char>(fixture_byte(r, k)));
  }
  return bytes;
}

double l2(const float* a, const float* b, Index n) {
  double s = 0.0;
  for (Index i = 0; i < n; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("two-record binary file decodes exactly") {
  const fs::path p = scratch("two.bin");
  write_bytes(p, two_record_file());
  const std::vector<fs::path> paths = {p};
  const Dataset ds = load_cifar10_bin(paths);
  REQUIRE(ds.size() == 2);
  CHECK(ds.classes == 10);
  CHECK(ds.side == 32);
  CHECK(ds.labels == std::vector<int>{3, 9});
  for (std::size_t r = 0; r < 2; ++r) {
    const float* px = ds.image_data(static_cast<Index>(r));
    for (std::size_t k = 0; k < 3072; ++k) {
      REQUIRE(px[k] == static_cast<float>(fixture_byte(r, k)) / 255.0f);
    }
  }
  // Red plane of record 1 at row 2, column 5.
  CHECK(ds.image(1).at(0, 2, 5) == static_cast<float>(fixture_byte(1, 2 * 32 + 5)) / 255.0f);
  CHECK(ds.image(1).at(2, 0, 0) == static_cast<float>(fixture_byte(1, 2048)) / 255.0f);
}

TEST_CASE("truncated file is a format error with an offset") {
  const fs::path p = scratch("short.bin");
  write_bytes(p, std::string(3072, '\0'));
  const std::vector<fs::path> paths = {p};
  CHECK_THROWS_AS(load_cifar10_bin(paths), FormatError);

  std::string bytes = two_record_file();
  bytes.resize(bytes.size() - 10);
  write_bytes(p, bytes);
  try {
    load_cifar10_bin(paths);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == kCifarRecordBytes);
  }
}

TEST_CASE("out-of-range label names the record") {
  std::string bytes = two_record_file();
  bytes[kCifarRecordBytes] = 10;
  const fs::path p = scratch("badlabel.bin");
  write_bytes(p, bytes);
  const std::vector<fs::path> paths = {p};
  try {
    load_cifar10_bin(paths);
    FAIL("expected a corrupt record error");
  } catch (const CorruptRecordError& e) {
    CHECK(e.record() == 1);
    CHECK(e.offset() == kCifarRecordBytes);
  }
}

TEST_CASE("missing file is an io error") {
  const std::vector<fs::path> paths = {scratch("does_not_exist.bin")};
  CHECK_THROWS_AS(load_cifar10_bin(paths), IoError);
}

TEST_CASE("empty file list yields an empty ten-class dataset") {
  const Dataset ds = load_cifar10_bin({});
  CHECK(ds.size() == 0);
  CHECK(ds.classes == 10);
}

TEST_CASE("write then load is byte identical") {
  const fs::path a = scratch("roundtrip_a.bin");
  const fs::path b = scratch("roundtrip_b.bin");
  write_bytes(a, two_record_file() + two_record_file());
  const std::vector<fs::path> pa = {a};
  const Dataset ds = load_cifar10_bin(pa);
  write_cifar10_bin(ds, b);
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {});
  const std::string sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);
  const std::vector<fs::path> pb = {b};
  const Dataset again = load_cifar10_bin(pb);
  CHECK(again.pixels == ds.pixels);
  CHECK(again.labels == ds.labels);
}

TEST_CASE("multiple files concatenate in order") {
  const fs::path a = scratch("cat_a.bin");
  write_bytes(a, two_record_file());
  const std::vector<fs::path> paths = {a, a};
  const Dataset ds = load_cifar10_bin(paths);
  CHECK(ds.labels == std::vector<int>{3, 9, 3, 9});
}

TEST_CASE("zero-noise synthetic classes are constant") {
  SyntheticSpec spec;
  spec.per_class = 3;
  spec.classes = 4;
  spec.side = 8;
  spec.noise = 0.0;
  const Dataset ds = gen_synthetic(spec);
  REQUIRE(ds.size() == 12);
  for (Index i = 0; i < ds.size(); ++i) {
    const Index c = ds.labels[static_cast<std::size_t>(i)];
    CHECK(c == i % 4);
    CHECK(ds.image(i) == ds.image(c));
  }
  // Class 0: hue 0 gives RGB (0.7, 0.14, 0.14); pattern vanishes at x+y=0.
  CHECK(ds.image(0).at(0, 0, 0) == doctest::Approx(0.7));
  CHECK(ds.image(0).at(1, 0, 0) == doctest::Approx(0.14));
  const double expected = 0.14 + 0.2 * std::sin(2.0 * std::numbers::pi * 3.0 / 8.0);
  CHECK(ds.image(0).at(2, 1, 2) == doctest::Approx(expected));
}

TEST_CASE("synthetic generation is deterministic per seed") {
  SyntheticSpec spec;
  spec.per_class = 5;
  spec.side = 8;
  spec.seed = 42;
  CHECK(gen_synthetic(spec).pixels == gen_synthetic(spec).pixels);
  SyntheticSpec other = spec;
  other.seed = 43;
  CHECK(gen_synthetic(spec).pixels != gen_synthetic(other).pixels);
}

TEST_CASE("synthetic classes are separable at noise 0.05") {
  for (Index classes = 2; classes <= 8; ++classes) {
    SyntheticSpec spec;
    spec.per_class = 10;
    spec.classes = classes;
    spec.side = 16;
    spec.noise = 0.05;
    spec.seed = static_cast<std::uint64_t>(classes);
    const Dataset ds = gen_synthetic(spec);
    ds.validate();
    const Index d = ds.image_numel();
    std::vector<std::vector<float>> means(static_cast<std::size_t>(classes),
                                          std::vector<float>(static_cast<std::size_t>(d), 0.0f));
    for (Index i = 0; i < ds.size(); ++i) {
      auto& m = means[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])];
      for (Index k = 0; k < d; ++k) m[static_cast<std::size_t>(k)] += ds.image_data(i)[k] / 10.0f;
    }
    double within = 0.0;
    for (Index i = 0; i < ds.size(); ++i) {
      const auto& m = means[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])];
      within = std::max(within, l2(ds.image_data(i), m.data(), d));
    }
    double between = 1e300;
    for (Index a = 0; a < classes; ++a) {
      for (Index b = a + 1; b < classes; ++b) {
        between = std::min(between, l2(means[static_cast<std::size_t>(a)].data(),
                                       means[static_cast<std::size_t>(b)].data(), d));
      }
    }
    CAPTURE(classes);
    CHECK(between > within);
  }
}

TEST_CASE("synthetic size validation") {
  SyntheticSpec spec;
  spec.classes = 1;
  CHECK_THROWS_AS(gen_synthetic(spec), ConfigError);
  spec.classes = 4;
  spec.side = 7;
  CHECK_THROWS_AS(gen_synthetic(spec), ConfigError);
}

TEST_CASE("batching drops the remainder of one permutation") {
  const StreamKey key = make_key(5);
  const auto batches = batch_iter(103, 10, key);
  REQUIRE(batches.size() == 10);
  const auto perm = permutation(103, key);
  std::size_t k = 0;
  for (const auto& b : batches) {
    REQUIRE(b.size() == 10);
    for (Index i : b) REQUIRE(i == perm[k++]);
  }
  const std::set<Index> all(perm.begin(), perm.end());
  CHECK(all.size() == 103);
  CHECK(*all.rbegin() == 102);
  CHECK(batch_iter(103, 10, key) == batches);
  CHECK(batch_iter(103, 10, make_key(6)) != batches);
  CHECK_THROWS_AS(batch_iter(8, 9, key), ConfigError);
}

TEST_CASE("permutations are roughly uniform") {
  // Position of element 0 over many shuffles of 4 items.
  std::vector<int> counts(4, 0);
  for (std::uint64_t s = 0; s < 8000; ++s) {
    const auto p = permutation(4, make_key(s));
    for (std::size_t i = 0; i < 4; ++i) {
      if (p[i] == 0) ++counts[i];
    }
  }
  for (int c : counts) CHECK(std::abs(c - 2000) < 200);
}

TEST_CASE("gather copies images into a batch tensor") {
  SyntheticSpec spec;
  spec.per_class = 2;
  spec.side = 8;
  const Dataset ds = gen_synthetic(spec);
  const std::vector<Index> idx = {5, 1};
  const Tensor<float> t = ds.gather(idx);
  CHECK(t.shape == Shape{2, 3, 8, 8});
  CHECK(t.data(0) == ds.image_data(5)[0]);
  CHECK(t.data(192) == ds.image_data(1)[0]);
  const std::vector<Index> bad = {8};
  CHECK_THROWS_AS(ds.gather(bad), DimensionError);
}
