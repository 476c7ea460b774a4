#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "moco/eval.hpp"

using namespace moco;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mocolab_test_eval" / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

RunConfig tiny_run() {
  RunConfig cfg;
  cfg.data_per_class = 16;
  cfg.data_classes = 4;
  cfg.data_side = 8;
  cfg.channels = {4, 8, 8};
  cfg.head_hidden = 16;
  cfg.embed_dim = 8;
  cfg.batch = 8;
  cfg.K = 16;
  cfg.epochs = 1;
  return cfg;
}

RowMatrix<double> gaussian(Index rows, Index cols, std::uint64_t seed) {
  RowMatrix<double> x(rows, cols);
  Stream s(make_key(seed));
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = s.normal();
  return x;
}

}  // namespace

TEST_CASE("features have the backbone width and are deterministic") {
  RunConfig cfg;
  cfg.data_per_class = 3;
  const Dataset ds = cfg.load_dataset();
  const ModelParams<float> p = init_params<float>(cfg.encoder(), 1);
  const RowMatrix<double> f = extract_features(p, ds, 5);
  CHECK(f.rows() == 12);
  CHECK(f.cols() == 128);
  CHECK(f == extract_features(p, ds, 12));
  CHECK(f.allFinite());
}

TEST_CASE("features change with training") {
  const RunConfig cfg = tiny_run();
  const Dataset ds = cfg.load_dataset();
  const RowMatrix<double> before = extract_features(init_params<float>(cfg.encoder(), 0), ds);
  const TrainResult r = train_run(cfg);
  const RowMatrix<double> after = extract_features(r.params, ds);
  CHECK((before - after).norm() > 1e-6);
}

TEST_CASE("holdout takes about a fifth of the indices") {
  int held = 0;
  for (Index i = 0; i < 10000; ++i) held += in_holdout(i) ? 1 : 0;
  CHECK(std::abs(held - 2000) < 150);
}

TEST_CASE("separable two-class fixture is solved exactly") {
  const Index n = 200;
  RowMatrix<double> x(n, 2);
  std::vector<int> y(n);
  Stream s(make_key(4));
  for (Index i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    y[static_cast<std::size_t>(i)] = c;
    x(i, 0) = (c ? 2.0 : -2.0) + s.uniform(-1.0, 1.0);
    x(i, 1) = s.uniform(-3.0, 3.0);
  }
  const ProbeResult r = fit_linear_probe(x, y, 2);
  CHECK(r.top1 == 1.0);
  CHECK(r.train_top1 == 1.0);
  CHECK(r.feature_dim == 2);
  CHECK(r.train_size + r.test_size == n);
  CHECK(r.per_class_acc == std::vector<double>{1.0, 1.0});
  CHECK(fit_least_squares_probe(x, y, 2).top1 == 1.0);
}

TEST_CASE("shuffled labels score near chance") {
  for (std::uint64_t seed : {1, 2, 3}) {
    const RowMatrix<double> x = gaussian(2000, 16, seed);
    std::vector<int> y(2000);
    Stream s(make_key(seed + 100));
    for (int& v : y) v = static_cast<int>(s.below(4));
    ProbeOptions opt;
    opt.seed = seed;
    const ProbeResult r = fit_linear_probe(x, y, 4, opt);
    CAPTURE(seed);
    CHECK(std::abs(r.top1 - 0.25) < 0.1);
  }
}

TEST_CASE("probe is bit-reproducible per seed") {
  const RowMatrix<double> x = gaussian(300, 5, 9);
  std::vector<int> y(300);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x(static_cast<Index>(i), 0) > 0 ? 1 : 0;
  const ProbeResult a = fit_linear_probe(x, y, 2);
  const ProbeResult b = fit_linear_probe(x, y, 2);
  CHECK(a.top1 == b.top1);
  CHECK(a.train_top1 == b.train_top1);
  CHECK(a.top1 > 0.9);
}

TEST_CASE("sgd and least-squares probes agree on gaussian blobs") {
  const Index n = 1000, d = 6, c = 3;
  RowMatrix<double> x = gaussian(n, d, 3);
  std::vector<int> y(n);
  for (Index i = 0; i < n; ++i) {
    y[static_cast<std::size_t>(i)] = static_cast<int>(i % c);
    x(i, i % c) += 3.0;
  }
  const double sgd = fit_linear_probe(x, y, c).top1;
  const double ls = fit_least_squares_probe(x, y, c).top1;
  CHECK(sgd > 0.85);
  CHECK(std::abs(sgd - ls) < 0.05);
}

TEST_CASE("probe input contracts") {
  const RowMatrix<double> x = gaussian(50, 64, 1);
  std::vector<int> y(50, 0);
  CHECK_THROWS_AS(fit_linear_probe(x, y, 2), ConfigError);
  y[3] = 1;
  ProbeOptions opt;
  opt.required_dim = 128;
  CHECK_THROWS_AS(fit_linear_probe(x, y, 2, opt), ContractError);
  y[4] = 7;
  CHECK_THROWS_AS(fit_linear_probe(x, y, 2), ContractError);
  std::vector<int> short_labels(10, 0);
  CHECK_THROWS_AS(fit_linear_probe(x, short_labels, 2), DimensionError);
}

TEST_CASE("probing head outputs is refused") {
  RunConfig cfg = tiny_run();
  cfg.embed_dim = 6;
  const Dataset ds = cfg.load_dataset();
  ModelParams<float> p = init_params<float>(cfg.encoder(), 0);
  Graph<float> g;
  const BoundParams b = bind(g, p, false);
  const Var emb = embed(g, b, p.config, g.constant(ds.gather(std::vector<Index>{0, 1, 2, 3, 4,
                                                                               5, 6, 7, 8, 9})));
  const RowMatrix<double> head_out = g.value(emb).matrix().cast<double>();
  REQUIRE(head_out.cols() == cfg.embed_dim);
  std::vector<int> y = {0, 1, 2, 3, 0, 1, 2, 3, 0, 1};
  ProbeOptions opt;
  opt.required_dim = p.config.feature_dim();
  CHECK_THROWS_AS(fit_linear_probe(head_out, y, 4, opt), ContractError);
  CHECK(probe_encoder(p, ds).feature_dim == p.config.feature_dim());
}

TEST_CASE("median") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0}) == 2.5);
  CHECK_THROWS_AS(median({}), ContractError);
}

TEST_CASE("tau sweep emits one row per value and an argmax") {
  const RunConfig cfg = tiny_run();
  HarnessOptions opt;
  opt.out_dir = scratch("tau");
  opt.probe.epochs = 3;
  const TauSweepResult r = tau_sweep(cfg, kTauGrid, opt);
  REQUIRE(r.rows.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(r.rows[i].tau == kTauGrid[i]);
    CHECK(r.rows[i].order_hashes == r.rows[0].order_hashes);
    CHECK(r.rows[r.argmax].top1 >= r.rows[i].top1);
  }
  const std::string csv = slurp(opt.out_dir / "tau_sweep.csv");
  CHECK(csv.rfind("tau,top1\n0.07,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  CHECK(slurp(opt.out_dir / "tau_argmax.txt").rfind("tau=", 0) == 0);
  const std::string md = slurp(opt.out_dir / "tau_sweep.md");
  CHECK(md.find("66.2") != std::string::npos);
  CHECK(md.find("(argmax)") != std::string::npos);
  CHECK_THROWS_AS(tau_sweep(cfg, std::vector<double>{}, opt), ConfigError);
}

TEST_CASE("ablation grid has five rows in fixed order and is reproducible") {
  const RunConfig cfg = tiny_run();
  const std::vector<std::uint64_t> seeds = {1, 2};
  HarnessOptions a;
  a.out_dir = scratch("ablate_a");
  a.probe.epochs = 3;
  const auto rows = ablation_grid(cfg, seeds, a);
  REQUIRE(rows.size() == 5);
  const char* names[] = {"baseline", "+MLP", "+aug+", "+MLP+aug+", "+MLP+aug+ +cos"};
  const double refs[] = {60.6, 66.2, 63.4, 67.3, 67.5};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(rows[i].variant.name == names[i]);
    CHECK(rows[i].variant.reference_top1 == refs[i]);
    CHECK(rows[i].top1_per_seed.size() == 2);
  }
  CHECK_FALSE(rows[0].variant.mlp);
  CHECK(rows[4].variant.cos);
  const std::string csv = slurp(a.out_dir / "ablation.csv");
  CHECK(csv.rfind("variant,mlp,aug_plus,cos,top1,ref_paper_acc\nbaseline,0,0,0,", 0) == 0);
  CHECK(csv.find("+MLP+aug+ +cos,1,1,1,") != std::string::npos);
  CHECK(csv.find(",67.5\n") != std::string::npos);

  HarnessOptions b = a;
  b.out_dir = scratch("ablate_b");
  ablation_grid(cfg, seeds, b);
  CHECK(slurp(b.out_dir / "ablation.csv") == csv);
}
