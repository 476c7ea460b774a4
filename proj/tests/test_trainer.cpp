#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "moco/trainer.hpp"

using namespace moco;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mocolab_test_trainer" / name;
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
  cfg.epochs = 2;
  return cfg;
}

double mean_loss(const std::vector<StepMetrics>& rows, Index epoch) {
  double s = 0.0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.epoch == epoch && r.queue_fill >= 1.0) {
      s += r.loss;
      ++n;
    }
  }
  return s / n;
}

}  // namespace

TEST_CASE("cosine schedule endpoints") {
  const Index T = 1000;
  CHECK(lr_at(Schedule::kCos, 0.06, 0, T) == doctest::Approx(0.06).epsilon(1e-12));
  CHECK(std::abs(lr_at(Schedule::kCos, 0.06, T / 2, T) - 0.03) < 1e-12);
  CHECK(std::abs(lr_at(Schedule::kCos, 0.06, T, T)) < 1e-12);
  double prev = 1.0;
  for (Index t = 0; t <= T; ++t) {
    const double lr = lr_at(Schedule::kCos, 0.06, t, T);
    REQUIRE(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("step schedule drops twice") {
  const Index T = 100;
  CHECK(lr_at(Schedule::kStep, 0.5, 0, T) == 0.5);
  CHECK(lr_at(Schedule::kStep, 0.5, 59, T) == 0.5);
  CHECK(lr_at(Schedule::kStep, 0.5, 70, T) == doctest::Approx(0.05));
  CHECK(lr_at(Schedule::kStep, 0.5, 85, T) == doctest::Approx(0.005));
  int drops = 0;
  for (Index t = 1; t <= T; ++t) {
    if (lr_at(Schedule::kStep, 0.5, t, T) != lr_at(Schedule::kStep, 0.5, t - 1, T)) ++drops;
  }
  CHECK(drops == 2);
  CHECK_THROWS_AS(lr_at(Schedule::kCos, 0.1, T + 1, T), ContractError);
  CHECK_THROWS_AS(lr_at(Schedule::kCos, 0.1, 0, 0), ContractError);
}

TEST_CASE("sgd with momentum: two-step hand oracle") {
  ModelParams<double> p;
  p.tensors.emplace("w", Tensor<double>({1}, {1.0}));
  SgdState<double> s;
  for (int i = 0; i < 2; ++i) {
    p.at("w").grad = Vector<double>::Constant(1, 1.0);
    sgd_update(p, s, 0.1, 0.9, 0.0);
  }
  CHECK(p.at("w").item() == doctest::Approx(0.71).epsilon(1e-15));
  CHECK(s.velocity.at("w")(0) == doctest::Approx(1.9));
}

TEST_CASE("sgd degenerate cases") {
  ModelParams<double> p;
  p.tensors.emplace("a", Tensor<double>({2}, {1.0, -2.0}));
  SgdState<double> s;
  p.at("a").grad = Vector<double>::Constant(2, 0.5);
  sgd_update(p, s, 0.2, 0.0, 0.0);
  CHECK(p.at("a").data(0) == doctest::Approx(0.9));
  CHECK(p.at("a").data(1) == doctest::Approx(-2.1));

  p.at("a").grad = Vector<double>::Zero(2);
  const Vector<double> before = p.at("a").data;
  SgdState<double> fresh;
  sgd_update(p, fresh, 0.2, 0.9, 0.0);
  CHECK(p.at("a").data == before);

  SgdState<double> decay;
  sgd_update(p, decay, 0.5, 0.0, 0.1);
  CHECK(p.at("a").data(0) == doctest::Approx(before(0) * (1.0 - 0.05)));

  p.at("a").grad.reset();
  CHECK_THROWS_AS(sgd_update(p, s, 0.1, 0.9, 0.0), ContractError);
}

TEST_CASE("config text parsing") {
  const RunConfig cfg = parse_run_config(
      "# smoke run\n"
      "mechanism = e2e\n"
      "head=fc   # linear head\n"
      "\n"
      "  schedule = step\n"
      "channels = 8, 16,32\n"
      "tau = 0.1\n"
      "seed = 7\n"
      "data_files = a.bin,b.bin\n");
  CHECK(cfg.mechanism == Mechanism::kE2e);
  CHECK(cfg.head == HeadKind::kFc);
  CHECK(cfg.schedule == Schedule::kStep);
  CHECK(cfg.channels == std::vector<Index>{8, 16, 32});
  CHECK(cfg.resolved_tau() == 0.1);
  CHECK(cfg.init_seed == 7);
  CHECK(cfg.aug_seed == 7);
  CHECK(cfg.data_files == std::vector<std::string>{"a.bin", "b.bin"});

  CHECK_THROWS_AS(parse_run_config("bogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("epochs = ten\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("epochs 10\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("head = deep\n"), ConfigError);
  try {
    parse_run_config("lr = 0.1\n");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("'lr'") != std::string::npos);
  }
}

TEST_CASE("tau defaults follow the head") {
  RunConfig cfg;
  cfg.head = HeadKind::kMlp;
  CHECK(cfg.resolved_tau() == 0.2);
  cfg.head = HeadKind::kFc;
  CHECK(cfg.resolved_tau() == 0.07);
}

TEST_CASE("resolved config round-trips") {
  RunConfig cfg = tiny_run();
  cfg.lr0 = 0.1 / 3.0;
  cfg.data_files = {"x.bin"};
  cfg.out_dir = "runs/a";
  const std::string text = format_run_config(cfg);
  const RunConfig back = parse_run_config(text);
  CHECK(format_run_config(back) == text);
  CHECK(back.lr0 == cfg.lr0);
}

TEST_CASE("config validation") {
  RunConfig cfg = tiny_run();
  CHECK_NOTHROW(cfg.validate());
  cfg.K = 12;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_run();
  cfg.m = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_run();
  cfg.tau = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_run();
  cfg.dataset = DatasetKind::kCifar10;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_run();
  cfg.lr0 = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("metrics row format") {
  StepMetrics m{3, 1, 0.05, 2.5, 0.75, -0.125, 1.0, 0.0};
  CHECK(format_metrics_row(m) == "3,1,0.05,2.5,0.75,-0.125,1,0.000");
}

TEST_CASE("checkpoint round-trip is bit identical") {
  const RunConfig cfg = tiny_run();
  const EncoderConfig enc = cfg.encoder();
  Checkpoint ck;
  ck.q_params = init_params<float>(enc, 1);
  ck.k_params = init_params<float>(enc, 2);
  for (const auto& [path, t] : ck.q_params.tensors) {
    ck.sgd.velocity[path] = Vector<float>::LinSpaced(t.numel(), -1.0f, 1.0f);
  }
  NegativeQueue<float> q(16, 8);
  Tensor<float> keys({8, 8});
  keys.data.setConstant(0.25f);
  q.enqueue(keys);
  ck.queue = q;
  ck.step = 123456789012LL;
  ck.epoch = 7;
  const fs::path dir = scratch("ckpt");
  fs::create_directories(dir);
  save_checkpoint(ck, dir / "a.ckpt");
  const Checkpoint back = load_checkpoint(dir / "a.ckpt", enc);
  for (const auto& [path, t] : ck.q_params.tensors) {
    CHECK(back.q_params.at(path).data == t.data);
    CHECK(back.k_params->at(path).data == ck.k_params->at(path).data);
    CHECK(back.sgd.velocity.at(path) == ck.sgd.velocity.at(path));
  }
  CHECK(back.queue->storage().data == q.storage().data);
  CHECK(back.queue->write_ptr() == 8);
  CHECK_FALSE(back.queue->filled());
  CHECK(back.step == ck.step);
  CHECK(back.epoch == 7);

  save_checkpoint(back, dir / "b.ckpt");
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
}

TEST_CASE("checkpoint format errors") {
  const RunConfig cfg = tiny_run();
  const EncoderConfig enc = cfg.encoder();
  Checkpoint ck;
  ck.q_params = init_params<float>(enc, 1);
  const fs::path dir = scratch("ckpt_bad");
  fs::create_directories(dir);
  save_checkpoint(ck, dir / "good.ckpt");
  const std::string bytes = slurp(dir / "good.ckpt");
  CHECK(bytes.substr(0, 8) == "MOCO2CK1");
  CHECK(bytes[8] == 1);

  auto write = [&](const std::string& name, const std::string& b) {
    std::ofstream f(dir / name, std::ios::binary);
    f << b;
    return dir / name;
  };
  std::string magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(load_checkpoint(write("magic.ckpt", magic), enc), FormatError);

  std::string version = bytes;
  version[8] = 9;
  CHECK_THROWS_AS(load_checkpoint(write("version.ckpt", version), enc), FormatError);

  const std::string cut = bytes.substr(0, bytes.size() - 3);
  try {
    load_checkpoint(write("cut.ckpt", cut), enc);
    FAIL("expected truncation error");
  } catch (const FormatError& e) {
    CHECK(e.offset() > 8);
    CHECK(e.offset() < bytes.size());
  }

  EncoderConfig other = enc;
  other.embed_dim = 9;
  CHECK_THROWS_AS(load_checkpoint(dir / "good.ckpt", other), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt", enc), IoError);
}

TEST_CASE("two-epoch moco smoke run") {
  RunConfig cfg = tiny_run();
  cfg.out_dir = scratch("smoke").string();
  const TrainResult r = train_run(cfg);
  REQUIRE(r.steps_per_epoch == 8);
  REQUIRE(r.metrics.size() == 16);
  for (const auto& m : r.metrics) {
    CHECK(std::isfinite(m.loss));
    CHECK(m.pos_sim >= -1.0);
    CHECK(m.pos_sim <= 1.0);
    CHECK(m.wall_ms == 0.0);
  }
  // K / B = 2 warm-up steps fill the queue.
  CHECK(r.metrics[0].queue_fill == 0.0);
  CHECK(r.metrics[0].loss == 0.0);
  CHECK(r.metrics[1].queue_fill == 0.5);
  CHECK(r.metrics[2].queue_fill == 1.0);
  CHECK(r.metrics[2].loss > 0.0);
  CHECK(r.params.all_finite());
  CHECK(fs::exists(checkpoint_path(cfg.out_dir, 1)));
  CHECK(fs::exists(checkpoint_path(cfg.out_dir, 2)));
  const std::string csv = slurp(fs::path(cfg.out_dir) / "metrics.csv");
  CHECK(csv.substr(0, kMetricsHeader.size()) == kMetricsHeader);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 17);
}

TEST_CASE("identical configs give byte-identical metrics") {
  RunConfig a = tiny_run();
  a.out_dir = scratch("det_a").string();
  RunConfig b = a;
  b.out_dir = scratch("det_b").string();
  train_run(a);
  train_run(b);
  CHECK(slurp(fs::path(a.out_dir) / "metrics.csv") == slurp(fs::path(b.out_dir) / "metrics.csv"));
  CHECK(slurp(checkpoint_path(a.out_dir, 2)) == slurp(checkpoint_path(b.out_dir, 2)));
}

TEST_CASE("resume reproduces the uninterrupted run") {
  for (Mechanism mech : {Mechanism::kMoco, Mechanism::kE2e}) {
    RunConfig full = tiny_run();
    full.mechanism = mech;
    full.epochs = 3;
    full.out_dir = scratch("resume_full").string();
    const TrainResult whole = train_run(full);

    RunConfig part = full;
    part.out_dir = scratch("resume_part").string();
    TrainOptions stop;
    stop.stop_after_epoch = 1;
    train_run(part, stop);
    TrainOptions resume;
    resume.resume_from = checkpoint_path(part.out_dir, 1);
    const TrainResult rest = train_run(part, resume);

    CAPTURE(to_string(mech));
    CHECK(slurp(fs::path(full.out_dir) / "metrics.csv") ==
          slurp(fs::path(part.out_dir) / "metrics.csv"));
    CHECK(slurp(fs::path(full.out_dir) / "data_order.log") ==
          slurp(fs::path(part.out_dir) / "data_order.log"));
    for (const auto& [path, t] : whole.params.tensors) CHECK(rest.params.at(path).data == t.data);
  }
}

TEST_CASE("e2e run logs full negatives") {
  RunConfig cfg = tiny_run();
  cfg.mechanism = Mechanism::kE2e;
  cfg.epochs = 1;
  const TrainResult r = train_run(cfg);
  for (const auto& m : r.metrics) {
    CHECK(m.queue_fill == 1.0);
    CHECK(m.loss > 0.0);
  }
}

TEST_CASE("temperature does not change data order") {
  RunConfig a = tiny_run();
  RunConfig b = a;
  b.tau = 0.5;
  CHECK(train_run(a).order_hashes == train_run(b).order_hashes);
  RunConfig c = a;
  c.data_seed = 99;
  CHECK(train_run(a).order_hashes != train_run(c).order_hashes);
}

TEST_CASE("dataset and encoder sizes must agree") {
  RunConfig cfg = tiny_run();
  const Dataset ds = gen_synthetic({4, 2, 16, 0.0, 0});
  TrainOptions opt;
  opt.dataset = &ds;
  CHECK_THROWS_AS(train_run(cfg, opt), ConfigError);
}

TEST_CASE("moco loss falls over training on synthetic data") {
  std::vector<double> gaps;
  for (std::uint64_t seed : {1, 2, 3}) {
    RunConfig cfg;
    cfg.data_per_class = 32;
    cfg.data_classes = 4;
    cfg.data_side = 16;
    cfg.channels = {8, 16, 16};
    cfg.head_hidden = 32;
    cfg.embed_dim = 16;
    cfg.batch = 16;
    cfg.K = 32;
    cfg.epochs = 6;
    cfg.set_seed(seed);
    const TrainResult r = train_run(cfg);
    gaps.push_back(mean_loss(r.metrics, 0) - mean_loss(r.metrics, cfg.epochs - 1));
  }
  std::sort(gaps.begin(), gaps.end());
  CAPTURE(gaps[0]);
  CAPTURE(gaps[2]);
  CHECK(gaps[1] > 0.0);
}
