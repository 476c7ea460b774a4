#include "moco/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "moco/bench.hpp"
#include "moco/error.hpp"
#include "moco/eval.hpp"

namespace moco {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::vector<std::string> set;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value run config file");
  cmd->add_option("--seed", c.seed, "seed for initialization, data order and augmentation");
  cmd->add_option("--out", c.out, "output directory")->required();
  cmd->add_flag("--force", c.force, "write into a non-empty output directory");
  cmd->add_option("--set", c.set, "config override, key=value (repeatable)");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  for (const std::string& kv : c.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
    auto strip = [](std::string& s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
    };
    strip(key);
    strip(value);
    apply_setting(cfg, key, value);
  }
  if (c.seed) cfg.set_seed(*c.seed);
  cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

// Refuses a non-empty directory unless forced, then writes resolved.cfg.
void prepare_out(const Common& c, const RunConfig& cfg, bool allow_existing = false) {
  const fs::path out = c.out;
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw IoError("--out '" + c.out + "' is not a directory");
    if (!fs::is_empty(out) && !c.force && !allow_existing) {
      throw ConfigError("--out '" + c.out + "' is not empty (use --force to write into it)");
    }
  }
  fs::create_directories(out);
  std::ofstream f(out / "resolved.cfg", std::ios::binary);
  if (!f) throw IoError("cannot write '" + (out / "resolved.cfg").string() + "'");
  f << format_run_config(cfg);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open '" + p.string() + "' for writing");
  f << text;
}

std::string fixed(double v, int digits = 6) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(digits);
  o << v;
  return o.str();
}

fs::path latest_checkpoint(const fs::path& run_dir) {
  const fs::path dir = run_dir / "checkpoints";
  if (!fs::is_directory(dir)) throw IoError("no checkpoints under '" + run_dir.string() + "'");
  std::vector<fs::path> found;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".ckpt") found.push_back(e.path());
  }
  if (found.empty()) throw IoError("no checkpoints under '" + run_dir.string() + "'");
  return *std::max_element(found.begin(), found.end());
}

int run_synth(const Common& c, bool write_bin, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  prepare_out(c, cfg);
  RunConfig desc;
  desc.dataset = DatasetKind::kSynthetic;
  desc.data_per_class = cfg.data_per_class;
  desc.data_classes = cfg.data_classes;
  desc.data_side = cfg.data_side;
  desc.data_noise = cfg.data_noise;
  desc.synth_seed = cfg.synth_seed;
  const Dataset ds = gen_synthetic(desc.synthetic_spec());
  std::ostringstream text;
  text << "# synthetic dataset descriptor; regenerated from these values\n"
       << "dataset = synthetic\n"
       << "data_per_class = " << desc.data_per_class << "\n"
       << "data_classes = " << desc.data_classes << "\n"
       << "data_side = " << desc.data_side << "\n"
       << "data_noise = " << desc.data_noise << "\n"
       << "synth_seed = " << desc.synth_seed << "\n";
  write_text(fs::path(c.out) / "dataset.cfg", text.str());
  if (write_bin) write_cifar10_bin(ds, fs::path(c.out) / "data.bin");
  std::vector<Image> row;
  for (Index k = 0; k < ds.classes; ++k) row.push_back(ds.image(k));
  write_ppm((fs::path(c.out) / "classes.ppm").string(), row);
  out << "synthetic dataset: " << ds.size() << " images, " << ds.classes << " classes, side "
      << ds.side << "\n";
  return kExitOk;
}

int run_train(const Common& c, const std::string& resume, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  prepare_out(c, cfg, !resume.empty());
  TrainOptions opt;
  opt.log = &out;
  if (!resume.empty()) opt.resume_from = resume;
  const TrainResult r = train_run(cfg, opt);
  write_text(fs::path(c.out) / "summary.txt",
             "steps_per_epoch = " + std::to_string(r.steps_per_epoch) + "\nfinal_loss = " +
                 fixed(r.final_loss) + "\nfinal_pos_sim = " + fixed(r.final_pos_sim) +
                 "\nfinal_neg_sim = " + fixed(r.final_neg_sim) + "\n");
  return kExitOk;
}

int run_probe(const Common& c, const std::string& run_dir, const std::string& checkpoint,
              const ProbeOptions& popt, bool least_squares, std::ostream& out) {
  if (run_dir.empty() && checkpoint.empty()) {
    throw ConfigError("probe needs --run or --checkpoint");
  }
  Common eff = c;
  if (eff.config.empty() && !run_dir.empty()) eff.config = (fs::path(run_dir) / "resolved.cfg").string();
  RunConfig cfg = resolve(eff);
  prepare_out(c, cfg);
  const fs::path ckpt = checkpoint.empty() ? latest_checkpoint(run_dir) : fs::path(checkpoint);
  const Checkpoint ck = load_checkpoint(ckpt, cfg.encoder());
  const Dataset ds = cfg.load_dataset();
  ProbeOptions o = popt;
  if (c.seed) o.seed = *c.seed;
  const ProbeResult r =
      least_squares
          ? fit_least_squares_probe(extract_features(ck.q_params, ds), ds.labels, ds.classes,
                                    1e-3, [&] {
                                      ProbeOptions g = o;
                                      g.required_dim = ck.q_params.config.feature_dim();
                                      return g;
                                    }())
          : probe_encoder(ck.q_params, ds, o);
  std::ostringstream csv;
  csv << "class,accuracy\n";
  for (std::size_t k = 0; k < r.per_class_acc.size(); ++k) {
    csv << k << "," << fixed(r.per_class_acc[k]) << "\n";
  }
  write_text(fs::path(c.out) / "probe_per_class.csv", csv.str());
  write_text(fs::path(c.out) / "probe.txt",
             "checkpoint = " + ckpt.string() + "\nsolver = " + (least_squares ? "lstsq" : "sgd") +
                 "\nfeature_dim = " + std::to_string(r.feature_dim) + "\ntrain_size = " +
                 std::to_string(r.train_size) + "\ntest_size = " + std::to_string(r.test_size) +
                 "\ntop1 = " + fixed(r.top1) + "\ntrain_top1 = " + fixed(r.train_top1) + "\n");
  out << "top1 " << fixed(r.top1, 4) << " (train " << fixed(r.train_top1, 4) << ", "
      << r.test_size << " held out)\n";
  return kExitOk;
}

int run_sweep(const Common& c, const std::vector<double>& taus, const ProbeOptions& popt,
              std::ostream& out) {
  const RunConfig cfg = resolve(c);
  prepare_out(c, cfg);
  HarnessOptions h;
  h.out_dir = c.out;
  h.log = &out;
  h.probe = popt;
  const TauSweepResult r = tau_sweep(cfg, taus, h);
  out << "argmax tau " << r.rows[r.argmax].tau << " top1 " << fixed(r.rows[r.argmax].top1, 4)
      << "\n";
  return kExitOk;
}

int run_ablate(const Common& c, const std::vector<std::uint64_t>& seeds, const ProbeOptions& popt,
               std::ostream& out) {
  const RunConfig cfg = resolve(c);
  prepare_out(c, cfg);
  HarnessOptions h;
  h.out_dir = c.out;
  h.log = &out;
  h.probe = popt;
  for (const AblationRow& r : ablation_grid(cfg, seeds, h)) {
    out << r.variant.name << " median top1 " << fixed(r.top1, 4) << "\n";
  }
  return kExitOk;
}

int run_bench(const Common& c, CostOptions opt, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  prepare_out(c, cfg);
  opt.K = cfg.K;
  if (c.seed) opt.seed = *c.seed;
  opt.out_dir = c.out;
  opt.log = &out;
  cost_report(cfg.encoder(), opt);
  return kExitOk;
}

int run_inspect(const Common& c, Index count, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  prepare_out(c, cfg);
  if (count < 1) throw ConfigError("--count must be positive");
  const Dataset ds = cfg.load_dataset();
  const AugConfig aug = cfg.aug_config();
  const StreamKey key = derive(make_key(cfg.aug_seed), 0);
  for (Index i = 0; i < std::min(count, ds.size()); ++i) {
    AugTrace tq, tk;
    const Image img = ds.image(i);
    const ViewPair v = two_views(img, aug, derive(key, static_cast<std::uint64_t>(i)), i, &tq, &tk);
    const std::vector<Image> row = {img, v.view_q, v.view_k};
    write_ppm((fs::path(c.out) / ("views_" + std::to_string(i) + ".ppm")).string(), row);
    auto names = [](const AugTrace& t) {
      std::string s;
      for (Transform tr : t.applied) s += (s.empty() ? "" : ",") + std::string(to_string(tr));
      return s;
    };
    out << "image " << i << " label " << ds.labels[static_cast<std::size_t>(i)] << " q: "
        << names(tq) << " k: " << names(tk) << "\n";
  }
  return kExitOk;
}

}  // namespace

int dispatch(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Momentum-contrast lab: pretraining, probing and cost benchmarks"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common c;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset descriptor");
  add_common(synth, c);
  bool write_bin = false;
  synth->add_flag("--write-bin", write_bin, "also write the images in the CIFAR-10 binary layout");

  auto* train = app.add_subcommand("train", "pretrain an encoder");
  add_common(train, c);
  std::string resume;
  train->add_option("--resume", resume, "checkpoint to continue from");

  ProbeOptions popt;
  auto add_probe = [&popt](CLI::App* cmd) {
    cmd->add_option("--probe-epochs", popt.epochs, "linear probe epochs");
    cmd->add_option("--probe-lr", popt.lr, "linear probe learning rate");
  };

  auto* probe = app.add_subcommand("probe", "linear probe on frozen backbone features");
  add_common(probe, c);
  add_probe(probe);
  std::string run_dir, checkpoint;
  bool lstsq = false;
  probe->add_option("--run", run_dir, "training output directory (uses its resolved.cfg)");
  probe->add_option("--checkpoint", checkpoint, "checkpoint file (default: latest in --run)");
  probe->add_flag("--least-squares", lstsq, "closed-form ridge probe instead of SGD");

  auto* sweep = app.add_subcommand("sweep-tau", "train and probe across temperatures");
  add_common(sweep, c);
  add_probe(sweep);
  std::vector<double> taus = kTauGrid;
  sweep->add_option("--taus", taus, "temperatures")->delimiter(',');

  auto* ablate = app.add_subcommand("ablate", "five-variant ablation grid");
  add_common(ablate, c);
  add_probe(ablate);
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  ablate->add_option("--seeds", seeds, "seeds per variant")->delimiter(',');

  auto* bench = app.add_subcommand("bench", "memory accounting and step-time comparison");
  add_common(bench, c);
  CostOptions copt;
  bench->add_option("--batches", copt.batches, "batch sizes")->delimiter(',');
  bench->add_option("--k-sweep", copt.k_sweep, "queue sizes for the moco sweep")->delimiter(',');
  bench->add_option("--steps", copt.steps, "timed steps per measurement (>= 20)");
  bench->add_option("--warmup", copt.warmup, "untimed warm-up steps");

  auto* inspect = app.add_subcommand("inspect-aug", "dump augmented view pairs as PPM");
  add_common(inspect, c);
  Index count = 8;
  inspect->add_option("--count", count, "number of images");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << "\n";
    return kExitContract;
  }

  try {
    if (synth->parsed()) return run_synth(c, write_bin, out);
    if (train->parsed()) return run_train(c, resume, out);
    if (probe->parsed()) return run_probe(c, run_dir, checkpoint, popt, lstsq, out);
    if (sweep->parsed()) return run_sweep(c, taus, popt, out);
    if (ablate->parsed()) return run_ablate(c, seeds, popt, out);
    if (bench->parsed()) return run_bench(c, copt, out);
    if (inspect->parsed()) return run_inspect(c, count, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitContract;
  }
  return kExitContract;
}

}  // namespace moco
