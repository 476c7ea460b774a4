#include "moco/eval.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <ostream>
#include <sstream>

#include "moco/error.hpp"

namespace moco {

namespace fs = std::filesystem;

namespace {

struct Split {
  std::vector<Index> train;
  std::vector<Index> test;
};

Split split_indices(Index n) {
  Split s;
  for (Index i = 0; i < n; ++i) (in_holdout(i) ? s.test : s.train).push_back(i);
  return s;
}

void check_probe_inputs(const RowMatrix<double>& x, std::span<const int> labels, Index classes,
                        const ProbeOptions& options) {
  if (x.rows() != static_cast<Index>(labels.size())) {
    throw DimensionError("probe has " + std::to_string(x.rows()) + " feature rows for " +
                         std::to_string(labels.size()) + " labels");
  }
  if (options.required_dim && x.cols() != *options.required_dim) {
    throw ContractError("probe expects " + std::to_string(*options.required_dim) +
                        "-dimensional backbone features, got " + std::to_string(x.cols()));
  }
  if (!x.allFinite()) throw ContractError("probe features must be finite");
  if (classes < 1) throw ConfigError("probe needs at least one class");
  std::vector<bool> seen(static_cast<std::size_t>(classes), false);
  for (int y : labels) {
    if (y < 0 || y >= classes) throw ContractError("label " + std::to_string(y) + " out of range");
    seen[static_cast<std::size_t>(y)] = true;
  }
  if (std::count(seen.begin(), seen.end(), true) < 2) {
    throw ConfigError("probe needs labels from at least two classes");
  }
  if (options.epochs < 1 || options.batch < 1 || !(options.lr > 0.0)) {
    throw ConfigError("probe epochs, batch and lr must be positive");
  }
}

RowMatrix<double> gather_rows(const RowMatrix<double>& x, std::span<const Index> rows) {
  RowMatrix<double> out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = x.row(rows[r]);
  return out;
}

// Column means and standard deviations of the training rows.
void standardize(RowMatrix<double>& train, RowMatrix<double>& test) {
  const Eigen::RowVectorXd mean = train.colwise().mean();
  train.rowwise() -= mean;
  Eigen::RowVectorXd sd =
      (train.array().square().colwise().sum() / static_cast<double>(train.rows())).sqrt();
  sd = sd.cwiseMax(1e-8);
  train.array().rowwise() /= sd.array();
  test.rowwise() -= mean;
  test.array().rowwise() /= sd.array();
}

void score(const RowMatrix<double>& scores, std::span<const int> labels, Index classes,
           double& top1, std::vector<double>* per_class) {
  std::vector<double> hit(static_cast<std::size_t>(classes), 0.0);
  std::vector<double> count(static_cast<std::size_t>(classes), 0.0);
  double correct = 0.0;
  for (Index r = 0; r < scores.rows(); ++r) {
    Index pred = 0;
    scores.row(r).maxCoeff(&pred);
    const auto y = static_cast<std::size_t>(labels[static_cast<std::size_t>(r)]);
    count[y] += 1.0;
    if (pred == static_cast<Index>(y)) {
      correct += 1.0;
      hit[y] += 1.0;
    }
  }
  top1 = scores.rows() > 0 ? correct / static_cast<double>(scores.rows()) : 0.0;
  if (per_class) {
    per_class->assign(static_cast<std::size_t>(classes), 0.0);
    for (std::size_t c = 0; c < hit.size(); ++c) {
      (*per_class)[c] = count[c] > 0.0 ? hit[c] / count[c] : 0.0;
    }
  }
}

std::vector<int> pick(std::span<const int> labels, std::span<const Index> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(labels[static_cast<std::size_t>(r)]);
  return out;
}

std::string num(double v, const char* format = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open '" + p.string() + "' for writing");
  f << text;
  if (!f) throw IoError("failed writing '" + p.string() + "'");
}

struct TrainedProbe {
  ProbeResult probe;
  std::vector<std::uint64_t> order_hashes;
};

TrainedProbe train_and_probe(RunConfig cfg, const fs::path& run_dir, const Dataset& ds,
                             const HarnessOptions& options) {
  cfg.out_dir = run_dir.empty() ? std::string() : run_dir.string();
  TrainOptions topt;
  topt.dataset = &ds;
  const TrainResult r = train_run(cfg, topt);
  return {probe_encoder(r.params, ds, options.probe), r.order_hashes};
}

}  // namespace

RowMatrix<double> extract_features(const ModelParams<float>& params, const Dataset& ds,
                                   Index chunk) {
  if (chunk < 1) throw ConfigError("feature chunk must be positive");
  ModelParams<float> copy = params;
  const Index d = params.config.feature_dim();
  RowMatrix<double> out(ds.size(), d);
  for (Index start = 0; start < ds.size(); start += chunk) {
    const Index n = std::min(chunk, ds.size() - start);
    std::vector<Index> rows(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = start + i;
    Graph<float> g;
    const BoundParams p = bind(g, copy, false);
    const Var x = g.constant(ds.gather(rows));
    const Var f = backbone_forward(g, p, params.config, x);
    out.middleRows(start, n) = g.value(f).matrix().cast<double>();
  }
  return out;
}

bool in_holdout(Index i) {
  return mix64(static_cast<std::uint64_t>(i) ^ 0x5DEECE66DULL) % 5 == 0;
}

ProbeResult fit_linear_probe(const RowMatrix<double>& features, std::span<const int> labels,
                             Index classes, const ProbeOptions& options) {
  check_probe_inputs(features, labels, classes, options);
  const Split split = split_indices(features.rows());
  if (split.train.empty() || split.test.empty()) {
    throw ConfigError("probe split left an empty partition");
  }
  RowMatrix<double> xtr = gather_rows(features, split.train);
  RowMatrix<double> xte = gather_rows(features, split.test);
  if (options.standardize) standardize(xtr, xte);
  const std::vector<int> ytr = pick(labels, split.train);
  const std::vector<int> yte = pick(labels, split.test);

  const Index d = features.cols();
  const auto ntr = static_cast<Index>(split.train.size());
  const Index batch = std::min(options.batch, ntr);
  const Index steps_per_epoch = (ntr + batch - 1) / batch;
  const Index total = options.epochs * steps_per_epoch;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(d, classes);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(classes);
  Eigen::MatrixXd vw = w;
  Eigen::RowVectorXd vb = b;
  const StreamKey root = make_key(options.seed);
  Index t = 0;
  for (Index epoch = 0; epoch < options.epochs; ++epoch) {
    const std::vector<Index> order = permutation(ntr, derive(root, static_cast<std::uint64_t>(epoch)));
    for (Index start = 0; start < ntr; start += batch) {
      const Index n = std::min(batch, ntr - start);
      RowMatrix<double> xb(n, d);
      Eigen::MatrixXd target = Eigen::MatrixXd::Zero(n, classes);
      for (Index r = 0; r < n; ++r) {
        const Index i = order[static_cast<std::size_t>(start + r)];
        xb.row(r) = xtr.row(i);
        target(r, ytr[static_cast<std::size_t>(i)]) = 1.0;
      }
      Eigen::MatrixXd z = xb * w;
      z.rowwise() += b;
      z.colwise() -= z.rowwise().maxCoeff();
      Eigen::MatrixXd p = z.array().exp();
      p.array().colwise() /= p.rowwise().sum().array();
      const Eigen::MatrixXd dz = (p - target) / static_cast<double>(n);
      const double lr = lr_at(Schedule::kCos, options.lr, t, total);
      vw = options.momentum * vw + xb.transpose() * dz;
      vb = options.momentum * vb + dz.colwise().sum();
      w -= lr * vw;
      b -= lr * vb;
      ++t;
    }
  }
  ProbeResult res;
  res.feature_dim = d;
  res.train_size = ntr;
  res.test_size = static_cast<Index>(split.test.size());
  res.options = options;
  RowMatrix<double> ste = xte * w;
  ste.rowwise() += b;
  score(ste, yte, classes, res.top1, &res.per_class_acc);
  RowMatrix<double> str = xtr * w;
  str.rowwise() += b;
  score(str, ytr, classes, res.train_top1, nullptr);
  return res;
}

ProbeResult fit_least_squares_probe(const RowMatrix<double>& features,
                                    std::span<const int> labels, Index classes, double ridge,
                                    const ProbeOptions& options) {
  check_probe_inputs(features, labels, classes, options);
  if (!(ridge >= 0.0)) throw ConfigError("ridge must be non-negative");
  const Split split = split_indices(features.rows());
  RowMatrix<double> xtr = gather_rows(features, split.train);
  RowMatrix<double> xte = gather_rows(features, split.test);
  if (options.standardize) standardize(xtr, xte);
  const std::vector<int> ytr = pick(labels, split.train);
  const std::vector<int> yte = pick(labels, split.test);
  const Index d = features.cols();
  Eigen::MatrixXd a(xtr.rows(), d + 1);
  a.leftCols(d) = xtr;
  a.col(d).setOnes();
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(xtr.rows(), classes);
  for (Index r = 0; r < xtr.rows(); ++r) y(r, ytr[static_cast<std::size_t>(r)]) = 1.0;
  Eigen::MatrixXd gram = a.transpose() * a;
  gram.diagonal().array() += ridge * static_cast<double>(xtr.rows());
  const Eigen::MatrixXd coef = gram.ldlt().solve(a.transpose() * y);
  ProbeResult res;
  res.feature_dim = d;
  res.train_size = xtr.rows();
  res.test_size = xte.rows();
  res.options = options;
  Eigen::MatrixXd ate(xte.rows(), d + 1);
  ate.leftCols(d) = xte;
  ate.col(d).setOnes();
  score(ate * coef, yte, classes, res.top1, &res.per_class_acc);
  score(a * coef, ytr, classes, res.train_top1, nullptr);
  return res;
}

ProbeResult probe_encoder(const ModelParams<float>& params, const Dataset& ds,
                          ProbeOptions options) {
  options.required_dim = params.config.feature_dim();
  return fit_linear_probe(extract_features(params, ds), ds.labels, ds.classes, options);
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

TauSweepResult tau_sweep(const RunConfig& base, std::span<const double> taus,
                         const HarnessOptions& options) {
  if (taus.empty()) throw ConfigError("tau sweep needs at least one value");
  for (double tau : taus) {
    if (!(tau > 0.0)) throw ConfigError("tau values must be positive");
  }
  Dataset owned;
  if (!options.dataset) owned = base.load_dataset();
  const Dataset& ds = options.dataset ? *options.dataset : owned;
  TauSweepResult result;
  for (double tau : taus) {
    RunConfig cfg = base;
    cfg.tau = tau;
    const fs::path run_dir =
        options.out_dir.empty() ? fs::path() : options.out_dir / "runs" / ("tau_" + num(tau));
    const TrainedProbe tp = train_and_probe(cfg, run_dir, ds, options);
    result.rows.push_back({tau, tp.probe.top1, tp.order_hashes});
    if (options.log) *options.log << "tau " << tau << " top1 " << tp.probe.top1 << "\n";
  }
  for (std::size_t i = 1; i < result.rows.size(); ++i) {
    if (result.rows[i].top1 > result.rows[result.argmax].top1) result.argmax = i;
  }
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    std::string csv = "tau,top1\n";
    for (const auto& r : result.rows) csv += num(r.tau) + "," + num(r.top1, "%.6f") + "\n";
    write_file(options.out_dir / "tau_sweep.csv", csv);
    const TauRow& best = result.rows[result.argmax];
    write_file(options.out_dir / "tau_argmax.txt",
               "tau=" + num(best.tau) + " top1=" + num(best.top1, "%.6f") + "\n");
    std::ostringstream md;
    md << "# Temperature sweep\n\n| tau | top1 (this run) | reference top1, full scale |\n"
       << "|---|---|---|\n";
    for (std::size_t i = 0; i < result.rows.size(); ++i) {
      const auto& r = result.rows[i];
      std::string ref = "n/a";
      for (std::size_t k = 0; k < kTauGrid.size(); ++k) {
        if (std::abs(kTauGrid[k] - r.tau) < 1e-12) ref = num(kTauReferenceTop1[k], "%.1f");
      }
      md << "| " << num(r.tau) << (i == result.argmax ? " (argmax)" : "") << " | "
         << num(100.0 * r.top1, "%.1f") << " | " << ref << " |\n";
    }
    md << "\nReference column: ImageNet linear accuracy (%) of a ResNet-50 with an MLP head "
          "after 200 epochs, optimum at tau = 0.2. It is context only; nothing here "
          "reproduces it, and no claim is made about which tau wins at this scale.\n";
    write_file(options.out_dir / "tau_sweep.md", md.str());
  }
  return result;
}

const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> v = {
      {"baseline", false, false, false, 60.6},
      {"+MLP", true, false, false, 66.2},
      {"+aug+", false, true, false, 63.4},
      {"+MLP+aug+", true, true, false, 67.3},
      {"+MLP+aug+ +cos", true, true, true, 67.5},
  };
  return v;
}

std::vector<AblationRow> ablation_grid(const RunConfig& base, std::span<const std::uint64_t> seeds,
                                       const HarnessOptions& options) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  Dataset owned;
  if (!options.dataset) owned = base.load_dataset();
  const Dataset& ds = options.dataset ? *options.dataset : owned;
  std::vector<AblationRow> rows;
  for (const AblationVariant& v : ablation_variants()) {
    AblationRow row{v, {}, 0.0};
    for (std::uint64_t seed : seeds) {
      RunConfig cfg = base;
      cfg.head = v.mlp ? HeadKind::kMlp : HeadKind::kFc;
      cfg.aug = v.aug_plus ? AugKind::kPlus : AugKind::kBase;
      cfg.schedule = v.cos ? Schedule::kCos : Schedule::kStep;
      cfg.tau.reset();
      cfg.set_seed(seed);
      const std::size_t slot = rows.size();
      const fs::path run_dir =
          options.out_dir.empty()
              ? fs::path()
              : options.out_dir / "runs" / ("v" + std::to_string(slot) + "_seed" + std::to_string(seed));
      ProbeOptions popt = options.probe;
      popt.seed = seed;
      HarnessOptions sub = options;
      sub.probe = popt;
      const TrainedProbe tp = train_and_probe(cfg, run_dir, ds, sub);
      row.top1_per_seed.push_back(tp.probe.top1);
      if (options.log) {
        *options.log << v.name << " seed " << seed << " top1 " << tp.probe.top1 << "\n";
      }
    }
    row.top1 = median(row.top1_per_seed);
    rows.push_back(std::move(row));
  }
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    std::string csv = "variant,mlp,aug_plus,cos,top1,ref_paper_acc\n";
    for (const auto& r : rows) {
      csv += r.variant.name + "," + (r.variant.mlp ? "1" : "0") + "," +
             (r.variant.aug_plus ? "1" : "0") + "," + (r.variant.cos ? "1" : "0") + "," +
             num(r.top1, "%.6f") + "," + num(r.variant.reference_top1, "%.1f") + "\n";
    }
    write_file(options.out_dir / "ablation.csv", csv);
    std::ostringstream md;
    md << "# Ablation grid\n\n"
       << "| variant | MLP | aug+ | cos | top1 median (this run) | per seed | reference top1, full scale |\n"
       << "|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      std::string per;
      for (std::size_t i = 0; i < r.top1_per_seed.size(); ++i) {
        per += (i ? " / " : "") + num(100.0 * r.top1_per_seed[i], "%.1f");
      }
      md << "| " << r.variant.name << " | " << (r.variant.mlp ? "x" : "") << " | "
         << (r.variant.aug_plus ? "x" : "") << " | " << (r.variant.cos ? "x" : "") << " | "
         << num(100.0 * r.top1, "%.1f") << " | " << per << " | "
         << num(r.variant.reference_top1, "%.1f") << " |\n";
    }
    md << "\nReference column: ImageNet linear accuracy (%) of ResNet-50 after 200 epochs at "
          "batch 256. It is context only and is not reproduced at this scale.\n";
    write_file(options.out_dir / "ablation.md", md.str());
  }
  return rows;
}

}  // namespace moco
