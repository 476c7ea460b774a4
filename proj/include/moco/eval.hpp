#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moco/data.hpp"
#include "moco/encoder.hpp"
#include "moco/trainer.hpp"

namespace moco {

// Backbone features of every image, no augmentation, no head, no tape.
RowMatrix<double> extract_features(const ModelParams<float>& params, const Dataset& ds,
                                   Index chunk = 256);

struct ProbeOptions {
  Index epochs = 30;
  double lr = 0.3;
  double momentum = 0.9;
  Index batch = 64;
  std::uint64_t seed = 0;
  bool standardize = true;              // with statistics of the training split
  std::optional<Index> required_dim;    // feature width the probe insists on
};

struct ProbeResult {
  double top1 = 0.0;
  double train_top1 = 0.0;
  std::vector<double> per_class_acc;
  Index feature_dim = 0;
  Index train_size = 0;
  Index test_size = 0;
  ProbeOptions options;
};

// Roughly one example in five, chosen by a hash of the index.
bool in_holdout(Index i);

// Softmax regression trained by SGD with momentum and a cosine schedule,
// scored on the held-out split.
ProbeResult fit_linear_probe(const RowMatrix<double>& features, std::span<const int> labels,
                             Index classes, const ProbeOptions& options = {});

// Ridge regression onto one-hot targets; same split and scoring.
ProbeResult fit_least_squares_probe(const RowMatrix<double>& features,
                                    std::span<const int> labels, Index classes,
                                    double ridge = 1e-3, const ProbeOptions& options = {});

// Extracts backbone features and fits the probe with the dimension guard set.
ProbeResult probe_encoder(const ModelParams<float>& params, const Dataset& ds,
                          ProbeOptions options = {});

struct HarnessOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  std::ostream* log = nullptr;
  ProbeOptions probe;
  const Dataset* dataset = nullptr;
};

inline const std::vector<double> kTauGrid = {0.07, 0.1, 0.2, 0.3, 0.4, 0.5};
// Full-scale linear accuracy with the mlp head for the grid above.
inline const std::vector<double> kTauReferenceTop1 = {62.9, 64.9, 66.2, 65.7, 65.0, 64.3};

struct TauRow {
  double tau = 0.0;
  double top1 = 0.0;
  std::vector<std::uint64_t> order_hashes;
};

struct TauSweepResult {
  std::vector<TauRow> rows;
  std::size_t argmax = 0;
};

// One run per tau with everything else fixed. Writes tau_sweep.csv
// (`tau,top1`), tau_argmax.txt and tau_sweep.md.
TauSweepResult tau_sweep(const RunConfig& base, std::span<const double> taus,
                         const HarnessOptions& options);

struct AblationVariant {
  std::string name;
  bool mlp = false;
  bool aug_plus = false;
  bool cos = false;
  double reference_top1 = 0.0;
};

// baseline, +MLP, +aug+, +MLP+aug+, +MLP+aug+ +cos.
const std::vector<AblationVariant>& ablation_variants();

struct AblationRow {
  AblationVariant variant;
  std::vector<double> top1_per_seed;
  double top1 = 0.0;  // median over seeds
};

// Each variant trained per seed (head-default tau). Writes ablation.csv
// (`variant,mlp,aug_plus,cos,top1,ref_paper_acc`) and ablation.md.
std::vector<AblationRow> ablation_grid(const RunConfig& base, std::span<const std::uint64_t> seeds,
                                       const HarnessOptions& options);

double median(std::vector<double> values);

}  // namespace moco
