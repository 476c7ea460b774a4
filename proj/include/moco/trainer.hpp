#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moco/augment.hpp"
#include "moco/data.hpp"
#include "moco/mechanisms.hpp"

namespace moco {

enum class Mechanism { kMoco, kE2e };
enum class Schedule { kStep, kCos };
enum class DatasetKind { kSynthetic, kCifar10 };

std::string_view to_string(Mechanism m);
std::string_view to_string(Schedule s);
std::string_view to_string(DatasetKind k);
Mechanism parse_mechanism(std::string_view text);
Schedule parse_schedule(std::string_view text);
DatasetKind parse_dataset_kind(std::string_view text);

struct RunConfig {
  Mechanism mechanism = Mechanism::kMoco;
  HeadKind head = HeadKind::kMlp;
  AugKind aug = AugKind::kPlus;
  Schedule schedule = Schedule::kCos;
  Index epochs = 30;
  Index batch = 64;
  double lr0 = 0.06;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  std::optional<double> tau;  // unset: 0.2 with the mlp head, 0.07 with fc
  Index K = 1024;
  double m = 0.99;
  std::uint64_t init_seed = 0;
  std::uint64_t data_seed = 0;
  std::uint64_t aug_seed = 0;

  DatasetKind dataset = DatasetKind::kSynthetic;
  Index data_per_class = 500;
  Index data_classes = 4;
  Index data_side = 32;
  double data_noise = 0.05;
  std::uint64_t synth_seed = 0;
  std::vector<std::string> data_files;

  std::vector<Index> channels{32, 64, 128};
  Index head_hidden = 256;
  Index embed_dim = 64;

  std::string out_dir;
  bool log_wall_time = false;

  double resolved_tau() const;
  EncoderConfig encoder() const;
  AugConfig aug_config() const;
  SyntheticSpec synthetic_spec() const;
  Dataset load_dataset() const;

  // Sets every seed that drives training (not the synthetic generator).
  void set_seed(std::uint64_t seed);
  void validate() const;
};

// `key = value` lines; '#' starts a comment. Unknown keys are errors.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);
RunConfig parse_run_config(std::string_view text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
// Every field, one per line, readable by parse_run_config.
std::string format_run_config(const RunConfig& cfg);

// Requires 0 <= t <= T and T >= 1. Step drops by 10x at 60% and 80% of T.
double lr_at(Schedule schedule, double lr0, Index t, Index T);

template <typename Scalar>
struct SgdState {
  std::map<std::string, Vector<Scalar>> velocity;
};

// g' = g + wd * theta; v = mu * v + g'; theta -= lr * v.
template <typename Scalar>
void sgd_update(ModelParams<Scalar>& params, SgdState<Scalar>& state, double lr,
                double momentum, double weight_decay);

struct StepMetrics {
  Index step = 0;
  Index epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double pos_sim = 0.0;
  double neg_sim = 0.0;
  double queue_fill = 0.0;
  double wall_ms = 0.0;
};

inline constexpr std::string_view kMetricsHeader =
    "step,epoch,lr,loss,pos_sim,neg_sim,queue_fill,wall_ms";
std::string format_metrics_row(const StepMetrics& m);

// Everything needed to continue a run bit-exactly.
struct Checkpoint {
  ModelParams<float> q_params;
  std::optional<ModelParams<float>> k_params;
  SgdState<float> sgd;
  std::optional<NegativeQueue<float>> queue;
  Index step = 0;
  Index epoch = 0;  // completed epochs
};

inline constexpr std::string_view kCheckpointMagic = "MOCO2CK1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
// Tensor shapes are checked against `encoder`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const EncoderConfig& encoder);

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, Index epoch);

struct TrainOptions {
  std::optional<std::filesystem::path> resume_from;
  std::optional<Index> stop_after_epoch;
  std::ostream* log = nullptr;
  const Dataset* dataset = nullptr;  // overrides cfg's dataset descriptor
};

struct TrainResult {
  ModelParams<float> params;  // query encoder
  std::vector<StepMetrics> metrics;
  std::vector<std::uint64_t> order_hashes;  // one per epoch run
  Index steps_per_epoch = 0;
  double final_pos_sim = 0.0;  // means over the last epoch's logged steps
  double final_neg_sim = 0.0;
  double final_loss = 0.0;
};

// When cfg.out_dir is set writes metrics.csv, data_order.log and one
// checkpoint per epoch under it.
TrainResult train_run(const RunConfig& cfg, const TrainOptions& options = {});

// Both views of every listed image.
ViewBatch<float> make_views(const Dataset& ds, std::span<const Index> indices,
                            const AugConfig& aug, StreamKey epoch_key);

}  // namespace moco
