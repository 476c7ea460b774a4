#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "moco/encoder.hpp"
#include "moco/trainer.hpp"

namespace moco {

// Bytes of the forward activations one gradient-bearing encoder pass keeps
// for backward, float storage: per conv block the conv output, its im2col
// buffer, the bias-add and relu outputs; the pooled features; every head
// output; the normalized embedding and its row norms. Input images are
// not counted.
std::size_t encoder_activation_bytes(const EncoderConfig& cfg, Index batch);

// What a tape actually retains for one tracked embed() pass.
std::size_t measured_retained_bytes(const EncoderConfig& cfg, Index batch);

struct ActivationAccount {
  std::size_t activation_bytes = 0;  // e2e: two passes; moco: the query pass only
  std::size_t param_bytes = 0;       // one encoder; moco also holds a key copy
  std::size_t queue_bytes = 0;       // K * D_e * 4 for moco, 0 for e2e
};

ActivationAccount activation_accounting(const EncoderConfig& cfg, Mechanism mechanism,
                                        Index batch, Index K);

struct StepTiming {
  double median_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  Index steps = 0;

  double spread() const { return min_ms > 0.0 ? max_ms / min_ms : 0.0; }
};

// Wall time of full training steps (loss, backward, SGD) on fixed random
// images. The moco queue is pre-filled so every timed step computes a loss.
// `warmup` untimed steps run first; requires steps >= 20.
StepTiming measure_step_time(const EncoderConfig& cfg, Mechanism mechanism, Index batch, Index K,
                             Index steps = 20, Index warmup = 5, std::uint64_t seed = 0);

struct CostRow {
  Mechanism mechanism = Mechanism::kMoco;
  Index batch = 0;
  Index K = 0;
  Index negatives_per_query = 0;
  ActivationAccount account;
  StepTiming timing;
};

struct CostOptions {
  std::vector<Index> batches{32, 64, 128};
  Index K = 1024;
  std::vector<Index> k_sweep{256, 1024, 4096, 16384};  // moco at batches.front()
  Index steps = 20;
  Index warmup = 5;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;  // empty: nothing is written
  std::ostream* log = nullptr;
};

inline constexpr std::string_view kCostHeader =
    "mechanism,batch,K,negatives_per_query,activation_bytes,param_bytes,queue_bytes,"
    "wall_ms_median";

// Both mechanisms at every batch, then the moco K sweep. Writes cost.csv
// and cost.md.
std::vector<CostRow> cost_report(const EncoderConfig& cfg, const CostOptions& options);

std::string format_cost_row(const CostRow& row);

// Peak resident set size from /proc, or 0 where unavailable.
std::size_t peak_resident_bytes();

}  // namespace moco
