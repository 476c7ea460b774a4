#include "moco/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "moco/error.hpp"

namespace moco {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kFloatBytes = 4;

std::size_t bytes(Index elems) { return static_cast<std::size_t>(elems) * kFloatBytes; }

Tensor<float> random_images(Index batch, Index hw, std::uint64_t seed) {
  Tensor<float> t({batch, 3, hw, hw});
  Stream s(make_key(seed));
  for (Index i = 0; i < t.numel(); ++i) t.data(i) = static_cast<float>(s.uniform());
  return t;
}

std::string gib(std::size_t b) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(b) / (1024.0 * 1024.0 * 1024.0));
  return buf;
}

std::string mib(std::size_t b) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", static_cast<double>(b) / (1024.0 * 1024.0));
  return buf;
}

}  // namespace

std::size_t encoder_activation_bytes(const EncoderConfig& cfg, Index batch) {
  cfg.validate();
  if (batch < 1) throw ConfigError("batch must be positive");
  Index elems = 0;
  Index side = cfg.input_hw;
  Index in_ch = 3;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const Index stride = i == 0 ? 1 : 2;
    side = (side + 2 - 3) / stride + 1;
    const Index out = batch * cfg.channels[i] * side * side;
    const Index cols = in_ch * 9 * batch * side * side;
    elems += 3 * out + cols;
    in_ch = cfg.channels[i];
  }
  elems += batch * cfg.feature_dim();
  if (cfg.head == HeadKind::kMlp) {
    elems += 3 * batch * cfg.head_hidden + 2 * batch * cfg.embed_dim;
  } else {
    elems += 2 * batch * cfg.embed_dim;
  }
  elems += batch * cfg.embed_dim + batch;
  return bytes(elems);
}

std::size_t measured_retained_bytes(const EncoderConfig& cfg, Index batch) {
  ModelParams<float> p = init_params<float>(cfg, 0);
  Graph<float> g;
  const BoundParams bound = bind(g, p, true);
  const Var x = g.constant(random_images(batch, cfg.input_hw, 0));
  embed(g, bound, cfg, x);
  return g.retained_bytes();
}

ActivationAccount activation_accounting(const EncoderConfig& cfg, Mechanism mechanism,
                                        Index batch, Index K) {
  ActivationAccount a;
  const std::size_t pass = encoder_activation_bytes(cfg, batch);
  const std::size_t params =
      bytes(static_cast<Index>(init_params<float>(cfg, 0).parameter_count()));
  if (mechanism == Mechanism::kE2e) {
    a.activation_bytes = 2 * pass;
    a.param_bytes = params;
  } else {
    if (K < 1) throw ConfigError("queue size must be positive");
    a.activation_bytes = pass;
    a.param_bytes = 2 * params;
    a.queue_bytes = bytes(K * cfg.embed_dim);
  }
  return a;
}

StepTiming measure_step_time(const EncoderConfig& cfg, Mechanism mechanism, Index batch, Index K,
                             Index steps, Index warmup, std::uint64_t seed) {
  if (steps < 20) throw ConfigError("timing needs at least 20 measured steps");
  if (warmup < 0) throw ConfigError("warm-up steps must be non-negative");
  const ViewBatch<float> views{random_images(batch, cfg.input_hw, seed),
                               random_images(batch, cfg.input_hw, seed + 1)};
  const double tau = default_tau(cfg.head);
  ModelParams<float> params = init_params<float>(cfg, seed);
  std::optional<MocoState<float>> state;
  if (mechanism == Mechanism::kMoco) {
    state = MocoState<float>::create(params, K, 0.99, tau);
    const Tensor<float> keys = encode_detached(state->k_params, views.key);
    for (Index i = 0; i < K / batch; ++i) state->queue.enqueue(keys);
  }
  SgdState<float> sgd;
  std::vector<double> ms;
  for (Index i = 0; i < warmup + steps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    if (state) {
      moco_step(*state, views);
      sgd_update(state->q_params, sgd, 1e-3, 0.9, 1e-4);
    } else {
      e2e_step(params, views, tau);
      sgd_update(params, sgd, 1e-3, 0.9, 1e-4);
    }
    const double elapsed =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (i >= warmup) ms.push_back(elapsed);
  }
  StepTiming t;
  t.steps = steps;
  t.min_ms = *std::min_element(ms.begin(), ms.end());
  t.max_ms = *std::max_element(ms.begin(), ms.end());
  std::sort(ms.begin(), ms.end());
  const std::size_t n = ms.size();
  t.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
  return t;
}

std::string format_cost_row(const CostRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%lld,%lld,%lld,%zu,%zu,%zu,%.3f",
                std::string(to_string(r.mechanism)).c_str(), static_cast<long long>(r.batch),
                static_cast<long long>(r.K), static_cast<long long>(r.negatives_per_query),
                r.account.activation_bytes, r.account.param_bytes, r.account.queue_bytes,
                r.timing.median_ms);
  return buf;
}

std::size_t peak_resident_bytes() {
  std::ifstream f("/proc/self/status");
  std::string line;
  while (std::getline(f, line)) {
    if (line.rfind("VmHWM:", 0) == 0) {
      std::istringstream in(line.substr(6));
      std::size_t kb = 0;
      in >> kb;
      return kb * 1024;
    }
  }
  return 0;
}

std::vector<CostRow> cost_report(const EncoderConfig& cfg, const CostOptions& options) {
  if (options.batches.empty()) throw ConfigError("cost report needs at least one batch size");
  std::vector<CostRow> rows;
  auto run = [&](Mechanism mech, Index batch, Index K) {
    CostRow r;
    r.mechanism = mech;
    r.batch = batch;
    r.K = mech == Mechanism::kMoco ? K : 0;
    r.negatives_per_query = mech == Mechanism::kMoco ? K : batch - 1;
    r.account = activation_accounting(cfg, mech, batch, K);
    r.timing = measure_step_time(cfg, mech, batch, K, options.steps, options.warmup, options.seed);
    if (options.log) {
      *options.log << to_string(mech) << " batch " << batch << " K " << r.K << " median "
                   << r.timing.median_ms << " ms (max/min " << r.timing.spread() << ")\n";
    }
    rows.push_back(r);
  };
  for (Index b : options.batches) {
    if (b < 2 || options.K % b != 0) {
      throw ConfigError("K (" + std::to_string(options.K) + ") must be a multiple of batch " +
                        std::to_string(b));
    }
    run(Mechanism::kMoco, b, options.K);
    run(Mechanism::kE2e, b, options.K);
  }
  const Index sweep_batch = options.batches.front();
  for (Index k : options.k_sweep) {
    if (k % sweep_batch != 0) {
      throw ConfigError("K sweep value " + std::to_string(k) + " is not a multiple of batch " +
                        std::to_string(sweep_batch));
    }
    run(Mechanism::kMoco, sweep_batch, k);
  }

  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    std::string csv = std::string(kCostHeader) + "\n";
    for (const auto& r : rows) csv += format_cost_row(r) + "\n";
    std::ofstream(options.out_dir / "cost.csv", std::ios::binary) << csv;

    std::ostringstream md;
    md << "# Mechanism cost\n\n"
       << "| mechanism | batch | K | negatives/query | activations (MiB) | params (MiB) | "
          "queue (MiB) | step ms (median) | max/min |\n"
       << "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      char spread[32];
      std::snprintf(spread, sizeof spread, "%.2f", r.timing.spread());
      char med[32];
      std::snprintf(med, sizeof med, "%.1f", r.timing.median_ms);
      md << "| " << to_string(r.mechanism) << " | " << r.batch << " | " << r.K << " | "
         << r.negatives_per_query << " | " << mib(r.account.activation_bytes) << " | "
         << mib(r.account.param_bytes) << " | " << mib(r.account.queue_bytes) << " | " << med
         << " | " << spread << " |\n";
    }
    md << "\nActivation bytes come from model-based accounting (one retained encoder pass for "
          "moco, two for e2e); timings are medians over "
       << options.steps << " steps after " << options.warmup << " warm-up steps, single thread.\n";
    md << "\n## Accounting extrapolation (estimate, not measured)\n\n"
       << "| mechanism | batch | activations (GiB) |\n|---|---|---|\n";
    for (Index b : {256, 1024, 4096}) {
      md << "| moco | " << b << " | "
         << gib(activation_accounting(cfg, Mechanism::kMoco, b, options.K).activation_bytes)
         << " |\n| e2e | " << b << " | "
         << gib(activation_accounting(cfg, Mechanism::kE2e, b, options.K).activation_bytes)
         << " |\n";
    }
    md << "\n## Reference (full scale, not reproduced)\n\n"
       << "| mechanism | batch | memory / GPU | time / 200 epochs |\n|---|---|---|---|\n"
       << "| MoCo | 256 | 5.0G | 53 hrs |\n"
       << "| end-to-end | 256 | 7.4G | 65 hrs |\n"
       << "| end-to-end | 4096 | 93.0G (estimated) | n/a |\n"
       << "\nReference numbers are ResNet-50 on 8 V100 16G GPUs. They give the direction of the "
          "comparison only.\n";
    md << "\nAuxiliary peak resident set size of this process: " << mib(peak_resident_bytes())
       << " MiB.\n";
    std::ofstream(options.out_dir / "cost.md", std::ios::binary) << md.str();
  }
  return rows;
}

}  // namespace moco
