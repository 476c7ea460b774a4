#include "moco/trainer.hpp"

#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <ostream>
#include <sstream>

#include "moco/error.hpp"

namespace moco {

namespace fs = std::filesystem;

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
  throw ConfigError("config key '" + std::string(key) + "' expects " + expected + ", got '" +
                    std::string(value) + "'");
}

template <typename Int>
Int parse_int(std::string_view key, std::string_view value) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) bad_value(key, value, "an integer");
  return out;
}

double parse_real(std::string_view key, std::string_view value) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || !std::isfinite(out)) {
    bad_value(key, value, "a finite number");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "true or false");
}

std::vector<std::string_view> split_commas(std::string_view value) {
  std::vector<std::string_view> parts;
  while (!value.empty()) {
    const auto comma = value.find(',');
    parts.push_back(trim(value.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    value.remove_prefix(comma + 1);
  }
  return parts;
}

std::string real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<Index>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

// Little-endian byte sink and source for the checkpoint layout.
class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void raw(std::string_view s) { bytes_.append(s); }
  void record(const std::string& name, const Shape& shape, const float* data) {
    u32(static_cast<std::uint32_t>(name.size()));
    raw(name);
    u32(static_cast<std::uint32_t>(shape.size()));
    for (Index d : shape) u32(static_cast<std::uint32_t>(d));
    for (Index i = 0; i < numel(shape); ++i) u32(std::bit_cast<std::uint32_t>(data[i]));
  }
  void meta(const std::string& name, std::uint64_t v) {
    const float words[2] = {std::bit_cast<float>(static_cast<std::uint32_t>(v)),
                            std::bit_cast<float>(static_cast<std::uint32_t>(v >> 32))};
    record("meta." + name, {2}, words);
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
    }
    const std::string_view s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(const char* what) {
    const std::string_view s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[static_cast<std::size_t>(i)]))
           << (8 * i);
    }
    return v;
  }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

struct RawRecord {
  Tensor<float> tensor;
  std::size_t offset = 0;
};

void write_params(Writer& w, const std::string& prefix, const ModelParams<float>& p) {
  for (const auto& [path, t] : p.tensors) w.record(prefix + path, t.shape, t.data.data());
}

std::uint64_t fnv1a(std::span<const Index> values, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (Index v : values) {
    auto u = static_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (u >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// First `keep` non-header lines of an existing log, or an error if it is
// shorter than that.
std::string log_prefix(const fs::path& p, std::size_t keep, bool has_header) {
  std::istringstream in(read_text(p));
  std::string out, line;
  if (has_header) {
    std::getline(in, line);
    out += line + "\n";
  }
  for (std::size_t i = 0; i < keep; ++i) {
    if (!std::getline(in, line)) {
      throw ContractError("'" + p.string() + "' holds fewer entries than the checkpoint step");
    }
    out += line + "\n";
  }
  return out;
}

void write_text(const fs::path& p, const std::string& text, bool append) {
  std::ofstream f(p, append ? std::ios::binary | std::ios::app : std::ios::binary);
  if (!f) throw IoError("cannot open '" + p.string() + "' for writing");
  f << text;
  if (!f) throw IoError("failed writing '" + p.string() + "'");
}

}  // namespace

std::string_view to_string(Mechanism m) { return m == Mechanism::kMoco ? "moco" : "e2e"; }
std::string_view to_string(Schedule s) { return s == Schedule::kCos ? "cos" : "step"; }
std::string_view to_string(DatasetKind k) {
  return k == DatasetKind::kSynthetic ? "synthetic" : "cifar10";
}

Mechanism parse_mechanism(std::string_view text) {
  if (text == "moco") return Mechanism::kMoco;
  if (text == "e2e") return Mechanism::kE2e;
  throw ConfigError("unknown mechanism '" + std::string(text) + "' (expected moco or e2e)");
}

Schedule parse_schedule(std::string_view text) {
  if (text == "cos") return Schedule::kCos;
  if (text == "step") return Schedule::kStep;
  throw ConfigError("unknown schedule '" + std::string(text) + "' (expected step or cos)");
}

DatasetKind parse_dataset_kind(std::string_view text) {
  if (text == "synthetic") return DatasetKind::kSynthetic;
  if (text == "cifar10") return DatasetKind::kCifar10;
  throw ConfigError("unknown dataset '" + std::string(text) + "' (expected synthetic or cifar10)");
}

double RunConfig::resolved_tau() const { return tau ? *tau : default_tau(head); }

EncoderConfig RunConfig::encoder() const {
  EncoderConfig e;
  e.input_hw = dataset == DatasetKind::kCifar10 ? kCifarSide : data_side;
  e.channels = channels;
  e.head = head;
  e.head_hidden = head_hidden;
  e.embed_dim = embed_dim;
  return e;
}

AugConfig RunConfig::aug_config() const {
  AugConfig a;
  a.kind = aug;
  return a;
}

SyntheticSpec RunConfig::synthetic_spec() const {
  return {data_per_class, data_classes, data_side, data_noise, synth_seed};
}

Dataset RunConfig::load_dataset() const {
  if (dataset == DatasetKind::kSynthetic) return gen_synthetic(synthetic_spec());
  std::vector<fs::path> paths(data_files.begin(), data_files.end());
  return load_cifar10_bin(paths);
}

void RunConfig::set_seed(std::uint64_t seed) {
  init_seed = data_seed = aug_seed = seed;
}

void RunConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (batch < 1) throw ConfigError("batch must be positive");
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) {
    throw ConfigError("sgd_momentum must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (tau && !(*tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("m must lie in [0, 1]");
  if (mechanism == Mechanism::kMoco) {
    if (K < batch || K % batch != 0) {
      throw ConfigError("K (" + std::to_string(K) + ") must be a multiple of batch (" +
                        std::to_string(batch) + ")");
    }
  } else if (batch < 2) {
    throw ConfigError("e2e needs a batch of at least 2");
  }
  if (dataset == DatasetKind::kSynthetic) {
    synthetic_spec().validate();
  } else if (data_files.empty()) {
    throw ConfigError("dataset cifar10 needs data_files");
  }
  encoder().validate();
  aug_config().validate();
}

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  if (key == "mechanism") {
    cfg.mechanism = parse_mechanism(value);
  } else if (key == "head") {
    cfg.head = parse_head_kind(value);
  } else if (key == "aug") {
    cfg.aug = parse_aug_kind(value);
  } else if (key == "schedule") {
    cfg.schedule = parse_schedule(value);
  } else if (key == "epochs") {
    cfg.epochs = parse_int<Index>(key, value);
  } else if (key == "batch") {
    cfg.batch = parse_int<Index>(key, value);
  } else if (key == "lr0") {
    cfg.lr0 = parse_real(key, value);
  } else if (key == "sgd_momentum") {
    cfg.sgd_momentum = parse_real(key, value);
  } else if (key == "weight_decay") {
    cfg.weight_decay = parse_real(key, value);
  } else if (key == "tau") {
    if (value == "auto") {
      cfg.tau.reset();
    } else {
      cfg.tau = parse_real(key, value);
    }
  } else if (key == "K") {
    cfg.K = parse_int<Index>(key, value);
  } else if (key == "m") {
    cfg.m = parse_real(key, value);
  } else if (key == "init_seed") {
    cfg.init_seed = parse_int<std::uint64_t>(key, value);
  } else if (key == "data_seed") {
    cfg.data_seed = parse_int<std::uint64_t>(key, value);
  } else if (key == "aug_seed") {
    cfg.aug_seed = parse_int<std::uint64_t>(key, value);
  } else if (key == "seed") {
    cfg.set_seed(parse_int<std::uint64_t>(key, value));
  } else if (key == "dataset") {
    cfg.dataset = parse_dataset_kind(value);
  } else if (key == "data_per_class") {
    cfg.data_per_class = parse_int<Index>(key, value);
  } else if (key == "data_classes") {
    cfg.data_classes = parse_int<Index>(key, value);
  } else if (key == "data_side") {
    cfg.data_side = parse_int<Index>(key, value);
  } else if (key == "data_noise") {
    cfg.data_noise = parse_real(key, value);
  } else if (key == "synth_seed") {
    cfg.synth_seed = parse_int<std::uint64_t>(key, value);
  } else if (key == "data_files") {
    cfg.data_files.clear();
    for (auto part : split_commas(value)) {
      if (!part.empty()) cfg.data_files.emplace_back(part);
    }
  } else if (key == "channels") {
    cfg.channels.clear();
    for (auto part : split_commas(value)) cfg.channels.push_back(parse_int<Index>(key, part));
  } else if (key == "head_hidden") {
    cfg.head_hidden = parse_int<Index>(key, value);
  } else if (key == "embed_dim") {
    cfg.embed_dim = parse_int<Index>(key, value);
  } else if (key == "out_dir") {
    cfg.out_dir = std::string(value);
  } else if (key == "log_wall_time") {
    cfg.log_wall_time = parse_bool(key, value);
  } else {
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }
}

RunConfig parse_run_config(std::string_view text, RunConfig base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + " is not 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + " has no key");
    apply_setting(base, key, value);
  }
  return base;
}

RunConfig load_run_config(const fs::path& path, RunConfig base) {
  return parse_run_config(read_text(path), std::move(base));
}

std::string format_run_config(const RunConfig& cfg) {
  std::string files;
  for (std::size_t i = 0; i < cfg.data_files.size(); ++i) {
    files += (i ? "," : "") + cfg.data_files[i];
  }
  std::ostringstream o;
  o << "mechanism = " << to_string(cfg.mechanism) << "\n"
    << "head = " << to_string(cfg.head) << "\n"
    << "aug = " << to_string(cfg.aug) << "\n"
    << "schedule = " << to_string(cfg.schedule) << "\n"
    << "epochs = " << cfg.epochs << "\n"
    << "batch = " << cfg.batch << "\n"
    << "lr0 = " << real(cfg.lr0) << "\n"
    << "sgd_momentum = " << real(cfg.sgd_momentum) << "\n"
    << "weight_decay = " << real(cfg.weight_decay) << "\n"
    << "tau = " << real(cfg.resolved_tau()) << "\n"
    << "K = " << cfg.K << "\n"
    << "m = " << real(cfg.m) << "\n"
    << "init_seed = " << cfg.init_seed << "\n"
    << "data_seed = " << cfg.data_seed << "\n"
    << "aug_seed = " << cfg.aug_seed << "\n"
    << "dataset = " << to_string(cfg.dataset) << "\n"
    << "data_per_class = " << cfg.data_per_class << "\n"
    << "data_classes = " << cfg.data_classes << "\n"
    << "data_side = " << cfg.data_side << "\n"
    << "data_noise = " << real(cfg.data_noise) << "\n"
    << "synth_seed = " << cfg.synth_seed << "\n"
    << "data_files = " << files << "\n"
    << "channels = " << join(cfg.channels) << "\n"
    << "head_hidden = " << cfg.head_hidden << "\n"
    << "embed_dim = " << cfg.embed_dim << "\n"
    << "out_dir = " << cfg.out_dir << "\n"
    << "log_wall_time = " << (cfg.log_wall_time ? "true" : "false") << "\n";
  return o.str();
}

double lr_at(Schedule schedule, double lr0, Index t, Index T) {
  if (T < 1) throw ContractError("schedule length must be at least 1");
  if (t < 0 || t > T) {
    throw ContractError("step " + std::to_string(t) + " outside schedule of " +
                        std::to_string(T) + " steps");
  }
  if (schedule == Schedule::kCos) {
    const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(T);
    return lr0 * 0.5 * (1.0 + std::cos(phase));
  }
  const double frac = static_cast<double>(t) / static_cast<double>(T);
  double lr = lr0;
  if (frac >= 0.6) lr *= 0.1;
  if (frac >= 0.8) lr *= 0.1;
  return lr;
}

template <typename Scalar>
void sgd_update(ModelParams<Scalar>& params, SgdState<Scalar>& state, double lr,
                double momentum, double weight_decay) {
  for (const auto& [path, t] : params.tensors) {
    if (!t.grad) throw ContractError("no gradient for parameter '" + path + "'");
  }
  const auto lr_s = static_cast<Scalar>(lr);
  const auto mu = static_cast<Scalar>(momentum);
  const auto wd = static_cast<Scalar>(weight_decay);
  for (auto& [path, t] : params.tensors) {
    auto [it, fresh] = state.velocity.try_emplace(path);
    Vector<Scalar>& v = it->second;
    if (fresh) v = Vector<Scalar>::Zero(t.numel());
    if (v.size() != t.numel()) {
      throw DimensionError("velocity for '" + path + "' has the wrong size");
    }
    v = mu * v + (*t.grad + wd * t.data);
    t.data -= lr_s * v;
  }
}

template void sgd_update(ModelParams<float>&, SgdState<float>&, double, double, double);
template void sgd_update(ModelParams<double>&, SgdState<double>&, double, double, double);

std::string format_metrics_row(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%lld,%.9g,%.9g,%.9g,%.9g,%.6g,%.3f",
                static_cast<long long>(m.step), static_cast<long long>(m.epoch), m.lr, m.loss,
                m.pos_sim, m.neg_sim, m.queue_fill, m.wall_ms);
  return buf;
}

void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  Writer w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  write_params(w, "q.", ck.q_params);
  if (ck.k_params) write_params(w, "k.", *ck.k_params);
  for (const auto& [name, v] : ck.sgd.velocity) {
    w.record("v." + name, {v.size()}, v.data());
  }
  if (ck.queue) {
    w.record("queue.storage", ck.queue->storage().shape, ck.queue->storage().data.data());
    w.meta("queue_write_ptr", static_cast<std::uint64_t>(ck.queue->write_ptr()));
    w.meta("queue_filled", ck.queue->filled() ? 1 : 0);
  }
  w.meta("step", static_cast<std::uint64_t>(ck.step));
  w.meta("epoch", static_cast<std::uint64_t>(ck.epoch));
  const fs::path tmp = path.string() + ".tmp";
  write_text(tmp, w.bytes(), false);
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path, const EncoderConfig& encoder) {
  Reader r(read_text(path));
  if (r.take(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    throw FormatError("'" + path.string() + "' is not a checkpoint (bad magic)", 0);
  }
  const std::size_t version_at = r.offset();
  if (const auto v = r.u32("version"); v != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  }
  std::map<std::string, RawRecord> records;
  while (!r.done()) {
    const std::size_t at = r.offset();
    const std::uint32_t name_len = r.u32("name length");
    std::string name(r.take(name_len, "record name"));
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 8) throw FormatError("bad rank in record '" + name + "'", at);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint32_t d = r.u32("dims");
      if (d == 0) throw FormatError("zero extent in record '" + name + "'", at);
      shape.push_back(static_cast<Index>(d));
    }
    Tensor<float> t(shape);
    const std::string_view payload =
        r.take(static_cast<std::size_t>(t.numel()) * 4, "record payload");
    for (Index i = 0; i < t.numel(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(
                    static_cast<unsigned char>(payload[static_cast<std::size_t>(4 * i + b)]))
                << (8 * b);
      }
      t.data(i) = std::bit_cast<float>(bits);
    }
    if (!records.emplace(name, RawRecord{std::move(t), at}).second) {
      throw FormatError("duplicate record '" + name + "'", at);
    }
  }
  const std::size_t end = r.offset();

  auto meta = [&](const std::string& name) -> std::uint64_t {
    const auto it = records.find("meta." + name);
    if (it == records.end()) throw FormatError("checkpoint lacks meta." + name, end);
    if (it->second.tensor.numel() != 2) {
      throw FormatError("malformed meta." + name, it->second.offset);
    }
    const auto lo = std::bit_cast<std::uint32_t>(it->second.tensor.data(0));
    const auto hi = std::bit_cast<std::uint32_t>(it->second.tensor.data(1));
    return (static_cast<std::uint64_t>(hi) << 32) | lo;
  };
  const ModelParams<float> shapes = init_params<float>(encoder, 0);
  auto params = [&](const std::string& prefix) -> std::optional<ModelParams<float>> {
    ModelParams<float> p{encoder, {}};
    for (const auto& [path, t] : shapes.tensors) {
      const auto it = records.find(prefix + path);
      if (it == records.end()) {
        if (p.tensors.empty()) continue;
        throw FormatError("checkpoint lacks " + prefix + path, end);
      }
      if (it->second.tensor.shape != t.shape) {
        throw FormatError("record " + prefix + path + " has shape " +
                              to_string(it->second.tensor.shape) + ", encoder expects " +
                              to_string(t.shape),
                          it->second.offset);
      }
      p.tensors.emplace(path, it->second.tensor);
    }
    if (p.tensors.empty()) return std::nullopt;
    if (p.tensors.size() != shapes.tensors.size()) {
      throw FormatError("checkpoint holds a partial " + prefix + " encoder", end);
    }
    return p;
  };

  Checkpoint ck;
  auto q = params("q.");
  if (!q) throw FormatError("checkpoint lacks query encoder records", end);
  ck.q_params = std::move(*q);
  ck.k_params = params("k.");
  for (const auto& [path, t] : ck.q_params.tensors) {
    const auto it = records.find("v." + path);
    if (it == records.end()) continue;
    if (it->second.tensor.numel() != t.numel()) {
      throw FormatError("velocity record v." + path + " has the wrong size", it->second.offset);
    }
    ck.sgd.velocity.emplace(path, it->second.tensor.data);
  }
  if (const auto it = records.find("queue.storage"); it != records.end()) {
    const auto& st = it->second.tensor;
    if (st.rank() != 2 || st.dim(1) != encoder.embed_dim) {
      throw FormatError("queue storage has shape " + to_string(st.shape), it->second.offset);
    }
    const auto ptr = static_cast<Index>(meta("queue_write_ptr"));
    if (ptr < 0 || ptr >= st.dim(0)) throw FormatError("queue write pointer out of range", end);
    ck.queue = NegativeQueue<float>::restore(st, ptr, meta("queue_filled") != 0);
  }
  ck.step = static_cast<Index>(meta("step"));
  ck.epoch = static_cast<Index>(meta("epoch"));
  return ck;
}

fs::path checkpoint_path(const fs::path& out_dir, Index epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03lld.ckpt", static_cast<long long>(epoch));
  return out_dir / "checkpoints" / buf;
}

ViewBatch<float> make_views(const Dataset& ds, std::span<const Index> indices,
                            const AugConfig& aug, StreamKey epoch_key) {
  const auto n = static_cast<Index>(indices.size());
  ViewBatch<float> views{Tensor<float>({n, 3, ds.side, ds.side}),
                         Tensor<float>({n, 3, ds.side, ds.side})};
  const Index stride = ds.image_numel();
  for (Index r = 0; r < n; ++r) {
    const Index i = indices[static_cast<std::size_t>(r)];
    const ViewPair pair =
        two_views(ds.image(i), aug, derive(epoch_key, static_cast<std::uint64_t>(i)), i);
    std::copy_n(pair.view_q.px.data(), stride, views.query.data.data() + r * stride);
    std::copy_n(pair.view_k.px.data(), stride, views.key.data.data() + r * stride);
  }
  return views;
}

TrainResult train_run(const RunConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  Dataset owned;
  if (!options.dataset) owned = cfg.load_dataset();
  const Dataset& ds = options.dataset ? *options.dataset : owned;
  const EncoderConfig enc = cfg.encoder();
  if (ds.side != enc.input_hw) {
    throw ConfigError("dataset side " + std::to_string(ds.side) + " does not match encoder input " +
                      std::to_string(enc.input_hw));
  }
  if (ds.size() < cfg.batch) {
    throw ConfigError("batch " + std::to_string(cfg.batch) + " exceeds dataset size " +
                      std::to_string(ds.size()));
  }
  const Index spe = ds.size() / cfg.batch;
  const Index total = cfg.epochs * spe;
  const double tau = cfg.resolved_tau();
  const AugConfig aug = cfg.aug_config();
  const bool moco = cfg.mechanism == Mechanism::kMoco;

  std::optional<MocoState<float>> state;
  ModelParams<float> e2e_params;
  if (moco) {
    state = MocoState<float>::create(init_params<float>(enc, cfg.init_seed), cfg.K, cfg.m, tau);
  } else {
    e2e_params = init_params<float>(enc, cfg.init_seed);
  }
  ModelParams<float>& params = moco ? state->q_params : e2e_params;
  SgdState<float> sgd;
  Index start_epoch = 0;
  Index step = 0;

  if (options.resume_from) {
    Checkpoint ck = load_checkpoint(*options.resume_from, enc);
    if (ck.step != ck.epoch * spe || ck.epoch > cfg.epochs) {
      throw ContractError("checkpoint at step " + std::to_string(ck.step) +
                          " does not fit this run's schedule");
    }
    params = std::move(ck.q_params);
    sgd = std::move(ck.sgd);
    if (moco) {
      if (!ck.k_params || !ck.queue) {
        throw FormatError("checkpoint lacks the key encoder or queue needed by moco", 0);
      }
      state->k_params = std::move(*ck.k_params);
      if (ck.queue->capacity() != cfg.K) {
        throw ContractError("checkpoint queue holds " + std::to_string(ck.queue->capacity()) +
                            " keys, config asks for " + std::to_string(cfg.K));
      }
      state->queue = std::move(*ck.queue);
    }
    start_epoch = ck.epoch;
    step = ck.step;
  }

  const fs::path out = cfg.out_dir;
  const fs::path metrics_path = out / "metrics.csv";
  const fs::path order_path = out / "data_order.log";
  if (!cfg.out_dir.empty()) {
    fs::create_directories(out / "checkpoints");
    if (options.resume_from && step > 0 && fs::exists(metrics_path) && fs::exists(order_path)) {
      write_text(metrics_path, log_prefix(metrics_path, static_cast<std::size_t>(step), true),
                 false);
      write_text(order_path, log_prefix(order_path, static_cast<std::size_t>(start_epoch), false),
                 false);
    } else {
      write_text(metrics_path, std::string(kMetricsHeader) + "\n", false);
      write_text(order_path, "", false);
    }
  }

  TrainResult result;
  result.steps_per_epoch = spe;
  const Index end_epoch =
      options.stop_after_epoch ? std::min(*options.stop_after_epoch, cfg.epochs) : cfg.epochs;
  const StreamKey data_root = make_key(cfg.data_seed);
  const StreamKey aug_root = make_key(cfg.aug_seed);

  for (Index epoch = start_epoch; epoch < end_epoch; ++epoch) {
    const auto batches =
        batch_iter(ds.size(), cfg.batch, derive(data_root, static_cast<std::uint64_t>(epoch)));
    std::uint64_t order_hash = 0xcbf29ce484222325ULL;
    for (const auto& b : batches) order_hash = fnv1a(b, order_hash);
    result.order_hashes.push_back(order_hash);
    const StreamKey aug_key = derive(aug_root, static_cast<std::uint64_t>(epoch));

    std::string rows;
    double sum_loss = 0.0, sum_pos = 0.0, sum_neg = 0.0;
    Index counted = 0;
    for (const auto& b : batches) {
      const auto t0 = std::chrono::steady_clock::now();
      StepMetrics row;
      row.step = step;
      row.epoch = epoch;
      row.lr = lr_at(cfg.schedule, cfg.lr0, step, total);
      const ViewBatch<float> views = make_views(ds, b, aug, aug_key);
      row.queue_fill = moco ? state->queue.fill_fraction() : 1.0;
      const StepResult<float> r = moco ? moco_step(*state, views) : e2e_step(params, views, tau);
      if (!r.warming) {
        if (!std::isfinite(r.loss)) {
          if (options.log) *options.log << "non-finite loss at step " << step << "\n";
          throw NumericError("non-finite loss at step " + std::to_string(step), step);
        }
        sgd_update(params, sgd, row.lr, cfg.sgd_momentum, cfg.weight_decay);
        if (!params.all_finite()) {
          if (options.log) *options.log << "non-finite parameters at step " << step << "\n";
          throw NumericError("non-finite parameters at step " + std::to_string(step), step);
        }
        row.loss = r.loss;
        row.pos_sim = r.pos_sim;
        row.neg_sim = r.neg_sim;
        sum_loss += r.loss;
        sum_pos += r.pos_sim;
        sum_neg += r.neg_sim;
        ++counted;
      }
      if (cfg.log_wall_time) {
        row.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
      }
      rows += format_metrics_row(row) + "\n";
      result.metrics.push_back(row);
      ++step;
    }
    if (counted > 0) {
      result.final_loss = sum_loss / static_cast<double>(counted);
      result.final_pos_sim = sum_pos / static_cast<double>(counted);
      result.final_neg_sim = sum_neg / static_cast<double>(counted);
    }
    if (!cfg.out_dir.empty()) {
      write_text(metrics_path, rows, true);
      char hash[64];
      std::snprintf(hash, sizeof hash, "%lld,%016llx\n", static_cast<long long>(epoch),
                    static_cast<unsigned long long>(order_hash));
      write_text(order_path, hash, true);
      Checkpoint ck;
      ck.q_params = params;
      if (moco) {
        ck.k_params = state->k_params;
        ck.queue = state->queue;
      }
      ck.sgd = sgd;
      ck.step = step;
      ck.epoch = epoch + 1;
      save_checkpoint(ck, checkpoint_path(out, epoch + 1));
    }
    if (options.log) {
      *options.log << "epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << result.final_loss
                   << " pos_sim " << result.final_pos_sim << " neg_sim " << result.final_neg_sim
                   << "\n";
    }
  }
  result.params = params;
  return result;
}

}  // namespace moco
