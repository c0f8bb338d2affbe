#include "dyns/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "dyns/gradcheck_suite.hpp"

#ifndef DYNS_CODE_VERSION
#define DYNS_CODE_VERSION "unknown"
#endif

namespace dyns {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string code_version() {
  return std::string(DYNS_CODE_VERSION) + (sizeof(Real) == sizeof(double) ? "-f64" : "-f32");
}

// ------------------------------------------------------------ value parsing

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  const std::string v = trim(text);
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("invalid value for " + key + ": '" + text + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const std::string v = trim(text);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("invalid value for " + key + ": '" + text + "' (expected true or false)");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

template <typename T>
std::vector<T> parse_number_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) out.push_back(parse_number<T>(key, item));
  if (out.empty()) throw ConfigError(key + " must not be empty");
  return out;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

template <typename T>
std::string join(const std::vector<T>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, std::string>)
      out += items[i];
    else
      out += format_number(items[i]);
  }
  return out;
}

struct Binding {
  std::string key;
  std::function<void(RunSettings&, const std::string&)> set;
  std::function<std::string(const RunSettings&)> get;
};

#define DYNS_INDEX(name, field)                                                                          \
  Binding {                                                                                              \
    name, [](RunSettings& s, const std::string& v) { s.field = parse_number<Index>(name, v); },          \
        [](const RunSettings& s) { return format_number(s.field); }                                     \
  }
#define DYNS_REAL(name, field)                                                                           \
  Binding {                                                                                              \
    name, [](RunSettings& s, const std::string& v) { s.field = parse_number<double>(name, v); },         \
        [](const RunSettings& s) { return format_number(s.field); }                                     \
  }
#define DYNS_BOOL(name, field)                                                                           \
  Binding {                                                                                              \
    name, [](RunSettings& s, const std::string& v) { s.field = parse_bool(name, v); },                   \
        [](const RunSettings& s) { return std::string(s.field ? "true" : "false"); }                    \
  }
#define DYNS_TEXT(name, field)                                                                           \
  Binding {                                                                                              \
    name, [](RunSettings& s, const std::string& v) { s.field = trim(v); },                               \
        [](const RunSettings& s) { return s.field; }                                                     \
  }

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = {
      DYNS_TEXT("preset", preset),
      {"seed", [](RunSettings& s, const std::string& v) { s.seed = parse_number<std::uint64_t>("seed", v); },
       [](const RunSettings& s) { return format_number(s.seed); }},
      DYNS_TEXT("data", data),
      DYNS_TEXT("out", out),
      DYNS_TEXT("checkpoint", checkpoint),
      // Synthetic data.
      DYNS_INDEX("rois", rois),
      DYNS_INDEX("steps", steps),
      DYNS_INDEX("subjects_per_class", subjects_per_class),
      DYNS_INDEX("regimes", regimes),
      DYNS_REAL("separation", separation),
      DYNS_REAL("switch_rate", switch_rate),
      DYNS_REAL("noise_std", noise_std),
      DYNS_REAL("smoothness", smoothness),
      DYNS_BOOL("null_signal", null_signal),
      DYNS_REAL("train_fraction", train_fraction),
      DYNS_REAL("validation_fraction", train.validation_fraction),
      // Latent graph.
      DYNS_INDEX("d_lat", model.encoder.d_lat),
      DYNS_INDEX("kernel_size", model.encoder.kernel_size),
      DYNS_INDEX("encoder_heads", model.encoder.heads),
      DYNS_BOOL("encoder_attention", model.encoder.attention),
      {"filter", [](RunSettings& s, const std::string& v) { s.model.filter = parse_filter_mode(trim(v)); },
       [](const RunSettings& s) { return to_string(s.model.filter); }},
      // Selective state space.
      DYNS_INDEX("d_h", model.ssm.d_h),
      DYNS_INDEX("ssm_blocks", model.ssm.blocks),
      DYNS_REAL("min_rate", model.ssm.min_rate),
      DYNS_REAL("max_rate", model.ssm.max_rate),
      {"backend", [](RunSettings& s, const std::string& v) { s.train.eval_backend = parse_scan_backend(trim(v)); },
       [](const RunSettings& s) { return to_string(s.train.eval_backend); }},
      DYNS_INDEX("chunk", chunk),
      // Tokens and surrogate model.
      DYNS_INDEX("d_k", model.surrogate.d_k),
      DYNS_INDEX("tokens", model.surrogate.brain_tokens),
      DYNS_BOOL("brain_offsets", model.surrogate.brain_offsets),
      DYNS_INDEX("llm_blocks", model.surrogate.blocks),
      DYNS_INDEX("llm_heads", model.surrogate.heads),
      DYNS_INDEX("llm_ffn_mult", model.surrogate.ffn_mult),
      DYNS_INDEX("vocab", model.surrogate.vocab),
      DYNS_INDEX("context", model.surrogate.context),
      {"frozen_seed",
       [](RunSettings& s, const std::string& v) {
         s.model.surrogate.frozen_seed = parse_number<std::uint64_t>("frozen_seed", v);
       },
       [](const RunSettings& s) { return format_number(s.model.surrogate.frozen_seed); }},
      {"prompt",
       [](RunSettings& s, const std::string& v) { s.model.prompt = parse_number_list<Index>("prompt", v); },
       [](const RunSettings& s) { return join(s.model.prompt); }},
      DYNS_INDEX("r", model.surrogate.lora.rank),
      DYNS_REAL("alpha", model.surrogate.lora.alpha),
      DYNS_REAL("dropout", model.surrogate.lora.dropout),
      DYNS_TEXT("lora_targets", model.surrogate.lora_targets),
      // Training.
      DYNS_TEXT("variant", train.variant),
      DYNS_REAL("lr", train.adam.learning_rate),
      DYNS_REAL("beta1", train.adam.beta1),
      DYNS_REAL("beta2", train.adam.beta2),
      DYNS_REAL("adam_eps", train.adam.eps),
      DYNS_INDEX("epochs", train.epochs),
      DYNS_INDEX("batch_size", train.batch_size),
      DYNS_INDEX("accumulation_steps", train.accumulation_steps),
      // Ablation, benchmark, gradient check.
      {"variants", [](RunSettings& s, const std::string& v) { s.variants = split_list(v); },
       [](const RunSettings& s) { return join(s.variants); }},
      {"seeds",
       [](RunSettings& s, const std::string& v) { s.seeds = parse_number_list<std::uint64_t>("seeds", v); },
       [](const RunSettings& s) { return join(s.seeds); }},
      {"bench_lengths",
       [](RunSettings& s, const std::string& v) { s.bench_lengths = parse_number_list<Index>("bench_lengths", v); },
       [](const RunSettings& s) { return join(s.bench_lengths); }},
      DYNS_INDEX("bench_width", bench_width),
      DYNS_INDEX("bench_repeats", bench_repeats),
      DYNS_INDEX("gradcheck_seeds", gradcheck_seeds),
  };
  return table;
}

#undef DYNS_INDEX
#undef DYNS_REAL
#undef DYNS_BOOL
#undef DYNS_TEXT

const Binding& find_binding(const std::string& key) {
  for (const auto& b : bindings())
    if (b.key == key) return b;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

// ----------------------------------------------------------------- settings

RunSettings preset_settings(const std::string& preset) {
  RunSettings s;
  s.preset = preset;
  if (preset == "standard") {
    s.model = ModelConfig{};
    s.train = TrainConfig{};
  } else if (preset == "desk") {
    s.model = desk_model_config(s.rois);
    s.train = desk_train_config(0);
  } else {
    throw ConfigError("unknown preset '" + preset + "' (expected standard or desk)");
  }
  return s;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& b : bindings()) keys.push_back(b.key);
  return keys;
}

void set_config_value(RunSettings& s, const std::string& key, const std::string& value) {
  find_binding(key).set(s, value);
}

std::string get_config_value(const RunSettings& s, const std::string& key) { return find_binding(key).get(s); }

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::string line;
  for (int number = 1; std::getline(ss, line); ++number) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    find_binding(key);
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

RunSettings resolve_settings(const std::string& config_text,
                             const std::vector<std::pair<std::string, std::string>>& overrides,
                             const char* env_seed) {
  auto layers = parse_config_text(config_text);
  for (const auto& [key, value] : overrides) {
    find_binding(key);
    layers.emplace_back(key, value);
  }
  std::string preset = "standard";
  for (const auto& [key, value] : layers)
    if (key == "preset") preset = trim(value);
  RunSettings s = preset_settings(preset);
  if (env_seed && *env_seed) set_config_value(s, "seed", env_seed);
  for (const auto& [key, value] : layers) set_config_value(s, key, value);
  s.model.rois = s.rois;
  s.train.seed = s.seed;
  return s;
}

std::string resolved_text(const RunSettings& s) {
  std::string out = "# version " + code_version() + "\n";
  for (const auto& b : bindings()) {
    if (b.key == "out") continue;
    out += b.key + " = " + b.get(s) + "\n";
  }
  return out;
}

SynthSpec synth_spec(const RunSettings& s, std::uint64_t seed) {
  SynthSpec spec;
  spec.rois = s.rois;
  spec.steps = s.steps;
  spec.subjects_per_class = s.subjects_per_class;
  spec.switch_rate = s.switch_rate;
  spec.noise_std = s.noise_std;
  spec.temporal_smoothness = s.smoothness;
  spec.seed = seed;
  spec.allow_identical_classes = s.null_signal;
  spec.state_graphs = s.null_signal ? null_templates(s.rois, s.regimes, s.separation)
                                    : planted_templates(s.rois, s.regimes, s.separation);
  return spec;
}

// -------------------------------------------------------------- subcommands

namespace {

struct Io {
  std::ostream& out;
  std::ostream& err;
  bool quiet = false;
  bool json = false;

  void progress(const std::string& line) const {
    if (!quiet) err << line << "\n";
  }
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

// Loads the manifest dataset, or generates the synthetic one for `seed`.
std::vector<RoiTimeSeries> load_subjects(RunSettings& s, std::uint64_t seed) {
  if (s.data.empty()) return synth_generate(synth_spec(s, seed));
  auto subjects = load_dataset(s.data);
  if (subjects.empty()) throw ContentError("manifest lists no subjects: " + s.data);
  s.rois = subjects.front().rois();
  s.model.rois = s.rois;
  for (const auto& sub : subjects)
    if (sub.rois() != s.rois) throw ContentError("subject " + sub.subject_id + " has a different ROI count");
  return subjects;
}

fs::path make_run_dir(const std::string& root, std::uint64_t seed) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  const std::string base = std::string(stamp) + "-s" + std::to_string(seed);
  fs::path dir = fs::path(root) / base;
  for (int i = 1; fs::exists(dir); ++i) dir = fs::path(root) / (base + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

ordered_json metrics_json(const Metrics& m, double loss) {
  ordered_json j;
  j["loss"] = loss;
  j["accuracy"] = m.accuracy;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  j["tp"] = m.tp;
  j["fp"] = m.fp;
  j["fn"] = m.fn;
  j["tn"] = m.tn;
  return j;
}

std::string epoch_line(const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "epoch %lld %-5s loss %.4f acc %.4f f1 %.4f", static_cast<long long>(r.epoch),
                r.split.c_str(), r.loss, r.metrics.accuracy, r.metrics.f1);
  return buf;
}

int cmd_generate(RunSettings s, const Io& io) {
  const fs::path dir = s.out;
  const auto subjects = synth_generate(synth_spec(s, s.seed));
  write_dataset(dir, subjects);
  write_file(dir / "config.resolved", resolved_text(s));
  if (io.json) {
    ordered_json j;
    j["manifest"] = (dir / "manifest.json").string();
    j["subjects"] = subjects.size();
    io.out << j.dump() << "\n";
  } else {
    io.out << "wrote " << subjects.size() << " subjects to " << dir.string() << "\n";
  }
  return 0;
}

int cmd_train(RunSettings s, const Io& io) {
  validate(s.train);
  const auto subjects = load_subjects(s, s.seed);
  const DatasetSplit split = split_dataset(subjects, s.train_fraction, s.seed);
  const fs::path dir = make_run_dir(s.out, s.seed);
  write_file(dir / "config.resolved", resolved_text(s));
  fs::create_directories(dir / "checkpoints");

  std::ofstream log(dir / "logs.jsonl", std::ios::binary);
  const auto on_epoch = [&](const EpochRecord& r) {
    log << to_json_line(r) << "\n";
    log.flush();
    io.progress(epoch_line(r));
  };
  TrainResult trained = train(s.model, s.train, split.train, on_epoch, true);
  for (std::size_t e = 0; e < trained.checkpoints.size(); ++e) {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03zu.ckpt", e);
    save_checkpoint(dir / "checkpoints" / name, trained.checkpoints[e]);
  }
  save_checkpoint(dir / "checkpoints" / "best.ckpt", to_named(trained.best));

  const Variant variant = parse_variant(s.train.variant);
  const Evaluation test = evaluate(trained.best, s.model, variant, split.test, s.train.eval_backend);
  log << to_json_line({trained.best_epoch, "test", test.loss, test.metrics}) << "\n";

  ordered_json j;
  j["version"] = code_version();
  j["variant"] = s.train.variant;
  j["seed"] = s.seed;
  j["best_epoch"] = trained.best_epoch;
  j["train_subjects"] = split.train.size();
  j["test_subjects"] = split.test.size();
  j["test"] = metrics_json(test.metrics, test.loss);
  write_file(dir / "metrics.json", j.dump(2) + "\n");

  if (io.json) {
    ordered_json summary = j;
    summary["run_dir"] = dir.string();
    io.out << summary.dump() << "\n";
  } else {
    io.out << "run " << dir.string() << "\n"
           << "best epoch " << trained.best_epoch << ", test accuracy " << test.metrics.accuracy << ", f1 "
           << test.metrics.f1 << "\n";
  }
  return 0;
}

int cmd_evaluate(RunSettings s, const std::string& run_dir, const std::string& which, const std::string& output,
                 const Io& io) {
  fs::path ckpt = s.checkpoint;
  if (ckpt.empty()) {
    if (run_dir.empty()) throw UsageError("evaluate needs --run or checkpoint");
    ckpt = fs::path(run_dir) / "checkpoints" / "best.ckpt";
  }
  const auto subjects = load_subjects(s, s.seed);
  std::vector<RoiTimeSeries> chosen;
  if (which == "all") {
    chosen = subjects;
  } else {
    DatasetSplit split = split_dataset(subjects, s.train_fraction, s.seed);
    chosen = which == "train" ? split.train : split.test;
  }
  const Variant variant = parse_variant(s.train.variant);
  ModelParams params = init_model(s.model, variant, s.seed);
  assign_named(params, load_checkpoint(ckpt));
  const Evaluation ev = evaluate(params, s.model, variant, chosen, s.train.eval_backend);

  ordered_json j;
  j["version"] = code_version();
  j["checkpoint"] = ckpt.string();
  j["split"] = which;
  j["variant"] = s.train.variant;
  j["seed"] = s.seed;
  j["metrics"] = metrics_json(ev.metrics, ev.loss);
  if (!output.empty()) write_file(output, j.dump(2) + "\n");
  if (io.json || output.empty())
    io.out << j.dump(io.json ? -1 : 2) << "\n";
  else
    io.out << "accuracy " << ev.metrics.accuracy << ", f1 " << ev.metrics.f1 << " (" << output << ")\n";
  return 0;
}

int cmd_ablate(RunSettings s, const Io& io) {
  validate(s.train);
  for (const auto& v : s.variants) parse_variant(v);
  const fs::path dir = make_run_dir(s.out, s.seed);
  write_file(dir / "config.resolved", resolved_text(s));
  std::ofstream log(dir / "logs.jsonl", std::ios::binary);

  std::vector<AblationRow> rows;
  for (const auto& v : s.variants) rows.push_back({v, {}});
  for (const std::uint64_t seed : s.seeds) {
    const auto subjects = load_subjects(s, seed);
    const DatasetSplit split = split_dataset(subjects, s.train_fraction, seed);
    for (auto& row : rows) {
      TrainConfig tcfg = s.train;
      tcfg.seed = seed;
      tcfg.variant = row.variant;
      const auto on_epoch = [&](const EpochRecord& r) {
        ordered_json j = ordered_json::parse(to_json_line(r));
        j["variant"] = row.variant;
        j["seed"] = seed;
        log << j.dump() << "\n";
      };
      const RunResult r = run_variant(s.model, tcfg, split, on_epoch);
      row.runs.push_back(r.test);
      io.progress(row.variant + " seed " + std::to_string(seed) + " test accuracy " +
                  format_number(r.test.accuracy));
    }
  }
  std::ostringstream csv;
  write_ablation_csv(csv, rows);
  write_file(dir / "ablation.csv", csv.str());
  if (io.json) {
    ordered_json j;
    j["run_dir"] = dir.string();
    j["csv"] = csv.str();
    io.out << j.dump() << "\n";
  } else {
    io.out << csv.str();
  }
  return 0;
}

// Nearest-rank percentile of an unsorted sample.
double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

int cmd_scan_bench(const RunSettings& s, const std::string& output, const Io& io) {
  if (s.bench_repeats < 1 || s.bench_width < 1) throw ConfigError("bench_repeats and bench_width must be >= 1");
  std::ostringstream csv;
  csv << "T,backend,median_ns,p10_ns,p90_ns\n";
  using Clock = std::chrono::steady_clock;
  for (const Index t : s.bench_lengths) {
    if (t < 1) throw ConfigError("bench_lengths must be positive");
    CounterRng rng(s.seed, static_cast<std::uint64_t>(t));
    RowMat<double> a(t, s.bench_width), b(t, s.bench_width);
    for (Index i = 0; i < a.size(); ++i) {
      a.data()[i] = rng.uniform(0.5, 1.0);
      b.data()[i] = rng.normal();
    }
    RowMat<double> reference;
    for (const ScanBackend backend : {ScanBackend::kSequential, ScanBackend::kParallel}) {
      std::vector<double> ns;
      RowMat<double> result;
      for (Index r = 0; r < s.bench_repeats; ++r) {
        const auto t0 = Clock::now();
        result = backend == ScanBackend::kSequential ? scan_linear_sequential(a, b)
                                                     : scan_linear_parallel(a, b, {s.chunk, 0});
        ns.push_back(std::chrono::duration<double, std::nano>(Clock::now() - t0).count());
      }
      if (backend == ScanBackend::kSequential) {
        reference = result;
      } else if (!result.isApprox(reference, 1e-8)) {
        throw NumericalError("scan backends disagree at T=" + std::to_string(t));
      }
      csv << t << "," << to_string(backend) << "," << format_number(percentile(ns, 0.5)) << ","
          << format_number(percentile(ns, 0.1)) << "," << format_number(percentile(ns, 0.9)) << "\n";
    }
    io.progress("T=" + std::to_string(t) + " done");
  }
  if (!output.empty()) write_file(output, csv.str());
  if (output.empty() || !io.quiet) io.out << csv.str();
  return 0;
}

int cmd_gradcheck(const RunSettings& s, const Io& io) {
  if (s.gradcheck_seeds < 1) throw ConfigError("gradcheck_seeds must be >= 1");
  std::vector<OpCheckResult> worst;
  for (Index k = 0; k < s.gradcheck_seeds; ++k) {
    const auto results = run_gradcheck_suite(s.seed + static_cast<std::uint64_t>(k));
    if (worst.empty()) {
      worst = results;
      continue;
    }
    for (std::size_t i = 0; i < results.size(); ++i)
      worst[i].max_rel_error = std::max(worst[i].max_rel_error, results[i].max_rel_error);
  }
  const double tol = gradcheck_tolerance();
  bool ok = true;
  ordered_json j;
  j["tolerance"] = tol;
  j["seed"] = s.seed;
  j["seeds"] = s.gradcheck_seeds;
  ordered_json ops = ordered_json::array();
  for (const auto& r : worst) {
    const bool pass = r.max_rel_error < tol;
    ok = ok && pass;
    ops.push_back({{"op", r.op}, {"max_rel_error", r.max_rel_error}, {"pass", pass}});
    if (!io.json && (!io.quiet || !pass)) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%-24s %.3e %s", r.op.c_str(), r.max_rel_error, pass ? "ok" : "FAIL");
      io.out << buf << "\n";
    }
  }
  j["ops"] = ops;
  j["pass"] = ok;
  if (io.json) io.out << j.dump() << "\n";
  return ok ? 0 : 3;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& output, const Io& io) {
  std::vector<fs::path> dirs;
  for (const auto& r : runs) {
    const fs::path p(r);
    if (fs::exists(p / "logs.jsonl")) {
      dirs.push_back(p);
      continue;
    }
    if (!fs::is_directory(p)) throw DataError("not a run directory: " + r);
    std::vector<fs::path> found;
    for (const auto& entry : fs::directory_iterator(p))
      if (fs::exists(entry.path() / "logs.jsonl")) found.push_back(entry.path());
    if (found.empty()) throw DataError("no run logs under " + r);
    std::sort(found.begin(), found.end());
    dirs.insert(dirs.end(), found.begin(), found.end());
  }
  std::ostringstream csv;
  csv << "run,variant,seed,epoch,split,loss,accuracy,precision,recall,f1\n";
  for (const auto& dir : dirs) {
    std::ifstream in(dir / "logs.jsonl");
    std::string line;
    for (int number = 1; std::getline(in, line); ++number) {
      if (trim(line).empty()) continue;
      ordered_json j;
      try {
        j = ordered_json::parse(line);
      } catch (const std::exception&) {
        throw ParseError((dir / "logs.jsonl").string() + ":" + std::to_string(number) + ": invalid JSON");
      }
      csv << dir.filename().string() << "," << j.value("variant", "") << ","
          << (j.contains("seed") ? j["seed"].dump() : "") << "," << j.at("epoch").dump() << ","
          << j.at("split").get<std::string>() << "," << j.at("loss").dump() << "," << j.at("accuracy").dump() << ","
          << j.at("precision").dump() << "," << j.at("recall").dump() << "," << j.at("f1").dump() << "\n";
    }
  }
  if (!output.empty()) write_file(output, csv.str());
  if (output.empty()) io.out << csv.str();
  return 0;
}

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // key -> value, filled by CLI11
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f, const std::vector<std::string>& keys) {
  cmd->add_option("--config", f.config_path, "Config file (key = value lines)");
  cmd->add_option("--set", f.sets, "Override one key: --set key=value (repeatable)");
  for (const auto& key : keys) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    cmd->add_option_function<std::string>(
        flag, [&f, key](const std::string& v) { f.flags[key] = v; }, "Sets config key " + key);
  }
}

RunSettings settings_from(const ConfigFlags& f, const std::string& base_text = {}) {
  std::string text = base_text;
  if (!f.config_path.empty()) text += "\n" + read_file(f.config_path);
  std::vector<std::pair<std::string, std::string>> overrides;
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    overrides.emplace_back(trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }
  for (const auto& kv : f.flags) overrides.push_back(kv);
  return resolve_settings(text, overrides, std::getenv("DYNS_SEED"));
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic latent graph + selective state space classifier"};
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 0;
  bool quiet = false, json = false;
  app.add_option("--threads", threads, "Worker thread cap (0 = hardware)");
  app.add_flag("--quiet", quiet, "Suppress progress output");
  app.add_flag("--json", json, "Machine-readable output");
  app.set_version_flag("--version", code_version());

  const std::vector<std::string> common = {"seed", "preset", "data", "out", "variant", "epochs", "lr", "backend"};
  ConfigFlags f;

  auto* gen = app.add_subcommand("generate-data", "Write a synthetic dataset (CSV per subject + manifest)");
  add_config_flags(gen, f, {"seed", "preset", "out", "rois", "steps", "subjects_per_class", "separation"});
  auto* trn = app.add_subcommand("train", "Train one variant and write a run directory");
  add_config_flags(trn, f, common);
  auto* evl = app.add_subcommand("evaluate", "Evaluate a checkpoint and print metrics JSON");
  std::string run_dir, which = "test", output;
  add_config_flags(evl, f, {"seed", "data", "variant", "backend", "checkpoint"});
  evl->add_option("--run", run_dir, "Run directory (config.resolved + checkpoints/best.ckpt)");
  evl->add_option("--split", which, "test, train or all")->check(CLI::IsMember({"test", "train", "all"}));
  evl->add_option("--output", output, "Also write the metrics JSON here");
  auto* abl = app.add_subcommand("ablate", "Train every variant over every seed; write ablation.csv");
  add_config_flags(abl, f, {"seed", "preset", "data", "out", "epochs", "lr", "variants", "seeds"});
  auto* bench = app.add_subcommand("scan-bench", "Time the scan backends; CSV output");
  add_config_flags(bench, f, {"seed", "bench_lengths", "bench_width", "bench_repeats", "chunk"});
  bench->add_option("--output", output, "Write the CSV here");
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op");
  add_config_flags(gc, f, {"seed", "gradcheck_seeds"});
  auto* rep = app.add_subcommand("report", "Collect run logs into one CSV");
  std::vector<std::string> runs;
  rep->add_option("runs", runs, "Run directories or their parent")->required();
  rep->add_option("--output", output, "Write the CSV here");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << code_version() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  const Io io{out, err, quiet, json};
  try {
    if (threads < 0) throw UsageError("--threads must be >= 0");
    set_thread_limit(threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
    if (*gen) return cmd_generate(settings_from(f), io);
    if (*trn) return cmd_train(settings_from(f), io);
    if (*evl) {
      const std::string base = run_dir.empty() ? std::string() : read_file(fs::path(run_dir) / "config.resolved");
      return cmd_evaluate(settings_from(f, base), run_dir, which, output, io);
    }
    if (*abl) return cmd_ablate(settings_from(f), io);
    if (*bench) return cmd_scan_bench(settings_from(f), output, io);
    if (*gc) return cmd_gradcheck(settings_from(f), io);
    if (*rep) return cmd_report(runs, output, io);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace dyns
