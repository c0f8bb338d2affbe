#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "dyns/data_pipeline.hpp"
#include "dyns/training_eval.hpp"

namespace dyns {

/// Build identifier written into every run directory.
std::string code_version();

/// Every tunable of the pipeline. Defaults come from the library structs of
/// the selected preset ("standard" or "desk").
struct RunSettings {
  std::string preset = "standard";
  std::uint64_t seed = 0;
  std::string data;  // dataset manifest; empty means synthetic data
  std::string out = "run";
  std::string checkpoint;

  Index rois = 16;
  Index steps = 128;
  Index subjects_per_class = 40;
  Index regimes = 2;
  double separation = 0.6;
  double switch_rate = 4.0;
  double noise_std = 0.3;
  double smoothness = 0.5;
  bool null_signal = false;
  double train_fraction = 0.8;

  ModelConfig model;
  TrainConfig train;

  std::vector<std::string> variants{"full", "static_graph", "frozen_llm"};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  std::vector<Index> bench_lengths{256, 512, 1024, 2048, 4096};
  Index bench_width = 16;
  Index bench_repeats = 5;
  Index chunk = 64;
  Index gradcheck_seeds = 1;
};

RunSettings preset_settings(const std::string& preset);

/// Documented configuration keys, in the order config.resolved lists them.
std::vector<std::string> config_keys();

/// Sets one key from its text form; unknown keys and bad values throw ConfigError.
void set_config_value(RunSettings& s, const std::string& key, const std::string& value);
std::string get_config_value(const RunSettings& s, const std::string& key);

/// "key = value" lines; '#' starts a comment. Returns pairs in file order.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);

/// Layers, lowest first: preset defaults, DYNS_SEED, file, --set, flags.
/// The preset itself is taken from the highest layer that names it.
RunSettings resolve_settings(const std::string& config_text,
                             const std::vector<std::pair<std::string, std::string>>& overrides,
                             const char* env_seed);

/// config.resolved contents (every key except `out`, plus a version comment).
std::string resolved_text(const RunSettings& s);

SynthSpec synth_spec(const RunSettings& s, std::uint64_t seed);

/// Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace dyns
