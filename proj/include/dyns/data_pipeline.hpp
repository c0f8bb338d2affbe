#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dyns/rng.hpp"
#include "dyns/tensor.hpp"

namespace dyns {

/// Class index doubles as the logit index: 0 = ASD (positive class), 1 = TC.
enum class Label : int { kASD = 0, kTC = 1 };

std::string to_string(Label label);
Label parse_label(const std::string& name);

struct RoiTimeSeries {
  std::string subject_id;
  Tensor values;  // [T, N], rows are time points
  std::optional<Label> label;

  Index steps() const { return values.dim(0); }
  Index rois() const { return values.dim(1); }
};

/// Reads a CSV with header roi_0,...,roi_{N-1} and one row per time point.
RoiTimeSeries load_roi_csv(const std::filesystem::path& path);
/// Writes a [T, N] tensor in the load_roi_csv format. Values use the shortest
/// representation that round-trips exactly.
void write_roi_csv(const std::filesystem::path& path, const Tensor& values);

/// Per-ROI z-score with the population (1/T) standard deviation; constant
/// columns become all zeros.
RoiTimeSeries normalize_zscore(const RoiTimeSeries& ts);

struct SynthSpec {
  Index rois = 16;
  Index steps = 128;
  Index subjects_per_class = 40;
  /// state_graphs[c][r]: connectivity template of regime r for class c.
  std::vector<std::vector<Eigen::MatrixXd>> state_graphs;
  /// Expected number of regime switches per scan.
  double switch_rate = 4.0;
  double noise_std = 0.3;
  /// Lag-one autocorrelation of the latent Gaussian process.
  double temporal_smoothness = 0.5;
  std::uint64_t seed = 0;
  /// Permits identical class templates (the no-signal control dataset).
  bool allow_identical_classes = false;
};

/// Block-structured templates: each class has `regimes` templates; regime r of
/// class c couples a distinct block of ROIs with within-block correlation
/// `separation`. separation = 0 gives identity templates for every class.
std::vector<std::vector<Eigen::MatrixXd>> planted_templates(Index rois, Index regimes, double separation);
/// Identical templates for both classes (no class signal).
std::vector<std::vector<Eigen::MatrixXd>> null_templates(Index rois, Index regimes, double separation);

/// Default planted spec: N=16, T=128, 40 subjects per class, 2 regimes/class.
SynthSpec default_synth_spec(std::uint64_t seed, double separation = 0.6);

/// Validates a spec; throws SpecError on violations.
void validate(const SynthSpec& spec);

/// Nearest correlation-like PD matrix: eigenvalues clipped at `floor`, then
/// rescaled to unit diagonal.
Eigen::MatrixXd nearest_pd_correlation(const Eigen::MatrixXd& m, double floor = 1e-6);

/// Subjects ordered class-major (all ASD, then all TC); ids are sub_0000...
std::vector<RoiTimeSeries> synth_generate(const SynthSpec& spec);

struct DatasetSplit {
  std::vector<RoiTimeSeries> train;
  std::vector<RoiTimeSeries> test;
  std::uint64_t seed = 0;
};

/// Stratified subject-level shuffle split. Each class contributes
/// round(train_fraction * count) subjects to train, at least one to each side.
DatasetSplit split_dataset(const std::vector<RoiTimeSeries>& subjects, double train_fraction, std::uint64_t seed);

/// Deterministic Fisher-Yates shuffle driven by CounterRng.
template <typename T>
void shuffle_in_place(std::vector<T>& items, CounterRng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

// Dataset directory: one CSV per subject plus manifest.json, an array of
// {"subject_id", "label", "path"} with paths relative to the manifest.
struct ManifestEntry {
  std::string subject_id;
  std::optional<Label> label;
  std::string path;
};

void write_dataset(const std::filesystem::path& dir, const std::vector<RoiTimeSeries>& subjects);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest);
/// Loads every subject listed in the manifest (labels from the manifest).
std::vector<RoiTimeSeries> load_dataset(const std::filesystem::path& manifest);

/// Upper-triangle Pearson correlations (static connectivity features).
Eigen::VectorXd static_correlation_features(const Tensor& values);

/// Nearest-class-centroid probe on static correlation features; returns test accuracy.
double linear_probe_accuracy(const DatasetSplit& split);

}  // namespace dyns
