#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "dyns/pipeline.hpp"

namespace dyns {

/// -log softmax(logits)[label] for 2 logits, fused and stabilized.
Tensor cross_entropy(const Tensor& logits, Label label);

/// Positive class is ASD. Ratios with a zero denominator are 0.
struct Metrics {
  Index tp = 0, fp = 0, fn = 0, tn = 0;
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

Metrics compute_metrics(Index tp, Index fp, Index fn, Index tn);
Metrics compute_metrics(const std::vector<Label>& truth, const std::vector<Label>& predicted);
/// 2PR / (P + R), 0 when P + R == 0.
double f1_score(double precision, double recall);

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over an ordered parameter list.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  /// Throws NumericalError (naming the parameter) on a non-finite gradient,
  /// before touching any parameter.
  void step(const std::vector<std::string>& names, const std::vector<Tensor*>& params,
            const std::vector<Vec<Real>>& grads);
  Index steps() const { return t_; }

 private:
  AdamConfig cfg_;
  Index t_ = 0;
  std::vector<Vec<double>> m_, v_;
};

/// Averages k micro-batch gradients (each already a per-sample mean).
class GradientAccumulator {
 public:
  void add(const std::vector<Vec<Real>>& grads);
  Index count() const { return count_; }
  std::vector<Vec<Real>> mean() const;
  void reset();

 private:
  std::vector<Vec<Real>> sum_;
  Index count_ = 0;
};

struct TrainConfig {
  AdamConfig adam;
  Index epochs = 10;
  Index batch_size = 8;
  Index accumulation_steps = 1;
  std::uint64_t seed = 0;
  std::string variant = "full";
  double validation_fraction = 0.1;
  ScanBackend eval_backend = ScanBackend::kSequential;
};

/// lr 1e-3, otherwise the defaults above.
TrainConfig desk_train_config(std::uint64_t seed);

void validate(const TrainConfig& cfg);

struct EpochRecord {
  Index epoch = 0;
  std::string split;
  double loss = 0;
  Metrics metrics;
};

std::string to_json_line(const EpochRecord& record);

struct Evaluation {
  Metrics metrics;
  double loss = 0;
  std::vector<Label> predictions;
  std::vector<double> confidence;
};

/// Inference over a labelled split, parallel across subjects.
Evaluation evaluate(const ModelParams& params, const ModelConfig& cfg, const Variant& variant,
                    const std::vector<RoiTimeSeries>& subjects, ScanBackend backend = ScanBackend::kSequential);

/// Mean loss and averaged gradients (trainable parameters in visit order) of a batch.
struct BatchGradient {
  double loss = 0;
  std::vector<std::string> names;
  std::vector<Vec<Real>> grads;
};
BatchGradient batch_gradient(const ModelParams& params, const ModelConfig& cfg, const Variant& variant,
                             const std::vector<const RoiTimeSeries*>& batch, std::uint64_t dropout_seed,
                             std::uint64_t dropout_stream);

using EpochCallback = std::function<void(const EpochRecord&)>;

struct TrainResult {
  ModelParams best;
  Index best_epoch = 0;
  std::vector<EpochRecord> log;
  /// Checkpoint of every epoch, in order (epoch 0 is the initial model).
  std::vector<std::vector<NamedTensor>> checkpoints;
};

/// Trains on `train` with a stratified validation carve-out and returns the
/// best epoch by validation accuracy (ties: lower validation loss).
TrainResult train(const ModelConfig& cfg, const TrainConfig& tcfg, const std::vector<RoiTimeSeries>& train_set,
                  const EpochCallback& on_epoch = {}, bool keep_checkpoints = false);

struct RunResult {
  Metrics test;
  double test_loss = 0;
  TrainResult training;
};

/// Trains the named variant on split.train and evaluates it on split.test.
RunResult run_variant(const ModelConfig& cfg, const TrainConfig& tcfg, const DatasetSplit& split,
                      const EpochCallback& on_epoch = {});

struct AblationRow {
  std::string variant;
  std::vector<Metrics> runs;  // one per seed
};

/// variant, seeds, then mean and sample std of accuracy, precision, recall, f1.
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

}  // namespace dyns
