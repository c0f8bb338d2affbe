#include "dyns/training_eval.hpp"

#include <cmath>
#include <ostream>

#include "json.hpp"

namespace dyns {

Tensor cross_entropy(const Tensor& logits, Label label) {
  if (logits.numel() != 2) throw DimensionError("cross_entropy expects 2 logits, got " + shape_to_string(logits.shape()));
  const auto& l = logits.data();
  const Real top = std::max(l[0], l[1]);
  const Real lse = top + std::log(std::exp(l[0] - top) + std::exp(l[1] - top));
  const auto y = static_cast<Index>(label);
  Vec<Real> prob(2);
  prob << std::exp(l[0] - lse), std::exp(l[1] - lse);
  prob[y] -= Real(1);
  // softplus(l_other - l_y) avoids cancellation when the loss is tiny
  const Real d = l[1 - y] - l[y];
  const Real loss = d > 0 ? d + std::log1p(std::exp(-d)) : std::log1p(std::exp(d));
  return record_op<Real>(Tensor::scalar(loss), {&logits},
                         [prob](const Vec<Real>& grad, Tape<Real>::Sink& sink) { sink.add(0, grad[0] * prob); });
}

double f1_score(double precision, double recall) {
  return precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

Metrics compute_metrics(Index tp, Index fp, Index fn, Index tn) {
  if (tp < 0 || fp < 0 || fn < 0 || tn < 0) throw ContractError("confusion counts must be non-negative");
  auto ratio = [](Index num, Index den) { return den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 0.0; };
  Metrics m{tp, fp, fn, tn};
  m.accuracy = ratio(tp + tn, tp + fp + fn + tn);
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

Metrics compute_metrics(const std::vector<Label>& truth, const std::vector<Label>& predicted) {
  if (truth.size() != predicted.size()) throw ContractError("label and prediction counts differ");
  Index tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool pos = truth[i] == Label::kASD, said_pos = predicted[i] == Label::kASD;
    tp += pos && said_pos;
    fp += !pos && said_pos;
    fn += pos && !said_pos;
    tn += !pos && !said_pos;
  }
  return compute_metrics(tp, fp, fn, tn);
}

void Adam::step(const std::vector<std::string>& names, const std::vector<Tensor*>& params,
                const std::vector<Vec<Real>>& grads) {
  if (params.size() != grads.size() || names.size() != params.size())
    throw ContractError("adam: parameter and gradient lists differ in length");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != params[i]->numel())
      throw ContractError("adam: gradient of " + names[i] + " has the wrong size");
    for (Index j = 0; j < grads[i].size(); ++j)
      if (!std::isfinite(static_cast<double>(grads[i][j])))
        throw NumericalError("non-finite gradient for " + names[i] + " at index " + std::to_string(j) + " (step " +
                             std::to_string(t_ + 1) + ")");
  }
  if (m_.empty()) {
    for (const auto& g : grads) {
      m_.push_back(Vec<double>::Zero(g.size()));
      v_.push_back(Vec<double>::Zero(g.size()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const Vec<double> g = grads[i].template cast<double>();
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    const Vec<double> update =
        cfg_.learning_rate * (m_[i] / c1).array() / ((v_[i] / c2).array().sqrt() + cfg_.eps);
    params[i]->mutable_data() -= update.cast<Real>();
  }
}

void GradientAccumulator::add(const std::vector<Vec<Real>>& grads) {
  if (sum_.empty()) {
    sum_ = grads;
  } else {
    if (grads.size() != sum_.size()) throw ContractError("accumulator: gradient list length changed");
    for (std::size_t i = 0; i < grads.size(); ++i) sum_[i] += grads[i];
  }
  ++count_;
}

std::vector<Vec<Real>> GradientAccumulator::mean() const {
  if (count_ == 0) throw ContractError("accumulator is empty");
  std::vector<Vec<Real>> out = sum_;
  for (auto& g : out) g /= static_cast<Real>(count_);
  return out;
}

void GradientAccumulator::reset() {
  sum_.clear();
  count_ = 0;
}

TrainConfig desk_train_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.adam.learning_rate = 1e-3;
  cfg.seed = seed;
  return cfg;
}

void validate(const TrainConfig& cfg) {
  if (!(cfg.adam.learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1, got " + std::to_string(cfg.epochs));
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.accumulation_steps < 1) throw ConfigError("accumulation_steps must be >= 1");
  if (!(cfg.adam.beta1 >= 0 && cfg.adam.beta1 < 1 && cfg.adam.beta2 >= 0 && cfg.adam.beta2 < 1 && cfg.adam.eps > 0))
    throw ConfigError("invalid Adam hyperparameters");
  if (!(cfg.validation_fraction > 0 && cfg.validation_fraction < 1))
    throw ConfigError("validation_fraction must lie in (0, 1)");
  parse_variant(cfg.variant);
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["loss"] = r.loss;
  j["accuracy"] = r.metrics.accuracy;
  j["precision"] = r.metrics.precision;
  j["recall"] = r.metrics.recall;
  j["f1"] = r.metrics.f1;
  return j.dump();
}

namespace {

Label require_label(const RoiTimeSeries& s) {
  if (!s.label) throw EvaluationError("subject " + s.subject_id + " has no label");
  return *s.label;
}

}  // namespace

Evaluation evaluate(const ModelParams& params, const ModelConfig& cfg, const Variant& variant,
                    const std::vector<RoiTimeSeries>& subjects, ScanBackend backend) {
  if (subjects.empty()) throw EvaluationError("cannot evaluate an empty split");
  const auto n = subjects.size();
  std::vector<Label> truth(n), predicted(n);
  std::vector<double> losses(n), confidence(n);
  for (std::size_t i = 0; i < n; ++i) truth[i] = require_label(subjects[i]);
  parallel_for(static_cast<Index>(n), [&](Index i) {
    const auto k = static_cast<std::size_t>(i);
    const Tensor logits = model_forward(params, cfg, variant, normalize_zscore(subjects[k]).values, {}, backend);
    const Prediction p = classify(logits);
    predicted[k] = p.label;
    confidence[k] = p.confidence;
    losses[k] = static_cast<double>(cross_entropy(logits, truth[k]).item());
  });
  Evaluation ev;
  ev.metrics = compute_metrics(truth, predicted);
  double total = 0;
  for (double l : losses) total += l;
  ev.loss = total / static_cast<double>(n);
  ev.predictions = std::move(predicted);
  ev.confidence = std::move(confidence);
  return ev;
}

BatchGradient batch_gradient(const ModelParams& params, const ModelConfig& cfg, const Variant& variant,
                             const std::vector<const RoiTimeSeries*>& batch, std::uint64_t dropout_seed,
                             std::uint64_t dropout_stream) {
  if (batch.empty()) throw ContractError("empty batch");
  const auto n = batch.size();
  std::vector<std::vector<Vec<Real>>> per_sample(n);
  std::vector<double> losses(n);
  BatchGradient out;
  {
    ModelParams probe = params;
    probe.visit([&](const std::string& name, Tensor&) {
      if (is_trainable(name, variant)) out.names.push_back(name);
    });
  }
  parallel_for(static_cast<Index>(n), [&](Index i) {
    const auto k = static_cast<std::size_t>(i);
    const Label label = require_label(*batch[k]);
    Tape<Real> tape;
    ModelParams local = params;
    local.visit([&](const std::string& name, Tensor& t) {
      if (is_trainable(name, variant)) t = tape.watch(t);
    });
    CounterRng rng = CounterRng(dropout_seed, dropout_stream).split(static_cast<std::uint64_t>(i));
    const DropoutContext ctx{true, &rng};
    const Tensor loss = cross_entropy(model_forward(local, cfg, variant, normalize_zscore(*batch[k]).values, ctx), label);
    const Gradients<Real> grads = tape.backward(loss);
    local.visit([&](const std::string& name, Tensor& t) {
      if (is_trainable(name, variant)) per_sample[k].push_back(grads[t].data());
    });
    losses[k] = static_cast<double>(loss.item());
  });
  out.grads = std::move(per_sample[0]);
  for (std::size_t k = 1; k < n; ++k)
    for (std::size_t j = 0; j < out.grads.size(); ++j) out.grads[j] += per_sample[k][j];
  for (auto& g : out.grads) g /= static_cast<Real>(n);
  for (double l : losses) out.loss += l;
  out.loss /= static_cast<double>(n);
  return out;
}

TrainResult train(const ModelConfig& cfg, const TrainConfig& tcfg, const std::vector<RoiTimeSeries>& train_set,
                  const EpochCallback& on_epoch, bool keep_checkpoints) {
  validate(tcfg);
  const Variant variant = parse_variant(tcfg.variant);
  const DatasetSplit carve = split_dataset(train_set, 1.0 - tcfg.validation_fraction, tcfg.seed ^ 0x76616cULL);
  const std::vector<RoiTimeSeries>& fit = carve.train;
  const std::vector<RoiTimeSeries>& val = carve.test;

  ModelParams params = init_model(cfg, variant, tcfg.seed);
  std::vector<std::string> names;
  std::vector<Tensor*> slots;
  params.visit([&](const std::string& name, Tensor& t) {
    if (is_trainable(name, variant)) {
      names.push_back(name);
      slots.push_back(&t);
    }
  });

  TrainResult result;
  auto emit = [&](const EpochRecord& r) {
    result.log.push_back(r);
    if (on_epoch) on_epoch(r);
  };
  double best_acc = -1, best_loss = 0;
  auto consider = [&](Index epoch) {
    const Evaluation ev = evaluate(params, cfg, variant, val, tcfg.eval_backend);
    emit({epoch, "val", ev.loss, ev.metrics});
    if (ev.metrics.accuracy > best_acc || (ev.metrics.accuracy == best_acc && ev.loss < best_loss)) {
      best_acc = ev.metrics.accuracy;
      best_loss = ev.loss;
      result.best = params;
      result.best_epoch = epoch;
    }
    if (keep_checkpoints) result.checkpoints.push_back(to_named(params));
  };
  consider(0);

  Adam adam(tcfg.adam);
  GradientAccumulator acc;
  std::vector<std::size_t> order(fit.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto batch = static_cast<std::size_t>(tcfg.batch_size);
  for (Index epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    CounterRng shuffle(tcfg.seed, 1000 + static_cast<std::uint64_t>(epoch));
    shuffle_in_place(order, shuffle);
    double loss_sum = 0;
    std::uint64_t micro = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch, ++micro) {
      std::vector<const RoiTimeSeries*> mb;
      for (std::size_t i = begin; i < std::min(order.size(), begin + batch); ++i) mb.push_back(&fit[order[i]]);
      const BatchGradient bg =
          batch_gradient(params, cfg, variant, mb, tcfg.seed, (static_cast<std::uint64_t>(epoch) << 32) | micro);
      loss_sum += bg.loss * static_cast<double>(mb.size());
      acc.add(bg.grads);
      if (acc.count() == tcfg.accumulation_steps || begin + batch >= order.size()) {
        adam.step(names, slots, acc.mean());
        acc.reset();
      }
    }
    const Evaluation fit_eval = evaluate(params, cfg, variant, fit, tcfg.eval_backend);
    emit({epoch, "train", loss_sum / static_cast<double>(fit.size()), fit_eval.metrics});
    consider(epoch);
  }
  return result;
}

RunResult run_variant(const ModelConfig& cfg, const TrainConfig& tcfg, const DatasetSplit& split,
                      const EpochCallback& on_epoch) {
  RunResult r;
  r.training = train(cfg, tcfg, split.train, on_epoch);
  const Evaluation ev = evaluate(r.training.best, cfg, parse_variant(tcfg.variant), split.test, tcfg.eval_backend);
  r.test = ev.metrics;
  r.test_loss = ev.loss;
  return r;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "variant,seeds";
  for (const char* m : {"accuracy", "precision", "recall", "f1"}) out << ',' << m << "_mean," << m << "_std";
  out << '\n';
  for (const auto& row : rows) {
    out << row.variant << ',' << row.runs.size();
    for (double Metrics::*field : {&Metrics::accuracy, &Metrics::precision, &Metrics::recall, &Metrics::f1}) {
      double mean = 0, var = 0;
      const double n = static_cast<double>(row.runs.size());
      for (const auto& m : row.runs) mean += m.*field;
      mean = n > 0 ? mean / n : 0;
      for (const auto& m : row.runs) var += (m.*field - mean) * (m.*field - mean);
      const double sd = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
      out << ',' << mean << ',' << sd;
    }
    out << '\n';
  }
}

}  // namespace dyns
