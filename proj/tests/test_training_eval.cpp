#include <cmath>
#include <sstream>

#include "dyns/data_pipeline.hpp"
#include "dyns/tape.hpp"
#include "dyns/training_eval.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace dyns;
using dyns::test::bit_equal;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.rois = 4;
  cfg.encoder.d_lat = 8;
  cfg.ssm.d_h = 4;
  cfg.surrogate.d_k = 8;
  cfg.surrogate.heads = 2;
  cfg.surrogate.blocks = 1;
  cfg.surrogate.vocab = 8;
  cfg.surrogate.context = 8;
  cfg.surrogate.brain_tokens = 2;
  cfg.surrogate.ffn_mult = 2;
  cfg.surrogate.lora = {2, 4.0, 0.1};
  cfg.prompt = {1, 5, 3};
  return cfg;
}

std::vector<RoiTimeSeries> tiny_data(std::uint64_t seed, Index per_class = 8) {
  SynthSpec spec;
  spec.rois = 4;
  spec.steps = 24;
  spec.subjects_per_class = per_class;
  spec.state_graphs = planted_templates(4, 1, 0.6);
  spec.seed = seed;
  return synth_generate(spec);
}

TrainConfig tiny_train(std::uint64_t seed, const std::string& variant = "full") {
  TrainConfig t = desk_train_config(seed);
  t.epochs = 2;
  t.batch_size = 4;
  t.variant = variant;
  t.validation_fraction = 0.25;
  return t;
}

bool same_log(const std::vector<EpochRecord>& a, const std::vector<EpochRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (to_json_line(a[i]) != to_json_line(b[i])) return false;
  return true;
}

}  // namespace

TEST_SUITE("training_eval") {
  TEST_CASE("cross_entropy examples") {
    CHECK(std::abs(cross_entropy(Tensor::from({2}, {0, 0}), Label::kTC).item() - std::log(2.0)) < 1e-15);
    const double tiny = cross_entropy(Tensor::from({2}, {10, -10}), Label::kASD).item();
    CHECK(std::abs(tiny - std::log1p(std::exp(-20.0))) < 1e-22);
    CHECK(std::abs(tiny - 2.06e-9) < 1e-11);
    CHECK(std::isfinite(cross_entropy(Tensor::from({2}, {1000, -1000}), Label::kASD).item()));
    CHECK_THROWS_AS(cross_entropy(Tensor::zeros({3}), Label::kTC), DimensionError);
  }

  TEST_CASE("cross_entropy gradient is softmax minus one-hot") {
    CounterRng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      const double l0 = rng.normal() * 4, l1 = rng.normal() * 4;
      for (const Label y : {Label::kTC, Label::kASD}) {
        Tape<Real> tape;
        const Tensor logits = tape.watch(Tensor::from({2}, {l0, l1}));
        const Tensor g = tape.backward(cross_entropy(logits, y))[logits];
        const double p1 = 1 / (1 + std::exp(l0 - l1));
        const double want0 = (1 - p1) - (y == Label::kASD), want1 = p1 - (y == Label::kTC);
        CHECK(std::abs(g.data()[0] - want0) < 1e-14);
        CHECK(std::abs(g.data()[1] - want1) < 1e-14);
      }
    }
  }

  TEST_CASE("metrics examples") {
    const Metrics m = compute_metrics(8, 2, 2, 8);
    CHECK(m.accuracy == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(m.precision == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(m.recall == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(m.f1 == doctest::Approx(0.8).epsilon(1e-15));

    CHECK(std::abs(f1_score(0.8022, 0.6102) - 0.6931) < 5e-4);

    std::vector<Label> truth(20, Label::kTC), all_tc(20, Label::kTC);
    for (int i = 0; i < 10; ++i) truth[i] = Label::kASD;
    const Metrics none = compute_metrics(truth, all_tc);
    CHECK(none.accuracy == 0.5);
    CHECK(none.precision == 0);
    CHECK(none.recall == 0);
    CHECK(none.f1 == 0);
  }

  TEST_CASE("metrics identities over random confusion matrices") {
    CounterRng rng(2);
    for (int trial = 0; trial < 500; ++trial) {
      const Index tp = rng.below(30), fp = rng.below(30), fn = rng.below(30), tn = rng.below(30);
      const Metrics m = compute_metrics(tp, fp, fn, tn);
      for (const double v : {m.accuracy, m.precision, m.recall, m.f1}) {
        CHECK(v >= 0);
        CHECK(v <= 1);
      }
      CHECK(m.f1 <= std::max(m.precision, m.recall) + 1e-15);
      CHECK(m.f1 >= std::min(m.precision, m.recall) - 1e-15);
      if (tp + fp + fn > 0) CHECK(std::abs(m.f1 - 2.0 * double(tp) / double(2 * tp + fp + fn)) < 1e-14);
    }
  }

  TEST_CASE("Adam: first step moves each coordinate by about lr") {
    Tensor p = Tensor::from({4}, {1, -2, 3, 0.5});
    const Tensor before = p;
    Adam adam({1e-3, 0.9, 0.999, 1e-8});
    Vec<Real> g(4);
    g << 0.3, -7, 1e-2, 0;
    adam.step({"p"}, {&p}, {g});
    for (Index i = 0; i < 3; ++i) {
      const double moved = before.data()[i] - p.data()[i];
      CHECK(std::abs(std::abs(moved) - 1e-3) < 1e-8);
      CHECK((moved > 0) == (g[i] > 0));
    }
    CHECK(p.data()[3] == before.data()[3]);
    CHECK(adam.steps() == 1);

    Tensor q = Tensor::from({2}, {1, 2});
    Adam idle({1e-3, 0.9, 0.999, 1e-8});
    for (int i = 0; i < 5; ++i) idle.step({"q"}, {&q}, {Vec<Real>::Zero(2)});
    CHECK(bit_equal(q, Tensor::from({2}, {1, 2})));
  }

  TEST_CASE("Adam rejects a non-finite gradient before touching parameters") {
    Tensor a = Tensor::from({2}, {1, 2}), b = Tensor::from({2}, {3, 4});
    Adam adam({1e-3, 0.9, 0.999, 1e-8});
    Vec<Real> ga(2), gb(2);
    ga << 1, 1;
    gb << 1, std::nan("");
    try {
      adam.step({"enc.weight", "ssm.w_b"}, {&a, &b}, {ga, gb});
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("ssm.w_b") != std::string::npos);
    }
    CHECK(bit_equal(a, Tensor::from({2}, {1, 2})));
    CHECK(bit_equal(b, Tensor::from({2}, {3, 4})));
    CHECK(adam.steps() == 0);
  }

  TEST_CASE("accumulating four micro-batches equals one batch of their union") {
    ModelConfig cfg = tiny_config();
    cfg.surrogate.lora.dropout = 0;
    const Variant variant = parse_variant("full");
    const ModelParams init = init_model(cfg, variant, 3);
    const auto data = tiny_data(4, 4);
    std::vector<const RoiTimeSeries*> all;
    for (const auto& s : data) all.push_back(&s);

    const BatchGradient whole = batch_gradient(init, cfg, variant, all, 0, 0);
    GradientAccumulator acc;
    for (std::size_t k = 0; k < 4; ++k)
      acc.add(batch_gradient(init, cfg, variant, {all.begin() + 2 * k, all.begin() + 2 * k + 2}, 0, k).grads);
    CHECK(acc.count() == 4);

    auto step = [&](const std::vector<Vec<Real>>& grads) {
      ModelParams p = init;
      std::vector<Tensor*> slots;
      p.visit([&](const std::string& name, Tensor& t) {
        if (is_trainable(name, variant)) slots.push_back(&t);
      });
      Adam({1e-3, 0.9, 0.999, 1e-8}).step(whole.names, slots, grads);
      return to_named(p);
    };
    const auto a = step(whole.grads), b = step(acc.mean());
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
      worst = std::max(worst, dyns::test::max_abs_diff(a[i].value, b[i].value));
    CHECK(worst < 1e-12);
  }

  TEST_CASE("train config validation") {
    TrainConfig t = tiny_train(1);
    CHECK_NOTHROW(validate(t));
    t.epochs = 0;
    CHECK_THROWS_AS(validate(t), ConfigError);
    t = tiny_train(1, "bogus");
    CHECK_THROWS_AS(validate(t), ConfigError);
    t = tiny_train(1);
    t.adam.learning_rate = 0;
    CHECK_THROWS_AS(validate(t), ConfigError);
    t = tiny_train(1);
    t.batch_size = 0;
    CHECK_THROWS_AS(validate(t), ConfigError);
  }

  TEST_CASE("evaluate refuses empty or unlabelled splits") {
    const ModelConfig cfg = tiny_config();
    const Variant v = parse_variant("full");
    const ModelParams p = init_model(cfg, v, 1);
    CHECK_THROWS_AS(evaluate(p, cfg, v, {}), EvaluationError);
    auto data = tiny_data(1, 2);
    data[1].label.reset();
    CHECK_THROWS_AS(evaluate(p, cfg, v, data), EvaluationError);
  }

  TEST_CASE("evaluate is deterministic and agrees across scan backends") {
    const ModelConfig cfg = tiny_config();
    const Variant v = parse_variant("full");
    const ModelParams p = init_model(cfg, v, 2);
    const auto data = tiny_data(2, 4);
    const Evaluation a = evaluate(p, cfg, v, data), b = evaluate(p, cfg, v, data);
    CHECK(a.loss == b.loss);
    CHECK(a.predictions == b.predictions);
    const Evaluation c = evaluate(p, cfg, v, data, ScanBackend::kParallel);
    CHECK(std::abs(a.loss - c.loss) < 1e-10);
    for (const double conf : a.confidence) {
      CHECK(conf >= 0.5);
      CHECK(conf <= 1);
    }
  }

  TEST_CASE("JSON log lines carry the documented keys") {
    const EpochRecord r{3, "val", 0.25, compute_metrics(8, 2, 2, 8)};
    const auto j = nlohmann::json::parse(to_json_line(r));
    CHECK(j.size() == 7);
    CHECK(j.at("epoch") == 3);
    CHECK(j.at("split") == "val");
    CHECK(j.at("loss") == 0.25);
    for (const char* key : {"accuracy", "precision", "recall", "f1"}) CHECK(j.at(key).get<double>() == doctest::Approx(0.8));
    CHECK(to_json_line(r).find('\n') == std::string::npos);
  }

  TEST_CASE("ablation CSV lists mean and sample std per metric") {
    std::ostringstream out;
    write_ablation_csv(out, {{"full", {compute_metrics(8, 2, 2, 8), compute_metrics(10, 0, 0, 10)}},
                             {"static_graph", {compute_metrics(5, 5, 5, 5)}}});
    std::istringstream in(out.str());
    std::string header, full, stat;
    std::getline(in, header);
    std::getline(in, full);
    std::getline(in, stat);
    CHECK(header ==
          "variant,seeds,accuracy_mean,accuracy_std,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std");
    CHECK(full.rfind("full,2,0.9,", 0) == 0);
    const double sd = std::stod(full.substr(11, full.find(',', 11) - 11));
    CHECK(std::abs(sd - 0.2 / std::sqrt(2.0)) < 1e-5);
    CHECK(stat == "static_graph,1,0.5,0,0.5,0,0.5,0,0.5,0");
  }

  TEST_CASE("training is deterministic and keeps one checkpoint per epoch") {
    const ModelConfig cfg = tiny_config();
    const auto data = tiny_data(5);
    const TrainConfig t = tiny_train(7);
    const TrainResult a = train(cfg, t, data, {}, true);
    const TrainResult b = train(cfg, t, data, {}, true);
    CHECK(same_log(a.log, b.log));
    REQUIRE(a.checkpoints.size() == 3);
    for (std::size_t e = 0; e < a.checkpoints.size(); ++e)
      CHECK(checksum(a.checkpoints[e]) == checksum(b.checkpoints[e]));
    ModelParams init = init_model(cfg, parse_variant("full"), 7);
    CHECK(checksum(a.checkpoints[0]) == checksum(to_named(init)));
    CHECK(checksum(a.checkpoints[1]) != checksum(a.checkpoints[0]));
    // val at epoch 0, then train and val per epoch
    CHECK(a.log.size() == 5);
    CHECK(a.log[0].split == "val");
    CHECK(a.log[1].split == "train");
  }

  TEST_CASE("frozen_llm matches full at epoch 0 and never moves adapters or frozen weights") {
    const ModelConfig cfg = tiny_config();
    const auto data = tiny_data(6);
    const TrainResult full = train(cfg, tiny_train(3, "full"), data, {}, true);
    const TrainResult frozen = train(cfg, tiny_train(3, "frozen_llm"), data, {}, true);
    CHECK(to_json_line(full.log[0]) == to_json_line(frozen.log[0]));

    ModelParams init = init_model(cfg, parse_variant("full"), 3);
    const std::uint64_t frozen_sum = frozen_checksum(init.surrogate);
    auto lora_of = [](const std::vector<NamedTensor>& named) {
      std::vector<NamedTensor> out;
      for (const auto& n : named)
        if (n.name.rfind("lora.", 0) == 0) out.push_back(n);
      return out;
    };
    const auto lora0 = lora_of(to_named(init));
    REQUIRE(!lora0.empty());
    for (const auto* run : {&full, &frozen}) {
      ModelParams last = init;
      assign_named(last, run->checkpoints.back());
      CHECK(frozen_checksum(last.surrogate) == frozen_sum);
    }
    CHECK(checksum(lora_of(frozen.checkpoints.back())) == checksum(lora0));
    CHECK(checksum(lora_of(full.checkpoints.back())) != checksum(lora0));
  }

  TEST_CASE("static_graph matches full within noise when there are no dynamics") {
    const ModelConfig cfg = desk_model_config(8);
    double full = 0, stat = 0;
    Index tested = 0;
    for (const std::uint64_t seed : {1, 2, 3}) {
      SynthSpec spec;
      spec.rois = 8;
      spec.steps = 64;
      spec.subjects_per_class = 20;
      spec.switch_rate = 0;
      spec.state_graphs = planted_templates(8, 1, 0.6);
      spec.seed = seed;
      const auto split = split_dataset(synth_generate(spec), 0.8, seed);
      TrainConfig t = desk_train_config(seed);
      t.epochs = 6;
      full += run_variant(cfg, t, split).test.accuracy / 3;
      t.variant = "static_graph";
      stat += run_variant(cfg, t, split).test.accuracy / 3;
      tested += static_cast<Index>(split.test.size());
    }
    // Two binomial standard errors at p = 0.5 over the pooled test subjects.
    const double noise = 2 * std::sqrt(0.25 / static_cast<double>(tested));
    MESSAGE("single-regime accuracy full " << full << " static_graph " << stat << " noise " << noise);
    CHECK(full > 0.6);
    CHECK(std::abs(full - stat) <= noise);
  }

  TEST_CASE("run_variant rejects unknown variants") {
    const auto split = split_dataset(tiny_data(1), 0.75, 1);
    CHECK_THROWS_AS(run_variant(tiny_config(), tiny_train(1, "backbone:lstm"), split), ConfigError);
    CHECK_THROWS_AS(run_variant(tiny_config(), tiny_train(1, "align:words"), split), ConfigError);
  }
}
