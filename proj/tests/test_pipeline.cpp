#include <cmath>

#include "dyns/gradcheck.hpp"
#include "dyns/pipeline.hpp"
#include "support.hpp"

using namespace dyns;
using dyns::test::bit_equal;
using dyns::test::max_abs_diff;
using dyns::test::randn;

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

const std::vector<std::string> kVariants{"full",
                                         "static_graph",
                                         "static_pearson",
                                         "frozen_llm",
                                         "backbone:gru",
                                         "backbone:tcn",
                                         "backbone:transformer",
                                         "backbone:s4",
                                         "backbone:mamba",
                                         "align:tokens",
                                         "align:meanpool",
                                         "align:random",
                                         "align:none"};

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("variant names parse and unknown names are rejected") {
    for (const auto& name : kVariants) CHECK(parse_variant(name).name == name);
    CHECK(parse_variant("static_graph").graph == GraphMode::kStaticMean);
    CHECK(!parse_variant("frozen_llm").train_adapters);
    CHECK(parse_variant("align:none").align == AlignMode::kNone);
    CHECK_THROWS_AS(parse_variant("dynamic"), ConfigError);
    CHECK_THROWS_AS(parse_variant("backbone:lstm"), ConfigError);
    for (const auto b : {Backbone::kGru, Backbone::kTcn, Backbone::kTransformer, Backbone::kS4, Backbone::kMamba})
      CHECK(parse_backbone(to_string(b)) == b);
  }

  TEST_CASE("every variant maps a scan to two finite logits") {
    const ModelConfig cfg = tiny_config();
    CounterRng rng(1);
    const Tensor x = randn({12, 4}, rng);
    for (const auto& name : kVariants) {
      INFO(name);
      const Variant v = parse_variant(name);
      const ModelParams p = init_model(cfg, v, 1);
      const Tensor logits = model_forward(p, cfg, v, x);
      CHECK(logits.numel() == 2);
      CHECK(logits.data().allFinite());
    }
    const Variant full = parse_variant("full");
    CHECK_THROWS_AS(model_forward(init_model(cfg, full, 1), cfg, full, randn({12, 5}, rng)), DimensionError);
  }

  TEST_CASE("input-free alignment controls ignore the scan") {
    const ModelConfig cfg = tiny_config();
    CounterRng rng(2);
    const Tensor x1 = randn({12, 4}, rng), x2 = randn({20, 4}, rng);
    for (const char* name : {"align:none", "align:random"}) {
      const Variant v = parse_variant(name);
      const ModelParams p = init_model(cfg, v, 2);
      CHECK(bit_equal(model_forward(p, cfg, v, x1), model_forward(p, cfg, v, x2)));
    }
    const Variant tokens = parse_variant("full");
    const ModelParams p = init_model(cfg, tokens, 2);
    CHECK(!bit_equal(model_forward(p, cfg, tokens, x1), model_forward(p, cfg, tokens, x2)));
  }

  TEST_CASE("static_pearson does not use the node encoder") {
    const ModelConfig cfg = tiny_config();
    CounterRng rng(3);
    const Tensor x = randn({12, 4}, rng);
    const Variant v = parse_variant("static_pearson");
    const ModelParams p = init_model(cfg, v, 3);
    ModelParams q = p;
    q.encoder.conv_weight = randn(q.encoder.conv_weight.shape(), rng);
    CHECK(bit_equal(model_forward(p, cfg, v, x), model_forward(q, cfg, v, x)));
  }

  TEST_CASE("pearson_matrix matches a direct computation") {
    CounterRng rng(4);
    Tensor x = randn({30, 5}, rng);
    Vec<Real> raw = x.data();
    for (Index t = 0; t < 30; ++t) raw[t * 5 + 4] = 2.0;  // constant column
    x = Tensor({30, 5}, raw);
    const Tensor c = pearson_matrix(x);
    for (Index i = 0; i < 5; ++i)
      for (Index j = 0; j < 5; ++j) {
        double want;
        if (i == j) {
          want = 1;
        } else if (i == 4 || j == 4) {
          want = 0;
        } else {
          double mi = 0, mj = 0;
          for (Index t = 0; t < 30; ++t) {
            mi += x.at({t, i}) / 30;
            mj += x.at({t, j}) / 30;
          }
          double sij = 0, sii = 0, sjj = 0;
          for (Index t = 0; t < 30; ++t) {
            sij += (x.at({t, i}) - mi) * (x.at({t, j}) - mj);
            sii += std::pow(x.at({t, i}) - mi, 2);
            sjj += std::pow(x.at({t, j}) - mj, 2);
          }
          want = sij / std::sqrt(sii * sjj);
        }
        CHECK(std::abs(c.at({i, j}) - want) < 1e-12);
      }
  }

  TEST_CASE("backbones produce [T, d_h] and the recurrent ones are causal") {
    CounterRng rng(5);
    const SsmConfig ssm{8, 2, 0.2, 1.0};
    const Tensor x = randn({16, 3}, rng);
    for (const auto kind : {Backbone::kGru, Backbone::kTcn, Backbone::kTransformer, Backbone::kS4, Backbone::kMamba}) {
      INFO(to_string(kind));
      const TemporalModule m = init_temporal(kind, ssm, 3, rng);
      const Tensor y = temporal_forward(m, x);
      CHECK(y.shape() == Shape{16, 8});
      CHECK(y.data().allFinite());
      if (kind == Backbone::kGru || kind == Backbone::kS4 || kind == Backbone::kMamba) {
        Tensor x2 = x;
        x2.mutable_data()[10 * 3] += 1.0;
        const Tensor y2 = temporal_forward(m, x2);
        CHECK(max_abs_diff(slice_rows(y, 0, 10), slice_rows(y2, 0, 10)) == 0);
        CHECK(max_abs_diff(slice_rows(y, 10, 6), slice_rows(y2, 10, 6)) > 0);
      }
    }
    CHECK_THROWS_AS(init_temporal(Backbone::kTransformer, SsmConfig{6, 1, 0.2, 1.0}, 3, rng), ConfigError);
  }

  TEST_CASE("backbone gradients match finite differences") {
    CounterRng rng(6);
    const SsmConfig ssm{4, 2, 0.2, 1.0};
    const Tensor x = randn({7, 3}, rng);
    const Tensor proj = randn({7, 4}, rng);
    for (const auto kind : {Backbone::kGru, Backbone::kTcn, Backbone::kTransformer, Backbone::kS4, Backbone::kMamba}) {
      INFO(to_string(kind));
      TemporalModule m = init_temporal(kind, ssm, 3, rng);
      std::vector<Tensor> params;
      m.visit([&](const std::string&, Tensor& t) {
        // Move away from zero-initialized biases and residual outputs.
        t = add(t, randn(t.shape(), rng, 0.2));
        params.push_back(t);
      });
      const ScalarFn<Real> fn = [m, x, proj](std::span<const Tensor> p) {
        TemporalModule local = m;
        std::size_t i = 0;
        local.visit([&](const std::string&, Tensor& t) { t = p[i++]; });
        return sum(mul(temporal_forward(local, x), proj));
      };
      CHECK(finite_diff_check<Real>(fn, params, 1e-5, 1e-6) < 1e-4);
    }
  }

  TEST_CASE("trainable parameter selection") {
    const Variant full = parse_variant("full"), frozen = parse_variant("frozen_llm");
    CHECK(is_trainable("lora.block0.q.A", full));
    CHECK(!is_trainable("lora.block0.q.A", frozen));
    CHECK(!is_trainable("fixed.random_tokens", full));
    ModelParams p = init_model(tiny_config(), full, 1);
    Index frozen_count = 0, trainable = 0;
    p.visit([&](const std::string& name, Tensor&) {
      if (is_frozen_name(name)) {
        ++frozen_count;
        CHECK(!is_trainable(name, full));
      } else if (is_trainable(name, full)) {
        ++trainable;
      }
    });
    CHECK(frozen_count > 0);
    CHECK(trainable > 0);
  }

  TEST_CASE("named parameter round trip and mismatch errors") {
    const ModelConfig cfg = tiny_config();
    const Variant v = parse_variant("full");
    ModelParams a = init_model(cfg, v, 1), b = init_model(cfg, v, 2);
    const auto named = to_named(a);
    CHECK(checksum(named) != checksum(to_named(b)));
    assign_named(b, named);
    CHECK(checksum(to_named(b)) == checksum(named));

    auto missing = named;
    missing.pop_back();
    CHECK_THROWS_AS(assign_named(b, missing), ContentError);
    auto wrong = named;
    wrong[0].value = Tensor::zeros({1});
    CHECK_THROWS_AS(assign_named(b, wrong), ContentError);
  }
}
