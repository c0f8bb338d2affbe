#include <algorithm>
#include <cmath>

#include <Eigen/SVD>

#include "dyns/gradcheck.hpp"
#include "dyns/pipeline.hpp"
#include "dyns/tape.hpp"
#include "dyns/token_align.hpp"
#include "support.hpp"

using namespace dyns;
using dyns::test::bit_equal;
using dyns::test::max_abs_diff;
using dyns::test::randn;

namespace {

Tensor identity(Index n) { return Tensor::from_matrix(RowMat<Real>::Identity(n, n)); }

// Dense softmax over T per query, weighted sum, then the affine projection.
Tensor attention_oracle(const Tensor& s, const CompressionParams& p) {
  const Index steps = s.dim(0), d_h = s.dim(1), k = p.queries.dim(0), d_k = p.w_proj.dim(1);
  Vec<Real> out(k * d_k);
  for (Index q = 0; q < k; ++q) {
    std::vector<long double> score(steps);
    long double mx = -1e300, z = 0;
    for (Index t = 0; t < steps; ++t) {
      long double dot = 0;
      for (Index c = 0; c < d_h; ++c) dot += (long double)p.queries.at({q, c}) * s.at({t, c});
      score[t] = dot / std::sqrt((long double)d_h);
      mx = std::max(mx, score[t]);
    }
    for (auto& v : score) z += (v = std::exp(v - mx));
    for (Index j = 0; j < d_k; ++j) {
      long double acc = p.b_proj.data()[j];
      for (Index c = 0; c < d_h; ++c) {
        long double pooled = 0;
        for (Index t = 0; t < steps; ++t) pooled += score[t] / z * s.at({t, c});
        acc += pooled * p.w_proj.at({c, j});
      }
      out[q * d_k + j] = static_cast<Real>(acc);
    }
  }
  return Tensor({k, d_k}, out);
}

SurrogateConfig small_surrogate() {
  SurrogateConfig cfg;
  cfg.d_k = 16;
  cfg.heads = 4;
  cfg.vocab = 16;
  cfg.context = 24;
  cfg.brain_tokens = 4;
  cfg.lora = {4, 8.0, 0.1};
  return cfg;
}

const std::vector<Index> kPrompt{1, 5, 9, 3, 12};

}  // namespace

TEST_SUITE("token_align") {
  TEST_CASE("compress_tokens: uniform attention with identity projection is the mean") {
    CounterRng rng(1);
    CompressionParams p = init_compression(1, 5, 5, rng);
    p.w_proj = identity(5);
    const Tensor s = randn({9, 5}, rng);
    const Tensor z = compress_tokens(s, p, {{}, true});
    for (Index c = 0; c < 5; ++c) {
      double mean = 0;
      for (Index t = 0; t < 9; ++t) mean += s.at({t, c}) / 9;
      CHECK(std::abs(z.at({0, c}) - mean) < 1e-14);
    }
  }

  TEST_CASE("compress_tokens: a single state gives proj(s_1) for every token") {
    CounterRng rng(2);
    CompressionParams p = init_compression(3, 4, 6, rng);
    p.b_proj = randn({6}, rng);
    const Tensor s = randn({1, 4}, rng);
    const Tensor z = compress_tokens(s, p);
    const Tensor expect = add(matmul(s, p.w_proj), p.b_proj);
    for (Index q = 0; q < 3; ++q)
      for (Index j = 0; j < 6; ++j) CHECK(std::abs(z.at({q, j}) - expect.at({0, j})) < 1e-14);
  }

  TEST_CASE("compress_tokens matches the explicit attention oracle; K is independent of T") {
    CounterRng rng(3);
    CompressionParams p = init_compression(4, 6, 5, rng);
    p.queries = randn({4, 6}, rng);
    p.b_proj = randn({5}, rng);
    for (const Index t : {1, 7, 50}) {
      const Tensor s = randn({t, 6}, rng);
      const Tensor z = compress_tokens(s, p);
      CHECK(z.shape() == Shape{4, 5});
      CHECK(max_abs_diff(z, attention_oracle(s, p)) < 1e-12);
    }
  }

  TEST_CASE("compress_tokens ignores masked padding") {
    CounterRng rng(4);
    CompressionParams p = init_compression(3, 4, 4, rng);
    p.queries = randn({3, 4}, rng);
    const Tensor s = randn({6, 4}, rng);
    const Tensor padded = concat_rows<Real>(std::vector<Tensor>{s, randn({3, 4}, rng, 10.0)});
    const bool keep[] = {true, true, true, true, true, true, false, false, false};
    CHECK(max_abs_diff(compress_tokens(padded, p, {keep}), compress_tokens(s, p)) < 1e-14);
    const bool none[] = {false};
    CHECK_THROWS_AS(compress_tokens(randn({1, 4}, rng), p, {none, true}), ContractError);
  }

  TEST_CASE("lora_linear examples") {
    CounterRng rng(5);
    const Tensor w = randn({3, 5}, rng);
    const Tensor x = randn({4, 5}, rng);
    const LoraAdapter fresh = init_lora(5, 3, {2, 4.0, 0.1}, rng);
    CHECK(fresh.b.data().isZero());
    CHECK(bit_equal(lora_linear(x, w, fresh), matmul(x, transpose(w))));

    const LoraAdapter hand{Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 1}, {1, 0}), 1.0, 0.0};
    CHECK(bit_equal(lora_linear(Tensor::from({2}, {3, 7}), Tensor::zeros({2, 2}), hand), Tensor::from({2}, {3, 0})));

    LoraAdapter a = fresh;
    a.b = randn({3, 2}, rng);
    LoraAdapter a2 = a;
    a2.alpha *= 2;
    const Tensor base = matmul(x, transpose(w));
    const Tensor d1 = sub(lora_linear(x, w, a), base), d2 = sub(lora_linear(x, w, a2), base);
    CHECK(max_abs_diff(d2, scale(d1, Real(2))) < 1e-14);

    CHECK_THROWS_AS(init_lora(5, 3, {4, 8.0, 0.1}, rng), ConfigError);
    const LoraAdapter too_wide{randn({4, 5}, rng), randn({3, 4}, rng), 1.0, 0.0};
    CHECK_THROWS_AS(lora_linear(x, w, too_wide), ConfigError);
  }

  TEST_CASE("dropout is the identity at inference and inverted in training") {
    CounterRng rng(6);
    const Tensor x = Tensor::ones({200, 50});
    CHECK(bit_equal(dropout(x, 0.1, {}), x));
    CounterRng drop(7);
    const Tensor y = dropout(x, 0.1, {true, &drop});
    Index zeros = 0;
    for (Index i = 0; i < y.numel(); ++i) {
      const double v = y.data()[i];
      CHECK((v == 0 || std::abs(v - 1 / 0.9) < 1e-15));
      zeros += v == 0;
    }
    CHECK(std::abs(double(zeros) / double(y.numel()) - 0.1) < 0.01);
    CounterRng again(7);
    CHECK(bit_equal(dropout(x, 0.1, {true, &again}), y));
  }

  TEST_CASE("adapter weight delta has rank at most r") {
    CounterRng rng(8);
    for (const Index r : {1, 2, 4, 8}) {
      LoraAdapter a = init_lora(24, 20, {r, 2.0 * double(r), 0.0}, rng);
      a.b = randn({20, r}, rng);
      const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a.delta_weight());
      const auto& sv = svd.singularValues();
      for (Index i = r; i < sv.size(); ++i) CHECK(sv[i] < 1e-10 * sv[0]);
      CHECK(sv[r - 1] > 1e-6 * sv[0]);
    }
  }

  TEST_CASE("surrogate: fresh adapters are neutral and the output is deterministic") {
    CounterRng rng(9);
    const auto cfg = small_surrogate();
    const SurrogateModel m = init_surrogate(cfg, rng);
    SurrogateConfig bare_cfg = cfg;
    bare_cfg.lora.rank = 0;
    CounterRng rng0(10);
    SurrogateModel bare = init_surrogate(bare_cfg, rng0);
    CHECK(!bare.has_adapters());
    bare.head_w = m.head_w;
    bare.head_b = m.head_b;
    bare.offsets = m.offsets;
    const Tensor tokens = randn({4, 16}, rng);
    const Tensor y = surrogate_forward(tokens, kPrompt, m);
    CHECK(max_abs_diff(y, surrogate_forward(tokens, kPrompt, bare)) <= 1e-15);
    CHECK(bit_equal(y, surrogate_forward(tokens, kPrompt, m)));
  }

  TEST_CASE("surrogate: brain tokens form a set when offsets are disabled") {
    CounterRng rng(11);
    auto cfg = small_surrogate();
    cfg.brain_offsets = false;
    SurrogateModel m = init_surrogate(cfg, rng);
    for (auto& ad : m.lora_q) ad.b = randn(ad.b.shape(), rng, 0.3);
    const Tensor tokens = randn({4, 16}, rng);
    const std::vector<Index> order{2, 0, 3, 1};
    const Tensor shuffled = gather_rows(tokens, std::span<const Index>(order));
    CHECK(max_abs_diff(surrogate_forward(tokens, kPrompt, m), surrogate_forward(shuffled, kPrompt, m)) < 1e-12);
  }

  TEST_CASE("surrogate: context and vocabulary limits") {
    CounterRng rng(12);
    const SurrogateModel m = init_surrogate(small_surrogate(), rng);
    const std::vector<Index> long_prompt(21, 1);
    CHECK_THROWS_AS(surrogate_forward(randn({4, 16}, rng), long_prompt, m), LengthError);
    const std::vector<Index> bad{1, 16};
    CHECK_THROWS_AS(surrogate_forward(randn({4, 16}, rng), bad, m), ContractError);
  }

  TEST_CASE("surrogate: gradients reach adapters and head but not frozen weights") {
    CounterRng rng(13);
    SurrogateModel m = init_surrogate(small_surrogate(), rng);
    for (auto* group : {&m.lora_q, &m.lora_v})
      for (auto& ad : *group) ad.b = randn(ad.b.shape(), rng, 0.3);
    const Tensor tokens = randn({4, 16}, rng);

    std::vector<Tensor> trainable;
    m.visit([&](const std::string& name, Tensor& t) {
      if (!is_frozen_name(name)) trainable.push_back(t);
    });
    const ScalarFn<Real> fn = [&](std::span<const Tensor> p) {
      SurrogateModel local = m;
      std::size_t i = 0;
      local.visit([&](const std::string& name, Tensor& t) {
        if (!is_frozen_name(name)) t = p[i++];
      });
      const Tensor y = surrogate_forward(tokens, kPrompt, local);
      return sum(mul(y, Tensor::from({2}, {0.7, -1.3})));
    };
    CHECK(finite_diff_check<Real>(fn, trainable, 1e-5, 1e-6) < 1e-4);

    Tape<Real> tape;
    SurrogateModel local = m;
    local.visit([&](const std::string& name, Tensor& t) {
      if (!is_frozen_name(name)) t = tape.watch(t);
    });
    const auto grads = tape.backward(sum(surrogate_forward(tokens, kPrompt, local)));
    CHECK(grads.reached(local.head_w));
    CHECK(grads.reached(local.lora_q[0].a));
    CHECK(!local.embedding.requires_grad());
    CHECK(!grads.reached(local.blocks[0].wq));
  }

  TEST_CASE("lora targets are configurable") {
    CounterRng rng(14);
    auto cfg = small_surrogate();
    cfg.lora_targets = "qkvo";
    SurrogateModel m = init_surrogate(cfg, rng);
    std::vector<std::string> names;
    m.visit([&](const std::string& name, Tensor&) { names.push_back(name); });
    for (const char* tag : {"q", "k", "v", "o"})
      CHECK(std::find(names.begin(), names.end(), std::string("lora.block1.") + tag + ".A") != names.end());
    const Tensor tokens = randn({4, 16}, rng);
    const Tensor before = surrogate_forward(tokens, kPrompt, m);
    m.lora_o[0].b = randn(m.lora_o[0].b.shape(), rng);
    CHECK(max_abs_diff(before, surrogate_forward(tokens, kPrompt, m)) > 1e-6);
    cfg.lora_targets = "qx";
    CHECK_THROWS_AS(init_surrogate(cfg, rng), ConfigError);
  }

  TEST_CASE("frozen checksum depends only on the frozen seed") {
    CounterRng r1(15), r2(16);
    auto cfg = small_surrogate();
    SurrogateModel a = init_surrogate(cfg, r1), b = init_surrogate(cfg, r2);
    CHECK(frozen_checksum(a) == frozen_checksum(b));
    cfg.frozen_seed += 1;
    SurrogateModel c = init_surrogate(cfg, r1);
    CHECK(frozen_checksum(a) != frozen_checksum(c));
  }

  TEST_CASE("trainable parameters are a small fraction in the default config") {
    const ModelConfig cfg;
    ModelParams params = init_model(cfg, parse_variant("full"), 1);
    Index trainable = 0, total = 0;
    params.visit([&](const std::string& name, Tensor& t) {
      total += t.numel();
      if (is_trainable(name, parse_variant("full"))) trainable += t.numel();
    });
    // The graph encoder and SSM train in full; the ratio applies to the adapted model.
    MESSAGE("whole-pipeline trainable fraction " << double(trainable) / double(total));
    const ParameterCount llm = count_parameters(params.surrogate);
    MESSAGE("surrogate trainable fraction " << llm.fraction());
    CHECK(llm.fraction() < 0.10);
  }

  TEST_CASE("classify examples") {
    const auto tie = classify(Tensor::from({2}, {0, 0}));
    CHECK(tie.label == Label::kTC);
    CHECK(tie.confidence == 0.5);
    const auto skewed = classify(Tensor::from({2}, {std::log(58.0), std::log(42.0)}));
    CHECK(skewed.label == Label::kASD);
    CHECK(std::abs(skewed.confidence - 0.58) < 1e-12);
    const auto tc = classify(Tensor::from({2}, {-5, 5}));
    CHECK(tc.label == Label::kTC);
    CHECK(std::abs(tc.confidence - 1 / (1 + std::exp(-10.0))) < 1e-15);
    CHECK(std::abs(tc.confidence - 0.9999546) < 1e-7);
  }
}
