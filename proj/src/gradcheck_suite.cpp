#include "dyns/gradcheck_suite.hpp"

#include <functional>

#include "dyns/gradcheck.hpp"
#include "dyns/training_eval.hpp"

namespace dyns {

namespace {

constexpr bool kDouble = sizeof(Real) == sizeof(double);
const Real kEps = kDouble ? Real(1e-5) : Real(1e-2);
const Real kFloor = kDouble ? Real(1e-6) : Real(1e-3);

using Params = std::span<const Tensor>;

Tensor normal(Shape shape, CounterRng& rng, double stddev = 1.0) {
  Vec<Real> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(rng.normal() * stddev);
  return Tensor(std::move(shape), std::move(v));
}

// Entries bounded away from zero (for relu and log arguments).
Tensor away_from_zero(Shape shape, CounterRng& rng, bool positive) {
  Vec<Real> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) {
    const double mag = 0.2 + rng.uniform();
    v[i] = static_cast<Real>(positive || rng.uniform() < 0.5 ? mag : -mag);
  }
  return Tensor(std::move(shape), std::move(v));
}

// Reduces an op output to a scalar with fixed random weights, so every output
// coordinate contributes a distinct gradient.
std::function<Tensor(const Tensor&)> projector(const Shape& shape, CounterRng& rng) {
  const Tensor w = normal(shape, rng);
  return [w](const Tensor& out) { return sum(mul(out, w)); };
}

struct Case {
  std::string name;
  std::vector<Tensor> params;
  ScalarFn<Real> fn;
};

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.rois = 4;
  cfg.encoder.d_lat = 8;
  cfg.encoder.heads = 4;
  cfg.ssm.d_h = 4;
  cfg.ssm.blocks = 2;
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

std::vector<Case> build_cases(std::uint64_t seed) {
  std::vector<Case> cases;
  CounterRng rng(seed, 77);
  auto unary_case = [&](const std::string& name, std::function<Tensor(const Tensor&)> op, Tensor x) {
    auto proj = projector(op(x).shape(), rng);
    cases.push_back({name, {x}, [op, proj](Params p) { return proj(op(p[0])); }});
  };
  auto binary_case = [&](const std::string& name, std::function<Tensor(const Tensor&, const Tensor&)> op, Tensor a,
                         Tensor b) {
    auto proj = projector(op(a, b).shape(), rng);
    cases.push_back({name, {a, b}, [op, proj](Params p) { return proj(op(p[0], p[1])); }});
  };

  binary_case("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, normal({3, 4}, rng), normal({4}, rng));
  binary_case("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, normal({2, 3, 4}, rng),
              normal({3, 4}, rng));
  binary_case("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, normal({3, 4}, rng), normal({4}, rng));
  unary_case("scale", [](const Tensor& a) { return scale(a, Real(-1.7)); }, normal({5}, rng));
  unary_case("add_scalar", [](const Tensor& a) { return mul(add_scalar(a, Real(0.3)), a); }, normal({5}, rng));
  unary_case("relu", [](const Tensor& a) { return relu(a); }, away_from_zero({3, 4}, rng, false));
  unary_case("exp", [](const Tensor& a) { return exp(a); }, normal({3, 4}, rng));
  unary_case("log", [](const Tensor& a) { return log(a); }, away_from_zero({3, 4}, rng, true));
  unary_case("softplus", [](const Tensor& a) { return softplus(a); }, normal({3, 4}, rng, 3.0));
  unary_case("sigmoid", [](const Tensor& a) { return sigmoid(a); }, normal({3, 4}, rng, 2.0));
  unary_case("tanh", [](const Tensor& a) { return tanh(a); }, normal({3, 4}, rng));
  unary_case("sum", [](const Tensor& a) { return mul(sum(a), sum(a)); }, normal({3, 4}, rng));
  unary_case("mean", [](const Tensor& a) { return mul(mean(a), mean(a)); }, normal({3, 4}, rng));
  unary_case("mean_leading", [](const Tensor& a) { return mean_leading(a); }, normal({3, 2, 4}, rng));
  unary_case("reshape", [](const Tensor& a) { return reshape(a, {4, 3}); }, normal({3, 4}, rng));
  unary_case("transpose", [](const Tensor& a) { return transpose(a); }, normal({2, 3, 4}, rng));
  unary_case("permute", [](const Tensor& a) { return permute(a, {2, 0, 1}); }, normal({2, 3, 4}, rng));
  binary_case("concat_rows",
              [](const Tensor& a, const Tensor& b) {
                const Tensor parts[] = {a, b, a};
                return concat_rows<Real>(parts);
              },
              normal({2, 3}, rng), normal({1, 3}, rng));
  unary_case("slice_rows", [](const Tensor& a) { return slice_rows(a, 1, 2); }, normal({4, 3}, rng));
  unary_case("gather_rows",
             [](const Tensor& a) {
               const Index ids[] = {2, 0, 2, 1};
               return gather_rows(a, std::span<const Index>(ids));
             },
             normal({3, 4}, rng));
  binary_case("matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, normal({3, 4}, rng),
              normal({4, 2}, rng));
  binary_case("matmul_shared", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, normal({2, 3, 4}, rng),
              normal({4, 2}, rng));
  binary_case("matmul_batched", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, normal({2, 3, 4}, rng),
              normal({2, 4, 2}, rng));
  unary_case("softmax_rows", [](const Tensor& a) { return softmax_rows(a); }, normal({3, 5}, rng));
  unary_case("masked_softmax_rows",
             [](const Tensor& a) {
               const bool keep[] = {true, false, true, true, false};
               return masked_softmax_rows(a, std::span<const bool>(keep));
             },
             normal({3, 5}, rng));
  unary_case("rms_norm_rows", [](const Tensor& a) { return rms_norm_rows(a); }, normal({3, 5}, rng));
  binary_case("grouped_conv1d_shared",
              [](const Tensor& x, const Tensor& w) { return grouped_conv1d(x, 3, w, 3); }, normal({6, 3}, rng),
              normal({1, 2, 1, 3}, rng));
  binary_case("grouped_conv1d_grouped",
              [](const Tensor& x, const Tensor& w) { return grouped_conv1d(x, 3, w, 2); }, normal({5, 4}, rng),
              normal({2, 3, 2, 3}, rng));
  unary_case("pairwise_gram", [](const Tensor& h) { return pairwise_gram(h, Real(0.5)); }, normal({2, 4, 3}, rng));
  {
    const Tensor q = normal({2, 5, 8}, rng), k = normal({2, 5, 8}, rng), v = normal({2, 5, 8}, rng);
    auto proj = projector({2, 5, 8}, rng);
    cases.push_back({"multi_head_attention", {q, k, v},
                     [proj](Params p) { return proj(multi_head_attention(p[0], p[1], p[2], 4)); }});
  }
  {
    Vec<Real> a(6 * 3);
    for (Index i = 0; i < a.size(); ++i) a[i] = static_cast<Real>(0.1 + 0.85 * rng.uniform());
    auto proj = projector({6, 3}, rng);
    cases.push_back({"selective_scan", {Tensor({6, 3}, a), normal({6, 3}, rng)},
                     [proj](Params p) { return proj(selective_scan(p[0], p[1])); }});
  }
  {
    SsmConfig cfg{4, 2, 0.2, 1.0};
    SsmParams ssm = init_ssm(cfg, 3, rng);
    std::vector<Tensor> flat{normal({7, 3}, rng)};
    ssm.visit([&](const std::string&, Tensor& t) { flat.push_back(t); });
    // The zero-initialized residual readout would hide block 2 from the check.
    flat.back() = normal(flat.back().shape(), rng, 0.5);
    auto proj = projector({7, 4}, rng);
    cases.push_back({"ssm_forward", flat, [ssm, proj](Params p) {
                       SsmParams local = ssm;
                       std::size_t i = 1;
                       local.visit([&](const std::string&, Tensor& t) { t = p[i++]; });
                       return proj(ssm_forward(p[0], local));
                     }});
  }
  {
    CompressionParams cp = init_compression(3, 4, 5, rng);
    cp.b_proj = normal({5}, rng);
    auto proj = projector({3, 5}, rng);
    cases.push_back({"compress_tokens", {normal({6, 4}, rng), cp.queries, cp.w_proj, cp.b_proj}, [proj](Params p) {
                       CompressionParams local{p[1], p[2], p[3]};
                       return proj(compress_tokens(p[0], local));
                     }});
  }
  {
    LoraAdapter ad = init_lora(5, 4, {2, 4.0, 0.0}, rng);
    ad.b = normal({4, 2}, rng);
    const Tensor w = normal({4, 5}, rng);
    auto proj = projector({3, 4}, rng);
    cases.push_back({"lora_linear", {normal({3, 5}, rng), ad.a, ad.b}, [ad, w, proj](Params p) {
                       LoraAdapter local = ad;
                       local.a = p[1];
                       local.b = p[2];
                       return proj(lora_linear(p[0], w, local));
                     }});
  }
  {
    const Tensor logits = normal({2}, rng, 2.0);
    const Label label = rng.uniform() < 0.5 ? Label::kASD : Label::kTC;
    cases.push_back({"cross_entropy", {logits}, [label](Params p) { return cross_entropy(p[0], label); }});
  }
  {
    NodeEncoderConfig ecfg{8, 3, 4, true};
    NodeEncoderParams enc = init_node_encoder(ecfg, rng);
    enc.conv_bias = normal({8}, rng, 0.3);
    std::vector<Tensor> flat{normal({5, 4}, rng)};
    enc.visit([&](const std::string&, Tensor& t) { flat.push_back(t); });
    auto proj = projector({5, 4}, rng);
    cases.push_back({"encode_sequence", flat, [enc, ecfg, proj](Params p) {
                       NodeEncoderParams local = enc;
                       std::size_t i = 1;
                       local.visit([&](const std::string&, Tensor& t) { t = p[i++]; });
                       return proj(encode_sequence(p[0], local, ecfg, FilterMode::kRowNormalized).filtered);
                     }});
  }
  {
    // Surrogate with non-zero adapters; only trainable tensors are perturbed.
    ModelConfig cfg = tiny_model_config();
    SurrogateModel model = init_surrogate(cfg.surrogate, rng);
    for (auto* group : {&model.lora_q, &model.lora_k, &model.lora_v, &model.lora_o})
      for (auto& ad : *group) ad.b = normal(ad.b.shape(), rng, 0.5);
    model.offsets = normal(model.offsets.shape(), rng, 0.3);
    std::vector<Tensor> flat{normal({2, 8}, rng)};
    model.visit([&](const std::string& name, Tensor& t) {
      if (!is_frozen_name(name)) flat.push_back(t);
    });
    const std::vector<Index> prompt = cfg.prompt;
    cases.push_back({"surrogate_forward", flat, [model, prompt](Params p) {
                       SurrogateModel local = model;
                       std::size_t i = 1;
                       local.visit([&](const std::string& name, Tensor& t) {
                         if (!is_frozen_name(name)) t = p[i++];
                       });
                       return cross_entropy(surrogate_forward(p[0], prompt, local), Label::kASD);
                     }});
  }
  {
    ModelConfig cfg = tiny_model_config();
    const Variant variant = parse_variant("full");
    ModelParams model = init_model(cfg, variant, seed);
    for (auto& blk : model.temporal.ssm.blocks) blk.w_out = normal(blk.w_out.shape(), rng, 0.5);
    for (auto* group : {&model.surrogate.lora_q, &model.surrogate.lora_k, &model.surrogate.lora_v, &model.surrogate.lora_o})
      for (auto& ad : *group) ad.b = normal(ad.b.shape(), rng, 0.5);
    std::vector<Tensor> flat;
    model.visit([&](const std::string& name, Tensor& t) {
      if (is_trainable(name, variant)) flat.push_back(t);
    });
    const Tensor x = normal({6, cfg.rois}, rng);
    const Label label = rng.uniform() < 0.5 ? Label::kASD : Label::kTC;
    const std::uint64_t dropout_seed = seed;
    cases.push_back({"end_to_end_loss", flat, [model, cfg, variant, x, label, dropout_seed](Params p) {
                       ModelParams local = model;
                       std::size_t i = 0;
                       local.visit([&](const std::string& name, Tensor& t) {
                         if (is_trainable(name, variant)) t = p[i++];
                       });
                       CounterRng drop(dropout_seed, 5);
                       return cross_entropy(model_forward(local, cfg, variant, x, {true, &drop}), label);
                     }});
  }
  return cases;
}

}  // namespace

double gradcheck_tolerance() { return kDouble ? 1e-4 : 1e-2; }

std::vector<OpCheckResult> run_gradcheck_suite(std::uint64_t seed) {
  std::vector<OpCheckResult> results;
  for (auto& c : build_cases(seed)) {
    const GradCheckReport<Real> r = finite_diff_report<Real>(c.fn, c.params, kEps, kFloor);
    results.push_back({c.name, static_cast<double>(r.max_rel_error), r.coordinates});
  }
  return results;
}

}  // namespace dyns
