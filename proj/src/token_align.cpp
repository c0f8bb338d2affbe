#include "dyns/token_align.hpp"

#include <algorithm>
#include <cmath>

#include "dyns/checkpoint.hpp"

namespace dyns {

namespace {

Tensor gaussian(Shape shape, double stddev, CounterRng& rng) {
  Vec<Real> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(rng.normal() * stddev);
  return Tensor(std::move(shape), std::move(v));
}

double inv_sqrt(Index n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

// x W^T for a frozen [d_out, d_in] weight.
Tensor linear(const Tensor& x, const Tensor& w) { return matmul(x, transpose(w)); }

}  // namespace

CompressionParams init_compression(Index tokens, Index d_h, Index d_k, CounterRng& rng) {
  if (tokens <= 0 || d_h <= 0 || d_k <= 0) throw ConfigError("compression sizes must be positive");
  CompressionParams p;
  p.queries = gaussian({tokens, d_h}, inv_sqrt(d_h), rng);
  p.w_proj = gaussian({d_h, d_k}, inv_sqrt(d_h), rng);
  p.b_proj = Tensor::zeros({d_k});
  return p;
}

Tensor compress_tokens(const Tensor& states, const CompressionParams& params, const CompressOptions& options) {
  if (states.rank() != 2) throw DimensionError("compress_tokens expects [T, d_h], got " + shape_to_string(states.shape()));
  const Index steps = states.dim(0), d_h = states.dim(1);
  if (params.queries.dim(1) != d_h || params.w_proj.dim(0) != d_h)
    throw DimensionError("compress_tokens: state width " + std::to_string(d_h) + " does not match the parameters");
  if (!options.keep.empty() && static_cast<Index>(options.keep.size()) != steps)
    throw DimensionError("compress_tokens: mask length " + std::to_string(options.keep.size()) + " != T=" +
                         std::to_string(steps));
  const Index k = params.tokens();

  Tensor weights;
  if (options.uniform) {
    Index kept = steps;
    if (!options.keep.empty()) kept = std::count(options.keep.begin(), options.keep.end(), true);
    if (kept == 0) throw ContractError("compress_tokens: every state is masked");
    RowMat<Real> w(k, steps);
    for (Index t = 0; t < steps; ++t)
      w.col(t).setConstant(options.keep.empty() || options.keep[static_cast<std::size_t>(t)] ? Real(1) / Real(kept) : Real(0));
    weights = Tensor::from_matrix(w);
  } else {
    const Tensor scores = scale(matmul(params.queries, transpose(states)), static_cast<Real>(inv_sqrt(d_h)));
    weights = options.keep.empty() ? softmax_rows(scores) : masked_softmax_rows(scores, options.keep);
  }
  return add(matmul(matmul(weights, states), params.w_proj), params.b_proj);
}

Eigen::MatrixXd LoraAdapter::delta_weight() const {
  const Eigen::MatrixXd bm = b.matrix().template cast<double>();
  const Eigen::MatrixXd am = a.matrix().template cast<double>();
  return scaling() * bm * am;
}

LoraAdapter init_lora(Index d_in, Index d_out, const LoraConfig& cfg, CounterRng& rng) {
  if (cfg.rank <= 0) throw ConfigError("LoRA rank must be positive, got " + std::to_string(cfg.rank));
  if (cfg.rank > std::min(d_in, d_out))
    throw ConfigError("LoRA rank " + std::to_string(cfg.rank) + " exceeds min(d_in, d_out) = " +
                      std::to_string(std::min(d_in, d_out)));
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) throw ConfigError("LoRA dropout must lie in [0, 1)");
  LoraAdapter ad;
  ad.a = gaussian({cfg.rank, d_in}, inv_sqrt(d_in), rng);
  ad.b = Tensor::zeros({d_out, cfg.rank});
  ad.alpha = cfg.alpha;
  ad.dropout = cfg.dropout;
  return ad;
}

Tensor dropout(const Tensor& x, double p, const DropoutContext& ctx) {
  if (!ctx.training || ctx.rng == nullptr || p <= 0.0) return x;
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - p));
  Vec<Real> mask(x.numel());
  for (Index i = 0; i < mask.size(); ++i) mask[i] = ctx.rng->uniform() < p ? Real(0) : keep_scale;
  return mul(x, Tensor(x.shape(), std::move(mask), detail::Unchecked{}));
}

Tensor lora_linear(const Tensor& x, const Tensor& w, const LoraAdapter& adapter, const DropoutContext& ctx) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(1))
    throw DimensionError("lora_linear: input " + shape_to_string(x.shape()) + " does not fit weight " +
                         shape_to_string(w.shape()));
  if (adapter.a.dim(1) != w.dim(1) || adapter.b.dim(0) != w.dim(0) || adapter.b.dim(1) != adapter.rank())
    throw DimensionError("lora_linear: adapter shapes do not match weight " + shape_to_string(w.shape()));
  if (adapter.rank() > std::min(w.dim(0), w.dim(1)))
    throw ConfigError("LoRA rank " + std::to_string(adapter.rank()) + " exceeds min(d_in, d_out)");
  const bool vector = x.rank() == 1;
  const Tensor x2 = vector ? reshape(x, {1, x.dim(0)}) : x;
  const Tensor low = linear(linear(dropout(x2, adapter.dropout, ctx), adapter.a), adapter.b);
  Tensor y = add(linear(x2, w), scale(low, static_cast<Real>(adapter.scaling())));
  return vector ? reshape(y, {w.dim(0)}) : y;
}

namespace {

std::vector<LoraAdapter>& adapter_group(SurrogateModel& m, char target) {
  switch (target) {
    case 'q': return m.lora_q;
    case 'k': return m.lora_k;
    case 'v': return m.lora_v;
    default: return m.lora_o;
  }
}

}  // namespace

SurrogateModel init_surrogate(const SurrogateConfig& cfg, CounterRng& rng) {
  if (cfg.d_k <= 0 || cfg.blocks <= 0 || cfg.vocab <= 0 || cfg.ffn_mult <= 0 || cfg.context <= 0)
    throw ConfigError("surrogate sizes must be positive");
  if (cfg.heads <= 0 || cfg.d_k % cfg.heads != 0)
    throw ConfigError("d_k " + std::to_string(cfg.d_k) + " is not divisible by " + std::to_string(cfg.heads) + " heads");
  if (cfg.brain_tokens <= 0) throw ConfigError("brain token count must be positive");
  if (cfg.lora.rank < 0) throw ConfigError("LoRA rank must be non-negative");
  for (std::size_t i = 0; i < cfg.lora_targets.size(); ++i)
    if (std::string("qkvo").find(cfg.lora_targets[i]) == std::string::npos ||
        cfg.lora_targets.find(cfg.lora_targets[i]) != i)
      throw ConfigError("lora_targets must be distinct letters from qkvo, got '" + cfg.lora_targets + "'");

  SurrogateModel m;
  m.cfg = cfg;
  const Index d = cfg.d_k, ffn = cfg.ffn_mult * cfg.d_k;
  CounterRng frozen(cfg.frozen_seed, 0);
  m.embedding = gaussian({cfg.vocab, d}, 1.0, frozen);
  m.positions = gaussian({cfg.context, d}, 0.5, frozen);
  for (Index i = 0; i < cfg.blocks; ++i) {
    SurrogateBlock b;
    b.wq = gaussian({d, d}, inv_sqrt(d), frozen);
    b.wk = gaussian({d, d}, inv_sqrt(d), frozen);
    b.wv = gaussian({d, d}, inv_sqrt(d), frozen);
    b.wo = gaussian({d, d}, 0.5 * inv_sqrt(d), frozen);
    b.w1 = gaussian({ffn, d}, inv_sqrt(d), frozen);
    b.w2 = gaussian({d, ffn}, 0.5 * inv_sqrt(ffn), frozen);
    m.blocks.push_back(std::move(b));
  }
  if (cfg.lora.rank > 0)
    for (Index i = 0; i < cfg.blocks; ++i)
      for (const char target : std::string("qkvo"))
        if (cfg.lora_targets.find(target) != std::string::npos)
          adapter_group(m, target).push_back(init_lora(d, d, cfg.lora, rng));
  m.offsets = Tensor::zeros({cfg.brain_tokens, d});
  m.head_w = gaussian({2, d}, inv_sqrt(d), rng);
  m.head_b = Tensor::zeros({2});
  return m;
}

std::vector<Index> default_prompt() { return {3, 17, 42, 8, 25, 61, 30, 11, 54, 7, 19, 2}; }

namespace {

Tensor run_surrogate(const Tensor* tokens, std::span<const Index> prompt, const SurrogateModel& m,
                     const DropoutContext& ctx) {
  const SurrogateConfig& cfg = m.cfg;
  const Index k = tokens ? tokens->dim(0) : 0;
  const Index p = static_cast<Index>(prompt.size());
  if (p == 0) throw ContractError("surrogate prompt is empty");
  if (k + p > cfg.context)
    throw LengthError("context overflow: " + std::to_string(k) + " brain tokens + " + std::to_string(p) +
                      " prompt tokens > context " + std::to_string(cfg.context));
  for (Index id : prompt)
    if (id < 0 || id >= cfg.vocab)
      throw ContractError("prompt token " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg.vocab));

  const Tensor prompt_emb = add(gather_rows(m.embedding, prompt), slice_rows(m.positions, k, p));
  Tensor h = prompt_emb;
  if (tokens) {
    if (tokens->rank() != 2 || tokens->dim(1) != cfg.d_k)
      throw DimensionError("brain tokens must be [K, " + std::to_string(cfg.d_k) + "], got " +
                           shape_to_string(tokens->shape()));
    Tensor brain = *tokens;
    if (cfg.brain_offsets) {
      if (k != m.offsets.dim(0))
        throw DimensionError("expected " + std::to_string(m.offsets.dim(0)) + " brain tokens, got " + std::to_string(k));
      brain = add(brain, m.offsets);
    }
    const Tensor parts[] = {brain, prompt_emb};
    h = concat_rows<Real>(parts);
  }

  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const SurrogateBlock& b = m.blocks[i];
    Tensor n = rms_norm_rows(h);
    auto project = [&](const Tensor& in, const Tensor& w, const std::vector<LoraAdapter>& group) {
      return group.empty() ? linear(in, w) : lora_linear(in, w, group[i], ctx);
    };
    const Tensor q = project(n, b.wq, m.lora_q);
    const Tensor kk = project(n, b.wk, m.lora_k);
    const Tensor v = project(n, b.wv, m.lora_v);
    h = add(h, project(multi_head_attention(q, kk, v, cfg.heads), b.wo, m.lora_o));
    n = rms_norm_rows(h);
    h = add(h, linear(relu(linear(n, b.w1)), b.w2));
  }
  const Tensor pooled = rms_norm_rows(slice_rows(h, h.dim(0) - 1, 1));
  return reshape(add(linear(pooled, m.head_w), m.head_b), {2});
}

}  // namespace

Tensor surrogate_forward(const Tensor& tokens, std::span<const Index> prompt, const SurrogateModel& model,
                         const DropoutContext& ctx) {
  return run_surrogate(&tokens, prompt, model, ctx);
}

Tensor surrogate_forward_prompt_only(std::span<const Index> prompt, const SurrogateModel& model,
                                     const DropoutContext& ctx) {
  return run_surrogate(nullptr, prompt, model, ctx);
}

bool is_frozen_name(const std::string& name) { return name.rfind("base.", 0) == 0; }

std::uint64_t frozen_checksum(SurrogateModel& model) {
  std::vector<NamedTensor> frozen;
  model.visit([&](const std::string& name, Tensor& t) {
    if (is_frozen_name(name)) frozen.push_back({name, t});
  });
  return checksum(frozen);
}

ParameterCount count_parameters(SurrogateModel& model) {
  ParameterCount c;
  model.visit([&](const std::string& name, Tensor& t) {
    c.total += t.numel();
    if (!is_frozen_name(name)) c.trainable += t.numel();
  });
  return c;
}

Prediction classify(const Tensor& logits) {
  if (logits.numel() != 2) throw DimensionError("classify expects 2 logits, got " + shape_to_string(logits.shape()));
  const double l0 = static_cast<double>(logits.data()[0]), l1 = static_cast<double>(logits.data()[1]);
  if (!std::isfinite(l0) || !std::isfinite(l1)) throw NumericalError("classify: non-finite logits");
  const double p0 = 1.0 / (1.0 + std::exp(l1 - l0));
  if (l0 > l1) return {Label::kASD, p0};
  return {Label::kTC, 1.0 - p0};
}

}  // namespace dyns
