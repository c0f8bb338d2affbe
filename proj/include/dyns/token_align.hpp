#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dyns/data_pipeline.hpp"
#include "dyns/ops.hpp"
#include "dyns/rng.hpp"

namespace dyns {

// ------------------------------------------------------------ compression

/// Learned-query cross-attention pooling of a state sequence into K tokens:
/// Z = softmax(Q S^T / sqrt(d_h)) S W_proj + b_proj.
struct CompressionParams {
  Tensor queries;  // [K, d_h]
  Tensor w_proj;   // [d_h, d_k]
  Tensor b_proj;   // [d_k]

  Index tokens() const { return queries.dim(0); }

  template <typename F>
  void visit(F&& f) {
    f("align.queries", queries);
    f("align.proj.weight", w_proj);
    f("align.proj.bias", b_proj);
  }
};

CompressionParams init_compression(Index tokens, Index d_h, Index d_k, CounterRng& rng);

struct CompressOptions {
  /// keep[t] == false removes state t from every token's attention.
  std::span<const bool> keep;
  /// Replaces the attention weights by 1/T (mean pooling).
  bool uniform = false;
};

/// states: [T, d_h] -> tokens [K, d_k].
Tensor compress_tokens(const Tensor& states, const CompressionParams& params, const CompressOptions& options = {});

// ------------------------------------------------------------------- LoRA

struct LoraConfig {
  Index rank = 16;
  double alpha = 32.0;
  double dropout = 0.1;
};

/// y = x W^T + (alpha / r) * drop(x) A^T B^T.
struct LoraAdapter {
  Tensor a;  // [r, d_in], small random init
  Tensor b;  // [d_out, r], zero init
  double alpha = 32.0;
  double dropout = 0.1;

  Index rank() const { return a.dim(0); }
  double scaling() const { return alpha / static_cast<double>(rank()); }
  /// (alpha / r) B A, the effective [d_out, d_in] weight update.
  Eigen::MatrixXd delta_weight() const;
};

LoraAdapter init_lora(Index d_in, Index d_out, const LoraConfig& cfg, CounterRng& rng);

/// Dropout driver; a null rng or training == false makes dropout the identity.
struct DropoutContext {
  bool training = false;
  CounterRng* rng = nullptr;
};

/// x: [..., d_in], w: frozen [d_out, d_in].
Tensor lora_linear(const Tensor& x, const Tensor& w, const LoraAdapter& adapter, const DropoutContext& ctx = {});
/// Inverted dropout with keep probability 1 - p.
Tensor dropout(const Tensor& x, double p, const DropoutContext& ctx);

// -------------------------------------------------------- surrogate model

struct SurrogateConfig {
  Index d_k = 64;
  Index blocks = 2;
  Index heads = 4;
  Index vocab = 64;
  Index ffn_mult = 4;
  Index context = 64;
  /// rank 0 builds the adapter-free frozen model.
  LoraConfig lora;
  /// Attention projections carrying adapters, a subset of "qkvo".
  std::string lora_targets = "qv";
  /// Trainable per-token offsets added to the brain tokens.
  bool brain_offsets = true;
  Index brain_tokens = 8;
  std::uint64_t frozen_seed = 0x5eedf00dULL;
};

/// Weight matrices are [d_out, d_in].
struct SurrogateBlock {
  Tensor wq, wk, wv, wo;  // [d_k, d_k]
  Tensor w1;              // [ffn, d_k]
  Tensor w2;              // [d_k, ffn]
};

struct SurrogateModel {
  SurrogateConfig cfg;
  // Frozen.
  Tensor embedding;  // [vocab, d_k]
  Tensor positions;  // [context, d_k]
  std::vector<SurrogateBlock> blocks;
  // Trainable.
  // One adapter per block for each targeted projection; empty otherwise.
  std::vector<LoraAdapter> lora_q, lora_k, lora_v, lora_o;
  Tensor offsets;                           // [K, d_k]
  Tensor head_w;                            // [2, d_k]
  Tensor head_b;                            // [2]

  bool has_adapters() const { return !(lora_q.empty() && lora_k.empty() && lora_v.empty() && lora_o.empty()); }

  template <typename F>
  void visit(F&& f) {
    f("base.embedding", embedding);
    f("base.positions", positions);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "base.block" + std::to_string(i) + ".";
      f(p + "wq", blocks[i].wq);
      f(p + "wk", blocks[i].wk);
      f(p + "wv", blocks[i].wv);
      f(p + "wo", blocks[i].wo);
      f(p + "w1", blocks[i].w1);
      f(p + "w2", blocks[i].w2);
    }
    const std::pair<const char*, std::vector<LoraAdapter>*> groups[] = {
        {"q", &lora_q}, {"k", &lora_k}, {"v", &lora_v}, {"o", &lora_o}};
    for (std::size_t i = 0; i < blocks.size(); ++i)
      for (const auto& [tag, group] : groups)
        if (!group->empty()) {
          const std::string p = "lora.block" + std::to_string(i) + "." + tag + ".";
          f(p + "A", (*group)[i].a);
          f(p + "B", (*group)[i].b);
        }
    if (cfg.brain_offsets) f("brain.offsets", offsets);
    f("head.W", head_w);
    f("head.b", head_b);
  }
};

/// Frozen weights come from cfg.frozen_seed alone; adapters, offsets and the
/// head are drawn from `rng`.
SurrogateModel init_surrogate(const SurrogateConfig& cfg, CounterRng& rng);

/// Fixed instruction prompt (token ids).
std::vector<Index> default_prompt();

/// tokens: [K, d_k] brain tokens (K may be 0 for a prompt-only pass).
/// Returns 2 logits (index 0 = ASD, 1 = TC).
Tensor surrogate_forward(const Tensor& tokens, std::span<const Index> prompt, const SurrogateModel& model,
                         const DropoutContext& ctx = {});
Tensor surrogate_forward_prompt_only(std::span<const Index> prompt, const SurrogateModel& model,
                                     const DropoutContext& ctx = {});

/// True for parameters that never train (the base.* namespace).
bool is_frozen_name(const std::string& name);
/// FNV-1a over every base.* parameter.
std::uint64_t frozen_checksum(SurrogateModel& model);

struct ParameterCount {
  Index trainable = 0;
  Index total = 0;
  double fraction() const { return total ? static_cast<double>(trainable) / static_cast<double>(total) : 0.0; }
};
/// Trainable (adapters, offsets, head) versus all surrogate parameters.
ParameterCount count_parameters(SurrogateModel& model);

struct Prediction {
  Label label;
  double confidence;
};

/// argmax with ties resolved toward TC; confidence is the softmax probability.
Prediction classify(const Tensor& logits);

}  // namespace dyns
