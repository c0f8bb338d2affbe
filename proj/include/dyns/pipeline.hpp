#pragma once

#include <string>
#include <vector>

#include "dyns/backbones.hpp"
#include "dyns/checkpoint.hpp"
#include "dyns/latent_graph.hpp"
#include "dyns/token_align.hpp"

namespace dyns {

enum class GraphMode { kDynamic, kStaticMean, kStaticPearson };
enum class AlignMode { kTokens, kMeanPool, kRandom, kNone };

/// A named model variant. Names: full, static_graph, static_pearson,
/// frozen_llm, backbone:{gru|tcn|transformer|s4|mamba},
/// align:{tokens|meanpool|random|none}.
struct Variant {
  std::string name = "full";
  GraphMode graph = GraphMode::kDynamic;
  Backbone backbone = Backbone::kMamba;
  AlignMode align = AlignMode::kTokens;
  bool train_adapters = true;
};

Variant parse_variant(const std::string& name);

struct ModelConfig {
  Index rois = 16;
  NodeEncoderConfig encoder;
  FilterMode filter = FilterMode::kRowNormalized;
  SsmConfig ssm;
  SurrogateConfig surrogate;
  std::vector<Index> prompt = default_prompt();
};

/// Small configuration used by the tests and the synthetic benchmark:
/// d_lat 16, LoRA rank 4.
ModelConfig desk_model_config(Index rois = 16);

struct ModelParams {
  NodeEncoderParams encoder;
  TemporalModule temporal;
  CompressionParams compression;
  SurrogateModel surrogate;
  Tensor random_tokens;  // [K, d_k], constant input of align:random

  template <typename F>
  void visit(F&& f) {
    encoder.visit(f);
    temporal.visit(f);
    compression.visit(f);
    surrogate.visit(f);
    f("fixed.random_tokens", random_tokens);
  }
};

ModelParams init_model(const ModelConfig& cfg, const Variant& variant, std::uint64_t seed);

/// Parameters the optimizer may update under `variant`.
bool is_trainable(const std::string& name, const Variant& variant);

/// x: normalized [T, N] scan -> 2 logits.
Tensor model_forward(const ModelParams& params, const ModelConfig& cfg, const Variant& variant, const Tensor& x,
                     const DropoutContext& ctx = {}, ScanBackend backend = ScanBackend::kSequential);

/// Pearson correlation matrix of the columns of x (constant columns give 0
/// off-diagonal entries and 1 on the diagonal).
Tensor pearson_matrix(const Tensor& x);

std::vector<NamedTensor> to_named(ModelParams& params);
/// Overwrites every parameter from `named`; missing or mis-shaped entries throw ContentError.
void assign_named(ModelParams& params, const std::vector<NamedTensor>& named);

}  // namespace dyns
