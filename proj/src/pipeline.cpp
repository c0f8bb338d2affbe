#include "dyns/pipeline.hpp"

#include <cmath>
#include <map>

namespace dyns {

Variant parse_variant(const std::string& name) {
  Variant v;
  v.name = name;
  if (name == "full") return v;
  if (name == "static_graph") {
    v.graph = GraphMode::kStaticMean;
    return v;
  }
  if (name == "static_pearson") {
    v.graph = GraphMode::kStaticPearson;
    return v;
  }
  if (name == "frozen_llm") {
    v.train_adapters = false;
    return v;
  }
  if (name.rfind("backbone:", 0) == 0) {
    v.backbone = parse_backbone(name.substr(9));
    return v;
  }
  if (name.rfind("align:", 0) == 0) {
    const std::string mode = name.substr(6);
    if (mode == "tokens") v.align = AlignMode::kTokens;
    else if (mode == "meanpool") v.align = AlignMode::kMeanPool;
    else if (mode == "random") v.align = AlignMode::kRandom;
    else if (mode == "none") v.align = AlignMode::kNone;
    else throw ConfigError("unknown alignment mode '" + mode + "' (expected tokens, meanpool, random or none)");
    return v;
  }
  throw ConfigError("unknown variant '" + name + "'");
}

ModelConfig desk_model_config(Index rois) {
  ModelConfig cfg;
  cfg.rois = rois;
  cfg.encoder.d_lat = 16;
  cfg.surrogate.lora.rank = 4;
  return cfg;
}

ModelParams init_model(const ModelConfig& cfg, const Variant& variant, std::uint64_t seed) {
  if (cfg.rois < 2) throw ConfigError("model needs at least 2 ROIs");
  ModelParams p;
  CounterRng enc_rng(seed, 101), tmp_rng(seed, 102), cmp_rng(seed, 103), sur_rng(seed, 104), tok_rng(seed, 105);
  p.encoder = init_node_encoder(cfg.encoder, enc_rng);
  p.temporal = init_temporal(variant.backbone, cfg.ssm, cfg.rois, tmp_rng);
  p.compression = init_compression(cfg.surrogate.brain_tokens, cfg.ssm.d_h, cfg.surrogate.d_k, cmp_rng);
  p.surrogate = init_surrogate(cfg.surrogate, sur_rng);
  Vec<Real> tokens(cfg.surrogate.brain_tokens * cfg.surrogate.d_k);
  for (Index i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<Real>(tok_rng.normal());
  p.random_tokens = Tensor({cfg.surrogate.brain_tokens, cfg.surrogate.d_k}, std::move(tokens));
  return p;
}

bool is_trainable(const std::string& name, const Variant& variant) {
  if (is_frozen_name(name) || name.rfind("fixed.", 0) == 0) return false;
  if (!variant.train_adapters && name.rfind("lora.", 0) == 0) return false;
  return true;
}

Tensor pearson_matrix(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("pearson_matrix expects [T, N]");
  const Eigen::MatrixXd m = x.matrix().template cast<double>();
  const Eigen::MatrixXd centered = m.rowwise() - m.colwise().mean();
  const Eigen::VectorXd norms = centered.colwise().norm();
  Eigen::MatrixXd c = centered.transpose() * centered;
  for (Index i = 0; i < c.rows(); ++i)
    for (Index j = 0; j < c.cols(); ++j) {
      const double d = norms[i] * norms[j];
      c(i, j) = i == j ? 1.0 : (d > 0 ? c(i, j) / d : 0.0);
    }
  return Tensor::from_matrix(c.cast<Real>());
}

namespace {

Tensor filter_static(const Tensor& g, const Tensor& x, FilterMode mode) {
  const Tensor w = mode == FilterMode::kRowNormalized ? softmax_rows(g) : g;
  return matmul(x, transpose(w));  // row t is W x_t
}

}  // namespace

Tensor model_forward(const ModelParams& params, const ModelConfig& cfg, const Variant& variant, const Tensor& x,
                     const DropoutContext& ctx, ScanBackend backend) {
  if (x.rank() != 2 || x.dim(1) != cfg.rois)
    throw DimensionError("model expects [T, " + std::to_string(cfg.rois) + "], got " + shape_to_string(x.shape()));
  if (variant.align == AlignMode::kNone) return surrogate_forward_prompt_only(cfg.prompt, params.surrogate, ctx);
  if (variant.align == AlignMode::kRandom) return surrogate_forward(params.random_tokens, cfg.prompt, params.surrogate, ctx);

  Tensor filtered;
  switch (variant.graph) {
    case GraphMode::kDynamic:
      filtered = encode_sequence(x, params.encoder, cfg.encoder, cfg.filter).filtered;
      break;
    case GraphMode::kStaticMean:
      filtered = filter_static(mean_leading(infer_adjacency(encode_nodes(x, params.encoder, cfg.encoder))), x, cfg.filter);
      break;
    case GraphMode::kStaticPearson:
      filtered = filter_static(pearson_matrix(x), x, cfg.filter);
      break;
  }
  const Tensor states = temporal_forward(params.temporal, filtered, backend);
  CompressOptions opts;
  opts.uniform = variant.align == AlignMode::kMeanPool;
  return surrogate_forward(compress_tokens(states, params.compression, opts), cfg.prompt, params.surrogate, ctx);
}

std::vector<NamedTensor> to_named(ModelParams& params) {
  std::vector<NamedTensor> out;
  params.visit([&](const std::string& name, Tensor& t) { out.push_back({name, t.detach()}); });
  return out;
}

void assign_named(ModelParams& params, const std::vector<NamedTensor>& named) {
  std::map<std::string, const Tensor*> index;
  for (const auto& n : named) index[n.name] = &n.value;
  params.visit([&](const std::string& name, Tensor& t) {
    auto it = index.find(name);
    if (it == index.end()) throw ContentError("checkpoint lacks parameter " + name);
    if (it->second->shape() != t.shape())
      throw ContentError("checkpoint parameter " + name + " has shape " + shape_to_string(it->second->shape()) +
                         ", expected " + shape_to_string(t.shape()));
    t = *it->second;
  });
}

}  // namespace dyns
