#include "dyns/latent_graph.hpp"

#include <cmath>
#include <cstdio>

#include "dyns/data_pipeline.hpp"

namespace dyns {

FilterMode parse_filter_mode(const std::string& name) {
  if (name == "raw") return FilterMode::kRaw;
  if (name == "row_normalized") return FilterMode::kRowNormalized;
  throw ConfigError("unknown filter mode '" + name + "' (expected raw or row_normalized)");
}

std::string to_string(FilterMode mode) { return mode == FilterMode::kRaw ? "raw" : "row_normalized"; }

namespace {

Tensor gaussian(Shape shape, double stddev, CounterRng& rng) {
  Vec<Real> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(rng.normal() * stddev);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

NodeEncoderParams init_node_encoder(const NodeEncoderConfig& cfg, CounterRng& rng) {
  if (cfg.d_lat <= 0) throw ConfigError("d_lat must be positive");
  if (cfg.heads <= 0 || cfg.d_lat % cfg.heads != 0)
    throw ConfigError("d_lat " + std::to_string(cfg.d_lat) + " is not divisible by " + std::to_string(cfg.heads) +
                      " attention heads");
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_lat));
  NodeEncoderParams p;
  p.conv_weight = gaussian({1, cfg.d_lat, 1, cfg.kernel_size}, std::sqrt(2.0 / static_cast<double>(cfg.kernel_size)), rng);
  p.conv_bias = Tensor::zeros({cfg.d_lat});
  p.w_query = gaussian({cfg.d_lat, cfg.d_lat}, attn_std, rng);
  p.w_key = gaussian({cfg.d_lat, cfg.d_lat}, attn_std, rng);
  p.w_value = gaussian({cfg.d_lat, cfg.d_lat}, attn_std, rng);
  p.w_out = gaussian({cfg.d_lat, cfg.d_lat}, 0.5 * attn_std, rng);
  return p;
}

Tensor encode_nodes(const Tensor& x, const NodeEncoderParams& params, const NodeEncoderConfig& cfg) {
  if (x.rank() != 2) throw DimensionError("encode_nodes expects [T, N], got " + shape_to_string(x.shape()));
  const Index steps = x.dim(0), rois = x.dim(1);
  if (steps < cfg.kernel_size)
    throw ContentError("input too short: T=" + std::to_string(steps) + " < kernel_size=" +
                       std::to_string(cfg.kernel_size));
  if (rois < 2) throw ContentError("encode_nodes needs at least 2 ROIs, got " + std::to_string(rois));

  // One group per ROI, one shared kernel bank: [T, N * d_lat]. tanh keeps the
  // features zero-centred, so unrelated ROIs get near-zero affinity.
  Tensor features = grouped_conv1d(x, cfg.kernel_size, params.conv_weight, rois);
  features = reshape(features, {steps, rois, cfg.d_lat});
  features = tanh(add(features, params.conv_bias));
  if (!cfg.attention) return features;

  const Tensor q = matmul(features, params.w_query);
  const Tensor k = matmul(features, params.w_key);
  const Tensor v = matmul(features, params.w_value);
  const Tensor mixed = matmul(multi_head_attention(q, k, v, cfg.heads), params.w_out);
  return add(features, mixed);
}

Tensor infer_adjacency(const Tensor& h) {
  if (h.rank() != 2 && h.rank() != 3)
    throw DimensionError("infer_adjacency expects [N, d] or [T, N, d], got " + shape_to_string(h.shape()));
  return pairwise_gram(h, Real(1) / std::sqrt(static_cast<Real>(h.dim(-1))));
}

Tensor graph_filter(const Tensor& g, const Tensor& x, FilterMode mode) {
  const bool single = g.rank() == 2 && x.rank() == 1;
  const bool batched = g.rank() == 3 && x.rank() == 2;
  if ((!single && !batched) || g.dim(-1) != g.dim(-2) || g.dim(-1) != x.dim(-1) ||
      (batched && g.dim(0) != x.dim(0)))
    throw DimensionError("graph_filter: incompatible shapes " + shape_to_string(g.shape()) + " and " +
                         shape_to_string(x.shape()));
  const Tensor weights = mode == FilterMode::kRowNormalized ? softmax_rows(g) : g;
  const Index n = x.dim(-1);
  if (single) return reshape(matmul(weights, reshape(x, {n, 1})), {n});
  const Index steps = x.dim(0);
  return reshape(matmul(weights, reshape(x, {steps, n, 1})), {steps, n});
}

DynGraphSequence encode_sequence(const Tensor& x, const NodeEncoderParams& params, const NodeEncoderConfig& cfg,
                                 FilterMode mode) {
  DynGraphSequence seq;
  seq.embeddings = encode_nodes(x, params, cfg);
  seq.adjacency = infer_adjacency(seq.embeddings);
  seq.filtered = graph_filter(seq.adjacency, x, mode);
  return seq;
}

void dump_adjacency_csv(const std::filesystem::path& dir, const Tensor& adjacency) {
  if (adjacency.rank() != 3) throw DimensionError("dump_adjacency_csv expects [T, N, N]");
  std::filesystem::create_directories(dir);
  const Index steps = adjacency.dim(0), n = adjacency.dim(1);
  for (Index t = 0; t < steps; ++t) {
    char name[48];
    std::snprintf(name, sizeof(name), "adjacency_t%04lld.csv", static_cast<long long>(t));
    write_roi_csv(dir / name, reshape(slice_rows(adjacency.detach(), t, 1), {n, n}));
  }
}

}  // namespace dyns
