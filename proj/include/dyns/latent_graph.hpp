#pragma once

#include <filesystem>

#include "dyns/ops.hpp"
#include "dyns/rng.hpp"

namespace dyns {

enum class FilterMode {
  kRaw,            // x~_t = G_t x_t
  kRowNormalized,  // x~_t = softmax_rows(G_t) x_t
};

FilterMode parse_filter_mode(const std::string& name);
std::string to_string(FilterMode mode);

struct NodeEncoderConfig {
  Index d_lat = 128;
  Index kernel_size = 3;
  Index heads = 4;
  bool attention = true;
};

/// Shared node encoder: one kernel bank applied to every ROI (grouped conv
/// with a single weight group), tanh, then self-attention across ROIs at each
/// time step with a residual connection. No projection carries a bias, so
/// the encoder maps zero input to zero embeddings when conv_bias is zero.
struct NodeEncoderParams {
  Tensor conv_weight;  // [1, d_lat, 1, kernel_size]
  Tensor conv_bias;    // [d_lat]
  Tensor w_query;      // [d_lat, d_lat], row-vector convention: q = e * W
  Tensor w_key;
  Tensor w_value;
  Tensor w_out;

  template <typename F>
  void visit(F&& f) {
    f("encoder.conv.weight", conv_weight);
    f("encoder.conv.bias", conv_bias);
    f("encoder.attn.query", w_query);
    f("encoder.attn.key", w_key);
    f("encoder.attn.value", w_value);
    f("encoder.attn.out", w_out);
  }
};

NodeEncoderParams init_node_encoder(const NodeEncoderConfig& cfg, CounterRng& rng);

/// x: [T, N] -> embeddings [T, N, d_lat].
Tensor encode_nodes(const Tensor& x, const NodeEncoderParams& params, const NodeEncoderConfig& cfg);

/// G[i, j] = <h_i, h_j> / sqrt(d_lat) for h: [N, d_lat] or [T, N, d_lat].
Tensor infer_adjacency(const Tensor& h);

/// G: [N, N] with x: [N], or G: [T, N, N] with x: [T, N].
Tensor graph_filter(const Tensor& g, const Tensor& x, FilterMode mode);

struct DynGraphSequence {
  Tensor adjacency;   // [T, N, N]
  Tensor filtered;    // [T, N]
  Tensor embeddings;  // [T, N, d_lat]
};

/// Embeds the whole scan, then infers and applies one graph per time step.
DynGraphSequence encode_sequence(const Tensor& x, const NodeEncoderParams& params, const NodeEncoderConfig& cfg,
                                 FilterMode mode);

/// Writes adjacency[t] to dir/adjacency_tNNNN.csv with header roi_0..roi_{N-1}.
void dump_adjacency_csv(const std::filesystem::path& dir, const Tensor& adjacency);

}  // namespace dyns
