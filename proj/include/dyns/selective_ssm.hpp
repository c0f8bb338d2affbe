#pragma once

#include <string>
#include <vector>

#include "dyns/ops.hpp"
#include "dyns/rng.hpp"

namespace dyns {

// ------------------------------------------------------------------ kernels
//
// Diagonal linear recurrence s_t = a_t * s_{t-1} + b_t with s_0 = 0, where
// row t of `a` and `b` holds the per-channel transition and input of step t.

/// One step of the recurrence viewed as an affine map s -> a * s + b.
template <typename S>
struct ScanElement {
  Vec<S> a;
  Vec<S> b;

  static ScanElement identity(Index width) { return {Vec<S>::Ones(width), Vec<S>::Zero(width)}; }
};

/// Applies `earlier` first, then `later`: (a2*a1, a2*b1 + b2).
template <typename S>
ScanElement<S> then(const ScanElement<S>& earlier, const ScanElement<S>& later) {
  return {later.a.cwiseProduct(earlier.a), later.a.cwiseProduct(earlier.b) + later.b};
}

struct ScanOptions {
  /// Steps per chunk; each chunk is scanned sequentially.
  Index chunk = 64;
  /// 0 means the global thread limit.
  int workers = 0;
};

/// Left-to-right reference scan. Returns the [T, d] state sequence.
template <typename S>
RowMat<S> scan_linear_sequential(const RowMat<S>& a, const RowMat<S>& b);

/// Chunked work-efficient prefix scan: chunk aggregates, an up-sweep /
/// down-sweep exclusive scan over chunks, then a sequential rescan of every
/// chunk from its carry-in state. The operator tree depends only on T and the
/// chunk size, so the result does not depend on the worker count.
template <typename S>
RowMat<S> scan_linear_parallel(const RowMat<S>& a, const RowMat<S>& b, const ScanOptions& options = {});

extern template RowMat<double> scan_linear_sequential(const RowMat<double>&, const RowMat<double>&);
extern template RowMat<float> scan_linear_sequential(const RowMat<float>&, const RowMat<float>&);
extern template RowMat<double> scan_linear_parallel(const RowMat<double>&, const RowMat<double>&, const ScanOptions&);
extern template RowMat<float> scan_linear_parallel(const RowMat<float>&, const RowMat<float>&, const ScanOptions&);

// ------------------------------------------------------------------- model

enum class ScanBackend { kSequential, kParallel };

ScanBackend parse_scan_backend(const std::string& name);
std::string to_string(ScanBackend backend);

struct SsmConfig {
  Index d_h = 16;
  Index blocks = 2;
  /// Range of the initial decay rates softplus(a), log-spaced over channels.
  double min_rate = 0.2;
  double max_rate = 1.0;
};

/// One selective block. Row-vector convention: projections are x * W.
///
///   delta_t = softplus(x_t * w_delta + delta_bias)
///   A_t     = exp(-delta_t * softplus(a_logit))
///   b_t     = delta_t * (x_t * w_b)          (B_t x_t with B_t = diag(delta_t) w_b^T)
///   s_t     = A_t * s_{t-1} + b_t
struct SsmBlockParams {
  Tensor a_logit;     // [d_h]
  Tensor w_delta;     // [d_in, d_h]
  Tensor delta_bias;  // [d_h]
  Tensor w_b;         // [d_in, d_h]
  Tensor w_out;       // [d_h, d_h]

  Index state_dim() const { return a_logit.dim(0); }
  Index input_dim() const { return w_b.dim(0); }
};

/// Stacked blocks: y_1 = S_1 w_out_1, y_j = y_{j-1} + S_j w_out_j.
struct SsmParams {
  std::vector<SsmBlockParams> blocks;

  Index state_dim() const { return blocks.front().state_dim(); }

  template <typename F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "ssm.block" + std::to_string(i) + ".";
      f(p + "a_logit", blocks[i].a_logit);
      f(p + "w_delta", blocks[i].w_delta);
      f(p + "delta_bias", blocks[i].delta_bias);
      f(p + "w_b", blocks[i].w_b);
      f(p + "w_out", blocks[i].w_out);
    }
  }
};

SsmParams init_ssm(const SsmConfig& cfg, Index input_dim, CounterRng& rng);

struct SelectiveParams {
  Tensor transition;  // A_t diagonals, [T, d_h], entries in (0, 1)
  Tensor input;       // b_t = B_t x_t, [T, d_h]
  Tensor delta;       // [T, d_h]
};

/// Per-step parameters for x of shape [T, d_in] (or [d_in] for one step).
SelectiveParams make_selective_params(const Tensor& x, const SsmBlockParams& p);

/// Differentiable recurrence over precomputed (A, b), both [T, d_h].
/// The parallel backend is inference only: it throws ContractError when an
/// input requires a gradient.
Tensor selective_scan(const Tensor& transition, const Tensor& input, ScanBackend backend = ScanBackend::kSequential,
                      const ScanOptions& options = {});

/// States [T, d_h] of one block.
Tensor scan_sequential(const Tensor& x, const SsmBlockParams& p);
Tensor scan_parallel(const Tensor& x, const SsmBlockParams& p, const ScanOptions& options = {});

/// Full stack; returns the [T, d_h] feature sequence.
Tensor ssm_forward(const Tensor& x, const SsmParams& params, ScanBackend backend = ScanBackend::kSequential,
                   const ScanOptions& options = {});

}  // namespace dyns
