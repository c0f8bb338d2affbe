#pragma once

#include <span>
#include <vector>

#include "dyns/tape.hpp"

// Differentiable tensor ops. Every function records a node when any input is
// on a tape; otherwise it is a plain numeric function.
//
// Broadcasting is limited to two cases: identical shapes, or one operand's
// shape being a suffix of the other's (this covers rank-0 scalars and
// leading-batch broadcasting). Anything else is a DimensionError.

namespace dyns {

// Elementwise binary.
template <typename S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b);
template <typename S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b);

// Elementwise unary.
template <typename S>
BasicTensor<S> scale(const BasicTensor<S>& a, S factor);
template <typename S>
BasicTensor<S> add_scalar(const BasicTensor<S>& a, S value);
template <typename S>
BasicTensor<S> relu(const BasicTensor<S>& a);
template <typename S>
BasicTensor<S> exp(const BasicTensor<S>& a);
template <typename S>
BasicTensor<S> log(const BasicTensor<S>& a);
/// log(1 + e^x), evaluated without overflow.
template <typename S>
BasicTensor<S> softplus(const BasicTensor<S>& a);
template <typename S>
BasicTensor<S> sigmoid(const BasicTensor<S>& a);
template <typename S>
BasicTensor<S> tanh(const BasicTensor<S>& a);

// Reductions.
template <typename S>
BasicTensor<S> sum(const BasicTensor<S>& a);
template <typename S>
BasicTensor<S> mean(const BasicTensor<S>& a);
/// Mean over axis 0; the result has shape a.shape[1:].
template <typename S>
BasicTensor<S> mean_leading(const BasicTensor<S>& a);

// Shape manipulation.
template <typename S>
BasicTensor<S> reshape(const BasicTensor<S>& a, Shape shape);
/// Swaps the last two axes.
template <typename S>
BasicTensor<S> transpose(const BasicTensor<S>& a);
template <typename S>
BasicTensor<S> permute(const BasicTensor<S>& a, const std::vector<Index>& axes);
/// Concatenates along axis 0; trailing extents must agree.
template <typename S>
BasicTensor<S> concat_rows(std::span<const BasicTensor<S>> parts);
template <typename S>
BasicTensor<S> slice_rows(const BasicTensor<S>& a, Index begin, Index count);
/// Row lookup (embedding): out[i] = table[ids[i]].
template <typename S>
BasicTensor<S> gather_rows(const BasicTensor<S>& table, std::span<const Index> ids);

/// Matrix product over the last two axes.
///
/// [m,k] x [k,n]; [...,m,k] x [k,n] (right operand shared across the batch);
/// [...,m,k] x [...,k,n] with identical leading extents.
template <typename S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b);

/// Row-wise softmax over the last axis, stabilized by row-max subtraction.
template <typename S>
BasicTensor<S> softmax_rows(const BasicTensor<S>& a);
/// Softmax with columns where keep[j] == false removed (probability exactly 0).
template <typename S>
BasicTensor<S> masked_softmax_rows(const BasicTensor<S>& a, std::span<const bool> keep);
/// x / sqrt(mean(x^2) + eps) per row of the last axis.
template <typename S>
BasicTensor<S> rms_norm_rows(const BasicTensor<S>& a, S eps = S(1e-6));

/// Grouped 1-D temporal convolution (cross-correlation) with zero "same" padding.
///
/// x is [T, C_in]; weights is [G_w, C_out/groups, C_in/groups, kernel_size] with
/// G_w == groups, or G_w == 1 to share one kernel bank across every group.
/// Output channel g*(C_out/groups)+o reads only input channels of group g.
template <typename S>
BasicTensor<S> grouped_conv1d(const BasicTensor<S>& x, Index kernel_size, const BasicTensor<S>& weights,
                              Index group_count);

/// out[..., i, j] = factor * <h_i, h_j> for h of shape [..., N, d]. Each pair is
/// computed once and mirrored, so the result is exactly symmetric.
template <typename S>
BasicTensor<S> pairwise_gram(const BasicTensor<S>& h, S factor);

/// Scaled dot-product attention with `heads` heads over the second-to-last
/// axis of q/k/v ([L, d] or [B, L, d]); d must be divisible by heads.
template <typename S>
BasicTensor<S> multi_head_attention(const BasicTensor<S>& q, const BasicTensor<S>& k, const BasicTensor<S>& v,
                                    Index heads);

}  // namespace dyns
