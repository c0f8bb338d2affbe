#include "dyns/selective_ssm.hpp"

#include <algorithm>
#include <cmath>

namespace dyns {

template <typename S>
RowMat<S> scan_linear_sequential(const RowMat<S>& a, const RowMat<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("scan: transition and input shapes differ");
  RowMat<S> states(a.rows(), a.cols());
  Vec<S> s = Vec<S>::Zero(a.cols());
  for (Index t = 0; t < a.rows(); ++t) {
    s = a.row(t).transpose().cwiseProduct(s) + b.row(t).transpose();
    states.row(t) = s.transpose();
  }
  return states;
}

template <typename S>
RowMat<S> scan_linear_parallel(const RowMat<S>& a, const RowMat<S>& b, const ScanOptions& options) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("scan: transition and input shapes differ");
  const Index steps = a.rows(), width = a.cols();
  const Index chunk = std::max<Index>(1, options.chunk);
  const Index chunks = (steps + chunk - 1) / chunk;
  const int workers = options.workers > 0 ? options.workers : thread_limit();

  Index padded = 1;
  while (padded < chunks) padded *= 2;
  std::vector<ScanElement<S>> tree(static_cast<std::size_t>(padded), ScanElement<S>::identity(width));

  parallel_for(chunks, workers, [&](Index c) {
    ScanElement<S>& agg = tree[static_cast<std::size_t>(c)];
    const Index end = std::min(steps, (c + 1) * chunk);
    for (Index t = c * chunk; t < end; ++t) {
      const auto at = a.row(t).transpose();
      agg.b = at.cwiseProduct(agg.b) + b.row(t).transpose();
      agg.a = at.cwiseProduct(agg.a);
    }
  });

  for (Index s = 1; s < padded; s *= 2)
    for (Index i = 2 * s - 1; i < padded; i += 2 * s)
      tree[static_cast<std::size_t>(i)] = then(tree[static_cast<std::size_t>(i - s)], tree[static_cast<std::size_t>(i)]);
  tree.back() = ScanElement<S>::identity(width);
  for (Index s = padded / 2; s >= 1; s /= 2)
    for (Index i = 2 * s - 1; i < padded; i += 2 * s) {
      ScanElement<S> left = std::move(tree[static_cast<std::size_t>(i - s)]);
      tree[static_cast<std::size_t>(i - s)] = tree[static_cast<std::size_t>(i)];
      tree[static_cast<std::size_t>(i)] = then(tree[static_cast<std::size_t>(i)], left);
    }

  RowMat<S> states(steps, width);
  parallel_for(chunks, workers, [&](Index c) {
    Vec<S> s = tree[static_cast<std::size_t>(c)].b;  // carry-in state
    const Index end = std::min(steps, (c + 1) * chunk);
    for (Index t = c * chunk; t < end; ++t) {
      s = a.row(t).transpose().cwiseProduct(s) + b.row(t).transpose();
      states.row(t) = s.transpose();
    }
  });
  return states;
}

template RowMat<double> scan_linear_sequential(const RowMat<double>&, const RowMat<double>&);
template RowMat<float> scan_linear_sequential(const RowMat<float>&, const RowMat<float>&);
template RowMat<double> scan_linear_parallel(const RowMat<double>&, const RowMat<double>&, const ScanOptions&);
template RowMat<float> scan_linear_parallel(const RowMat<float>&, const RowMat<float>&, const ScanOptions&);

ScanBackend parse_scan_backend(const std::string& name) {
  if (name == "sequential") return ScanBackend::kSequential;
  if (name == "parallel") return ScanBackend::kParallel;
  throw ConfigError("unknown scan backend '" + name + "' (expected sequential or parallel)");
}

std::string to_string(ScanBackend backend) {
  return backend == ScanBackend::kSequential ? "sequential" : "parallel";
}

namespace {

Tensor gaussian(Shape shape, double stddev, CounterRng& rng) {
  Vec<Real> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(rng.normal() * stddev);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

SsmParams init_ssm(const SsmConfig& cfg, Index input_dim, CounterRng& rng) {
  if (cfg.d_h <= 0) throw ConfigError("d_h must be positive");
  if (cfg.blocks <= 0) throw ConfigError("SSM block count must be positive");
  if (input_dim <= 0) throw ConfigError("SSM input dimension must be positive");
  if (!(cfg.min_rate > 0 && cfg.max_rate >= cfg.min_rate)) throw ConfigError("SSM decay rates must satisfy 0 < min <= max");
  SsmParams params;
  for (Index j = 0; j < cfg.blocks; ++j) {
    const Index d_in = j == 0 ? input_dim : cfg.d_h;
    SsmBlockParams blk;
    Vec<Real> logits(cfg.d_h);
    for (Index k = 0; k < cfg.d_h; ++k) {
      const double u = cfg.d_h == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(cfg.d_h - 1);
      const double rate = cfg.min_rate * std::pow(cfg.max_rate / cfg.min_rate, u);
      logits[k] = static_cast<Real>(std::log(std::expm1(rate)));  // softplus^-1
    }
    blk.a_logit = Tensor({cfg.d_h}, std::move(logits));
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d_in));
    blk.w_delta = gaussian({d_in, cfg.d_h}, in_std, rng);
    blk.delta_bias = Tensor::zeros({cfg.d_h});
    blk.w_b = gaussian({d_in, cfg.d_h}, in_std, rng);
    // Residual blocks start as the identity map of the stack.
    blk.w_out = j == 0 ? gaussian({cfg.d_h, cfg.d_h}, 1.0 / std::sqrt(static_cast<double>(cfg.d_h)), rng)
                       : Tensor::zeros({cfg.d_h, cfg.d_h});
    params.blocks.push_back(std::move(blk));
  }
  return params;
}

SelectiveParams make_selective_params(const Tensor& x, const SsmBlockParams& p) {
  if (x.rank() != 1 && x.rank() != 2)
    throw DimensionError("selective params expect [d_in] or [T, d_in], got " + shape_to_string(x.shape()));
  if (x.dim(-1) != p.input_dim())
    throw DimensionError("selective params: input width " + std::to_string(x.dim(-1)) + " does not match block width " +
                         std::to_string(p.input_dim()));
  const Tensor x2 = x.rank() == 1 ? reshape(x, {1, x.dim(0)}) : x;
  SelectiveParams out;
  out.delta = softplus(add(matmul(x2, p.w_delta), p.delta_bias));
  out.transition = exp(scale(mul(out.delta, softplus(p.a_logit)), Real(-1)));
  out.input = mul(out.delta, matmul(x2, p.w_b));
  if (x.rank() == 1) {
    const Shape row{p.state_dim()};
    out.delta = reshape(out.delta, row);
    out.transition = reshape(out.transition, row);
    out.input = reshape(out.input, row);
  }
  return out;
}

Tensor selective_scan(const Tensor& transition, const Tensor& input, ScanBackend backend, const ScanOptions& options) {
  if (transition.rank() != 2 || transition.shape() != input.shape())
    throw DimensionError("selective_scan expects matching [T, d_h] operands, got " +
                         shape_to_string(transition.shape()) + " and " + shape_to_string(input.shape()));
  if (backend == ScanBackend::kParallel) {
    if (transition.requires_grad() || input.requires_grad())
      throw ContractError("the parallel scan backend is inference-only; differentiate the sequential backend");
    return Tensor::from_matrix(scan_linear_parallel<Real>(transition.matrix(), input.matrix(), options));
  }
  RowMat<Real> states = scan_linear_sequential<Real>(transition.matrix(), input.matrix());
  const Index steps = states.rows(), width = states.cols();
  Tensor out = Tensor::from_matrix(states);
  const Tensor a = transition.detach();
  const Tensor s = out.detach();
  return record_op<Real>(out, {&transition, &input}, [a, s, steps, width](const Vec<Real>& grad, Tape<Real>::Sink& sink) {
    // Adjoint recurrence, right to left: g_t = dS_t + A_{t+1} * g_{t+1}.
    Eigen::Map<const RowMat<Real>> gs(grad.data(), steps, width);
    const auto am = a.matrix();
    const auto sm = s.matrix();
    RowMat<Real> g(steps, width);
    Vec<Real> carry = Vec<Real>::Zero(width);
    for (Index t = steps - 1; t >= 0; --t) {
      carry = gs.row(t).transpose() + carry;
      g.row(t) = carry.transpose();
      carry = am.row(t).transpose().cwiseProduct(carry);
    }
    if (sink.wants(0)) {
      Eigen::Map<RowMat<Real>> da(sink.buffer(0).data(), steps, width);
      for (Index t = 1; t < steps; ++t) da.row(t) += g.row(t).cwiseProduct(sm.row(t - 1));
    }
    if (sink.wants(1)) sink.add(1, Eigen::Map<const Vec<Real>>(g.data(), g.size()));
  });
}

Tensor scan_sequential(const Tensor& x, const SsmBlockParams& p) {
  const SelectiveParams sp = make_selective_params(x, p);
  return selective_scan(sp.transition, sp.input, ScanBackend::kSequential);
}

Tensor scan_parallel(const Tensor& x, const SsmBlockParams& p, const ScanOptions& options) {
  const SelectiveParams sp = make_selective_params(x, p);
  return selective_scan(sp.transition, sp.input, ScanBackend::kParallel, options);
}

Tensor ssm_forward(const Tensor& x, const SsmParams& params, ScanBackend backend, const ScanOptions& options) {
  if (params.blocks.empty()) throw ConfigError("SSM has no blocks");
  if (x.rank() != 2) throw DimensionError("ssm_forward expects [T, d_in], got " + shape_to_string(x.shape()));
  Tensor y = x;
  for (std::size_t j = 0; j < params.blocks.size(); ++j) {
    const SelectiveParams sp = make_selective_params(y, params.blocks[j]);
    const Tensor states = selective_scan(sp.transition, sp.input, backend, options);
    const Tensor out = matmul(states, params.blocks[j].w_out);
    y = j == 0 ? out : add(y, out);
  }
  return y;
}

}  // namespace dyns
