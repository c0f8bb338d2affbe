#include "dyns/backbones.hpp"

#include <cmath>

namespace dyns {

Backbone parse_backbone(const std::string& name) {
  if (name == "gru") return Backbone::kGru;
  if (name == "tcn") return Backbone::kTcn;
  if (name == "transformer") return Backbone::kTransformer;
  if (name == "s4") return Backbone::kS4;
  if (name == "mamba") return Backbone::kMamba;
  throw ConfigError("unknown backbone '" + name + "' (expected gru, tcn, transformer, s4 or mamba)");
}

std::string to_string(Backbone backbone) {
  switch (backbone) {
    case Backbone::kGru: return "gru";
    case Backbone::kTcn: return "tcn";
    case Backbone::kTransformer: return "transformer";
    case Backbone::kS4: return "s4";
    case Backbone::kMamba: return "mamba";
  }
  return "mamba";
}

const Tensor& TemporalModule::weight(const std::string& suffix) const {
  const std::string name = "temporal." + to_string(kind) + "." + suffix;
  for (const auto& w : weights)
    if (w.name == name) return w.value;
  throw ContractError("temporal module has no weight " + name);
}

namespace {

constexpr Index kTcnKernel = 3;
constexpr Index kTransformerHeads = 4;

Tensor gaussian(Shape shape, double stddev, CounterRng& rng) {
  Vec<Real> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(rng.normal() * stddev);
  return Tensor(std::move(shape), std::move(v));
}

double inv_sqrt(Index n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

Tensor sinusoidal_positions(Index steps, Index width) {
  RowMat<Real> p(steps, width);
  for (Index t = 0; t < steps; ++t)
    for (Index j = 0; j < width; ++j) {
      const double freq = std::pow(10000.0, -static_cast<double>(j / 2 * 2) / static_cast<double>(width));
      p(t, j) = static_cast<Real>(j % 2 == 0 ? std::sin(t * freq) : std::cos(t * freq));
    }
  return Tensor::from_matrix(p);
}

Tensor gru_forward(const TemporalModule& m, const Tensor& x) {
  const Index steps = x.dim(0);
  const Tensor xz = add(matmul(x, m.weight("wz")), m.weight("bz"));
  const Tensor xr = add(matmul(x, m.weight("wr")), m.weight("br"));
  const Tensor xn = add(matmul(x, m.weight("wn")), m.weight("bn"));
  const Tensor& uz = m.weight("uz");
  const Tensor& ur = m.weight("ur");
  const Tensor& un = m.weight("un");
  const Index width = uz.dim(0);
  Tensor h = Tensor::zeros({1, width});
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(steps));
  for (Index t = 0; t < steps; ++t) {
    const Tensor z = sigmoid(add(slice_rows(xz, t, 1), matmul(h, uz)));
    const Tensor r = sigmoid(add(slice_rows(xr, t, 1), matmul(h, ur)));
    const Tensor n = tanh(add(slice_rows(xn, t, 1), mul(r, matmul(h, un))));
    h = add(n, mul(z, sub(h, n)));  // (1 - z) n + z h
    out.push_back(h);
  }
  return concat_rows<Real>(out);
}

Tensor transformer_forward(const TemporalModule& m, const Tensor& x) {
  const Index width = m.weight("w_in").dim(1);
  Tensor h = add(matmul(x, m.weight("w_in")), sinusoidal_positions(x.dim(0), width));
  Tensor n = rms_norm_rows(h);
  const Tensor attn = multi_head_attention(matmul(n, m.weight("wq")), matmul(n, m.weight("wk")),
                                           matmul(n, m.weight("wv")), kTransformerHeads);
  h = add(h, matmul(attn, m.weight("wo")));
  n = rms_norm_rows(h);
  return add(h, matmul(relu(matmul(n, m.weight("w1"))), m.weight("w2")));
}

Tensor s4_forward(const TemporalModule& m, const Tensor& x) {
  // Input-independent diagonal SSM: the same A and step size at every t.
  const Tensor dt = softplus(m.weight("dt_logit"));
  const Tensor a_row = exp(scale(mul(dt, softplus(m.weight("a_logit"))), Real(-1)));
  const Tensor u = mul(matmul(x, m.weight("w_b")), dt);
  const Tensor transition = mul(Tensor::ones(u.shape()), a_row);
  return matmul(selective_scan(transition, u), m.weight("w_out"));
}

}  // namespace

TemporalModule init_temporal(Backbone kind, const SsmConfig& cfg, Index input_dim, CounterRng& rng) {
  if (cfg.d_h <= 0 || input_dim <= 0) throw ConfigError("temporal module sizes must be positive");
  TemporalModule m;
  m.kind = kind;
  if (kind == Backbone::kMamba) {
    m.ssm = init_ssm(cfg, input_dim, rng);
    return m;
  }
  const Index d = cfg.d_h, n = input_dim;
  const std::string prefix = "temporal." + to_string(kind) + ".";
  auto add_weight = [&](const std::string& name, Tensor value) { m.weights.push_back({prefix + name, std::move(value)}); };
  switch (kind) {
    case Backbone::kGru:
      for (const char* g : {"z", "r", "n"}) {
        add_weight(std::string("w") + g, gaussian({n, d}, inv_sqrt(n), rng));
        add_weight(std::string("u") + g, gaussian({d, d}, inv_sqrt(d), rng));
        add_weight(std::string("b") + g, Tensor::zeros({d}));
      }
      break;
    case Backbone::kTcn:
      add_weight("conv1.weight", gaussian({1, d, n, kTcnKernel}, std::sqrt(2.0 / static_cast<double>(n * kTcnKernel)), rng));
      add_weight("conv1.bias", Tensor::zeros({d}));
      add_weight("conv2.weight", gaussian({1, d, d, kTcnKernel}, 0.5 * inv_sqrt(d * kTcnKernel), rng));
      add_weight("conv2.bias", Tensor::zeros({d}));
      break;
    case Backbone::kTransformer:
      if (d % kTransformerHeads != 0)
        throw ConfigError("transformer backbone needs d_h divisible by " + std::to_string(kTransformerHeads));
      add_weight("w_in", gaussian({n, d}, inv_sqrt(n), rng));
      for (const char* w : {"wq", "wk", "wv"}) add_weight(w, gaussian({d, d}, inv_sqrt(d), rng));
      add_weight("wo", gaussian({d, d}, 0.5 * inv_sqrt(d), rng));
      add_weight("w1", gaussian({d, 4 * d}, inv_sqrt(d), rng));
      add_weight("w2", gaussian({4 * d, d}, 0.5 * inv_sqrt(4 * d), rng));
      break;
    case Backbone::kS4: {
      const SsmBlockParams ref = init_ssm(SsmConfig{d, 1, cfg.min_rate, cfg.max_rate}, n, rng).blocks.front();
      add_weight("a_logit", ref.a_logit);
      add_weight("dt_logit", Tensor::zeros({d}));
      add_weight("w_b", ref.w_b);
      add_weight("w_out", ref.w_out);
      break;
    }
    case Backbone::kMamba: break;
  }
  return m;
}

Tensor temporal_forward(const TemporalModule& module, const Tensor& x, ScanBackend backend) {
  if (x.rank() != 2) throw DimensionError("temporal modules expect [T, d_in], got " + shape_to_string(x.shape()));
  switch (module.kind) {
    case Backbone::kMamba: return ssm_forward(x, module.ssm, backend);
    case Backbone::kGru: return gru_forward(module, x);
    case Backbone::kTcn: {
      const Tensor h = relu(add(grouped_conv1d(x, kTcnKernel, module.weight("conv1.weight"), 1), module.weight("conv1.bias")));
      return add(h, add(grouped_conv1d(h, kTcnKernel, module.weight("conv2.weight"), 1), module.weight("conv2.bias")));
    }
    case Backbone::kTransformer: return transformer_forward(module, x);
    case Backbone::kS4: return s4_forward(module, x);
  }
  throw ContractError("unhandled backbone");
}

}  // namespace dyns
