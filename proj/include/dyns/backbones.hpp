#pragma once

#include <string>
#include <vector>

#include "dyns/checkpoint.hpp"
#include "dyns/selective_ssm.hpp"

namespace dyns {

/// Temporal modules that map a filtered sequence [T, d_in] to features
/// [T, d_h]. Everything except kMamba is a single-layer desk-scale variant.
enum class Backbone { kGru, kTcn, kTransformer, kS4, kMamba };

Backbone parse_backbone(const std::string& name);
std::string to_string(Backbone backbone);

struct TemporalModule {
  Backbone kind = Backbone::kMamba;
  SsmParams ssm;                     // kMamba
  std::vector<NamedTensor> weights;  // other kinds, named temporal.<kind>.*

  const Tensor& weight(const std::string& suffix) const;

  template <typename F>
  void visit(F&& f) {
    if (kind == Backbone::kMamba) {
      ssm.visit(f);
      return;
    }
    for (auto& w : weights) f(w.name, w.value);
  }
};

TemporalModule init_temporal(Backbone kind, const SsmConfig& cfg, Index input_dim, CounterRng& rng);

Tensor temporal_forward(const TemporalModule& module, const Tensor& x, ScanBackend backend = ScanBackend::kSequential);

}  // namespace dyns
