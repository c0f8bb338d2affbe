#include "dyns/gradcheck.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace dyns {

template <typename S>
GradCheckReport<S> finite_diff_report(const ScalarFn<S>& fn, std::span<const BasicTensor<S>> params, S eps, S floor) {
  if (!(eps > S(0))) throw ContractError("finite_diff_check: eps must be positive");

  std::vector<BasicTensor<S>> point;
  point.reserve(params.size());
  for (const auto& p : params) point.push_back(p.detach());

  auto eval = [&](const std::vector<BasicTensor<S>>& at) {
    const BasicTensor<S> v = fn(std::span<const BasicTensor<S>>(at));
    if (v.numel() != 1) throw ContractError("finite_diff_check: function must return a scalar");
    return v.item();
  };

  const S first = eval(point);
  const S second = eval(point);
  if (first != second)
    throw OracleError("finite_diff_check: function is not deterministic (" + std::to_string(first) + " vs " +
                      std::to_string(second) + ")");

  Tape<S> tape;
  std::vector<BasicTensor<S>> watched;
  watched.reserve(point.size());
  for (const auto& p : point) watched.push_back(tape.watch(p));
  const BasicTensor<S> loss = fn(std::span<const BasicTensor<S>>(watched));
  const Gradients<S> grads = tape.backward(loss);

  GradCheckReport<S> report;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const BasicTensor<S> analytic = grads[watched[i]];
    const BasicTensor<S> original = point[i];
    for (Index j = 0; j < original.numel(); ++j) {
      BasicTensor<S> shifted = original;
      shifted.mutable_data()[j] = original.data()[j] + eps;
      point[i] = shifted;
      const S plus = eval(point);
      shifted = original;
      shifted.mutable_data()[j] = original.data()[j] - eps;
      point[i] = shifted;
      const S minus = eval(point);
      point[i] = original;

      const S numeric = (plus - minus) / (S(2) * eps);
      const S a = analytic.data()[j];
      const S denom = std::max({std::abs(a), std::abs(numeric), floor});
      const S rel = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (!(rel <= report.max_rel_error)) {
        report.max_rel_error = rel;
        report.worst_param = static_cast<Index>(i);
        report.worst_index = j;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

template GradCheckReport<double> finite_diff_report(const ScalarFn<double>&, std::span<const BasicTensor<double>>,
                                                    double, double);
template GradCheckReport<float> finite_diff_report(const ScalarFn<float>&, std::span<const BasicTensor<float>>, float,
                                                   float);

}  // namespace dyns
