#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "phanes/nn/layers.hpp"

namespace phanes::check {

struct GradCheckResult {
  double rel_error = 0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double grad_norm = 0;
  std::size_t checked = 0;
};

/// Compares backprop against central differences for every entry of `params`.
/// `loss` must rebuild the graph from the current parameter values each call.
inline GradCheckResult gradcheck(const nn::ParamList<double>& params, const std::function<nn::Var<double>()>& loss,
                                 double h = 1e-6) {
  nn::zero_grad(params);
  auto root = loss();
  nn::backward(root);
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.push_back(p.var.grad().storage());

  double diff2 = 0, a2 = 0, n2 = 0;
  GradCheckResult r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto var = params[i].var;
    auto values = var.mutable_value().values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double saved = values[k];
      values[k] = saved + h;
      const double up = loss().item();
      values[k] = saved - h;
      const double down = loss().item();
      values[k] = saved;
      const double numeric = (up - down) / (2 * h);
      diff2 += (numeric - analytic[i][k]) * (numeric - analytic[i][k]);
      a2 += analytic[i][k] * analytic[i][k];
      n2 += numeric * numeric;
      ++r.checked;
    }
  }
  r.grad_norm = std::sqrt(a2);
  const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
  r.rel_error = denom > 0 ? std::sqrt(diff2) / denom : std::sqrt(diff2);
  return r;
}

}  // namespace phanes::check
