#pragma once

#include <string>
#include <vector>

#include "phanes/nn/ops.hpp"
#include "phanes/rng.hpp"

namespace phanes::nn {

template <class T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

/// He-uniform weights, zero bias.
template <class T>
Tensor<T> he_uniform(Shape shape, int fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / fan_in);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, ConvSpec spec, Rng& rng)
      : weight(Var<T>::parameter(he_uniform<T>({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng))),
        bias(Var<T>::parameter(Tensor<T>({out_channels}))),
        spec(spec) {}

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, spec); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }

  Var<T> weight, bias;
  ConvSpec spec;
};

template <class T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(int in_channels, int out_channels, int kernel, ConvSpec spec, Rng& rng)
      : weight(Var<T>::parameter(he_uniform<T>({in_channels, out_channels, kernel, kernel}, in_channels * kernel * kernel / (spec.stride * spec.stride), rng))),
        bias(Var<T>::parameter(Tensor<T>({out_channels}))),
        spec(spec) {}

  Var<T> operator()(const Var<T>& x) const { return conv_transpose2d(x, weight, bias, spec); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }

  Var<T> weight, bias;
  ConvSpec spec;
};

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng)
      : weight(Var<T>::parameter(he_uniform<T>({out, in}, in, rng))), bias(Var<T>::parameter(Tensor<T>({out}))) {}

  Var<T> operator()(const Var<T>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }

  Var<T> weight, bias;
};

template <class T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.numel();
  return n;
}

/// Marks parameters as constants so graphs built on them record nothing.
template <class T>
void freeze(const ParamList<T>& params) {
  for (const auto& p : params) p.var.node()->requires_grad = false;
}

template <class T>
void zero_grad(const ParamList<T>& params) {
  for (auto p : params) p.var.zero_grad();
}

}  // namespace phanes::nn
