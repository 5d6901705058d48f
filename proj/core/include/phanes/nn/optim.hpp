#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "phanes/nn/layers.hpp"

namespace phanes::nn {

struct AdamOptions {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed parameter list. Moments are kept in double.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(ParamList<T> params, AdamOptions options) : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.numel(), 0.0);
      v_.emplace_back(p.var.numel(), 0.0);
    }
  }

  void step() {
    ++step_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto var = params_[i].var;
      const auto& g = var.grad();
      auto& w = var.mutable_value();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.numel(); ++k) {
        const double gk = static_cast<double>(g[k]);
        m[k] = options_.beta1 * m[k] + (1.0 - options_.beta1) * gk;
        v[k] = options_.beta2 * v[k] + (1.0 - options_.beta2) * gk * gk;
        const double update = options_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + options_.eps);
        w[k] = static_cast<T>(static_cast<double>(w[k]) - update);
      }
    }
  }

  void zero_grad() { nn::zero_grad(params_); }

  const ParamList<T>& params() const { return params_; }
  const AdamOptions& options() const { return options_; }
  std::int64_t step_count() const { return step_; }

  // Checkpoint access.
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_step_count(std::int64_t s) { step_ = s; }

 private:
  ParamList<T> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace phanes::nn
