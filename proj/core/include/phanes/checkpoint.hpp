#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phanes/nn/layers.hpp"
#include "phanes/nn/optim.hpp"

namespace phanes {

/// Single-file archive: a header string, a JSON metadata block (config echo,
/// RNG state, epoch counter, ...) and named float64 tensors (weights and
/// optimizer moments).
struct Checkpoint {
  std::string header;
  nlohmann::json meta;
  std::map<std::string, nn::Tensor<double>> tensors;

  void save(const std::filesystem::path& path) const;
  /// Throws CheckpointError if the stored header differs from expected_header.
  static Checkpoint load(const std::filesystem::path& path, const std::string& expected_header);

  template <class T>
  void put_params(const std::string& prefix, const nn::ParamList<T>& params) {
    for (const auto& p : params) tensors[prefix + p.name] = p.var.value().template cast<double>();
  }

  template <class T>
  void get_params(const std::string& prefix, const nn::ParamList<T>& params) const {
    for (auto p : params) {
      auto it = tensors.find(prefix + p.name);
      if (it == tensors.end()) throw_missing(prefix + p.name);
      if (it->second.shape() != p.var.shape()) throw_shape(prefix + p.name);
      p.var.mutable_value() = it->second.template cast<T>();
    }
  }

  template <class T>
  void put_optimizer(const std::string& prefix, const nn::Adam<T>& opt) {
    const auto& params = opt.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& shape = params[i].var.shape();
      tensors[prefix + params[i].name + ".m"] = nn::Tensor<double>(shape, opt.first_moments()[i]);
      tensors[prefix + params[i].name + ".v"] = nn::Tensor<double>(shape, opt.second_moments()[i]);
    }
    meta[prefix + "step"] = opt.step_count();
  }

  template <class T>
  void get_optimizer(const std::string& prefix, nn::Adam<T>& opt) const {
    const auto& params = opt.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto m = tensors.find(prefix + params[i].name + ".m");
      auto v = tensors.find(prefix + params[i].name + ".v");
      if (m == tensors.end() || v == tensors.end()) throw_missing(prefix + params[i].name + " moments");
      opt.first_moments()[i] = m->second.storage();
      opt.second_moments()[i] = v->second.storage();
    }
    opt.set_step_count(meta.value(prefix + "step", std::int64_t{0}));
  }

 private:
  [[noreturn]] static void throw_missing(const std::string& name);
  [[noreturn]] static void throw_shape(const std::string& name);
};

}  // namespace phanes
