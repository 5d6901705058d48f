#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "phanes/data.hpp"
#include "phanes/inpaint.hpp"
#include "phanes/latent.hpp"
#include "phanes/mask.hpp"
#include "phanes/perceptual.hpp"

namespace phanes {

struct DataConfig {
  /// Empty: <output_dir>/data.
  std::filesystem::path dataset_dir;
  int train_count = 2000;
  int val_count = 100;
  int test_healthy_count = 100;
  int test_anomalous_count = 200;
  /// Percentile-normalize and resize images on load (for external data;
  /// generated phantoms are stored already normalized).
  bool preprocess = false;
  PhantomParams phantom{};
  AnomalyConfig anomaly = [] {
    AnomalyConfig a;
    a.quantize_levels = 65535;
    return a;
  }();
};

struct EvalConfig {
  std::string baseline = "VAE";
  bool per_image_pooling = false;
  int bootstrap_resamples = 1000;
  int significance_resamples = 10000;
  int figure_rows = 8;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int resolution = 64;
  std::filesystem::path output_dir = "runs/default";
  DataConfig data{};
  AugmentParams augment{};
  latent::LatentArch latent_arch{};
  latent::LatentTrainConfig latent{};
  inpaint::InpaintArch inpaint_arch{};
  inpaint::InpaintTrainConfig inpaint{};
  /// Pooled percentile of the training mask maps used to binarize proposals.
  double proposal_percentile = 97.0;
  MaskMapOptions mask_map{};
  double calibration_percentile = 99.0;
  int dilation_radius = 0;
  /// Feature network of the perceptual maps (mask generation, inpainter
  /// perceptual loss, scoring).
  perceptual::PerceptualOptions lpips{};
  EvalConfig eval{};

  /// Propagates shared settings (resolution, augmentation) into the stage
  /// configs and checks every section. Throws ConfigError.
  void finalize();
  std::filesystem::path dataset_dir() const;
};

/// Annotated INI text; doubles are written in their shortest round-trip form.
std::string to_ini(const ExperimentConfig& config);
/// Unknown sections or keys and malformed values raise ConfigError.
ExperimentConfig config_from_ini(const std::string& text);

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);

nlohmann::json to_json(const ExperimentConfig& config);

}  // namespace phanes
