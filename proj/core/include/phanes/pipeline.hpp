#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "phanes/config.hpp"
#include "phanes/data.hpp"
#include "phanes/evaluation.hpp"

namespace phanes::pipeline {

namespace fs = std::filesystem;

std::string sha256_hex(std::string_view data);
std::string sha256_file(const fs::path& path);

/// Stage names, also the subdirectory names under the output directory
/// (the data stage lives in ExperimentConfig::dataset_dir()).
inline constexpr const char* kData = "data";
inline constexpr const char* kLatent = "latent";
inline constexpr const char* kLatentVae = "latent_vae";
inline constexpr const char* kInpaint = "inpaint";
inline constexpr const char* kCalibration = "calibration";
inline constexpr const char* kDetect = "detect";
inline constexpr const char* kDetectGt = "detect_gt";
inline constexpr const char* kEval = "eval";

/// Contents of <stage>/stage.json.
struct StageManifest {
  std::string stage;
  std::string config_hash;
  std::uint64_t seed = 0;
  /// "<stage>" -> hash of that dependency's stage.json when this stage ran.
  std::map<std::string, std::string> inputs;
  /// Path relative to the stage directory -> SHA-256.
  std::map<std::string, std::string> outputs;
  nlohmann::json summary = nlohmann::json::object();
};

nlohmann::json to_json(const StageManifest& m);
StageManifest manifest_from_json(const nlohmann::json& j);

struct RunOptions {
  /// Replace an existing non-empty stage directory.
  bool force = false;
  /// train-latent writes the plain-VAE ablation to latent_vae/.
  bool vae_only = false;
  /// detect uses the ground-truth masks and writes detect_gt/.
  bool gt_masks = false;
  std::ostream* log = nullptr;
};

class Pipeline {
 public:
  /// Throws ConfigError if the config does not validate.
  explicit Pipeline(ExperimentConfig config);

  const ExperimentConfig& config() const { return config_; }
  fs::path stage_dir(const std::string& stage) const;

  void make_phantoms(const RunOptions& o = {});
  void train_latent(const RunOptions& o = {});
  void train_inpainter(const RunOptions& o = {});
  void calibrate(const RunOptions& o = {});
  void detect(const RunOptions& o = {});
  eval::MetricsReport evaluate(const RunOptions& o = {});
  /// Text of the last evaluation.
  std::string report() const;

  /// Every stage in order, including the ablation and ground-truth variants.
  eval::MetricsReport run_all(const RunOptions& o = {});

  /// Throws DependencyError unless the stage has completed, its outputs match
  /// their recorded hashes and its inputs are unchanged.
  StageManifest verify(const std::string& stage) const;

  /// Split listed in <data>/<split>.tsv.
  std::vector<LabeledSample> load_split(const std::string& split) const;

 private:
  fs::path begin_stage(const std::string& stage, const RunOptions& o) const;
  void finish_stage(const std::string& stage, const std::vector<std::string>& deps, std::uint64_t seed,
                    nlohmann::json summary = nlohmann::json::object()) const;
  std::uint64_t stage_seed(const std::string& stage) const;
  std::string config_hash() const;

  ExperimentConfig config_;
};

}  // namespace phanes::pipeline
