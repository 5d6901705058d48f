#pragma once

#include <filesystem>
#include <string>

#include "phanes/image.hpp"
#include "phanes/inpaint.hpp"
#include "phanes/latent.hpp"
#include "phanes/mask.hpp"
#include "phanes/perceptual.hpp"

namespace phanes::scoring {

/// Everything produced for one input. In ground-truth-mask mode no
/// reconstruction is computed and x_cph holds a copy of the input.
struct DetectionResult {
  Image input;
  Image x_cph;
  BinaryMask mask;
  Image x_ph;
  ScoreMap score;
  bool gt_mode = false;

  /// Throws unless all grids are aligned, score >= 0 and x_ph == input off the mask.
  void validate() const;
};

/// s = |x_ph - x| * perceptual_map(x_ph, x).
ScoreMap anomaly_map(const Image& x, const Image& x_ph, const perceptual::FeatureExtractor<float>& fx);

/// |x - x_rec|, the plain reconstruction residual.
ScoreMap residual_baseline_map(const Image& x, const Image& x_rec);

/// Bundle for a plain reconstruction method: the whole frame counts as
/// replaced, x_ph is the reconstruction and the score is the residual.
DetectionResult reconstruction_baseline(const Image& x, const Image& x_rec);

struct DetectOptions {
  MaskMapOptions mask_map{};
  /// Square dilation applied to the binarized mask; 0 keeps it as is.
  int dilation_radius = 0;
  perceptual::PerceptualOptions perceptual{};
};

/// Holds the trained models and threshold; inference is deterministic.
class Detector {
 public:
  Detector(latent::LatentModel<float> model, inpaint::Generator<float> generator, MaskThreshold threshold,
           DetectOptions options = {});

  /// Throws CheckpointError on a header mismatch.
  static Detector load(const std::filesystem::path& latent_checkpoint, const std::filesystem::path& inpaint_checkpoint,
                       const std::filesystem::path& threshold_file, DetectOptions options = {});

  DetectionResult detect(const Image& x) const;
  DetectionResult detect_with_gt_mask(const Image& x, const BinaryMask& gt_mask) const;

  /// Mask-generation stage alone: reconstruction and unthresholded map.
  ScoreMap mask_map(const Image& x, Image* x_cph = nullptr) const;

  const latent::LatentModel<float>& model() const { return model_; }
  const perceptual::FeatureExtractor<float>& features() const { return features_; }
  const MaskThreshold& threshold() const { return threshold_; }

 private:
  DetectionResult finish(const Image& x, Image x_cph, BinaryMask mask, bool gt_mode) const;

  latent::LatentModel<float> model_;
  perceptual::EncoderFeatures<float> features_;
  inpaint::Generator<float> generator_;
  MaskThreshold threshold_;
  DetectOptions options_;
};

/// Directory with input.png, xcph.png, mask.png, xph.png, score.png (16 bit,
/// divided by the recorded score_scale), score.raw (lossless) and metadata.json.
void save_result(const std::filesystem::path& dir, const DetectionResult& r);
/// Reads score.raw when present, otherwise rescales score.png.
DetectionResult load_result(const std::filesystem::path& dir);

}  // namespace phanes::scoring
