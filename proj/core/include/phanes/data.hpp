#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "phanes/image.hpp"
#include "phanes/rng.hpp"

namespace phanes {

/// Image plus the annotations available for it. Synthetic anomalies carry the
/// clean image they were injected into.
struct LabeledSample {
  Image image;
  std::optional<BinaryMask> gt_mask;
  std::optional<Image> healthy_reference;
};

struct AugmentParams {
  double max_rotation_deg = 10.0;
  double max_translation_frac = 0.1;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double hflip_prob = 0.5;

  void validate() const;
};

/// One concrete draw of the augmentation transform.
struct AffineParams {
  double rotation_deg = 0.0;
  double translate_x = 0.0;  // pixels
  double translate_y = 0.0;  // pixels
  double scale = 1.0;
  bool hflip = false;
};

/// Divide by the p-th percentile and clip to [0, 1].
/// Throws std::invalid_argument("degenerate image") when no pixel is positive.
Image normalize_percentile(const Grid<double>& raw, double p = 98.0);

/// Zero-pad to a centred square, then bilinear-resample (half-pixel centres)
/// to target x target.
Image resize_pad(const Image& image, int target);

/// Bilinear resample to an arbitrary size, half-pixel centres, edge clamped.
Grid<double> resample_bilinear(const Grid<double>& src, int height, int width);

AffineParams sample_affine(const AugmentParams& params, int height, int width, Rng& rng);

/// Flip, scale and rotate about the image centre, then translate. Bilinear
/// sampling, zero outside the source, output clipped to [0, 1].
Image apply_affine(const Image& image, const AffineParams& affine);

Image augment(const Image& image, const AugmentParams& params, Rng& rng);

struct PhantomParams {
  double noise_amplitude = 0.015;
  double edge_softness = 0.7;  // pixels
};

/// One healthy phantom: nested smooth ellipses with fixed intensity bands and
/// low-amplitude smooth noise, normalized to its 98th percentile.
Image generate_phantom(int resolution, Rng& rng, const PhantomParams& params = {});

/// n phantoms; sample i is drawn from Rng::derive(seed, phantom stream, i).
std::vector<Image> generate_phantom_dataset(int n, int resolution, std::uint64_t seed,
                                            const PhantomParams& params = {});

enum class AnomalyKind { hypo, hyper, scramble };

struct AnomalyConfig {
  int min_blobs = 1;
  int max_blobs = 3;
  double min_radius_frac = 0.05;
  double max_radius_frac = 0.12;
  /// Upper bound on the fraction of the image the anomaly may cover.
  double max_area_frac = 0.25;
  double min_shift = 0.2;
  double max_shift = 0.6;
  /// Width of the feathered rim relative to the blob radius.
  double feather = 0.35;
  std::vector<AnomalyKind> kinds{AnomalyKind::hypo, AnomalyKind::hyper, AnomalyKind::scramble};
  /// If > 0, output values are snapped to k/levels (matches 16-bit storage).
  int quantize_levels = 0;

  void validate() const;
};

/// Inject a union of feathered blobs. gt_mask is exactly the set of pixels
/// whose value changed; everything outside it equals the input bit for bit.
LabeledSample inject_synthetic_anomaly(const Image& image, const AnomalyConfig& config, Rng& rng);

/// Snap to the nearest multiple of 1/levels.
Image quantize(Image image, int levels);

}  // namespace phanes
