#pragma once

#include <filesystem>
#include <vector>

#include "phanes/image.hpp"
#include "phanes/perceptual.hpp"

namespace phanes {

/// Contrast-limited adaptive histogram equalization settings.
struct ClaheParams {
  int tiles_x = 8;
  int tiles_y = 8;
  /// Normalized clip limit: a bin may hold clip_limit * tile_area / bins pixels.
  double clip_limit = 2.0;
  int bins = 256;

  void validate() const;
};

/// CLAHE. Pixels are binned on a 0..bins-1 grid (round(v * (bins-1))), each
/// tile gets a clipped-histogram CDF lookup table, and lookups of the four
/// nearest tile centres are blended bilinearly. Output lies in [0, 1].
Image adaptive_equalize(const Image& image, const ClaheParams& params = {});

/// Divides by the p-th percentile of the map and clips to [0, 1]. When that
/// percentile is 0 every nonzero value maps to 1 (an all-zero map stays zero).
ScoreMap percentile_normalize(const Grid<double>& map, double p = 95.0);

struct MaskMapOptions {
  ClaheParams clahe{};
  double norm_percentile = 95.0;
};

/// norm95(|eq(x_cph) - eq(x)|) * perceptual_map(eq(x_cph), eq(x)).
ScoreMap anomaly_mask_map(const Image& x, const Image& x_cph, const perceptual::FeatureExtractor<float>& fx,
                          const MaskMapOptions& options = {});

struct MaskThreshold {
  double value = 0.0;
  int calibration_set_size = 0;
  double percentile = 99.0;
};

/// Percentile of the pooled pixels of all maps.
MaskThreshold calibrate_threshold(const std::vector<ScoreMap>& healthy_maps, double percentile = 99.0);

/// 1 where map > t.value.
BinaryMask binarize(const ScoreMap& map, const MaskThreshold& t);

/// Square (Chebyshev) dilation; radius 0 returns the input.
BinaryMask dilate(const BinaryMask& mask, int radius);

/// Grey-scale counterpart of dilate: window maximum over the same square.
/// dilate(binarize(m, t), r) == binarize(max_filter(m, r), t).
ScoreMap max_filter(const ScoreMap& map, int radius);

void save_threshold(const std::filesystem::path& path, const MaskThreshold& t);
MaskThreshold load_threshold(const std::filesystem::path& path);

}  // namespace phanes
