#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phanes/data.hpp"
#include "phanes/image.hpp"
#include "phanes/perceptual.hpp"
#include "phanes/scoring.hpp"

namespace phanes::eval {

/// Area under the precision-recall curve of pooled pixels. Thresholds are the
/// distinct score values; each recall step is weighted by the precision
/// envelope (best precision at that recall or higher).
/// Throws std::invalid_argument("undefined AUPRC") without both classes.
double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels);
double auprc(const std::vector<ScoreMap>& scores, const std::vector<BinaryMask>& gt);

double dice(const BinaryMask& a, const BinaryMask& b);

/// Best Dice of (score > t) over t in {distinct scores} plus one value below
/// the minimum. Throws when there are no positives.
double ceiling_dice(std::span<const double> scores, std::span<const std::uint8_t> labels);

enum class Pooling { pooled, per_image };

/// per_image averages over images that have at least one positive pixel.
double ceiling_dice(const std::vector<ScoreMap>& scores, const std::vector<BinaryMask>& gt,
                    Pooling pooling = Pooling::pooled);

/// Perceptual distance between the two images with everything outside the
/// region zeroed, times 100. Throws on an empty region.
double region_lpips(const perceptual::FeatureExtractor<float>& fx, const Image& x_ph, const Image& reference,
                    const BinaryMask& region);

/// Two-sided paired sign-flip test on the mean difference. Exhaustive for
/// n <= 14, otherwise `resamples` random flips with p = (c + 1) / (resamples + 1).
double paired_significance(std::span<const double> a, std::span<const double> b, std::uint64_t seed = 0,
                           int resamples = 10000);

struct Interval {
  double mean = 0;
  double half_width = 0;  // bootstrap standard error
};

/// Mean with the bootstrap standard error of the mean. All n^n ordered
/// resamples are enumerated when that count is <= resamples.
Interval bootstrap_interval(std::span<const double> values, int resamples = 1000, std::uint64_t seed = 0);

/// 100 * (value - baseline) / |baseline|, rounded to an integer percent.
long relative_change(double value, double baseline);

struct ImageMetrics {
  std::string id;
  double auprc = 0;  // NaN when the image lacks one of the classes
  double ceiling_dice = 0;
  std::optional<double> lpips_healthy;
  std::optional<double> lpips_anomaly;
};

struct MethodMetrics {
  std::string name;
  double auprc = 0;  // pooled, in [0, 1]
  double ceiling_dice = 0;
  std::optional<double> lpips_healthy;  // x100
  std::optional<double> lpips_anomaly;
  Interval auprc_interval;  // over per-image values
  Interval dice_interval;
  std::vector<ImageMetrics> per_image;
};

struct SignificanceEntry {
  std::string method_a;
  std::string method_b;
  std::string metric;
  double p_value = 1;
  int n = 0;
};

struct MetricsReport {
  std::vector<MethodMetrics> methods;
  std::vector<SignificanceEntry> significance;
  std::string baseline;

  const MethodMetrics& method(const std::string& name) const;
  /// Tab-separated table; metrics x100 with relative change versus the baseline.
  std::string to_text() const;
  nlohmann::json to_json() const;
};

struct MethodResults {
  std::string name;
  std::vector<scoring::DetectionResult> results;  // aligned with the samples
};

struct ReportOptions {
  std::string baseline;  // empty: no relative-change column or tests
  Pooling pooling = Pooling::pooled;
  std::uint64_t seed = 0;
  int bootstrap_resamples = 1000;
  int significance_resamples = 10000;
};

/// `fx` may be null, in which case the LPIPS columns are left empty. LPIPS is
/// computed only for samples with a healthy reference.
MetricsReport build_report(const std::vector<MethodResults>& methods, const std::vector<LabeledSample>& samples,
                           const perceptual::FeatureExtractor<float>* fx, const ReportOptions& options = {});

/// PNG grid, one row per result: input | mask | x_ph | score (scaled to its max).
void write_figure(const std::filesystem::path& path, const std::vector<scoring::DetectionResult>& results,
                  int max_rows = 8);

}  // namespace phanes::eval
