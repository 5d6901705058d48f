#include "phanes/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace phanes {
namespace {

constexpr std::uint64_t kPhantomStream = 0x70686e74;  // "phnt"

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

double bilinear_zero(const Grid<double>& g, double x, double y) {
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
  const double fx = x - fx0, fy = y - fy0;
  auto at = [&](int r, int c) { return (r < 0 || c < 0 || r >= g.height() || c >= g.width()) ? 0.0 : g(r, c); };
  return at(y0, x0) * (1.0 - fx) * (1.0 - fy) + at(y0, x0 + 1) * fx * (1.0 - fy) + at(y0 + 1, x0) * (1.0 - fx) * fy +
         at(y0 + 1, x0 + 1) * fx * fy;
}

// Soft inside-indicator of a rotated ellipse; ~1 inside, ~0 outside.
double ellipse_membership(double x, double y, double cx, double cy, double a, double b, double theta,
                          double softness) {
  const double dx = x - cx, dy = y - cy;
  const double c = std::cos(theta), s = std::sin(theta);
  const double u = dx * c + dy * s, v = -dx * s + dy * c;
  const double rho = std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
  const double dist = (rho - 1.0) * std::min(a, b);
  return 1.0 / (1.0 + std::exp(dist / softness));
}

}  // namespace

void AugmentParams::validate() const {
  if (max_rotation_deg < 0 || max_translation_frac < 0) throw std::invalid_argument("augment ranges must be >= 0");
  if (!(scale_min > 0) || scale_max < scale_min) throw std::invalid_argument("augment scale range is empty");
  if (hflip_prob < 0 || hflip_prob > 1) throw std::invalid_argument("hflip_prob must lie in [0, 1]");
}

Image normalize_percentile(const Grid<double>& raw, double p) {
  if (!(p > 0.0 && p <= 100.0)) throw std::invalid_argument("percentile must lie in (0, 100]");
  if (raw.empty() || std::none_of(raw.begin(), raw.end(), [](double v) { return v > 0.0; }))
    throw std::invalid_argument("degenerate image");
  const double ref = percentile(raw.values(), p);
  if (!(ref > 0.0)) throw std::invalid_argument("degenerate image");
  Image out(raw.height(), raw.width());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = std::clamp(raw[i] / ref, 0.0, 1.0);
  return out;
}

Grid<double> resample_bilinear(const Grid<double>& src, int height, int width) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("resample target must be positive");
  if (src.empty()) throw std::invalid_argument("resample of an empty image");
  Grid<double> out(height, width);
  const double sy = static_cast<double>(src.height()) / height;
  const double sx = static_cast<double>(src.width()) / width;
  for (int r = 0; r < height; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height() - 1));
    const int y0 = static_cast<int>(std::floor(y));
    const int y1 = std::min(y0 + 1, src.height() - 1);
    const double fy = y - y0;
    for (int c = 0; c < width; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width() - 1));
      const int x0 = static_cast<int>(std::floor(x));
      const int x1 = std::min(x0 + 1, src.width() - 1);
      const double fx = x - x0;
      out(r, c) = (src(y0, x0) * (1 - fx) + src(y0, x1) * fx) * (1 - fy) + (src(y1, x0) * (1 - fx) + src(y1, x1) * fx) * fy;
    }
  }
  return out;
}

Image resize_pad(const Image& image, int target) {
  if (target <= 0) throw std::invalid_argument("resize target must be positive");
  if (image.empty()) throw std::invalid_argument("resize of an empty image");
  const int side = std::max(image.height(), image.width());
  Image square(side, side, 0.0);
  square.id = image.id;
  const int top = (side - image.height()) / 2;
  const int left = (side - image.width()) / 2;
  for (int r = 0; r < image.height(); ++r)
    for (int c = 0; c < image.width(); ++c) square(top + r, left + c) = image(r, c);
  if (side == target) return square;
  Image out(resample_bilinear(square, target, target), image.id);
  return out;
}

AffineParams sample_affine(const AugmentParams& params, int height, int width, Rng& rng) {
  params.validate();
  AffineParams a;
  // Every draw is taken unconditionally so the stream position never depends on the ranges.
  a.rotation_deg = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg);
  a.translate_x = rng.uniform(-params.max_translation_frac, params.max_translation_frac) * width;
  a.translate_y = rng.uniform(-params.max_translation_frac, params.max_translation_frac) * height;
  a.scale = rng.uniform(params.scale_min, params.scale_max);
  a.hflip = rng.uniform() < params.hflip_prob;
  return a;
}

Image apply_affine(const Image& image, const AffineParams& affine) {
  const int h = image.height(), w = image.width();
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const double theta = deg2rad(affine.rotation_deg);
  const double c = std::cos(theta), s = std::sin(theta);
  Image out(h, w);
  out.id = image.id;
  for (int r = 0; r < h; ++r) {
    for (int col = 0; col < w; ++col) {
      const double dx = col - cx - affine.translate_x;
      const double dy = r - cy - affine.translate_y;
      // inverse rotation then inverse scale
      double sx = (c * dx + s * dy) / affine.scale + cx;
      const double sy = (-s * dx + c * dy) / affine.scale + cy;
      if (affine.hflip) sx = (w - 1) - sx;
      out(r, col) = std::clamp(bilinear_zero(image, sx, sy), 0.0, 1.0);
    }
  }
  return out;
}

Image augment(const Image& image, const AugmentParams& params, Rng& rng) {
  return apply_affine(image, sample_affine(params, image.height(), image.width(), rng));
}

Image generate_phantom(int resolution, Rng& rng, const PhantomParams& params) {
  if (resolution <= 0) throw std::invalid_argument("phantom resolution must be positive");
  const double n = resolution;
  const double soft = params.edge_softness * n / 64.0;
  const double cx = (n - 1) / 2.0 + rng.normal() * 0.015 * n;
  const double cy = (n - 1) / 2.0 + rng.normal() * 0.015 * n;
  const double a = rng.uniform(0.34, 0.40) * n;  // half-width of the head
  const double b = rng.uniform(0.40, 0.45) * n;  // half-height
  const double tilt = deg2rad(rng.uniform(-6.0, 6.0));

  const double skull_level = rng.uniform(0.88, 0.95);
  const double brain_level = rng.uniform(0.52, 0.58);
  const double white_level = rng.uniform(0.70, 0.76);
  const double csf_level = rng.uniform(0.15, 0.22);
  const double nucleus_level = rng.uniform(0.42, 0.47);

  const double skull_ratio = rng.uniform(0.80, 0.84);
  const double white_a = rng.uniform(0.55, 0.62), white_b = rng.uniform(0.60, 0.68);
  const double vent_offset = rng.uniform(0.10, 0.14) * a;
  const double vent_a = rng.uniform(0.06, 0.09) * a, vent_b = rng.uniform(0.18, 0.24) * b;
  const double vent_tilt = deg2rad(rng.uniform(10.0, 20.0));
  const double nuc_offset = rng.uniform(0.30, 0.36) * a;
  const double nuc_r = rng.uniform(0.08, 0.11) * a;

  struct Wave {
    double fx, fy, phase, amp;
  };
  Wave waves[4];
  for (auto& wv : waves) {
    wv.fx = rng.uniform(-3.0, 3.0);
    wv.fy = rng.uniform(-3.0, 3.0);
    wv.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    wv.amp = rng.uniform(0.5, 1.0) * params.noise_amplitude;
  }

  Image img(resolution, resolution);
  const double ct = std::cos(tilt), st = std::sin(tilt);
  auto local = [&](double ox, double oy) {  // head-frame offset -> image coords
    return std::pair<double, double>{cx + ox * ct - oy * st, cy + ox * st + oy * ct};
  };
  const auto [lvx, lvy] = local(-vent_offset, -0.05 * b);
  const auto [rvx, rvy] = local(vent_offset, -0.05 * b);
  const auto [lnx, lny] = local(-nuc_offset, 0.15 * b);
  const auto [rnx, rny] = local(nuc_offset, 0.15 * b);

  for (int r = 0; r < resolution; ++r) {
    for (int c = 0; c < resolution; ++c) {
      const double x = c, y = r;
      const double head = ellipse_membership(x, y, cx, cy, a, b, tilt, soft);
      const double brain = ellipse_membership(x, y, cx, cy, a * skull_ratio, b * skull_ratio, tilt, soft);
      const double white = ellipse_membership(x, y, cx, cy, a * white_a, b * white_b, tilt, soft);
      const double vent = std::max(ellipse_membership(x, y, lvx, lvy, vent_a, vent_b, tilt + vent_tilt, soft),
                                   ellipse_membership(x, y, rvx, rvy, vent_a, vent_b, tilt - vent_tilt, soft));
      const double nuc = std::max(ellipse_membership(x, y, lnx, lny, nuc_r, nuc_r * 1.3, tilt, soft),
                                  ellipse_membership(x, y, rnx, rny, nuc_r, nuc_r * 1.3, tilt, soft));
      double v = head * skull_level;
      v += brain * (brain_level - v);
      v += white * (white_level - v);
      v += nuc * (nucleus_level - v);
      v += vent * (csf_level - v);
      double noise = 0.0;
      for (const auto& wv : waves)
        noise += wv.amp * std::sin(2.0 * std::numbers::pi * (wv.fx * x / n + wv.fy * y / n) + wv.phase);
      v += head * noise;
      img(r, c) = std::max(v, 0.0);
    }
  }
  // Emitted on the same scale the loader produces.
  return normalize_percentile(img, 98.0);
}

std::vector<Image> generate_phantom_dataset(int n, int resolution, std::uint64_t seed, const PhantomParams& params) {
  if (n <= 0) throw std::invalid_argument("phantom count must be positive");
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::derive(seed, kPhantomStream, static_cast<std::uint64_t>(i));
    out.push_back(generate_phantom(resolution, rng, params));
    out.back().id = "phantom_" + std::to_string(i);
  }
  return out;
}

void AnomalyConfig::validate() const {
  if (min_blobs < 1 || max_blobs < min_blobs) throw std::invalid_argument("anomaly blob count range is empty");
  if (!(max_radius_frac > 0.0) || !(max_area_frac > 0.0))
    throw std::invalid_argument("anomaly area must be positive");
  if (min_radius_frac < 0.0 || min_radius_frac > max_radius_frac) throw std::invalid_argument("anomaly radius range is empty");
  if (max_area_frac > 0.5) throw std::invalid_argument("anomaly area may not exceed 50% of the image");
  if (min_shift < 0.0 || max_shift < min_shift) throw std::invalid_argument("anomaly shift range is empty");
  if (!(feather > 0.0)) throw std::invalid_argument("anomaly feather must be positive");
  if (kinds.empty()) throw std::invalid_argument("no anomaly kinds enabled");
}

Image quantize(Image image, int levels) {
  if (levels <= 0) return image;
  for (auto& v : image) v = std::round(v * levels) / levels;
  return image;
}

LabeledSample inject_synthetic_anomaly(const Image& image, const AnomalyConfig& config, Rng& rng) {
  config.validate();
  if (image.empty()) throw std::invalid_argument("cannot inject into an empty image");
  const int h = image.height(), w = image.width();
  const double side = std::min(h, w);

  std::vector<std::size_t> tissue;
  for (std::size_t i = 0; i < image.size(); ++i)
    if (image[i] > 0.3 && image[i] < 0.85) tissue.push_back(i);
  if (tissue.empty())
    for (std::size_t i = 0; i < image.size(); ++i) tissue.push_back(i);

  constexpr int kMaxAttempts = 50;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Image out = image;
    const int blobs = rng.uniform_int(config.min_blobs, config.max_blobs);
    for (int bidx = 0; bidx < blobs; ++bidx) {
      const std::size_t centre = tissue[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(tissue.size()) - 1))];
      const double cy = static_cast<double>(centre / w), cx = static_cast<double>(centre % w);
      const double radius = std::max(1.0, rng.uniform(config.min_radius_frac, config.max_radius_frac) * side);
      const double aspect = rng.uniform(0.6, 1.0);
      const double theta = rng.uniform(0.0, std::numbers::pi);
      double harm_amp[3], harm_phase[3];
      for (int k = 0; k < 3; ++k) {
        harm_amp[k] = rng.uniform(0.0, 0.15);
        harm_phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
      const auto kind = config.kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(config.kinds.size()) - 1))];
      const double magnitude = rng.uniform(config.min_shift, config.max_shift);

      // Feathered weight of this blob.
      std::vector<std::pair<std::size_t, double>> support;
      const int reach = static_cast<int>(std::ceil(radius * 1.5)) + 1;
      for (int r = std::max(0, static_cast<int>(cy) - reach); r <= std::min(h - 1, static_cast<int>(cy) + reach); ++r) {
        for (int c = std::max(0, static_cast<int>(cx) - reach); c <= std::min(w - 1, static_cast<int>(cx) + reach); ++c) {
          const double dx = c - cx, dy = r - cy;
          const double u = dx * std::cos(theta) + dy * std::sin(theta);
          const double v = -dx * std::sin(theta) + dy * std::cos(theta);
          const double phi = std::atan2(v, u);
          double rad = 1.0;
          for (int k = 0; k < 3; ++k) rad += harm_amp[k] * std::sin((k + 2) * phi + harm_phase[k]);
          const double rho = std::sqrt(u * u + (v / aspect) * (v / aspect)) / (radius * rad);
          if (rho < 1.0) support.emplace_back(static_cast<std::size_t>(r) * w + c, std::min(1.0, (1.0 - rho) / config.feather));
        }
      }
      if (support.empty()) continue;

      if (kind == AnomalyKind::scramble) {
        std::vector<double> pool;
        pool.reserve(support.size());
        for (const auto& [idx, wt] : support) pool.push_back(out[idx]);
        for (std::size_t i = pool.size(); i > 1; --i) {
          const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
          std::swap(pool[i - 1], pool[j]);
        }
        for (std::size_t k = 0; k < support.size(); ++k) {
          const auto [idx, wt] = support[k];
          const double texture = pool[k] + magnitude * 0.5 * rng.normal();
          out[idx] = std::clamp((1.0 - wt) * out[idx] + wt * texture, 0.0, 1.0);
        }
      } else {
        const double shift = kind == AnomalyKind::hypo ? -magnitude : magnitude;
        for (const auto& [idx, wt] : support) out[idx] = std::clamp(out[idx] + wt * shift, 0.0, 1.0);
      }
    }
    // Only altered pixels are snapped so the rest stays bit-identical to the input.
    if (config.quantize_levels > 0)
      for (std::size_t i = 0; i < out.size(); ++i)
        if (out[i] != image[i]) out[i] = std::round(out[i] * config.quantize_levels) / config.quantize_levels;

    BinaryMask gt(h, w, 0);
    for (std::size_t i = 0; i < out.size(); ++i) gt[i] = out[i] != image[i] ? 1 : 0;
    const std::size_t area = gt.count();
    if (area == 0 || static_cast<double>(area) > config.max_area_frac * static_cast<double>(gt.size())) continue;

    out.id = image.id;
    return LabeledSample{std::move(out), std::move(gt), image};
  }
  throw std::runtime_error("could not place an anomaly within the configured area bounds");
}

}  // namespace phanes
