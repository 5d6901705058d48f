#include "phanes/mask.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "phanes/errors.hpp"

namespace phanes {

void ClaheParams::validate() const {
  if (tiles_x < 1 || tiles_y < 1) throw std::invalid_argument("CLAHE needs at least one tile per axis");
  if (bins < 2) throw std::invalid_argument("CLAHE needs at least two bins");
  if (!(clip_limit > 0)) throw std::invalid_argument("CLAHE clip limit must be > 0");
}

namespace {

int bin_of(double v, int bins) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<int>(std::lround(c * (bins - 1)));
}

// Histogram clipping with uniform redistribution of the excess, remainder
// spread with a fixed stride.
void clip_histogram(std::vector<int>& hist, int limit) {
  const int bins = static_cast<int>(hist.size());
  int excess = 0;
  for (auto& h : hist) {
    if (h > limit) {
      excess += h - limit;
      h = limit;
    }
  }
  const int batch = excess / bins;
  int residual = excess - batch * bins;
  for (auto& h : hist) h += batch;
  if (residual > 0) {
    const int step = std::max(bins / residual, 1);
    for (int i = 0; i < bins && residual > 0; i += step, --residual) ++hist[static_cast<std::size_t>(i)];
  }
}

}  // namespace

Image adaptive_equalize(const Image& image, const ClaheParams& params) {
  params.validate();
  const int h = image.height(), w = image.width();
  if (h < params.tiles_y || w < params.tiles_x) throw std::invalid_argument("image smaller than the CLAHE tile grid");
  const int bins = params.bins;

  Grid<int> binned(h, w);
  for (std::size_t i = 0; i < image.size(); ++i) binned[i] = bin_of(image[i], bins);

  auto tile_begin_y = [&](int t) { return t * h / params.tiles_y; };
  auto tile_begin_x = [&](int t) { return t * w / params.tiles_x; };

  // luts[ty][tx][bin]
  std::vector<std::vector<double>> luts(static_cast<std::size_t>(params.tiles_x * params.tiles_y));
  for (int ty = 0; ty < params.tiles_y; ++ty) {
    for (int tx = 0; tx < params.tiles_x; ++tx) {
      const int y0 = tile_begin_y(ty), y1 = tile_begin_y(ty + 1);
      const int x0 = tile_begin_x(tx), x1 = tile_begin_x(tx + 1);
      const int area = (y1 - y0) * (x1 - x0);
      std::vector<int> hist(static_cast<std::size_t>(bins), 0);
      for (int r = y0; r < y1; ++r)
        for (int c = x0; c < x1; ++c) ++hist[static_cast<std::size_t>(binned(r, c))];
      const int limit = std::max(1, static_cast<int>(params.clip_limit * area / bins));
      clip_histogram(hist, limit);
      auto& lut = luts[static_cast<std::size_t>(ty * params.tiles_x + tx)];
      lut.resize(static_cast<std::size_t>(bins));
      long cumulative = 0;
      for (int b = 0; b < bins; ++b) {
        cumulative += hist[static_cast<std::size_t>(b)];
        lut[static_cast<std::size_t>(b)] = std::min(1.0, static_cast<double>(cumulative) / area);
      }
    }
  }

  const double inv_th = static_cast<double>(params.tiles_y) / h;
  const double inv_tw = static_cast<double>(params.tiles_x) / w;
  Image out(h, w);
  out.id = image.id;
  for (int r = 0; r < h; ++r) {
    const double tyf = (r + 0.5) * inv_th - 0.5;
    int ty1 = static_cast<int>(std::floor(tyf));
    int ty2 = ty1 + 1;
    const double ya = tyf - ty1;
    ty1 = std::max(ty1, 0);
    ty2 = std::min(ty2, params.tiles_y - 1);
    for (int c = 0; c < w; ++c) {
      const double txf = (c + 0.5) * inv_tw - 0.5;
      int tx1 = static_cast<int>(std::floor(txf));
      int tx2 = tx1 + 1;
      const double xa = txf - tx1;
      tx1 = std::max(tx1, 0);
      tx2 = std::min(tx2, params.tiles_x - 1);
      const auto b = static_cast<std::size_t>(binned(r, c));
      auto lut = [&](int ty, int tx) { return luts[static_cast<std::size_t>(ty * params.tiles_x + tx)][b]; };
      const double v = (lut(ty1, tx1) * (1 - xa) + lut(ty1, tx2) * xa) * (1 - ya) +
                       (lut(ty2, tx1) * (1 - xa) + lut(ty2, tx2) * xa) * ya;
      out(r, c) = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

ScoreMap percentile_normalize(const Grid<double>& map, double p) {
  const double scale = percentile(map.values(), p);
  ScoreMap out(map.height(), map.width());
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (scale > 0)
      out[i] = std::clamp(map[i] / scale, 0.0, 1.0);
    else
      out[i] = map[i] > 0 ? 1.0 : 0.0;
  }
  return out;
}

ScoreMap anomaly_mask_map(const Image& x, const Image& x_cph, const perceptual::FeatureExtractor<float>& fx,
                          const MaskMapOptions& options) {
  require_same_shape(x, x_cph, "anomaly_mask_map");
  const Image ex = adaptive_equalize(x, options.clahe);
  const Image ec = adaptive_equalize(x_cph, options.clahe);
  Grid<double> residual(x.height(), x.width());
  for (std::size_t i = 0; i < residual.size(); ++i) residual[i] = std::abs(ec[i] - ex[i]);
  ScoreMap out = percentile_normalize(residual, options.norm_percentile);
  const ScoreMap lp = perceptual::perceptual_distance_map(fx, ec, ex);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= lp[i];
  return out;
}

MaskThreshold calibrate_threshold(const std::vector<ScoreMap>& healthy_maps, double p) {
  if (healthy_maps.empty()) throw std::invalid_argument("calibration needs at least one healthy map");
  std::vector<double> pooled;
  for (const auto& m : healthy_maps) pooled.insert(pooled.end(), m.begin(), m.end());
  return MaskThreshold{percentile(std::move(pooled), p), static_cast<int>(healthy_maps.size()), p};
}

BinaryMask binarize(const ScoreMap& map, const MaskThreshold& t) {
  BinaryMask mask(map.height(), map.width());
  for (std::size_t i = 0; i < map.size(); ++i) mask[i] = map[i] > t.value ? 1 : 0;
  return mask;
}

BinaryMask dilate(const BinaryMask& mask, int radius) {
  if (radius < 0) throw std::invalid_argument("dilation radius must be >= 0");
  if (radius == 0) return mask;
  BinaryMask out(mask.height(), mask.width());
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c) {
      if (!mask(r, c)) continue;
      for (int dr = -radius; dr <= radius; ++dr)
        for (int dc = -radius; dc <= radius; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr >= 0 && cc >= 0 && rr < mask.height() && cc < mask.width()) out(rr, cc) = 1;
        }
    }
  return out;
}

ScoreMap max_filter(const ScoreMap& map, int radius) {
  if (radius < 0) throw std::invalid_argument("dilation radius must be >= 0");
  if (radius == 0) return map;
  // Separable: rows, then columns.
  ScoreMap rows(map.height(), map.width()), out(map.height(), map.width());
  for (int r = 0; r < map.height(); ++r)
    for (int c = 0; c < map.width(); ++c) {
      double m = map(r, c);
      for (int cc = std::max(0, c - radius); cc <= std::min(map.width() - 1, c + radius); ++cc) m = std::max(m, map(r, cc));
      rows(r, c) = m;
    }
  for (int r = 0; r < map.height(); ++r)
    for (int c = 0; c < map.width(); ++c) {
      double m = rows(r, c);
      for (int rr = std::max(0, r - radius); rr <= std::min(map.height() - 1, r + radius); ++rr) m = std::max(m, rows(rr, c));
      out(r, c) = m;
    }
  return out;
}

void save_threshold(const std::filesystem::path& path, const MaskThreshold& t) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write threshold file " + path.string());
  out << std::setprecision(17) << "percentile " << t.percentile << "\nvalue " << t.value << "\ncalibration_set_size "
      << t.calibration_set_size << '\n';
}

MaskThreshold load_threshold(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read threshold file " + path.string());
  MaskThreshold t;
  bool have_value = false;
  std::string key;
  while (in >> key) {
    if (key == "percentile") {
      in >> t.percentile;
    } else if (key == "value") {
      in >> t.value;
      have_value = true;
    } else if (key == "calibration_set_size") {
      in >> t.calibration_set_size;
    } else {
      throw Error("unknown key '" + key + "' in threshold file " + path.string());
    }
  }
  if (!have_value) throw Error("threshold file " + path.string() + " has no value");
  return t;
}

}  // namespace phanes
