#include "phanes/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "phanes/errors.hpp"
#include "phanes/io.hpp"

namespace phanes::scoring {

void DetectionResult::validate() const {
  require_same_shape(input, x_cph, "DetectionResult");
  require_same_shape(input, mask, "DetectionResult");
  require_same_shape(input, x_ph, "DetectionResult");
  require_same_shape(input, score, "DetectionResult");
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (!(score[i] >= 0.0)) throw std::invalid_argument("negative or non-finite score");
    if (!mask[i] && x_ph[i] != input[i]) throw std::invalid_argument("x_ph differs from the input outside the mask");
  }
}

ScoreMap anomaly_map(const Image& x, const Image& x_ph, const perceptual::FeatureExtractor<float>& fx) {
  require_same_shape(x, x_ph, "anomaly_map");
  ScoreMap s(x.height(), x.width());
  bool any = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = std::abs(x_ph[i] - x[i]);
    any = any || s[i] > 0;
  }
  if (!any) return s;
  const ScoreMap lp = perceptual::perceptual_distance_map(fx, x_ph, x);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] *= lp[i];
  return s;
}

ScoreMap residual_baseline_map(const Image& x, const Image& x_rec) {
  require_same_shape(x, x_rec, "residual_baseline_map");
  ScoreMap s(x.height(), x.width());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::abs(x[i] - x_rec[i]);
  return s;
}

DetectionResult reconstruction_baseline(const Image& x, const Image& x_rec) {
  require_same_shape(x, x_rec, "reconstruction_baseline");
  DetectionResult r;
  r.input = x;
  r.x_cph = x_rec;
  r.mask = BinaryMask(x.height(), x.width(), 1);
  r.x_ph = x_rec;
  r.score = residual_baseline_map(x, x_rec);
  return r;
}

Detector::Detector(latent::LatentModel<float> model, inpaint::Generator<float> generator, MaskThreshold threshold,
                   DetectOptions options)
    : model_(std::move(model)),
      features_(perceptual::make_features(model_, options.perceptual)),
      generator_(std::move(generator)),
      threshold_(threshold),
      options_(std::move(options)) {
  if (model_.arch().resolution != generator_.arch().resolution)
    throw ConfigError("latent model and inpainter were trained at different resolutions");
}

Detector Detector::load(const std::filesystem::path& latent_checkpoint, const std::filesystem::path& inpaint_checkpoint,
                        const std::filesystem::path& threshold_file, DetectOptions options) {
  return Detector(latent::load_model(latent_checkpoint), inpaint::load_generator(inpaint_checkpoint),
                  load_threshold(threshold_file), std::move(options));
}

ScoreMap Detector::mask_map(const Image& x, Image* x_cph) const {
  Image rec = model_.reconstruct(x);
  ScoreMap m = anomaly_mask_map(x, rec, features_, options_.mask_map);
  if (x_cph) *x_cph = std::move(rec);
  return m;
}

DetectionResult Detector::detect(const Image& x) const {
  Image x_cph;
  const ScoreMap m = mask_map(x, &x_cph);
  BinaryMask mask = dilate(binarize(m, threshold_), options_.dilation_radius);
  return finish(x, std::move(x_cph), std::move(mask), false);
}

DetectionResult Detector::detect_with_gt_mask(const Image& x, const BinaryMask& gt_mask) const {
  require_same_shape(x, gt_mask, "detect_with_gt_mask");
  return finish(x, x, gt_mask, true);
}

DetectionResult Detector::finish(const Image& x, Image x_cph, BinaryMask mask, bool gt_mode) const {
  DetectionResult r;
  r.input = x;
  r.x_cph = std::move(x_cph);
  r.x_cph.id = x.id;
  r.mask = std::move(mask);
  r.gt_mode = gt_mode;
  if (r.mask.count() == 0) {
    r.x_ph = x;
    r.score = ScoreMap(x.height(), x.width(), 0.0);
    return r;
  }
  const Image x_gen = inpaint::inpaint(generator_, inpaint::make_inpaint_input(x, r.mask));
  r.x_ph = inpaint::composite_pseudo_healthy(x, r.mask, x_gen);
  r.x_ph.id = x.id;
  r.score = anomaly_map(x, r.x_ph, features_);
  return r;
}

void save_result(const std::filesystem::path& dir, const DetectionResult& r) {
  std::filesystem::create_directories(dir);
  io::write_png(dir / "input.png", r.input);
  io::write_png(dir / "xcph.png", r.x_cph);
  io::write_mask_png(dir / "mask.png", r.mask);
  io::write_png(dir / "xph.png", r.x_ph);
  double scale = 0;
  for (double v : r.score) scale = std::max(scale, v);
  if (!(scale > 0)) scale = 1.0;
  Grid<double> scaled = r.score;
  for (auto& v : scaled) v /= scale;
  io::write_png(dir / "score.png", scaled);
  io::write_raw_grid(dir / "score.raw", r.score);
  nlohmann::json meta{{"id", r.input.id},
                      {"score_scale", scale},
                      {"gt_mode", r.gt_mode},
                      {"mask_fraction", r.mask.fraction()},
                      {"height", r.input.height()},
                      {"width", r.input.width()}};
  io::write_text(dir / "metadata.json", meta.dump(2) + "\n");
}

DetectionResult load_result(const std::filesystem::path& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_text(dir / "metadata.json"));
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad detection metadata in " + dir.string() + ": " + e.what());
  }
  DetectionResult r;
  r.input = io::read_png(dir / "input.png");
  r.input.id = meta.value("id", std::string{});
  r.x_cph = io::read_png(dir / "xcph.png");
  r.mask = io::read_mask_png(dir / "mask.png");
  r.x_ph = io::read_png(dir / "xph.png");
  r.gt_mode = meta.value("gt_mode", false);
  if (std::filesystem::exists(dir / "score.raw")) {
    r.score = ScoreMap(io::read_raw_grid(dir / "score.raw"));
  } else {
    const double scale = meta.at("score_scale").get<double>();
    r.score = ScoreMap(io::read_png(dir / "score.png"));
    for (auto& v : r.score) v *= scale;
  }
  return r;
}

}  // namespace phanes::scoring
