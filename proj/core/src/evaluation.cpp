#include "phanes/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "phanes/io.hpp"
#include "phanes/rng.hpp"

namespace phanes::eval {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Pooled {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
};

Pooled pool(const std::vector<ScoreMap>& scores, const std::vector<BinaryMask>& gt) {
  if (scores.size() != gt.size()) throw std::invalid_argument("score and mask sets differ in length");
  Pooled p;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    require_same_shape(scores[i], gt[i], "metric");
    p.scores.insert(p.scores.end(), scores[i].begin(), scores[i].end());
    p.labels.insert(p.labels.end(), gt[i].begin(), gt[i].end());
  }
  return p;
}

// Cumulative (tp, predicted) after each group of tied scores, in descending order.
struct Step {
  std::size_t tp;
  std::size_t predicted;
};

std::vector<Step> descending_steps(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                   std::size_t& positives) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  positives = 0;
  for (auto l : labels) positives += l ? 1 : 0;
  std::vector<Step> steps;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    tp += labels[order[k]] ? 1 : 0;
    if (k + 1 == order.size() || scores[order[k + 1]] != scores[order[k]]) steps.push_back({tp, k + 1});
  }
  return steps;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? kNaN : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t positives = 0;
  const auto steps = descending_steps(scores, labels, positives);
  if (positives == 0 || positives == scores.size()) throw std::invalid_argument("undefined AUPRC");
  std::vector<double> envelope(steps.size());
  double best = 0;
  for (std::size_t k = steps.size(); k-- > 0;) {
    best = std::max(best, static_cast<double>(steps[k].tp) / static_cast<double>(steps[k].predicted));
    envelope[k] = best;
  }
  double area = 0, prev_recall = 0;
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const double recall = static_cast<double>(steps[k].tp) / static_cast<double>(positives);
    area += (recall - prev_recall) * envelope[k];
    prev_recall = recall;
  }
  return area;
}

double auprc(const std::vector<ScoreMap>& scores, const std::vector<BinaryMask>& gt) {
  const auto p = pool(scores, gt);
  return auprc(p.scores, p.labels);
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b, "dice");
  std::size_t inter = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    total += (a[i] ? 1 : 0) + (b[i] ? 1 : 0);
  }
  return total == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

double ceiling_dice(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::size_t positives = 0;
  const auto steps = descending_steps(scores, labels, positives);
  if (positives == 0) throw std::invalid_argument("ceiling Dice needs a nonempty ground truth");
  // Prefixes of whole tie groups are exactly the sets {score > t}.
  double best = 0;
  for (const auto& s : steps)
    best = std::max(best, 2.0 * static_cast<double>(s.tp) / static_cast<double>(s.predicted + positives));
  return best;
}

double ceiling_dice(const std::vector<ScoreMap>& scores, const std::vector<BinaryMask>& gt, Pooling pooling) {
  if (pooling == Pooling::pooled) {
    const auto p = pool(scores, gt);
    return ceiling_dice(p.scores, p.labels);
  }
  if (scores.size() != gt.size()) throw std::invalid_argument("score and mask sets differ in length");
  std::vector<double> per;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    require_same_shape(scores[i], gt[i], "ceiling_dice");
    if (gt[i].count() == 0) continue;
    per.push_back(ceiling_dice(scores[i].values(), gt[i].values()));
  }
  if (per.empty()) throw std::invalid_argument("ceiling Dice needs a nonempty ground truth");
  return mean_of(per);
}

double region_lpips(const perceptual::FeatureExtractor<float>& fx, const Image& x_ph, const Image& reference,
                    const BinaryMask& region) {
  require_same_shape(x_ph, reference, "region_lpips");
  require_same_shape(x_ph, region, "region_lpips");
  if (region.count() == 0) throw std::invalid_argument("region_lpips on an empty region");
  Image a(x_ph.height(), x_ph.width(), 0.0), b(x_ph.height(), x_ph.width(), 0.0);
  for (std::size_t i = 0; i < region.size(); ++i)
    if (region[i]) {
      a[i] = x_ph[i];
      b[i] = reference[i];
    }
  return 100.0 * perceptual::perceptual_distance(fx, a, b);
}

double paired_significance(std::span<const double> a, std::span<const double> b, std::uint64_t seed, int resamples) {
  if (a.size() != b.size()) throw std::invalid_argument("paired samples differ in length");
  if (a.size() < 2) throw std::invalid_argument("paired test needs at least two pairs");
  if (resamples < 1) throw std::invalid_argument("resamples must be positive");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  double scale = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = a[i] - b[i];
    scale += std::abs(d[i]);
  }
  const double observed = std::abs(std::accumulate(d.begin(), d.end(), 0.0));
  const double tol = 1e-12 * scale;
  auto extreme = [&](double stat) { return std::abs(stat) >= observed - tol; };

  if (n <= 14) {
    std::size_t count = 0;
    const std::uint32_t total = 1u << n;
    for (std::uint32_t signs = 0; signs < total; ++signs) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += (signs >> i & 1u) ? -d[i] : d[i];
      count += extreme(s) ? 1 : 0;
    }
    return static_cast<double>(count) / total;
  }
  Rng rng(seed);
  std::size_t count = 0;
  for (int r = 0; r < resamples; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += rng.bernoulli(0.5) ? -d[i] : d[i];
    count += extreme(s) ? 1 : 0;
  }
  return static_cast<double>(count + 1) / (resamples + 1);
}

Interval bootstrap_interval(std::span<const double> values, int resamples, std::uint64_t seed) {
  if (values.size() < 2) throw std::invalid_argument("bootstrap needs at least two values");
  if (resamples < 1) throw std::invalid_argument("resamples must be positive");
  const std::size_t n = values.size();
  Interval out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);

  std::uint64_t exhaustive = 1;
  for (std::size_t i = 0; i < n && exhaustive <= static_cast<std::uint64_t>(resamples); ++i) exhaustive *= n;

  // Resampling centred values keeps a constant list at exactly zero spread.
  std::vector<double> centred(values.begin(), values.end());
  for (auto& v : centred) v -= out.mean;
  std::vector<double> means;
  auto add = [&](double m) { means.push_back(m); };
  if (exhaustive <= static_cast<std::uint64_t>(resamples)) {
    std::vector<std::size_t> idx(n, 0);
    for (std::uint64_t k = 0; k < exhaustive; ++k) {
      double s = 0;
      for (auto i : idx) s += centred[i];
      add(s / static_cast<double>(n));
      for (std::size_t p = 0; p < n && ++idx[p] == n; ++p) idx[p] = 0;
    }
  } else {
    Rng rng(seed);
    for (int r = 0; r < resamples; ++r) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += centred[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n) - 1))];
      add(s / static_cast<double>(n));
    }
  }
  const double m = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
  double var = 0;
  for (double x : means) var += (x - m) * (x - m);
  out.half_width = std::sqrt(var / static_cast<double>(means.size()));
  return out;
}

long relative_change(double value, double baseline) {
  if (baseline == 0) throw std::invalid_argument("relative change against a zero baseline");
  return std::lround(100.0 * (value - baseline) / std::abs(baseline));
}

const MethodMetrics& MetricsReport::method(const std::string& name) const {
  for (const auto& m : methods)
    if (m.name == name) return m;
  throw std::out_of_range("no method named " + name + " in the report");
}

namespace {

std::string fmt(double v, int precision = 2) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

std::string change(double value, double baseline) {
  if (baseline == 0 || !std::isfinite(value) || !std::isfinite(baseline)) return "";
  const long c = relative_change(value, baseline);
  return " (" + std::string(c >= 0 ? "+" : "") + std::to_string(c) + "%)";
}

nlohmann::json opt(const std::optional<double>& v) {
  return v && std::isfinite(*v) ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

std::string MetricsReport::to_text() const {
  const MethodMetrics* base = nullptr;
  for (const auto& m : methods)
    if (m.name == baseline) base = &m;
  std::ostringstream out;
  out << "# metrics x100; +- is the bootstrap standard error over images";
  if (base) out << "; (x%) is the change relative to " << baseline;
  out << "\nmethod\tlpips_healthy\tlpips_anomaly\tauprc\tceiling_dice\n";
  for (const auto& m : methods) {
    auto lp = [&](const std::optional<double>& v, const std::optional<double>& b) {
      if (!v) return std::string("-");
      return fmt(*v) + (base && b && &m != base ? change(*v, *b) : "");
    };
    auto metric = [&](double v, const Interval& iv, double b) {
      return fmt(100 * v) + " +- " + fmt(100 * iv.half_width) + (base && &m != base ? change(v, b) : "");
    };
    out << m.name << '\t' << lp(m.lpips_healthy, base ? base->lpips_healthy : std::nullopt) << '\t'
        << lp(m.lpips_anomaly, base ? base->lpips_anomaly : std::nullopt) << '\t'
        << metric(m.auprc, m.auprc_interval, base ? base->auprc : 0) << '\t'
        << metric(m.ceiling_dice, m.dice_interval, base ? base->ceiling_dice : 0) << '\n';
  }
  if (!significance.empty()) {
    out << "\n# paired sign-flip test, two-sided\nmethod_a\tmethod_b\tmetric\tn\tp_value\n";
    for (const auto& s : significance)
      out << s.method_a << '\t' << s.method_b << '\t' << s.metric << '\t' << s.n << '\t' << fmt(s.p_value, 4)
          << (s.p_value < 0.05 ? " *" : "") << '\n';
  }
  return out.str();
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["baseline"] = baseline;
  j["uncertainty"] = "bootstrap standard error of the per-image mean";
  j["methods"] = nlohmann::json::array();
  for (const auto& m : methods) {
    nlohmann::json jm{{"name", m.name},
                      {"auprc", m.auprc},
                      {"ceiling_dice", m.ceiling_dice},
                      {"lpips_healthy", opt(m.lpips_healthy)},
                      {"lpips_anomaly", opt(m.lpips_anomaly)},
                      {"auprc_interval", {{"mean", num(m.auprc_interval.mean)}, {"se", num(m.auprc_interval.half_width)}}},
                      {"dice_interval", {{"mean", num(m.dice_interval.mean)}, {"se", num(m.dice_interval.half_width)}}}};
    for (const auto& m2 : methods)
      if (m2.name == baseline && &m2 != &m && m2.auprc > 0 && m2.ceiling_dice > 0)
        jm["relative_change"] = {{"auprc", relative_change(m.auprc, m2.auprc)},
                                 {"ceiling_dice", relative_change(m.ceiling_dice, m2.ceiling_dice)}};
    jm["per_image"] = nlohmann::json::array();
    for (const auto& im : m.per_image)
      jm["per_image"].push_back({{"id", im.id},
                                 {"auprc", num(im.auprc)},
                                 {"ceiling_dice", num(im.ceiling_dice)},
                                 {"lpips_healthy", opt(im.lpips_healthy)},
                                 {"lpips_anomaly", opt(im.lpips_anomaly)}});
    j["methods"].push_back(std::move(jm));
  }
  j["significance"] = nlohmann::json::array();
  for (const auto& s : significance)
    j["significance"].push_back(
        {{"method_a", s.method_a}, {"method_b", s.method_b}, {"metric", s.metric}, {"n", s.n}, {"p_value", s.p_value}});
  return j;
}

namespace {

Interval interval_of(const std::vector<double>& values, const ReportOptions& o) {
  std::vector<double> finite;
  for (double v : values)
    if (std::isfinite(v)) finite.push_back(v);
  if (finite.empty()) return {kNaN, kNaN};
  if (finite.size() == 1) return {finite[0], 0.0};
  return bootstrap_interval(finite, o.bootstrap_resamples, o.seed);
}

}  // namespace

MetricsReport build_report(const std::vector<MethodResults>& methods, const std::vector<LabeledSample>& samples,
                           const perceptual::FeatureExtractor<float>* fx, const ReportOptions& options) {
  if (methods.empty() || samples.empty()) throw std::invalid_argument("empty result set");
  std::vector<BinaryMask> gt;
  for (const auto& s : samples) {
    if (!s.gt_mask) throw std::invalid_argument("evaluation needs a ground-truth mask for every sample");
    gt.push_back(*s.gt_mask);
  }
  MetricsReport report;
  report.baseline = options.baseline;
  for (const auto& m : methods) {
    if (m.results.size() != samples.size())
      throw std::invalid_argument("method " + m.name + " has " + std::to_string(m.results.size()) +
                                  " results for " + std::to_string(samples.size()) + " samples");
    MethodMetrics mm;
    mm.name = m.name;
    std::vector<ScoreMap> scores;
    for (const auto& r : m.results) scores.push_back(r.score);
    mm.auprc = options.pooling == Pooling::pooled ? auprc(scores, gt) : kNaN;
    mm.ceiling_dice = ceiling_dice(scores, gt, options.pooling);

    std::vector<double> lp_h, lp_a, per_auprc, per_dice;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      ImageMetrics im;
      im.id = samples[i].image.id;
      const std::size_t pos = gt[i].count();
      im.auprc = (pos > 0 && pos < gt[i].size()) ? auprc(scores[i].values(), gt[i].values()) : kNaN;
      im.ceiling_dice = pos > 0 ? ceiling_dice(scores[i].values(), gt[i].values()) : kNaN;
      if (fx && samples[i].healthy_reference) {
        const auto& ref = *samples[i].healthy_reference;
        BinaryMask healthy(gt[i].height(), gt[i].width());
        for (std::size_t k = 0; k < healthy.size(); ++k) healthy[k] = gt[i][k] ? 0 : 1;
        if (healthy.count() > 0) {
          im.lpips_healthy = region_lpips(*fx, m.results[i].x_ph, ref, healthy);
          lp_h.push_back(*im.lpips_healthy);
        }
        if (pos > 0) {
          im.lpips_anomaly = region_lpips(*fx, m.results[i].x_ph, ref, gt[i]);
          lp_a.push_back(*im.lpips_anomaly);
        }
      }
      per_auprc.push_back(im.auprc);
      per_dice.push_back(im.ceiling_dice);
      mm.per_image.push_back(std::move(im));
    }
    if (options.pooling == Pooling::per_image) mm.auprc = mean_of([&] {
      std::vector<double> f;
      for (double v : per_auprc)
        if (std::isfinite(v)) f.push_back(v);
      return f;
    }());
    if (!lp_h.empty()) mm.lpips_healthy = mean_of(lp_h);
    if (!lp_a.empty()) mm.lpips_anomaly = mean_of(lp_a);
    mm.auprc_interval = interval_of(per_auprc, options);
    mm.dice_interval = interval_of(per_dice, options);
    report.methods.push_back(std::move(mm));
  }

  if (!options.baseline.empty()) {
    const auto& base = report.method(options.baseline);
    for (const auto& m : report.methods) {
      if (m.name == options.baseline) continue;
      auto add = [&](const char* metric, auto member) {
        std::vector<double> a, b;
        for (std::size_t i = 0; i < samples.size(); ++i) {
          const double x = m.per_image[i].*member, y = base.per_image[i].*member;
          if (std::isfinite(x) && std::isfinite(y)) {
            a.push_back(x);
            b.push_back(y);
          }
        }
        if (a.size() < 2) return;
        report.significance.push_back({m.name, base.name, metric,
                                       paired_significance(a, b, options.seed, options.significance_resamples),
                                       static_cast<int>(a.size())});
      };
      add("auprc", &ImageMetrics::auprc);
      add("ceiling_dice", &ImageMetrics::ceiling_dice);
    }
  }
  return report;
}

void write_figure(const std::filesystem::path& path, const std::vector<scoring::DetectionResult>& results,
                  int max_rows) {
  if (results.empty()) throw std::invalid_argument("no results to draw");
  const int rows = std::min<int>(max_rows, static_cast<int>(results.size()));
  const int h = results[0].input.height(), w = results[0].input.width();
  Grid<double> canvas(rows * h, 4 * w, 0.0);
  for (int r = 0; r < rows; ++r) {
    const auto& res = results[static_cast<std::size_t>(r)];
    require_same_shape(res.input, results[0].input, "write_figure");
    double top = 0;
    for (double v : res.score) top = std::max(top, v);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        canvas(r * h + y, x) = res.input(y, x);
        canvas(r * h + y, w + x) = res.mask(y, x) ? 1.0 : 0.0;
        canvas(r * h + y, 2 * w + x) = res.x_ph(y, x);
        canvas(r * h + y, 3 * w + x) = top > 0 ? res.score(y, x) / top : 0.0;
      }
  }
  io::write_png(path, canvas, 8);
}

}  // namespace phanes::eval
