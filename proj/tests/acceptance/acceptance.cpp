// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
// Usage: phanes_acceptance [--only N[,N...]] [--workdir DIR]
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "phanes/config.hpp"
#include "phanes/evaluation.hpp"
#include "phanes/inpaint.hpp"
#include "phanes/io.hpp"
#include "phanes/latent.hpp"
#include "phanes/nn/ops.hpp"
#include "phanes/pipeline.hpp"
#include "phanes/scoring.hpp"
#include "support/gradcheck.hpp"
#include "support/metric_oracles.hpp"

using namespace phanes;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// 1. Compositing exactness.
Outcome compositing() {
  const int res = 16;
  inpaint::InpaintArch arch;
  arch.resolution = res;
  arch.base_width = 4;
  arch.blocks = 1;
  arch.disc_width = 4;
  const inpaint::Generator<float> generator(arch, 11);
  const latent::LatentModel<float> model(latent::LatentArch{res, 2, 4, 8}, 12);
  const perceptual::EncoderFeatures<float> fx(model);
  Rng rng(13);
  std::size_t checked = 0, bad_pixels = 0, bad_scores = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Image x(res, res), gen(res, res);
    BinaryMask m(res, res);
    const double p = rng.uniform(0.0, 0.6);
    for (auto& v : x) v = rng.uniform();
    for (auto& v : gen) v = rng.uniform();
    for (auto& v : m) v = rng.bernoulli(p) ? 1 : 0;
    // Every tenth triple takes the generator output from a real forward pass.
    const Image g = trial % 10 == 0 ? inpaint::inpaint(generator, inpaint::make_inpaint_input(x, m)) : gen;
    const Image x_ph = inpaint::composite_pseudo_healthy(x, m, g);
    const ScoreMap score = scoring::anomaly_map(x, x_ph, fx);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (m[i]) continue;
      ++checked;
      if (std::memcmp(&x_ph[i], &x[i], sizeof(double)) != 0) ++bad_pixels;
      if (score[i] != 0.0) ++bad_scores;
    }
  }
  return {bad_pixels == 0 && bad_scores == 0,
          std::to_string(checked) + " unmasked pixels, " + std::to_string(bad_pixels) + " differ, " +
              std::to_string(bad_scores) + " nonzero scores"};
}

// 2. Metric oracle equivalence.
Outcome metric_oracles() {
  Rng rng(21);
  double worst_auprc = 0, worst_dice = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto in = oracle::random_instance(rng);
    worst_auprc = std::max(worst_auprc, std::abs(eval::auprc(in.s, in.y) - oracle::oracle_auprc(in.s, in.y)));
    worst_dice = std::max(worst_dice, std::abs(eval::ceiling_dice(in.s, in.y) - oracle::oracle_dice(in.s, in.y)));
  }
  std::ostringstream d;
  d << "max |delta| auprc " << worst_auprc << ", ceiling dice " << worst_dice << " over 1000 instances";
  return {worst_auprc < 1e-9 && worst_dice < 1e-9, d.str()};
}

// 3. Gradient correctness in double precision.
Outcome gradients() {
  using nn::Tensor;
  const latent::LatentArch larch{8, 2, 2, 3};
  inpaint::InpaintArch iarch;
  iarch.resolution = 8;
  iarch.base_width = 2;
  iarch.blocks = 1;
  iarch.dilations = {1, 2, 4, 8};
  iarch.disc_width = 2;

  auto images = [](Rng& rng) {
    Tensor<double> t({2, 1, 8, 8});
    for (auto& v : t.values()) v = rng.uniform(0.05, 0.95);
    return t;
  };
  auto latent_config = [](Rng& rng) {
    latent::LatentTrainConfig c;
    c.alpha = rng.uniform(0.5, 3.0);
    c.gamma = rng.uniform(0.2, 2.0);
    c.lambda_rev = rng.uniform(0.2, 2.0);
    c.beta_kl = rng.uniform(0.2, 1.5);
    c.exp_elbo_scale = rng.uniform(0.05, 0.3);
    c.fake_source = latent::FakeSource::prior;
    return c;
  };

  struct Row {
    const char* name;
    double worst = 0;
    std::size_t max_params = 0;
    bool zero_gradient = false;
  };
  std::vector<Row> rows{{"encoder_loss"}, {"decoder_loss"}, {"reversed_embedding_loss"},
                        {"discriminator_loss"}, {"generator_loss"}};
  auto record = [](Row& row, const check::GradCheckResult& r, std::size_t params) {
    row.worst = std::max(row.worst, r.rel_error);
    row.max_params = std::max(row.max_params, params);
    row.zero_gradient = row.zero_gradient || !(r.grad_norm > 0);
  };

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    {
      latent::LatentModel<double> model(larch, 100 + seed);
      Rng rng(200 + seed);
      const auto x = images(rng);
      Rng nrng(300 + seed);
      const auto noise = latent::LossNoise<double>::draw(2, 3, nrng);
      const auto c = latent_config(rng);
      const auto params = model.encoder_params();
      record(rows[0], check::gradcheck(params, [&] { return latent::encoder_loss(model, x, noise, c).loss; }),
             nn::parameter_count(model.params()));
    }
    {
      latent::LatentModel<double> model(larch, 400 + seed);
      Rng rng(500 + seed);
      const auto x = images(rng);
      Rng nrng(600 + seed);
      const auto noise = latent::LossNoise<double>::draw(2, 3, nrng);
      const auto c = latent_config(rng);
      const auto params = model.decoder_params();
      record(rows[1], check::gradcheck(params, [&] { return latent::decoder_loss(model, x, noise, c).loss; }),
             nn::parameter_count(model.params()));
    }
    {
      latent::LatentModel<double> model(larch, 700 + seed);
      Rng rng(800 + seed);
      const auto x = nn::constant(images(rng));
      const auto y = nn::constant(images(rng));
      const auto params = model.encoder_params();
      record(rows[2],
             check::gradcheck(params, [&] { return nn::mean(latent::reversed_embedding_loss(model, x, y)); }),
             nn::parameter_count(model.params()));
    }
    {
      inpaint::Discriminator<double> d(iarch, 10 + seed);
      Rng rng(20 + seed);
      Tensor<double> real({2, 1, 8, 8}), fake({2, 1, 8, 8}), mask({2, 1, 8, 8});
      for (auto& v : real.values()) v = rng.uniform();
      for (auto& v : fake.values()) v = rng.uniform();
      for (auto& v : mask.values()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
      record(rows[3],
             check::gradcheck(d.params(), [&] { return inpaint::discriminator_loss(d, real, fake, mask, 1.5).total; }),
             nn::parameter_count(d.params()));
    }
    {
      inpaint::Generator<double> g(iarch, 30 + seed);
      inpaint::Discriminator<double> d(iarch, 40 + seed);
      latent::LatentModel<double> encoder(larch, 50 + seed);
      perceptual::EncoderFeatures<double> fx(encoder);
      Rng rng(60 + seed);
      Tensor<double> x({2, 1, 8, 8}), mask({2, 1, 8, 8});
      for (auto& v : x.values()) v = rng.uniform();
      for (auto& v : mask.values()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
      inpaint::InpaintTrainConfig c;
      c.w_l1 = rng.uniform(0.5, 1.5);
      c.w_perc = rng.uniform(0.1, 1.0);
      c.w_adv = rng.uniform(0.1, 1.0);
      record(rows[4],
             check::gradcheck(g.params(), [&] { return inpaint::generator_loss<double>(g, &d, &fx, x, mask, c).total; }),
             nn::parameter_count(g.params()));
    }
  }

  bool pass = true;
  std::ostringstream d;
  for (const auto& r : rows) {
    pass = pass && r.worst < 1e-4 && r.max_params <= 5000 && !r.zero_gradient;
    d << (&r == &rows[0] ? "" : ", ") << r.name << " " << std::scientific << std::setprecision(1) << r.worst << " ("
      << r.max_params << " params)";
  }
  return {pass, "worst relative error over 10 seeds: " + d.str()};
}

// 7. Paired significance.
Outcome significance() {
  Rng rng(71);
  int mismatches = 0, cases = 0;
  for (int n = 2; n <= 10; ++n)
    for (int trial = 0; trial < 20; ++trial, ++cases) {
      std::vector<double> a, b;
      for (int i = 0; i < n; ++i) {
        a.push_back(rng.uniform());
        // Some pairs tie exactly so zero differences are covered.
        b.push_back(rng.bernoulli(0.2) ? a.back() : rng.uniform());
      }
      if (eval::paired_significance(a, b) != oracle::oracle_sign_flip(a, b)) ++mismatches;
    }
  int not_one = 0;
  for (int n : {2, 5, 10, 40, 200}) {
    std::vector<double> a;
    for (int i = 0; i < n; ++i) a.push_back(rng.uniform());
    if (eval::paired_significance(a, a) != 1.0) ++not_one;
  }
  return {mismatches == 0 && not_one == 0, std::to_string(cases) + " enumerations (n = 2..10), " +
                                               std::to_string(mismatches) + " mismatches; identical inputs: " +
                                               std::to_string(not_one) + " p != 1"};
}

// Shared fixture for criteria 4 to 6: the desk configuration at full size.
struct DeskRun {
  bool ok = false;
  std::string error;
  double train_seconds = 0;
  double total_seconds = 0;
  nlohmann::json calibration;
  eval::MetricsReport report;
};

DeskRun run_desk(const fs::path& config_path, const fs::path& workdir) {
  DeskRun r;
  try {
    auto config = load_config(config_path);
    config.output_dir = workdir / "desk";
    pipeline::Pipeline p(config);
    pipeline::RunOptions o;
    o.force = true;
    o.log = &std::cerr;
    const auto t0 = Clock::now();
    p.make_phantoms(o);
    p.train_latent(o);
    auto vae = o;
    vae.vae_only = true;
    p.train_latent(vae);
    p.train_inpainter(o);
    r.train_seconds = seconds_since(t0);
    p.calibrate(o);
    p.detect(o);
    auto gt = o;
    gt.gt_masks = true;
    p.detect(gt);
    r.report = p.evaluate(o);
    r.total_seconds = seconds_since(t0);
    r.calibration = p.verify(pipeline::kCalibration).summary;
    std::cerr << r.report.to_text();
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

// 4. Calibration contract.
Outcome calibration(const DeskRun& run) {
  if (!run.ok) return {false, "desk pipeline failed: " + run.error};
  const double f = run.calibration.at("healthy_test_flagged_fraction").get<double>();
  const auto n_val = run.calibration.at("calibration_set_size").get<long>();
  const auto n_test = run.calibration.at("healthy_test_images").get<long>();
  const bool sizes = n_test == 100;
  return {sizes && f >= 0.002 && f <= 0.03,
          "flagged fraction " + fixed(100 * f, 3) + "% on " + std::to_string(n_test) + " healthy test images (" +
              std::to_string(n_val) + "-image calibration set, p99), required [0.2%, 3%]"};
}

// 5. End-to-end ordering.
Outcome ordering(const DeskRun& run) {
  if (!run.ok) return {false, "desk pipeline failed: " + run.error};
  const auto& ph = run.report.method("PHANES");
  const auto& vae = run.report.method("VAE");
  const auto& gt = run.report.method("PHANES-GT");
  const bool auprc = ph.auprc >= 1.10 * vae.auprc;
  const bool dice = gt.ceiling_dice > ph.ceiling_dice;
  const bool budget = run.train_seconds <= 1800;
  std::ostringstream d;
  d << "AUPRC PHANES " << fixed(ph.auprc) << " vs VAE " << fixed(vae.auprc) << " (ratio "
    << fixed(vae.auprc > 0 ? ph.auprc / vae.auprc : INFINITY, 3) << ", need >= 1.10); ceiling Dice GT "
    << fixed(gt.ceiling_dice) << " vs PHANES " << fixed(ph.ceiling_dice) << "; training " << fixed(run.train_seconds, 0)
    << " s (budget 1800 s) on " << ph.per_image.size() << " test images";
  return {auprc && dice && budget && ph.per_image.size() == 200, d.str()};
}

// 6. Healthy-region reconstruction ordering.
Outcome healthy_lpips(const DeskRun& run) {
  if (!run.ok) return {false, "desk pipeline failed: " + run.error};
  const auto& ph = run.report.method("PHANES");
  const auto& lo = run.report.method("latent-only");
  if (!ph.lpips_healthy || !lo.lpips_healthy) return {false, "healthy-region LPIPS missing from the report"};
  return {*ph.lpips_healthy < *lo.lpips_healthy,
          "healthy-region LPIPS x100 PHANES " + fixed(*ph.lpips_healthy) + " vs latent-only " +
              fixed(*lo.lpips_healthy)};
}

// 8. Determinism of the full pipeline on 200 phantoms.
Outcome determinism(const fs::path& workdir) {
  ExperimentConfig c;
  c.seed = 8;
  c.resolution = 32;
  c.data.train_count = 120;
  c.data.val_count = 20;
  c.data.test_healthy_count = 20;
  c.data.test_anomalous_count = 40;
  c.latent_arch.stages = 3;
  c.latent_arch.base_width = 4;
  c.latent_arch.latent_dim = 16;
  c.latent.epochs = 2;
  c.latent.lr = 5e-4;
  c.inpaint_arch.base_width = 4;
  c.inpaint_arch.blocks = 1;
  c.inpaint_arch.disc_width = 4;
  c.inpaint.epochs = 2;
  c.eval.bootstrap_resamples = 200;
  c.eval.significance_resamples = 1000;
  std::vector<std::string> text, json;
  for (const char* run : {"replay_a", "replay_b"}) {
    c.output_dir = workdir / run;
    pipeline::Pipeline p(c);
    const auto report = p.run_all({.force = true});
    text.push_back(io::read_text(c.output_dir / "eval" / "report.txt"));
    json.push_back(io::read_text(c.output_dir / "eval" / "report.json"));
    if (text.back() != report.to_text()) return {false, "report.txt differs from the returned report"};
  }
  const bool same = text[0] == text[1] && json[0] == json[1];
  return {same, std::string(same ? "identical" : "different") + " report.txt (" + std::to_string(text[0].size()) +
                    " bytes) and report.json (" + std::to_string(json[0].size()) + " bytes) across two runs"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  fs::path workdir = fs::temp_directory_path() / "phanes_acceptance";
  fs::path config = fs::path(PHANES_SOURCE_DIR) / "configs" / "desk.ini";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream s(argv[++i]);
      for (std::string tok; std::getline(s, tok, ',');) only.insert(std::stoi(tok));
    } else if (a == "--workdir" && i + 1 < argc) {
      workdir = argv[++i];
    } else if (a == "--config" && i + 1 < argc) {
      config = argv[++i];
    } else {
      std::cerr << "usage: phanes_acceptance [--only N,...] [--workdir DIR] [--config desk.ini]\n";
      return 2;
    }
  }
  auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

  const char* names[] = {"", "compositing exactness", "metric oracle equivalence", "gradient correctness",
                         "calibration contract", "end-to-end ordering", "healthy-region reconstruction ordering",
                         "paired significance", "pipeline determinism"};

  DeskRun desk;
  if (wanted(4) || wanted(5) || wanted(6)) desk = run_desk(config, workdir);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, compositing},
      {2, metric_oracles},
      {3, gradients},
      {4, [&] { return calibration(desk); }},
      {5, [&] { return ordering(desk); }},
      {6, [&] { return healthy_lpips(desk); }},
      {7, significance},
      {8, [&] { return determinism(workdir); }},
  };

  int failed = 0;
  for (const auto& [n, run] : criteria) {
    if (!wanted(n)) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << n << " " << names[n] << ": " << o.detail << " ["
              << fixed(seconds_since(t0), 1) << " s]" << std::endl;
  }
  if (desk.ok) std::cout << "desk pipeline wall time " << fixed(desk.total_seconds, 0) << " s" << std::endl;
  return failed == 0 ? 0 : 1;
}
