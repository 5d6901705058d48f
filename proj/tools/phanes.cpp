// Command-line driver: one subcommand per pipeline stage.
#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "phanes/config.hpp"
#include "phanes/errors.hpp"
#include "phanes/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kDependency = 3, kDivergence = 4 };

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  bool vae_only = false;
  bool gt_masks = false;
};

phanes::ExperimentConfig resolve(const Args& a) {
  phanes::ExperimentConfig c = a.config.empty() ? phanes::ExperimentConfig{} : phanes::load_config(a.config);
  if (a.seed) c.seed = *a.seed;
  if (!a.out.empty()) c.output_dir = a.out;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pseudo-healthy inpainting anomaly segmentation on phantom images"};
  app.require_subcommand(1);
  app.fallthrough();

  Args args;
  app.add_option("--config", args.config, "INI config file (defaults are used for missing keys)")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", args.seed, "override [experiment] seed");
  app.add_option("--out", args.out, "override [experiment] output_dir");
  app.add_flag("--force", args.force, "overwrite the stage's existing output directory");
  app.add_flag("--vae-only", args.vae_only, "train-latent: train the plain-VAE ablation into latent_vae/");
  app.add_flag("--gt-masks", args.gt_masks, "detect: use ground-truth masks, writing detect_gt/");

  auto* make = app.add_subcommand("make-phantoms", "generate the phantom dataset and its manifests");
  auto* latent = app.add_subcommand("train-latent", "train the latent generative network");
  auto* inpaint = app.add_subcommand("train-inpainter", "train the mask-conditioned inpainter");
  auto* calibrate = app.add_subcommand("calibrate", "fit the mask threshold on healthy validation images");
  auto* detect = app.add_subcommand("detect", "segment the anomalous test split");
  auto* evaluate = app.add_subcommand("evaluate", "compute metrics, report and figure");
  auto* report = app.add_subcommand("report", "print the last evaluation report");
  auto* run = app.add_subcommand("run", "every stage in order, including the VAE and ground-truth-mask variants");
  auto* dump = app.add_subcommand("dump-config", "print the effective config as INI");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    const auto config = resolve(args);
    if (dump->parsed()) {
      std::cout << phanes::to_ini(config);
      return kOk;
    }
    phanes::pipeline::Pipeline p(config);
    phanes::pipeline::RunOptions o;
    o.force = args.force;
    o.vae_only = args.vae_only;
    o.gt_masks = args.gt_masks;
    o.log = &std::cerr;

    if (make->parsed()) p.make_phantoms(o);
    else if (latent->parsed()) p.train_latent(o);
    else if (inpaint->parsed()) p.train_inpainter(o);
    else if (calibrate->parsed()) p.calibrate(o);
    else if (detect->parsed()) p.detect(o);
    else if (evaluate->parsed()) std::cout << p.evaluate(o).to_text();
    else if (report->parsed()) std::cout << p.report();
    else if (run->parsed()) std::cout << p.run_all(o).to_text();
    return kOk;
  } catch (const phanes::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const phanes::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << '\n';
    return kDependency;
  } catch (const phanes::NumericalDivergence& e) {
    std::cerr << "numerical divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
