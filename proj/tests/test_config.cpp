#include <gtest/gtest.h>

#include <filesystem>

#include "phanes/config.hpp"
#include "phanes/errors.hpp"

using namespace phanes;

namespace {

ExperimentConfig odd_config() {
  ExperimentConfig c;
  c.seed = 12345678901234ull;
  c.resolution = 32;
  c.output_dir = "runs/odd dir";
  c.data.train_count = 17;
  c.data.phantom.noise_amplitude = 0.1 + 0.2;  // not representable in short decimal form
  c.data.anomaly.kinds = {AnomalyKind::scramble, AnomalyKind::hypo};
  c.augment.max_rotation_deg = 1.0 / 3.0;
  c.latent_arch.stages = 3;
  c.latent.lr = 5e-5;
  c.latent.fake_source = latent::FakeSource::both;
  c.latent.vae_only = true;
  c.inpaint_arch.dilations = {1, 3};
  c.inpaint.w_perc = 0.0;
  c.mask_map.clahe.clip_limit = 0.01234567890123;
  c.calibration_percentile = 99.5;
  c.eval.baseline = "latent-only";
  c.eval.per_image_pooling = true;
  return c;
}

}  // namespace

TEST(Config, IniRoundTripIsExact) {
  const auto c = odd_config();
  const std::string text = to_ini(c);
  const auto back = config_from_ini(text);
  EXPECT_EQ(to_ini(back), text);
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.data.phantom.noise_amplitude, 0.1 + 0.2);
  EXPECT_EQ(back.augment.max_rotation_deg, 1.0 / 3.0);
  EXPECT_EQ(back.seed, 12345678901234ull);
  EXPECT_EQ(back.output_dir, std::filesystem::path("runs/odd dir"));
  EXPECT_EQ(back.latent.fake_source, latent::FakeSource::both);
  EXPECT_EQ(back.inpaint_arch.dilations, (std::vector<int>{1, 3}));
  ASSERT_EQ(back.data.anomaly.kinds.size(), 2u);
  EXPECT_EQ(back.data.anomaly.kinds[0], AnomalyKind::scramble);
}

TEST(Config, DefaultsSurviveEmptyFile) {
  EXPECT_EQ(to_json(config_from_ini("")), to_json(ExperimentConfig{}));
}

TEST(Config, PartialFileOverridesOnlyGivenKeys) {
  const auto c = config_from_ini("; comment\n[experiment]\nseed = 7\n[latent]\nepochs = 3\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.latent.epochs, 3);
  EXPECT_EQ(c.inpaint.epochs, ExperimentConfig{}.inpaint.epochs);
}

TEST(Config, SameKeyInDifferentSectionsIsIndependent) {
  const auto c = config_from_ini("[latent]\nbase_width = 5\n[inpaint]\nbase_width = 6\n");
  EXPECT_EQ(c.latent_arch.base_width, 5);
  EXPECT_EQ(c.inpaint_arch.base_width, 6);
}

TEST(Config, UnknownKeyIsRejected) {
  EXPECT_THROW(config_from_ini("[latent]\nlearning_rate = 1\n"), ConfigError);
  EXPECT_THROW(config_from_ini("[nonsense]\nseed = 1\n"), ConfigError);
  EXPECT_THROW(config_from_ini("seed = 1\n"), ConfigError);
}

TEST(Config, MalformedValuesAreRejected) {
  EXPECT_THROW(config_from_ini("[experiment]\nseed = -1\n"), ConfigError);
  EXPECT_THROW(config_from_ini("[experiment]\nresolution = 64px\n"), ConfigError);
  EXPECT_THROW(config_from_ini("[latent]\nlr = fast\n"), ConfigError);
  EXPECT_THROW(config_from_ini("[latent]\naugment = maybe\n"), ConfigError);
  EXPECT_THROW(config_from_ini("[latent]\nfake_source = posterior\n"), ConfigError);
  EXPECT_THROW(config_from_ini("[anomaly]\nkinds = hypo,cyst\n"), ConfigError);
  EXPECT_THROW(config_from_ini("[experiment\nseed = 1\n"), ConfigError);
}

TEST(Config, MissingFileIsConfigError) {
  EXPECT_THROW(load_config("/nonexistent/phanes.ini"), ConfigError);
}

TEST(Config, FinalizePropagatesSharedSettings) {
  ExperimentConfig c;
  c.resolution = 32;
  c.augment.max_rotation_deg = 3.0;
  c.finalize();
  EXPECT_EQ(c.latent_arch.resolution, 32);
  EXPECT_EQ(c.inpaint_arch.resolution, 32);
  EXPECT_EQ(c.latent.augment_params.max_rotation_deg, 3.0);
  EXPECT_EQ(c.inpaint.augment_params.max_rotation_deg, 3.0);
}

TEST(Config, FinalizeRejectsInvalidSettings) {
  auto bad = [](auto mutate) {
    ExperimentConfig c;
    mutate(c);
    EXPECT_THROW(c.finalize(), ConfigError);
  };
  bad([](ExperimentConfig& c) { c.resolution = 4; });
  bad([](ExperimentConfig& c) { c.resolution = 40; });  // not divisible by 2^stages
  bad([](ExperimentConfig& c) { c.data.train_count = 0; });
  bad([](ExperimentConfig& c) { c.latent.lr = 0; });
  bad([](ExperimentConfig& c) { c.inpaint.w_l1 = c.inpaint.w_perc = c.inpaint.w_adv = 0; });
  bad([](ExperimentConfig& c) { c.calibration_percentile = 0; });
  bad([](ExperimentConfig& c) { c.proposal_percentile = 101; });
  bad([](ExperimentConfig& c) { c.dilation_radius = -1; });
  bad([](ExperimentConfig& c) { c.lpips.first_layer = c.latent_arch.stages; });
  bad([](ExperimentConfig& c) { c.eval.bootstrap_resamples = 0; });
  bad([](ExperimentConfig& c) { c.augment.scale_min = 2; });
}

TEST(Config, SaveAndLoadFile) {
  const auto path = std::filesystem::temp_directory_path() / "phanes_test_config.ini";
  save_config(path, odd_config());
  EXPECT_EQ(to_json(load_config(path)), to_json(odd_config()));
  std::filesystem::remove(path);
}
