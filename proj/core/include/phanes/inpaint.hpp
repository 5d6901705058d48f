#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "phanes/checkpoint.hpp"
#include "phanes/image.hpp"
#include "phanes/latent.hpp"
#include "phanes/mask.hpp"
#include "phanes/nn/layers.hpp"
#include "phanes/perceptual.hpp"

namespace phanes::inpaint {

inline constexpr const char* kCheckpointHeader = "phanes-inpaint-v1";

template <class T>
using Var = nn::Var<T>;

/// Encoder-decoder with two downsamplings and dilated aggregation blocks.
struct InpaintArch {
  int resolution = 64;
  int base_width = 32;
  int blocks = 4;
  std::vector<int> dilations{1, 2, 4, 8};
  int disc_width = 32;

  void validate() const;
};

/// Random training masks: unions of rotated ellipses.
struct MaskSamplerParams {
  int min_shapes = 1;
  int max_shapes = 4;
  double min_radius_frac = 0.05;
  double max_radius_frac = 0.25;
  /// Masks never cover more than this fraction of the image.
  double max_fraction = 0.4;
  /// Share of training masks taken from mask-generation proposals when available.
  double proposal_fraction = 0.5;

  void validate() const;
};

struct InpaintTrainConfig {
  double w_l1 = 1.0;
  double w_perc = 0.1;
  double w_adv = 0.01;
  double lr_g = 1e-4;
  double lr_d = 1e-4;
  int batch_size = 8;
  int epochs = 50;
  int early_stop_patience = 20;
  /// Gaussian blur applied to the mask before it becomes the discriminator target.
  double soft_mask_sigma = 1.5;
  bool augment = true;
  AugmentParams augment_params{};
  MaskSamplerParams sampler{};
  std::int64_t max_steps = 0;

  void validate() const;
};

nlohmann::json to_json(const InpaintArch& a);
InpaintArch arch_from_json(const nlohmann::json& j);
nlohmann::json to_json(const InpaintTrainConfig& c);
InpaintTrainConfig train_config_from_json(const nlohmann::json& j);

/// Zero-filled image plus the mask of pixels to fill.
struct InpaintInput {
  Image masked_image;
  BinaryMask mask;

  /// Throws unless shapes agree, the mask is binary and masked pixels are zero.
  void validate() const;
};

/// x * (1 - m).
InpaintInput make_inpaint_input(const Image& x, const BinaryMask& mask);

template <class T>
class Generator {
 public:
  Generator() = default;
  Generator(const InpaintArch& arch, std::uint64_t seed);

  /// masked, mask: [N,1,R,R] -> [N,1,R,R] in (0,1).
  Var<T> forward(const Var<T>& masked, const Var<T>& mask) const;
  nn::ParamList<T> params() const;
  const InpaintArch& arch() const { return arch_; }

 private:
  struct Block {
    std::vector<nn::Conv2d<T>> branches;
    nn::Conv2d<T> fuse;
    nn::Conv2d<T> gate;
  };
  InpaintArch arch_;
  nn::Conv2d<T> stem_, down1_, down2_;
  std::vector<Block> blocks_;
  nn::ConvTranspose2d<T> up1_, up2_;
  nn::Conv2d<T> out_;
};

/// Patch discriminator; output grid is R/8 x R/8.
template <class T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const InpaintArch& arch, std::uint64_t seed);

  Var<T> forward(const Var<T>& x) const;
  nn::ParamList<T> params() const;

 private:
  std::vector<nn::Conv2d<T>> convs_;
  nn::Conv2d<T> head_;
};

/// Generator output for a single image (full frame).
Image inpaint(const Generator<float>& generator, const InpaintInput& input);

/// x_ph = x * (1 - m) + x_gen * m; pixels with m = 0 are copied from x.
Image composite_pseudo_healthy(const Image& x, const BinaryMask& mask, const Image& x_gen);

/// Gaussian-blurred mask batch average-pooled onto an out_h x out_w grid.
template <class T>
nn::Tensor<T> soft_mask_targets(const nn::Tensor<T>& masks, int out_h, int out_w, double sigma);

template <class T>
struct DiscriminatorLosses {
  Var<T> total;  // real + fake
  double real = 0;
  double fake = 0;
};

/// Least-squares patch loss: D(real) -> 0 and D(fake) -> soft mask.
/// `fake` is treated as a constant.
template <class T>
DiscriminatorLosses<T> discriminator_loss(const Discriminator<T>& d, const nn::Tensor<T>& real,
                                          const nn::Tensor<T>& fake, const nn::Tensor<T>& mask, double sigma);

/// Single-image form.
DiscriminatorLosses<double> discriminator_step(const Discriminator<double>& d, const Image& real, const Image& fake,
                                               const BinaryMask& mask, double sigma = 1.5);

template <class T>
struct GeneratorLosses {
  Var<T> total;
  Var<T> x_ph;
  double l1 = 0;
  double perceptual = 0;
  double adversarial = 0;
};

/// w_l1 * L1(x_gen*m, x*m) / mean(m) + w_perc * perceptual(x_ph, x)
///   + w_adv * mean(soft_mask * D(x_ph)^2).
/// `fx` may be null when w_perc == 0; `d` may be null when w_adv == 0.
template <class T>
GeneratorLosses<T> generator_loss(const Generator<T>& g, const Discriminator<T>* d,
                                  const perceptual::FeatureExtractor<T>* fx, const nn::Tensor<T>& x,
                                  const nn::Tensor<T>& mask, const InpaintTrainConfig& config);

/// Random ellipse-union mask with 0 < coverage <= max_fraction.
BinaryMask sample_random_mask(int height, int width, const MaskSamplerParams& params, Rng& rng);

/// Mask-generation proposals on training images, binarized at the pooled
/// `percentile` of their own maps. Empty or oversized proposals are dropped.
std::vector<BinaryMask> mask_proposals(const latent::LatentModel<float>& model, const std::vector<Image>& images,
                                       const MaskMapOptions& options, double percentile, double max_fraction,
                                       const perceptual::PerceptualOptions& perceptual = {});

/// Mean masked-region L1 |x_gen - x| over pixels with m = 1.
double masked_l1(const Generator<float>& g, const std::vector<Image>& images, const std::vector<BinaryMask>& masks);

struct EpochLog {
  int epoch = 0;
  double generator_loss = 0;
  double discriminator_loss = 0;
  double val_masked_l1 = 0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const EpochLog&)> on_epoch;
};

struct InpaintTrainResult {
  Generator<float> generator;  // best-validation weights
  Discriminator<float> discriminator;
  std::vector<EpochLog> log;
  std::vector<double> step_losses;  // generator loss per step
  double initial_val_l1 = 0;
  double best_val_l1 = 0;
  int epochs_run = 0;
  bool early_stopped = false;
  Checkpoint checkpoint;
};

/// `features` supplies the perceptual term (required when w_perc > 0);
/// `proposals` may be empty, in which case all masks are random shapes.
InpaintTrainResult train_inpainter(const std::vector<Image>& train, const std::vector<Image>& val,
                                   const InpaintArch& arch, const InpaintTrainConfig& config, std::uint64_t seed,
                                   const perceptual::FeatureExtractor<float>* features,
                                   const std::vector<BinaryMask>& proposals, const TrainOptions& options = {});

Generator<float> load_generator(const Checkpoint& checkpoint);
Generator<float> load_generator(const std::filesystem::path& path);

}  // namespace phanes::inpaint
