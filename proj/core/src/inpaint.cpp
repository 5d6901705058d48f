#include "phanes/inpaint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>

#include "phanes/errors.hpp"
#include "phanes/nn/ops.hpp"
#include "phanes/nn/optim.hpp"

namespace phanes::inpaint {

using nn::ConvSpec;
using nn::Tensor;

namespace {

constexpr std::uint64_t kGenInitStream = 0x67696e74;
constexpr std::uint64_t kDiscInitStream = 0x64696e74;
constexpr std::uint64_t kAugmentStream = 0x69617567;
constexpr std::uint64_t kTrainStream = 0x6974726e;
constexpr std::uint64_t kValMaskStream = 0x6976616c;

const ConvSpec kSame3{1, 1, 1};
const ConvSpec kDown4{2, 1, 1};

}  // namespace

void InpaintArch::validate() const {
  if (resolution < 8 || resolution % 8 != 0) throw std::invalid_argument("inpainter resolution must be a multiple of 8");
  if (base_width < 1 || disc_width < 1 || blocks < 0) throw std::invalid_argument("inpainter widths must be positive");
  if (dilations.empty()) throw std::invalid_argument("inpainter blocks need at least one dilation");
  if ((4 * base_width) % static_cast<int>(dilations.size()) != 0)
    throw std::invalid_argument("4 * base_width must be divisible by the number of dilations");
  for (int d : dilations)
    if (d < 1) throw std::invalid_argument("dilations must be >= 1");
}

void MaskSamplerParams::validate() const {
  if (min_shapes < 1 || max_shapes < min_shapes) throw std::invalid_argument("mask sampler shape counts out of range");
  if (!(min_radius_frac > 0) || max_radius_frac < min_radius_frac)
    throw std::invalid_argument("mask sampler radius range out of range");
  if (!(max_fraction > 0 && max_fraction <= 1)) throw std::invalid_argument("mask max_fraction must lie in (0, 1]");
  if (std::numbers::pi * min_radius_frac * min_radius_frac > max_fraction)
    throw std::invalid_argument("smallest sampler shape already exceeds max_fraction");
  if (!(proposal_fraction >= 0 && proposal_fraction <= 1))
    throw std::invalid_argument("proposal_fraction must lie in [0, 1]");
}

void InpaintTrainConfig::validate() const {
  if (w_l1 < 0 || w_perc < 0 || w_adv < 0) throw std::invalid_argument("inpainter loss weights must be >= 0");
  if (w_l1 + w_perc + w_adv <= 0) throw std::invalid_argument("at least one inpainter loss weight must be > 0");
  if (!(lr_g > 0) || !(lr_d > 0)) throw std::invalid_argument("inpainter learning rates must be > 0");
  if (batch_size < 1 || epochs < 0 || early_stop_patience < 1)
    throw std::invalid_argument("inpainter batch/epoch settings out of range");
  if (!(soft_mask_sigma >= 0)) throw std::invalid_argument("soft_mask_sigma must be >= 0");
  augment_params.validate();
  sampler.validate();
}

nlohmann::json to_json(const InpaintArch& a) {
  return {{"resolution", a.resolution},
          {"base_width", a.base_width},
          {"blocks", a.blocks},
          {"dilations", a.dilations},
          {"disc_width", a.disc_width}};
}

InpaintArch arch_from_json(const nlohmann::json& j) {
  InpaintArch a;
  a.resolution = j.at("resolution");
  a.base_width = j.at("base_width");
  a.blocks = j.at("blocks");
  a.dilations = j.at("dilations").get<std::vector<int>>();
  a.disc_width = j.at("disc_width");
  return a;
}

nlohmann::json to_json(const InpaintTrainConfig& c) {
  return {{"w_l1", c.w_l1},
          {"w_perc", c.w_perc},
          {"w_adv", c.w_adv},
          {"lr_g", c.lr_g},
          {"lr_d", c.lr_d},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"early_stop_patience", c.early_stop_patience},
          {"soft_mask_sigma", c.soft_mask_sigma},
          {"augment", c.augment},
          {"augment_params",
           {{"max_rotation_deg", c.augment_params.max_rotation_deg},
            {"max_translation_frac", c.augment_params.max_translation_frac},
            {"scale_min", c.augment_params.scale_min},
            {"scale_max", c.augment_params.scale_max},
            {"hflip_prob", c.augment_params.hflip_prob}}},
          {"sampler",
           {{"min_shapes", c.sampler.min_shapes},
            {"max_shapes", c.sampler.max_shapes},
            {"min_radius_frac", c.sampler.min_radius_frac},
            {"max_radius_frac", c.sampler.max_radius_frac},
            {"max_fraction", c.sampler.max_fraction},
            {"proposal_fraction", c.sampler.proposal_fraction}}},
          {"max_steps", c.max_steps}};
}

InpaintTrainConfig train_config_from_json(const nlohmann::json& j) {
  InpaintTrainConfig c;
  c.w_l1 = j.at("w_l1");
  c.w_perc = j.at("w_perc");
  c.w_adv = j.at("w_adv");
  c.lr_g = j.at("lr_g");
  c.lr_d = j.at("lr_d");
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  c.early_stop_patience = j.at("early_stop_patience");
  c.soft_mask_sigma = j.at("soft_mask_sigma");
  c.augment = j.at("augment");
  const auto& ap = j.at("augment_params");
  c.augment_params.max_rotation_deg = ap.at("max_rotation_deg");
  c.augment_params.max_translation_frac = ap.at("max_translation_frac");
  c.augment_params.scale_min = ap.at("scale_min");
  c.augment_params.scale_max = ap.at("scale_max");
  c.augment_params.hflip_prob = ap.at("hflip_prob");
  const auto& sp = j.at("sampler");
  c.sampler.min_shapes = sp.at("min_shapes");
  c.sampler.max_shapes = sp.at("max_shapes");
  c.sampler.min_radius_frac = sp.at("min_radius_frac");
  c.sampler.max_radius_frac = sp.at("max_radius_frac");
  c.sampler.max_fraction = sp.at("max_fraction");
  c.sampler.proposal_fraction = sp.at("proposal_fraction");
  c.max_steps = j.at("max_steps");
  return c;
}

void InpaintInput::validate() const {
  require_same_shape(masked_image, mask, "inpaint input");
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] > 1) throw std::invalid_argument("inpaint mask must be binary");
    if (mask[i] && masked_image[i] != 0.0) throw std::invalid_argument("masked pixels must be zero-filled");
  }
}

InpaintInput make_inpaint_input(const Image& x, const BinaryMask& mask) {
  require_same_shape(x, mask, "make_inpaint_input");
  InpaintInput in{x, mask};
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] > 1) throw std::invalid_argument("inpaint mask must be binary");
    if (mask[i]) in.masked_image[i] = 0.0;
  }
  return in;
}

// ---------------------------------------------------------------------------
// Networks

template <class T>
Generator<T>::Generator(const InpaintArch& arch, std::uint64_t seed) : arch_(arch) {
  arch_.validate();
  Rng rng = Rng::derive(seed, kGenInitStream);
  const int c = arch_.base_width, w = 4 * c;
  stem_ = nn::Conv2d<T>(2, c, 3, kSame3, rng);
  down1_ = nn::Conv2d<T>(c, 2 * c, 4, kDown4, rng);
  down2_ = nn::Conv2d<T>(2 * c, w, 4, kDown4, rng);
  const int branch = w / static_cast<int>(arch_.dilations.size());
  for (int b = 0; b < arch_.blocks; ++b) {
    Block block;
    for (int d : arch_.dilations) block.branches.emplace_back(w, branch, 3, ConvSpec{1, d, d}, rng);
    block.fuse = nn::Conv2d<T>(w, w, 3, kSame3, rng);
    block.gate = nn::Conv2d<T>(w, w, 3, kSame3, rng);
    blocks_.push_back(std::move(block));
  }
  up1_ = nn::ConvTranspose2d<T>(w, 2 * c, 4, kDown4, rng);
  up2_ = nn::ConvTranspose2d<T>(2 * c, c, 4, kDown4, rng);
  out_ = nn::Conv2d<T>(c, 1, 3, kSame3, rng);
}

template <class T>
Var<T> Generator<T>::forward(const Var<T>& masked, const Var<T>& mask) const {
  if (masked.shape() != mask.shape() || masked.value().rank() != 4 || masked.dim(1) != 1 ||
      masked.dim(2) != arch_.resolution || masked.dim(3) != arch_.resolution)
    throw std::invalid_argument("generator input must be two [N,1,R,R] tensors at the configured resolution");
  Var<T> h = nn::silu(stem_(nn::concat<T>({masked, mask})));
  h = nn::silu(down1_(h));
  h = nn::silu(down2_(h));
  for (const auto& block : blocks_) {
    std::vector<Var<T>> parts;
    for (const auto& conv : block.branches) parts.push_back(nn::silu(conv(h)));
    auto fused = block.fuse(nn::concat(parts));
    auto gate = nn::sigmoid(block.gate(h));
    h = nn::add(h, nn::mul(gate, nn::sub(fused, h)));  // h (1 - g) + fused g
  }
  h = nn::silu(up1_(h));
  h = nn::silu(up2_(h));
  auto out = nn::sigmoid(out_(h));
  if (!out.value().all_finite()) throw NumericalDivergence("numerical divergence in generator");
  return out;
}

template <class T>
nn::ParamList<T> Generator<T>::params() const {
  nn::ParamList<T> p;
  stem_.collect("stem", p);
  down1_.collect("down1", p);
  down2_.collect("down2", p);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b);
    for (std::size_t i = 0; i < blocks_[b].branches.size(); ++i)
      blocks_[b].branches[i].collect(prefix + ".branch" + std::to_string(i), p);
    blocks_[b].fuse.collect(prefix + ".fuse", p);
    blocks_[b].gate.collect(prefix + ".gate", p);
  }
  up1_.collect("up1", p);
  up2_.collect("up2", p);
  out_.collect("out", p);
  return p;
}

template <class T>
Discriminator<T>::Discriminator(const InpaintArch& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng = Rng::derive(seed, kDiscInitStream);
  const int d = arch.disc_width;
  convs_.emplace_back(1, d, 4, kDown4, rng);
  convs_.emplace_back(d, 2 * d, 4, kDown4, rng);
  convs_.emplace_back(2 * d, 4 * d, 4, kDown4, rng);
  head_ = nn::Conv2d<T>(4 * d, 1, 3, kSame3, rng);
}

template <class T>
Var<T> Discriminator<T>::forward(const Var<T>& x) const {
  Var<T> h = x;
  for (const auto& conv : convs_) h = nn::leaky_relu(conv(h), T(0.2));
  return head_(h);
}

template <class T>
nn::ParamList<T> Discriminator<T>::params() const {
  nn::ParamList<T> p;
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect("conv" + std::to_string(i), p);
  head_.collect("head", p);
  return p;
}

// ---------------------------------------------------------------------------
// Inference

namespace {

template <class T>
Tensor<T> mask_batch(const std::vector<const BinaryMask*>& masks) {
  const int h = masks[0]->height(), w = masks[0]->width();
  Tensor<T> t({static_cast<int>(masks.size()), 1, h, w});
  for (std::size_t i = 0; i < masks.size(); ++i)
    for (std::size_t k = 0; k < masks[i]->size(); ++k) t[i * h * w + k] = (*masks[i])[k] ? T(1) : T(0);
  return t;
}

template <class T>
Tensor<T> zero_fill(const Tensor<T>& x, const Tensor<T>& mask) {
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.numel(); ++i)
    if (mask[i] != T(0)) out[i] = T(0);
  return out;
}

}  // namespace

Image inpaint(const Generator<float>& generator, const InpaintInput& input) {
  input.validate();
  nn::NoGradGuard guard;
  auto masked = nn::constant(latent::to_batch<float>(input.masked_image));
  auto mask = nn::constant(mask_batch<float>({&input.mask}));
  Image out = latent::image_from_batch(generator.forward(masked, mask).value(), 0);
  out.id = input.masked_image.id;
  return out;
}

Image composite_pseudo_healthy(const Image& x, const BinaryMask& mask, const Image& x_gen) {
  require_same_shape(x, mask, "composite_pseudo_healthy");
  require_same_shape(x, x_gen, "composite_pseudo_healthy");
  Image out = x;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] > 1) throw std::invalid_argument("compositing mask must be binary");
    if (mask[i]) out[i] = x_gen[i];
  }
  return out;
}

template <class T>
Tensor<T> soft_mask_targets(const Tensor<T>& masks, int out_h, int out_w, double sigma) {
  const int n = masks.dim(0), h = masks.dim(2), w = masks.dim(3);
  if (out_h < 1 || out_w < 1 || h % out_h != 0 || w % out_w != 0)
    throw std::invalid_argument("soft mask grid must divide the mask size");
  // Separable Gaussian, weights renormalized at the borders.
  const int radius = sigma > 0 ? static_cast<int>(std::ceil(3 * sigma)) : 0;
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1), 1.0);
  for (int k = -radius; k <= radius; ++k)
    kernel[static_cast<std::size_t>(k + radius)] = sigma > 0 ? std::exp(-0.5 * k * k / (sigma * sigma)) : 1.0;
  auto blur_axis = [&](const std::vector<double>& src, bool rows) {
    std::vector<double> dst(src.size());
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        double acc = 0, wsum = 0;
        for (int k = -radius; k <= radius; ++k) {
          const int rr = rows ? r + k : r, cc = rows ? c : c + k;
          if (rr < 0 || cc < 0 || rr >= h || cc >= w) continue;
          const double kw = kernel[static_cast<std::size_t>(k + radius)];
          acc += kw * src[static_cast<std::size_t>(rr * w + cc)];
          wsum += kw;
        }
        dst[static_cast<std::size_t>(r * w + c)] = acc / wsum;
      }
    return dst;
  };
  const int fy = h / out_h, fx = w / out_w;
  Tensor<T> out({n, 1, out_h, out_w});
  for (int i = 0; i < n; ++i) {
    std::vector<double> plane(masks.data() + static_cast<std::size_t>(i) * h * w,
                              masks.data() + static_cast<std::size_t>(i + 1) * h * w);
    plane = blur_axis(blur_axis(plane, false), true);
    for (int r = 0; r < out_h; ++r)
      for (int c = 0; c < out_w; ++c) {
        double acc = 0;
        for (int y = r * fy; y < (r + 1) * fy; ++y)
          for (int x = c * fx; x < (c + 1) * fx; ++x) acc += plane[static_cast<std::size_t>(y * w + x)];
        out.at(i, 0, r, c) = static_cast<T>(acc / (fy * fx));
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

template <class T>
double scalar(const Var<T>& v) {
  return static_cast<double>(v.item());
}

}  // namespace

template <class T>
DiscriminatorLosses<T> discriminator_loss(const Discriminator<T>& d, const Tensor<T>& real, const Tensor<T>& fake,
                                          const Tensor<T>& mask, double sigma) {
  if (real.shape() != fake.shape() || real.shape() != mask.shape())
    throw std::invalid_argument("discriminator inputs must share a shape");
  auto out_real = d.forward(nn::constant(real));
  auto out_fake = d.forward(nn::constant(fake));
  const auto target = soft_mask_targets(mask, out_fake.dim(2), out_fake.dim(3), sigma);
  auto l_real = nn::mean(nn::square(out_real));
  auto l_fake = nn::mean(nn::square(nn::sub(out_fake, nn::constant(target))));
  DiscriminatorLosses<T> r;
  r.real = scalar(l_real);
  r.fake = scalar(l_fake);
  r.total = nn::add(l_real, l_fake);
  return r;
}

DiscriminatorLosses<double> discriminator_step(const Discriminator<double>& d, const Image& real, const Image& fake,
                                               const BinaryMask& mask, double sigma) {
  require_same_shape(real, fake, "discriminator_step");
  require_same_shape(real, mask, "discriminator_step");
  return discriminator_loss(d, latent::to_batch<double>(real), latent::to_batch<double>(fake),
                            mask_batch<double>({&mask}), sigma);
}

template <class T>
GeneratorLosses<T> generator_loss(const Generator<T>& g, const Discriminator<T>* d,
                                  const perceptual::FeatureExtractor<T>* fx, const Tensor<T>& x,
                                  const Tensor<T>& mask, const InpaintTrainConfig& config) {
  if (x.shape() != mask.shape()) throw std::invalid_argument("generator loss inputs must share a shape");
  const auto masked = zero_fill(x, mask);
  auto M = nn::constant(mask);
  auto x_gen = g.forward(nn::constant(masked), M);
  GeneratorLosses<T> r;
  r.x_ph = nn::add(nn::constant(masked), nn::mul(x_gen, M));

  Var<T> total;
  auto accumulate = [&](const Var<T>& term, double weight) {
    auto scaled = nn::scale(term, static_cast<T>(weight));
    total = total.defined() ? nn::add(total, scaled) : scaled;
  };
  double mask_mean = 0;
  for (T v : mask.values()) mask_mean += static_cast<double>(v);
  mask_mean /= static_cast<double>(mask.numel());
  if (config.w_l1 > 0 && mask_mean > 0) {
    Tensor<T> target(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) target[i] = x[i] * mask[i];
    auto l1 = nn::scale(nn::mean(nn::abs(nn::sub(nn::mul(x_gen, M), nn::constant(target)))),
                        static_cast<T>(1.0 / mask_mean));
    r.l1 = scalar(l1);
    accumulate(l1, config.w_l1);
  }
  if (config.w_perc > 0) {
    if (!fx) throw std::invalid_argument("perceptual loss weight set without a feature extractor");
    auto perc = nn::mean(perceptual::perceptual_distance(*fx, r.x_ph, nn::constant(x)));
    r.perceptual = scalar(perc);
    accumulate(perc, config.w_perc);
  }
  if (config.w_adv > 0) {
    if (!d) throw std::invalid_argument("adversarial loss weight set without a discriminator");
    auto out = d->forward(r.x_ph);
    const auto soft = soft_mask_targets(mask, out.dim(2), out.dim(3), config.soft_mask_sigma);
    auto adv = nn::mean(nn::mul(nn::constant(soft), nn::square(out)));
    r.adversarial = scalar(adv);
    accumulate(adv, config.w_adv);
  }
  if (!total.defined()) total = nn::scale(nn::mean(x_gen), T(0));  // nothing to fit (empty mask, L1 only)
  r.total = total;
  return r;
}

// ---------------------------------------------------------------------------
// Masks

BinaryMask sample_random_mask(int height, int width, const MaskSamplerParams& params, Rng& rng) {
  params.validate();
  const double side = std::min(height, width);
  for (int attempt = 0;; ++attempt) {
    // Shrink the shapes if the sampler keeps overshooting.
    const double shrink = std::pow(0.8, attempt / 10);
    BinaryMask mask(height, width);
    const int shapes = rng.uniform_int(params.min_shapes, params.max_shapes);
    for (int s = 0; s < shapes; ++s) {
      const double cy = rng.uniform(0.15, 0.85) * height;
      const double cx = rng.uniform(0.15, 0.85) * width;
      const double lo = params.min_radius_frac * side;
      const double hi = std::max(lo, params.max_radius_frac * side * shrink);
      const double a = rng.uniform(lo, hi);
      const double b = rng.uniform(lo, hi);
      const double theta = rng.uniform(0.0, std::numbers::pi);
      const double ct = std::cos(theta), st = std::sin(theta);
      for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c) {
          const double dx = c + 0.5 - cx, dy = r + 0.5 - cy;
          const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
          if (u * u + v * v <= 1.0) mask(r, c) = 1;
        }
    }
    const double f = mask.fraction();
    if (f > 0 && f <= params.max_fraction) return mask;
  }
}

std::vector<BinaryMask> mask_proposals(const latent::LatentModel<float>& model, const std::vector<Image>& images,
                                       const MaskMapOptions& options, double percentile, double max_fraction,
                                       const perceptual::PerceptualOptions& perceptual) {
  const auto fx = perceptual::make_features(model, perceptual);
  std::vector<ScoreMap> maps;
  maps.reserve(images.size());
  for (const auto& img : images) maps.push_back(anomaly_mask_map(img, model.reconstruct(img), fx, options));
  if (maps.empty()) return {};
  const auto t = calibrate_threshold(maps, percentile);
  std::vector<BinaryMask> out;
  for (const auto& m : maps) {
    auto b = binarize(m, t);
    const double f = b.fraction();
    if (f > 0 && f <= max_fraction) out.push_back(std::move(b));
  }
  return out;
}

double masked_l1(const Generator<float>& g, const std::vector<Image>& images, const std::vector<BinaryMask>& masks) {
  if (images.size() != masks.size() || images.empty()) throw std::invalid_argument("masked_l1 needs aligned, nonempty sets");
  double err = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image gen = inpaint(g, make_inpaint_input(images[i], masks[i]));
    for (std::size_t k = 0; k < gen.size(); ++k)
      if (masks[i][k]) {
        err += std::abs(gen[k] - images[i][k]);
        ++count;
      }
  }
  return count ? err / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------
// Training

Generator<float> load_generator(const Checkpoint& checkpoint) {
  if (checkpoint.header != kCheckpointHeader) throw CheckpointError("not an inpainter checkpoint");
  Generator<float> g(arch_from_json(checkpoint.meta.at("arch")), 0);
  checkpoint.get_params("gen.", g.params());
  return g;
}

Generator<float> load_generator(const std::filesystem::path& path) {
  return load_generator(Checkpoint::load(path, kCheckpointHeader));
}

InpaintTrainResult train_inpainter(const std::vector<Image>& train, const std::vector<Image>& val,
                                   const InpaintArch& arch, const InpaintTrainConfig& config, std::uint64_t seed,
                                   const perceptual::FeatureExtractor<float>* features,
                                   const std::vector<BinaryMask>& proposals, const TrainOptions& options) {
  config.validate();
  arch.validate();
  if (train.empty()) throw std::invalid_argument("empty training set");
  if (config.w_perc > 0 && !features) throw std::invalid_argument("perceptual loss needs a feature extractor");
  const std::vector<Image>& val_set = val.empty() ? train : val;
  const int res = arch.resolution;

  std::vector<BinaryMask> val_masks;
  for (std::size_t i = 0; i < val_set.size(); ++i) {
    Rng mrng = Rng::derive(seed, kValMaskStream, i);
    val_masks.push_back(sample_random_mask(res, res, config.sampler, mrng));
  }

  InpaintTrainResult result;
  Generator<float> gen(arch, seed);
  Discriminator<float> disc(arch, seed);
  nn::Adam<float> opt_g(gen.params(), nn::AdamOptions{config.lr_g});
  nn::Adam<float> opt_d(disc.params(), nn::AdamOptions{config.lr_d});
  Rng rng = Rng::derive(seed, kTrainStream);
  latent::EarlyStopping stopper(config.early_stop_patience);

  const auto gen_params = gen.params();
  const auto disc_params = disc.params();
  auto snapshot = [&] {
    std::vector<Tensor<float>> s;
    for (const auto& p : gen_params) s.push_back(p.var.value());
    return s;
  };
  auto best = snapshot();

  auto build_checkpoint = [&](int epoch) {
    Checkpoint ck;
    ck.header = kCheckpointHeader;
    ck.meta["arch"] = to_json(arch);
    ck.meta["config"] = to_json(config);
    ck.meta["epoch"] = epoch;
    ck.meta["seed"] = seed;
    ck.meta["rng_state"] = rng.state();
    ck.meta["best_val_masked_l1"] = -stopper.best();
    ck.put_params("gen.", gen_params);
    ck.put_params("disc.", disc_params);
    ck.put_optimizer("opt_g.", opt_g);
    ck.put_optimizer("opt_d.", opt_d);
    return ck;
  };

  std::ofstream log_file;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    log_file.open(*options.out_dir / "train_log.tsv");
    log_file << "epoch\tgenerator_loss\tdiscriminator_loss\tval_masked_l1\n";
  }

  result.initial_val_l1 = masked_l1(gen, val_set, val_masks);
  stopper.update(-result.initial_val_l1);

  std::vector<std::size_t> order(train.size());
  std::int64_t steps = 0;
  bool stop = false;
  for (int epoch = 1; epoch <= config.epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);

    double g_sum = 0, d_sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      std::vector<Image> images;
      std::vector<BinaryMask> masks;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        const std::size_t idx = order[i];
        if (config.augment) {
          Rng arng = Rng::derive(seed, kAugmentStream, static_cast<std::uint64_t>(epoch) * train.size() + idx);
          images.push_back(augment(train[idx], config.augment_params, arng));
        } else {
          images.push_back(train[idx]);
        }
        const bool use_proposal = !proposals.empty() && rng.bernoulli(config.sampler.proposal_fraction);
        if (use_proposal)
          masks.push_back(proposals[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(proposals.size()) - 1))]);
        else
          masks.push_back(sample_random_mask(res, res, config.sampler, rng));
      }
      std::vector<const Image*> ip;
      std::vector<const BinaryMask*> mp;
      for (const auto& im : images) ip.push_back(&im);
      for (const auto& m : masks) mp.push_back(&m);
      const auto x = latent::to_batch<float>(ip);
      const auto m = mask_batch<float>(mp);

      double g_value = 0, d_value = 0;
      try {
        nn::zero_grad(gen_params);
        auto gl = generator_loss(gen, config.w_adv > 0 ? &disc : nullptr, features, x, m, config);
        g_value = gl.total.item();
        if (!std::isfinite(g_value)) throw NumericalDivergence("non-finite generator loss");
        nn::backward(gl.total);
        opt_g.step();
        if (config.w_adv > 0) {
          nn::zero_grad(disc_params);
          auto dl = discriminator_loss(disc, x, gl.x_ph.value(), m, config.soft_mask_sigma);
          d_value = dl.total.item();
          if (!std::isfinite(d_value)) throw NumericalDivergence("non-finite discriminator loss");
          nn::backward(dl.total);
          opt_d.step();
        }
      } catch (const NumericalDivergence& e) {
        if (options.out_dir) build_checkpoint(epoch).save(*options.out_dir / "diverged.ckpt");
        throw NumericalDivergence(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " +
                                  std::to_string(steps));
      }
      result.step_losses.push_back(g_value);
      g_sum += g_value;
      d_sum += d_value;
      ++batches;
      ++steps;
      if (config.max_steps > 0 && steps >= config.max_steps) {
        stop = true;
        break;
      }
    }

    EpochLog entry{epoch, g_sum / std::max(batches, 1), d_sum / std::max(batches, 1),
                   masked_l1(gen, val_set, val_masks)};
    result.log.push_back(entry);
    result.epochs_run = epoch;
    if (log_file) {
      log_file << std::setprecision(10) << entry.epoch << '\t' << entry.generator_loss << '\t'
               << entry.discriminator_loss << '\t' << entry.val_masked_l1 << '\n';
      log_file.flush();
    }
    if (options.on_epoch) options.on_epoch(entry);
    if (stopper.update(-entry.val_masked_l1)) {
      result.early_stopped = true;
      stop = true;
    }
    if (stopper.improved()) best = snapshot();
  }

  for (std::size_t i = 0; i < gen_params.size(); ++i) {
    auto v = gen_params[i].var;
    v.mutable_value() = best[i];
  }
  result.best_val_l1 = -stopper.best();
  result.checkpoint = build_checkpoint(result.epochs_run);
  if (options.out_dir) result.checkpoint.save(*options.out_dir / "checkpoint.ckpt");
  result.generator = std::move(gen);
  result.discriminator = std::move(disc);
  return result;
}

#define PHANES_INSTANTIATE_INPAINT(T)                                                                          \
  template class Generator<T>;                                                                                 \
  template class Discriminator<T>;                                                                             \
  template Tensor<T> soft_mask_targets<T>(const Tensor<T>&, int, int, double);                                 \
  template DiscriminatorLosses<T> discriminator_loss<T>(const Discriminator<T>&, const Tensor<T>&,             \
                                                        const Tensor<T>&, const Tensor<T>&, double);           \
  template GeneratorLosses<T> generator_loss<T>(const Generator<T>&, const Discriminator<T>*,                   \
                                                const perceptual::FeatureExtractor<T>*, const Tensor<T>&,      \
                                                const Tensor<T>&, const InpaintTrainConfig&);

PHANES_INSTANTIATE_INPAINT(float)
PHANES_INSTANTIATE_INPAINT(double)

}  // namespace phanes::inpaint
