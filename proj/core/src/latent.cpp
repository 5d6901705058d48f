#include "phanes/latent.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "phanes/errors.hpp"
#include "phanes/nn/ops.hpp"

namespace phanes::latent {

using nn::ConvSpec;
using nn::Tensor;

namespace {

constexpr std::uint64_t kInitStream = 0x6c696e74;     // model init
constexpr std::uint64_t kAugmentStream = 0x6c617567;  // per-sample augmentation
constexpr std::uint64_t kTrainStream = 0x6c74726e;    // shuffling and noise

template <class T>
void check_finite(const Var<T>& v, const char* what) {
  if (!v.value().all_finite()) throw NumericalDivergence(std::string("numerical divergence in ") + what);
}

template <class T>
double batch_mean(const Var<T>& per_sample) {
  double acc = 0;
  for (T v : per_sample.value().values()) acc += static_cast<double>(v);
  return acc / static_cast<double>(per_sample.numel());
}

}  // namespace

void LatentArch::validate() const {
  if (stages < 1) throw std::invalid_argument("latent network needs at least one stage");
  if (base_width < 1 || latent_dim < 1) throw std::invalid_argument("latent widths must be positive");
  if (resolution < (1 << stages) || resolution % (1 << stages) != 0)
    throw std::invalid_argument("resolution must be divisible by 2^stages");
}

void LatentTrainConfig::validate() const {
  if (!(alpha > 0)) throw std::invalid_argument("alpha must be > 0");
  if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (warmup_epochs < 0) throw std::invalid_argument("warmup_epochs must be >= 0");
  if (epochs < 0 || early_stop_patience < 1) throw std::invalid_argument("epochs / patience out of range");
  if (gamma < 0 || lambda_rev < 0 || beta_kl < 0 || fake_weight < 0) throw std::invalid_argument("loss weights must be >= 0");
  augment_params.validate();
}

nlohmann::json to_json(const LatentArch& a) {
  return {{"resolution", a.resolution}, {"stages", a.stages}, {"base_width", a.base_width}, {"latent_dim", a.latent_dim}};
}

LatentArch arch_from_json(const nlohmann::json& j) {
  LatentArch a;
  a.resolution = j.at("resolution");
  a.stages = j.at("stages");
  a.base_width = j.at("base_width");
  a.latent_dim = j.at("latent_dim");
  return a;
}

nlohmann::json to_json(const LatentTrainConfig& c) {
  return {{"alpha", c.alpha},
          {"gamma", c.gamma},
          {"lambda_rev", c.lambda_rev},
          {"beta_kl", c.beta_kl},
          {"fake_weight", c.fake_weight},
          {"exp_elbo_scale", c.exp_elbo_scale},
          {"exp_cap", c.exp_cap},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"early_stop_patience", c.early_stop_patience},
          {"vae_only", c.vae_only},
          {"warmup_epochs", c.warmup_epochs},
          {"fake_source", c.fake_source == FakeSource::both ? "both" : "prior"},
          {"augment", c.augment},
          {"augment_params",
           {{"max_rotation_deg", c.augment_params.max_rotation_deg},
            {"max_translation_frac", c.augment_params.max_translation_frac},
            {"scale_min", c.augment_params.scale_min},
            {"scale_max", c.augment_params.scale_max},
            {"hflip_prob", c.augment_params.hflip_prob}}},
          {"max_steps", c.max_steps}};
}

LatentTrainConfig train_config_from_json(const nlohmann::json& j) {
  LatentTrainConfig c;
  c.alpha = j.at("alpha");
  c.gamma = j.at("gamma");
  c.lambda_rev = j.at("lambda_rev");
  c.beta_kl = j.at("beta_kl");
  c.fake_weight = j.at("fake_weight");
  c.exp_elbo_scale = j.at("exp_elbo_scale");
  c.exp_cap = j.at("exp_cap");
  c.lr = j.at("lr");
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  c.early_stop_patience = j.at("early_stop_patience");
  c.vae_only = j.at("vae_only");
  c.warmup_epochs = j.value("warmup_epochs", 0);
  c.fake_source = j.at("fake_source") == "both" ? FakeSource::both : FakeSource::prior;
  c.augment = j.at("augment");
  const auto& ap = j.at("augment_params");
  c.augment_params.max_rotation_deg = ap.at("max_rotation_deg");
  c.augment_params.max_translation_frac = ap.at("max_translation_frac");
  c.augment_params.scale_min = ap.at("scale_min");
  c.augment_params.scale_max = ap.at("scale_max");
  c.augment_params.hflip_prob = ap.at("hflip_prob");
  c.max_steps = j.at("max_steps");
  return c;
}

// ---------------------------------------------------------------------------
// Model

template <class T>
LatentModel<T>::LatentModel(const LatentArch& arch, std::uint64_t seed) : arch_(arch) {
  arch_.validate();
  Rng rng = Rng::derive(seed, kInitStream);
  const ConvSpec down{2, 1, 1};
  int in = 1;
  for (int i = 0; i < arch_.stages; ++i) {
    enc_convs_.emplace_back(in, arch_.stage_channels(i), 4, down, rng);
    in = arch_.stage_channels(i);
  }
  const int s = arch_.bottleneck_size();
  const int flat = in * s * s;
  enc_head_ = nn::Linear<T>(flat, 2 * arch_.latent_dim, rng);
  dec_head_ = nn::Linear<T>(arch_.latent_dim, flat, rng);
  for (int i = arch_.stages - 1; i >= 0; --i) {
    const int out = i > 0 ? arch_.stage_channels(i - 1) : arch_.stage_channels(0);
    dec_convs_.emplace_back(arch_.stage_channels(i), out, 4, down, rng);
  }
  dec_out_ = nn::Conv2d<T>(arch_.stage_channels(0), 1, 3, ConvSpec{1, 1, 1}, rng);
}

template <class T>
EncoderOutput<T> LatentModel<T>::encode(const Var<T>& x) const {
  if (x.value().rank() != 4 || x.dim(1) != 1 || x.dim(2) != arch_.resolution || x.dim(3) != arch_.resolution)
    throw std::invalid_argument("encoder input must be [N,1," + std::to_string(arch_.resolution) + "," +
                                std::to_string(arch_.resolution) + "]");
  EncoderOutput<T> out;
  Var<T> h = x;
  for (const auto& conv : enc_convs_) {
    h = nn::silu(conv(h));
    out.embeddings.push_back(h);
  }
  const int n = x.dim(0);
  Var<T> stats = enc_head_(nn::reshape(h, {n, static_cast<int>(h.value().per_sample())}));
  out.mu = nn::narrow(stats, 0, arch_.latent_dim);
  out.logvar = nn::narrow(stats, arch_.latent_dim, arch_.latent_dim);
  check_finite(stats, "encoder");
  return out;
}

template <class T>
Var<T> LatentModel<T>::decode(const Var<T>& z) const {
  if (z.value().rank() != 2 || z.dim(1) != arch_.latent_dim)
    throw std::invalid_argument("latent code must have dimension " + std::to_string(arch_.latent_dim));
  check_finite(z, "latent code");
  const int n = z.dim(0), s = arch_.bottleneck_size();
  Var<T> h = nn::silu(dec_head_(z));
  h = nn::reshape(h, {n, arch_.stage_channels(arch_.stages - 1), s, s});
  for (const auto& conv : dec_convs_) h = nn::silu(conv(h));
  Var<T> out = nn::sigmoid(dec_out_(h));
  check_finite(out, "decoder");
  return out;
}

template <class T>
nn::ParamList<T> LatentModel<T>::encoder_params() const {
  nn::ParamList<T> p;
  for (std::size_t i = 0; i < enc_convs_.size(); ++i) enc_convs_[i].collect("enc.conv" + std::to_string(i), p);
  enc_head_.collect("enc.head", p);
  return p;
}

template <class T>
nn::ParamList<T> LatentModel<T>::decoder_params() const {
  nn::ParamList<T> p;
  dec_head_.collect("dec.head", p);
  for (std::size_t i = 0; i < dec_convs_.size(); ++i) dec_convs_[i].collect("dec.up" + std::to_string(i), p);
  dec_out_.collect("dec.out", p);
  return p;
}

template <class T>
nn::ParamList<T> LatentModel<T>::params() const {
  auto p = encoder_params();
  auto d = decoder_params();
  p.insert(p.end(), d.begin(), d.end());
  return p;
}

template <class T>
Image LatentModel<T>::reconstruct(const Image& x) const {
  nn::NoGradGuard guard;
  auto enc = encode(nn::constant(to_batch<T>(x)));
  Image out = image_from_batch(decode(enc.mu).value(), 0);
  out.id = x.id;
  return out;
}

template <class T>
std::vector<Tensor<double>> LatentModel<T>::embeddings(const Image& x) const {
  nn::NoGradGuard guard;
  auto enc = encode(nn::constant(to_batch<T>(x)));
  std::vector<Tensor<double>> out;
  for (const auto& e : enc.embeddings) out.push_back(e.value().template cast<double>());
  return out;
}

template <class T>
Tensor<T> to_batch(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("empty batch");
  const int h = images[0]->height(), w = images[0]->width();
  Tensor<T> t({static_cast<int>(images.size()), 1, h, w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->height() != h || images[i]->width() != w) throw std::invalid_argument("batch images differ in size");
    std::transform(images[i]->begin(), images[i]->end(), t.data() + i * h * w, [](double v) { return static_cast<T>(v); });
  }
  return t;
}

template <class T>
Tensor<T> to_batch(const Image& image) {
  return to_batch<T>(std::vector<const Image*>{&image});
}

template <class T>
Image image_from_batch(const Tensor<T>& batch, int index) {
  const int h = batch.dim(2), w = batch.dim(3);
  Image img(h, w);
  const T* src = batch.data() + static_cast<std::size_t>(index) * batch.per_sample();
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(src[i]);
  return img;
}

// ---------------------------------------------------------------------------
// Objectives

template <class T>
Var<T> reparameterize(const Var<T>& mu, const Var<T>& logvar, const Var<T>& eps) {
  return nn::add(mu, nn::mul(nn::exp(nn::scale(logvar, T(0.5))), eps));
}

template <class T>
Var<T> kl_divergence(const Var<T>& mu, const Var<T>& logvar) {
  auto inner = nn::sub(nn::add(nn::square(mu), nn::exp(logvar)), nn::add_scalar(logvar, T(1)));
  return nn::scale(nn::sum_per_sample(inner), T(0.5));
}

template <class T>
Var<T> elbo(const Var<T>& x, const Var<T>& x_rec, const Var<T>& mu, const Var<T>& logvar, T beta_kl) {
  auto rec = nn::scale(nn::sum_per_sample(nn::square(nn::sub(x, x_rec))), T(-0.5));
  return nn::sub(rec, nn::scale(kl_divergence(mu, logvar), beta_kl));
}

template <class T>
Var<T> reversed_embedding_loss(const std::vector<Var<T>>& emb_x, const std::vector<Var<T>>& emb_rec) {
  if (emb_x.size() != emb_rec.size() || emb_x.empty()) throw std::invalid_argument("embedding stacks differ");
  Var<T> total;
  for (std::size_t l = 0; l < emb_x.size(); ++l) {
    auto dissim = nn::add_scalar(nn::neg(nn::cosine_similarity(emb_x[l], emb_rec[l])), T(1));
    auto mse = nn::scale(nn::mean_per_sample(nn::square(nn::sub(emb_x[l], emb_rec[l]))), T(0.5));
    auto term = nn::add(dissim, mse);
    total = total.defined() ? nn::add(total, term) : term;
  }
  return total;
}

template <class T>
Var<T> reversed_embedding_loss(const LatentModel<T>& model, const Var<T>& x, const Var<T>& x_cph) {
  return reversed_embedding_loss(model.encode(x).embeddings, model.encode(x_cph).embeddings);
}

template <class T>
LossNoise<T> LossNoise<T>::draw(int batch, int latent_dim, Rng& rng) {
  LossNoise<T> n;
  for (auto* t : {&n.z_prior, &n.eps_real, &n.eps_fake, &n.eps_rec}) {
    *t = Tensor<T>({batch, latent_dim});
    for (auto& v : t->values()) v = static_cast<T>(rng.normal());
  }
  return n;
}

namespace {

template <class T>
struct FakeElbo {
  Var<T> elbo;  // per sample
};

template <class T>
Var<T> fake_elbo(const LatentModel<T>& model, const Var<T>& fake, const Tensor<T>& eps, T beta) {
  auto enc = model.encode(fake);
  auto z = reparameterize(enc.mu, enc.logvar, nn::constant(eps));
  return elbo(fake, model.decode(z), enc.mu, enc.logvar, beta);
}

}  // namespace

template <class T>
LossTerms<T> encoder_loss(const LatentModel<T>& model, const Tensor<T>& x, const LossNoise<T>& noise,
                          const LatentTrainConfig& config) {
  const T beta = static_cast<T>(config.beta_kl);
  auto X = nn::constant(x);
  auto enc = model.encode(X);
  auto z = reparameterize(enc.mu, enc.logvar, nn::constant(noise.eps_real));
  auto x_rec = model.decode(z);
  auto e_real = elbo(X, x_rec, enc.mu, enc.logvar, beta);

  LossTerms<T> terms;
  terms.elbo_real = batch_mean(e_real);
  terms.loss = nn::neg(nn::mean(e_real));

  if (config.lambda_rev != 0.0) {
    auto rev = reversed_embedding_loss(enc.embeddings, model.encode(x_rec).embeddings);
    terms.reversed = batch_mean(rev);
    terms.loss = nn::add(terms.loss, nn::scale(nn::mean(rev), static_cast<T>(config.lambda_rev)));
  }
  if (config.vae_only || config.fake_weight == 0.0) return terms;

  std::vector<std::pair<Var<T>, const Tensor<T>*>> fakes;
  fakes.emplace_back(nn::detach(model.decode(nn::constant(noise.z_prior))), &noise.eps_fake);
  if (config.fake_source == FakeSource::both) fakes.emplace_back(nn::detach(x_rec), &noise.eps_rec);

  const double pixels = static_cast<double>(x.per_sample());
  const double scale = config.exp_elbo_scale > 0 ? config.exp_elbo_scale : 1.0 / pixels;
  const T a = static_cast<T>(config.alpha);
  Var<T> fake_term;
  double fake_elbo_sum = 0;
  for (const auto& [fake, eps] : fakes) {
    auto e_fake = fake_elbo(model, fake, *eps, beta);
    fake_elbo_sum += batch_mean(e_fake);
    auto arg = nn::scale(e_fake, static_cast<T>(config.alpha * scale));
    for (T v : arg.value().values()) terms.capped += v > static_cast<T>(config.exp_cap);
    auto term = nn::scale(nn::mean(nn::exp(nn::clamp_max(arg, static_cast<T>(config.exp_cap)))), T(1) / a);
    fake_term = fake_term.defined() ? nn::add(fake_term, term) : term;
  }
  const T per_fake = T(1) / static_cast<T>(fakes.size());
  terms.elbo_fake = fake_elbo_sum / static_cast<double>(fakes.size());
  terms.loss = nn::add(terms.loss, nn::scale(fake_term, static_cast<T>(config.fake_weight) * per_fake));
  return terms;
}

template <class T>
LossTerms<T> decoder_loss(const LatentModel<T>& model, const Tensor<T>& x, const LossNoise<T>& noise,
                          const LatentTrainConfig& config) {
  if (config.vae_only) return encoder_loss(model, x, noise, config);
  const T beta = static_cast<T>(config.beta_kl);
  auto X = nn::constant(x);
  EncoderOutput<T> enc;
  {
    nn::NoGradGuard guard;  // encoder is held fixed for the decoder update
    enc = model.encode(X);
  }
  auto z = reparameterize(enc.mu, enc.logvar, nn::constant(noise.eps_real));
  auto x_rec = model.decode(z);
  auto e_real = elbo(X, x_rec, enc.mu, enc.logvar, beta);

  LossTerms<T> terms;
  terms.elbo_real = batch_mean(e_real);
  terms.loss = nn::neg(nn::mean(e_real));
  if (config.gamma == 0.0) return terms;

  std::vector<std::pair<Var<T>, const Tensor<T>*>> fakes;
  fakes.emplace_back(model.decode(nn::constant(noise.z_prior)), &noise.eps_fake);
  if (config.fake_source == FakeSource::both) fakes.emplace_back(x_rec, &noise.eps_rec);
  Var<T> fake_total;
  double fake_elbo_sum = 0;
  for (const auto& [fake, eps] : fakes) {
    auto e_fake = fake_elbo(model, fake, *eps, beta);
    fake_elbo_sum += batch_mean(e_fake);
    auto m = nn::mean(e_fake);
    fake_total = fake_total.defined() ? nn::add(fake_total, m) : m;
  }
  const T per_fake = T(1) / static_cast<T>(fakes.size());
  terms.elbo_fake = fake_elbo_sum / static_cast<double>(fakes.size());
  terms.loss = nn::sub(terms.loss, nn::scale(fake_total, static_cast<T>(config.gamma) * per_fake));
  return terms;
}

// ---------------------------------------------------------------------------
// Training

bool EarlyStopping::update(double value) {
  if (!started_ || value > best_) {
    started_ = true;
    best_ = value;
    bad_epochs_ = 0;
    improved_ = true;
    return false;
  }
  improved_ = false;
  ++bad_epochs_;
  return bad_epochs_ >= patience_;
}

double validation_elbo(const LatentModel<float>& model, const std::vector<Image>& images, double beta_kl) {
  if (images.empty()) throw std::invalid_argument("empty validation set");
  nn::NoGradGuard guard;
  constexpr std::size_t kChunk = 32;
  double total = 0;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    std::vector<const Image*> batch;
    for (std::size_t i = start; i < std::min(images.size(), start + kChunk); ++i) batch.push_back(&images[i]);
    auto X = nn::constant(to_batch<float>(batch));
    auto enc = model.encode(X);
    auto e = elbo(X, model.decode(enc.mu), enc.mu, enc.logvar, static_cast<float>(beta_kl));
    for (float v : e.value().values()) total += v;
  }
  return total / static_cast<double>(images.size());
}

Checkpoint make_checkpoint(const LatentModel<float>& model, const LatentTrainConfig& config) {
  Checkpoint ck;
  ck.header = kCheckpointHeader;
  ck.meta["arch"] = to_json(model.arch());
  ck.meta["config"] = to_json(config);
  ck.put_params("model.", model.params());
  return ck;
}

LatentModel<float> load_model(const Checkpoint& checkpoint) {
  if (checkpoint.header != kCheckpointHeader) throw CheckpointError("not a latent checkpoint");
  LatentModel<float> model(arch_from_json(checkpoint.meta.at("arch")), 0);
  checkpoint.get_params("model.", model.params());
  return model;
}

LatentModel<float> load_model(const std::filesystem::path& path) {
  return load_model(Checkpoint::load(path, kCheckpointHeader));
}

LatentTrainConfig load_train_config(const Checkpoint& checkpoint) {
  return train_config_from_json(checkpoint.meta.at("config"));
}

LatentTrainResult train_latent(const std::vector<Image>& train, const std::vector<Image>& val, const LatentArch& arch,
                               const LatentTrainConfig& config, std::uint64_t seed, const TrainOptions& options) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("empty training set");
  const std::vector<Image>& val_set = val.empty() ? train : val;

  LatentTrainResult result;
  LatentModel<float> model(arch, seed);
  nn::AdamOptions adam{config.lr};
  nn::Adam<float> enc_opt(model.encoder_params(), adam);
  nn::Adam<float> dec_opt(model.decoder_params(), adam);
  Rng rng = Rng::derive(seed, kTrainStream);
  EarlyStopping stopper(config.early_stop_patience);

  auto snapshot = [](const nn::ParamList<float>& params) {
    std::vector<Tensor<float>> s;
    for (const auto& p : params) s.push_back(p.var.value());
    return s;
  };
  auto all_params = model.params();
  auto best = snapshot(all_params);

  auto build_checkpoint = [&](int epoch) {
    Checkpoint ck = make_checkpoint(model, config);
    ck.put_optimizer("opt_enc.", enc_opt);
    ck.put_optimizer("opt_dec.", dec_opt);
    ck.meta["epoch"] = epoch;
    ck.meta["rng_state"] = rng.state();
    ck.meta["seed"] = seed;
    ck.meta["best_val_elbo"] = stopper.best();
    return ck;
  };

  std::ofstream log_file;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    log_file.open(*options.out_dir / "train_log.tsv");
    log_file << "epoch\tencoder_loss\tdecoder_loss\tval_elbo\n";
  }

  result.initial_val_elbo = validation_elbo(model, val_set, config.beta_kl);
  stopper.update(result.initial_val_elbo);

  std::vector<std::size_t> order(train.size());
  std::int64_t steps = 0;
  bool stop = false;
  for (int epoch = 1; epoch <= config.epochs && !stop; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);

    LatentTrainConfig step_config = config;
    step_config.vae_only = config.vae_only || epoch <= config.warmup_epochs;
    double enc_sum = 0, dec_sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      std::vector<Image> augmented;
      std::vector<const Image*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        const std::size_t idx = order[i];
        if (config.augment) {
          Rng arng = Rng::derive(seed, kAugmentStream, static_cast<std::uint64_t>(epoch) * train.size() + idx);
          augmented.push_back(phanes::augment(train[idx], config.augment_params, arng));
        } else {
          augmented.push_back(train[idx]);
        }
      }
      for (const auto& img : augmented) batch.push_back(&img);
      const auto x = to_batch<float>(batch);
      const auto noise = LossNoise<float>::draw(static_cast<int>(batch.size()), arch.latent_dim, rng);

      double enc_value = 0, dec_value = 0;
      try {
        nn::zero_grad(all_params);
        auto le = encoder_loss(model, x, noise, step_config);
        enc_value = le.loss.item();
        if (!std::isfinite(enc_value)) throw NumericalDivergence("non-finite encoder loss");
        nn::backward(le.loss);
        if (step_config.vae_only) {
          enc_opt.step();
          dec_opt.step();
          dec_value = enc_value;
        } else {
          enc_opt.step();
          nn::zero_grad(all_params);
          auto ld = decoder_loss(model, x, noise, step_config);
          dec_value = ld.loss.item();
          if (!std::isfinite(dec_value)) throw NumericalDivergence("non-finite decoder loss");
          nn::backward(ld.loss);
          dec_opt.step();
        }
      } catch (const NumericalDivergence& e) {
        if (options.out_dir) build_checkpoint(epoch).save(*options.out_dir / "diverged.ckpt");
        throw NumericalDivergence(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " +
                                  std::to_string(steps));
      }
      result.step_losses.push_back(enc_value);
      enc_sum += enc_value;
      dec_sum += dec_value;
      ++batches;
      ++steps;
      if (config.max_steps > 0 && steps >= config.max_steps) {
        stop = true;
        break;
      }
    }

    EpochLog entry{epoch, enc_sum / std::max(batches, 1), dec_sum / std::max(batches, 1),
                   validation_elbo(model, val_set, config.beta_kl)};
    result.log.push_back(entry);
    result.epochs_run = epoch;
    if (log_file) {
      log_file << std::setprecision(10) << entry.epoch << '\t' << entry.encoder_loss << '\t' << entry.decoder_loss
               << '\t' << entry.val_elbo << '\n';
      log_file.flush();
    }
    if (options.on_epoch) options.on_epoch(entry);
    // Warm-up epochs are not candidates for the returned weights.
    if (!config.vae_only && epoch <= config.warmup_epochs) {
      stopper = EarlyStopping(config.early_stop_patience);
      best = snapshot(all_params);
      continue;
    }
    if (stopper.update(entry.val_elbo)) {
      result.early_stopped = true;
      stop = true;
    }
    if (stopper.improved()) best = snapshot(all_params);
  }

  // Restore the best-validation weights.
  for (std::size_t i = 0; i < all_params.size(); ++i) all_params[i].var.mutable_value() = best[i];
  result.best_val_elbo = stopper.best();
  result.checkpoint = build_checkpoint(result.epochs_run);
  if (options.out_dir) result.checkpoint.save(*options.out_dir / "checkpoint.ckpt");
  result.model = std::move(model);
  return result;
}

#define PHANES_INSTANTIATE_LATENT(T)                                                                              \
  template class LatentModel<T>;                                                                                  \
  template Tensor<T> to_batch<T>(const std::vector<const Image*>&);                                               \
  template Tensor<T> to_batch<T>(const Image&);                                                                   \
  template Image image_from_batch<T>(const Tensor<T>&, int);                                                      \
  template Var<T> reparameterize<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                 \
  template Var<T> kl_divergence<T>(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> elbo<T>(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&, T);                         \
  template Var<T> reversed_embedding_loss<T>(const std::vector<Var<T>>&, const std::vector<Var<T>>&);             \
  template Var<T> reversed_embedding_loss<T>(const LatentModel<T>&, const Var<T>&, const Var<T>&);                \
  template struct LossNoise<T>;                                                                                   \
  template LossTerms<T> encoder_loss<T>(const LatentModel<T>&, const Tensor<T>&, const LossNoise<T>&,             \
                                        const LatentTrainConfig&);                                                \
  template LossTerms<T> decoder_loss<T>(const LatentModel<T>&, const Tensor<T>&, const LossNoise<T>&,             \
                                        const LatentTrainConfig&);

PHANES_INSTANTIATE_LATENT(float)
PHANES_INSTANTIATE_LATENT(double)

}  // namespace phanes::latent
