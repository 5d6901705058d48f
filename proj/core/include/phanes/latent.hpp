#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "phanes/checkpoint.hpp"
#include "phanes/data.hpp"
#include "phanes/image.hpp"
#include "phanes/nn/layers.hpp"
#include "phanes/nn/optim.hpp"

namespace phanes::latent {

inline constexpr const char* kCheckpointHeader = "phanes-latent-v1";

template <class T>
using Var = nn::Var<T>;

/// Strided convolutional encoder / transposed-convolution decoder.
/// Stage i of the encoder has base_width * 2^i channels.
struct LatentArch {
  int resolution = 64;
  int stages = 4;
  int base_width = 32;
  int latent_dim = 32;

  void validate() const;
  int bottleneck_size() const { return resolution >> stages; }
  int stage_channels(int i) const { return base_width << i; }
};

enum class FakeSource { prior, both };

struct LatentTrainConfig {
  double alpha = 2.0;
  double gamma = 1.0;
  double lambda_rev = 1.0;
  double beta_kl = 1.0;
  /// Weight of the encoder's generated-sample (exp) term.
  double fake_weight = 1.0;
  /// ELBO is multiplied by this inside exp(); <= 0 means 1 / pixel count.
  double exp_elbo_scale = 0.0;
  /// alpha * scaled ELBO is clamped above at this value before exp().
  double exp_cap = 20.0;
  double lr = 5e-5;
  int batch_size = 8;
  int epochs = 50;
  int early_stop_patience = 20;
  bool vae_only = false;
  /// Epochs trained with the plain VAE objective before the introspective terms start.
  int warmup_epochs = 0;
  FakeSource fake_source = FakeSource::prior;
  bool augment = true;
  AugmentParams augment_params{};
  /// Stop after this many optimizer steps in total (0 = unlimited).
  std::int64_t max_steps = 0;

  void validate() const;
};

nlohmann::json to_json(const LatentArch& a);
LatentArch arch_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LatentTrainConfig& c);
LatentTrainConfig train_config_from_json(const nlohmann::json& j);

/// mu / logvar of q(z|x) and the per-stage encoder activations E^0..E^L.
template <class T>
struct EncoderOutput {
  Var<T> mu;
  Var<T> logvar;
  std::vector<Var<T>> embeddings;
};

template <class T>
class LatentModel {
 public:
  LatentModel() = default;
  LatentModel(const LatentArch& arch, std::uint64_t seed);

  /// x: [N,1,R,R]. Throws NumericalDivergence on non-finite activations.
  EncoderOutput<T> encode(const Var<T>& x) const;
  /// z: [N,d] -> [N,1,R,R] in (0,1). Throws std::invalid_argument on a
  /// latent of the wrong width.
  Var<T> decode(const Var<T>& z) const;

  nn::ParamList<T> encoder_params() const;
  nn::ParamList<T> decoder_params() const;
  nn::ParamList<T> params() const;

  const LatentArch& arch() const { return arch_; }

  /// Deterministic inference helpers on single images.
  Image reconstruct(const Image& x) const;
  std::vector<nn::Tensor<double>> embeddings(const Image& x) const;

 private:
  LatentArch arch_;
  std::vector<nn::Conv2d<T>> enc_convs_;
  nn::Linear<T> enc_head_;
  nn::Linear<T> dec_head_;
  std::vector<nn::ConvTranspose2d<T>> dec_convs_;
  nn::Conv2d<T> dec_out_;
};

template <class T>
nn::Tensor<T> to_batch(const std::vector<const Image*>& images);
template <class T>
nn::Tensor<T> to_batch(const Image& image);
template <class T>
Image image_from_batch(const nn::Tensor<T>& batch, int index);

/// mu + exp(logvar / 2) * eps.
template <class T>
Var<T> reparameterize(const Var<T>& mu, const Var<T>& logvar, const Var<T>& eps);

/// 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar) per sample.
template <class T>
Var<T> kl_divergence(const Var<T>& mu, const Var<T>& logvar);

/// -0.5 * ||x - x_rec||^2 - beta_kl * KL per sample (unit-variance
/// Gaussian likelihood, constant dropped).
template <class T>
Var<T> elbo(const Var<T>& x, const Var<T>& x_rec, const Var<T>& mu, const Var<T>& logvar, T beta_kl);

/// sum_l (1 - cos(E^l(x), E^l(x_cph))) + 0.5 * MSE(E^l(x), E^l(x_cph)) per sample.
template <class T>
Var<T> reversed_embedding_loss(const std::vector<Var<T>>& emb_x, const std::vector<Var<T>>& emb_rec);

template <class T>
Var<T> reversed_embedding_loss(const LatentModel<T>& model, const Var<T>& x, const Var<T>& x_cph);

/// Noise for one loss evaluation. Passing it explicitly freezes the
/// stochastic parts so losses are plain functions of the weights.
template <class T>
struct LossNoise {
  nn::Tensor<T> z_prior;   // [N,d] prior draw for the generated sample
  nn::Tensor<T> eps_real;  // [N,d] reparameterization noise for x
  nn::Tensor<T> eps_fake;  // [N,d] reparameterization noise for D(z_prior)
  nn::Tensor<T> eps_rec;   // [N,d] used when fake_source == both

  static LossNoise draw(int batch, int latent_dim, Rng& rng);
};

template <class T>
struct LossTerms {
  Var<T> loss;  // minimized
  double elbo_real = 0;
  double elbo_fake = 0;
  double reversed = 0;
  int capped = 0;  // samples whose exp argument hit the cap
};

/// Encoder objective to minimise:
///   -ELBO(x) + fake_weight * (1/alpha) exp(min(alpha * s * ELBO(D(z)), cap)) + lambda * L_rev(x)
/// The generated sample D(z) is a constant here (decoder detached).
/// In vae_only mode: -ELBO(x) + lambda * L_rev(x).
template <class T>
LossTerms<T> encoder_loss(const LatentModel<T>& model, const nn::Tensor<T>& x, const LossNoise<T>& noise,
                          const LatentTrainConfig& config);

/// Decoder objective to minimise: -ELBO(x) - gamma * ELBO(D(z)).
/// Only decoder parameters are stepped with it. In vae_only mode it equals
/// encoder_loss.
template <class T>
LossTerms<T> decoder_loss(const LatentModel<T>& model, const nn::Tensor<T>& x, const LossNoise<T>& noise,
                          const LatentTrainConfig& config);

/// Patience-based stopper on a quantity where larger is better.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}
  /// Returns true when training should stop.
  bool update(double value);
  bool improved() const { return improved_; }
  double best() const { return best_; }
  int epochs_without_improvement() const { return bad_epochs_; }

 private:
  int patience_;
  double best_ = -std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
  bool improved_ = false;
  bool started_ = false;
};

struct EpochLog {
  int epoch = 0;
  double encoder_loss = 0;
  double decoder_loss = 0;
  double val_elbo = 0;
};

struct TrainOptions {
  /// When set, the training log and best checkpoint are written here, and a
  /// diagnostic checkpoint on divergence.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const EpochLog&)> on_epoch;
};

struct LatentTrainResult {
  LatentModel<float> model;  // best-validation weights
  std::vector<EpochLog> log;
  std::vector<double> step_losses;  // encoder loss per step
  double best_val_elbo = 0;
  double initial_val_elbo = 0;
  int epochs_run = 0;
  bool early_stopped = false;
  Checkpoint checkpoint;
};

/// Mean validation ELBO using z = mu.
double validation_elbo(const LatentModel<float>& model, const std::vector<Image>& images, double beta_kl);

LatentTrainResult train_latent(const std::vector<Image>& train, const std::vector<Image>& val, const LatentArch& arch,
                               const LatentTrainConfig& config, std::uint64_t seed, const TrainOptions& options = {});

Checkpoint make_checkpoint(const LatentModel<float>& model, const LatentTrainConfig& config);
LatentModel<float> load_model(const Checkpoint& checkpoint);
LatentModel<float> load_model(const std::filesystem::path& path);
LatentTrainConfig load_train_config(const Checkpoint& checkpoint);

}  // namespace phanes::latent
