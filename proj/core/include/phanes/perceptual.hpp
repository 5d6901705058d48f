#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "phanes/image.hpp"
#include "phanes/latent.hpp"
#include "phanes/nn/autograd.hpp"

namespace phanes::perceptual {

template <class T>
using Var = nn::Var<T>;

inline constexpr double kNormEps = 1e-10;

/// Source of the deep features compared by the perceptual distance.
template <class T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  /// x: [N,1,H,W] -> one [N,C_l,h_l,w_l] feature grid per layer.
  virtual std::vector<Var<T>> features(const Var<T>& x) const = 0;
  /// Per-layer channel weights. An empty list (or empty entry) means 1/C_l.
  virtual std::vector<std::vector<T>> channel_weights() const { return {}; }
};

/// Uses the per-stage activations of a latent encoder. Holds a frozen copy
/// of the weights, so the source model can keep training independently.
/// Stages before first_layer are dropped.
template <class T>
class EncoderFeatures final : public FeatureExtractor<T> {
 public:
  explicit EncoderFeatures(const latent::LatentModel<T>& model, int first_layer = 0);
  std::vector<Var<T>> features(const Var<T>& x) const override;

 private:
  latent::LatentModel<T> model_;
  int first_layer_ = 0;
};

enum class Backbone { latent, random };

struct PerceptualOptions {
  /// latent: the trained latent encoder. random: an untrained encoder of the
  /// same depth, base width random_width, initialized from random_seed.
  Backbone backbone = Backbone::latent;
  int first_layer = 0;
  int random_width = 16;
  std::uint64_t random_seed = 0;

  void validate(int stages) const;
};

template <class T>
EncoderFeatures<T> make_features(const latent::LatentModel<T>& model, const PerceptualOptions& options);

/// Per-layer distance grids [N,1,h_l,w_l]: channel-weighted squared
/// difference of unit-normalized features.
template <class T>
std::vector<Var<T>> layer_distance_maps(const FeatureExtractor<T>& fx, const Var<T>& a, const Var<T>& b);

/// Differentiable scalar distance per sample [N]: sum over layers of the
/// spatial mean of each layer grid.
template <class T>
Var<T> perceptual_distance(const FeatureExtractor<T>& fx, const Var<T>& a, const Var<T>& b);

/// Spatial map: each layer grid is bilinearly upsampled to the image size
/// and the layers are summed. Symmetric, nonnegative, zero for a == b.
template <class T>
ScoreMap perceptual_distance_map(const FeatureExtractor<T>& fx, const Image& a, const Image& b);

/// Scalar distance of two images (sum of per-layer spatial means).
template <class T>
double perceptual_distance(const FeatureExtractor<T>& fx, const Image& a, const Image& b);

}  // namespace phanes::perceptual
