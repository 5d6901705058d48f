#include "phanes/perceptual.hpp"

#include <stdexcept>

#include "phanes/data.hpp"
#include "phanes/nn/ops.hpp"

namespace phanes::perceptual {

template <class T>
EncoderFeatures<T>::EncoderFeatures(const latent::LatentModel<T>& model, int first_layer)
    : model_(model.arch(), 0), first_layer_(first_layer) {
  if (first_layer < 0 || first_layer >= model.arch().stages)
    throw std::invalid_argument("first feature layer out of range");
  const auto src = model.params();
  const auto dst = model_.params();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto v = dst[i].var;
    v.mutable_value() = src[i].var.value();
  }
  nn::freeze(dst);
}

void PerceptualOptions::validate(int stages) const {
  if (first_layer < 0 || first_layer >= stages) throw std::invalid_argument("first feature layer out of range");
  if (random_width < 1) throw std::invalid_argument("random backbone width must be >= 1");
}

template <class T>
EncoderFeatures<T> make_features(const latent::LatentModel<T>& model, const PerceptualOptions& options) {
  options.validate(model.arch().stages);
  if (options.backbone == Backbone::latent) return EncoderFeatures<T>(model, options.first_layer);
  auto arch = model.arch();
  arch.base_width = options.random_width;
  return EncoderFeatures<T>(latent::LatentModel<T>(arch, options.random_seed), options.first_layer);
}

template <class T>
std::vector<Var<T>> EncoderFeatures<T>::features(const Var<T>& x) const {
  auto e = model_.encode(x).embeddings;
  e.erase(e.begin(), e.begin() + first_layer_);
  return e;
}

template <class T>
std::vector<Var<T>> layer_distance_maps(const FeatureExtractor<T>& fx, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("perceptual distance needs equally shaped inputs");
  auto fa = fx.features(a);
  auto fb = fx.features(b);
  if (fa.size() != fb.size() || fa.empty()) throw std::logic_error("feature extractor returned mismatched layers");
  const auto weights = fx.channel_weights();
  std::vector<Var<T>> maps;
  for (std::size_t l = 0; l < fa.size(); ++l) {
    const int channels = fa[l].dim(1);
    std::vector<T> w;
    if (l < weights.size() && !weights[l].empty()) {
      w = weights[l];
      if (static_cast<int>(w.size()) != channels) throw std::invalid_argument("channel weight count mismatch");
    } else {
      w.assign(static_cast<std::size_t>(channels), T(1) / static_cast<T>(channels));
    }
    auto diff = nn::sub(nn::channel_normalize(fa[l], static_cast<T>(kNormEps)),
                        nn::channel_normalize(fb[l], static_cast<T>(kNormEps)));
    maps.push_back(nn::channel_weighted_sum(nn::square(diff), w));
  }
  return maps;
}

template <class T>
Var<T> perceptual_distance(const FeatureExtractor<T>& fx, const Var<T>& a, const Var<T>& b) {
  Var<T> total;
  for (const auto& m : layer_distance_maps(fx, a, b)) {
    auto term = nn::mean_per_sample(m);
    total = total.defined() ? nn::add(total, term) : term;
  }
  return total;
}

namespace {

template <class T>
std::vector<Var<T>> image_pair_maps(const FeatureExtractor<T>& fx, const Image& a, const Image& b) {
  require_same_shape(a, b, "perceptual_distance_map");
  nn::NoGradGuard guard;
  return layer_distance_maps(fx, nn::constant(latent::to_batch<T>(a)), nn::constant(latent::to_batch<T>(b)));
}

}  // namespace

template <class T>
ScoreMap perceptual_distance_map(const FeatureExtractor<T>& fx, const Image& a, const Image& b) {
  ScoreMap out(a.height(), a.width(), 0.0);
  for (const auto& m : image_pair_maps(fx, a, b)) {
    Grid<double> layer(m.dim(2), m.dim(3));
    for (std::size_t i = 0; i < layer.size(); ++i) layer[i] = static_cast<double>(m.value()[i]);
    const auto up = resample_bilinear(layer, a.height(), a.width());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += up[i];
  }
  return out;
}

template <class T>
double perceptual_distance(const FeatureExtractor<T>& fx, const Image& a, const Image& b) {
  double total = 0;
  for (const auto& m : image_pair_maps(fx, a, b)) {
    double acc = 0;
    for (T v : m.value().values()) acc += static_cast<double>(v);
    total += acc / static_cast<double>(m.numel());
  }
  return total;
}

#define PHANES_INSTANTIATE_PERCEPTUAL(T)                                                                   \
  template class EncoderFeatures<T>;                                                                       \
  template EncoderFeatures<T> make_features<T>(const latent::LatentModel<T>&, const PerceptualOptions&);       \
  template std::vector<Var<T>> layer_distance_maps<T>(const FeatureExtractor<T>&, const Var<T>&, const Var<T>&); \
  template Var<T> perceptual_distance<T>(const FeatureExtractor<T>&, const Var<T>&, const Var<T>&);        \
  template ScoreMap perceptual_distance_map<T>(const FeatureExtractor<T>&, const Image&, const Image&);     \
  template double perceptual_distance<T>(const FeatureExtractor<T>&, const Image&, const Image&);

PHANES_INSTANTIATE_PERCEPTUAL(float)
PHANES_INSTANTIATE_PERCEPTUAL(double)

}  // namespace phanes::perceptual
