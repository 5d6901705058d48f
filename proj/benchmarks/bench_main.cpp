#include <benchmark/benchmark.h>

#include "phanes/data.hpp"
#include "phanes/evaluation.hpp"
#include "phanes/latent.hpp"
#include "phanes/mask.hpp"
#include "phanes/nn/layers.hpp"
#include "phanes/perceptual.hpp"
#include "phanes/rng.hpp"

using namespace phanes;

namespace {

nn::Tensor<float> random_tensor(nn::Shape shape, std::uint64_t seed) {
  nn::Tensor<float> t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-1, 1));
  return t;
}

Image phantom(int resolution) {
  Rng rng(3);
  return generate_phantom(resolution, rng);
}

// Args: channels, spatial size. Batch of 8, 3x3 kernel.
void BM_Conv2dForward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0)), s = static_cast<int>(state.range(1));
  Rng rng(1);
  nn::Conv2d<float> conv(c, c, 3, {1, 1, 1}, rng);
  const nn::Var<float> x(random_tensor({8, c, s, s}, 2));
  for (auto _ : state) benchmark::DoNotOptimize(conv(x));
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv2dForward)->Args({8, 64})->Args({32, 32})->Args({64, 16});

void BM_Conv2dBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0)), s = static_cast<int>(state.range(1));
  Rng rng(1);
  nn::Conv2d<float> conv(c, c, 3, {1, 1, 1}, rng);
  nn::Var<float> x(random_tensor({8, c, s, s}, 2), true);
  for (auto _ : state) {
    auto loss = nn::sum(nn::square(conv(x)));
    nn::backward(loss);
    conv.weight.zero_grad();
    conv.bias.zero_grad();
    x.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv2dBackward)->Args({8, 64})->Args({32, 32})->Args({64, 16});

void BM_Clahe(benchmark::State& state) {
  const auto img = phantom(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(adaptive_equalize(img));
}
BENCHMARK(BM_Clahe)->Arg(64)->Arg(128);

void BM_Reconstruct(benchmark::State& state) {
  latent::LatentArch arch;
  arch.base_width = 8;
  const latent::LatentModel<float> model(arch, 1);
  const auto img = phantom(64);
  for (auto _ : state) benchmark::DoNotOptimize(model.reconstruct(img));
}
BENCHMARK(BM_Reconstruct);

void BM_AnomalyMaskMap(benchmark::State& state) {
  latent::LatentArch arch;
  arch.base_width = 8;
  const latent::LatentModel<float> model(arch, 1);
  const perceptual::EncoderFeatures<float> fx(model);
  const auto img = phantom(64);
  const auto rec = model.reconstruct(img);
  for (auto _ : state) benchmark::DoNotOptimize(anomaly_mask_map(img, rec, fx, MaskMapOptions{}));
}
BENCHMARK(BM_AnomalyMaskMap);

// Pixel counts of a 64x64 test set with arg images.
void BM_Metrics(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0)) * 64 * 64;
  Rng rng(4);
  std::vector<double> scores(n);
  std::vector<std::uint8_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = rng.uniform(0, 1) < 0.05 ? 1 : 0;
    scores[i] = rng.uniform(0, 1) + 0.5 * labels[i];
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(eval::auprc(scores, labels));
    benchmark::DoNotOptimize(eval::ceiling_dice(scores, labels));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Metrics)->Arg(20)->Arg(200);

void BM_PairedSignificance(benchmark::State& state) {
  Rng rng(5);
  std::vector<double> a(static_cast<std::size_t>(state.range(0))), b(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.uniform(0, 1);
    b[i] = rng.uniform(0, 1);
  }
  for (auto _ : state) benchmark::DoNotOptimize(eval::paired_significance(a, b));
}
BENCHMARK(BM_PairedSignificance)->Arg(10)->Arg(200);

}  // namespace

BENCHMARK_MAIN();
