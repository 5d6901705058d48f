#include <gtest/gtest.h>

#include <cmath>

#include "phanes/nn/ops.hpp"
#include "phanes/rng.hpp"
#include "support/gradcheck.hpp"

using namespace phanes;
using nn::ConvSpec;
using nn::Tensor;
using nn::Var;

namespace {

Tensor<double> random_tensor(nn::Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Direct-summation convolution used as a reference.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, ConvSpec s) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), k = w.dim(2);
  const int oh = nn::conv_out_size(h, k, s), ow = nn::conv_out_size(wd, k, s);
  Tensor<double> y({n, cout, oh, ow});
  for (int i = 0; i < n; ++i)
    for (int co = 0; co < cout; ++co)
      for (int y0 = 0; y0 < oh; ++y0)
        for (int x0 = 0; x0 < ow; ++x0) {
          double acc = b.numel() ? b[co] : 0.0;
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y0 * s.stride - s.pad + ky * s.dilation;
                const int ix = x0 * s.stride - s.pad + kx * s.dilation;
                if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
                acc += x.at(i, ci, iy, ix) * w.at(co, ci, ky, kx);
              }
          y.at(i, co, y0, x0) = acc;
        }
  return y;
}

// Scatter form of the transposed convolution.
Tensor<double> naive_conv_transpose(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                    ConvSpec s) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(1), k = w.dim(2);
  const int oh = nn::conv_transpose_out_size(h, k, s), ow = nn::conv_transpose_out_size(wd, k, s);
  Tensor<double> y({n, cout, oh, ow});
  for (int i = 0; i < n; ++i)
    for (int co = 0; co < cout; ++co)
      for (int a = 0; a < oh; ++a)
        for (int c = 0; c < ow; ++c) y.at(i, co, a, c) = b.numel() ? b[co] : 0.0;
  for (int i = 0; i < n; ++i)
    for (int ci = 0; ci < cin; ++ci)
      for (int y0 = 0; y0 < h; ++y0)
        for (int x0 = 0; x0 < wd; ++x0)
          for (int co = 0; co < cout; ++co)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int oy = y0 * s.stride - s.pad + ky * s.dilation;
                const int ox = x0 * s.stride - s.pad + kx * s.dilation;
                if (oy < 0 || ox < 0 || oy >= oh || ox >= ow) continue;
                y.at(i, co, oy, ox) += x.at(i, ci, y0, x0) * w.at(ci, co, ky, kx);
              }
  return y;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Conv, ForwardMatchesDirectSum) {
  Rng rng(7);
  for (ConvSpec s : {ConvSpec{1, 0, 1}, ConvSpec{1, 1, 1}, ConvSpec{2, 1, 1}, ConvSpec{1, 2, 2}, ConvSpec{2, 0, 1}}) {
    auto x = random_tensor({2, 3, 7, 6}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    auto b = random_tensor({4}, rng);
    auto y = nn::conv2d(nn::constant(x), nn::constant(w), nn::constant(b), s);
    EXPECT_LT(max_abs_diff(y.value(), naive_conv(x, w, b, s)), 1e-12);
  }
}

TEST(Conv, TransposeForwardMatchesScatter) {
  Rng rng(8);
  for (ConvSpec s : {ConvSpec{2, 1, 1}, ConvSpec{1, 1, 1}, ConvSpec{2, 0, 1}}) {
    auto x = random_tensor({2, 3, 4, 5}, rng);
    auto w = random_tensor({3, 2, 4, 4}, rng);
    auto b = random_tensor({2}, rng);
    auto y = nn::conv_transpose2d(nn::constant(x), nn::constant(w), nn::constant(b), s);
    EXPECT_LT(max_abs_diff(y.value(), naive_conv_transpose(x, w, b, s)), 1e-12);
  }
}

TEST(Conv, TransposeIsAdjointOfConv) {
  // <conv(x), y> == <x, conv_transpose(y)> with shared weights and no bias.
  Rng rng(9);
  const ConvSpec s{2, 1, 1};
  auto x = random_tensor({1, 2, 8, 8}, rng);
  auto w = random_tensor({3, 2, 4, 4}, rng);
  auto cx = nn::conv2d(nn::constant(x), nn::constant(w), Var<double>(), s).value();
  auto y = random_tensor(cx.shape(), rng);
  auto ty = nn::conv_transpose2d(nn::constant(y), nn::constant(w), Var<double>(), s).value();
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cx.numel(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * ty[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, ElementwiseAndReductions) {
  Rng rng(100 + GetParam());
  auto a = Var<double>::parameter(random_tensor({2, 3, 2, 2}, rng));
  auto b = Var<double>::parameter(random_tensor({2, 3, 2, 2}, rng));
  nn::ParamList<double> params{{"a", a}, {"b", b}};
  auto r = check::gradcheck(params, [&] {
    auto t = nn::add(nn::mul(nn::sigmoid(a), nn::silu(b)), nn::scale(nn::square(nn::sub(a, b)), 0.3));
    t = nn::add(t, nn::exp(nn::scale(a, 0.5)));
    t = nn::add(t, nn::leaky_relu(nn::add_scalar(b, 0.05), 0.2));
    t = nn::add(t, nn::neg(nn::clamp_max(a, 0.4)));
    auto per = nn::add(nn::sum_per_sample(t), nn::mean_per_sample(nn::abs(nn::add_scalar(a, 3.0))));
    return nn::add(nn::mean(per), nn::sum(nn::reshape(nn::narrow(nn::reshape(t, {2, 12}), 3, 5), {10})));
  });
  EXPECT_LT(r.rel_error, 1e-6) << "grad norm " << r.grad_norm;
}

TEST_P(OpGradient, LinearConvAndTranspose) {
  Rng rng(200 + GetParam());
  auto x = Var<double>::parameter(random_tensor({2, 2, 6, 6}, rng));
  auto w1 = Var<double>::parameter(random_tensor({3, 2, 4, 4}, rng, -0.3, 0.3));
  auto b1 = Var<double>::parameter(random_tensor({3}, rng));
  auto w2 = Var<double>::parameter(random_tensor({3, 2, 4, 4}, rng, -0.3, 0.3));
  auto b2 = Var<double>::parameter(random_tensor({2}, rng));
  auto w3 = Var<double>::parameter(random_tensor({2, 2, 3, 3}, rng, -0.3, 0.3));
  auto wl = Var<double>::parameter(random_tensor({4, 18}, rng, -0.3, 0.3));
  auto bl = Var<double>::parameter(random_tensor({4}, rng));
  nn::ParamList<double> params{{"x", x}, {"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}, {"w3", w3}, {"wl", wl}, {"bl", bl}};
  auto r = check::gradcheck(params, [&] {
    auto h = nn::silu(nn::conv2d(x, w1, b1, ConvSpec{2, 1, 1}));            // [2,3,3,3]
    auto u = nn::conv_transpose2d(h, w2, b2, ConvSpec{2, 1, 1});             // [2,2,6,6]
    auto d = nn::conv2d(u, w3, Var<double>(), ConvSpec{1, 2, 2});            // [2,2,6,6]
    auto cat = nn::concat<double>({nn::reshape(h, {2, 27}), nn::narrow(nn::reshape(d, {2, 72}), 0, 27)});
    auto flat = nn::reshape(nn::narrow(cat, 10, 18), {2, 18});
    return nn::sum(nn::square(nn::linear(flat, wl, bl)));
  });
  EXPECT_LT(r.rel_error, 1e-6) << "grad norm " << r.grad_norm;
}

TEST_P(OpGradient, NormalizationAndCosine) {
  Rng rng(300 + GetParam());
  auto a = Var<double>::parameter(random_tensor({2, 3, 2, 3}, rng));
  auto b = Var<double>::parameter(random_tensor({2, 3, 2, 3}, rng));
  nn::ParamList<double> params{{"a", a}, {"b", b}};
  auto r = check::gradcheck(params, [&] {
    auto na = nn::channel_normalize(a, 1e-10);
    auto nb = nn::channel_normalize(b, 1e-10);
    auto m = nn::channel_weighted_sum(nn::square(nn::sub(na, nb)), std::vector<double>{0.2, 0.5, 0.3});
    return nn::add(nn::sum(m), nn::sum(nn::cosine_similarity(a, b)));
  });
  EXPECT_LT(r.rel_error, 1e-6) << "grad norm " << r.grad_norm;
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(0, 5));

TEST(Cosine, IdenticalIsExactlyOneAndZeroNormIsZero) {
  Rng rng(3);
  auto a = nn::constant(random_tensor({3, 5}, rng));
  auto c = nn::cosine_similarity(a, a).value();
  for (double v : c.values()) EXPECT_EQ(v, 1.0);
  auto z = nn::constant(Tensor<double>({3, 5}));
  auto cz = nn::cosine_similarity(a, z).value();
  for (double v : cz.values()) EXPECT_EQ(v, 0.0);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  auto p = Var<double>::parameter(Tensor<double>({2}, 1.0));
  {
    nn::NoGradGuard guard;
    EXPECT_FALSE(nn::square(p).requires_grad());
  }
  EXPECT_TRUE(nn::square(p).requires_grad());
}

TEST(Autograd, SharedSubgraphAccumulates) {
  auto p = Var<double>::parameter(Tensor<double>({1}, 3.0));
  auto q = nn::square(p);
  nn::backward(nn::add(q, q));  // 2 p^2 -> 4p
  EXPECT_DOUBLE_EQ(p.grad()[0], 12.0);
}
