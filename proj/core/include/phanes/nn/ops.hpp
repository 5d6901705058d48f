#pragma once

#include <vector>

#include "phanes/nn/autograd.hpp"

// Differentiable tensor operations. Definitions live in ops.cpp and are
// instantiated for float (training) and double (gradient checks).
namespace phanes::nn {

struct ConvSpec {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
};

inline int conv_out_size(int in, int kernel, const ConvSpec& s) {
  return (in + 2 * s.pad - s.dilation * (kernel - 1) - 1) / s.stride + 1;
}

inline int conv_transpose_out_size(int in, int kernel, const ConvSpec& s) {
  return (in - 1) * s.stride - 2 * s.pad + s.dilation * (kernel - 1) + 1;
}

// Elementwise, identical shapes.
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);

template <class T> Var<T> add_scalar(const Var<T>& a, T s);
template <class T> Var<T> scale(const Var<T>& a, T s);
template <class T> Var<T> neg(const Var<T>& a);

template <class T> Var<T> exp(const Var<T>& a);
template <class T> Var<T> square(const Var<T>& a);
template <class T> Var<T> abs(const Var<T>& a);
template <class T> Var<T> sigmoid(const Var<T>& a);
template <class T> Var<T> silu(const Var<T>& a);
template <class T> Var<T> leaky_relu(const Var<T>& a, T slope);
/// min(a, cap); zero gradient where clamped.
template <class T> Var<T> clamp_max(const Var<T>& a, T cap);

// Reductions. Scalars have shape {1}; per-sample results have shape {N}.
template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> mean(const Var<T>& a);
template <class T> Var<T> sum_per_sample(const Var<T>& a);
template <class T> Var<T> mean_per_sample(const Var<T>& a);

template <class T> Var<T> reshape(const Var<T>& a, Shape shape);
/// Slice [begin, begin+count) of dimension 1.
template <class T> Var<T> narrow(const Var<T>& a, int begin, int count);
/// Concatenate along dimension 1.
template <class T> Var<T> concat(const std::vector<Var<T>>& parts);

/// x [N,in], weight [out,in], bias [out] (may be undefined).
template <class T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
/// x [N,Cin,H,W], weight [Cout,Cin,k,k], bias [Cout] (may be undefined).
template <class T> Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvSpec spec);
/// x [N,Cin,H,W], weight [Cin,Cout,k,k], bias [Cout] (may be undefined).
template <class T> Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvSpec spec);

/// Divides each channel vector x[n,:,h,w] by (||x[n,:,h,w]|| + eps).
template <class T> Var<T> channel_normalize(const Var<T>& x, T eps);
/// sum_c weights[c] * x[n,c,h,w] -> [N,1,H,W].
template <class T> Var<T> channel_weighted_sum(const Var<T>& x, const std::vector<T>& weights);
/// Cosine similarity of the flattened samples of a and b -> [N].
/// A zero-norm sample yields similarity 0.
template <class T> Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b);

}  // namespace phanes::nn
