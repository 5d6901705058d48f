#include "phanes/nn/ops.hpp"

#include <Eigen/Core>
#include <cmath>

namespace phanes::nn {
namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class T, class F, class G>
Var<T> unary(const Var<T>& a, F forward, G derivative) {
  const auto& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = forward(x[i]);
  return make_result<T>(std::move(y), {a}, [a, derivative](Node<T>& self) {
    auto& pa = *a.node();
    if (!pa.requires_grad) return;
    auto& g = pa.ensure_grad();
    const auto& x = pa.value;
    for (std::size_t i = 0; i < x.numel(); ++i) g[i] += self.grad[i] * derivative(x[i], self.value[i]);
  });
}

struct Geometry {
  int n, c, h, w;  // image side
  int k;
  ConvSpec spec;
  int ho, wo;  // column side
};

// col[(c*k*k + ky*k + kx), n*ho*wo + oy*wo + ox] = x[n, c, oy*s - p + ky*d, ox*s - p + kx*d]
template <class T>
void im2col(const T* x, const Geometry& g, T* col) {
  const std::size_t cols = static_cast<std::size_t>(g.n) * g.ho * g.wo;
  const int s = g.spec.stride, p = g.spec.pad, d = g.spec.dilation;
  for (int c = 0; c < g.c; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * cols;
        for (int n = 0; n < g.n; ++n) {
          const T* plane = x + (static_cast<std::size_t>(n) * g.c + c) * g.h * g.w;
          T* out = row + static_cast<std::size_t>(n) * g.ho * g.wo;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * s - p + ky * d;
            T* out_row = out + static_cast<std::size_t>(oy) * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill(out_row, out_row + g.wo, T(0));
              continue;
            }
            const T* in_row = plane + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * s - p + kx * d;
              out_row[ox] = (ix >= 0 && ix < g.w) ? in_row[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates into x.
template <class T>
void col2im(const T* col, const Geometry& g, T* x) {
  const std::size_t cols = static_cast<std::size_t>(g.n) * g.ho * g.wo;
  const int s = g.spec.stride, p = g.spec.pad, d = g.spec.dilation;
  for (int c = 0; c < g.c; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * cols;
        for (int n = 0; n < g.n; ++n) {
          T* plane = x + (static_cast<std::size_t>(n) * g.c + c) * g.h * g.w;
          const T* src = row + static_cast<std::size_t>(n) * g.ho * g.wo;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * s - p + ky * d;
            if (iy < 0 || iy >= g.h) continue;
            const T* src_row = src + static_cast<std::size_t>(oy) * g.wo;
            T* dst_row = plane + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * s - p + kx * d;
              if (ix >= 0 && ix < g.w) dst_row[ix] += src_row[ox];
            }
          }
        }
      }
    }
  }
}

// NCHW <-> [C, N*H*W]
template <class T>
void nchw_to_cn(const T* x, int n, int c, int hw, T* out) {
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      std::copy_n(x + (static_cast<std::size_t>(i) * c + j) * hw, hw,
                  out + static_cast<std::size_t>(j) * n * hw + static_cast<std::size_t>(i) * hw);
}

template <class T>
void cn_to_nchw(const T* x, int n, int c, int hw, T* out) {
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      std::copy_n(x + static_cast<std::size_t>(j) * n * hw + static_cast<std::size_t>(i) * hw, hw,
                  out + (static_cast<std::size_t>(i) * c + j) * hw);
}

template <class T>
void accumulate_bias_grad(const Tensor<T>& grad_out, Node<T>& bias) {
  const int n = grad_out.dim(0), c = grad_out.dim(1);
  const std::size_t hw = grad_out.numel() / (static_cast<std::size_t>(n) * c);
  auto& gb = bias.ensure_grad();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const T* p = grad_out.data() + (static_cast<std::size_t>(i) * c + j) * hw;
      T acc = 0;
      for (std::size_t k = 0; k < hw; ++k) acc += p[k];
      gb[j] += acc;
    }
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [a, b](Node<T>& self) {
    for (const auto* v : {&a, &b}) {
      auto& p = *v->node();
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [a, b](Node<T>& self) {
    if (auto& p = *a.node(); p.requires_grad) {
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (auto& p = *b.node(); p.requires_grad) {
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [a, b](Node<T>& self) {
    if (auto& p = *a.node(); p.requires_grad) {
      auto& g = p.ensure_grad();
      const auto& other = b.value();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * other[i];
    }
    if (auto& p = *b.node(); p.requires_grad) {
      auto& g = p.ensure_grad();
      const auto& other = a.value();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * other[i];
    }
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return scale<T>(a, T(-1));
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return unary<T>(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Var<T> abs(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return std::abs(x); }, [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  return unary<T>(
      a,
      [](T x) {
        const T s = x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        return x * s;
      },
      [](T x, T) {
        const T s = x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return unary<T>(
      a, [slope](T x) { return x > 0 ? x : slope * x; }, [slope](T x, T) { return x > 0 ? T(1) : slope; });
}

template <class T>
Var<T> clamp_max(const Var<T>& a, T cap) {
  return unary<T>(
      a, [cap](T x) { return x > cap ? cap : x; }, [cap](T x, T) { return x > cap ? T(0) : T(1); });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1}, acc), {a}, [a](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale<T>(sum<T>(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Var<T> sum_per_sample(const Var<T>& a) {
  const int n = a.dim(0);
  const std::size_t per = a.value().per_sample();
  Tensor<T> y({n});
  for (int i = 0; i < n; ++i) {
    T acc = 0;
    const T* p = a.value().data() + i * per;
    for (std::size_t k = 0; k < per; ++k) acc += p[k];
    y[i] = acc;
  }
  return make_result<T>(std::move(y), {a}, [a, n, per](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (std::size_t k = 0; k < per; ++k) g[i * per + k] += self.grad[i];
  });
}

template <class T>
Var<T> mean_per_sample(const Var<T>& a) {
  return scale<T>(sum_per_sample<T>(a), T(1) / static_cast<T>(a.value().per_sample()));
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> y = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(y), {a}, [a](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> narrow(const Var<T>& a, int begin, int count) {
  const auto& x = a.value();
  const int n = x.dim(0), c = x.dim(1);
  if (begin < 0 || count <= 0 || begin + count > c) throw std::out_of_range("narrow: bad range");
  const std::size_t inner = x.per_sample() / c;
  Shape shape = x.shape();
  shape[1] = count;
  Tensor<T> y(shape);
  for (int i = 0; i < n; ++i)
    std::copy_n(x.data() + (static_cast<std::size_t>(i) * c + begin) * inner, count * inner,
                y.data() + static_cast<std::size_t>(i) * count * inner);
  return make_result<T>(std::move(y), {a}, [a, n, c, begin, count, inner](Node<T>& self) {
    auto& g = a.node()->ensure_grad();
    for (int i = 0; i < n; ++i) {
      T* dst = g.data() + (static_cast<std::size_t>(i) * c + begin) * inner;
      const T* src = self.grad.data() + static_cast<std::size_t>(i) * count * inner;
      for (std::size_t k = 0; k < count * inner; ++k) dst[k] += src[k];
    }
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int n = parts[0].dim(0);
  const std::size_t inner = parts[0].value().per_sample() / parts[0].dim(1);
  int total = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != n || p.value().per_sample() / p.dim(1) != inner)
      throw std::invalid_argument("concat: incompatible shapes");
    total += p.dim(1);
  }
  Shape shape = parts[0].shape();
  shape[1] = total;
  Tensor<T> y(shape);
  for (int i = 0; i < n; ++i) {
    T* dst = y.data() + static_cast<std::size_t>(i) * total * inner;
    for (const auto& p : parts) {
      const std::size_t len = p.dim(1) * inner;
      std::copy_n(p.value().data() + i * len, len, dst);
      dst += len;
    }
  }
  return make_result<T>(std::move(y), parts, [parts, n, total, inner](Node<T>& self) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.dim(1) * inner;
      if (p.requires_grad()) {
        auto& g = p.node()->ensure_grad();
        for (int i = 0; i < n; ++i) {
          const T* src = self.grad.data() + static_cast<std::size_t>(i) * total * inner + offset;
          T* dst = g.data() + i * len;
          for (std::size_t k = 0; k < len; ++k) dst[k] += src[k];
        }
      }
      offset += len;
    }
  });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const int n = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (weight.dim(1) != in) throw std::invalid_argument("linear: weight/input mismatch");
  Tensor<T> y({n, out});
  ConstMatMap<T> X(x.value().data(), n, in), W(weight.value().data(), out, in);
  MatMap<T> Y(y.data(), n, out);
  Y.noalias() = X * W.transpose();
  if (bias.defined())
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < out; ++j) Y(i, j) += bias.value()[j];

  std::vector<Var<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result<T>(std::move(y), parents, [x, weight, bias, n, in, out](Node<T>& self) {
    ConstMatMap<T> G(self.grad.data(), n, out);
    if (x.requires_grad()) {
      MatMap<T> GX(x.node()->ensure_grad().data(), n, in);
      GX.noalias() += G * ConstMatMap<T>(weight.value().data(), out, in);
    }
    if (weight.requires_grad()) {
      MatMap<T> GW(weight.node()->ensure_grad().data(), out, in);
      GW.noalias() += G.transpose() * ConstMatMap<T>(x.value().data(), n, in);
    }
    if (bias.defined() && bias.requires_grad()) {
      auto& gb = bias.node()->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < out; ++j) gb[j] += G(i, j);
    }
  });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvSpec spec) {
  const auto& xv = x.value();
  if (xv.rank() != 4 || weight.value().rank() != 4) throw std::invalid_argument("conv2d: expects 4-d tensors");
  const int cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != xv.dim(1)) throw std::invalid_argument("conv2d: channel mismatch");
  Geometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), k, spec, 0, 0};
  g.ho = conv_out_size(g.h, k, spec);
  g.wo = conv_out_size(g.w, k, spec);
  if (g.ho <= 0 || g.wo <= 0) throw std::invalid_argument("conv2d: empty output");

  const int rows = g.c * k * k;
  const int cols = g.n * g.ho * g.wo;
  auto col = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows) * cols);
  im2col(xv.data(), g, col->data());

  std::vector<T> out_cn(static_cast<std::size_t>(cout) * cols);
  MatMap<T>(out_cn.data(), cout, cols).noalias() =
      ConstMatMap<T>(weight.value().data(), cout, rows) * ConstMatMap<T>(col->data(), rows, cols);
  Tensor<T> y({g.n, cout, g.ho, g.wo});
  cn_to_nchw(out_cn.data(), g.n, cout, g.ho * g.wo, y.data());
  if (bias.defined()) {
    const std::size_t hw = static_cast<std::size_t>(g.ho) * g.wo;
    for (int i = 0; i < g.n; ++i)
      for (int j = 0; j < cout; ++j) {
        T* p = y.data() + (static_cast<std::size_t>(i) * cout + j) * hw;
        const T b = bias.value()[j];
        for (std::size_t q = 0; q < hw; ++q) p[q] += b;
      }
  }

  std::vector<Var<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result<T>(std::move(y), parents, [x, weight, bias, g, cout, rows, cols, col](Node<T>& self) {
    std::vector<T> grad_cn(static_cast<std::size_t>(cout) * cols);
    nchw_to_cn(self.grad.data(), g.n, cout, g.ho * g.wo, grad_cn.data());
    ConstMatMap<T> G(grad_cn.data(), cout, cols);
    if (weight.requires_grad()) {
      MatMap<T> GW(weight.node()->ensure_grad().data(), cout, rows);
      GW.noalias() += G * ConstMatMap<T>(col->data(), rows, cols).transpose();
    }
    if (bias.defined() && bias.requires_grad()) accumulate_bias_grad(self.grad, *bias.node());
    if (x.requires_grad()) {
      std::vector<T> dcol(static_cast<std::size_t>(rows) * cols);
      MatMap<T>(dcol.data(), rows, cols).noalias() =
          ConstMatMap<T>(weight.value().data(), cout, rows).transpose() * G;
      col2im(dcol.data(), g, x.node()->ensure_grad().data());
    }
  });
}

template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvSpec spec) {
  const auto& xv = x.value();
  if (xv.rank() != 4 || weight.value().rank() != 4) throw std::invalid_argument("conv_transpose2d: expects 4-d");
  const int n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int cout = weight.dim(1), k = weight.dim(2);
  if (weight.dim(0) != cin) throw std::invalid_argument("conv_transpose2d: channel mismatch");
  // The output plays the role of a convolution input whose output is x.
  Geometry g{n, cout, conv_transpose_out_size(h, k, spec), conv_transpose_out_size(w, k, spec), k, spec, h, w};
  if (g.h <= 0 || g.w <= 0) throw std::invalid_argument("conv_transpose2d: empty output");

  const int rows = cout * k * k;
  const int cols = n * h * w;
  auto x_cn = std::make_shared<std::vector<T>>(static_cast<std::size_t>(cin) * cols);
  nchw_to_cn(xv.data(), n, cin, h * w, x_cn->data());
  std::vector<T> col(static_cast<std::size_t>(rows) * cols);
  MatMap<T>(col.data(), rows, cols).noalias() =
      ConstMatMap<T>(weight.value().data(), cin, rows).transpose() * ConstMatMap<T>(x_cn->data(), cin, cols);
  Tensor<T> y({n, cout, g.h, g.w});
  col2im(col.data(), g, y.data());
  if (bias.defined()) {
    const std::size_t hw = static_cast<std::size_t>(g.h) * g.w;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cout; ++j) {
        T* p = y.data() + (static_cast<std::size_t>(i) * cout + j) * hw;
        for (std::size_t q = 0; q < hw; ++q) p[q] += bias.value()[j];
      }
  }

  std::vector<Var<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result<T>(std::move(y), parents, [x, weight, bias, g, cin, rows, cols, x_cn](Node<T>& self) {
    std::vector<T> dcol(static_cast<std::size_t>(rows) * cols);
    im2col(self.grad.data(), g, dcol.data());
    ConstMatMap<T> D(dcol.data(), rows, cols);
    if (weight.requires_grad()) {
      MatMap<T> GW(weight.node()->ensure_grad().data(), cin, rows);
      GW.noalias() += ConstMatMap<T>(x_cn->data(), cin, cols) * D.transpose();
    }
    if (bias.defined() && bias.requires_grad()) accumulate_bias_grad(self.grad, *bias.node());
    if (x.requires_grad()) {
      std::vector<T> dx_cn(static_cast<std::size_t>(cin) * cols);
      MatMap<T>(dx_cn.data(), cin, cols).noalias() = ConstMatMap<T>(weight.value().data(), cin, rows) * D;
      std::vector<T> dx(dx_cn.size());
      cn_to_nchw(dx_cn.data(), g.n, cin, g.ho * g.wo, dx.data());
      auto& gx = x.node()->ensure_grad();
      for (std::size_t i = 0; i < dx.size(); ++i) gx[i] += dx[i];
    }
  });
}

template <class T>
Var<T> channel_normalize(const Var<T>& x, T eps) {
  const auto& xv = x.value();
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t hw = xv.per_sample() / c;
  std::vector<T> norms(static_cast<std::size_t>(n) * hw);
  Tensor<T> y(xv.shape());
  for (int i = 0; i < n; ++i) {
    const T* base = xv.data() + static_cast<std::size_t>(i) * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      T ss = 0;
      for (int j = 0; j < c; ++j) ss += base[j * hw + p] * base[j * hw + p];
      const T norm = std::sqrt(ss);
      norms[i * hw + p] = norm;
      for (int j = 0; j < c; ++j) y.data()[static_cast<std::size_t>(i) * c * hw + j * hw + p] = base[j * hw + p] / (norm + eps);
    }
  }
  return make_result<T>(std::move(y), {x}, [x, n, c, hw, eps, norms = std::move(norms)](Node<T>& self) {
    // y = x / (r + eps), r = ||x||; dy/dx_j = e_j/(r+eps) - x x_j / (r (r+eps)^2)
    const auto& xv = x.value();
    auto& g = x.node()->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * c * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        const T r = norms[i * hw + p];
        const T denom = r + eps;
        T dot = 0;
        for (int j = 0; j < c; ++j) dot += self.grad[base + j * hw + p] * xv[base + j * hw + p];
        const T coef = r > 0 ? dot / (r * denom * denom) : T(0);
        for (int j = 0; j < c; ++j) {
          const std::size_t idx = base + j * hw + p;
          g[idx] += self.grad[idx] / denom - coef * xv[idx];
        }
      }
    }
  });
}

template <class T>
Var<T> channel_weighted_sum(const Var<T>& x, const std::vector<T>& weights) {
  const auto& xv = x.value();
  const int n = xv.dim(0), c = xv.dim(1);
  if (static_cast<int>(weights.size()) != c) throw std::invalid_argument("channel_weighted_sum: weight count");
  const std::size_t hw = xv.per_sample() / c;
  Shape shape = xv.shape();
  shape[1] = 1;
  Tensor<T> y(shape);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const T* src = xv.data() + (static_cast<std::size_t>(i) * c + j) * hw;
      T* dst = y.data() + static_cast<std::size_t>(i) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] += weights[j] * src[p];
    }
  return make_result<T>(std::move(y), {x}, [x, weights, n, c, hw](Node<T>& self) {
    auto& g = x.node()->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) {
        T* dst = g.data() + (static_cast<std::size_t>(i) * c + j) * hw;
        const T* src = self.grad.data() + static_cast<std::size_t>(i) * hw;
        for (std::size_t p = 0; p < hw; ++p) dst[p] += weights[j] * src[p];
      }
  });
}

template <class T>
Var<T> cosine_similarity(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "cosine_similarity");
  const int n = a.dim(0);
  const std::size_t per = a.value().per_sample();
  Tensor<T> y({n});
  std::vector<T> dots(n), aa(n), bb(n);
  for (int i = 0; i < n; ++i) {
    const T* pa = a.value().data() + i * per;
    const T* pb = b.value().data() + i * per;
    T d = 0, sa = 0, sb = 0;
    for (std::size_t k = 0; k < per; ++k) {
      d += pa[k] * pb[k];
      sa += pa[k] * pa[k];
      sb += pb[k] * pb[k];
    }
    dots[i] = d;
    aa[i] = sa;
    bb[i] = sb;
    // sqrt(sa * sb) keeps cos(a, a) exactly 1.
    y[i] = (sa > 0 && sb > 0) ? std::min(T(1), std::max(T(-1), d / std::sqrt(sa * sb))) : T(0);
  }
  return make_result<T>(std::move(y), {a, b}, [a, b, n, per, dots, aa, bb](Node<T>& self) {
    for (int i = 0; i < n; ++i) {
      if (!(aa[i] > 0 && bb[i] > 0)) continue;
      const T inv = T(1) / std::sqrt(aa[i] * bb[i]);
      const T cos = dots[i] * inv;
      const T gout = self.grad[i];
      const T* pa = a.value().data() + i * per;
      const T* pb = b.value().data() + i * per;
      if (a.requires_grad()) {
        T* ga = a.node()->ensure_grad().data() + i * per;
        for (std::size_t k = 0; k < per; ++k) ga[k] += gout * (pb[k] * inv - cos * pa[k] / aa[i]);
      }
      if (b.requires_grad()) {
        T* gb = b.node()->ensure_grad().data() + i * per;
        for (std::size_t k = 0; k < per; ++k) gb[k] += gout * (pa[k] * inv - cos * pb[k] / bb[i]);
      }
    }
  });
}

#define PHANES_INSTANTIATE_OPS(T)                                                                 \
  template Var<T> add(const Var<T>&, const Var<T>&);                                              \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                              \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                              \
  template Var<T> add_scalar(const Var<T>&, T);                                                   \
  template Var<T> scale(const Var<T>&, T);                                                        \
  template Var<T> neg(const Var<T>&);                                                             \
  template Var<T> exp(const Var<T>&);                                                             \
  template Var<T> square(const Var<T>&);                                                          \
  template Var<T> abs(const Var<T>&);                                                             \
  template Var<T> sigmoid(const Var<T>&);                                                         \
  template Var<T> silu(const Var<T>&);                                                            \
  template Var<T> leaky_relu(const Var<T>&, T);                                                   \
  template Var<T> clamp_max(const Var<T>&, T);                                                    \
  template Var<T> sum(const Var<T>&);                                                             \
  template Var<T> mean(const Var<T>&);                                                            \
  template Var<T> sum_per_sample(const Var<T>&);                                                  \
  template Var<T> mean_per_sample(const Var<T>&);                                                 \
  template Var<T> reshape(const Var<T>&, Shape);                                                  \
  template Var<T> narrow(const Var<T>&, int, int);                                                \
  template Var<T> concat(const std::vector<Var<T>>&);                                             \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                            \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, ConvSpec);                  \
  template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, const Var<T>&, ConvSpec);        \
  template Var<T> channel_normalize(const Var<T>&, T);                                            \
  template Var<T> channel_weighted_sum(const Var<T>&, const std::vector<T>&);                     \
  template Var<T> cosine_similarity(const Var<T>&, const Var<T>&);

PHANES_INSTANTIATE_OPS(float)
PHANES_INSTANTIATE_OPS(double)

}  // namespace phanes::nn
