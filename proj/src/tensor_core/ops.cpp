#include "mcfnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace mcfnet::ops {

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

void require_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// C[m x n] += A[m x k] (row stride lda) . B[k x n]
template <typename T>
void gemm_nn(const T* A, std::size_t lda, const T* B, T* C, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* c = C + i * n;
    const T* a = A + i * lda;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p];
      const T* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m x k] (row stride ldc) += G[m x n] . B[k x n]^T
template <typename T>
void gemm_nt(const T* G, const T* B, T* C, std::size_t ldc, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* gr = G + i * n;
    T* c = C + i * ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const T* b = B + p * n;
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) s += gr[j] * b[j];
      c[p] += s;
    }
  }
}

// C[k x n] += A[m x k]^T (row stride lda) . G[m x n]
template <typename T>
void gemm_tn(const T* A, std::size_t lda, const T* G, T* C, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* a = A + i * lda;
    const T* gr = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p];
      T* c = C + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * gr[j];
    }
  }
}

template <typename T>
Shape strides_of(const Shape& shape) {
  Shape st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

}  // namespace

template <typename T>
void require_finite(const Tensor<T>& x, const char* what) {
  const auto d = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw NumericError(std::string(what) + ": non-finite value " + std::to_string(d[i]) +
                         " at flat index " + std::to_string(i));
    }
  }
}

template <typename T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  gemm_nn(a.data().data(), k, b.data().data(), out.data().data(), m, k, n);
  if (g.needs_grad({&a, &b})) {
    g.record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      const T* go = out.grad().data();
      if (a.requires_grad()) gemm_nt(go, b.data().data(), a.grad_mut().data(), k, m, n, k);
      if (b.requires_grad()) gemm_tn(a.data().data(), k, go, b.grad_mut().data(), m, k, n);
    });
  }
  return out;
}

template <typename T>
Tensor<T> bmm(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  }
  const std::size_t G = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<T> out(Shape{G, m, n});
  for (std::size_t q = 0; q < G; ++q) {
    gemm_nn(a.data().data() + q * m * k, k, b.data().data() + q * k * n,
            out.data().data() + q * m * n, m, k, n);
  }
  if (g.needs_grad({&a, &b})) {
    g.record("bmm", {a, b}, out, [a, b, out, G, m, k, n]() mutable {
      const T* go = out.grad().data();
      for (std::size_t q = 0; q < G; ++q) {
        if (a.requires_grad()) {
          gemm_nt(go + q * m * n, b.data().data() + q * k * n,
                  a.grad_mut().data() + q * m * k, k, m, n, k);
        }
        if (b.requires_grad()) {
          gemm_tn(a.data().data() + q * m * k, k, go + q * m * n,
                  b.grad_mut().data() + q * k * n, m, k, n);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  }
  const bool has_bias = bias.numel() != 0;
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != w.dim(1))) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(w.shape()));
  }
  const std::size_t k = w.dim(0), n = w.dim(1), rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  T* o = out.data().data();
  if (has_bias) {
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(bias.data().data(), n, o + r * n);
  }
  gemm_nn(x.data().data(), k, w.data().data(), o, rows, k, n);
  if (g.needs_grad({&x, &w, &bias})) {
    std::vector<Tensor<T>> ins{x, w};
    if (has_bias) ins.push_back(bias);
    g.record("linear", ins, out, [x, w, bias, out, rows, k, n, has_bias]() mutable {
      const T* go = out.grad().data();
      if (x.requires_grad()) gemm_nt(go, w.data().data(), x.grad_mut().data(), k, rows, n, k);
      if (w.requires_grad()) gemm_tn(x.data().data(), k, go, w.grad_mut().data(), rows, k, n);
      if (has_bias && bias.requires_grad()) {
        T* gb = bias.grad_mut().data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) gb[j] += go[r * n + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  if (g.needs_grad({&a, &b})) {
    g.record("add", {a, b}, out, [a, b, out]() mutable {
      const auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  if (g.needs_grad({&a, &b})) {
    g.record("sub", {a, b}, out, [a, b, out]() mutable {
      const auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  if (g.needs_grad({&a, &b})) {
    g.record("mul", {a, b}, out, [a, b, out]() mutable {
      const auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * factor;
  if (g.needs_grad({&x})) {
    g.record("scale", {x}, out, [x, out, factor]() mutable {
      const auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  if (g.needs_grad({&x})) {
    g.record("relu", {x}, out, [x, out]() mutable {
      const auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (x[i] > T(0)) gx[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(Graph<T>& g, const Tensor<T>& x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = T(0.044715);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
  }
  if (g.needs_grad({&x})) {
    g.record("gelu", {x}, out, [x, out]() mutable {
      const auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const T v = x[i];
        const T t = std::tanh(c * (v + a * v * v * v));
        const T d = T(0.5) * (T(1) + t) +
                    T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * a * v * v);
        gx[i] += go[i] * d;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(Graph<T>& g, const Tensor<T>& x, std::size_t axis) {
  require_axis(x.shape(), axis, "softmax");
  require_finite(x, "softmax input");
  const auto s = split_at(x.shape(), axis);
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = x[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, x[base + l * s.inner]);
      T total = 0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const T e = std::exp(x[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= total;
    }
  }
  if (g.needs_grad({&x})) {
    g.record("softmax", {x}, out, [x, out, s]() mutable {
      const auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.len * s.inner + in;
          T dot = 0;
          for (std::size_t l = 0; l < s.len; ++l) {
            dot += go[base + l * s.inner] * out[base + l * s.inner];
          }
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t i = base + l * s.inner;
            gx[i] += out[i] * (go[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  if (x.rank() < 1 || gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != x.shape().back() ||
      bias.dim(0) != x.shape().back()) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + ", gain " +
                     shape_str(gain.shape()) + ", bias " + shape_str(bias.shape()));
  }
  if (!(eps > T(0))) throw ShapeError("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  if (g.needs_grad({&x, &gain, &bias})) {
    g.record("layer_norm", {x, gain, bias}, out,
             [x, gain, bias, out, xhat = std::move(xhat), rstd = std::move(rstd), d,
              rows]() mutable {
               const auto go = out.grad();
               if (gain.requires_grad() || bias.requires_grad()) {
                 auto gg = gain.requires_grad() ? gain.grad_mut() : std::span<T>{};
                 auto gb = bias.requires_grad() ? bias.grad_mut() : std::span<T>{};
                 for (std::size_t r = 0; r < rows; ++r) {
                   for (std::size_t j = 0; j < d; ++j) {
                     if (!gg.empty()) gg[j] += go[r * d + j] * xhat[r * d + j];
                     if (!gb.empty()) gb[j] += go[r * d + j];
                   }
                 }
               }
               if (x.requires_grad()) {
                 auto gx = x.grad_mut();
                 for (std::size_t r = 0; r < rows; ++r) {
                   T m1 = 0, m2 = 0;
                   for (std::size_t j = 0; j < d; ++j) {
                     const T gh = go[r * d + j] * gain[j];
                     m1 += gh;
                     m2 += gh * xhat[r * d + j];
                   }
                   m1 /= T(d);
                   m2 /= T(d);
                   for (std::size_t j = 0; j < d; ++j) {
                     const T gh = go[r * d + j] * gain[j];
                     gx[r * d + j] += rstd[r] * (gh - m1 - xhat[r * d + j] * m2);
                   }
                 }
               }
             });
  }
  return out;
}

template <typename T>
Tensor<T> conv1d_relu(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& weight,
                      const Tensor<T>& bias, std::size_t window) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("conv1d: input must be [n x d] or [B x n x d], got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t n = x.dim(x.rank() - 2), d_in = x.dim(x.rank() - 1);
  if (window == 0) throw ShapeError("conv1d: window must be positive");
  if (n < window) {
    throw ShapeError("conv1d: sequence length " + std::to_string(n) + " is shorter than window " +
                     std::to_string(window) + "; pad the sequence to at least the window length");
  }
  if (weight.rank() != 2 || weight.dim(0) != window * d_in || bias.rank() != 1 ||
      bias.dim(0) != weight.dim(1)) {
    throw ShapeError("conv1d: weight " + shape_str(weight.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not fit window " + std::to_string(window) +
                     " over width " + std::to_string(d_in));
  }
  const std::size_t d_out = weight.dim(1), positions = n - window + 1, k = window * d_in;
  Shape out_shape = x.rank() == 3 ? Shape{batch, positions, d_out} : Shape{positions, d_out};
  Tensor<T> out(out_shape);
  T* o = out.data().data();
  for (std::size_t r = 0; r < batch * positions; ++r) {
    std::copy_n(bias.data().data(), d_out, o + r * d_out);
  }
  for (std::size_t b = 0; b < batch; ++b) {
    // Windows overlap: row t starts d_in values after row t-1.
    gemm_nn(x.data().data() + b * n * d_in, d_in, weight.data().data(),
            o + b * positions * d_out, positions, k, d_out);
  }
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  if (g.needs_grad({&x, &weight, &bias})) {
    g.record("conv1d_relu", {x, weight, bias}, out,
             [x, weight, bias, out, batch, n, d_in, d_out, positions, k]() mutable {
               std::vector<T> gpre(out.grad().begin(), out.grad().end());
               for (std::size_t i = 0; i < gpre.size(); ++i) {
                 if (!(out[i] > T(0))) gpre[i] = 0;
               }
               for (std::size_t b = 0; b < batch; ++b) {
                 const T* gp = gpre.data() + b * positions * d_out;
                 const T* xb = x.data().data() + b * n * d_in;
                 if (weight.requires_grad()) {
                   gemm_tn(xb, d_in, gp, weight.grad_mut().data(), positions, k, d_out);
                 }
                 if (x.requires_grad()) {
                   // Windows overlap, so accumulate row by row.
                   T* gx = x.grad_mut().data() + b * n * d_in;
                   for (std::size_t t = 0; t < positions; ++t) {
                     gemm_nt(gp + t * d_out, weight.data().data(), gx + t * d_in, k, 1, d_out, k);
                   }
                 }
               }
               if (bias.requires_grad()) {
                 auto gb = bias.grad_mut();
                 for (std::size_t r = 0; r < batch * positions; ++r) {
                   for (std::size_t j = 0; j < d_out; ++j) gb[j] += gpre[r * d_out + j];
                 }
               }
             });
  }
  return out;
}

template <typename T>
Tensor<T> mean_pool(Graph<T>& g, const Tensor<T>& x, std::size_t axis) {
  require_axis(x.shape(), axis, "mean_pool");
  const auto s = split_at(x.shape(), axis);
  if (s.len == 0) throw ShapeError("mean_pool: empty axis");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        out[o * s.inner + in] += x[(o * s.len + l) * s.inner + in];
      }
    }
  }
  for (auto& v : out.data()) v /= T(s.len);
  if (g.needs_grad({&x})) {
    g.record("mean_pool", {x}, out, [x, out, s]() mutable {
      const auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t l = 0; l < s.len; ++l) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            gx[(o * s.len + l) * s.inner + in] += go[o * s.inner + in] / T(s.len);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> max_pool(Graph<T>& g, const Tensor<T>& x, std::size_t axis) {
  require_axis(x.shape(), axis, "max_pool");
  const auto s = split_at(x.shape(), axis);
  if (s.len == 0) throw ShapeError("max_pool: empty axis");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(out_shape);
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      std::size_t best = o * s.len * s.inner + in;
      for (std::size_t l = 1; l < s.len; ++l) {
        const std::size_t i = (o * s.len + l) * s.inner + in;
        if (x[i] > x[best]) best = i;
      }
      out[o * s.inner + in] = x[best];
      argmax[o * s.inner + in] = best;
    }
  }
  if (g.needs_grad({&x})) {
    g.record("max_pool", {x}, out, [x, out, argmax = std::move(argmax)]() mutable {
      const auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < go.size(); ++i) gx[argmax[i]] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(Graph<T>& g, const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  require_axis(xs[0].shape(), axis, "concat");
  Shape out_shape = xs[0].shape();
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    bool ok = t.rank() == out_shape.size();
    for (std::size_t i = 0; ok && i < t.rank(); ++i) {
      if (i != axis && t.dim(i) != out_shape[i]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: shape " + shape_str(t.shape()) + " incompatible with " +
                       shape_str(xs[0].shape()) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += t.dim(axis);
  }
  const auto so = split_at(out_shape, axis);
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& t : xs) {
    offsets.push_back(offset);
    const std::size_t chunk = t.dim(axis) * so.inner;
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(t.data().data() + o * chunk, chunk,
                  out.data().data() + o * so.len * so.inner + offset * so.inner);
    }
    offset += t.dim(axis);
  }
  if (g.needs_grad(xs)) {
    g.record("concat", xs, out, [xs, out, so, axis, offsets]() mutable {
      const auto go = out.grad();
      for (std::size_t q = 0; q < xs.size(); ++q) {
        auto& t = xs[q];
        if (!t.requires_grad()) continue;
        auto gt = t.grad_mut();
        const std::size_t chunk = t.dim(axis) * so.inner;
        for (std::size_t o = 0; o < so.outer; ++o) {
          const T* src = go.data() + o * so.len * so.inner + offsets[q] * so.inner;
          for (std::size_t i = 0; i < chunk; ++i) gt[o * chunk + i] += src[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (g.needs_grad({&x})) {
    g.record("reshape", {x}, out, [x, out]() mutable {
      const auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(Graph<T>& g, const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  bool valid = axes.size() == r;
  for (std::size_t i = 0; valid && i < r; ++i) {
    if (axes[i] >= r || seen[axes[i]]) valid = false;
    else seen[axes[i]] = true;
  }
  if (!valid) throw ShapeError("permute: invalid axis order for shape " + shape_str(x.shape()));
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(axes[i]);
  const Shape in_strides = strides_of<T>(x.shape());
  // src_index[i] = flat input index of flat output element i
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::size_t off = 0;
    for (std::size_t a = 0; a < r; ++a) off += idx[a] * in_strides[axes[a]];
    src[i] = off;
    for (std::size_t a = r; a-- > 0;) {
      if (++idx[a] < out_shape[a]) break;
      idx[a] = 0;
    }
  }
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = x[src[i]];
  if (g.needs_grad({&x})) {
    g.record("permute", {x}, out, [x, out, src = std::move(src)]() mutable {
      const auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < go.size(); ++i) gx[src[i]] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(Graph<T>& g, const Tensor<T>& x, std::size_t axis, std::size_t begin,
                std::size_t end) {
  require_axis(x.shape(), axis, "slice");
  if (begin >= end || end > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for axis of length " + std::to_string(x.dim(axis)));
  }
  const auto s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  Tensor<T> out(out_shape);
  const std::size_t chunk = (end - begin) * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().data() + (o * s.len + begin) * s.inner, chunk,
                out.data().data() + o * chunk);
  }
  if (g.needs_grad({&x})) {
    g.record("slice", {x}, out, [x, out, s, begin, chunk]() mutable {
      const auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < chunk; ++i) {
          gx[(o * s.len + begin) * s.inner + i] += go[o * chunk + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> select(Graph<T>& g, const Tensor<T>& x, std::size_t axis, std::size_t index) {
  auto sl = slice(g, x, axis, index, index + 1);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape.push_back(1);
  return reshape(g, sl, out_shape);
}

template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x) {
  T total = 0;
  for (const T v : x.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  if (g.needs_grad({&x})) {
    g.record("sum", {x}, out, [x, out]() mutable {
      const T go = out.grad()[0];
      for (auto& v : x.grad_mut()) v += go;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(g, sum(g, x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> embedding(Graph<T>& g, const Tensor<T>& table, const std::vector<std::size_t>& ids,
                    const Shape& index_shape) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D");
  if (numel_of(index_shape) != ids.size()) {
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids do not fill index shape " +
                     shape_str(index_shape));
  }
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  Shape out_shape = index_shape;
  out_shape.push_back(width);
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range for table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(table.data().data() + ids[i] * width, width, out.data().data() + i * width);
  }
  if (g.needs_grad({&table})) {
    g.record("embedding", {table}, out, [table, out, ids, width]() mutable {
      const auto go = out.grad();
      auto gt = table.grad_mut();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = 0; j < width; ++j) gt[ids[i] * width + j] += go[i * width + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> masked_mean(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& mask) {
  if (x.rank() != 3 || mask.rank() != 2 || mask.dim(0) != x.dim(0) || mask.dim(1) != x.dim(1)) {
    throw ShapeError("masked_mean: input " + shape_str(x.shape()) + " and mask " +
                     shape_str(mask.shape()) + " disagree");
  }
  const std::size_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
  std::vector<T> count(B, T(0));
  Tensor<T> out(Shape{B, d});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t l = 0; l < L; ++l) {
      const T m = mask[b * L + l];
      if (m == T(0)) continue;
      count[b] += m;
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += m * x[(b * L + l) * d + j];
    }
    if (count[b] == T(0)) {
      throw ShapeError("masked_mean: row " + std::to_string(b) + " has no unmasked positions");
    }
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] /= count[b];
  }
  if (g.needs_grad({&x})) {
    g.record("masked_mean", {x}, out, [x, mask, out, count, B, L, d]() mutable {
      const auto go = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t l = 0; l < L; ++l) {
          const T w = mask[b * L + l] / count[b];
          if (w == T(0)) continue;
          for (std::size_t j = 0; j < d; ++j) gx[(b * L + l) * d + j] += w * go[b * d + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_key_mask(Graph<T>& g, const Tensor<T>& scores, const Tensor<T>& key_mask,
                       std::size_t heads) {
  if (scores.rank() != 3 || key_mask.rank() != 2 || heads == 0 ||
      key_mask.dim(0) * heads != scores.dim(0) || key_mask.dim(1) != scores.dim(2)) {
    throw ShapeError("add_key_mask: scores " + shape_str(scores.shape()) + " and mask " +
                     shape_str(key_mask.shape()) + " with " + std::to_string(heads) +
                     " heads disagree");
  }
  constexpr T kMasked = T(-1e9);
  const std::size_t G = scores.dim(0), Lq = scores.dim(1), Lk = scores.dim(2);
  Tensor<T> out(scores.shape(), std::vector<T>(scores.data().begin(), scores.data().end()));
  for (std::size_t q = 0; q < G; ++q) {
    const std::size_t b = q / heads;
    for (std::size_t k = 0; k < Lk; ++k) {
      if (key_mask[b * Lk + k] != T(0)) continue;
      for (std::size_t i = 0; i < Lq; ++i) out[(q * Lq + i) * Lk + k] += kMasked;
    }
  }
  if (g.needs_grad({&scores})) {
    g.record("add_key_mask", {scores}, out, [scores, out]() mutable {
      const auto go = out.grad();
      auto gs = scores.grad_mut();
      for (std::size_t i = 0; i < go.size(); ++i) gs[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> dropout_mask(const Shape& shape, double keep_prob, std::mt19937_64& rng) {
  if (!(keep_prob > 0.0) || keep_prob > 1.0) {
    throw ConfigError("dropout_mask: keep probability must lie in (0, 1], got " +
                      std::to_string(keep_prob));
  }
  Tensor<T> mask(shape);
  std::bernoulli_distribution keep(keep_prob);
  for (auto& v : mask.data()) v = keep(rng) ? T(1) : T(0);
  return mask;
}

#define MCFNET_INSTANTIATE_OPS(T)                                                               \
  template void require_finite<T>(const Tensor<T>&, const char*);                               \
  template Tensor<T> matmul<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> bmm<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> linear<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> add<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> sub<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> mul<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> scale<T>(Graph<T>&, const Tensor<T>&, T);                                  \
  template Tensor<T> relu<T>(Graph<T>&, const Tensor<T>&);                                      \
  template Tensor<T> gelu<T>(Graph<T>&, const Tensor<T>&);                                      \
  template Tensor<T> softmax<T>(Graph<T>&, const Tensor<T>&, std::size_t);                      \
  template Tensor<T> layer_norm<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                   const Tensor<T>&, T);                                        \
  template Tensor<T> conv1d_relu<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                    const Tensor<T>&, std::size_t);                             \
  template Tensor<T> mean_pool<T>(Graph<T>&, const Tensor<T>&, std::size_t);                    \
  template Tensor<T> max_pool<T>(Graph<T>&, const Tensor<T>&, std::size_t);                     \
  template Tensor<T> concat<T>(Graph<T>&, const std::vector<Tensor<T>>&, std::size_t);          \
  template Tensor<T> reshape<T>(Graph<T>&, const Tensor<T>&, Shape);                            \
  template Tensor<T> permute<T>(Graph<T>&, const Tensor<T>&, const std::vector<std::size_t>&);  \
  template Tensor<T> select<T>(Graph<T>&, const Tensor<T>&, std::size_t, std::size_t);          \
  template Tensor<T> slice<T>(Graph<T>&, const Tensor<T>&, std::size_t, std::size_t,            \
                              std::size_t);                                                     \
  template Tensor<T> sum<T>(Graph<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mean<T>(Graph<T>&, const Tensor<T>&);                                      \
  template Tensor<T> embedding<T>(Graph<T>&, const Tensor<T>&, const std::vector<std::size_t>&, \
                                  const Shape&);                                                \
  template Tensor<T> masked_mean<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> add_key_mask<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                     std::size_t);                                              \
  template Tensor<T> dropout_mask<T>(const Shape&, double, std::mt19937_64&);

MCFNET_INSTANTIATE_OPS(float)
MCFNET_INSTANTIATE_OPS(double)

#undef MCFNET_INSTANTIATE_OPS

}  // namespace mcfnet::ops
