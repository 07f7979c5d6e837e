// Differentiable primitives. Each op computes its value eagerly and, when any
// input requires grad, records a backward closure on the tape.
#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "graftmt/errors.hpp"
#include "graftmt/tensor.hpp"

namespace graftmt {

namespace kernels {

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T{0}) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, n, k, a, bt.data(), c, accumulate);
}

}  // namespace kernels

namespace detail {

template <typename T>
void check_finite(const Tape<T>& tape, std::string_view op, const Tensor<T>& t) {
  if (!tape.strict_finite()) return;
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input value");
  }
}

[[noreturn]] inline void dim_error(std::string_view op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

template <typename T>
Tensor<T> unary(Tape<T>& tape, std::string_view kind, const Tensor<T>& x, auto&& f, auto&& df) {
  check_finite(tape, kind, x);
  Tensor<T> out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  if (tape.needs_grad({&x})) {
    tape.record(kind, {x}, out, [x, out, df](std::span<const T> g) mutable {
      auto gx = Tape<T>::grad_of(x);
      auto xv = x.data();
      auto yv = out.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
    });
  }
  return out;
}

}  // namespace detail

// a[..., K] x b[K, N] (or b[N, K] with transpose_b). Leading dims of `a` are flattened.
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() < 1 || b.rank() != 2) detail::dim_error("matmul", a.shape(), b.shape());
  const std::size_t k = a.last_dim();
  const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != bk) detail::dim_error("matmul", a.shape(), b.shape());
  detail::check_finite(tape, "matmul", a);
  detail::check_finite(tape, "matmul", b);
  const std::size_t m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  if (transpose_b) {
    kernels::gemm_nt(m, n, k, a.data().data(), b.data().data(), out.data().data(), false);
  } else {
    kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data().data(), false);
  }
  if (tape.needs_grad({&a, &b})) {
    tape.record("matmul", {a, b}, out, [a, b, m, n, k, transpose_b](std::span<const T> g) mutable {
      if (a.requires_grad()) {
        auto ga = Tape<T>::grad_of(a);
        if (transpose_b) {
          kernels::gemm_nn(m, k, n, g.data(), b.data().data(), ga.data(), true);
        } else {
          kernels::gemm_nt(m, k, n, g.data(), b.data().data(), ga.data(), true);
        }
      }
      if (b.requires_grad()) {
        auto gb = Tape<T>::grad_of(b);
        if (transpose_b) {
          kernels::gemm_tn(n, k, m, g.data(), a.data().data(), gb.data(), true);
        } else {
          kernels::gemm_tn(k, n, m, a.data().data(), g.data(), gb.data(), true);
        }
      }
    });
  }
  return out;
}

// Batched matmul: a[B, M, K] x b[B, K, N] (or b[B, N, K] with transpose_b).
template <typename T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    detail::dim_error("bmm", a.shape(), b.shape());
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (k != bk) detail::dim_error("bmm", a.shape(), b.shape());
  Tensor<T> out(Shape{batch, m, n});
  for (std::size_t s = 0; s < batch; ++s) {
    const T* ap = a.data().data() + s * m * k;
    const T* bp = b.data().data() + s * k * n;
    T* cp = out.data().data() + s * m * n;
    if (transpose_b) {
      kernels::gemm_nt(m, n, k, ap, bp, cp, false);
    } else {
      kernels::gemm_nn(m, n, k, ap, bp, cp, false);
    }
  }
  if (tape.needs_grad({&a, &b})) {
    tape.record("bmm", {a, b}, out, [a, b, batch, m, n, k, transpose_b](std::span<const T> g) mutable {
      for (std::size_t s = 0; s < batch; ++s) {
        const T* gp = g.data() + s * m * n;
        const T* ap = a.data().data() + s * m * k;
        const T* bp = b.data().data() + s * k * n;
        if (a.requires_grad()) {
          T* gap = Tape<T>::grad_of(a).data() + s * m * k;
          if (transpose_b) {
            kernels::gemm_nn(m, k, n, gp, bp, gap, true);
          } else {
            kernels::gemm_nt(m, k, n, gp, bp, gap, true);
          }
        }
        if (b.requires_grad()) {
          T* gbp = Tape<T>::grad_of(b).data() + s * k * n;
          if (transpose_b) {
            kernels::gemm_tn(n, k, m, gp, ap, gbp, true);
          } else {
            kernels::gemm_tn(k, n, m, ap, gp, gbp, true);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::dim_error("add", a.shape(), b.shape());
  detail::check_finite(tape, "add", a);
  detail::check_finite(tape, "add", b);
  Tensor<T> out(a.shape());
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (tape.needs_grad({&a, &b})) {
    tape.record("add", {a, b}, out, [a, b](std::span<const T> g) mutable {
      for (const Tensor<T>* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = Tape<T>::grad_of(*t);
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

// x[..., N] + bias[N], broadcast over leading dims.
template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || x.last_dim() != bias.dim(0)) {
    detail::dim_error("add_bias", x.shape(), bias.shape());
  }
  const std::size_t n = bias.dim(0);
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto bv = bias.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + bv[i % n];
  if (tape.needs_grad({&x, &bias})) {
    tape.record("add", {x, bias}, out, [x, bias, n](std::span<const T> g) mutable {
      if (x.requires_grad()) {
        auto gx = Tape<T>::grad_of(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = Tape<T>::grad_of(bias);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  return detail::unary(
      tape, "scale", x, [factor](T v) { return v * factor; },
      [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::dim_error("elementwise_mul", a.shape(), b.shape());
  detail::check_finite(tape, "elementwise_mul", a);
  detail::check_finite(tape, "elementwise_mul", b);
  Tensor<T> out(a.shape());
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (tape.needs_grad({&a, &b})) {
    tape.record("elementwise_mul", {a, b}, out, [a, b](std::span<const T> g) mutable {
      if (a.requires_grad()) {
        auto ga = Tape<T>::grad_of(a);
        auto bv = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = Tape<T>::grad_of(b);
        auto av = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

// Rows of table[V, D] selected by ids -> [ids.size(), D].
template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  Tensor<T> out(Shape{ids.size(), d});
  auto tv = table.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(ids[r]) + " outside table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                ov.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  if (tape.needs_grad({&table})) {
    std::vector<int> saved(ids.begin(), ids.end());
    tape.record("embedding_lookup", {table}, out, [table, saved, d](std::span<const T> g) mutable {
      auto gt = Tape<T>::grad_of(table);
      for (std::size_t r = 0; r < saved.size(); ++r) {
        const std::size_t base = static_cast<std::size_t>(saved[r]) * d;
        for (std::size_t j = 0; j < d; ++j) gt[base + j] += g[r * d + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_lastdim(Tape<T>& tape, const Tensor<T>& x) {
  detail::check_finite(tape, "softmax_lastdim", x);
  const std::size_t n = x.last_dim();
  const std::size_t rows = x.numel() / n;
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T* o = ov.data() + r * n;
    T mx = *std::max_element(in, in + n);
    T sum{0};
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
  }
  if (tape.needs_grad({&x})) {
    tape.record("softmax_lastdim", {x}, out, [x, out, rows, n](std::span<const T> g) mutable {
      auto gx = Tape<T>::grad_of(x);
      auto y = out.data();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return out;
}

// (x - mean) / sqrt(var + eps) * gamma + beta over the last dim, population variance.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t n = x.last_dim();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != n || beta.dim(0) != n) {
    detail::dim_error("layer_norm", x.shape(), gamma.shape());
  }
  detail::check_finite(tape, "layer_norm", x);
  const std::size_t rows = x.numel() / n;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * n;
    T mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(n);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mean) * is;
      ov[r * n + j] = xhat[r * n + j] * gv[j] + bv[j];
    }
  }
  if (tape.needs_grad({&x, &gamma, &beta})) {
    tape.record("layer_norm", {x, gamma, beta}, out,
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                 n](std::span<const T> g) mutable {
                  auto gv = gamma.data();
                  if (gamma.requires_grad() || beta.requires_grad()) {
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < n; ++j) {
                        if (gamma.requires_grad()) Tape<T>::grad_of(gamma)[j] += g[r * n + j] * xhat[r * n + j];
                        if (beta.requires_grad()) Tape<T>::grad_of(beta)[j] += g[r * n + j];
                      }
                    }
                  }
                  if (!x.requires_grad()) return;
                  auto gx = Tape<T>::grad_of(x);
                  const T inv_n = T{1} / static_cast<T>(n);
                  for (std::size_t r = 0; r < rows; ++r) {
                    T sum_dy{0}, sum_dy_xhat{0};
                    for (std::size_t j = 0; j < n; ++j) {
                      const T dy = g[r * n + j] * gv[j];
                      sum_dy += dy;
                      sum_dy_xhat += dy * xhat[r * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                      const T dy = g[r * n + j] * gv[j];
                      gx[r * n + j] += inv_std[r] * (dy - inv_n * sum_dy - xhat[r * n + j] * inv_n * sum_dy_xhat);
                    }
                  }
                });
  }
  return out;
}

// Exact gelu: x * Phi(x).
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return detail::unary(
      tape, "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  return detail::unary(
      tape, "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

// Inverted dropout: survivors scaled by 1/(1-p) in training mode, identity in eval mode.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ContractError("dropout: p must lie in [0,1), got " + std::to_string(p));
  if (!tape.training() || p == 0.0) return x;
  const std::uint64_t node = tape.next_random_node();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = tape.uniform(node, i) >= p ? keep_scale : T{0};
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * mask[i];
  if (tape.needs_grad({&x})) {
    tape.record("dropout", {x}, out, [x, mask = std::move(mask)](std::span<const T> g) mutable {
      auto gx = Tape<T>::grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  if (tape.needs_grad({&x})) {
    tape.record("sum", {x}, out, [x](std::span<const T> g) mutable {
      auto gx = Tape<T>::grad_of(x);
      for (auto& v : gx) v += g[0];
    });
  }
  return out;
}

// [B*T, H*Dh] -> [B*H, T, Dh]
template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t batch, std::size_t len,
                      std::size_t heads) {
  if (x.rank() != 2 || x.dim(0) != batch * len || x.dim(1) % heads != 0) {
    throw DimensionError("split_heads: cannot split " + shape_str(x.shape()) + " into " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t dh = x.dim(1) / heads, d = x.dim(1);
  Tensor<T> out(Shape{batch * heads, len, dh});
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((b * len + t) * d + h * dh), dh,
                    ov.begin() + static_cast<std::ptrdiff_t>(((b * heads + h) * len + t) * dh));
  if (tape.needs_grad({&x})) {
    tape.record("split_heads", {x}, out, [x, batch, len, heads, dh, d](std::span<const T> g) mutable {
      auto gx = Tape<T>::grad_of(x);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t j = 0; j < dh; ++j)
              gx[(b * len + t) * d + h * dh + j] += g[((b * heads + h) * len + t) * dh + j];
    });
  }
  return out;
}

// [B*H, T, Dh] -> [B*T, H*Dh]
template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t batch, std::size_t heads) {
  if (x.rank() != 3 || x.dim(0) != batch * heads) {
    throw DimensionError("merge_heads: cannot merge " + shape_str(x.shape()));
  }
  const std::size_t len = x.dim(1), dh = x.dim(2), d = heads * dh;
  Tensor<T> out(Shape{batch * len, d});
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(((b * heads + h) * len + t) * dh), dh,
                    ov.begin() + static_cast<std::ptrdiff_t>((b * len + t) * d + h * dh));
  if (tape.needs_grad({&x})) {
    tape.record("merge_heads", {x}, out, [x, batch, len, heads, dh, d](std::span<const T> g) mutable {
      auto gx = Tape<T>::grad_of(x);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t j = 0; j < dh; ++j)
              gx[((b * heads + h) * len + t) * dh + j] += g[(b * len + t) * d + h * dh + j];
    });
  }
  return out;
}

// Adds a constant additive mask [B, Tq, Tk] to attention scores [B*H, Tq, Tk].
template <typename T>
Tensor<T> add_attention_mask(Tape<T>& tape, const Tensor<T>& scores, std::type_identity_t<std::span<const T>> mask,
                             std::size_t heads) {
  const std::size_t block = scores.dim(1) * scores.dim(2);
  const std::size_t batch = scores.dim(0) / heads;
  if (mask.size() != batch * block) {
    throw DimensionError("attention mask: " + std::to_string(mask.size()) +
                         " entries for scores " + shape_str(scores.shape()));
  }
  Tensor<T> out(scores.shape());
  auto sv = scores.data();
  auto ov = out.data();
  for (std::size_t s = 0; s < scores.dim(0); ++s) {
    const T* m = mask.data() + (s / heads) * block;
    for (std::size_t i = 0; i < block; ++i) ov[s * block + i] = sv[s * block + i] + m[i];
  }
  if (tape.needs_grad({&scores})) {
    tape.record("add", {scores}, out, [scores](std::span<const T> g) mutable {
      auto gs = Tape<T>::grad_of(scores);
      for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
    });
  }
  return out;
}

}  // namespace graftmt
