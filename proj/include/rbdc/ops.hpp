// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations recorded on a Tape.
//
// Reductions use a fixed accumulation order, so repeated runs with the same
// inputs are bit-identical. Every forward result is checked for NaN/Inf.
// Broadcasting is limited to bias-add and scalar scaling.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rbdc/autograd.hpp"
#include "rbdc/tensor.hpp"

namespace rbdc::ops {

enum class Mode { train, eval };

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

template <typename T>
Var finish(Tape<T>& tape, Tensor<T> out, std::initializer_list<Var> inputs, typename Tape<T>::Backward fn,
           const char* op) {
    require_finite(out, op);
    return tape.push(std::move(out), inputs, std::move(fn));
}

// c[m,n] = sum_k a[m,k] * b[k,n]
template <typename T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* brow = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Dot product with a fixed pairwise reduction tree: ranges longer than the
// leaf size split at their midpoint. The split depends only on the length, so
// the sum over the first half of a 2m-vector is computed exactly as a
// standalone m-vector sum, and swapping the halves yields the same bits.
template <typename T>
T pairwise_dot(const T* a, const T* b, std::size_t n) {
    constexpr std::size_t leaf = 8;
    if (n <= leaf) {
        T acc = 0;
        for (std::size_t p = 0; p < n; ++p) acc += a[p] * b[p];
        return acc;
    }
    const std::size_t h = n / 2;
    return pairwise_dot(a, b, h) + pairwise_dot(a + h, b + h, n - h);
}

// c[m,n] = sum_k a[m,k] * b[n,k]
template <typename T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] += pairwise_dot(arow, b.data() + j * k, k);
    }
}

// c[k,n] = sum_m a[m,k] * b[m,n]
template <typename T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* brow = b.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            T* crow = c.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace detail

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    if (av.shape() != bv.shape())
        throw ShapeError("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor<T> out = av;
    auto o = out.data();
    auto bd = bv.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
    return detail::finish(tape, std::move(out), {a, b},
                          [a, b](Tape<T>& t, const Tensor<T>& g) {
                              t.accumulate(a, g);
                              t.accumulate(b, g);
                          },
                          "add");
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    if (av.shape() != bv.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor<T> out = av;
    auto o = out.data();
    auto bd = bv.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
    return detail::finish(tape, std::move(out), {a, b},
                          [a, b](Tape<T>& t, const Tensor<T>& g) {
                              const auto& av = t.value(a);
                              const auto& bv = t.value(b);
                              if (t.requires_grad(a)) {
                                  Tensor<T> ga = g;
                                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
                                  t.accumulate(a, ga);
                              }
                              if (t.requires_grad(b)) {
                                  Tensor<T> gb = g;
                                  for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
                                  t.accumulate(b, gb);
                              }
                          },
                          "mul");
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T s) {
    Tensor<T> out = tape.value(a);
    for (auto& v : out.data()) v *= s;
    return detail::finish(tape, std::move(out), {a},
                          [a, s](Tape<T>& t, const Tensor<T>& g) {
                              Tensor<T> ga = g;
                              for (auto& v : ga.data()) v *= s;
                              t.accumulate(a, ga);
                          },
                          "scale");
}

// x[rows, cols] + b[cols]
template <typename T>
Var add_bias(Tape<T>& tape, Var x, Var b) {
    const auto& xv = tape.value(x);
    const auto& bv = tape.value(b);
    detail::require_rank(xv.shape(), 2, "add_bias");
    if (bv.size() != xv.dim(1))
        throw ShapeError("add_bias: bias length " + std::to_string(bv.size()) + " vs " + std::to_string(xv.dim(1)));
    Tensor<T> out = xv;
    const std::size_t rows = xv.dim(0), cols = xv.dim(1);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += bv[c];
    return detail::finish(tape, std::move(out), {x, b},
                          [x, b, rows, cols](Tape<T>& t, const Tensor<T>& g) {
                              t.accumulate(x, g);
                              if (t.requires_grad(b)) {
                                  Tensor<T> gb(Shape{cols});
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t c = 0; c < cols; ++c) gb[c] += g.at(r, c);
                                  t.accumulate(b, gb.reshaped(t.value(b).shape()));
                              }
                          },
                          "add_bias");
}

// a[m,k] · b[k,n]
template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    detail::require_rank(av.shape(), 2, "matmul");
    detail::require_rank(bv.shape(), 2, "matmul");
    if (av.dim(1) != bv.dim(0))
        throw ShapeError("matmul: inner dimensions differ " + shape_str(av.shape()) + " · " + shape_str(bv.shape()));
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out(Shape{m, n});
    detail::gemm_nn<T>(av.data(), bv.data(), out.data(), m, k, n);
    return detail::finish(tape, std::move(out), {a, b},
                          [a, b, m, k, n](Tape<T>& t, const Tensor<T>& g) {
                              if (t.requires_grad(a)) {
                                  Tensor<T> ga(Shape{m, k});
                                  detail::gemm_nt<T>(g.data(), t.value(b).data(), ga.data(), m, n, k);
                                  t.accumulate(a, ga);
                              }
                              if (t.requires_grad(b)) {
                                  Tensor<T> gb(Shape{k, n});
                                  detail::gemm_tn<T>(t.value(a).data(), g.data(), gb.data(), m, k, n);
                                  t.accumulate(b, gb);
                              }
                          },
                          "matmul");
}

// y = x·Wᵀ + b with x[N, in], W[out, in], b[out] (b may be an invalid Var).
template <typename T>
Var linear(Tape<T>& tape, Var x, Var w, Var b = {}) {
    const auto& xv = tape.value(x);
    const auto& wv = tape.value(w);
    detail::require_rank(xv.shape(), 2, "linear input");
    detail::require_rank(wv.shape(), 2, "linear weight");
    const std::size_t n = xv.dim(0), in = xv.dim(1), outd = wv.dim(0);
    if (wv.dim(1) != in)
        throw ShapeError("linear: weight " + shape_str(wv.shape()) + " does not accept input " + shape_str(xv.shape()));
    Tensor<T> out(Shape{n, outd});
    if (b.valid()) {
        const auto& bv = tape.value(b);
        if (bv.size() != outd) throw ShapeError("linear: bias length mismatch");
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t o = 0; o < outd; ++o) out.at(r, o) = bv[o];
    }
    detail::gemm_nt<T>(xv.data(), wv.data(), out.data(), n, in, outd);
    return detail::finish(tape, std::move(out), {x, w, b},
                          [x, w, b, n, in, outd](Tape<T>& t, const Tensor<T>& g) {
                              if (t.requires_grad(x)) {
                                  Tensor<T> gx(Shape{n, in});
                                  detail::gemm_nn<T>(g.data(), t.value(w).data(), gx.data(), n, outd, in);
                                  t.accumulate(x, gx);
                              }
                              if (t.requires_grad(w)) {
                                  Tensor<T> gw(Shape{outd, in});
                                  detail::gemm_tn<T>(g.data(), t.value(x).data(), gw.data(), n, outd, in);
                                  t.accumulate(w, gw);
                              }
                              if (b.valid() && t.requires_grad(b)) {
                                  Tensor<T> gb(Shape{outd});
                                  for (std::size_t r = 0; r < n; ++r)
                                      for (std::size_t o = 0; o < outd; ++o) gb[o] += g.at(r, o);
                                  t.accumulate(b, gb);
                              }
                          },
                          "linear");
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
    Tensor<T> out = tape.value(x);
    for (auto& v : out.data()) v = v > T{0} ? v : T{0};
    return detail::finish(tape, std::move(out), {x},
                          [x](Tape<T>& t, const Tensor<T>& g) {
                              const auto& xv = t.value(x);
                              Tensor<T> gx = g;
                              for (std::size_t i = 0; i < gx.size(); ++i)
                                  if (!(xv[i] > T{0})) gx[i] = T{0};
                              t.accumulate(x, gx);
                          },
                          "relu");
}

// Exact (erf-based) GELU.
template <typename T>
Var gelu(Tape<T>& tape, Var x) {
    const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    Tensor<T> out = tape.value(x);
    for (auto& v : out.data()) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
    return detail::finish(tape, std::move(out), {x},
                          [x, inv_sqrt2](Tape<T>& t, const Tensor<T>& g) {
                              const T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
                              const auto& xv = t.value(x);
                              Tensor<T> gx = g;
                              for (std::size_t i = 0; i < gx.size(); ++i) {
                                  const T u = xv[i];
                                  const T cdf = T(0.5) * (T(1) + std::erf(u * inv_sqrt2));
                                  const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * u * u);
                                  gx[i] *= cdf + u * pdf;
                              }
                              t.accumulate(x, gx);
                          },
                          "gelu");
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
    T acc = 0;
    for (T v : tape.value(x).data()) acc += v;
    return detail::finish(tape, Tensor<T>::scalar(acc), {x},
                          [x](Tape<T>& t, const Tensor<T>& g) {
                              t.accumulate(x, Tensor<T>(t.value(x).shape(), g[0]));
                          },
                          "sum");
}

template <typename T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
    Tensor<T> out = tape.value(x).reshaped(std::move(shape));
    return detail::finish(tape, std::move(out), {x},
                          [x](Tape<T>& t, const Tensor<T>& g) { t.accumulate(x, g.reshaped(t.value(x).shape())); },
                          "reshape");
}

struct Conv2dGeometry {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
    return (in + 2 * pad - k) / stride + 1;
}

// Cross-correlation. x[N, C, H, W], kernel[O, C, K, K], bias[O] (optional).
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var kernel, Var bias, Conv2dGeometry geo) {
    const auto& xv = tape.value(x);
    const auto& kv = tape.value(kernel);
    detail::require_rank(xv.shape(), 4, "conv2d input");
    detail::require_rank(kv.shape(), 4, "conv2d kernel");
    const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t o = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
    if (kv.dim(1) != c)
        throw ShapeError("conv2d: kernel " + shape_str(kv.shape()) + " does not accept input " + shape_str(xv.shape()));
    if (geo.stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t ho = conv_out_extent(h, kh, geo.stride, geo.padding);
    const std::size_t wo = conv_out_extent(w, kw, geo.stride, geo.padding);
    const auto pad = static_cast<std::ptrdiff_t>(geo.padding);
    const auto stride = static_cast<std::ptrdiff_t>(geo.stride);

    Tensor<T> out(Shape{n, o, ho, wo});
    if (bias.valid()) {
        const auto& bv = tape.value(bias);
        if (bv.size() != o) throw ShapeError("conv2d: bias length mismatch");
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t oc = 0; oc < o; ++oc)
                for (std::size_t y = 0; y < ho; ++y)
                    for (std::size_t xo = 0; xo < wo; ++xo) out.at(b, oc, y, xo) = bv[oc];
    }
    // Visits every (output row, tap) pair; [lo, hi) is the range of output
    // columns whose input column xo·stride + kx − pad lies inside the image.
    auto for_each_row = [=](auto&& fn) {
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t oc = 0; oc < o; ++oc)
                for (std::size_t ic = 0; ic < c; ++ic)
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - pad;
                            std::size_t lo = 0, hi = 0;
                            for (std::size_t xo = 0; xo < wo; ++xo) {
                                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo) * stride + off;
                                if (ix < 0) lo = xo + 1;
                                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) hi = xo + 1;
                            }
                            if (lo >= hi) continue;
                            for (std::size_t y = 0; y < ho; ++y) {
                                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) * stride +
                                                          static_cast<std::ptrdiff_t>(ky) - pad;
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                const std::size_t ix0 = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(lo) * stride + off);
                                fn(b, oc, ic, ky, kx, y, static_cast<std::size_t>(iy), lo, hi, ix0);
                            }
                        }
    };
    {
        const auto su = static_cast<std::size_t>(stride);
        for_each_row([&](auto b, auto oc, auto ic, auto ky, auto kx, auto y, auto iy, auto lo, auto hi, auto ix0) {
            const T k = kv.at(oc, ic, ky, kx);
            T* dst = &out.at(b, oc, y, 0);
            const T* src = &xv.at(b, ic, iy, 0);
            for (std::size_t xo = lo, ix = ix0; xo < hi; ++xo, ix += su) dst[xo] += src[ix] * k;
        });
    }

    return detail::finish(
        tape, std::move(out), {x, kernel, bias},
        [x, kernel, bias, for_each_row, n, o, ho, wo, stride](Tape<T>& t, const Tensor<T>& g) {
            const auto& xv = t.value(x);
            const auto& kv = t.value(kernel);
            const bool gx_needed = t.requires_grad(x);
            const bool gk_needed = t.requires_grad(kernel);
            const auto su = static_cast<std::size_t>(stride);
            Tensor<T> gx = gx_needed ? Tensor<T>::zeros(xv.shape()) : Tensor<T>{};
            Tensor<T> gk = gk_needed ? Tensor<T>::zeros(kv.shape()) : Tensor<T>{};
            if (gx_needed || gk_needed) {
                for_each_row([&](auto b, auto oc, auto ic, auto ky, auto kx, auto y, auto iy, auto lo, auto hi,
                                 auto ix0) {
                    const T* go = &g.at(b, oc, y, 0);
                    if (gx_needed) {
                        const T k = kv.at(oc, ic, ky, kx);
                        T* dx = &gx.at(b, ic, iy, 0);
                        for (std::size_t xo = lo, ix = ix0; xo < hi; ++xo, ix += su) dx[ix] += go[xo] * k;
                    }
                    if (gk_needed) {
                        const T* src = &xv.at(b, ic, iy, 0);
                        T acc = 0;
                        for (std::size_t xo = lo, ix = ix0; xo < hi; ++xo, ix += su) acc += go[xo] * src[ix];
                        gk.at(oc, ic, ky, kx) += acc;
                    }
                });
            }
            if (gx_needed) t.accumulate(x, gx);
            if (gk_needed) t.accumulate(kernel, gk);
            if (bias.valid() && t.requires_grad(bias)) {
                Tensor<T> gb(Shape{o});
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t oc = 0; oc < o; ++oc)
                        for (std::size_t y = 0; y < ho; ++y)
                            for (std::size_t xo = 0; xo < wo; ++xo) gb[oc] += g.at(b, oc, y, xo);
                t.accumulate(bias, gb);
            }
        },
        "conv2d");
}

template <typename T>
struct BatchNormConfig {
    T momentum = T(0.1);
    T eps = T(1e-5);
};

// Per-channel normalization of x[N, C, H, W] or x[N, C].
// train: batch statistics, running stats updated in place (unbiased variance).
// eval:  stored running statistics; a fixed affine map per channel.
template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var gamma, Var beta, Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
               BatchNormConfig<T> cfg = {}) {
    const auto& xv = tape.value(x);
    if (xv.rank() != 4 && xv.rank() != 2) throw ShapeError("batch_norm: expected rank 2 or 4, got " + shape_str(xv.shape()));
    const std::size_t n = xv.dim(0), c = xv.dim(1);
    const std::size_t hw = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
    const std::size_t count = n * hw;
    if (tape.value(gamma).size() != c || tape.value(beta).size() != c)
        throw ShapeError("batch_norm: affine parameters do not match channel count " + std::to_string(c));
    if (running_mean.empty() || running_var.empty())
        throw StateError("batch_norm: running statistics are uninitialized");
    if (running_mean.size() != c || running_var.size() != c)
        throw ShapeError("batch_norm: running statistics do not match channel count " + std::to_string(c));

    auto idx = [c, hw](std::size_t b, std::size_t ch, std::size_t s) { return (b * c + ch) * hw + s; };

    std::vector<T> mean(c), invstd(c);
    if (mode == Mode::train) {
        if (count < 2) throw ShapeError("batch_norm: train mode needs more than one value per channel");
        for (std::size_t ch = 0; ch < c; ++ch) {
            T acc = 0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t s = 0; s < hw; ++s) acc += xv[idx(b, ch, s)];
            const T mu = acc / static_cast<T>(count);
            T sq = 0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t s = 0; s < hw; ++s) {
                    const T d = xv[idx(b, ch, s)] - mu;
                    sq += d * d;
                }
            const T var = sq / static_cast<T>(count);
            mean[ch] = mu;
            invstd[ch] = T(1) / std::sqrt(var + cfg.eps);
            const T unbiased = sq / static_cast<T>(count - 1);
            running_mean[ch] = (T(1) - cfg.momentum) * running_mean[ch] + cfg.momentum * mu;
            running_var[ch] = (T(1) - cfg.momentum) * running_var[ch] + cfg.momentum * unbiased;
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = running_mean[ch];
            invstd[ch] = T(1) / std::sqrt(running_var[ch] + cfg.eps);
        }
    }

    const auto& gv = tape.value(gamma);
    const auto& bv = tape.value(beta);
    Tensor<T> xhat(xv.shape());
    Tensor<T> out(xv.shape());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t s = 0; s < hw; ++s) {
                const std::size_t i = idx(b, ch, s);
                xhat[i] = (xv[i] - mean[ch]) * invstd[ch];
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }

    return detail::finish(
        tape, std::move(out), {x, gamma, beta},
        [x, gamma, beta, mode, xhat = std::move(xhat), invstd = std::move(invstd), n, c, hw, count,
         idx](Tape<T>& t, const Tensor<T>& g) {
            const auto& gv = t.value(gamma);
            std::vector<T> sum_g(c, T{0}), sum_gx(c, T{0});
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t s = 0; s < hw; ++s) {
                        const std::size_t i = idx(b, ch, s);
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
            if (t.requires_grad(gamma)) t.accumulate(gamma, Tensor<T>(t.value(gamma).shape(), sum_gx));
            if (t.requires_grad(beta)) t.accumulate(beta, Tensor<T>(t.value(beta).shape(), sum_g));
            if (!t.requires_grad(x)) return;
            Tensor<T> gx(t.value(x).shape());
            const T m = static_cast<T>(count);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t s = 0; s < hw; ++s) {
                        const std::size_t i = idx(b, ch, s);
                        if (mode == Mode::train) {
                            // dxhat = g·γ; dx = invstd/M · (M·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                            gx[i] = gv[ch] * invstd[ch] / m * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                        } else {
                            gx[i] = g[i] * gv[ch] * invstd[ch];
                        }
                    }
            t.accumulate(x, gx);
        },
        "batch_norm");
}

// Row-wise normalization of x[rows, D]. With groups > 1 each row is split into
// equal contiguous segments normalized independently; the affine map spans D.
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, std::size_t groups = 1, T eps = T(1e-6)) {
    const auto& xv = tape.value(x);
    detail::require_rank(xv.shape(), 2, "layer_norm");
    const std::size_t rows = xv.dim(0), d = xv.dim(1);
    if (groups == 0 || d % groups != 0)
        throw ShapeError("layer_norm: width " + std::to_string(d) + " not divisible into " + std::to_string(groups) +
                         " groups");
    if (tape.value(gamma).size() != d || tape.value(beta).size() != d)
        throw ShapeError("layer_norm: affine parameters do not match width " + std::to_string(d));
    const std::size_t gs = d / groups;
    const auto& gv = tape.value(gamma);
    const auto& bv = tape.value(beta);
    Tensor<T> xhat(xv.shape());
    std::vector<T> invstd(rows * groups);
    Tensor<T> out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = r * d + gi * gs;
            T acc = 0;
            for (std::size_t j = 0; j < gs; ++j) acc += xv[base + j];
            const T mu = acc / static_cast<T>(gs);
            T sq = 0;
            for (std::size_t j = 0; j < gs; ++j) {
                const T dv = xv[base + j] - mu;
                sq += dv * dv;
            }
            const T is = T(1) / std::sqrt(sq / static_cast<T>(gs) + eps);
            invstd[r * groups + gi] = is;
            for (std::size_t j = 0; j < gs; ++j) {
                xhat[base + j] = (xv[base + j] - mu) * is;
                out[base + j] = gv[gi * gs + j] * xhat[base + j] + bv[gi * gs + j];
            }
        }
    return detail::finish(
        tape, std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), rows, d, groups,
         gs](Tape<T>& t, const Tensor<T>& g) {
            const auto& gv = t.value(gamma);
            if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                Tensor<T> gg(t.value(gamma).shape()), gb(t.value(beta).shape());
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                        gb[j] += g[r * d + j];
                    }
                t.accumulate(gamma, gg);
                t.accumulate(beta, gb);
            }
            if (!t.requires_grad(x)) return;
            Tensor<T> gx(t.value(x).shape());
            const T m = static_cast<T>(gs);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t gi = 0; gi < groups; ++gi) {
                    const std::size_t base = r * d + gi * gs;
                    T s1 = 0, s2 = 0;
                    for (std::size_t j = 0; j < gs; ++j) {
                        const T dxh = g[base + j] * gv[gi * gs + j];
                        s1 += dxh;
                        s2 += dxh * xhat[base + j];
                    }
                    const T is = invstd[r * groups + gi];
                    for (std::size_t j = 0; j < gs; ++j) {
                        const T dxh = g[base + j] * gv[gi * gs + j];
                        gx[base + j] = is / m * (m * dxh - s1 - xhat[base + j] * s2);
                    }
                }
            t.accumulate(x, gx);
        },
        "layer_norm");
}

// Multi-head scaled dot-product self-attention.
// qkv[N·T, 3·D] packs [Q | K | V] column sections; head h owns columns
// [h·hd, (h+1)·hd) of each section. Output[N·T, D] concatenates head outputs.
template <typename T>
Var attention(Tape<T>& tape, Var qkv, std::size_t batch, std::size_t tokens, std::size_t heads) {
    const auto& qv = tape.value(qkv);
    detail::require_rank(qv.shape(), 2, "attention");
    if (qv.dim(0) != batch * tokens) throw ShapeError("attention: rows do not equal batch × tokens");
    if (qv.dim(1) % 3 != 0) throw ShapeError("attention: packed width not divisible by 3");
    const std::size_t d = qv.dim(1) / 3;
    if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by head count");
    const std::size_t hd = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const std::size_t ld = 3 * d;

    // probs[((n·heads + h)·T + i)·T + j]
    std::vector<T> probs(batch * heads * tokens * tokens);
    Tensor<T> out(Shape{batch * tokens, d});
    const T* q = qv.data().data();
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t h = 0; h < heads; ++h) {
            T* p = probs.data() + (n * heads + h) * tokens * tokens;
            for (std::size_t i = 0; i < tokens; ++i) {
                const T* qi = q + (n * tokens + i) * ld + h * hd;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < tokens; ++j) {
                    const T* kj = q + (n * tokens + j) * ld + d + h * hd;
                    T s = 0;
                    for (std::size_t e = 0; e < hd; ++e) s += qi[e] * kj[e];
                    s *= scale;
                    p[i * tokens + j] = s;
                    mx = std::max(mx, s);
                }
                T z = 0;
                for (std::size_t j = 0; j < tokens; ++j) {
                    p[i * tokens + j] = std::exp(p[i * tokens + j] - mx);
                    z += p[i * tokens + j];
                }
                for (std::size_t j = 0; j < tokens; ++j) p[i * tokens + j] /= z;
                T* oi = out.data().data() + (n * tokens + i) * d + h * hd;
                for (std::size_t j = 0; j < tokens; ++j) {
                    const T* vj = q + (n * tokens + j) * ld + 2 * d + h * hd;
                    const T pij = p[i * tokens + j];
                    for (std::size_t e = 0; e < hd; ++e) oi[e] += pij * vj[e];
                }
            }
        }

    return detail::finish(
        tape, std::move(out), {qkv},
        [qkv, probs = std::move(probs), batch, tokens, heads, d, hd, scale, ld](Tape<T>& t, const Tensor<T>& g) {
            const T* q = t.value(qkv).data().data();
            Tensor<T> gq(t.value(qkv).shape());
            T* gqd = gq.data().data();
            std::vector<T> dp(tokens);
            for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t h = 0; h < heads; ++h) {
                    const T* p = probs.data() + (n * heads + h) * tokens * tokens;
                    for (std::size_t i = 0; i < tokens; ++i) {
                        const T* gi = g.data().data() + (n * tokens + i) * d + h * hd;
                        // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
                        T dot = 0;
                        for (std::size_t j = 0; j < tokens; ++j) {
                            const T* vj = q + (n * tokens + j) * ld + 2 * d + h * hd;
                            T* gvj = gqd + (n * tokens + j) * ld + 2 * d + h * hd;
                            const T pij = p[i * tokens + j];
                            T s = 0;
                            for (std::size_t e = 0; e < hd; ++e) {
                                gvj[e] += pij * gi[e];
                                s += gi[e] * vj[e];
                            }
                            dp[j] = s;
                            dot += pij * s;
                        }
                        // dS_ij = p_ij (dP_ij − Σ_k p_ik dP_ik), then through the scaled dot product.
                        const T* qi = q + (n * tokens + i) * ld + h * hd;
                        T* gqi = gqd + (n * tokens + i) * ld + h * hd;
                        for (std::size_t j = 0; j < tokens; ++j) {
                            const T ds = p[i * tokens + j] * (dp[j] - dot) * scale;
                            const T* kj = q + (n * tokens + j) * ld + d + h * hd;
                            T* gkj = gqd + (n * tokens + j) * ld + d + h * hd;
                            for (std::size_t e = 0; e < hd; ++e) {
                                gqi[e] += ds * kj[e];
                                gkj[e] += ds * qi[e];
                            }
                        }
                    }
                }
            t.accumulate(qkv, gq);
        },
        "attention");
}

// x[N, C, H, W] → [N, C]
template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x);
    detail::require_rank(xv.shape(), 4, "global_avg_pool");
    const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    Tensor<T> out(Shape{n, c});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            T acc = 0;
            for (std::size_t s = 0; s < hw; ++s) acc += xv[(b * c + ch) * hw + s];
            out.at(b, ch) = acc / static_cast<T>(hw);
        }
    return detail::finish(tape, std::move(out), {x},
                          [x, n, c, hw](Tape<T>& t, const Tensor<T>& g) {
                              Tensor<T> gx(t.value(x).shape());
                              for (std::size_t b = 0; b < n; ++b)
                                  for (std::size_t ch = 0; ch < c; ++ch) {
                                      const T v = g.at(b, ch) / static_cast<T>(hw);
                                      for (std::size_t s = 0; s < hw; ++s) gx[(b * c + ch) * hw + s] = v;
                                  }
                              t.accumulate(x, gx);
                          },
                          "global_avg_pool");
}

// Patch-embedding output [N, D, h, w] → token matrix [N·(h·w + 1), D]:
// token 0 of each sample is the class token, the rest are patches in raster
// order; the positional embedding [h·w + 1, D] is added to every sample.
template <typename T>
Var embed_tokens(Tape<T>& tape, Var patches, Var class_token, Var pos_embed) {
    const auto& pv = tape.value(patches);
    detail::require_rank(pv.shape(), 4, "embed_tokens");
    const std::size_t n = pv.dim(0), d = pv.dim(1), hw = pv.dim(2) * pv.dim(3), tokens = hw + 1;
    const auto& cv = tape.value(class_token);
    const auto& posv = tape.value(pos_embed);
    if (cv.size() != d) throw ShapeError("embed_tokens: class token width mismatch");
    if (posv.size() != tokens * d) throw ShapeError("embed_tokens: positional embedding shape mismatch");
    Tensor<T> out(Shape{n * tokens, d});
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t e = 0; e < d; ++e) out.at(b * tokens, e) = cv[e] + posv[e];
        for (std::size_t s = 0; s < hw; ++s)
            for (std::size_t e = 0; e < d; ++e)
                out.at(b * tokens + 1 + s, e) = pv[(b * d + e) * hw + s] + posv[(1 + s) * d + e];
    }
    return detail::finish(
        tape, std::move(out), {patches, class_token, pos_embed},
        [patches, class_token, pos_embed, n, d, hw, tokens](Tape<T>& t, const Tensor<T>& g) {
            if (t.requires_grad(patches)) {
                Tensor<T> gp(t.value(patches).shape());
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t s = 0; s < hw; ++s)
                        for (std::size_t e = 0; e < d; ++e) gp[(b * d + e) * hw + s] = g.at(b * tokens + 1 + s, e);
                t.accumulate(patches, gp);
            }
            if (t.requires_grad(class_token)) {
                Tensor<T> gc(t.value(class_token).shape());
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t e = 0; e < d; ++e) gc[e] += g.at(b * tokens, e);
                t.accumulate(class_token, gc);
            }
            if (t.requires_grad(pos_embed)) {
                Tensor<T> gpos(t.value(pos_embed).shape());
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t k = 0; k < tokens; ++k)
                        for (std::size_t e = 0; e < d; ++e) gpos[k * d + e] += g.at(b * tokens + k, e);
                t.accumulate(pos_embed, gpos);
            }
        },
        "embed_tokens");
}

// x[N·T, D] → rows {n·T + index}, shape [N, D]
template <typename T>
Var select_token(Tape<T>& tape, Var x, std::size_t tokens, std::size_t index) {
    const auto& xv = tape.value(x);
    detail::require_rank(xv.shape(), 2, "select_token");
    if (tokens == 0 || xv.dim(0) % tokens != 0 || index >= tokens)
        throw ShapeError("select_token: bad token layout");
    const std::size_t n = xv.dim(0) / tokens, d = xv.dim(1);
    Tensor<T> out(Shape{n, d});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t e = 0; e < d; ++e) out.at(b, e) = xv.at(b * tokens + index, e);
    return detail::finish(tape, std::move(out), {x},
                          [x, n, d, tokens, index](Tape<T>& t, const Tensor<T>& g) {
                              Tensor<T> gx(t.value(x).shape());
                              for (std::size_t b = 0; b < n; ++b)
                                  for (std::size_t e = 0; e < d; ++e) gx.at(b * tokens + index, e) = g.at(b, e);
                              t.accumulate(x, gx);
                          },
                          "select_token");
}

// Mean softmax cross-entropy of logits[N, C] against integer labels.
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels) {
    const auto& lv = tape.value(logits);
    detail::require_rank(lv.shape(), 2, "softmax_cross_entropy");
    const std::size_t n = lv.dim(0), c = lv.dim(1);
    if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count does not match batch");
    Tensor<T> probs(lv.shape());
    T loss = 0;
    for (std::size_t b = 0; b < n; ++b) {
        const int y = labels[b];
        if (y < 0 || static_cast<std::size_t>(y) >= c) throw ShapeError("softmax_cross_entropy: label out of range");
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, lv.at(b, k));
        T z = 0;
        for (std::size_t k = 0; k < c; ++k) {
            probs.at(b, k) = std::exp(lv.at(b, k) - mx);
            z += probs.at(b, k);
        }
        for (std::size_t k = 0; k < c; ++k) probs.at(b, k) /= z;
        loss += -(lv.at(b, static_cast<std::size_t>(y)) - mx - std::log(z));
    }
    loss /= static_cast<T>(n);
    std::vector<int> ys(labels.begin(), labels.end());
    return detail::finish(tape, Tensor<T>::scalar(loss), {logits},
                          [logits, probs = std::move(probs), ys = std::move(ys), n, c](Tape<T>& t,
                                                                                     const Tensor<T>& g) {
                              Tensor<T> gl = probs;
                              for (std::size_t b = 0; b < n; ++b) gl.at(b, static_cast<std::size_t>(ys[b])) -= T(1);
                              const T s = g[0] / static_cast<T>(n);
                              for (auto& v : gl.data()) v *= s;
                              (void)c;
                              t.accumulate(logits, gl);
                          },
                          "softmax_cross_entropy");
}

enum class BinaryKind { add, mul, matmul };

// Single entry point for the elementwise and matrix products.
template <typename T>
Var binary(Tape<T>& tape, Var a, Var b, BinaryKind kind) {
    switch (kind) {
        case BinaryKind::add: return add(tape, a, b);
        case BinaryKind::mul: return mul(tape, a, b);
        case BinaryKind::matmul: return matmul(tape, a, b);
    }
    throw ShapeError("unknown binary kind");
}

} // namespace rbdc::ops
