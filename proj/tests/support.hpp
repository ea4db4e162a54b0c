// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared test oracles.

#pragma once

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rbdc/rbdc.hpp"

namespace rbdc::testing {

// Plain triple loop: c = a · b.
inline Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
    Tensor<double> c(Shape{a.dim(0), b.dim(1)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < b.dim(1); ++j) {
            double s = 0;
            for (std::size_t k = 0; k < a.dim(1); ++k) s += a.at(i, k) * b.at(k, j);
            c.at(i, j) = s;
        }
    return c;
}

// Direct convolution by definition, zero padding outside the image.
inline Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>* bias,
                                 std::size_t stride, std::size_t pad) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
    Tensor<double> out(Shape{n, o, ho, wo});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oc = 0; oc < o; ++oc)
            for (std::size_t y = 0; y < ho; ++y)
                for (std::size_t xo = 0; xo < wo; ++xo) {
                    double s = bias ? (*bias)[oc] : 0.0;
                    for (std::size_t ic = 0; ic < c; ++ic)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(xo * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                                    continue;
                                s += x.at(b, ic, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                                     k.at(oc, ic, ky, kx);
                            }
                    out.at(b, oc, y, xo) = s;
                }
    return out;
}

inline Tensor<double> random_tensor(Shape s, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return normal_tensor<double>(std::move(s), rng, scale);
}

using GradFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

struct GradCheck {
    double max_rel_error = 0;  // worst over inputs of ‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)
    std::size_t entries = 0;
};

// Central finite differences against reverse mode. The scalar loss is
// Σ out ⊙ R with a fixed random R, so every output entry matters.
inline GradCheck gradcheck(const GradFn& fn, std::vector<Tensor<double>> inputs, std::uint64_t seed = 7,
                           double h = 1e-5) {
    Tensor<double> weights;
    auto loss_of = [&](const std::vector<Tensor<double>>& in, Tape<double>& tape, std::vector<Var>& vars) {
        vars.clear();
        for (const auto& t : in) vars.push_back(tape.parameter(t));
        const Var out = fn(tape, vars);
        if (weights.empty()) weights = random_tensor(tape.value(out).shape(), seed);
        const Var r = tape.constant(weights);
        return ops::sum(tape, ops::mul(tape, out, r));
    };
    Tape<double> tape(true);
    std::vector<Var> vars;
    const Var loss = loss_of(inputs, tape, vars);
    tape.backward(loss);
    GradCheck gc;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor<double> analytic = tape.grad(vars[i]);
        Tensor<double> numeric(inputs[i].shape());
        for (std::size_t k = 0; k < inputs[i].size(); ++k) {
            auto plus = inputs, minus = inputs;
            plus[i][k] += h;
            minus[i][k] -= h;
            Tape<double> tp(false), tm(false);
            std::vector<Var> vp, vm;
            const double fp = tp.value(loss_of(plus, tp, vp))[0];
            const double fm = tm.value(loss_of(minus, tm, vm))[0];
            numeric[k] = (fp - fm) / (2 * h);
        }
        const double scale = std::max(analytic.max_abs(), numeric.max_abs());
        const double err = scale == 0 ? 0.0 : analytic.max_abs_diff(numeric) / scale;
        gc.max_rel_error = std::max(gc.max_rel_error, err);
        gc.entries += inputs[i].size();
    }
    return gc;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("rbdc_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

struct CommandResult {
    int code = -1;
    std::string output;  // stdout and stderr, interleaved
};

// Runs a shell command and captures its exit status and output.
inline CommandResult run_command(const std::string& cmd) {
    CommandResult r;
    FILE* pipe = ::popen((cmd + " 2>&1").c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

inline ModelSpec small_spec(Family f, std::size_t width = 8) {
    ModelSpec s;
    s.family = f;
    s.width = width;
    s.depth = 1;
    s.input_shape = {3, 8, 8};
    s.num_classes = 8;
    if (f == Family::mini_vit) {
        s.head_dim = 2;
        s.heads = width / 2;
        s.patch_size = 4;
    }
    return s;
}

} // namespace rbdc::testing
