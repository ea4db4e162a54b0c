// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Learning-rate schedule and first-order optimizers.

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "rbdc/errors.hpp"
#include "rbdc/model.hpp"
#include "rbdc/tensor.hpp"

namespace rbdc {

// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay that
// reaches exactly 0 at step total-1.
struct LrSchedule {
    double base = 1e-3;
    std::size_t warmup = 0;
    std::size_t total = 1;

    double at(std::size_t step) const {
        if (step < warmup) return base * static_cast<double>(step) / static_cast<double>(warmup);
        if (step + 1 >= total || total <= warmup + 1) return 0.0;
        const std::size_t span = total - 1 - warmup;
        const double t = static_cast<double>(step - warmup) / static_cast<double>(span);
        return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    }
};

enum class OptimizerKind { sgd_momentum, adamw };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd-momentum"; }

inline OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "adamw") return OptimizerKind::adamw;
    if (s == "sgd-momentum" || s == "sgd_momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
    throw SpecError("unknown optimizer '" + s + "'");
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adamw;
    double lr = 1e-3;
    double weight_decay = 0.05;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (!(lr >= 0) || !(weight_decay >= 0) || !(momentum >= 0) || !(eps >= 0))
            throw SpecError("optimizer rates must be nonnegative");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw SpecError("betas must lie in [0, 1)");
    }
};

// One state slot per model parameter; non-trainable parameters keep empty slots.
// Weight decay applies uniformly to every trainable tensor.
template <typename T>
class Optimizer {
public:
    Optimizer(OptimizerConfig cfg, const std::vector<Parameter<T>>& params) : cfg_(cfg) {
        cfg_.validate();
        first_.resize(params.size());
        second_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].info.trainable()) continue;
            first_[i].assign(params[i].value.size(), 0.0);
            if (cfg_.kind == OptimizerKind::adamw) second_[i].assign(params[i].value.size(), 0.0);
        }
    }

    // grads[i] is empty for parameters without a gradient.
    void step(std::vector<Parameter<T>>& params, const std::vector<Tensor<T>>& grads, double lr) {
        if (params.size() != first_.size() || grads.size() != params.size())
            throw StateError("optimizer was built for a different parameter list");
        ++steps_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].info.trainable() || grads[i].empty()) continue;
            auto w = params[i].value.data();
            const auto g = grads[i].data();
            if (g.size() != w.size()) throw ShapeError("gradient size mismatch for '" + params[i].info.name + "'");
            auto& m = first_[i];
            if (cfg_.kind == OptimizerKind::sgd_momentum) {
                for (std::size_t k = 0; k < w.size(); ++k) {
                    const double gk = static_cast<double>(g[k]) + cfg_.weight_decay * static_cast<double>(w[k]);
                    m[k] = cfg_.momentum * m[k] + gk;
                    w[k] = static_cast<T>(static_cast<double>(w[k]) - lr * m[k]);
                }
            } else {
                auto& v = second_[i];
                for (std::size_t k = 0; k < w.size(); ++k) {
                    const double gk = static_cast<double>(g[k]);
                    double wk = static_cast<double>(w[k]) * (1.0 - lr * cfg_.weight_decay);
                    m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
                    v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
                    wk -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
                    w[k] = static_cast<T>(wk);
                }
            }
        }
    }

    std::size_t steps() const noexcept { return steps_; }
    const OptimizerConfig& config() const noexcept { return cfg_; }

    bool state_all_zero() const {
        for (const auto* bank : {&first_, &second_})
            for (const auto& slot : *bank)
                for (double x : slot)
                    if (x != 0.0) return false;
        return true;
    }

    const std::vector<std::vector<double>>& first_moments() const noexcept { return first_; }
    const std::vector<std::vector<double>>& second_moments() const noexcept { return second_; }

private:
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    std::size_t steps_ = 0;
};

} // namespace rbdc
