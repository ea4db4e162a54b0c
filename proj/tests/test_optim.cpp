// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace rbdc;
using Catch::Approx;

namespace {

std::vector<Parameter<double>> scalar_params(double w, bool with_stat = false) {
    std::vector<Parameter<double>> p;
    p.push_back({ParamInfo{"fc.weight", LayerRole::mlp_fc, Shape{1}, ParamKind::weight, InitKind::zeros},
                 Tensor<double>(Shape{1}, w)});
    if (with_stat)
        p.push_back({ParamInfo{"bn.running_var", LayerRole::batch_norm, Shape{1}, ParamKind::running_var, InitKind::ones},
                     Tensor<double>(Shape{1}, 1.0)});
    return p;
}

} // namespace

TEST_CASE("schedule endpoints") {
    const LrSchedule s{0.1, 10, 100};
    CHECK(s.at(0) == 0.0);
    CHECK(s.at(5) == Approx(0.05));
    CHECK(s.at(10) == Approx(0.1));
    CHECK(s.at(99) == 0.0);
    CHECK(s.at(99) <= 1e-3 * 0.1);
    // Cosine midpoint.
    CHECK(s.at(10 + 89 / 2) == Approx(0.05 * (1 + std::cos(M_PI * 44.0 / 89.0))));
    for (std::size_t k = 11; k < 100; ++k) CHECK(s.at(k) <= s.at(k - 1));

    const LrSchedule none{0.1, 0, 5};
    CHECK(none.at(0) == 0.1);
    CHECK(none.at(4) == 0.0);
    const LrSchedule tiny{0.1, 0, 1};
    CHECK(tiny.at(0) == 0.0);
}

TEST_CASE("optimizer names") {
    CHECK(optimizer_from_string("adamw") == OptimizerKind::adamw);
    CHECK(optimizer_from_string("sgd-momentum") == OptimizerKind::sgd_momentum);
    CHECK(std::string(to_string(OptimizerKind::sgd_momentum)) == "sgd-momentum");
    CHECK_THROWS_AS(optimizer_from_string("lion"), SpecError);
    OptimizerConfig c;
    c.beta1 = 1.0;
    CHECK_THROWS_AS(c.validate(), SpecError);
    c = {};
    c.lr = -1;
    CHECK_THROWS_AS(c.validate(), SpecError);
}

TEST_CASE("AdamW matches a hand-computed step") {
    OptimizerConfig c;
    c.lr = 0.1;
    c.weight_decay = 0.05;
    auto p = scalar_params(1.0);
    Optimizer<double> opt(c, p);
    CHECK(opt.state_all_zero());
    const std::vector<Tensor<double>> g{Tensor<double>(Shape{1}, 0.5)};
    opt.step(p, g, 0.1);
    // m̂ = g, v̂ = g², so the Adam update is lr·g/(|g|+ε).
    const double w1 = 1.0 * (1 - 0.1 * 0.05) - 0.1 * 0.5 / (0.5 + 1e-8);
    CHECK(p[0].value[0] == Approx(w1).epsilon(1e-14));
    opt.step(p, g, 0.1);
    const double w2 = w1 * (1 - 0.1 * 0.05) - 0.1 * 0.5 / (0.5 + 1e-8);
    CHECK(p[0].value[0] == Approx(w2).epsilon(1e-12));
    CHECK(opt.first_moments()[0][0] == Approx(0.095));
    CHECK(opt.second_moments()[0][0] == Approx(0.00049975));
    CHECK(opt.steps() == 2);
    CHECK_FALSE(opt.state_all_zero());
}

TEST_CASE("SGD with momentum matches a hand-computed step") {
    OptimizerConfig c;
    c.kind = OptimizerKind::sgd_momentum;
    c.weight_decay = 0.01;
    c.momentum = 0.9;
    auto p = scalar_params(1.0);
    Optimizer<double> opt(c, p);
    const std::vector<Tensor<double>> g{Tensor<double>(Shape{1}, 0.5)};
    opt.step(p, g, 0.1);
    CHECK(p[0].value[0] == Approx(0.949));
    opt.step(p, g, 0.1);
    CHECK(p[0].value[0] == Approx(0.852151));
    CHECK(opt.second_moments()[0].empty());
}

TEST_CASE("state is fresh and skips non-trainable tensors") {
    auto p = scalar_params(1.0, true);
    Optimizer<double> opt(OptimizerConfig{}, p);
    CHECK(opt.first_moments()[1].empty());
    const std::vector<Tensor<double>> g{Tensor<double>(Shape{1}, 0.5), Tensor<double>(Shape{1}, 9.0)};
    opt.step(p, g, 0.1);
    CHECK(p[1].value[0] == 1.0);
    Optimizer<double> again(OptimizerConfig{}, p);
    CHECK(again.state_all_zero());
    CHECK(again.steps() == 0);

    std::vector<Tensor<double>> wrong{Tensor<double>(Shape{1}, 0.5)};
    CHECK_THROWS_AS(opt.step(p, wrong, 0.1), StateError);
}

TEST_CASE("zero gradient with zero decay leaves weights unchanged") {
    OptimizerConfig c;
    c.weight_decay = 0;
    auto p = scalar_params(0.25);
    Optimizer<double> opt(c, p);
    opt.step(p, {Tensor<double>(Shape{1}, 0.0)}, 0.1);
    CHECK(p[0].value[0] == 0.25);
}
