// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// FLOPs accounting and epoch planning.
//
// Conventions: one multiply-accumulate is 2 FLOPs; normalization layers,
// activations, pooling and softmax count as 0 MACs; one training step costs
// 3× the forward pass. Level i of the recursion holds 2^i models, level 0 is
// the target model.

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rbdc/errors.hpp"
#include "rbdc/model_spec.hpp"
#include "rbdc/ops.hpp"

namespace rbdc {

inline constexpr const char* kFlopsConvention = "1 MAC = 2 FLOPs; norms/activations = 0 MACs; training = 3x forward";

// ---------------------------------------------------------------------------
// Forward cost

struct LayerCost {
    std::string name;
    double macs = 0;
};

struct ForwardCost {
    std::vector<LayerCost> layers;

    double macs() const {
        double s = 0;
        for (const auto& l : layers) s += l.macs;
        return s;
    }
    double flops() const { return 2.0 * macs(); }

    double macs_of(const std::string& prefix) const {
        double s = 0;
        for (const auto& l : layers)
            if (l.name.rfind(prefix, 0) == 0) s += l.macs;
        return s;
    }
};

inline double linear_macs(std::size_t d_in, std::size_t d_out, std::size_t tokens = 1) {
    return static_cast<double>(d_in) * static_cast<double>(d_out) * static_cast<double>(tokens);
}

inline double conv2d_macs(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t h_out, std::size_t w_out) {
    return static_cast<double>(c_out) * static_cast<double>(c_in) * static_cast<double>(k * k) *
           static_cast<double>(h_out) * static_cast<double>(w_out);
}

inline ForwardCost forward_cost(const ModelSpec& spec) {
    spec.validate();
    ForwardCost fc;
    const std::size_t w = spec.width;
    const std::size_t cin = spec.input_shape[0];
    switch (spec.family) {
        case Family::mlp:
            fc.layers.push_back({"stem", linear_macs(spec.input_features(), w)});
            for (std::size_t i = 0; i < spec.depth; ++i)
                fc.layers.push_back({"fc." + std::to_string(i), linear_macs(w, w)});
            fc.layers.push_back({"head", linear_macs(w, spec.num_classes)});
            break;
        case Family::mini_cnn: {
            std::size_t h = spec.input_shape[1], wd = spec.input_shape[2];
            fc.layers.push_back({"stem.conv", conv2d_macs(cin, w, 3, h, wd)});
            std::size_t prev = w;
            for (std::size_t s = 0; s < spec.depth; ++s) {
                const std::size_t ch = w << s;
                for (std::size_t b = 0; b < 2; ++b) {
                    const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
                    h = ops::conv_out_extent(h, 3, stride, 1);
                    wd = ops::conv_out_extent(wd, 3, stride, 1);
                    fc.layers.push_back({"stage." + std::to_string(s) + ".block." + std::to_string(b) + ".conv",
                                         conv2d_macs(prev, ch, 3, h, wd)});
                    prev = ch;
                }
            }
            fc.layers.push_back({"head", linear_macs(prev, spec.num_classes)});
            break;
        }
        case Family::mini_vit: {
            const std::size_t p = spec.patch_size;
            const std::size_t t = spec.tokens();
            const std::size_t hidden = ModelSpec::mlp_ratio * w;
            fc.layers.push_back({"patch_embed", conv2d_macs(cin, w, p, spec.input_shape[1] / p, spec.input_shape[2] / p)});
            for (std::size_t i = 0; i < spec.depth; ++i) {
                const std::string b = "block." + std::to_string(i);
                fc.layers.push_back({b + ".attn_qkv", linear_macs(w, 3 * w, t)});
                fc.layers.push_back({b + ".attn_scores", static_cast<double>(t) * static_cast<double>(t) * w});
                fc.layers.push_back({b + ".attn_weighted_sum", static_cast<double>(t) * static_cast<double>(t) * w});
                fc.layers.push_back({b + ".attn_proj", linear_macs(w, w, t)});
                fc.layers.push_back({b + ".mlp_fc1", linear_macs(w, hidden, t)});
                fc.layers.push_back({b + ".mlp_fc2", linear_macs(hidden, w, t)});
            }
            fc.layers.push_back({"head", linear_macs(w, spec.num_classes)});
            break;
        }
    }
    return fc;
}

inline double forward_flops(const ModelSpec& spec) { return forward_cost(spec).flops(); }

// ---------------------------------------------------------------------------
// Training cost

inline double training_flops(double forward, double epochs, double dataset_size) {
    if (forward < 0 || epochs < 0 || dataset_size < 0) throw DomainError("training_flops: arguments must be nonnegative");
    return 3.0 * forward * epochs * dataset_size;
}

// Forward cost per image at each recursion level (index 0 = target) and |D|.
struct CostModel {
    std::vector<double> forward;
    double dataset_size = 1;
    std::string convention = kFlopsConvention;

    std::size_t max_steps() const { return forward.empty() ? 0 : forward.size() - 1; }

    void validate() const {
        if (forward.empty()) throw DomainError("cost model needs at least the target forward cost");
        if (!(dataset_size > 0)) throw DomainError("dataset size must be positive");
        for (std::size_t i = 0; i < forward.size(); ++i) {
            if (!(forward[i] > 0)) throw DomainError("forward cost at level " + std::to_string(i) + " must be positive");
            if (i > 0 && forward[i] > forward[i - 1])
                throw DomainError("forward cost must not increase with recursion level");
        }
    }

    // Costs of `spec` and its successive halvings, levels 0..steps.
    static CostModel from_spec(const ModelSpec& spec, std::size_t steps, double dataset_size) {
        CostModel c;
        c.dataset_size = dataset_size;
        ModelSpec s = spec;
        for (std::size_t i = 0; i <= steps; ++i) {
            c.forward.push_back(forward_flops(s));
            if (i < steps) s = s.halved();
        }
        return c;
    }

    // F_i = F_0 / 4^i
    static CostModel quadratic(double forward0, std::size_t steps, double dataset_size) {
        CostModel c;
        c.dataset_size = dataset_size;
        for (std::size_t i = 0; i <= steps; ++i) c.forward.push_back(forward0 / std::pow(4.0, static_cast<double>(i)));
        return c;
    }
};

// Σ_i 2^i · 3 · F_i · |D| · epochs_i over levels 0..S.
inline double pipeline_flops(const CostModel& cost, const std::vector<double>& epochs, std::size_t steps) {
    cost.validate();
    if (epochs.size() < steps + 1)
        throw DomainError("plan error: epochs given for " + std::to_string(epochs.size()) + " levels, need " +
                          std::to_string(steps + 1));
    if (cost.forward.size() < steps + 1)
        throw DomainError("plan error: forward costs given for " + std::to_string(cost.forward.size()) +
                          " levels, need " + std::to_string(steps + 1));
    double total = 0;
    for (std::size_t i = 0; i <= steps; ++i)
        total += std::ldexp(1.0, static_cast<int>(i)) * training_flops(cost.forward[i], epochs[i], cost.dataset_size);
    return total;
}

inline double normalized_flops(double pipeline, double baseline_epochs, const CostModel& cost) {
    if (!(baseline_epochs > 0)) throw DomainError("normalized_flops: baseline epochs must be positive");
    cost.validate();
    return pipeline / training_flops(cost.forward[0], baseline_epochs, cost.dataset_size);
}

// Epoch split of one recursion step: narrow models get epochs/(r+2) each, the
// wide model epochs·r/(r+2), so 2·narrow + wide = epochs.
inline std::pair<double, double> split_epoch_budget(double epochs, double r) {
    if (!(r > 0)) throw DomainError("training ratio r must be positive");
    if (epochs < 0) throw DomainError("epochs must be nonnegative");
    return {epochs / (r + 2.0), epochs * r / (r + 2.0)};
}

// epochs_target = budget / (3 |D| Σ_i (2/r)^i F_i)
inline double epochs_from_flops_budget(double budget, const CostModel& cost, double r, std::size_t steps) {
    if (!(budget > 0)) throw DomainError("FLOPs budget must be positive");
    if (!(r > 0)) throw DomainError("training ratio r must be positive");
    cost.validate();
    if (cost.forward.size() < steps + 1) throw DomainError("plan error: missing forward cost levels");
    double denom = 0;
    for (std::size_t i = 0; i <= steps; ++i) denom += std::pow(2.0 / r, static_cast<double>(i)) * cost.forward[i];
    return budget / (3.0 * cost.dataset_size * denom);
}

// α-form. With a cost model: α·E_b·F_0 / Σ (2/r)^i F_i. Without one, F_i ≈ F_0/4^i
// gives α·E_b / Σ (1/(2r))^i.
inline double epochs_from_alpha(double alpha, double epochs_baseline, double r, std::size_t steps,
                                const std::optional<CostModel>& cost = std::nullopt) {
    if (!(alpha > 0)) throw DomainError("alpha must be positive");
    if (!(r > 0)) throw DomainError("training ratio r must be positive");
    if (cost) {
        cost->validate();
        if (cost->forward.size() < steps + 1) throw DomainError("plan error: missing forward cost levels");
        double denom = 0;
        for (std::size_t i = 0; i <= steps; ++i) denom += std::pow(2.0 / r, static_cast<double>(i)) * cost->forward[i];
        return alpha * epochs_baseline * cost->forward[0] / denom;
    }
    double denom = 0;
    for (std::size_t i = 0; i <= steps; ++i) denom += std::pow(1.0 / (2.0 * r), static_cast<double>(i));
    return alpha * epochs_baseline / denom;
}

// epochs_i = epochs_target / r^i
inline std::vector<double> level_epochs(double epochs_target, double r, std::size_t steps) {
    std::vector<double> e;
    for (std::size_t i = 0; i <= steps; ++i) e.push_back(epochs_target / std::pow(r, static_cast<double>(i)));
    return e;
}

// Recursive epoch split: each step gives its wide model epochs·r/(r+2) and each
// child subtree epochs/(r+2); the narrowest level trains its whole share.
inline std::vector<double> epoch_split_levels(double epochs, double r, std::size_t steps) {
    std::vector<double> e;
    double share = epochs;
    for (std::size_t i = 0; i < steps; ++i) {
        const auto [narrow, wide] = split_epoch_budget(share, r);
        e.push_back(wide);
        share = narrow;
    }
    e.push_back(share);
    return e;
}

enum class RoundingPolicy {
    nearest,              // every level rounded to nearest, minimum 1
    target_nearest_floor  // target rounded to nearest, narrower levels floored (minimum 1)
};

inline std::size_t round_epochs(double e, bool floor_it = false) {
    if (!(e > 0)) return 0;
    const double r = floor_it ? std::floor(e) : std::nearbyint(e);
    return r < 1 ? 1 : static_cast<std::size_t>(r);
}

inline std::vector<std::size_t> round_levels(const std::vector<double>& exact,
                                             RoundingPolicy policy = RoundingPolicy::nearest) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < exact.size(); ++i)
        out.push_back(round_epochs(exact[i], policy == RoundingPolicy::target_nearest_floor && i > 0));
    return out;
}

// ---------------------------------------------------------------------------
// Plans

struct LevelPlan {
    std::size_t level = 0;
    std::size_t count = 1;      // 2^level
    double width = 1;           // absolute width when a spec is known, else fraction of the target
    double epochs_exact = 0;    // before rounding
    std::size_t epochs = 0;     // realized
    double flops = 0;           // all models of this level
    double cumulative_flops = 0;  // from the narrowest level up to this one
    double normalized = 0;      // cumulative, relative to the baseline
};

struct BudgetPlan {
    std::string planner;  // allocation | flops_split | alpha | epoch_split
    std::size_t steps = 0;
    double r = 2;
    double epochs_target_exact = 0;
    std::vector<LevelPlan> levels;
    double total_flops = 0;
    double baseline_epochs = 0;
    double baseline_flops = 0;
    double normalized = 0;
    std::optional<double> alpha;
    std::optional<double> budget;
    std::string convention = kFlopsConvention;

    std::vector<std::size_t> epochs() const {
        std::vector<std::size_t> e;
        for (const auto& l : levels) e.push_back(l.epochs);
        return e;
    }

    nlohmann::json to_json() const {
        nlohmann::json lv = nlohmann::json::array();
        for (const auto& l : levels)
            lv.push_back({{"level", l.level},
                          {"count", l.count},
                          {"width", l.width},
                          {"epochs_exact", l.epochs_exact},
                          {"epochs", l.epochs},
                          {"flops", l.flops},
                          {"cumulative_flops", l.cumulative_flops},
                          {"normalized", l.normalized}});
        nlohmann::json j{{"planner", planner},
                         {"steps", steps},
                         {"r", r},
                         {"epochs_target_exact", epochs_target_exact},
                         {"epochs_target", levels.empty() ? 0 : levels[0].epochs},
                         {"levels", lv},
                         {"total_flops", total_flops},
                         {"baseline_epochs", baseline_epochs},
                         {"baseline_flops", baseline_flops},
                         {"normalized_flops", normalized},
                         {"convention", convention}};
        j["alpha"] = alpha ? nlohmann::json(*alpha) : nlohmann::json(nullptr);
        j["budget"] = budget ? nlohmann::json(*budget) : nlohmann::json(nullptr);
        return j;
    }

    // Columns: level, count, width, epochs, flops, cumulative_flops, normalized.
    std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "level,count,width,epochs,flops,cumulative_flops,normalized\n";
        for (const auto& l : levels)
            os << l.level << ',' << l.count << ',' << l.width << ',' << l.epochs << ',' << l.flops << ','
               << l.cumulative_flops << ',' << l.normalized << '\n';
        return os.str();
    }
};

// Builds the plan record for realized per-level epochs.
inline BudgetPlan make_plan(const CostModel& cost, const std::vector<std::size_t>& epochs,
                            const std::vector<double>& epochs_exact, double r, double baseline_epochs,
                            std::optional<std::size_t> target_width = std::nullopt) {
    cost.validate();
    if (epochs.empty()) throw DomainError("plan needs at least one level");
    const std::size_t steps = epochs.size() - 1;
    BudgetPlan p;
    p.steps = steps;
    p.r = r;
    p.baseline_epochs = baseline_epochs;
    p.baseline_flops = training_flops(cost.forward.at(0), baseline_epochs, cost.dataset_size);
    p.epochs_target_exact = epochs_exact.empty() ? static_cast<double>(epochs[0]) : epochs_exact[0];
    std::vector<double> realized(epochs.begin(), epochs.end());
    p.total_flops = pipeline_flops(cost, realized, steps);
    p.normalized = baseline_epochs > 0 ? p.total_flops / p.baseline_flops : 0.0;
    p.levels.resize(steps + 1);
    double cumulative = 0;
    for (std::size_t k = steps + 1; k-- > 0;) {
        auto& l = p.levels[k];
        l.level = k;
        l.count = std::size_t{1} << k;
        l.width = target_width ? static_cast<double>(*target_width >> k) : std::ldexp(1.0, -static_cast<int>(k));
        l.epochs_exact = k < epochs_exact.size() ? epochs_exact[k] : static_cast<double>(epochs[k]);
        l.epochs = epochs[k];
        l.flops = static_cast<double>(l.count) * training_flops(cost.forward[k], realized[k], cost.dataset_size);
        cumulative += l.flops;
        l.cumulative_flops = cumulative;
        l.normalized = baseline_epochs > 0 ? cumulative / p.baseline_flops : 0.0;
    }
    return p;
}

inline BudgetPlan plan_from_allocation(const CostModel& cost, const std::vector<std::size_t>& epochs, double r,
                                       double baseline_epochs, std::optional<std::size_t> width = std::nullopt) {
    std::vector<double> exact(epochs.begin(), epochs.end());
    auto p = make_plan(cost, epochs, exact, r, baseline_epochs, width);
    p.planner = "allocation";
    return p;
}

inline BudgetPlan plan_flops_split(const CostModel& cost, double budget, double r, std::size_t steps,
                                   double baseline_epochs, RoundingPolicy policy = RoundingPolicy::nearest,
                                   std::optional<std::size_t> width = std::nullopt) {
    const double target = epochs_from_flops_budget(budget, cost, r, steps);
    const auto exact = level_epochs(target, r, steps);
    auto p = make_plan(cost, round_levels(exact, policy), exact, r, baseline_epochs, width);
    p.planner = "flops_split";
    p.budget = budget;
    return p;
}

inline BudgetPlan plan_alpha(const CostModel& cost, double alpha, double r, std::size_t steps, double baseline_epochs,
                             bool approximate = false, RoundingPolicy policy = RoundingPolicy::nearest,
                             std::optional<std::size_t> width = std::nullopt) {
    const double target = epochs_from_alpha(alpha, baseline_epochs, r, steps,
                                            approximate ? std::nullopt : std::optional<CostModel>(cost));
    const auto exact = level_epochs(target, r, steps);
    auto p = make_plan(cost, round_levels(exact, policy), exact, r, baseline_epochs, width);
    p.planner = approximate ? "alpha_approx" : "alpha";
    p.alpha = alpha;
    return p;
}

inline BudgetPlan plan_epoch_split(const CostModel& cost, double epochs, double r, std::size_t steps,
                                   double baseline_epochs, RoundingPolicy policy = RoundingPolicy::nearest,
                                   std::optional<std::size_t> width = std::nullopt) {
    const auto exact = epoch_split_levels(epochs, r, steps);
    auto p = make_plan(cost, round_levels(exact, policy), exact, r, baseline_epochs, width);
    p.planner = "epoch_split";
    return p;
}

} // namespace rbdc
