// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loops: the standard single-model trainer, the recursive
// block-diagonal coupling driver, and the experiment runner.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rbdc/budget.hpp"
#include "rbdc/checkpoint.hpp"
#include "rbdc/coupling.hpp"
#include "rbdc/data.hpp"
#include "rbdc/model.hpp"
#include "rbdc/optim.hpp"

namespace rbdc {

struct TrainConfig {
    OptimizerConfig optimizer;
    std::size_t batch_size = 64;
    std::size_t warmup_epochs = 2;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    Precision precision = Precision::f64;

    void validate() const {
        optimizer.validate();
        if (batch_size == 0) throw SpecError("batch size must be positive");
        if (epochs > 0 && warmup_epochs >= epochs)
            throw SpecError("warmup epochs (" + std::to_string(warmup_epochs) + ") must be below total epochs (" +
                            std::to_string(epochs) + ")");
    }

    // Same recipe for a phase of `e` epochs; warmup shrinks to fit short phases.
    TrainConfig for_phase(std::size_t e, std::uint64_t phase_seed) const {
        TrainConfig c = *this;
        c.epochs = e;
        c.warmup_epochs = e == 0 ? 0 : std::min(warmup_epochs, e - 1);
        c.seed = phase_seed;
        return c;
    }

    json to_json() const {
        return json{{"optimizer", to_string(optimizer.kind)},
                    {"lr", optimizer.lr},
                    {"weight_decay", optimizer.weight_decay},
                    {"momentum", optimizer.momentum},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"eps", optimizer.eps},
                    {"batch_size", batch_size},
                    {"warmup_epochs", warmup_epochs},
                    {"epochs", epochs},
                    {"seed", seed},
                    {"precision", to_string(precision)}};
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    double eval_loss = 0;
    double eval_accuracy = 0;
    double cumulative_flops = 0;
    double lr_last = 0;
};

struct RunRecord {
    std::string path = "root";
    std::size_t width = 0;
    std::uint64_t seed = 0;
    double epochs_exact = 0;
    std::size_t epochs_planned = 0;
    json config = json::object();
    double flops_per_epoch = 0;
    // Inspection values captured before the first optimizer step.
    bool optimizer_fresh = true;
    double first_lr = 0;
    double initial_eval_loss = 0;
    double initial_eval_accuracy = 0;
    std::vector<EpochRecord> epochs;
    std::string checkpoint;  // lineage id of the produced checkpoint
    std::vector<RunRecord> children;

    double total_flops() const { return epochs.empty() ? 0.0 : epochs.back().cumulative_flops; }

    double tree_flops() const {
        double s = total_flops();
        for (const auto& c : children) s += c.tree_flops();
        return s;
    }

    std::size_t node_count() const {
        std::size_t n = 1;
        for (const auto& c : children) n += c.node_count();
        return n;
    }

    double final_accuracy() const { return epochs.empty() ? initial_eval_accuracy : epochs.back().eval_accuracy; }

    // Nodes at tree depth `depth` (root = 0).
    void collect(std::size_t depth, std::vector<const RunRecord*>& out, std::size_t at = 0) const {
        if (at == depth) {
            out.push_back(this);
            return;
        }
        for (const auto& c : children) c.collect(depth, out, at + 1);
    }

    json to_json() const {
        json ep = json::array();
        for (const auto& e : epochs)
            ep.push_back({{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"eval_loss", e.eval_loss},
                          {"eval_accuracy", e.eval_accuracy},
                          {"cumulative_flops", e.cumulative_flops},
                          {"lr_last", e.lr_last}});
        json ch = json::array();
        for (const auto& c : children) ch.push_back(c.to_json());
        return json{{"path", path},
                    {"width", width},
                    {"seed", seed},
                    {"epochs_exact", epochs_exact},
                    {"epochs_planned", epochs_planned},
                    {"config", config},
                    {"flops_per_epoch", flops_per_epoch},
                    {"optimizer_fresh", optimizer_fresh},
                    {"first_lr", first_lr},
                    {"initial_eval_loss", initial_eval_loss},
                    {"initial_eval_accuracy", initial_eval_accuracy},
                    {"epochs", ep},
                    {"checkpoint", checkpoint},
                    {"children", ch}};
    }

    static RunRecord from_json(const json& j) {
        try {
            RunRecord r;
            r.path = j.at("path").get<std::string>();
            r.width = j.at("width").get<std::size_t>();
            r.seed = j.at("seed").get<std::uint64_t>();
            r.epochs_exact = j.at("epochs_exact").get<double>();
            r.epochs_planned = j.at("epochs_planned").get<std::size_t>();
            r.config = j.at("config");
            r.flops_per_epoch = j.at("flops_per_epoch").get<double>();
            r.optimizer_fresh = j.at("optimizer_fresh").get<bool>();
            r.first_lr = j.at("first_lr").get<double>();
            r.initial_eval_loss = j.at("initial_eval_loss").get<double>();
            r.initial_eval_accuracy = j.at("initial_eval_accuracy").get<double>();
            for (const auto& e : j.at("epochs"))
                r.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                                    e.at("eval_loss").get<double>(), e.at("eval_accuracy").get<double>(),
                                    e.at("cumulative_flops").get<double>(), e.at("lr_last").get<double>()});
            r.checkpoint = j.at("checkpoint").get<std::string>();
            for (const auto& c : j.at("children")) r.children.push_back(from_json(c));
            r.validate();
            return r;
        } catch (const json::exception& e) {
            throw FormatError(std::string("malformed run record: ") + e.what());
        }
    }

    void validate() const {
        double prev = 0;
        for (std::size_t i = 0; i < epochs.size(); ++i) {
            if (epochs[i].epoch != i) throw FormatError("run record epochs are not contiguous from 0");
            if (epochs[i].cumulative_flops < prev) throw FormatError("run record FLOPs decrease");
            prev = epochs[i].cumulative_flops;
        }
        for (const auto& c : children) c.validate();
    }
};

struct EvalResult {
    double loss = 0;
    double accuracy = 0;
};

template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::size_t chunk = 256) {
    EvalResult r;
    std::vector<std::size_t> idx;
    std::size_t correct = 0;
    double loss_sum = 0;
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        idx.resize(std::min(chunk, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const auto labels = data.labels_of(idx);
        Tape<T> tape(false);
        const auto fr = model.forward(tape, data.inputs<T>(idx), {ops::Mode::eval});
        const Var loss = ops::softmax_cross_entropy(tape, fr.logits, std::span<const int>(labels));
        loss_sum += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(idx.size());
        const auto& logits = tape.value(fr.logits);
        for (std::size_t i = 0; i < idx.size(); ++i)
            if (static_cast<int>(argmax_row(logits, i)) == labels[i]) ++correct;
    }
    r.loss = loss_sum / static_cast<double>(data.size());
    r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    return r;
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

// Minibatch training for config.epochs epochs with a fresh optimizer and a
// schedule starting at step 0. The model is updated in place.
template <typename T>
RunRecord train(Model<T>& model, const Dataset& data, const Dataset* eval, const TrainConfig& config) {
    config.validate();
    data.validate();
    if (data.size() == 0) throw DomainError("training set is empty");
    RunRecord rec;
    rec.width = model.spec().width;
    rec.seed = config.seed;
    rec.epochs_exact = static_cast<double>(config.epochs);
    rec.epochs_planned = config.epochs;
    rec.config = config.to_json();
    rec.flops_per_epoch = training_flops(forward_flops(model.spec()), 1.0, static_cast<double>(data.size()));
    if (eval) {
        const auto e0 = evaluate(model, *eval);
        rec.initial_eval_loss = e0.loss;
        rec.initial_eval_accuracy = e0.accuracy;
    }
    if (config.epochs == 0) return rec;

    const std::size_t spe = steps_per_epoch(data.size(), config.batch_size);
    const LrSchedule schedule{config.optimizer.lr, config.warmup_epochs * spe, config.epochs * spe};
    Optimizer<T> opt(config.optimizer, model.parameters());
    rec.optimizer_fresh = opt.state_all_zero();
    rec.first_lr = schedule.at(0);

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t step = 0;
    double cumulative = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(config.seed, epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0;
        double lr = 0;
        for (std::size_t b = 0; b < spe; ++b) {
            const std::size_t lo = b * config.batch_size;
            const std::size_t hi = std::min(lo + config.batch_size, data.size());
            const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
            const auto labels = data.labels_of(idx);
            Tape<T> tape(true);
            double loss_value = 0;
            try {
                const auto fr = model.forward(tape, data.inputs<T>(idx), {ops::Mode::train});
                const Var loss = ops::softmax_cross_entropy(tape, fr.logits, std::span<const int>(labels));
                loss_value = static_cast<double>(tape.value(loss)[0]);
                if (!std::isfinite(loss_value)) throw NumericError("non-finite loss");
                tape.backward(loss);
                std::vector<Tensor<T>> grads;
                grads.reserve(fr.params.size());
                for (std::size_t i = 0; i < fr.params.size(); ++i)
                    grads.push_back(tape.requires_grad(fr.params[i]) ? tape.grad(fr.params[i]) : Tensor<T>{});
                lr = schedule.at(step++);
                opt.step(model.parameters(), grads, lr);
            } catch (const NumericError& e) {
                throw TrainingError(std::string("training diverged: ") + e.what(), epoch, b);
            }
            loss_sum += loss_value * static_cast<double>(hi - lo);
        }
        cumulative += rec.flops_per_epoch;
        EpochRecord er;
        er.epoch = epoch;
        er.train_loss = loss_sum / static_cast<double>(data.size());
        er.cumulative_flops = cumulative;
        er.lr_last = lr;
        if (eval) {
            try {
                const auto e = evaluate(model, *eval);
                er.eval_loss = e.loss;
                er.eval_accuracy = e.accuracy;
            } catch (const NumericError& e) {
                // The last update left non-finite weights.
                throw TrainingError(std::string("training diverged: ") + e.what(), epoch, spe - 1);
            }
        }
        rec.epochs.push_back(er);
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Recursive driver

enum class SplitMode { epoch_split, flops_split };

inline const char* to_string(SplitMode m) { return m == SplitMode::epoch_split ? "epoch_split" : "flops_split"; }

inline SplitMode split_mode_from_string(const std::string& s) {
    if (s == "epoch_split") return SplitMode::epoch_split;
    if (s == "flops_split") return SplitMode::flops_split;
    throw SpecError("unknown mode '" + s + "' (expected epoch_split or flops_split)");
}

struct RbdcOptions {
    SplitMode mode = SplitMode::epoch_split;
    double epochs = 10;                  // epoch_split: total epochs of the root subtree
    std::optional<double> flops_budget;  // flops_split; defaults to a baseline run of `epochs` epochs
    std::size_t min_size = 1;
    double r = 2;
    PaddingMode padding;
    RoundingPolicy rounding = RoundingPolicy::nearest;
};

template <typename T>
struct RbdcResult {
    Model<T> model;
    Checkpoint checkpoint;
    RunRecord record;
};

// Recursion steps below `spec` before widths drop under min_size.
inline std::size_t recursion_steps(const ModelSpec& spec, std::size_t min_size) {
    std::size_t s = 0;
    ModelSpec cur = spec;
    while (cur.width >= min_size) {
        cur = cur.halved();
        ++s;
    }
    return s;
}

namespace protocol_detail {

template <typename T>
RbdcResult<T> rbdc_node(const ModelSpec& spec, double exact_epochs, std::optional<double> budget, std::size_t level,
                        const std::string& path, const Dataset& data, const Dataset* eval, const TrainConfig& config,
                        const RbdcOptions& opt) {
    const double d = static_cast<double>(data.size());
    const bool floor_it = opt.rounding == RoundingPolicy::target_nearest_floor && level > 0;
    const std::uint64_t node_seed = derive_seed(config.seed, path);

    if (spec.width < opt.min_size) {
        if (budget) exact_epochs = *budget / training_flops(forward_flops(spec), 1.0, d);
        const std::size_t e = round_epochs(exact_epochs, floor_it);
        Model<T> m = Model<T>::build(spec, node_seed);
        RunRecord rec = train(m, data, eval, config.for_phase(e, derive_seed(node_seed, "train")));
        rec.path = path;
        rec.seed = node_seed;
        rec.epochs_exact = exact_epochs;
        CheckpointMetadata md;
        md.seed = node_seed;
        md.epochs_trained = e;
        md.lineage.id = lineage_id(spec.width, node_seed, path);
        md.lineage.width = spec.width;
        md.lineage.seed = node_seed;
        md.lineage.epochs = e;
        rec.checkpoint = md.lineage.id;
        auto ck = to_checkpoint(m, md);
        return {std::move(m), std::move(ck), std::move(rec)};
    }

    const ModelSpec narrow = spec.halved();
    double wide_exact = 0;
    double child_epochs = 0;
    std::optional<double> child_budget;
    if (budget) {
        const std::size_t steps = recursion_steps(spec, opt.min_size);
        const auto cost = CostModel::from_spec(spec, steps, d);
        wide_exact = epochs_from_flops_budget(*budget, cost, opt.r, steps);
        child_budget = (*budget - training_flops(cost.forward[0], wide_exact, d)) / 2.0;
    } else {
        const auto [n, w] = split_epoch_budget(exact_epochs, opt.r);
        wide_exact = w;
        child_epochs = n;
    }
    auto left = rbdc_node<T>(narrow, child_epochs, child_budget, level + 1, path + "/0", data, eval, config, opt);
    auto right = rbdc_node<T>(narrow, child_epochs, child_budget, level + 1, path + "/1", data, eval, config, opt);

    Checkpoint coupled = couple_checkpoint(left.checkpoint, right.checkpoint, opt.padding, derive_seed(node_seed, "pad"));
    Model<T> wide = to_model<T>(coupled);
    const std::size_t e = round_epochs(wide_exact, floor_it);
    RunRecord rec = train(wide, data, eval, config.for_phase(e, derive_seed(node_seed, "train")));
    rec.path = path;
    rec.seed = node_seed;
    rec.epochs_exact = wide_exact;
    rec.children.push_back(std::move(left.record));
    rec.children.push_back(std::move(right.record));
    CheckpointMetadata md = coupled.metadata;
    md.epochs_trained = e;
    md.lineage.epochs = e;
    rec.checkpoint = md.lineage.id;
    auto ck = to_checkpoint(wide, md);
    return {std::move(wide), std::move(ck), std::move(rec)};
}

} // namespace protocol_detail

// Trains `spec` by recursive halving: subtrees whose width is below min_size
// train from a random initialization; wider nodes couple their two trained
// halves and continue training under a restarted schedule and optimizer.
template <typename T>
RbdcResult<T> rbdc_train(const ModelSpec& spec, const Dataset& data, const Dataset* eval, const TrainConfig& config,
                         const RbdcOptions& opt) {
    spec.validate();
    config.optimizer.validate();
    if (!(opt.r > 0)) throw DomainError("training ratio r must be positive");
    if (opt.min_size == 0) throw SpecError("min_size must be positive");
    recursion_steps(spec, opt.min_size);  // throws SpecError on a non-halvable width
    std::optional<double> budget;
    if (opt.mode == SplitMode::flops_split)
        budget = opt.flops_budget ? *opt.flops_budget
                                  : training_flops(forward_flops(spec), opt.epochs, static_cast<double>(data.size()));
    return protocol_detail::rbdc_node<T>(spec, opt.epochs, budget, 0, "root", data, eval, config, opt);
}

// Realized epochs per level (level 0 = root), read from a record tree.
inline std::vector<std::size_t> realized_level_epochs(const RunRecord& root) {
    std::vector<std::size_t> out;
    for (std::size_t depth = 0;; ++depth) {
        std::vector<const RunRecord*> nodes;
        root.collect(depth, nodes);
        if (nodes.empty()) break;
        out.push_back(nodes.front()->epochs_planned);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentPlan {
    std::string protocol = "baseline";  // baseline | rbdc
    std::size_t steps = 0;
    double r = 2;
    SplitMode mode = SplitMode::epoch_split;
    double epochs = 10;
    std::optional<double> flops_budget;
    std::uint64_t seed = 0;
};

struct CurveRow {
    std::string protocol;
    std::size_t steps = 0;
    double r = 2;
    double normalized_flops = 0;
    double accuracy = 0;
    std::uint64_t seed = 0;
};

inline std::string curve_csv(const std::vector<CurveRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "protocol,steps,r,normalized_flops,accuracy,seed\n";
    for (const auto& r : rows)
        os << r.protocol << ',' << r.steps << ',' << r.r << ',' << r.normalized_flops << ',' << r.accuracy << ','
           << r.seed << '\n';
    return os.str();
}

inline std::vector<CurveRow> parse_curve_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "protocol,steps,r,normalized_flops,accuracy,seed")
        throw FormatError("curve CSV header mismatch");
    std::vector<CurveRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() != 6) throw FormatError("curve CSV line " + std::to_string(lineno) + " has " +
                                             std::to_string(f.size()) + " fields");
        try {
            rows.push_back({f[0], std::stoul(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                            std::stoull(f[5])});
        } catch (const std::exception&) {
            throw FormatError("curve CSV line " + std::to_string(lineno) + " is not numeric");
        }
    }
    return rows;
}

template <typename T>
struct ExperimentRun {
    CurveRow row;
    RbdcResult<T> result;
};

// One independent run from scratch. Normalized FLOPs are relative to a
// baseline of `baseline_epochs` epochs of the target spec.
template <typename T>
ExperimentRun<T> run_plan(const ModelSpec& spec, const ExperimentPlan& plan, const Dataset& data, const Dataset& eval,
                          TrainConfig config, double baseline_epochs) {
    config.seed = plan.seed;
    RbdcOptions opt;
    opt.r = plan.r;
    opt.mode = plan.mode;
    opt.epochs = plan.epochs;
    opt.flops_budget = plan.flops_budget;
    opt.min_size = (spec.width >> plan.steps) + 1;
    if (plan.protocol != "baseline" && plan.protocol != "rbdc")
        throw SpecError("unknown protocol '" + plan.protocol + "'");
    if (plan.protocol == "baseline" && plan.steps != 0) throw SpecError("baseline plans have zero steps");
    auto res = rbdc_train<T>(spec, data, &eval, config, opt);
    const double base = training_flops(forward_flops(spec), baseline_epochs, static_cast<double>(data.size()));
    CurveRow row{plan.protocol, plan.steps, plan.r, res.record.tree_flops() / base, res.record.final_accuracy(),
                 plan.seed};
    return {row, std::move(res)};
}

template <typename T>
std::vector<CurveRow> run_experiment(const ModelSpec& spec, const std::vector<ExperimentPlan>& plans,
                                     const Dataset& data, const Dataset& eval, const TrainConfig& config,
                                     double baseline_epochs) {
    std::vector<CurveRow> rows;
    for (const auto& p : plans) rows.push_back(run_plan<T>(spec, p, data, eval, config, baseline_epochs).row);
    return rows;
}

} // namespace rbdc
