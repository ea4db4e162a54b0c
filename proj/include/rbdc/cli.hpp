// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end.
//
//   rbdc plan|train|couple|verify|flops|report [--config FILE] [--key value ...]
//
// Every flag has a config-file twin: `--batch-size 32` ≡ {"batch_size": 32}.
// Config files are flat JSON objects; unknown keys are rejected. Flags win.
//
// Exit codes: 0 success, 1 validation or format error, 2 verification
// failure, 3 training numeric failure.

#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rbdc/budget.hpp"
#include "rbdc/checkpoint.hpp"
#include "rbdc/coupling.hpp"
#include "rbdc/data.hpp"
#include "rbdc/protocol.hpp"
#include "rbdc/verify.hpp"

namespace rbdc::cli {

enum ExitCode : int { ok = 0, invalid = 1, verification_failed = 2, training_failed = 3 };

enum class KeyType { integer, number, text, boolean, integer_list, number_list, text_list };

struct KeyInfo {
    KeyType type;
    const char* help;
};

// The configuration schema shared by files and flags.
inline const std::map<std::string, KeyInfo>& schema() {
    static const std::map<std::string, KeyInfo> keys{
        // model
        {"family", {KeyType::text, "mlp | mini_cnn | mini_vit"}},
        {"width", {KeyType::integer, "target width"}},
        {"depth", {KeyType::integer, "hidden layers / stages / blocks"}},
        {"heads", {KeyType::integer, "attention heads (mini_vit)"}},
        {"head_dim", {KeyType::integer, "per-head width (mini_vit)"}},
        {"patch_size", {KeyType::integer, "patch size (mini_vit)"}},
        {"input_shape", {KeyType::integer_list, "C,H,W"}},
        {"num_classes", {KeyType::integer, "classes"}},
        // training
        {"optimizer", {KeyType::text, "adamw | sgd-momentum"}},
        {"lr", {KeyType::number, "base learning rate"}},
        {"weight_decay", {KeyType::number, "weight decay"}},
        {"momentum", {KeyType::number, "SGD momentum"}},
        {"beta1", {KeyType::number, "AdamW beta1"}},
        {"beta2", {KeyType::number, "AdamW beta2"}},
        {"batch_size", {KeyType::integer, "minibatch size"}},
        {"warmup_epochs", {KeyType::integer, "warmup epochs"}},
        {"epochs", {KeyType::number, "total epochs (train) or epoch budget (plan)"}},
        {"seed", {KeyType::integer, "seed"}},
        {"seeds", {KeyType::integer_list, "seeds for repeated runs"}},
        {"precision", {KeyType::text, "f32 | f64"}},
        // protocol / planning
        {"protocol", {KeyType::text, "baseline | rbdc"}},
        {"ratio", {KeyType::number, "training ratio r"}},
        {"steps", {KeyType::integer, "recursion steps S"}},
        {"min_size", {KeyType::integer, "recursion stops below this width (overrides steps)"}},
        {"mode", {KeyType::text, "epoch_split | flops_split"}},
        {"padding", {KeyType::text, "zero | random"}},
        {"padding_std", {KeyType::number, "random padding std"}},
        {"rounding", {KeyType::text, "nearest | target_nearest_floor"}},
        {"planner", {KeyType::text, "allocation | flops_split | alpha | alpha_approx | epoch_split"}},
        {"budget", {KeyType::number, "FLOPs budget"}},
        {"alpha", {KeyType::number, "budget as a fraction of the baseline"}},
        {"baseline_epochs", {KeyType::number, "baseline epochs for normalization"}},
        {"allocation", {KeyType::integer_list, "realized epochs per level, target first"}},
        {"forward_costs", {KeyType::number_list, "forward FLOPs per image per level, target first"}},
        {"dataset_size", {KeyType::number, "training images |D|"}},
        // data
        {"data", {KeyType::text, "synthetic | idx"}},
        {"per_class", {KeyType::integer, "synthetic training samples per class"}},
        {"eval_per_class", {KeyType::integer, "synthetic eval samples per class"}},
        {"data_seed", {KeyType::integer, "synthetic data seed"}},
        {"noise_std", {KeyType::number, "synthetic noise std"}},
        {"train_images", {KeyType::text, "IDX training images"}},
        {"train_labels", {KeyType::text, "IDX training labels"}},
        {"eval_images", {KeyType::text, "IDX eval images"}},
        {"eval_labels", {KeyType::text, "IDX eval labels"}},
        // checkpoints and reports
        {"narrow1", {KeyType::text, "first narrow checkpoint"}},
        {"narrow2", {KeyType::text, "second narrow checkpoint"}},
        {"wide", {KeyType::text, "coupled checkpoint"}},
        {"verify_mode", {KeyType::text, "exact | split_norm_debug | joint_norm"}},
        {"probes", {KeyType::integer, "verification probes"}},
        {"inputs", {KeyType::text_list, "curve CSVs or train output directories"}},
        {"out", {KeyType::text, "output directory"}},
    };
    return keys;
}

inline std::string flag_name(const std::string& key) {
    std::string f = key;
    for (auto& ch : f)
        if (ch == '_') ch = '-';
    return "--" + f;
}

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

inline json parse_value(const std::string& key, KeyType type, const std::string& raw) {
    auto bad = [&] { return FormatError("flag " + flag_name(key) + ": cannot parse '" + raw + "'"); };
    try {
        std::size_t pos = 0;
        switch (type) {
            case KeyType::integer: {
                if (!raw.empty() && raw[0] == '-') throw bad();
                const auto v = std::stoull(raw, &pos);
                if (pos != raw.size()) throw bad();
                return v;
            }
            case KeyType::number: {
                const double v = std::stod(raw, &pos);
                if (pos != raw.size()) throw bad();
                return v;
            }
            case KeyType::text: return raw;
            case KeyType::boolean:
                if (raw == "true" || raw == "1") return true;
                if (raw == "false" || raw == "0") return false;
                throw bad();
            case KeyType::integer_list:
            case KeyType::number_list:
            case KeyType::text_list: {
                json arr = json::array();
                const KeyType elem = type == KeyType::integer_list  ? KeyType::integer
                                     : type == KeyType::number_list ? KeyType::number
                                                                    : KeyType::text;
                for (const auto& item : split_list(raw)) arr.push_back(parse_value(key, elem, item));
                return arr;
            }
        }
    } catch (const std::invalid_argument&) {
        throw bad();
    } catch (const std::out_of_range&) {
        throw bad();
    }
    throw bad();
}

inline void check_type(const std::string& key, KeyType type, const json& v) {
    auto fail = [&] { throw FormatError("config key '" + key + "' has the wrong type"); };
    auto is_list_of = [&](auto pred) {
        if (!v.is_array()) fail();
        for (const auto& e : v)
            if (!pred(e)) fail();
    };
    switch (type) {
        case KeyType::integer:
            if (!v.is_number_unsigned()) fail();
            break;
        case KeyType::number:
            if (!v.is_number()) fail();
            break;
        case KeyType::text:
            if (!v.is_string()) fail();
            break;
        case KeyType::boolean:
            if (!v.is_boolean()) fail();
            break;
        case KeyType::integer_list: is_list_of([](const json& e) { return e.is_number_unsigned(); }); break;
        case KeyType::number_list: is_list_of([](const json& e) { return e.is_number(); }); break;
        case KeyType::text_list: is_list_of([](const json& e) { return e.is_string(); }); break;
    }
}

} // namespace detail

// Flat config object with lookups by key.
class Config {
public:
    explicit Config(json j = json::object()) : j_(std::move(j)) {}

    static Config from_file(const std::filesystem::path& path) {
        const auto bytes = read_file(path);
        json j;
        try {
            j = json::parse(bytes.begin(), bytes.end());
        } catch (const json::parse_error& e) {
            throw FormatError("config '" + path.string() + "' is not valid JSON: " + e.what());
        }
        if (!j.is_object()) throw FormatError("config must be a flat JSON object");
        Config c;
        for (const auto& [k, v] : j.items()) c.set(k, v);
        return c;
    }

    void set(const std::string& key, const json& v) {
        const auto it = schema().find(key);
        if (it == schema().end()) throw FormatError("unknown config key '" + key + "'");
        detail::check_type(key, it->second.type, v);
        j_[key] = v;
    }

    bool has(const std::string& k) const { return j_.contains(k); }
    const json& raw() const { return j_; }

    template <typename V>
    V get(const std::string& k, V fallback) const {
        return has(k) ? j_.at(k).get<V>() : fallback;
    }
    template <typename V>
    std::optional<V> opt(const std::string& k) const {
        if (!has(k)) return std::nullopt;
        return j_.at(k).get<V>();
    }
    std::string require_text(const std::string& k) const {
        if (!has(k)) throw FormatError("missing required key '" + k + "' (" + flag_name(k) + ")");
        return j_.at(k).get<std::string>();
    }

private:
    json j_;
};

inline ModelSpec spec_from_config(const Config& c) {
    ModelSpec s;
    s.family = family_from_string(c.get<std::string>("family", "mlp"));
    s.width = c.get<std::size_t>("width", s.width);
    s.depth = c.get<std::size_t>("depth", s.depth);
    if (s.family == Family::mini_vit) {
        s.patch_size = c.get<std::size_t>("patch_size", 2);
        s.head_dim = c.get<std::size_t>("head_dim", 4);
        s.heads = c.get<std::size_t>("heads", s.head_dim ? s.width / s.head_dim : 0);
    } else {
        s.patch_size = c.get<std::size_t>("patch_size", 1);
    }
    if (c.has("input_shape")) {
        const auto v = c.raw().at("input_shape").get<std::vector<std::size_t>>();
        if (v.size() != 3) throw SpecError("input_shape must have three entries (C,H,W)");
        s.input_shape = {v[0], v[1], v[2]};
    }
    s.num_classes = c.get<std::size_t>("num_classes", s.num_classes);
    s.validate();
    return s;
}

inline TrainConfig train_config_from(const Config& c) {
    TrainConfig t;
    t.optimizer.kind = optimizer_from_string(c.get<std::string>("optimizer", "adamw"));
    t.optimizer.lr = c.get<double>("lr", t.optimizer.lr);
    t.optimizer.weight_decay = c.get<double>("weight_decay", t.optimizer.weight_decay);
    t.optimizer.momentum = c.get<double>("momentum", t.optimizer.momentum);
    t.optimizer.beta1 = c.get<double>("beta1", t.optimizer.beta1);
    t.optimizer.beta2 = c.get<double>("beta2", t.optimizer.beta2);
    t.batch_size = c.get<std::size_t>("batch_size", t.batch_size);
    t.warmup_epochs = c.get<std::size_t>("warmup_epochs", t.warmup_epochs);
    t.seed = c.get<std::uint64_t>("seed", 0);
    t.precision = precision_from_string(c.get<std::string>("precision", "f64"));
    t.optimizer.validate();
    return t;
}

inline std::pair<Dataset, Dataset> datasets_from(const Config& c, const ModelSpec& spec) {
    const std::string source = c.get<std::string>("data", "synthetic");
    if (source == "synthetic") {
        SyntheticOptions so;
        so.noise_std = c.get<double>("noise_std", so.noise_std);
        const auto seed = c.get<std::uint64_t>("data_seed", 0);
        const Shape shape{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
        return {gen_synthetic(spec.num_classes, c.get<std::size_t>("per_class", 64), shape, seed, Split::train, so),
                gen_synthetic(spec.num_classes, c.get<std::size_t>("eval_per_class", 32), shape, seed, Split::eval, so)};
    }
    if (source == "idx") {
        auto load = [&](const char* ik, const char* lk, Split split) {
            const auto images = parse_idx(read_file(c.require_text(ik)));
            const auto labels = parse_idx(read_file(c.require_text(lk)));
            for (const auto* a : {&images, &labels})
                for (const auto& w : a->warnings) std::cerr << "warning: " << w << '\n';
            return dataset_from_idx(images, labels, spec.num_classes, split);
        };
        return {load("train_images", "train_labels", Split::train), load("eval_images", "eval_labels", Split::eval)};
    }
    throw FormatError("unknown data source '" + source + "' (expected synthetic or idx)");
}

namespace detail {

inline std::filesystem::path out_dir(const Config& c) {
    std::filesystem::path p = c.get<std::string>("out", "rbdc_out");
    std::filesystem::create_directories(p);
    return p;
}

inline RoundingPolicy rounding_from(const Config& c) {
    const auto r = c.get<std::string>("rounding", "nearest");
    if (r == "nearest") return RoundingPolicy::nearest;
    if (r == "target_nearest_floor") return RoundingPolicy::target_nearest_floor;
    throw FormatError("unknown rounding '" + r + "'");
}

inline PaddingMode padding_from(const Config& c) {
    PaddingMode p;
    p.kind = padding_from_string(c.get<std::string>("padding", "zero"));
    p.stddev = c.get<double>("padding_std", kInitStd);
    return p;
}

inline int cmd_plan(const Config& c, std::ostream& out) {
    const double r = c.get<double>("ratio", 2.0);
    const std::size_t steps = c.get<std::size_t>("steps", 1);
    const double baseline = c.get<double>("baseline_epochs", c.get<double>("epochs", 0.0));
    CostModel cost;
    std::optional<std::size_t> width;
    if (c.has("forward_costs")) {
        cost.forward = c.raw().at("forward_costs").get<std::vector<double>>();
        cost.dataset_size = c.get<double>("dataset_size", 1.0);
    } else {
        const auto spec = spec_from_config(c);
        cost = CostModel::from_spec(spec, steps, c.get<double>("dataset_size", 1.0));
        width = spec.width;
    }
    std::string planner = c.get<std::string>("planner", "");
    if (planner.empty())
        planner = c.has("allocation") ? "allocation"
                  : c.has("alpha")    ? "alpha"
                  : c.has("budget")   ? "flops_split"
                                      : c.get<std::string>("mode", "epoch_split");
    const auto rounding = rounding_from(c);
    BudgetPlan plan;
    if (planner == "allocation") {
        if (!c.has("allocation")) throw FormatError("planner 'allocation' needs --allocation");
        plan = plan_from_allocation(cost, c.raw().at("allocation").get<std::vector<std::size_t>>(), r, baseline, width);
    } else if (planner == "alpha" || planner == "alpha_approx") {
        plan = plan_alpha(cost, c.get<double>("alpha", 1.0), r, steps, baseline, planner == "alpha_approx", rounding,
                          width);
    } else if (planner == "flops_split") {
        const double budget =
            c.has("budget") ? c.get<double>("budget", 0.0)
                            : training_flops(cost.forward.at(0), c.get<double>("epochs", baseline), cost.dataset_size);
        plan = plan_flops_split(cost, budget, r, steps, baseline, rounding, width);
    } else if (planner == "epoch_split") {
        plan = plan_epoch_split(cost, c.get<double>("epochs", baseline), r, steps, baseline, rounding, width);
    } else {
        throw FormatError("unknown planner '" + planner + "'");
    }
    const auto dir = out_dir(c);
    const auto j = plan.to_json();
    write_text_atomic(dir / "plan.json", j.dump(2) + "\n");
    write_text_atomic(dir / "plan.csv", plan.to_csv());
    out << j.dump(2) << '\n';
    return ok;
}

inline int cmd_flops(const Config& c, std::ostream& out) {
    const auto spec = spec_from_config(c);
    const auto fc = forward_cost(spec);
    json layers = json::array();
    for (const auto& l : fc.layers) layers.push_back({{"name", l.name}, {"macs", l.macs}, {"flops", 2.0 * l.macs}});
    const double epochs = c.get<double>("epochs", 1.0);
    const double d = c.get<double>("dataset_size", 1.0);
    const json j{{"spec", spec_to_json(spec)},
                 {"forward_macs", fc.macs()},
                 {"forward_flops", fc.flops()},
                 {"layers", layers},
                 {"epochs", epochs},
                 {"dataset_size", d},
                 {"training_flops", training_flops(fc.flops(), epochs, d)},
                 {"convention", kFlopsConvention}};
    write_text_atomic(out_dir(c) / "flops.json", j.dump(2) + "\n");
    out << j.dump(2) << '\n';
    return ok;
}

template <typename T>
int train_typed(const Config& c, std::ostream& out) {
    const auto spec = spec_from_config(c);
    auto [train_set, eval_set] = datasets_from(c, spec);
    TrainConfig tc = train_config_from(c);
    const std::string protocol = c.get<std::string>("protocol", c.get<std::size_t>("steps", 0) > 0 ? "rbdc" : "baseline");
    ExperimentPlan plan;
    plan.protocol = protocol;
    plan.steps = protocol == "baseline" ? 0 : c.get<std::size_t>("steps", 1);
    plan.r = c.get<double>("ratio", 2.0);
    plan.mode = split_mode_from_string(c.get<std::string>("mode", "epoch_split"));
    plan.epochs = c.get<double>("epochs", 10.0);
    plan.flops_budget = c.opt<double>("budget");
    const double baseline = c.get<double>("baseline_epochs", plan.epochs);
    std::vector<std::uint64_t> seeds{tc.seed};
    if (c.has("seeds")) seeds = c.raw().at("seeds").get<std::vector<std::uint64_t>>();

    const auto dir = out_dir(c);
    save_dataset(train_set, dir / "train.rbds");
    save_dataset(eval_set, dir / "eval.rbds");
    std::vector<CurveRow> rows;
    for (auto seed : seeds) {
        plan.seed = seed;
        RbdcOptions opt;
        opt.r = plan.r;
        opt.mode = plan.mode;
        opt.epochs = plan.epochs;
        opt.flops_budget = plan.flops_budget;
        opt.padding = padding_from(c);
        opt.rounding = rounding_from(c);
        opt.min_size = c.get<std::size_t>("min_size", (spec.width >> plan.steps) + 1);
        TrainConfig run_cfg = tc;
        run_cfg.seed = seed;
        auto res = rbdc_train<T>(spec, train_set, &eval_set, run_cfg, opt);
        const double base = training_flops(forward_flops(spec), baseline, static_cast<double>(train_set.size()));
        rows.push_back({plan.protocol, plan.steps, plan.r, res.record.tree_flops() / base,
                        res.record.final_accuracy(), seed});
        const auto sub = dir / ("seed_" + std::to_string(seed));
        save(res.checkpoint, sub / "model.ckpt");
        write_text_atomic(sub / "record.json", res.record.to_json().dump(2) + "\n");
    }
    const auto csv = curve_csv(rows);
    write_text_atomic(dir / "curve.csv", csv);
    out << csv;
    return ok;
}

inline int cmd_train(const Config& c, std::ostream& out) {
    return precision_from_string(c.get<std::string>("precision", "f64")) == Precision::f32 ? train_typed<float>(c, out)
                                                                                            : train_typed<double>(c, out);
}

inline VerifyMode verify_mode_for(const Config& c, Family f) {
    return c.has("verify_mode") ? verify_mode_from_string(c.get<std::string>("verify_mode", "")) : default_verify_mode(f);
}

inline int cmd_couple(const Config& c, std::ostream& out) {
    const auto n1 = load(c.require_text("narrow1"));
    const auto n2 = load(c.require_text("narrow2"));
    const auto wide = couple_checkpoint(n1, n2, padding_from(c), c.get<std::uint64_t>("seed", 0));
    const auto rep = verify_ensemble_equivalence(wide, n1, n2, c.get<std::size_t>("probes", 128),
                                                 verify_mode_for(c, wide.spec.family), c.get<std::uint64_t>("seed", 0));
    const auto dir = out_dir(c);
    save(wide, dir / "wide.ckpt");
    write_text_atomic(dir / "coupling_report.json", rep.to_json().dump(2) + "\n");
    out << rep.to_json().dump(2) << '\n';
    return ok;
}

inline int cmd_verify(const Config& c, std::ostream& out) {
    const auto wide = load(c.require_text("wide"));
    const auto n1 = load(c.require_text("narrow1"));
    const auto n2 = load(c.require_text("narrow2"));
    const auto rep = verify_ensemble_equivalence(wide, n1, n2, c.get<std::size_t>("probes", 128),
                                                 verify_mode_for(c, wide.spec.family), c.get<std::uint64_t>("seed", 0));
    write_text_atomic(out_dir(c) / "verify_report.json", rep.to_json().dump(2) + "\n");
    out << rep.to_json().dump(2) << '\n';
    return rep.pass ? ok : verification_failed;
}

inline int cmd_report(const Config& c, std::ostream& out) {
    if (!c.has("inputs")) throw FormatError("report needs --inputs");
    std::vector<CurveRow> rows;
    for (const auto& in : c.raw().at("inputs").get<std::vector<std::string>>()) {
        std::filesystem::path p = in;
        if (std::filesystem::is_directory(p)) {
            // Train output: curve plus the record trees it summarizes.
            for (const auto& e : std::filesystem::directory_iterator(p))
                if (e.is_directory() && std::filesystem::exists(e.path() / "record.json")) {
                    const auto bytes = read_file(e.path() / "record.json");
                    try {
                        RunRecord::from_json(json::parse(bytes.begin(), bytes.end()));
                    } catch (const json::parse_error& err) {
                        throw FormatError("'" + (e.path() / "record.json").string() + "': " + err.what());
                    }
                }
            p /= "curve.csv";
        }
        const auto bytes = read_file(p);
        for (auto& r : parse_curve_csv(std::string(bytes.begin(), bytes.end()))) rows.push_back(std::move(r));
    }
    const auto csv = curve_csv(rows);
    write_text_atomic(out_dir(c) / "report.csv", csv);
    out << csv;
    return ok;
}

} // namespace detail

// Runs one command; never throws.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Recursive block-diagonal coupling toolkit"};
    app.require_subcommand(1);
    struct Command {
        const char* name;
        const char* help;
        int (*run)(const Config&, std::ostream&);
    };
    const std::vector<Command> commands{
        {"plan", "budget plan as JSON and CSV", detail::cmd_plan},
        {"train", "train baseline or recursive models; writes checkpoints, records and a curve", detail::cmd_train},
        {"couple", "couple two narrow checkpoints", detail::cmd_couple},
        {"verify", "verify a coupled checkpoint against its sources (exit 2 on failure)", detail::cmd_verify},
        {"flops", "forward and training FLOPs of a model spec", detail::cmd_flops},
        {"report", "merge curve CSVs", detail::cmd_report},
    };
    std::map<std::string, std::string> config_paths;
    std::map<std::string, std::map<std::string, std::string>> values;
    for (const auto& cmd : commands) {
        auto* sub = app.add_subcommand(cmd.name, cmd.help);
        sub->add_option("--config", config_paths[cmd.name], "flat JSON config file");
        for (const auto& [key, info] : schema())
            sub->add_option(flag_name(key), values[cmd.name][key], info.help);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : invalid;
    }
    for (const auto& cmd : commands) {
        auto* sub = app.get_subcommand(cmd.name);
        if (!sub->parsed()) continue;
        try {
            Config c = config_paths[cmd.name].empty() ? Config{} : Config::from_file(config_paths[cmd.name]);
            for (const auto& [key, info] : schema())
                if (sub->count(flag_name(key)) > 0)
                    c.set(key, detail::parse_value(key, info.type, values[cmd.name][key]));
            return cmd.run(c, out);
        } catch (const TrainingError& e) {
            err << "training error: " << e.what() << '\n';
            return training_failed;
        } catch (const VerificationError& e) {
            err << "verification refused: " << e.what() << '\n';
            return verification_failed;
        } catch (const std::exception& e) {
            err << "error: " << e.what() << '\n';
            return invalid;
        }
    }
    return invalid;
}

} // namespace rbdc::cli
