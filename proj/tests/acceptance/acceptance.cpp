// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance report: one PASS/FAIL line per criterion. Exit status 0 iff all pass.

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include "../gradient_cases.hpp"

using namespace rbdc;
using rbdc::testing::random_tensor;
using rbdc::testing::run_command;
using rbdc::testing::scratch_dir;
using rbdc::testing::small_spec;

namespace {

namespace fs = std::filesystem;

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

int report(int id, const std::string& name, const std::function<void(Outcome&)>& body) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body(o);
    } catch (const std::exception& e) {
        o.pass = false;
        o.detail << "[exception: " << e.what() << "] ";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << id << " (" << name << "): " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail.str()
              << "[" << std::fixed << std::setprecision(1) << secs << "s]" << std::defaultfloat << std::endl;
    return o.pass ? 0 : 1;
}

CostModel resnet_costs(std::size_t steps) {
    CostModel c;
    const std::vector<double> f{8.7e9, 2.2e9, 0.56e9, 1.4408e8};
    c.forward.assign(f.begin(), f.begin() + static_cast<long>(steps) + 1);
    c.dataset_size = 1281167;
    return c;
}

// Narrow checkpoint with every tensor moved off its initialization.
template <typename T>
Checkpoint narrow(Family f, std::uint64_t seed, const std::string& id) {
    auto m = Model<T>::build(small_spec(f, 8), seed);
    std::uint64_t k = seed * 100;
    for (auto& p : m.parameters()) {
        if (p.info.kind == ParamKind::running_var) continue;
        p.value = random_tensor(p.value.shape(), ++k, 0.3).template cast<T>();
    }
    CheckpointMetadata md;
    md.seed = seed;
    md.lineage = Lineage{id, seed, 8, 1, {}};
    return to_checkpoint(m, md);
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

// --- criteria -------------------------------------------------------------

void budget_reproduction(Outcome& o) {
    const std::vector<std::pair<std::vector<std::size_t>, double>> cases{
        {{44, 22}, 0.613}, {{42, 21, 10}, 0.613}, {{42, 20, 10, 5}, 0.615}};
    for (const auto& [alloc, expect] : cases) {
        const double n = plan_from_allocation(resnet_costs(alloc.size() - 1), alloc, 2, 90).normalized;
        o.detail << alloc.size() - 1 << "-step " << fmt(n) << "; ";
        o.require(std::abs(n - expect) <= 0.005, "allocation outside tolerance");
        // The reported two-decimal figure is a truncation (0.61502 prints as 0.61).
        o.require(std::floor(n * 100) == 61, "does not display as 0.61");
    }
    const auto c = resnet_costs(1);
    const double mg =
        normalized_flops(training_flops(c.forward[1], 90 + 74, c.dataset_size) + training_flops(c.forward[0], 14, c.dataset_size),
                         90, c);
    o.detail << "MixtureGrowth " << fmt(mg) << " ";
    o.require(std::abs(mg - 0.616) <= 0.005, "MixtureGrowth outside tolerance");
}

void epoch_split(Outcome& o) {
    const auto a = split_epoch_budget(300, 2);
    const auto b = split_epoch_budget(300, 1);
    o.detail << "(300,2)->(" << a.first << "," << a.second << ") (300,1)->(" << b.first << "," << b.second << ") ";
    o.require(a.first == 75 && a.second == 150, "r=2 split");
    o.require(b.first == 100 && b.second == 100, "r=1 split");
}

template <typename T>
void equivalence_at(Outcome& o, Family f, VerifyMode mode, double bound) {
    const auto a = narrow<T>(f, 1, "a"), b = narrow<T>(f, 2, "b");
    const auto rep = verify_ensemble_equivalence(couple_checkpoint(a, b), a, b, 128, mode);
    o.detail << to_string(f) << "/" << to_string(precision_of<T>()) << " " << fmt(rep.max_deviation, 2) << "; ";
    o.require(rep.pass && rep.max_deviation <= bound, std::string(to_string(f)) + " deviation");
}

void ensemble_equivalence(Outcome& o) {
    for (auto f : {Family::mlp, Family::mini_cnn, Family::mini_vit}) {
        const auto mode = f == Family::mini_vit ? VerifyMode::split_norm_debug : VerifyMode::exact;
        equivalence_at<float>(o, f, mode, 1e-5);
        equivalence_at<double>(o, f, mode, 1e-10);
    }
    for (bool single : {true, false}) {
        const auto rep = single ? [] {
            const auto a = narrow<float>(Family::mini_vit, 1, "a"), b = narrow<float>(Family::mini_vit, 2, "b");
            return verify_ensemble_equivalence(couple_checkpoint(a, b), a, b, 128, VerifyMode::joint_norm);
        }()
                                : [] {
                                      const auto a = narrow<double>(Family::mini_vit, 1, "a");
                                      const auto b = narrow<double>(Family::mini_vit, 2, "b");
                                      return verify_ensemble_equivalence(couple_checkpoint(a, b), a, b, 128,
                                                                         VerifyMode::joint_norm);
                                  }();
        o.require(rep.embed_concat_exact && rep.pass, "joint-norm embedding concatenation");
    }
    o.detail << "vit joint pre-LN concat exact";
}

template <typename T>
void audit_at(Outcome& o, Family f, std::size_t& off, std::size_t& diag) {
    const auto a = narrow<T>(f, 1, "a"), b = narrow<T>(f, 2, "b");
    const auto mode = f == Family::mini_vit ? VerifyMode::split_norm_debug : VerifyMode::exact;
    const auto rep = verify_ensemble_equivalence(couple_checkpoint(a, b), a, b, 8, mode);
    o.require(rep.offdiag_nonzero == 0, std::string(to_string(f)) + " non-zero padding");
    o.require(rep.diag_mismatches == 0, std::string(to_string(f)) + " diagonal mismatch");
    off += rep.offdiag_elements;
    diag += rep.diag_elements;
}

void audits(Outcome& o) {
    std::size_t off = 0, diag = 0;
    for (auto f : {Family::mlp, Family::mini_cnn, Family::mini_vit}) {
        audit_at<float>(o, f, off, diag);
        audit_at<double>(o, f, off, diag);
    }
    o.detail << off << " off-diagonal zeros, " << diag << " diagonal elements bit-equal; ";
    for (auto f : {Family::mlp, Family::mini_cnn, Family::mini_vit}) {
        const auto a = narrow<double>(f, 1, "a"), b = narrow<double>(f, 2, "b");
        const auto x = make_probes<double>(a.spec, 128, 3);
        ForwardOptions opt;
        opt.norm_groups = f == Family::mini_vit ? 2 : 1;
        auto logits = [&](const Checkpoint& w) {
            auto m = to_model<double>(w);
            Tape<double> tape(false);
            return tape.value(m.forward(tape, x, opt).logits);
        };
        o.require(logits(couple_checkpoint(a, b)).bit_equal(logits(couple_checkpoint(b, a))),
                  std::string(to_string(f)) + " argument-order symmetry");
    }
    o.detail << "argument-order symmetry bit-exact (vit in split-norm mode)";
}

void gradients(Outcome& o) {
    double worst = 0;
    std::string worst_kind;
    const auto cases = rbdc::testing::op_cases();
    for (const auto& c : cases) {
        const double e = rbdc::testing::worst_error(c);
        if (e > worst) {
            worst = e;
            worst_kind = c.kind;
        }
        o.require(e <= rbdc::testing::kGradTol, c.kind);
    }
    o.detail << cases.size() << " ops x " << rbdc::testing::kGradShapes << " shapes, worst " << fmt(worst, 2) << " ("
             << worst_kind << ") ";
}

void planner_consistency(Outcome& o) {
    std::size_t checks = 0;
    for (std::size_t steps = 0; steps <= 3; ++steps)
        for (double r : {1.0, 1.5, 2.0, 3.0})
            for (double target : {3.0, 14.0, 44.0, 90.0, 300.0}) {
                const auto cost = resnet_costs(steps);
                const auto rounded = round_levels(level_epochs(target, r, steps));
                const double back =
                    epochs_from_flops_budget(pipeline_flops(cost, {rounded.begin(), rounded.end()}, steps), cost, r, steps);
                const auto again = round_levels(level_epochs(back, r, steps));
                for (std::size_t i = 0; i <= steps; ++i) {
                    ++checks;
                    o.require(std::abs(static_cast<double>(again[i]) - static_cast<double>(rounded[i])) <= 1,
                              "round trip level " + std::to_string(i));
                }
            }
    double worst = 0;
    for (std::size_t steps = 0; steps <= 4; ++steps)
        for (double r : {0.5, 1.0, 2.0, 4.0}) {
            const double exact = epochs_from_alpha(0.6, 90, r, steps, CostModel::quadratic(8.7e9, steps, 1000));
            const double approx = epochs_from_alpha(0.6, 90, r, steps);
            worst = std::max(worst, std::abs(exact - approx) / approx);
        }
    o.require(worst <= 1e-12, "exact vs approximate alpha");
    o.detail << checks << " round-trip levels within 1; alpha forms agree to " << fmt(worst, 2);
}

void desk_scale(Outcome& o) {
    ModelSpec s;
    s.family = Family::mlp;
    s.width = 64;
    s.depth = 1;
    s.input_shape = {3, 8, 8};
    s.num_classes = 8;
    const auto train_set = gen_synthetic(8, 128, {3, 8, 8}, 11, Split::train);
    const auto eval_set = gen_synthetic(8, 128, {3, 8, 8}, 11, Split::eval);
    TrainConfig tc;
    tc.epochs = 20;

    std::size_t close = 0, educated = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        tc.seed = seed;
        RbdcOptions rb;
        rb.mode = SplitMode::flops_split;  // budget defaults to the baseline's 20 epochs
        rb.epochs = 20;
        rb.min_size = s.width / 2 + 1;
        const auto r = rbdc_train<double>(s, train_set, &eval_set, tc, rb);
        auto random_wide = Model<double>::build(s, derive_seed(seed, "random-wide"));
        const double random_loss = evaluate(random_wide, eval_set).loss;
        educated += r.record.initial_eval_loss < random_loss;
        if (seed > 3) continue;

        RbdcOptions base;
        base.epochs = 20;
        base.min_size = s.width + 1;
        const auto b = rbdc_train<double>(s, train_set, &eval_set, tc, base);
        const double gap = r.record.final_accuracy() - b.record.final_accuracy();
        close += gap >= -0.02;
        const auto e = realized_level_epochs(r.record);
        o.detail << "seed " << seed << ": base " << fmt(b.record.final_accuracy(), 3) << " rbdc "
                 << fmt(r.record.final_accuracy(), 3) << " (" << e[0] << "/" << e[1] << " epochs, FLOPs x"
                 << fmt(r.record.tree_flops() / b.record.tree_flops(), 4) << "); ";
    }
    o.detail << "within 2pp " << close << "/3, educated init " << educated << "/5 ";
    o.require(close >= 2, "accuracy gap");
    o.require(educated >= 4, "educated initialization");
}

void format_round_trips(Outcome& o) {
    const auto dir = scratch_dir("acceptance_formats");
    std::size_t n = 0;
    for (auto f : {Family::mlp, Family::mini_cnn, Family::mini_vit})
        for (std::size_t w : {8u, 16u}) {
            const auto c64 = to_checkpoint(Model<double>::build(small_spec(f, w), w));
            const auto c32 = to_checkpoint(Model<float>::build(small_spec(f, w), w));
            save(c64, dir / "a.ckpt");
            save(c32, dir / "b.ckpt");
            o.require(load(dir / "a.ckpt") == c64 && serialize(load(dir / "a.ckpt")) == serialize(c64), "f64 checkpoint");
            o.require(load(dir / "b.ckpt") == c32 && serialize(load(dir / "b.ckpt")) == serialize(c32), "f32 checkpoint");
            n += 2;
        }
    std::vector<int> labels;
    for (int i = 0; i < 256; ++i) labels.push_back((i * 37) % 256);
    o.require(idx_labels(parse_idx(labels_to_idx(labels))) == labels, "IDX labels");
    Tensor<double> img(Shape{4, 5, 5});
    Rng rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    for (auto& v : img.data()) v = u(rng);
    const auto back = idx_images(parse_idx(images_to_idx(img)));
    const double err = back.max_abs_diff(img);
    o.require(err <= 1.0 / 255, "IDX images");
    o.detail << n << " checkpoints bit-exact; 256 IDX labels exact; image error " << fmt(err, 3) << " <= 1/255";
}

void cli_contract(Outcome& o) {
    const auto dir = scratch_dir("acceptance_cli");
    const std::string bin = RBDC_CLI_PATH;
    auto run = [&](const std::string& args) { return run_command(bin + " " + args).code; };
    const std::string data = " --family mlp --input-shape 3,8,8 --num-classes 4 --per-class 8 --eval-per-class 4 "
                             "--batch-size 16 --warmup-epochs 1 --epochs 2 ";
    auto train = [&](const std::string& name, std::size_t w, int seed) {
        const int code = run("train" + data + "--width " + std::to_string(w) + " --seed " + std::to_string(seed) +
                             " --out " + (dir / name).string());
        return std::pair{code, dir / name / ("seed_" + std::to_string(seed)) / "model.ckpt"};
    };
    const auto [ca, a] = train("a", 8, 1);
    const auto [cb, b] = train("b", 8, 2);
    const auto [cw, wide16] = train("w", 16, 3);
    o.require(ca == 0 && cb == 0 && cw == 0, "train exit 0");

    const int couple = run("couple --narrow1 " + a.string() + " --narrow2 " + b.string() + " --out " + (dir / "c").string());
    const int verify = run("verify --wide " + (dir / "c" / "wide.ckpt").string() + " --narrow1 " + a.string() +
                           " --narrow2 " + b.string() + " --out " + (dir / "v").string());
    const int mismatch = run("couple --narrow1 " + a.string() + " --narrow2 " + wide16.string() + " --out " +
                             (dir / "m").string());
    run("couple --padding random --seed 4 --narrow1 " + a.string() + " --narrow2 " + b.string() + " --out " +
        (dir / "r").string());
    const int failed = run("verify --wide " + (dir / "r" / "wide.ckpt").string() + " --narrow1 " + a.string() +
                           " --narrow2 " + b.string() + " --out " + (dir / "rv").string());
    const int diverge = run("train" + data + "--width 8 --lr 1e200 --out " + (dir / "d").string());
    const int plan = run("plan --forward-costs 8.7e9,2.2e9 --allocation 44,22 --baseline-epochs 90 --out " +
                         (dir / "p").string());
    const int flops = run("flops --family mlp --width 16 --input-shape 3,8,8 --num-classes 8 --out " + (dir / "f").string());
    const int rep = run("report --inputs " + (dir / "a").string() + "," + (dir / "b").string() + " --out " +
                        (dir / "rep").string());
    o.require(couple == 0 && verify == 0 && plan == 0 && flops == 0 && rep == 0, "exit 0 paths");
    o.require(mismatch == 1, "exit 1 on mismatched specs");
    o.require(failed == 2, "exit 2 on failed verification");
    o.require(diverge == 3, "exit 3 on divergence");

    // Every artifact loads back.
    std::size_t loaded = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto p = e.path();
        const auto ext = p.extension().string();
        const auto bytes = read_file(p);
        if (ext == ".ckpt") load(p);
        else if (ext == ".rbds") load_dataset(p);
        else if (p.filename() == "record.json") RunRecord::from_json(json::parse(bytes.begin(), bytes.end()));
        else if (ext == ".json") o.require(!json::parse(bytes.begin(), bytes.end()).is_null(), p.filename().string());
        else if (p.filename() == "plan.csv") o.require(std::string(bytes.begin(), bytes.end()).rfind("level,", 0) == 0, "plan csv");
        else if (ext == ".csv") parse_curve_csv(std::string(bytes.begin(), bytes.end()));
        else continue;
        ++loaded;
    }
    o.detail << "exit codes 0/1/2/3 = " << couple << "/" << mismatch << "/" << failed << "/" << diverge << "; " << loaded
             << " artifacts reloaded ";
}

} // namespace

int main() {
    int failures = 0;
    failures += report(1, "budget reproduction", budget_reproduction);
    failures += report(2, "epoch-split reproduction", epoch_split);
    failures += report(3, "ensemble equivalence", ensemble_equivalence);
    failures += report(4, "zero-block and diagonal audits", audits);
    failures += report(5, "gradient correctness", gradients);
    failures += report(6, "planner consistency", planner_consistency);
    failures += report(7, "desk-scale end-to-end run", desk_scale);
    failures += report(8, "format round-trips", format_round_trips);
    failures += report(9, "CLI contract", cli_contract);
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
