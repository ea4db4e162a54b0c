// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace rbdc;
using rbdc::testing::random_tensor;
using rbdc::testing::small_spec;

namespace {

template <typename T>
Checkpoint narrow(Family f, std::uint64_t seed, const std::string& id, std::size_t width = 8) {
    auto m = Model<T>::build(small_spec(f, width), seed);
    // Move away from the zero-bias init so every block carries information.
    std::uint64_t k = seed * 100;
    for (auto& p : m.parameters()) {
        if (p.info.name.find("running_var") != std::string::npos) continue;
        p.value = random_tensor(p.value.shape(), ++k, 0.3).template cast<T>();
    }
    CheckpointMetadata md;
    md.seed = seed;
    md.lineage = Lineage{id, seed, width, 1, {}};
    return to_checkpoint(m, md);
}

} // namespace

TEST_CASE("block_diag places each block and pads the rest") {
    const auto a = random_tensor({2, 3}, 1), b = random_tensor({4, 5}, 2);
    const auto w = block_diag(a, b);
    REQUIRE(w.shape() == Shape{6, 8});
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            if (i < 2 && j < 3)
                CHECK(w.at(i, j) == a.at(i, j));
            else if (i >= 2 && j >= 3)
                CHECK(w.at(i, j) == b.at(i - 2, j - 3));
            else
                CHECK((w.at(i, j) == 0.0 && !std::signbit(w.at(i, j))));
        }
    Rng rng(4);
    const auto r = block_diag(a, b, PaddingMode::random(0.1), &rng);
    CHECK(r.at(0, 5) != 0.0);
    CHECK(std::abs(r.at(5, 0)) <= 0.2);
    CHECK_THROWS_AS(block_diag(a, b, PaddingMode::random()), RuleError);
}

TEST_CASE("qkv sections are coupled independently") {
    const std::size_t n1 = 2, n2 = 3;
    const auto w1 = random_tensor({3 * n1, n1}, 1), w2 = random_tensor({3 * n2, n2}, 2);
    const auto b1 = random_tensor({3 * n1}, 3), b2 = random_tensor({3 * n2}, 4);
    const auto p = couple_qkv(w1, b1, w2, b2);
    const std::size_t n = n1 + n2;
    REQUIRE(p.weight.shape() == Shape{3 * n, n});
    for (std::size_t s = 0; s < 3; ++s) {
        for (std::size_t i = 0; i < n; ++i) {
            const double bias = i < n1 ? b1[s * n1 + i] : b2[s * n2 + i - n1];
            CHECK(p.bias[s * n + i] == bias);
            for (std::size_t j = 0; j < n; ++j) {
                double expect = 0;
                if (i < n1 && j < n1) expect = w1.at(s * n1 + i, j);
                if (i >= n1 && j >= n1) expect = w2.at(s * n2 + i - n1, j - n1);
                CHECK(p.weight.at(s * n + i, j) == expect);
            }
        }
    }
    CHECK_THROWS_AS(couple_qkv(random_tensor({4, 2}, 1), b1, w2, b2), RuleError);
}

TEST_CASE("head averages the two classifiers") {
    const auto w1 = random_tensor({4, 2}, 1), w2 = random_tensor({4, 3}, 2);
    const auto b1 = random_tensor({4}, 3), b2 = random_tensor({4}, 4);
    const auto p = couple_head(w1, b1, w2, b2);
    REQUIRE(p.weight.shape() == Shape{4, 5});
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(p.bias[i] == (b1[i] + b2[i]) / 2);
        for (std::size_t j = 0; j < 5; ++j) CHECK(p.weight.at(i, j) == 0.5 * (j < 2 ? w1.at(i, j) : w2.at(i, j - 2)));
    }
    CHECK_THROWS_AS(couple_head(w1, b1, random_tensor({3, 3}, 5), random_tensor({3}, 6)), ShapeError);
}

TEST_CASE("conv kernels are block-diagonal per spatial slice") {
    const auto k1 = random_tensor({2, 3, 3, 3}, 1), k2 = random_tensor({4, 1, 3, 3}, 2);
    const auto p = couple_conv(k1, random_tensor({2}, 3), k2, random_tensor({4}, 4));
    REQUIRE(p.weight.shape() == Shape{6, 4, 3, 3});
    for (std::size_t o = 0; o < 6; ++o)
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t y = 0; y < 3; ++y)
                for (std::size_t x = 0; x < 3; ++x) {
                    double expect = 0;
                    if (o < 2 && i < 3) expect = k1.at(o, i, y, x);
                    if (o >= 2 && i >= 3) expect = k2.at(o - 2, i - 3, y, x);
                    CHECK(p.weight.at(o, i, y, x) == expect);
                }
    CHECK_THROWS_AS(couple_conv(k1, random_tensor({2}, 3), random_tensor({4, 1, 1, 1}, 5), random_tensor({4}, 4)),
                    ShapeError);
}

TEST_CASE("norms, stems and embeddings concatenate") {
    NormParams<double> a{NormKind::batch_norm, random_tensor({2}, 1), random_tensor({2}, 2), random_tensor({2}, 3),
                         random_tensor({2}, 4)};
    NormParams<double> b{NormKind::batch_norm, random_tensor({3}, 5), random_tensor({3}, 6), random_tensor({3}, 7),
                         random_tensor({3}, 8)};
    const auto n = couple_norm(a, b);
    CHECK(n.running_var.size() == 5);
    CHECK(n.running_var[1] == a.running_var[1]);
    CHECK(n.running_var[4] == b.running_var[2]);
    b.kind = NormKind::layer_norm;
    CHECK_THROWS_AS(couple_norm(a, b), RuleError);

    const auto p1 = random_tensor({5, 2}, 9), p2 = random_tensor({5, 3}, 10);
    const auto pos = couple_stem_and_embeddings(p1, p2, LayerRole::pos_embed);
    CHECK(pos.shape() == Shape{5, 5});
    CHECK(pos.at(4, 3) == p2.at(4, 1));
    const auto stem = couple_stem_and_embeddings(random_tensor({2, 7}, 1), random_tensor({3, 7}, 2), LayerRole::conv_stem);
    CHECK(stem.shape() == Shape{5, 7});
    CHECK_THROWS_AS(couple_stem_and_embeddings(p1, p2, LayerRole::head), RuleError);
}

TEST_CASE("coupled checkpoints are ensembles of their parents") {
    for (auto f : {Family::mlp, Family::mini_cnn, Family::mini_vit}) {
        const auto mode = default_verify_mode(f);
        const auto a = narrow<double>(f, 1, "a"), b = narrow<double>(f, 2, "b");
        const auto w = couple_checkpoint(a, b);
        CHECK(w.spec.width == 16);
        CHECK(w.metadata.lineage.children.size() == 2);
        CHECK(w.metadata.extra.at("padding") == "zero");
        const auto rep = verify_ensemble_equivalence(w, a, b, 128, mode);
        CHECK(rep.pass);
        CHECK(rep.offdiag_nonzero == 0);
        CHECK(rep.diag_mismatches == 0);
        CHECK(rep.max_deviation <= 1e-10);

        // Every wide parameter is a narrow parameter, a padding zero, or the single averaged head bias.
        const auto count = [](const Checkpoint& c) { return to_model<double>(c).parameter_count(); };
        CHECK(count(w) == count(a) + count(b) + rep.offdiag_elements - 8);

        const auto a32 = narrow<float>(f, 1, "a"), b32 = narrow<float>(f, 2, "b");
        const auto rep32 = verify_ensemble_equivalence(couple_checkpoint(a32, b32), a32, b32, 128, mode);
        CHECK(rep32.pass);
        CHECK(rep32.max_deviation <= 1e-5);
    }
}

TEST_CASE("joint layer norm mode checks the embedding concatenation") {
    const auto a = narrow<double>(Family::mini_vit, 1, "a"), b = narrow<double>(Family::mini_vit, 2, "b");
    const auto w = couple_checkpoint(a, b);
    const auto rep = verify_ensemble_equivalence(w, a, b, 32, VerifyMode::joint_norm);
    CHECK_FALSE(rep.deviation_asserted);
    CHECK(rep.embed_concat_exact);
    CHECK(rep.pass);
    CHECK_THROWS_AS(verify_ensemble_equivalence(w, a, b, 32, VerifyMode::exact), VerificationError);
}

TEST_CASE("swapping the narrow models leaves the wide logits unchanged") {
    for (auto f : {Family::mlp, Family::mini_cnn}) {
        const auto a = narrow<double>(f, 1, "a"), b = narrow<double>(f, 2, "b");
        const auto x = make_probes<double>(a.spec, 16, 3);
        const auto ab = to_model<double>(couple_checkpoint(a, b)).logits(x);
        const auto ba = to_model<double>(couple_checkpoint(b, a)).logits(x);
        CHECK(ab.bit_equal(ba));
    }
}

TEST_CASE("random padding breaks the equivalence") {
    const auto a = narrow<double>(Family::mlp, 1, "a"), b = narrow<double>(Family::mlp, 2, "b");
    const auto w = couple_checkpoint(a, b, PaddingMode::random(0.05), 11);
    CHECK(w.metadata.extra.at("padding") == "random");
    const auto rep = verify_ensemble_equivalence(w, a, b, 64, VerifyMode::exact);
    CHECK(rep.offdiag_nonzero > 0);
    CHECK(rep.diagonal_ok);
    CHECK(rep.max_deviation > rep.tolerance);
    CHECK_FALSE(rep.pass);
    CHECK(couple_checkpoint(a, b, PaddingMode::random(0.05), 11) == w);
}

TEST_CASE("coupling refuses mismatched inputs") {
    const auto a = narrow<double>(Family::mlp, 1, "a"), b = narrow<double>(Family::mlp, 2, "b", 16);
    CHECK_THROWS_AS(couple_checkpoint(a, b), RuleError);
    const auto c = narrow<double>(Family::mlp, 3, "c");
    const auto w = couple_checkpoint(a, c);
    CHECK_THROWS_AS(verify_ensemble_equivalence(w, a, narrow<double>(Family::mlp, 4, "d"), 8, VerifyMode::exact),
                    VerificationError);
    CHECK_THROWS_AS(verify_ensemble_equivalence(w, a, c, 0, VerifyMode::exact), VerificationError);
}
