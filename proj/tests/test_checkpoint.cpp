// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace rbdc;
using rbdc::testing::scratch_dir;
using rbdc::testing::small_spec;

namespace {

Checkpoint sample(Family f, std::uint64_t seed = 3) {
    auto m = Model<double>::build(small_spec(f), seed);
    CheckpointMetadata md;
    md.seed = seed;
    md.epochs_trained = 4;
    md.lineage.id = "leaf";
    md.extra = json{{"note", "x"}};
    return to_checkpoint(m, md);
}

std::vector<std::uint8_t> with_manifest(const Checkpoint& c, const std::function<void(json&)>& edit) {
    auto m = manifest_of(c);
    edit(m);
    return encode_container(m, c.blob);
}

} // namespace

TEST_CASE("save and load are bit-exact for every family and precision") {
    const auto dir = scratch_dir("ckpt_roundtrip");
    for (auto f : {Family::mlp, Family::mini_cnn, Family::mini_vit}) {
        const auto c64 = sample(f);
        save(c64, dir / "a.ckpt");
        const auto back = load(dir / "a.ckpt");
        CHECK(back == c64);
        CHECK(to_model<double>(back).bit_equal(to_model<double>(c64)));

        const auto c32 = to_checkpoint(Model<float>::build(small_spec(f), 9));
        save(c32, dir / "b.ckpt");
        const auto back32 = load(dir / "b.ckpt");
        CHECK(back32 == c32);
        CHECK(checkpoint_precision(back32) == Precision::f32);
        CHECK(to_model<float>(back32).bit_equal(Model<float>::build(small_spec(f), 9)));
    }
}

TEST_CASE("header layout") {
    const auto bytes = serialize(sample(Family::mlp));
    CHECK(std::memcmp(bytes.data(), "RBDCCKPT", 8) == 0);
    CHECK(bytes[8] == 1);
    CHECK(bytes[9] == 0);
    std::uint64_t mlen = 0;
    for (int i = 7; i >= 0; --i) mlen = (mlen << 8) | bytes[12 + static_cast<std::size_t>(i)];
    const auto manifest = json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<long>(mlen));
    CHECK(manifest.at("kind") == "checkpoint");
    CHECK(manifest.at("blob_length").get<std::size_t>() == bytes.size() - 20 - mlen);
}

TEST_CASE("precision conversion on read") {
    const auto c = sample(Family::mlp);
    const auto m32 = to_model<float>(c);
    const auto m64 = to_model<double>(c);
    for (std::size_t i = 0; i < m32.parameters().size(); ++i)
        CHECK(m32.parameters()[i].value.cast<double>().max_abs_diff(m64.parameters()[i].value) < 1e-7);
}

TEST_CASE("corrupt containers raise format errors") {
    const auto c = sample(Family::mlp);
    auto bytes = serialize(c);

    SECTION("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_WITH(deserialize(bytes), Catch::Matchers::ContainsSubstring("magic"));
    }
    SECTION("bad version") {
        bytes[8] = 9;
        CHECK_THROWS_WITH(deserialize(bytes), Catch::Matchers::ContainsSubstring("version"));
    }
    SECTION("truncated header") {
        bytes.resize(10);
        CHECK_THROWS_AS(deserialize(bytes), FormatError);
    }
    SECTION("manifest length past end") {
        bytes[19] = 0x7f;
        CHECK_THROWS_WITH(deserialize(bytes), Catch::Matchers::ContainsSubstring("manifest length"));
    }
    SECTION("truncated blob names the first bad record") {
        bytes.resize(bytes.size() - 8);
        CHECK_THROWS_WITH(deserialize(bytes), Catch::Matchers::ContainsSubstring("head.bias"));
    }
    SECTION("manifest is not JSON") {
        bytes[20] = '!';
        CHECK_THROWS_WITH(deserialize(bytes), Catch::Matchers::ContainsSubstring("JSON"));
    }
    SECTION("unknown spec key") {
        const auto b = with_manifest(c, [](json& m) { m["spec"]["colour"] = "red"; });
        CHECK_THROWS_WITH(deserialize(b), Catch::Matchers::ContainsSubstring("colour"));
    }
    SECTION("unknown role") {
        const auto b = with_manifest(c, [](json& m) { m["records"][0]["role"] = "wormhole"; });
        CHECK_THROWS_AS(deserialize(b), FormatError);
    }
    SECTION("overlapping records") {
        const auto b = with_manifest(c, [](json& m) { m["records"][1]["byte_offset"] = 0; });
        CHECK_THROWS_WITH(deserialize(b), Catch::Matchers::ContainsSubstring("overlap"));
    }
    SECTION("duplicate names") {
        const auto b = with_manifest(c, [](json& m) { m["records"][1]["name"] = m["records"][0]["name"]; });
        CHECK_THROWS_WITH(deserialize(b), Catch::Matchers::ContainsSubstring("duplicate"));
    }
    SECTION("declared blob length disagrees") {
        const auto b = with_manifest(c, [](json& m) { m["blob_length"] = 3; });
        CHECK_THROWS_WITH(deserialize(b), Catch::Matchers::ContainsSubstring("blob length"));
    }
}

TEST_CASE("spec validation of checkpoints") {
    auto c = sample(Family::mlp);
    CHECK_NOTHROW(validate(c));
    auto wrong = c;
    wrong.spec.width = 32;
    CHECK_THROWS_AS(validate_against_spec(wrong), FormatError);
    CHECK_THROWS_AS(to_model<double>(wrong), FormatError);
}

TEST_CASE("lineage validation") {
    Lineage root{"r", 0, 16, 0, {Lineage{"a", 1, 8, 2, {}}, Lineage{"b", 2, 8, 2, {}}}};
    CHECK_NOTHROW(validate_lineage(root));
    CHECK(root.depth() == 1);
    root.children[1].width = 4;
    CHECK_THROWS_AS(validate_lineage(root), FormatError);
    root.children.pop_back();
    CHECK_THROWS_AS(validate_lineage(root), FormatError);
    CHECK(lineage_from_json(lineage_to_json(root)) == root);
}

TEST_CASE("atomic writes leave no temporary behind") {
    const auto dir = scratch_dir("ckpt_atomic");
    save(sample(Family::mini_vit), dir / "m.ckpt");
    CHECK(std::filesystem::exists(dir / "m.ckpt"));
    CHECK_FALSE(std::filesystem::exists(dir / "m.ckpt.tmp"));
    CHECK_THROWS_AS(load(dir / "missing.ckpt"), FormatError);
}
