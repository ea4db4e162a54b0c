// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>

#include "rbdc/errors.hpp"

namespace rbdc {

enum class Family { mlp, mini_cnn, mini_vit };

inline const char* to_string(Family f) {
    switch (f) {
        case Family::mlp: return "mlp";
        case Family::mini_cnn: return "mini_cnn";
        case Family::mini_vit: return "mini_vit";
    }
    return "?";
}

inline Family family_from_string(const std::string& s) {
    if (s == "mlp") return Family::mlp;
    if (s == "mini_cnn") return Family::mini_cnn;
    if (s == "mini_vit") return Family::mini_vit;
    throw SpecError("unknown model family '" + s + "'");
}

// Every parameter tensor carries exactly one role; the role selects its coupling rule.
enum class LayerRole {
    attn_qkv,
    attn_proj,
    mlp_fc,
    head,
    conv,
    conv_stem,
    layer_norm,
    batch_norm,
    pos_embed,
    class_token,
};

inline const char* to_string(LayerRole r) {
    switch (r) {
        case LayerRole::attn_qkv: return "attn_qkv";
        case LayerRole::attn_proj: return "attn_proj";
        case LayerRole::mlp_fc: return "mlp_fc";
        case LayerRole::head: return "head";
        case LayerRole::conv: return "conv";
        case LayerRole::conv_stem: return "conv_stem";
        case LayerRole::layer_norm: return "layer_norm";
        case LayerRole::batch_norm: return "batch_norm";
        case LayerRole::pos_embed: return "pos_embed";
        case LayerRole::class_token: return "class_token";
    }
    return "?";
}

inline LayerRole role_from_string(const std::string& s) {
    static constexpr std::array roles{LayerRole::attn_qkv,  LayerRole::attn_proj,  LayerRole::mlp_fc,
                                      LayerRole::head,      LayerRole::conv,       LayerRole::conv_stem,
                                      LayerRole::layer_norm, LayerRole::batch_norm, LayerRole::pos_embed,
                                      LayerRole::class_token};
    for (LayerRole r : roles)
        if (s == to_string(r)) return r;
    throw FormatError("unknown layer role '" + s + "'");
}

// Architecture description. `width` is the embedding dimension (mini_vit),
// the first-stage channel count (mini_cnn) or the hidden width (mlp).
// `depth` counts hidden layers (mlp), stages (mini_cnn) or blocks (mini_vit).
struct ModelSpec {
    Family family = Family::mlp;
    std::size_t width = 16;
    std::size_t depth = 1;
    std::size_t heads = 0;     // mini_vit only
    std::size_t head_dim = 0;  // mini_vit only; constant under halving
    std::size_t patch_size = 1;
    std::array<std::size_t, 3> input_shape{3, 8, 8};  // channels, height, width
    std::size_t num_classes = 8;
    std::size_t min_width = 1;

    static constexpr std::size_t mlp_ratio = 4;

    std::size_t input_features() const { return input_shape[0] * input_shape[1] * input_shape[2]; }

    std::size_t patch_grid() const { return (input_shape[1] / patch_size) * (input_shape[2] / patch_size); }
    std::size_t tokens() const { return patch_grid() + 1; }

    void validate() const {
        auto fail = [](const std::string& m) { throw SpecError("invalid model spec: " + m); };
        if (width == 0) fail("width must be positive");
        if (depth == 0) fail("depth must be positive");
        if (num_classes < 2) fail("num_classes must be at least 2");
        for (std::size_t d : input_shape)
            if (d == 0) fail("input_shape entries must be positive");
        if (width < min_width) fail("width " + std::to_string(width) + " below min_width " + std::to_string(min_width));
        if (family == Family::mini_vit) {
            if (heads == 0 || head_dim == 0) fail("mini_vit needs heads and head_dim");
            if (heads * head_dim != width)
                fail("heads × head_dim = " + std::to_string(heads * head_dim) + " ≠ width " + std::to_string(width));
            if (patch_size == 0 || input_shape[1] % patch_size != 0 || input_shape[2] % patch_size != 0)
                fail("patch_size must divide the input height and width");
        }
        if (family == Family::mini_cnn) {
            std::size_t extent = std::min(input_shape[1], input_shape[2]);
            for (std::size_t s = 1; s < depth; ++s) extent = (extent + 1) / 2;
            if (extent < 1) fail("too many stages for the input size");
        }
    }

    bool can_halve() const {
        if (width % 2 != 0 || width / 2 < min_width || width / 2 == 0) return false;
        if (family == Family::mini_vit && heads % 2 != 0) return false;
        return true;
    }

    // (W, heads) → (W/2, heads/2); head_dim unchanged.
    ModelSpec halved() const {
        validate();
        if (width % 2 != 0) throw SpecError("cannot halve odd width " + std::to_string(width));
        if (family == Family::mini_vit && heads % 2 != 0)
            throw SpecError("cannot halve mini_vit with odd head count " + std::to_string(heads));
        if (width / 2 < min_width)
            throw SpecError("halving width " + std::to_string(width) + " falls below min_width " +
                            std::to_string(min_width));
        ModelSpec s = *this;
        s.width = width / 2;
        if (family == Family::mini_vit) s.heads = heads / 2;
        return s;
    }

    // Inverse of halved(): the spec a coupling of two `*this` models produces.
    ModelSpec doubled() const {
        ModelSpec s = *this;
        s.width = width * 2;
        if (family == Family::mini_vit) s.heads = heads * 2;
        s.validate();
        return s;
    }

    bool operator==(const ModelSpec&) const = default;
};

} // namespace rbdc
