// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Width-parameterized model zoo.
//
//   mlp       flatten → stem linear → ReLU → depth × (fc → ReLU) → head
//   mini_cnn  stem conv3x3 + BN + ReLU, then `depth` stages of two
//             conv3x3 + BN + ReLU blocks; stage s has width·2^s channels and
//             stages after the first open with a stride-2 conv; global average
//             pool → head
//   mini_vit  patch-embedding conv, class token, positional embedding,
//             `depth` pre-norm blocks (attention + 4× GELU MLP), final LN,
//             head on the class token

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rbdc/autograd.hpp"
#include "rbdc/model_spec.hpp"
#include "rbdc/ops.hpp"
#include "rbdc/rng.hpp"
#include "rbdc/tensor.hpp"

namespace rbdc {

enum class ParamKind { weight, bias, running_mean, running_var, embedding };

enum class InitKind { trunc_normal, zeros, ones };

struct ParamInfo {
    std::string name;
    LayerRole role;
    Shape shape;
    ParamKind kind;
    InitKind init;

    bool trainable() const { return kind != ParamKind::running_mean && kind != ParamKind::running_var; }
};

inline ParamKind param_kind_from_name(const std::string& name, LayerRole role) {
    auto ends_with = [&](const char* suffix) {
        const std::string s(suffix);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (role == LayerRole::pos_embed || role == LayerRole::class_token) return ParamKind::embedding;
    if (ends_with(".running_mean")) return ParamKind::running_mean;
    if (ends_with(".running_var")) return ParamKind::running_var;
    if (ends_with(".bias")) return ParamKind::bias;
    return ParamKind::weight;
}

inline constexpr double kInitStd = 0.02;

// Ordered parameter list a built model carries. Checkpoints must match it exactly.
inline std::vector<ParamInfo> parameter_layout(const ModelSpec& spec) {
    spec.validate();
    std::vector<ParamInfo> out;
    const std::size_t w = spec.width;
    const std::size_t cin = spec.input_shape[0];
    auto weight = [&](std::string name, LayerRole role, Shape shape) {
        out.push_back({std::move(name), role, std::move(shape), ParamKind::weight, InitKind::trunc_normal});
    };
    auto bias = [&](std::string name, LayerRole role, std::size_t n) {
        out.push_back({std::move(name), role, Shape{n}, ParamKind::bias, InitKind::zeros});
    };
    auto layer_norm = [&](const std::string& prefix, std::size_t n) {
        out.push_back({prefix + ".weight", LayerRole::layer_norm, Shape{n}, ParamKind::weight, InitKind::ones});
        out.push_back({prefix + ".bias", LayerRole::layer_norm, Shape{n}, ParamKind::bias, InitKind::zeros});
    };
    auto batch_norm = [&](const std::string& prefix, std::size_t n) {
        out.push_back({prefix + ".weight", LayerRole::batch_norm, Shape{n}, ParamKind::weight, InitKind::ones});
        out.push_back({prefix + ".bias", LayerRole::batch_norm, Shape{n}, ParamKind::bias, InitKind::zeros});
        out.push_back({prefix + ".running_mean", LayerRole::batch_norm, Shape{n}, ParamKind::running_mean,
                       InitKind::zeros});
        out.push_back({prefix + ".running_var", LayerRole::batch_norm, Shape{n}, ParamKind::running_var,
                       InitKind::ones});
    };

    switch (spec.family) {
        case Family::mlp: {
            // The input projection sees every pixel, i.e. a full-image stem.
            weight("stem.weight", LayerRole::conv_stem, {w, spec.input_features()});
            bias("stem.bias", LayerRole::conv_stem, w);
            for (std::size_t i = 0; i < spec.depth; ++i) {
                const std::string p = "fc." + std::to_string(i);
                weight(p + ".weight", LayerRole::mlp_fc, {w, w});
                bias(p + ".bias", LayerRole::mlp_fc, w);
            }
            weight("head.weight", LayerRole::head, {spec.num_classes, w});
            bias("head.bias", LayerRole::head, spec.num_classes);
            break;
        }
        case Family::mini_cnn: {
            weight("stem.conv.weight", LayerRole::conv_stem, {w, cin, 3, 3});
            bias("stem.conv.bias", LayerRole::conv_stem, w);
            batch_norm("stem.bn", w);
            std::size_t prev = w;
            for (std::size_t s = 0; s < spec.depth; ++s) {
                const std::size_t ch = w << s;
                for (std::size_t b = 0; b < 2; ++b) {
                    const std::string p = "stage." + std::to_string(s) + ".block." + std::to_string(b);
                    weight(p + ".conv.weight", LayerRole::conv, {ch, prev, 3, 3});
                    bias(p + ".conv.bias", LayerRole::conv, ch);
                    batch_norm(p + ".bn", ch);
                    prev = ch;
                }
            }
            weight("head.weight", LayerRole::head, {spec.num_classes, prev});
            bias("head.bias", LayerRole::head, spec.num_classes);
            break;
        }
        case Family::mini_vit: {
            const std::size_t p = spec.patch_size;
            weight("patch_embed.weight", LayerRole::conv_stem, {w, cin, p, p});
            bias("patch_embed.bias", LayerRole::conv_stem, w);
            out.push_back({"class_token", LayerRole::class_token, {1, w}, ParamKind::embedding, InitKind::trunc_normal});
            out.push_back(
                {"pos_embed", LayerRole::pos_embed, {spec.tokens(), w}, ParamKind::embedding, InitKind::trunc_normal});
            const std::size_t hidden = ModelSpec::mlp_ratio * w;
            for (std::size_t i = 0; i < spec.depth; ++i) {
                const std::string b = "block." + std::to_string(i);
                layer_norm(b + ".norm1", w);
                weight(b + ".attn_qkv.weight", LayerRole::attn_qkv, {3 * w, w});
                bias(b + ".attn_qkv.bias", LayerRole::attn_qkv, 3 * w);
                weight(b + ".attn_proj.weight", LayerRole::attn_proj, {w, w});
                bias(b + ".attn_proj.bias", LayerRole::attn_proj, w);
                layer_norm(b + ".norm2", w);
                weight(b + ".mlp_fc1.weight", LayerRole::mlp_fc, {hidden, w});
                bias(b + ".mlp_fc1.bias", LayerRole::mlp_fc, hidden);
                weight(b + ".mlp_fc2.weight", LayerRole::mlp_fc, {w, hidden});
                bias(b + ".mlp_fc2.bias", LayerRole::mlp_fc, w);
            }
            layer_norm("norm", w);
            weight("head.weight", LayerRole::head, {spec.num_classes, w});
            bias("head.bias", LayerRole::head, spec.num_classes);
            break;
        }
    }
    return out;
}

template <typename T>
struct Parameter {
    ParamInfo info;
    Tensor<T> value;
};

struct ForwardOptions {
    ops::Mode mode = ops::Mode::eval;
    // Layer norms split each token into this many independently normalized
    // segments. 1 is the ordinary model; 2 evaluates a coupled model as if its
    // halves were normalized separately.
    std::size_t norm_groups = 1;
};

struct ForwardResult {
    Var logits;
    std::vector<Var> params;  // aligned with Model::parameters()
    // Named intermediate activations: "embed" (mini_vit tokens before the first
    // layer norm), "stem", "stage.S.block.B" (mini_cnn), "hidden.I" (mlp), "features".
    std::vector<std::pair<std::string, Var>> taps;

    Var tap(const std::string& name) const {
        for (const auto& [n, v] : taps)
            if (n == name) return v;
        throw StateError("no activation tap named '" + name + "'");
    }
};

template <typename T>
class Model {
public:
    Model() = default;

    static Model build(const ModelSpec& spec, std::uint64_t seed) {
        Model m;
        m.spec_ = spec;
        Rng rng(seed);
        for (auto& info : parameter_layout(spec)) {
            Tensor<T> v;
            switch (info.init) {
                case InitKind::trunc_normal: v = truncated_normal_tensor<T>(info.shape, rng, kInitStd); break;
                case InitKind::zeros: v = Tensor<T>::zeros(info.shape); break;
                case InitKind::ones: v = Tensor<T>::ones(info.shape); break;
            }
            m.params_.push_back({std::move(info), std::move(v)});
        }
        m.reindex();
        return m;
    }

    // Adopts externally produced tensors; names, roles and shapes must match the layout.
    static Model from_parameters(const ModelSpec& spec, std::vector<Parameter<T>> params) {
        const auto layout = parameter_layout(spec);
        if (layout.size() != params.size())
            throw SpecError("parameter count " + std::to_string(params.size()) + " does not match layout of " +
                            std::to_string(layout.size()));
        for (std::size_t i = 0; i < layout.size(); ++i) {
            const auto& want = layout[i];
            const auto& got = params[i];
            if (got.info.name != want.name || got.info.role != want.role || got.value.shape() != want.shape)
                throw SpecError("parameter '" + got.info.name + "' " + shape_str(got.value.shape()) +
                                " does not match expected '" + want.name + "' " + shape_str(want.shape));
            params[i].info = want;
        }
        Model m;
        m.spec_ = spec;
        m.params_ = std::move(params);
        m.reindex();
        return m;
    }

    const ModelSpec& spec() const noexcept { return spec_; }
    const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
    std::vector<Parameter<T>>& parameters() noexcept { return params_; }

    const Tensor<T>& param(const std::string& name) const { return params_.at(index_of(name)).value; }
    Tensor<T>& param(const std::string& name) { return params_.at(index_of(name)).value; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_)
            if (p.info.trainable()) n += p.value.size();
        return n;
    }

    bool bit_equal(const Model& other) const {
        if (!(spec_ == other.spec_) || params_.size() != other.params_.size()) return false;
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (!params_[i].value.bit_equal(other.params_[i].value)) return false;
        return true;
    }

    // input[N, C, H, W] → logits[N, num_classes]. In train mode batch-norm
    // running statistics are updated in place.
    ForwardResult forward(Tape<T>& tape, const Tensor<T>& input, ForwardOptions opt = {}) {
        check_input(input);
        ForwardResult r;
        r.params.reserve(params_.size());
        for (auto& p : params_) {
            const bool grad = tape.recording() && p.info.trainable();
            r.params.push_back(grad ? tape.parameter(p.value) : tape.constant(p.value));
        }
        const Var x = tape.constant(input);
        switch (spec_.family) {
            case Family::mlp: forward_mlp(tape, x, r); break;
            case Family::mini_cnn: forward_cnn(tape, x, opt, r); break;
            case Family::mini_vit: forward_vit(tape, x, opt, r); break;
        }
        return r;
    }

    // Convenience: logits without recording gradients.
    Tensor<T> logits(const Tensor<T>& input, ForwardOptions opt = {}) {
        Tape<T> tape(false);
        const auto r = forward(tape, input, opt);
        return tape.value(r.logits);
    }

private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace(params_[i].info.name, i);
    }

    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw SpecError("model has no parameter '" + name + "'");
        return it->second;
    }

    Var p(const ForwardResult& r, const std::string& name) const { return r.params[index_of(name)]; }

    void check_input(const Tensor<T>& input) const {
        const auto& s = spec_.input_shape;
        if (input.rank() != 4 || input.dim(1) != s[0] || input.dim(2) != s[1] || input.dim(3) != s[2])
            throw ShapeError("model input " + shape_str(input.shape()) + " does not match spec input (N, " +
                             std::to_string(s[0]) + ", " + std::to_string(s[1]) + ", " + std::to_string(s[2]) + ")");
    }

    void forward_mlp(Tape<T>& tape, Var x, ForwardResult& r) {
        const std::size_t n = tape.value(x).dim(0);
        Var h = ops::reshape(tape, x, Shape{n, spec_.input_features()});
        h = ops::relu(tape, ops::linear(tape, h, p(r, "stem.weight"), p(r, "stem.bias")));
        r.taps.emplace_back("stem", h);
        for (std::size_t i = 0; i < spec_.depth; ++i) {
            const std::string pre = "fc." + std::to_string(i);
            h = ops::relu(tape, ops::linear(tape, h, p(r, pre + ".weight"), p(r, pre + ".bias")));
            r.taps.emplace_back("hidden." + std::to_string(i), h);
        }
        r.taps.emplace_back("features", h);
        r.logits = ops::linear(tape, h, p(r, "head.weight"), p(r, "head.bias"));
    }

    Var conv_bn_relu(Tape<T>& tape, Var x, const std::string& conv, const std::string& bn, std::size_t stride,
                     const ForwardOptions& opt, ForwardResult& r) {
        Var h = ops::conv2d(tape, x, p(r, conv + ".weight"), p(r, conv + ".bias"), ops::Conv2dGeometry{stride, 1});
        h = ops::batch_norm(tape, h, p(r, bn + ".weight"), p(r, bn + ".bias"), param(bn + ".running_mean"),
                            param(bn + ".running_var"), opt.mode);
        return ops::relu(tape, h);
    }

    void forward_cnn(Tape<T>& tape, Var x, const ForwardOptions& opt, ForwardResult& r) {
        Var h = conv_bn_relu(tape, x, "stem.conv", "stem.bn", 1, opt, r);
        r.taps.emplace_back("stem", h);
        for (std::size_t s = 0; s < spec_.depth; ++s)
            for (std::size_t b = 0; b < 2; ++b) {
                const std::string pre = "stage." + std::to_string(s) + ".block." + std::to_string(b);
                const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
                h = conv_bn_relu(tape, h, pre + ".conv", pre + ".bn", stride, opt, r);
                r.taps.emplace_back(pre, h);
            }
        h = ops::global_avg_pool(tape, h);
        r.taps.emplace_back("features", h);
        r.logits = ops::linear(tape, h, p(r, "head.weight"), p(r, "head.bias"));
    }

    void forward_vit(Tape<T>& tape, Var x, const ForwardOptions& opt, ForwardResult& r) {
        const std::size_t n = tape.value(x).dim(0);
        const std::size_t tokens = spec_.tokens();
        const std::size_t groups = opt.norm_groups;
        Var patches = ops::conv2d(tape, x, p(r, "patch_embed.weight"), p(r, "patch_embed.bias"),
                                  ops::Conv2dGeometry{spec_.patch_size, 0});
        Var h = ops::embed_tokens(tape, patches, p(r, "class_token"), p(r, "pos_embed"));
        r.taps.emplace_back("embed", h);
        for (std::size_t i = 0; i < spec_.depth; ++i) {
            const std::string b = "block." + std::to_string(i);
            Var a = ops::layer_norm(tape, h, p(r, b + ".norm1.weight"), p(r, b + ".norm1.bias"), groups);
            a = ops::linear(tape, a, p(r, b + ".attn_qkv.weight"), p(r, b + ".attn_qkv.bias"));
            a = ops::attention(tape, a, n, tokens, spec_.heads);
            r.taps.emplace_back(b + ".heads", a);
            a = ops::linear(tape, a, p(r, b + ".attn_proj.weight"), p(r, b + ".attn_proj.bias"));
            h = ops::add(tape, h, a);
            Var m = ops::layer_norm(tape, h, p(r, b + ".norm2.weight"), p(r, b + ".norm2.bias"), groups);
            m = ops::gelu(tape, ops::linear(tape, m, p(r, b + ".mlp_fc1.weight"), p(r, b + ".mlp_fc1.bias")));
            m = ops::linear(tape, m, p(r, b + ".mlp_fc2.weight"), p(r, b + ".mlp_fc2.bias"));
            h = ops::add(tape, h, m);
            r.taps.emplace_back(b, h);
        }
        h = ops::layer_norm(tape, h, p(r, "norm.weight"), p(r, "norm.bias"), groups);
        h = ops::select_token(tape, h, tokens, 0);
        r.taps.emplace_back("features", h);
        r.logits = ops::linear(tape, h, p(r, "head.weight"), p(r, "head.bias"));
    }

    ModelSpec spec_;
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t row) {
    const std::size_t c = logits.dim(1);
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
        if (logits.at(row, k) > logits.at(row, best)) best = k;
    return best;
}

} // namespace rbdc
