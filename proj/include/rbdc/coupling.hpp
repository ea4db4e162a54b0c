// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Block-diagonal coupling of two narrow models into one wide model.
//
// Rules by layer role (narrow tensors 1 and 2, wide tensor on the right):
//
//   attn_proj, mlp_fc   W = [[W1, P], [P, W2]]              b = [b1; b2]
//   attn_qkv            each of Q, K, V block-diagonal       b = [bQ1; bQ2; bK1; bK2; bV1; bV2]
//   conv                every (ky, kx) channel slice block-diagonal, kernel size kept; b = [b1; b2]
//   head                W = [W1/2, W2/2]                     b = (b1 + b2)/2
//   layer/batch norm    γ, β (and running mean/var) concatenated
//   conv_stem           input channels fixed: output rows stacked [K1; K2], b = [b1; b2]
//   pos_embed, class_token  concatenated along the embedding dimension
//
// P is exact zero in zero-padding mode, or truncated-normal noise
// (std 0.02, the fresh-layer initializer) in random-padding mode.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rbdc/checkpoint.hpp"
#include "rbdc/model.hpp"
#include "rbdc/rng.hpp"
#include "rbdc/tensor.hpp"

namespace rbdc {

enum class PaddingKind { zero, random };

inline const char* to_string(PaddingKind k) { return k == PaddingKind::zero ? "zero" : "random"; }

inline PaddingKind padding_from_string(const std::string& s) {
    if (s == "zero") return PaddingKind::zero;
    if (s == "random") return PaddingKind::random;
    throw SpecError("unknown padding mode '" + s + "' (expected zero|random)");
}

struct PaddingMode {
    PaddingKind kind = PaddingKind::zero;
    double stddev = kInitStd;  // random mode only

    static PaddingMode zero() { return {}; }
    static PaddingMode random(double stddev = kInitStd) { return {PaddingKind::random, stddev}; }
};

namespace coupling_detail {

template <typename T>
T pad_value(const PaddingMode& mode, Rng* rng) {
    if (mode.kind == PaddingKind::zero) return T{0};
    if (!rng) throw RuleError("random padding requires a random generator");
    return truncated_normal<T>(*rng, mode.stddev);
}

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
    if (s.size() != r) throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

} // namespace coupling_detail

// [[A, P], [P, B]] for 2-D A[o1, i1], B[o2, i2]. Padding is drawn in row-major order.
template <typename T>
Tensor<T> block_diag(const Tensor<T>& a, const Tensor<T>& b, const PaddingMode& pad = {}, Rng* rng = nullptr) {
    coupling_detail::require_rank(a.shape(), 2, "block_diag");
    coupling_detail::require_rank(b.shape(), 2, "block_diag");
    const std::size_t o1 = a.dim(0), i1 = a.dim(1), o2 = b.dim(0), i2 = b.dim(1);
    Tensor<T> out(Shape{o1 + o2, i1 + i2});
    for (std::size_t r = 0; r < o1 + o2; ++r)
        for (std::size_t c = 0; c < i1 + i2; ++c) {
            if (r < o1 && c < i1)
                out.at(r, c) = a.at(r, c);
            else if (r >= o1 && c >= i1)
                out.at(r, c) = b.at(r - o1, c - i1);
            else
                out.at(r, c) = coupling_detail::pad_value<T>(pad, rng);
        }
    return out;
}

// Stacks along dimension 0; remaining dimensions must match.
template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() == 0 || a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1))
        throw ShapeError("concat_rows: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    Shape s = a.shape();
    s[0] += b.dim(0);
    std::vector<T> d(a.storage());
    d.insert(d.end(), b.storage().begin(), b.storage().end());
    return Tensor<T>(std::move(s), std::move(d));
}

// Concatenates 2-D tensors along their last dimension.
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    coupling_detail::require_rank(a.shape(), 2, "concat_cols");
    coupling_detail::require_rank(b.shape(), 2, "concat_cols");
    if (a.dim(0) != b.dim(0))
        throw ShapeError("concat_cols: row counts differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    Tensor<T> out(Shape{rows, ca + cb});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < ca; ++c) out.at(r, c) = a.at(r, c);
        for (std::size_t c = 0; c < cb; ++c) out.at(r, ca + c) = b.at(r, c);
    }
    return out;
}

template <typename T>
struct LinearParams {
    Tensor<T> weight;
    Tensor<T> bias;
};

template <typename T>
LinearParams<T> couple_linear_blockdiag(const Tensor<T>& w1, const Tensor<T>& b1, const Tensor<T>& w2,
                                        const Tensor<T>& b2, const PaddingMode& pad = {}, Rng* rng = nullptr) {
    if (w1.rank() != 2 || w2.rank() != 2) throw ShapeError("couple_linear_blockdiag: weights must be 2-D");
    if (b1.size() != w1.dim(0) || b2.size() != w2.dim(0))
        throw ShapeError("couple_linear_blockdiag: bias length does not match output dimension");
    return {block_diag(w1, w2, pad, rng), concat_rows(b1, b2)};
}

// Packed QKV weights [3n, n]. Each section is coupled on its own, so narrow
// model 1 owns the first half of the wide heads and model 2 the second half.
template <typename T>
LinearParams<T> couple_qkv(const Tensor<T>& w1, const Tensor<T>& b1, const Tensor<T>& w2, const Tensor<T>& b2,
                           const PaddingMode& pad = {}, Rng* rng = nullptr) {
    auto check = [](const Tensor<T>& w, const Tensor<T>& b) {
        if (w.rank() != 2 || w.dim(0) % 3 != 0 || w.dim(0) / 3 != w.dim(1))
            throw RuleError("couple_qkv: weight " + shape_str(w.shape()) + " is not a packed (3·W, W) QKV layout");
        if (b.size() != w.dim(0)) throw RuleError("couple_qkv: bias length does not match 3·W");
    };
    check(w1, b1);
    check(w2, b2);
    const std::size_t n1 = w1.dim(1), n2 = w2.dim(1);
    auto section = [](const Tensor<T>& w, std::size_t s, std::size_t n) {
        Tensor<T> out(Shape{n, n});
        std::copy_n(w.data().begin() + static_cast<std::ptrdiff_t>(s * n * n), n * n, out.data().begin());
        return out;
    };
    auto bias_section = [](const Tensor<T>& b, std::size_t s, std::size_t n) {
        Tensor<T> out(Shape{n});
        std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(s * n), n, out.data().begin());
        return out;
    };
    Tensor<T> w = block_diag(section(w1, 0, n1), section(w2, 0, n2), pad, rng);
    Tensor<T> b = concat_rows(bias_section(b1, 0, n1), bias_section(b2, 0, n2));
    for (std::size_t s = 1; s < 3; ++s) {
        w = concat_rows(w, block_diag(section(w1, s, n1), section(w2, s, n2), pad, rng));
        b = concat_rows(b, concat_rows(bias_section(b1, s, n1), bias_section(b2, s, n2)));
    }
    return {std::move(w), std::move(b)};
}

// Averaged classifier: logits(concat(h1, h2)) = ½(W1h1 + b1) + ½(W2h2 + b2).
template <typename T>
LinearParams<T> couple_head(const Tensor<T>& w1, const Tensor<T>& b1, const Tensor<T>& w2, const Tensor<T>& b2) {
    if (w1.rank() != 2 || w2.rank() != 2) throw ShapeError("couple_head: weights must be 2-D");
    if (w1.dim(0) != w2.dim(0) || b1.size() != b2.size() || b1.size() != w1.dim(0))
        throw ShapeError("couple_head: class counts differ (" + std::to_string(w1.dim(0)) + " vs " +
                         std::to_string(w2.dim(0)) + ")");
    Tensor<T> w = concat_cols(w1, w2);
    for (auto& v : w.data()) v *= T(0.5);
    Tensor<T> b(b1.shape());
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = (b1[i] + b2[i]) / T(2);
    return {std::move(w), std::move(b)};
}

// Kernels [C_out, C_in, K, K]; every spatial slice becomes block-diagonal.
template <typename T>
LinearParams<T> couple_conv(const Tensor<T>& k1, const Tensor<T>& b1, const Tensor<T>& k2, const Tensor<T>& b2,
                            const PaddingMode& pad = {}, Rng* rng = nullptr) {
    coupling_detail::require_rank(k1.shape(), 4, "couple_conv");
    coupling_detail::require_rank(k2.shape(), 4, "couple_conv");
    if (k1.dim(2) != k2.dim(2) || k1.dim(3) != k2.dim(3))
        throw ShapeError("couple_conv: kernel sizes differ " + shape_str(k1.shape()) + " vs " + shape_str(k2.shape()));
    if (b1.size() != k1.dim(0) || b2.size() != k2.dim(0)) throw ShapeError("couple_conv: bias length mismatch");
    const std::size_t o1 = k1.dim(0), i1 = k1.dim(1), o2 = k2.dim(0), i2 = k2.dim(1), kh = k1.dim(2), kw = k1.dim(3);
    Tensor<T> k(Shape{o1 + o2, i1 + i2, kh, kw});
    for (std::size_t o = 0; o < o1 + o2; ++o)
        for (std::size_t i = 0; i < i1 + i2; ++i)
            for (std::size_t y = 0; y < kh; ++y)
                for (std::size_t x = 0; x < kw; ++x) {
                    if (o < o1 && i < i1)
                        k.at(o, i, y, x) = k1.at(o, i, y, x);
                    else if (o >= o1 && i >= i1)
                        k.at(o, i, y, x) = k2.at(o - o1, i - i1, y, x);
                    else
                        k.at(o, i, y, x) = coupling_detail::pad_value<T>(pad, rng);
                }
    return {std::move(k), concat_rows(b1, b2)};
}

enum class NormKind { layer_norm, batch_norm };

template <typename T>
struct NormParams {
    NormKind kind = NormKind::layer_norm;
    Tensor<T> gamma;
    Tensor<T> beta;
    Tensor<T> running_mean;  // batch_norm only
    Tensor<T> running_var;   // batch_norm only
};

template <typename T>
NormParams<T> couple_norm(const NormParams<T>& p1, const NormParams<T>& p2) {
    if (p1.kind != p2.kind) throw RuleError("couple_norm: cannot couple a layer norm with a batch norm");
    NormParams<T> out;
    out.kind = p1.kind;
    out.gamma = concat_rows(p1.gamma, p2.gamma);
    out.beta = concat_rows(p1.beta, p2.beta);
    if (p1.kind == NormKind::batch_norm) {
        out.running_mean = concat_rows(p1.running_mean, p2.running_mean);
        out.running_var = concat_rows(p1.running_var, p2.running_var);
    }
    return out;
}

// Stems keep their input dimension (image channels / pixels) and stack output
// rows; embeddings concatenate along the embedding dimension.
template <typename T>
Tensor<T> couple_stem_and_embeddings(const Tensor<T>& t1, const Tensor<T>& t2, LayerRole role) {
    switch (role) {
        case LayerRole::conv_stem: return concat_rows(t1, t2);
        case LayerRole::pos_embed:
        case LayerRole::class_token: return concat_cols(t1, t2);
        default:
            throw RuleError(std::string("couple_stem_and_embeddings: role '") + to_string(role) +
                            "' is not a stem or embedding");
    }
}

// One checkpoint tensor, coupled by the rule of its role.
template <typename T>
Tensor<T> couple_tensor(LayerRole role, ParamKind kind, const Tensor<T>& t1, const Tensor<T>& t2,
                        const PaddingMode& pad, Rng* rng) {
    const bool is_bias = kind == ParamKind::bias;
    switch (role) {
        case LayerRole::attn_qkv: {
            if (is_bias) {
                if (t1.size() % 3 != 0 || t2.size() % 3 != 0) throw RuleError("attn_qkv bias not divisible by 3");
                const std::size_t n1 = t1.size() / 3, n2 = t2.size() / 3;
                std::vector<T> d;
                for (std::size_t s = 0; s < 3; ++s) {
                    d.insert(d.end(), t1.data().begin() + static_cast<std::ptrdiff_t>(s * n1),
                             t1.data().begin() + static_cast<std::ptrdiff_t>((s + 1) * n1));
                    d.insert(d.end(), t2.data().begin() + static_cast<std::ptrdiff_t>(s * n2),
                             t2.data().begin() + static_cast<std::ptrdiff_t>((s + 1) * n2));
                }
                const std::size_t len = d.size();
                return Tensor<T>(Shape{len}, std::move(d));
            }
            const std::size_t n1 = t1.dim(1), n2 = t2.dim(1);
            return couple_qkv(t1, Tensor<T>(Shape{3 * n1}), t2, Tensor<T>(Shape{3 * n2}), pad, rng).weight;
        }
        case LayerRole::attn_proj:
        case LayerRole::mlp_fc:
            return is_bias ? concat_rows(t1, t2) : block_diag(t1, t2, pad, rng);
        case LayerRole::conv:
            if (is_bias) return concat_rows(t1, t2);
            return couple_conv(t1, Tensor<T>(Shape{t1.dim(0)}), t2, Tensor<T>(Shape{t2.dim(0)}), pad, rng).weight;
        case LayerRole::head:
            if (is_bias) {
                Tensor<T> w1(Shape{t1.size(), 1}), w2(Shape{t2.size(), 1});
                return couple_head(w1, t1, w2, t2).bias;
            } else {
                return couple_head(t1, Tensor<T>(Shape{t1.dim(0)}), t2, Tensor<T>(Shape{t2.dim(0)})).weight;
            }
        case LayerRole::layer_norm:
        case LayerRole::batch_norm: return concat_rows(t1, t2);
        case LayerRole::conv_stem:
            return is_bias ? concat_rows(t1, t2) : couple_stem_and_embeddings(t1, t2, role);
        case LayerRole::pos_embed:
        case LayerRole::class_token: return couple_stem_and_embeddings(t1, t2, role);
    }
    throw RuleError("no coupling rule for role");
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string lineage_id(std::size_t width, std::uint64_t seed, const std::string& salt = {}) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "w%zu-%016llx", width,
                  static_cast<unsigned long long>(derive_seed(seed, fnv1a(salt))));
    return buf;
}

namespace coupling_detail {

template <typename T>
Checkpoint couple_checkpoint_typed(const Checkpoint& c1, const Checkpoint& c2, const PaddingMode& pad,
                                   std::uint64_t seed) {
    const ModelSpec wide = c1.spec.doubled();
    Rng rng(seed);
    Checkpoint out;
    out.spec = wide;
    for (std::size_t i = 0; i < c1.records.size(); ++i) {
        const auto& r = c1.records[i];
        const auto kind = param_kind_from_name(r.name, r.role);
        append_tensor(out, r.name, r.role,
                      couple_tensor<T>(r.role, kind, read_tensor<T>(c1, r), read_tensor<T>(c2, c2.records[i]), pad,
                                       &rng));
    }
    Lineage l;
    l.width = wide.width;
    l.seed = seed;
    l.epochs = 0;
    l.id = lineage_id(wide.width, seed, c1.metadata.lineage.id + "+" + c2.metadata.lineage.id);
    l.children = {c1.metadata.lineage, c2.metadata.lineage};
    out.metadata.seed = seed;
    out.metadata.epochs_trained = 0;
    out.metadata.lineage = std::move(l);
    out.metadata.extra = json{{"padding", to_string(pad.kind)},
                              {"padding_init", pad.kind == PaddingKind::zero ? "exact_zero" : "truncated_normal"},
                              {"padding_std", pad.kind == PaddingKind::zero ? 0.0 : pad.stddev}};
    validate_against_spec(out);
    return out;
}

} // namespace coupling_detail

// Couples two narrow checkpoints of identical spec into the doubled spec.
// The output's precision is that of c1; `seed` drives random padding only.
inline Checkpoint couple_checkpoint(const Checkpoint& c1, const Checkpoint& c2, const PaddingMode& pad = {},
                                    std::uint64_t seed = 0) {
    if (!(c1.spec == c2.spec))
        throw RuleError("cannot couple checkpoints with different specs (" + spec_to_json(c1.spec).dump() + " vs " +
                        spec_to_json(c2.spec).dump() + ")");
    try {
        c1.spec.doubled();
    } catch (const SpecError& e) {
        throw RuleError(std::string("doubled spec is invalid: ") + e.what());
    }
    validate_records(c1);
    validate_records(c2);
    validate_against_spec(c1);
    validate_against_spec(c2);
    return checkpoint_precision(c1) == Precision::f32
               ? coupling_detail::couple_checkpoint_typed<float>(c1, c2, pad, seed)
               : coupling_detail::couple_checkpoint_typed<double>(c1, c2, pad, seed);
}

template <typename T>
Model<T> couple_models(const Model<T>& m1, const Model<T>& m2, const PaddingMode& pad = {}, std::uint64_t seed = 0) {
    return to_model<T>(couple_checkpoint(to_checkpoint(m1), to_checkpoint(m2), pad, seed));
}

} // namespace rbdc
