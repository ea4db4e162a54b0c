// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Verification of a coupled checkpoint against the two narrow checkpoints it
// was built from: shape audit, zero-block audit, diagonal-preservation audit
// and the ensemble property wide(x) = ½(n1(x) + n2(x)) on seeded probes.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rbdc/checkpoint.hpp"
#include "rbdc/coupling.hpp"
#include "rbdc/model.hpp"

namespace rbdc {

enum class VerifyMode { exact, split_norm_debug, joint_norm };

inline const char* to_string(VerifyMode m) {
    switch (m) {
        case VerifyMode::exact: return "exact";
        case VerifyMode::split_norm_debug: return "split_norm_debug";
        case VerifyMode::joint_norm: return "joint_norm";
    }
    return "?";
}

inline VerifyMode verify_mode_from_string(const std::string& s) {
    if (s == "exact") return VerifyMode::exact;
    if (s == "split_norm_debug") return VerifyMode::split_norm_debug;
    if (s == "joint_norm") return VerifyMode::joint_norm;
    throw SpecError("unknown verification mode '" + s + "' (expected exact|split_norm_debug|joint_norm)");
}

// Mode that makes the ensemble property assertable for a family.
inline VerifyMode default_verify_mode(Family f) {
    return f == Family::mini_vit ? VerifyMode::split_norm_debug : VerifyMode::exact;
}

inline double ensemble_tolerance(Precision p) { return p == Precision::f32 ? 1e-5 : 1e-10; }

struct ShapeAuditEntry {
    std::string name;
    Shape expected;
    Shape actual;
    bool ok = false;
};

struct CouplingReport {
    std::vector<ShapeAuditEntry> shape_audit;
    bool shapes_ok = true;

    PaddingKind padding = PaddingKind::zero;
    std::size_t offdiag_elements = 0;
    std::size_t offdiag_nonzero = 0;
    double offdiag_mean = 0;
    bool zero_blocks_ok = true;  // vacuous in random-padding mode

    std::size_t diag_elements = 0;
    std::size_t diag_mismatches = 0;
    bool diagonal_ok = true;

    VerifyMode mode = VerifyMode::exact;
    Precision precision = Precision::f64;
    std::size_t probes = 0;
    double max_deviation = 0;  // max |wide(x) − ½(n1(x) + n2(x))| over probe logits
    double tolerance = 0;
    bool deviation_asserted = true;
    double embed_max_deviation = 0;  // joint_norm: pre-first-LN activations vs concatenation
    bool embed_concat_exact = true;

    bool pass = false;

    json to_json() const {
        json audit = json::array();
        for (const auto& e : shape_audit)
            audit.push_back(json{{"name", e.name}, {"expected", e.expected}, {"actual", e.actual}, {"ok", e.ok}});
        return json{{"shape_audit", audit},
                    {"shapes_ok", shapes_ok},
                    {"padding", to_string(padding)},
                    {"offdiag_elements", offdiag_elements},
                    {"offdiag_nonzero", offdiag_nonzero},
                    {"offdiag_mean", offdiag_mean},
                    {"zero_blocks_ok", zero_blocks_ok},
                    {"diag_elements", diag_elements},
                    {"diag_mismatches", diag_mismatches},
                    {"diagonal_ok", diagonal_ok},
                    {"mode", to_string(mode)},
                    {"precision", to_string(precision)},
                    {"probes", probes},
                    {"max_deviation", max_deviation},
                    {"tolerance", tolerance},
                    {"deviation_asserted", deviation_asserted},
                    {"embed_max_deviation", embed_max_deviation},
                    {"embed_concat_exact", embed_concat_exact},
                    {"pass", pass}};
    }
};

// Seeded N(0, 1) probe inputs shaped for `spec`.
template <typename T>
Tensor<T> make_probes(const ModelSpec& spec, std::size_t count, std::uint64_t seed) {
    Rng rng(derive_seed(seed, std::uint64_t{0x70726f6265}));
    return normal_tensor<T>(Shape{count, spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]}, rng);
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    Shape s = x.shape();
    const std::size_t per = x.size() / s[0];
    s[0] = end - begin;
    std::vector<T> d(x.data().begin() + static_cast<std::ptrdiff_t>(begin * per),
                     x.data().begin() + static_cast<std::ptrdiff_t>(end * per));
    return Tensor<T>(std::move(s), std::move(d));
}

namespace verify_detail {

// Origin of each wide element, encoded by coupling index tensors:
// k > 0 → element k−1 of narrow 1, k < 0 → element −k−1 of narrow 2, 0 → padding.
inline Tensor<double> origin_map(const TensorRecord& r1, const TensorRecord& r2) {
    auto idx = [](const Shape& s, double sign) {
        Tensor<double> t(s);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = sign * static_cast<double>(i + 1);
        return t;
    };
    const auto a = idx(r1.shape, 1.0), b = idx(r2.shape, -1.0);
    if (r1.role == LayerRole::head) return concat_cols(a, b);  // structure only; values are halved
    return couple_tensor<double>(r1.role, param_kind_from_name(r1.name, r1.role), a, b, PaddingMode::zero(), nullptr);
}

template <typename T>
void audit_blocks(const Checkpoint& wide, const Checkpoint& n1, const Checkpoint& n2, CouplingReport& rep) {
    double offdiag_sum = 0;
    for (std::size_t i = 0; i < wide.records.size() && i < n1.records.size(); ++i) {
        const auto& rw = wide.records[i];
        const auto& r1 = n1.records[i];
        const auto& r2 = n2.records[i];
        const auto kind = param_kind_from_name(r1.name, r1.role);
        const Tensor<T> w = read_tensor<T>(wide, rw);
        const Tensor<T> a = read_tensor<T>(n1, r1);
        const Tensor<T> b = read_tensor<T>(n2, r2);
        if (r1.role == LayerRole::head && kind == ParamKind::bias) {
            for (std::size_t k = 0; k < w.size(); ++k) {
                ++rep.diag_elements;
                const T expect = (a[k] + b[k]) / T(2);
                if (std::memcmp(&expect, &w[k], sizeof(T)) != 0) ++rep.diag_mismatches;
            }
            continue;
        }
        const Tensor<double> map = origin_map(r1, r2);
        if (map.shape() != w.shape()) continue;  // already flagged by the shape audit
        const T scale = r1.role == LayerRole::head ? T(0.5) : T(1);
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double o = map[k];
            if (o == 0.0) {
                ++rep.offdiag_elements;
                offdiag_sum += static_cast<double>(w[k]);
                if (!(w[k] == T(0) && !std::signbit(w[k]))) ++rep.offdiag_nonzero;
                continue;
            }
            ++rep.diag_elements;
            const T src = o > 0 ? a[static_cast<std::size_t>(o) - 1] : b[static_cast<std::size_t>(-o) - 1];
            const T expect = src * scale;
            if (std::memcmp(&expect, &w[k], sizeof(T)) != 0) ++rep.diag_mismatches;
        }
    }
    rep.offdiag_mean = rep.offdiag_elements ? offdiag_sum / static_cast<double>(rep.offdiag_elements) : 0.0;
}

} // namespace verify_detail

// Checks `wide` against the narrow checkpoints it was coupled from.
// Throws VerificationError when the lineage or specs show that `wide` is not
// a coupling of (n1, n2), or when `mode` cannot be asserted for the family.
template <typename T>
CouplingReport verify_ensemble_equivalence(const Checkpoint& wide, const Checkpoint& n1, const Checkpoint& n2,
                                           std::size_t probe_count, VerifyMode mode, std::uint64_t probe_seed = 0) {
    const auto& lin = wide.metadata.lineage;
    if (lin.children.size() != 2 || !(lin.children[0] == n1.metadata.lineage) ||
        !(lin.children[1] == n2.metadata.lineage))
        throw VerificationError("lineage mismatch: wide checkpoint '" + lin.id + "' was not coupled from '" +
                                n1.metadata.lineage.id + "' and '" + n2.metadata.lineage.id + "'");
    if (!(n1.spec == n2.spec)) throw VerificationError("narrow checkpoints have different specs");
    if (probe_count == 0) throw VerificationError("at least one probe is required");
    if (mode == VerifyMode::exact && wide.spec.family == Family::mini_vit)
        throw VerificationError("exact mode cannot be asserted with joint layer norms; use split_norm_debug or joint_norm");

    CouplingReport rep;
    rep.mode = mode;
    rep.precision = precision_of<T>();
    rep.tolerance = ensemble_tolerance(rep.precision);
    rep.padding = wide.metadata.extra.value("padding", std::string("zero")) == "random" ? PaddingKind::random
                                                                                         : PaddingKind::zero;

    ModelSpec expected_spec;
    try {
        expected_spec = n1.spec.doubled();
    } catch (const SpecError& e) {
        throw VerificationError(std::string("narrow spec cannot be doubled: ") + e.what());
    }
    if (!(expected_spec == wide.spec)) throw VerificationError("wide spec is not the doubled narrow spec");

    const auto layout = parameter_layout(expected_spec);
    for (std::size_t i = 0; i < layout.size(); ++i) {
        ShapeAuditEntry e{layout[i].name, layout[i].shape, {}, false};
        if (i < wide.records.size()) {
            e.actual = wide.records[i].shape;
            e.ok = wide.records[i].name == layout[i].name && e.actual == e.expected;
        }
        rep.shapes_ok = rep.shapes_ok && e.ok;
        rep.shape_audit.push_back(std::move(e));
    }
    if (wide.records.size() != layout.size()) rep.shapes_ok = false;
    if (!rep.shapes_ok) return rep;

    verify_detail::audit_blocks<T>(wide, n1, n2, rep);
    rep.zero_blocks_ok = rep.padding == PaddingKind::random || rep.offdiag_nonzero == 0;
    rep.diagonal_ok = rep.diag_mismatches == 0;

    Model<T> mw = to_model<T>(wide), m1 = to_model<T>(n1), m2 = to_model<T>(n2);
    const Tensor<T> probes = make_probes<T>(n1.spec, probe_count, probe_seed);
    rep.probes = probe_count;
    const bool vit = wide.spec.family == Family::mini_vit;
    ForwardOptions wide_opt;
    wide_opt.mode = ops::Mode::eval;
    wide_opt.norm_groups = (vit && mode == VerifyMode::split_norm_debug) ? 2 : 1;
    rep.deviation_asserted = !(vit && mode == VerifyMode::joint_norm);

    constexpr std::size_t chunk = 64;
    for (std::size_t begin = 0; begin < probe_count; begin += chunk) {
        const std::size_t end = std::min(probe_count, begin + chunk);
        const Tensor<T> x = slice_batch(probes, begin, end);
        Tape<T> tw(false), t1(false), t2(false);
        const auto fw = mw.forward(tw, x, wide_opt);
        const auto f1 = m1.forward(t1, x);
        const auto f2 = m2.forward(t2, x);
        const auto& lw = tw.value(fw.logits);
        const auto& l1 = t1.value(f1.logits);
        const auto& l2 = t2.value(f2.logits);
        for (std::size_t k = 0; k < lw.size(); ++k) {
            const double ens = 0.5 * (static_cast<double>(l1[k]) + static_cast<double>(l2[k]));
            rep.max_deviation = std::max(rep.max_deviation, std::abs(static_cast<double>(lw[k]) - ens));
        }
        if (vit && mode == VerifyMode::joint_norm) {
            const Tensor<T> expect = concat_cols(t1.value(f1.tap("embed")), t2.value(f2.tap("embed")));
            const auto& got = tw.value(fw.tap("embed"));
            rep.embed_max_deviation = std::max(rep.embed_max_deviation, static_cast<double>(got.max_abs_diff(expect)));
            rep.embed_concat_exact = rep.embed_concat_exact && got.bit_equal(expect);
        }
    }
    if (!std::isfinite(rep.max_deviation)) rep.max_deviation = std::numeric_limits<double>::infinity();

    const bool deviation_ok = !rep.deviation_asserted || rep.max_deviation <= rep.tolerance;
    rep.pass = rep.shapes_ok && rep.zero_blocks_ok && rep.diagonal_ok && deviation_ok && rep.embed_concat_exact;
    return rep;
}

inline CouplingReport verify_ensemble_equivalence(const Checkpoint& wide, const Checkpoint& n1, const Checkpoint& n2,
                                                  std::size_t probe_count, VerifyMode mode,
                                                  std::uint64_t probe_seed = 0) {
    return checkpoint_precision(wide) == Precision::f32
               ? verify_ensemble_equivalence<float>(wide, n1, n2, probe_count, mode, probe_seed)
               : verify_ensemble_equivalence<double>(wide, n1, n2, probe_count, mode, probe_seed);
}

} // namespace rbdc
