// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Datasets: seeded synthetic classification data, IDX (MNIST-style) files,
// and caching through the checkpoint container.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rbdc/checkpoint.hpp"
#include "rbdc/errors.hpp"
#include "rbdc/rng.hpp"
#include "rbdc/tensor.hpp"

namespace rbdc {

enum class Split { train, eval };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "eval"; }

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "eval") return Split::eval;
    throw FormatError("unknown split '" + s + "'");
}

struct Dataset {
    Tensor<double> samples;  // [N, C, H, W]
    std::vector<int> labels;
    std::size_t num_classes = 0;
    Split split = Split::train;

    std::size_t size() const noexcept { return labels.size(); }
    Shape input_shape() const { return {samples.dim(1), samples.dim(2), samples.dim(3)}; }

    void validate() const {
        if (samples.rank() != 4) throw ShapeError("dataset samples must be [N, C, H, W]");
        if (samples.dim(0) != labels.size())
            throw ShapeError("dataset has " + std::to_string(samples.dim(0)) + " samples but " +
                             std::to_string(labels.size()) + " labels");
        for (int l : labels)
            if (l < 0 || static_cast<std::size_t>(l) >= num_classes)
                throw DomainError("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
    }

    template <typename T>
    Tensor<T> inputs(std::span<const std::size_t> idx) const {
        const std::size_t per = samples.size() / samples.dim(0);
        Tensor<T> out(Shape{idx.size(), samples.dim(1), samples.dim(2), samples.dim(3)});
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t k = 0; k < per; ++k) out[i * per + k] = static_cast<T>(samples[idx[i] * per + k]);
        return out;
    }

    std::vector<int> labels_of(std::span<const std::size_t> idx) const {
        std::vector<int> out;
        out.reserve(idx.size());
        for (auto i : idx) out.push_back(labels.at(i));
        return out;
    }
};

struct SyntheticOptions {
    double mean_scale = 1.0;
    double noise_std = 4.0;
};

// Class-conditional Gaussians. The class means depend only on `seed`; the
// noise stream depends on `seed` and `split`, so train and eval share classes
// but never samples. Labels cycle 0..K-1.
inline Dataset gen_synthetic(std::size_t num_classes, std::size_t per_class, const Shape& input_shape,
                             std::uint64_t seed, Split split = Split::train, SyntheticOptions opt = {}) {
    if (num_classes == 0 || per_class == 0) throw DomainError("gen_synthetic needs positive counts");
    if (input_shape.size() != 3) throw ShapeError("input shape must be (C, H, W)");
    Rng mean_rng(derive_seed(seed, "synthetic/means"));
    const Tensor<double> means =
        normal_tensor<double>(Shape{num_classes, input_shape[0], input_shape[1], input_shape[2]}, mean_rng,
                              opt.mean_scale);
    Rng noise_rng(derive_seed(seed, split == Split::train ? "synthetic/train" : "synthetic/eval"));
    std::normal_distribution<double> noise(0.0, opt.noise_std);

    const std::size_t n = num_classes * per_class;
    const std::size_t per = shape_numel(input_shape);
    Dataset d;
    d.num_classes = num_classes;
    d.split = split;
    d.samples = Tensor<double>(Shape{n, input_shape[0], input_shape[1], input_shape[2]});
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % num_classes;
        d.labels[i] = static_cast<int>(c);
        for (std::size_t k = 0; k < per; ++k) d.samples[i * per + k] = means[c * per + k] + noise(noise_rng);
    }
    return d;
}

// ---------------------------------------------------------------------------
// IDX

struct IdxArray {
    Shape dims;
    std::vector<std::uint8_t> values;
    std::vector<std::string> warnings;
};

inline constexpr std::uint8_t kIdxUnsignedByte = 0x08;

inline IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) throw FormatError("IDX header truncated at byte " + std::to_string(bytes.size()));
    if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("IDX bad magic at byte 0: first two bytes must be zero");
    if (bytes[2] != kIdxUnsignedByte) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "IDX unsupported type code 0x%02x at byte 2", bytes[2]);
        throw FormatError(buf);
    }
    const std::size_t rank = bytes[3];
    if (rank == 0) throw FormatError("IDX dimension count is zero at byte 3");
    std::size_t offset = 4;
    IdxArray a;
    for (std::size_t d = 0; d < rank; ++d) {
        if (offset + 4 > bytes.size())
            throw FormatError("IDX dimension " + std::to_string(d) + " truncated at byte " + std::to_string(offset));
        const std::uint32_t v = (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
                                (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
        if (v == 0) throw FormatError("IDX dimension " + std::to_string(d) + " is zero at byte " + std::to_string(offset));
        a.dims.push_back(v);
        offset += 4;
    }
    const std::size_t count = shape_numel(a.dims);
    if (bytes.size() - offset < count)
        throw FormatError("IDX payload truncated at byte " + std::to_string(bytes.size()) + ": expected " +
                          std::to_string(count) + " bytes from byte " + std::to_string(offset));
    a.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                    bytes.begin() + static_cast<std::ptrdiff_t>(offset + count));
    if (const std::size_t extra = bytes.size() - offset - count; extra > 0)
        a.warnings.push_back("IDX has " + std::to_string(extra) + " trailing bytes after byte " +
                             std::to_string(offset + count));
    return a;
}

inline std::vector<std::uint8_t> serialize_idx(const Shape& dims, std::span<const std::uint8_t> values) {
    if (dims.empty() || dims.size() > 255) throw FormatError("IDX supports 1 to 255 dimensions");
    if (shape_numel(dims) != values.size()) throw ShapeError("IDX payload size does not match dimensions");
    std::vector<std::uint8_t> out{0, 0, kIdxUnsignedByte, static_cast<std::uint8_t>(dims.size())};
    for (auto d : dims) {
        if (d > 0xffffffffULL) throw FormatError("IDX dimension exceeds 32 bits");
        for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>((d >> s) & 0xff));
    }
    out.insert(out.end(), values.begin(), values.end());
    return out;
}

// Pixel values scaled to [0, 1].
inline Tensor<double> idx_images(const IdxArray& a) {
    Tensor<double> t(a.dims);
    for (std::size_t i = 0; i < a.values.size(); ++i) t[i] = a.values[i] / 255.0;
    return t;
}

inline std::vector<int> idx_labels(const IdxArray& a) {
    if (a.dims.size() != 1) throw FormatError("IDX label file must be one-dimensional");
    return {a.values.begin(), a.values.end()};
}

// Values are clamped to [0, 1] and rounded to the nearest 1/255.
inline std::vector<std::uint8_t> images_to_idx(const Tensor<double>& images) {
    std::vector<std::uint8_t> q(images.size());
    for (std::size_t i = 0; i < q.size(); ++i)
        q[i] = static_cast<std::uint8_t>(std::lround(std::clamp(images[i], 0.0, 1.0) * 255.0));
    return serialize_idx(images.shape(), q);
}

inline std::vector<std::uint8_t> labels_to_idx(std::span<const int> labels) {
    std::vector<std::uint8_t> q;
    q.reserve(labels.size());
    for (int l : labels) {
        if (l < 0 || l > 255) throw DomainError("IDX labels must fit in one byte");
        q.push_back(static_cast<std::uint8_t>(l));
    }
    return serialize_idx({labels.size()}, q);
}

// Images [N, H, W] or [N, C, H, W] plus labels [N] → dataset.
inline Dataset dataset_from_idx(const IdxArray& images, const IdxArray& labels, std::size_t num_classes,
                                Split split = Split::train) {
    Tensor<double> x = idx_images(images);
    if (x.rank() == 3) x = x.reshaped(Shape{x.dim(0), 1, x.dim(1), x.dim(2)});
    if (x.rank() != 4) throw ShapeError("IDX images must be [N, H, W] or [N, C, H, W]");
    Dataset d{std::move(x), idx_labels(labels), num_classes, split};
    d.validate();
    return d;
}

// ---------------------------------------------------------------------------
// Cache

inline std::vector<std::uint8_t> serialize_dataset(const Dataset& d) {
    d.validate();
    std::vector<std::uint8_t> blob;
    blob.reserve(d.samples.size() * 8 + d.labels.size() * 4);
    for (double v : d.samples.data()) detail::put_le<double>(blob, v);
    for (int l : d.labels) detail::put_le<std::int32_t>(blob, l);
    const json manifest{{"kind", "dataset"},
                        {"shape", d.samples.shape()},
                        {"num_classes", d.num_classes},
                        {"split", to_string(d.split)},
                        {"sample_precision", "f64"},
                        {"label_type", "i32"}};
    return encode_container(manifest, blob);
}

inline Dataset deserialize_dataset(const std::vector<std::uint8_t>& bytes) {
    auto c = decode_container(bytes);
    Dataset d;
    try {
        if (c.manifest.at("kind") != "dataset") throw FormatError("container does not hold a dataset");
        const Shape shape = c.manifest.at("shape").get<Shape>();
        if (shape.size() != 4) throw FormatError("dataset shape must have rank 4");
        d.num_classes = c.manifest.at("num_classes").get<std::size_t>();
        d.split = split_from_string(c.manifest.at("split").get<std::string>());
        const std::size_t n = shape_numel(shape);
        if (c.blob.size() != n * 8 + shape[0] * 4)
            throw FormatError("dataset blob has " + std::to_string(c.blob.size()) + " bytes, expected " +
                              std::to_string(n * 8 + shape[0] * 4));
        d.samples = Tensor<double>(shape);
        for (std::size_t i = 0; i < n; ++i) d.samples[i] = detail::get_le<double>(c.blob.data() + i * 8);
        for (std::size_t i = 0; i < shape[0]; ++i)
            d.labels.push_back(detail::get_le<std::int32_t>(c.blob.data() + n * 8 + i * 4));
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed dataset manifest: ") + e.what());
    }
    d.validate();
    return d;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
    const auto bytes = serialize_dataset(d);
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline Dataset load_dataset(const std::filesystem::path& path) { return deserialize_dataset(read_file(path)); }

} // namespace rbdc
