// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file format (all integers little-endian):
//
//   offset 0   8 bytes   magic "RBDCCKPT"
//   offset 8   4 bytes   format version (= 1)
//   offset 12  8 bytes   manifest length M
//   offset 20  M bytes   UTF-8 JSON manifest, keys sorted
//   offset 20+M          blob: raw little-endian tensor data
//
// The manifest holds the model spec, metadata (seed, epochs, lineage tree) and
// the ordered record list. Each record names one tensor, its role, shape,
// precision and byte offset into the blob.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "rbdc/errors.hpp"
#include "rbdc/model.hpp"
#include "rbdc/model_spec.hpp"
#include "rbdc/tensor.hpp"

namespace rbdc {

using json = nlohmann::json;

inline constexpr char kCheckpointMagic[8] = {'R', 'B', 'D', 'C', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kHeaderSize = 8 + 4 + 8;

struct TensorRecord {
    std::string name;
    LayerRole role = LayerRole::head;
    Shape shape;
    Precision precision = Precision::f32;
    std::uint64_t byte_offset = 0;

    std::uint64_t byte_length() const { return shape_numel(shape) * bytes_per_element(precision); }
    bool operator==(const TensorRecord&) const = default;
};

// Which checkpoints were coupled to produce this one. Leaves were trained from
// a random initialization; inner nodes have exactly two children of half width.
struct Lineage {
    std::string id;
    std::uint64_t seed = 0;
    std::size_t width = 0;
    std::size_t epochs = 0;
    std::vector<Lineage> children;

    std::size_t depth() const {
        std::size_t d = 0;
        for (const auto& c : children) d = std::max(d, c.depth() + 1);
        return d;
    }

    bool operator==(const Lineage&) const = default;
};

struct CheckpointMetadata {
    std::uint64_t seed = 0;
    std::size_t epochs_trained = 0;
    Lineage lineage;
    json extra = json::object();

    bool operator==(const CheckpointMetadata&) const = default;
};

struct Checkpoint {
    ModelSpec spec;
    std::vector<TensorRecord> records;
    std::vector<std::uint8_t> blob;
    CheckpointMetadata metadata;

    const TensorRecord& record(const std::string& name) const {
        for (const auto& r : records)
            if (r.name == name) return r;
        throw FormatError("checkpoint has no record '" + name + "'");
    }

    bool operator==(const Checkpoint&) const = default;
};

// ---------------------------------------------------------------------------
// JSON mapping

inline json spec_to_json(const ModelSpec& s) {
    return json{{"family", to_string(s.family)},
                {"width", s.width},
                {"depth", s.depth},
                {"heads", s.heads},
                {"head_dim", s.head_dim},
                {"patch_size", s.patch_size},
                {"input_shape", s.input_shape},
                {"num_classes", s.num_classes},
                {"min_width", s.min_width}};
}

inline ModelSpec spec_from_json(const json& j) {
    static const std::unordered_set<std::string> known{"family",      "width",       "depth",    "heads",    "head_dim",
                                                       "patch_size", "input_shape", "num_classes", "min_width"};
    if (!j.is_object()) throw FormatError("model spec must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw FormatError("unknown model spec key '" + k + "'");
    try {
        ModelSpec s;
        s.family = family_from_string(j.at("family").get<std::string>());
        s.width = j.at("width").get<std::size_t>();
        s.depth = j.at("depth").get<std::size_t>();
        s.heads = j.value("heads", std::size_t{0});
        s.head_dim = j.value("head_dim", std::size_t{0});
        s.patch_size = j.value("patch_size", std::size_t{1});
        if (j.contains("input_shape")) s.input_shape = j.at("input_shape").get<std::array<std::size_t, 3>>();
        s.num_classes = j.at("num_classes").get<std::size_t>();
        s.min_width = j.value("min_width", std::size_t{1});
        return s;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed model spec: ") + e.what());
    } catch (const SpecError& e) {
        throw FormatError(e.what());
    }
}

inline json lineage_to_json(const Lineage& l) {
    json children = json::array();
    for (const auto& c : l.children) children.push_back(lineage_to_json(c));
    return json{{"id", l.id}, {"seed", l.seed}, {"width", l.width}, {"epochs", l.epochs}, {"children", children}};
}

inline Lineage lineage_from_json(const json& j) {
    Lineage l;
    l.id = j.at("id").get<std::string>();
    l.seed = j.at("seed").get<std::uint64_t>();
    l.width = j.at("width").get<std::size_t>();
    l.epochs = j.at("epochs").get<std::size_t>();
    for (const auto& c : j.at("children")) l.children.push_back(lineage_from_json(c));
    return l;
}

inline json metadata_to_json(const CheckpointMetadata& m) {
    return json{{"seed", m.seed}, {"epochs_trained", m.epochs_trained}, {"lineage", lineage_to_json(m.lineage)},
                {"extra", m.extra}};
}

inline CheckpointMetadata metadata_from_json(const json& j) {
    CheckpointMetadata m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.epochs_trained = j.at("epochs_trained").get<std::size_t>();
    m.lineage = lineage_from_json(j.at("lineage"));
    m.extra = j.value("extra", json::object());
    return m;
}

// ---------------------------------------------------------------------------
// Validation

// A lineage tree is consistent when every inner node has two children of half its width.
inline void validate_lineage(const Lineage& l) {
    if (l.children.empty()) return;
    if (l.children.size() != 2)
        throw FormatError("lineage node '" + l.id + "' has " + std::to_string(l.children.size()) +
                          " children; coupling always joins two");
    for (const auto& c : l.children) {
        if (c.width * 2 != l.width)
            throw FormatError("lineage node '" + c.id + "' width " + std::to_string(c.width) +
                              " is not half of parent width " + std::to_string(l.width));
        validate_lineage(c);
    }
}

// Structural checks: unique names, byte ranges inside the blob and disjoint.
inline void validate_records(const Checkpoint& c) {
    std::unordered_set<std::string> names;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
    for (const auto& r : c.records) {
        if (!names.insert(r.name).second) throw FormatError("duplicate record name '" + r.name + "'");
        const std::uint64_t end = r.byte_offset + r.byte_length();
        if (end < r.byte_offset || end > c.blob.size())
            throw FormatError("record '" + r.name + "' byte range [" + std::to_string(r.byte_offset) + ", " +
                              std::to_string(end) + ") exceeds blob length " + std::to_string(c.blob.size()));
        ranges.emplace_back(r.byte_offset, end);
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i)
        if (ranges[i].first < ranges[i - 1].second) throw FormatError("record byte ranges overlap");
}

// The record set must equal the parameter set a build of `spec` produces.
inline void validate_against_spec(const Checkpoint& c) {
    const auto layout = parameter_layout(c.spec);
    if (layout.size() != c.records.size())
        throw FormatError("checkpoint has " + std::to_string(c.records.size()) + " records, spec expects " +
                          std::to_string(layout.size()));
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& r = c.records[i];
        if (r.name != layout[i].name || r.role != layout[i].role || r.shape != layout[i].shape)
            throw FormatError("record '" + r.name + "' (" + to_string(r.role) + ", " + shape_str(r.shape) +
                              ") does not match expected '" + layout[i].name + "' (" + to_string(layout[i].role) +
                              ", " + shape_str(layout[i].shape) + ")");
    }
}

inline void validate(const Checkpoint& c) {
    validate_records(c);
    validate_against_spec(c);
    validate_lineage(c.metadata.lineage);
}

// ---------------------------------------------------------------------------
// Tensor ↔ blob

namespace detail {

template <typename U>
U byteswap_if_needed(U v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(U)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<U>(bytes);
    }
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    v = byteswap_if_needed(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
}

template <typename U>
U get_le(const std::uint8_t* p) {
    U v;
    std::memcpy(&v, p, sizeof(U));
    return byteswap_if_needed(v);
}

template <typename Stored, typename T>
Tensor<T> decode_tensor(const std::vector<std::uint8_t>& blob, const TensorRecord& r) {
    Tensor<T> t(r.shape);
    const std::uint8_t* p = blob.data() + r.byte_offset;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(get_le<Stored>(p + i * sizeof(Stored)));
    return t;
}

} // namespace detail

template <typename T>
Tensor<T> read_tensor(const Checkpoint& c, const TensorRecord& r) {
    if (r.byte_offset + r.byte_length() > c.blob.size())
        throw FormatError("record '" + r.name + "' lies outside the blob");
    return r.precision == Precision::f32 ? detail::decode_tensor<float, T>(c.blob, r)
                                         : detail::decode_tensor<double, T>(c.blob, r);
}

template <typename T>
Tensor<T> read_tensor(const Checkpoint& c, const std::string& name) {
    return read_tensor<T>(c, c.record(name));
}

template <typename T>
void append_tensor(Checkpoint& c, const std::string& name, LayerRole role, const Tensor<T>& t) {
    TensorRecord r{name, role, t.shape(), precision_of<T>(), c.blob.size()};
    c.blob.reserve(c.blob.size() + r.byte_length());
    for (T v : t.data()) detail::put_le(c.blob, v);
    c.records.push_back(std::move(r));
}

template <typename T>
Checkpoint to_checkpoint(const Model<T>& model, CheckpointMetadata metadata = {}) {
    Checkpoint c;
    c.spec = model.spec();
    c.metadata = std::move(metadata);
    if (c.metadata.lineage.width == 0) {
        c.metadata.lineage.width = model.spec().width;
        c.metadata.lineage.seed = c.metadata.seed;
        c.metadata.lineage.epochs = c.metadata.epochs_trained;
    }
    for (const auto& p : model.parameters()) append_tensor(c, p.info.name, p.info.role, p.value);
    return c;
}

// Rebuilds a model at precision T; values stored at the other precision are converted.
template <typename T>
Model<T> to_model(const Checkpoint& c) {
    validate_records(c);
    validate_against_spec(c);
    std::vector<Parameter<T>> params;
    params.reserve(c.records.size());
    for (const auto& r : c.records) {
        ParamInfo info{r.name, r.role, r.shape, param_kind_from_name(r.name, r.role), InitKind::zeros};
        params.push_back({std::move(info), read_tensor<T>(c, r)});
    }
    return Model<T>::from_parameters(c.spec, std::move(params));
}

inline Precision checkpoint_precision(const Checkpoint& c) {
    return c.records.empty() ? Precision::f32 : c.records.front().precision;
}

// ---------------------------------------------------------------------------
// Container encode/decode

inline std::vector<std::uint8_t> encode_container(const json& manifest, const std::vector<std::uint8_t>& blob) {
    const std::string text = manifest.dump();
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint64_t>(out, text.size());
    const std::size_t head = out.size();
    out.resize(head + text.size() + blob.size());
    std::copy(text.begin(), text.end(), out.begin() + static_cast<std::ptrdiff_t>(head));
    std::copy(blob.begin(), blob.end(), out.begin() + static_cast<std::ptrdiff_t>(head + text.size()));
    return out;
}

struct Container {
    json manifest;
    std::vector<std::uint8_t> blob;
};

inline Container decode_container(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kHeaderSize) throw FormatError("file shorter than the 20-byte header");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw FormatError("bad magic at byte 0");
    const auto version = detail::get_le<std::uint32_t>(bytes.data() + 8);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported format version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    const auto mlen = detail::get_le<std::uint64_t>(bytes.data() + 12);
    if (mlen > bytes.size() - kHeaderSize)
        throw FormatError("manifest length " + std::to_string(mlen) + " exceeds file size");
    Container c;
    try {
        c.manifest = json::parse(bytes.begin() + kHeaderSize, bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderSize + mlen));
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
    }
    c.blob.assign(bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderSize + mlen), bytes.end());
    return c;
}

inline json manifest_of(const Checkpoint& c) {
    json records = json::array();
    for (const auto& r : c.records)
        records.push_back(json{{"name", r.name},
                               {"role", to_string(r.role)},
                               {"shape", r.shape},
                               {"precision", to_string(r.precision)},
                               {"byte_offset", r.byte_offset}});
    return json{{"kind", "checkpoint"},
                {"spec", spec_to_json(c.spec)},
                {"metadata", metadata_to_json(c.metadata)},
                {"records", records},
                {"blob_length", c.blob.size()}};
}

inline std::vector<std::uint8_t> serialize(const Checkpoint& c) {
    validate_records(c);
    return encode_container(manifest_of(c), c.blob);
}

inline Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
    Container raw = decode_container(bytes);
    const json& m = raw.manifest;
    Checkpoint c;
    try {
        if (m.value("kind", std::string{}) != "checkpoint") throw FormatError("container does not hold a checkpoint");
        c.spec = spec_from_json(m.at("spec"));
        c.metadata = metadata_from_json(m.at("metadata"));
        const auto declared = m.at("blob_length").get<std::uint64_t>();
        for (const auto& jr : m.at("records")) {
            TensorRecord r;
            r.name = jr.at("name").get<std::string>();
            r.role = role_from_string(jr.at("role").get<std::string>());
            r.shape = jr.at("shape").get<Shape>();
            r.precision = precision_from_string(jr.at("precision").get<std::string>());
            r.byte_offset = jr.at("byte_offset").get<std::uint64_t>();
            if (r.byte_offset + r.byte_length() > raw.blob.size())
                throw FormatError("record '" + r.name + "' byte range [" + std::to_string(r.byte_offset) + ", " +
                                  std::to_string(r.byte_offset + r.byte_length()) + ") exceeds blob length " +
                                  std::to_string(raw.blob.size()));
            c.records.push_back(std::move(r));
        }
        if (declared != raw.blob.size())
            throw FormatError("manifest declares blob length " + std::to_string(declared) + " but file holds " +
                              std::to_string(raw.blob.size()));
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what());
    }
    c.blob = std::move(raw.blob);
    validate_records(c);
    return c;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

// Writes to a sibling temporary and renames, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write '" + tmp.string() + "'");
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!out) throw FormatError("short write to '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, text.data(), text.size());
}

inline void save(const Checkpoint& c, const std::filesystem::path& path) {
    const auto bytes = serialize(c);
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline Checkpoint load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

} // namespace rbdc
