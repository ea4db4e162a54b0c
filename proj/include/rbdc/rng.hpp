// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "rbdc/tensor.hpp"

namespace rbdc {

// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) { return mix64(mix64(seed) ^ mix64(salt + 1)); }

// Seed for a node of the recursion tree, addressed by its path of '0'/'1' branch choices.
// The root has the empty path. Serial and parallel traversals see the same values.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view path) {
    std::uint64_t h = mix64(seed ^ 0x5242444350415448ULL);
    for (char c : path) h = mix64(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    return mix64(h ^ path.size());
}

using Rng = std::mt19937_64;

// Normal(0, std) resampled until within two standard deviations.
template <typename T>
T truncated_normal(Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (;;) {
        const double z = dist(rng);
        if (z >= -2.0 && z <= 2.0) return static_cast<T>(z * stddev);
    }
}

template <typename T>
Tensor<T> truncated_normal_tensor(Shape shape, Rng& rng, double stddev) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = truncated_normal<T>(rng, stddev);
    return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
}

} // namespace rbdc
