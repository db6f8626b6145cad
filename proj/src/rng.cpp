// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#include "misalign/rng.hpp"

#include <cmath>
#include <numbers>

namespace misalign {

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view name, std::uint64_t index) {
    std::uint64_t h = splitmix64(base ^ fnv1a64(name));
    return splitmix64(h ^ (index * 0x9E3779B97F4A7C15ULL + 1));
}

RngStream::RngStream(std::uint64_t global_seed, std::string_view name, std::uint64_t index)
    : engine_(derive_seed(global_seed, name, index)) {}

std::uint64_t RngStream::next_u64() { return engine_(); }

double RngStream::uniform() {
    // top 53 bits -> [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RngStream::normal() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_normal_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    cached_normal_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
}

}  // namespace misalign
