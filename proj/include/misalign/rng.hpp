// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace misalign {

std::uint64_t fnv1a64(std::string_view s);
std::uint64_t splitmix64(std::uint64_t x);

// Derive a child seed from a base seed, a stream name, and an optional index.
// All randomness in the project flows from one global seed through these
// named substreams; there is no ambient RNG state anywhere.
std::uint64_t derive_seed(std::uint64_t base, std::string_view name, std::uint64_t index = 0);

// Deterministic random stream. mt19937_64 output is fully specified by the
// standard and the uniform/normal mappings below are hand-rolled, so equal
// (seed, name) pairs produce equal sequences on every platform.
class RngStream {
public:
    RngStream(std::uint64_t global_seed, std::string_view name, std::uint64_t index = 0);

    std::uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);   // [lo, hi)
    double normal();                        // standard normal, Box-Muller

private:
    std::mt19937_64 engine_;
    double cached_normal_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace misalign
