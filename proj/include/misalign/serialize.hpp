// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "misalign/tensor.hpp"

namespace misalign {

// Flat binary container shared by model weights and concept banks:
//   magic "MSLNTNS1\n", u32 field count, fields as (u32 len, bytes, u64 value),
//   u32 tensor count, tensors as (u32 len, bytes, u32 rank, u64 extents, f64 data).
// All integers and floats little-endian. Round-trips bit-exactly.
struct NamedTensors {
    std::vector<std::pair<std::string, std::uint64_t>> fields;
    std::vector<std::pair<std::string, Tensor>> tensors;

    std::uint64_t field(const std::string& name) const;
    const Tensor& tensor(const std::string& name) const;
};

void save_container(const std::string& path, const NamedTensors& nt);
NamedTensors load_container(const std::string& path);

}  // namespace misalign
