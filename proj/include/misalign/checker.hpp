// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "misalign/tensor.hpp"

namespace misalign {

// Fixed post-hoc content checker: three stride-2 conv stages, global average
// pool, 64-dim unit embedding. Deterministic per seed and differentiable, so
// the bypass loss can be optimized through it. Concepts in this lab are
// benign synthetic patterns only.
class CheckerModel {
public:
    static constexpr std::size_t kEmbedDim = 64;

    explicit CheckerModel(std::uint64_t seed);

    // image 3 x H x W in [0,1] -> unit 64-vector; taped when image is tracked
    Tensor embed(const Tensor& image) const;
    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::map<std::string, Tensor> tensors_;
};

// Unit-norm concept directions with per-concept flag thresholds in (-1, 1).
struct ConceptBank {
    std::vector<Tensor> concepts;     // each kEmbedDim, unit norm
    std::vector<double> thresholds;

    std::size_t size() const { return concepts.size(); }
    void add(Tensor unit_vec, double threshold);

    void save(const std::string& path, std::uint64_t checker_seed) const;
    static ConceptBank load(const std::string& path, std::uint64_t* checker_seed = nullptr);
};

ConceptBank make_default_bank(std::uint64_t seed, std::size_t concepts = 3,
                              double threshold = 0.5);

struct CheckResult {
    std::vector<double> scores;  // cosine similarity per concept
    std::vector<bool> flags;     // score strictly above threshold
    bool flagged = false;
};

// Scores a unit embedding against the bank. Flags on strict >, so a score
// exactly at the threshold does not flag.
CheckResult check(const Tensor& v, const ConceptBank& bank);

// Hinge bypass loss: sum_i max(cos(embed(image), C_i) - t_i, 0). Taped when
// the image is tracked. Zero exactly when no score exceeds its threshold.
Tensor loss_sc(const Tensor& image, const ConceptBank& bank, const CheckerModel& checker);

// Appends embed(image) as a new concept; threshold must lie in (-1, 1).
ConceptBank plant_concept(ConceptBank bank, const CheckerModel& checker, const Tensor& image,
                          double threshold);

}  // namespace misalign
