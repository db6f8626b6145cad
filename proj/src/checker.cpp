// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#include "misalign/checker.hpp"

#include <algorithm>
#include <cmath>

#include "misalign/pipeline.hpp"
#include "misalign/rng.hpp"
#include "misalign/serialize.hpp"

namespace misalign {

CheckerModel::CheckerModel(std::uint64_t seed) : seed_(seed) {
    RngStream rng(seed, "checker");
    const std::vector<std::pair<std::string, std::vector<std::size_t>>> plan = {
        {"chk.c1.w", {16, 3, 3, 3}},  {"chk.c1.b", {16}},
        {"chk.c2.w", {32, 16, 3, 3}}, {"chk.c2.b", {32}},
        {"chk.c3.w", {kEmbedDim, 32, 3, 3}}, {"chk.c3.b", {kEmbedDim}},
    };
    for (const auto& [name, shape] : plan) {
        Tensor t(shape);
        double bound = std::sqrt(6.0 / static_cast<double>(tensor_fan_in(t)));
        for (auto& v : t.data) v = rng.uniform(-bound, bound);
        tensors_.emplace(name, std::move(t));
    }
}

Tensor CheckerModel::embed(const Tensor& image) const {
    if (image.rank() != 3 || image.shape[0] != 3)
        throw ShapeError("checker embed: expected 3 x H x W, got " + shape_str(image.shape));
    require_image_range(image, "checker embed");
    auto stage = [&](const Tensor& x, const std::string& stem) {
        Tensor y = conv2d(x, tensors_.at(stem + ".w"), 2);
        Tensor b = replicate_spatial(tensors_.at(stem + ".b"), y.shape[1], y.shape[2]);
        return silu(add(y, b));
    };
    Tensor f = stage(image, "chk.c1");
    f = stage(f, "chk.c2");
    f = stage(f, "chk.c3");
    return l2_normalize(gap2d(f));
}

void ConceptBank::add(Tensor unit_vec, double threshold) {
    if (unit_vec.shape != std::vector<std::size_t>{CheckerModel::kEmbedDim})
        throw ShapeError("concept must be a " + std::to_string(CheckerModel::kEmbedDim) +
                         "-vector, got " + shape_str(unit_vec.shape));
    double sq = 0.0;
    for (double v : unit_vec.data) sq += v * v;
    if (std::fabs(std::sqrt(sq) - 1.0) > 1e-10)
        throw ContractError("concept vector must be unit norm");
    if (!(threshold > -1.0 && threshold < 1.0))
        throw ContractError("concept threshold must lie strictly inside (-1, 1)");
    concepts.push_back(std::move(unit_vec));
    thresholds.push_back(threshold);
}

void ConceptBank::save(const std::string& path, std::uint64_t checker_seed) const {
    NamedTensors nt;
    nt.fields = {{"M", concepts.size()},
                 {"dim", CheckerModel::kEmbedDim},
                 {"checker_seed", checker_seed}};
    Tensor mat({concepts.size(), CheckerModel::kEmbedDim});
    for (std::size_t i = 0; i < concepts.size(); ++i)
        std::copy(concepts[i].data.begin(), concepts[i].data.end(),
                  mat.data.begin() + static_cast<std::ptrdiff_t>(i * CheckerModel::kEmbedDim));
    nt.tensors.emplace_back("concepts", std::move(mat));
    nt.tensors.emplace_back("thresholds",
                            Tensor({thresholds.size()}, std::vector<double>(thresholds)));
    save_container(path, nt);
}

ConceptBank ConceptBank::load(const std::string& path, std::uint64_t* checker_seed) {
    NamedTensors nt = load_container(path);
    std::size_t m = nt.field("M");
    if (checker_seed) *checker_seed = nt.field("checker_seed");
    const Tensor& mat = nt.tensor("concepts");
    const Tensor& th = nt.tensor("thresholds");
    ConceptBank bank;
    for (std::size_t i = 0; i < m; ++i) {
        Tensor c({CheckerModel::kEmbedDim});
        std::copy(mat.data.begin() + static_cast<std::ptrdiff_t>(i * CheckerModel::kEmbedDim),
                  mat.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * CheckerModel::kEmbedDim),
                  c.data.begin());
        bank.concepts.push_back(std::move(c));
        bank.thresholds.push_back(th.data[i]);
    }
    return bank;
}

ConceptBank make_default_bank(std::uint64_t seed, std::size_t concepts, double threshold) {
    RngStream rng(seed, "concepts");
    ConceptBank bank;
    for (std::size_t i = 0; i < concepts; ++i) {
        Tensor v({CheckerModel::kEmbedDim});
        for (auto& x : v.data) x = rng.normal();
        bank.add(l2_normalize(v), threshold);
    }
    return bank;
}

CheckResult check(const Tensor& v, const ConceptBank& bank) {
    if (v.shape != std::vector<std::size_t>{CheckerModel::kEmbedDim})
        throw ShapeError("check: expected a " + std::to_string(CheckerModel::kEmbedDim) +
                         "-vector, got " + shape_str(v.shape));
    CheckResult r;
    for (std::size_t i = 0; i < bank.size(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < v.size(); ++j) s += v.data[j] * bank.concepts[i].data[j];
        r.scores.push_back(s);
        r.flags.push_back(s > bank.thresholds[i]);
        if (r.flags.back()) r.flagged = true;
    }
    return r;
}

Tensor loss_sc(const Tensor& image, const ConceptBank& bank, const CheckerModel& checker) {
    Tensor v = checker.embed(image);
    Tensor total = Tensor::scalar(0.0);
    bool first = true;
    for (std::size_t i = 0; i < bank.size(); ++i) {
        Tensor score = sum(mul(v, bank.concepts[i]));
        Tensor hinge = relu(sub(score, Tensor::scalar(bank.thresholds[i])));
        total = first ? hinge : add(total, hinge);
        first = false;
    }
    return total;
}

ConceptBank plant_concept(ConceptBank bank, const CheckerModel& checker, const Tensor& image,
                          double threshold) {
    Tensor v = checker.embed(image);
    bank.add(v.detached(), threshold);
    return bank;
}

}  // namespace misalign
