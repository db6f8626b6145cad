// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

#include "misalign/tensor.hpp"

namespace misalign {

// One cross-attention layer with a fixed prompt embedding: the minimal
// setting in which an input latent can be chosen to produce (almost) any
// target output for a fixed prompt.
struct SingleLayerModel {
    Tensor wq;   // d x d
    Tensor wk;   // d_tau x d
    Tensor wv;   // d_tau x d
    Tensor tau;  // L x d_tau prompt embedding

    std::size_t dim() const { return wq.shape[0]; }
    std::size_t tokens() const { return tau.shape[0]; }

    static SingleLayerModel random(std::uint64_t seed, std::size_t d, std::size_t tokens,
                                   std::size_t d_tau);
    void validate() const;
};

// softmax((z Wq)(tau Wk)^T / sqrt(d)) . (tau Wv); rows of the output lie in
// the convex hull of the value rows.
Tensor single_layer_forward(const Tensor& z, const SingleLayerModel& model);

struct InvertResult {
    Tensor z;             // best iterate found
    double residual = 0;  // ||f(z) - target|| / max(1e-12, ||target||)
    int iters_used = 0;
    bool converged = false;
};

// Adam minimization of ||f(z) - target||^2 from zero init, same optimizer
// defaults as the attack. Failure is a reported residual, not an exception.
InvertResult invert_numeric(const Tensor& z_target, const SingleLayerModel& model,
                            double tol = 1e-3, int max_iters = 20000);

// Closed-form inverse, restricted to the square regime: one output row,
// tokens == d, invertible value/key matrices, target strictly inside the
// positive hull of the value rows. The free constant is fixed as the
// log-sum-exp shift that renormalizes the attention weights. Outside the
// regime this throws InapplicableError (structural) or DomainError (log of a
// non-positive weight).
Tensor invert_closed_form(const Tensor& z_target, const SingleLayerModel& model);

struct SpanReport {
    std::size_t rank = 0;       // rank of the value rows
    std::size_t hull_dim = 0;   // affine dimension of their convex hull
    std::string reachable_set;  // human-readable description
};

SpanReport span_analysis(const SingleLayerModel& model);

// Value rows tau . Wv of the model (L x d).
Tensor value_rows(const SingleLayerModel& model);

}  // namespace misalign
