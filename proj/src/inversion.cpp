// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#include "misalign/inversion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "misalign/attack.hpp"
#include "misalign/pipeline.hpp"
#include "misalign/rng.hpp"

namespace misalign {

namespace {

// Gauss-Jordan solve A X = B for square A; returns false on a singular pivot.
bool solve_linear(Tensor a, Tensor b, Tensor& out) {
    std::size_t n = a.shape[0], m = b.shape[1];
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(a.data[r * n + col]) > std::fabs(a.data[piv * n + col])) piv = r;
        if (std::fabs(a.data[piv * n + col]) < 1e-12) return false;
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a.data[col * n + j], a.data[piv * n + j]);
            for (std::size_t j = 0; j < m; ++j) std::swap(b.data[col * m + j], b.data[piv * m + j]);
        }
        double inv = 1.0 / a.data[col * n + col];
        for (std::size_t j = 0; j < n; ++j) a.data[col * n + j] *= inv;
        for (std::size_t j = 0; j < m; ++j) b.data[col * m + j] *= inv;
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = a.data[r * n + col];
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) a.data[r * n + j] -= f * a.data[col * n + j];
            for (std::size_t j = 0; j < m; ++j) b.data[r * m + j] -= f * b.data[col * m + j];
        }
    }
    out = std::move(b);
    return true;
}

// Rank via elimination with column pivoting.
std::size_t matrix_rank(Tensor m, double tol) {
    if (m.size() == 0) return 0;
    std::size_t rows = m.shape[0], cols = m.shape[1];
    std::size_t rank = 0;
    for (std::size_t col = 0; col < cols && rank < rows; ++col) {
        std::size_t piv = rank;
        for (std::size_t r = rank + 1; r < rows; ++r)
            if (std::fabs(m.data[r * cols + col]) > std::fabs(m.data[piv * cols + col])) piv = r;
        if (std::fabs(m.data[piv * cols + col]) <= tol) continue;
        if (piv != rank)
            for (std::size_t j = 0; j < cols; ++j)
                std::swap(m.data[rank * cols + j], m.data[piv * cols + j]);
        double inv = 1.0 / m.data[rank * cols + col];
        for (std::size_t r = rank + 1; r < rows; ++r) {
            double f = m.data[r * cols + col] * inv;
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < cols; ++j)
                m.data[r * cols + j] -= f * m.data[rank * cols + j];
        }
        ++rank;
    }
    return rank;
}

double frob_norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data) s += v * v;
    return std::sqrt(s);
}

}  // namespace

SingleLayerModel SingleLayerModel::random(std::uint64_t seed, std::size_t d, std::size_t tokens,
                                          std::size_t d_tau) {
    RngStream rng(seed, "single-layer");
    auto draw = [&](std::vector<std::size_t> shape) {
        Tensor t(std::move(shape));
        double bound = std::sqrt(6.0 / static_cast<double>(tensor_fan_in(t)));
        for (auto& v : t.data) v = rng.uniform(-bound, bound);
        return t;
    };
    SingleLayerModel m;
    m.wq = draw({d, d});
    m.wk = draw({d_tau, d});
    m.wv = draw({d_tau, d});
    m.tau = draw({tokens, d_tau});
    m.validate();
    return m;
}

void SingleLayerModel::validate() const {
    if (wq.rank() != 2 || wq.shape[0] != wq.shape[1])
        throw ShapeError("single layer: Wq must be square, got " + shape_str(wq.shape));
    if (wk.shape != wv.shape || wk.shape[1] != wq.shape[0])
        throw ShapeError("single layer: Wk/Wv must be d_tau x d");
    if (tau.rank() != 2 || tau.shape[1] != wk.shape[0])
        throw ShapeError("single layer: tau " + shape_str(tau.shape) + " does not match Wk " +
                         shape_str(wk.shape));
    if (tokens() < 1) throw ContractError("single layer: need at least one token");
}

Tensor single_layer_forward(const Tensor& z, const SingleLayerModel& model) {
    return cross_attention(z, model.tau, model.tokens(), model.wq, model.wk, model.wv);
}

Tensor value_rows(const SingleLayerModel& model) { return matmul(model.tau, model.wv); }

InvertResult invert_numeric(const Tensor& z_target, const SingleLayerModel& model, double tol,
                            int max_iters) {
    if (!all_finite(z_target)) throw ContractError("invert_numeric: target must be finite");
    model.validate();
    double target_norm = std::max(1e-12, frob_norm(z_target));

    AttackConfig adam;  // attack defaults: alpha 1e-2, beta 0.9/0.999, eps 1e-8
    AttackState state;
    state.x = Tensor(z_target.shape);
    state.m = Tensor(z_target.shape);
    state.v = Tensor(z_target.shape);

    InvertResult best;
    best.z = state.x.detached();
    best.residual = std::numeric_limits<double>::infinity();
    for (int t = 1; t <= max_iters; ++t) {
        Tape tape;
        Tensor z = tape.leaf(state.x);
        Tensor resid = sub(single_layer_forward(z, model), z_target);
        Tensor loss = sum(mul(resid, resid));
        double r = std::sqrt(std::max(0.0, loss.item())) / target_norm;
        if (r < best.residual) {
            best.residual = r;
            best.z = state.x.detached();
            best.iters_used = t;
        }
        if (r <= tol) break;
        Gradients g = tape.backward(loss);
        adam_update(state, g.wrt(z), adam);
    }
    best.converged = best.residual <= tol;
    return best;
}

Tensor invert_closed_form(const Tensor& z_target, const SingleLayerModel& model) {
    model.validate();
    std::size_t d = model.dim(), tokens = model.tokens();
    if (z_target.rank() != 2 || z_target.shape[0] != 1 || z_target.shape[1] != d)
        throw InapplicableError("closed form: target must be a single 1 x d row");
    if (tokens != d)
        throw InapplicableError("closed form: requires token count == d (square regime), got L=" +
                                std::to_string(tokens) + " d=" + std::to_string(d));

    // attention weights a from a . Vm = target  <=>  Vm^T a^T = target^T
    Tensor vm = value_rows(model);  // d x d in this regime
    Tensor a_t;
    if (!solve_linear(transpose(vm), transpose(z_target), a_t))
        throw InapplicableError("closed form: value matrix tau.Wv is singular");
    for (double v : a_t.data)
        if (!(v > 0.0))
            throw DomainError(
                "closed form: target lies outside the positive hull of the value rows "
                "(log of a non-positive weight)");

    // logits sqrt(d) * (log a + C), C the log-sum-exp shift so the attention
    // weights renormalize under softmax
    double lse;
    {
        double mx = -std::numeric_limits<double>::infinity();
        for (double v : a_t.data) mx = std::max(mx, std::log(v));
        double s = 0.0;
        for (double v : a_t.data) s += std::exp(std::log(v) - mx);
        lse = mx + std::log(s);
    }
    double scale_d = std::sqrt(static_cast<double>(d));
    Tensor logits({1, d});
    for (std::size_t j = 0; j < d; ++j)
        logits.data[j] = scale_d * (std::log(a_t.data[j]) - lse);

    // z (Wq (tau Wk)^T) = logits
    Tensor km = matmul(model.tau, model.wk);  // d x d
    Tensor system = matmul(model.wq, transpose(km));
    Tensor z_t;
    if (!solve_linear(transpose(system), transpose(logits), z_t))
        throw InapplicableError("closed form: Wq (tau Wk)^T is singular");
    return transpose(z_t);
}

SpanReport span_analysis(const SingleLayerModel& model) {
    Tensor vals = value_rows(model);
    std::size_t tokens = model.tokens(), d = model.dim();
    SpanReport rep;
    rep.rank = matrix_rank(vals.detached(), 1e-10);

    // affine dimension: rank of the row differences against the first row
    if (tokens <= 1) {
        rep.hull_dim = 0;
    } else {
        Tensor diffs({tokens - 1, d});
        for (std::size_t i = 1; i < tokens; ++i)
            for (std::size_t j = 0; j < d; ++j)
                diffs.data[(i - 1) * d + j] = vals.data[i * d + j] - vals.data[j];
        rep.hull_dim = matrix_rank(diffs, 1e-10);
    }

    if (tokens == 1) {
        rep.reachable_set = "single point (one value row; output independent of the input)";
    } else if (rep.hull_dim == 0) {
        rep.reachable_set = "single point (all value rows coincide)";
    } else {
        rep.reachable_set = "open convex hull of " + std::to_string(tokens) +
                            " value rows, affine dimension " + std::to_string(rep.hull_dim) +
                            " inside a rank-" + std::to_string(rep.rank) + " span per output row";
    }
    return rep;
}

}  // namespace misalign
