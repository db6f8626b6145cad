// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "misalign/errors.hpp"

namespace misalign {

class Tape;

// Dense row-major tensor of 64-bit floats. A tensor becomes "tracked" when
// registered on a Tape (directly via Tape::leaf or as the result of an op on
// tracked inputs); tracked tensors carry a non-owning tape handle. Copies are
// plain value copies.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shp);
    Tensor(std::vector<std::size_t> shp, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor full(std::vector<std::size_t> shp, double v);
    static Tensor zeros_like(const Tensor& t);

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool tracked() const { return node >= 0 && tape != nullptr; }
    // Value of a one-element tensor.
    double item() const;
    // Same shape and data, tracking stripped.
    Tensor detached() const { return Tensor(shape, data); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
};

std::string shape_str(const std::vector<std::size_t>& shape);
bool same_shape(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

// Gradient of a scalar loss with respect to tape nodes, keyed by node id.
// Untracked tensors never appear; tracked nodes the loss does not reach
// read back as zeros.
class Gradients {
public:
    bool has(const Tensor& t) const;
    Tensor wrt(const Tensor& t) const;
    void set(int node, Tensor g);
    const std::unordered_map<int, Tensor>& by_node() const { return grads_; }

private:
    std::unordered_map<int, Tensor> grads_;
};

// Reverse-mode differentiation record. Ops append nodes in evaluation order,
// so parent ids always precede their consumers and one reverse sweep visits
// each node exactly once. A tape lives for a single forward pass.
class Tape {
public:
    using Vjp = std::function<std::vector<Tensor>(const Tensor&)>;

    // Register an input tensor for differentiation.
    Tensor leaf(Tensor t);
    int add_node(std::vector<int> parents, std::vector<std::size_t> shape, Vjp vjp);
    Gradients backward(const Tensor& loss) const;

    std::size_t size() const { return nodes_.size(); }
    const std::vector<std::size_t>& node_shape(int id) const;

private:
    struct Node {
        std::vector<int> parents;
        std::vector<std::size_t> shape;
        Vjp vjp;  // empty for leaves
    };
    std::vector<Node> nodes_;
};

Gradients backward(const Tape& tape, const Tensor& loss);

// ---------------------------------------------------------------------------
// Differentiable ops. Each op computes its forward value and, when any input
// is tracked, records itself on that input's tape. Elementwise binary ops
// require exactly matching shapes; there is no implicit broadcasting.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
// Numerically stable logistic, output clamped to [1e-15, 1 - 1e-15] so the
// result is strictly inside (0, 1) for every finite input.
Tensor sigmoid(const Tensor& x);
// Inverse sigmoid; input clamped to [1e-6, 1 - 1e-6] first.
Tensor logit(const Tensor& p);
// Cross-correlation, kernel O x C x k x k with odd k, zero padding k/2,
// stride 1 or 2. Output height is ceil(H / stride).
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride);
Tensor upsample2x(const Tensor& x);  // nearest neighbour, C x H x W -> C x 2H x 2W
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor rsqrt(const Tensor& x, double eps);  // 1/sqrt(x + eps), requires x + eps > 0
Tensor sum(const Tensor& x);   // -> shape {1}
Tensor mean(const Tensor& x);  // -> shape {1}
Tensor gap2d(const Tensor& x);  // C x H x W -> C, spatial mean per channel
Tensor l2_normalize(const Tensor& v);  // rank-1; divides by (||v|| + 1e-12)
Tensor concat_channels(const std::vector<Tensor>& parts);
// C x H x W -> (H*W) x C, positions row-major.
Tensor chw_to_nc(const Tensor& x);
Tensor nc_to_chw(const Tensor& x, std::size_t channels, std::size_t height, std::size_t width);
Tensor reshape(const Tensor& x, std::vector<std::size_t> new_shape);  // same element count
// C -> C x H x W, each channel filled with its entry.
Tensor broadcast_channels(const Tensor& per_channel, std::size_t height, std::size_t width);

// Constant helpers (inputs must be untracked).
Tensor replicate_spatial(const Tensor& per_channel, std::size_t height, std::size_t width);

// Max over coordinates of |AD - central difference| / max(1e-8, |central|),
// with per-coordinate step h * (1 + |x_i|). `f` must treat the given tensor
// as its only variable and must not register leaves itself; it is called with
// a tracked tensor for the AD pass and untracked tensors for the differences.
// `inject_ad_error`, when nonzero, perturbs the AD gradient before the
// comparison; it exists so the gradcheck harness can prove it catches a bad
// gradient.
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                  const Tensor& point, double h, double inject_ad_error = 0.0);

}  // namespace misalign
