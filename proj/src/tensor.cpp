// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#include "misalign/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace misalign {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

Tape* joint_tape(const Tensor& a, const Tensor& b) {
    if (a.tracked() && b.tracked() && a.tape != b.tape)
        throw ContractError("op on tensors tracked by different tapes");
    return a.tracked() ? a.tape : (b.tracked() ? b.tape : nullptr);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
}

void bind_node(Tensor& out, Tape* tape, std::vector<int> parents, Tape::Vjp vjp) {
    if (!tape) return;
    out.node = tape->add_node(std::move(parents), out.shape, std::move(vjp));
    out.tape = tape;
}

// Shared machinery for unary elementwise ops: forward value plus the local
// derivative evaluated at the input.
Tensor unary_op(const Tensor& x, const std::function<void(double, double&, double&)>& fn) {
    Tensor out(x.shape);
    std::vector<double> deriv;
    bool want_deriv = x.tracked();
    if (want_deriv) deriv.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double d = 0.0;
        fn(x.data[i], out.data[i], d);
        if (want_deriv) deriv[i] = d;
    }
    if (want_deriv) {
        bind_node(out, x.tape, {x.node}, [deriv = std::move(deriv)](const Tensor& g) {
            Tensor gx(g.shape);
            for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] = g.data[i] * deriv[i];
            return std::vector<Tensor>{std::move(gx)};
        });
    }
    return out;
}

double stable_sigmoid(double x) {
    double y;
    if (x >= 0.0) {
        y = 1.0 / (1.0 + std::exp(-x));
    } else {
        double e = std::exp(x);
        y = e / (1.0 + e);
    }
    return y;
}

constexpr double kSigmoidFloor = 1e-15;
constexpr double kLogitClamp = 1e-6;

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shp) : shape(std::move(shp)), data(shape_numel(shape), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shp, std::vector<double> values)
    : shape(std::move(shp)), data(std::move(values)) {
    if (data.size() != shape_numel(shape))
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::full(std::vector<std::size_t> shp, double v) {
    Tensor t(std::move(shp));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

Tensor Tensor::zeros_like(const Tensor& t) { return Tensor(t.shape); }

double Tensor::item() const {
    if (size() != 1)
        throw ContractError("item() requires a one-element tensor, got shape " + shape_str(shape));
    return data[0];
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

bool all_finite(const Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

bool Gradients::has(const Tensor& t) const {
    return t.tracked() && grads_.find(t.node) != grads_.end();
}

Tensor Gradients::wrt(const Tensor& t) const {
    if (!t.tracked()) throw ContractError("gradient requested for an untracked tensor");
    auto it = grads_.find(t.node);
    if (it == grads_.end()) return Tensor(t.shape);
    return it->second;
}

void Gradients::set(int node, Tensor g) { grads_[node] = std::move(g); }

Tensor Tape::leaf(Tensor t) {
    t.node = add_node({}, t.shape, nullptr);
    t.tape = this;
    return t;
}

int Tape::add_node(std::vector<int> parents, std::vector<std::size_t> shape, Vjp vjp) {
    int id = static_cast<int>(nodes_.size());
    for (int p : parents)
        if (p < 0 || p >= id) throw ContractError("tape node parent out of order");
    nodes_.push_back(Node{std::move(parents), std::move(shape), std::move(vjp)});
    return id;
}

const std::vector<std::size_t>& Tape::node_shape(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
        throw ContractError("tape node id out of range");
    return nodes_[static_cast<std::size_t>(id)].shape;
}

Gradients Tape::backward(const Tensor& loss) const {
    if (loss.tape != this || !loss.tracked())
        throw ContractError("backward: loss is not tracked on this tape");
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape));

    std::vector<Tensor> grad(nodes_.size());
    std::vector<char> present(nodes_.size(), 0);
    grad[static_cast<std::size_t>(loss.node)] = Tensor(loss.shape, std::vector<double>(1, 1.0));
    present[static_cast<std::size_t>(loss.node)] = 1;

    for (int id = loss.node; id >= 0; --id) {
        auto i = static_cast<std::size_t>(id);
        if (!present[i] || !nodes_[i].vjp) continue;
        std::vector<Tensor> contrib = nodes_[i].vjp(grad[i]);
        const auto& parents = nodes_[i].parents;
        if (contrib.size() != parents.size())
            throw ContractError("vjp returned wrong number of gradients");
        for (std::size_t k = 0; k < parents.size(); ++k) {
            auto p = static_cast<std::size_t>(parents[k]);
            if (contrib[k].shape != nodes_[p].shape)
                throw ShapeError("gradient shape " + shape_str(contrib[k].shape) +
                                 " does not match node shape " + shape_str(nodes_[p].shape));
            if (!present[p]) {
                grad[p] = std::move(contrib[k]);
                present[p] = 1;
            } else {
                Tensor& acc = grad[p];
                const Tensor& c = contrib[k];
                for (std::size_t j = 0; j < acc.size(); ++j) acc.data[j] += c.data[j];
            }
        }
        if (id != loss.node) grad[i] = Tensor();  // free as we go
    }

    Gradients out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (present[i] && grad[i].size() > 0) out.set(static_cast<int>(i), std::move(grad[i]));
    if (!out.has(loss)) out.set(loss.node, Tensor(loss.shape, std::vector<double>(1, 1.0)));
    return out;
}

Gradients backward(const Tape& tape, const Tensor& loss) { return tape.backward(loss); }

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));
    if (a.shape[1] != b.shape[0])
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
    std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data.data() + i * k;
        double* orow = out.data.data() + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            double av = arow[t];
            if (av == 0.0) continue;
            const double* brow = b.data.data() + t * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    Tape* tape = joint_tape(a, b);
    if (!tape) return out;

    std::vector<int> parents;
    bool ta = a.tracked(), tb = b.tracked();
    if (ta) parents.push_back(a.node);
    if (tb) parents.push_back(b.node);
    Tensor av = a.detached(), bv = b.detached();
    bind_node(out, tape, parents, [ta, tb, av, bv, m, k, n](const Tensor& g) {
        std::vector<Tensor> grads;
        if (ta) {  // dA = g . B^T
            Tensor ga({m, k});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t t = 0; t < k; ++t) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        acc += g.data[i * n + j] * bv.data[t * n + j];
                    ga.data[i * k + t] = acc;
                }
            grads.push_back(std::move(ga));
        }
        if (tb) {  // dB = A^T . g
            Tensor gb({k, n});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t t = 0; t < k; ++t) {
                    double avv = av.data[i * k + t];
                    if (avv == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j)
                        gb.data[t * n + j] += avv * g.data[i * n + j];
                }
            grads.push_back(std::move(gb));
        }
        return grads;
    });
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(a.shape));
    std::size_t m = a.shape[0], n = a.shape[1];
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = a.data[i * n + j];
    if (a.tracked()) {
        bind_node(out, a.tape, {a.node}, [](const Tensor& g) {
            return std::vector<Tensor>{transpose(g)};
        });
    }
    return out;
}

Tensor softmax_rows(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("softmax_rows: expected rank-2, got " + shape_str(a.shape));
    std::size_t m = a.shape[0], n = a.shape[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = a.data.data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        double* orow = out.data.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        for (std::size_t j = 0; j < n; ++j) orow[j] /= z;
    }
    if (a.tracked()) {
        Tensor y = out.detached();
        bind_node(out, a.tape, {a.node}, [y, m, n](const Tensor& g) {
            Tensor gx({m, n});
            for (std::size_t i = 0; i < m; ++i) {
                const double* yr = y.data.data() + i * n;
                const double* gr = g.data.data() + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
                double* gxr = gx.data.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) gxr[j] = yr[j] * (gr[j] - dot);
            }
            return std::vector<Tensor>{std::move(gx)};
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(x, [](double v, double& y, double& d) {
        y = stable_sigmoid(v);
        if (y < kSigmoidFloor) {
            y = kSigmoidFloor;
            d = 0.0;
        } else if (y > 1.0 - kSigmoidFloor) {
            y = 1.0 - kSigmoidFloor;
            d = 0.0;
        } else {
            d = y * (1.0 - y);
        }
    });
}

Tensor logit(const Tensor& p) {
    return unary_op(p, [](double v, double& y, double& d) {
        if (v <= kLogitClamp) {
            y = std::log(kLogitClamp / (1.0 - kLogitClamp));
            d = 0.0;
        } else if (v >= 1.0 - kLogitClamp) {
            y = std::log((1.0 - kLogitClamp) / kLogitClamp);
            d = 0.0;
        } else {
            y = std::log(v / (1.0 - v));
            d = 1.0 / (v * (1.0 - v));
        }
    });
}

namespace {

void conv2d_shapes(const Tensor& input, const Tensor& kernel, int stride, std::size_t& oc,
                   std::size_t& oh, std::size_t& ow, std::size_t& pad) {
    if (input.rank() != 3)
        throw ShapeError("conv2d: expected C x H x W input, got " + shape_str(input.shape));
    if (kernel.rank() != 4)
        throw ShapeError("conv2d: expected O x C x k x k kernel, got " + shape_str(kernel.shape));
    if (kernel.shape[1] != input.shape[0])
        throw ShapeError("conv2d: kernel channels " + shape_str(kernel.shape) +
                         " do not match input " + shape_str(input.shape));
    std::size_t k = kernel.shape[2];
    if (k != kernel.shape[3] || k % 2 == 0)
        throw ShapeError("conv2d: kernel must be square with odd size, got " +
                         shape_str(kernel.shape));
    if (stride != 1 && stride != 2) throw ContractError("conv2d: stride must be 1 or 2");
    pad = k / 2;
    oc = kernel.shape[0];
    auto s = static_cast<std::size_t>(stride);
    oh = (input.shape[1] + 2 * pad - k) / s + 1;
    ow = (input.shape[2] + 2 * pad - k) / s + 1;
}

// 3x3 fast path: one pass per (o, c, oy) row, zero row standing in for
// out-of-range input rows.
void conv2d_forward_3x3(const double* in, const double* ker, double* out, std::size_t ic,
                        std::size_t ih, std::size_t iw, std::size_t oc, std::size_t oh,
                        std::size_t ow, std::size_t stride) {
    std::vector<double> zero_row(iw + 2, 0.0);
    for (std::size_t o = 0; o < oc; ++o) {
        double* out_plane = out + o * oh * ow;
        std::fill(out_plane, out_plane + oh * ow, 0.0);
        for (std::size_t c = 0; c < ic; ++c) {
            const double* in_plane = in + c * ih * iw;
            const double* kc = ker + (o * ic + c) * 9;
            const double w00 = kc[0], w01 = kc[1], w02 = kc[2];
            const double w10 = kc[3], w11 = kc[4], w12 = kc[5];
            const double w20 = kc[6], w21 = kc[7], w22 = kc[8];
            for (std::size_t oy = 0; oy < oh; ++oy) {
                std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride) - 1;
                const double* r0 = (iy >= 0 && iy < static_cast<std::ptrdiff_t>(ih))
                                       ? in_plane + static_cast<std::size_t>(iy) * iw
                                       : zero_row.data();
                const double* r1 = (iy + 1 >= 0 && iy + 1 < static_cast<std::ptrdiff_t>(ih))
                                       ? in_plane + static_cast<std::size_t>(iy + 1) * iw
                                       : zero_row.data();
                const double* r2 = (iy + 2 < static_cast<std::ptrdiff_t>(ih))
                                       ? in_plane + static_cast<std::size_t>(iy + 2) * iw
                                       : zero_row.data();
                double* orow = out_plane + oy * ow;
                // ox = 0 drops the ix = -1 column
                orow[0] += w01 * r0[0] + w02 * r0[1] + w11 * r1[0] + w12 * r1[1] +
                           w21 * r2[0] + w22 * r2[1];
                // interior: all three taps in range, tap max = ox*stride + 1 <= iw - 1
                std::size_t x_hi = (iw - 2) / stride;  // last fully-interior ox
                if (x_hi > ow - 1) x_hi = ow - 1;
                if (stride == 1) {
                    for (std::size_t ox = 1; ox <= x_hi; ++ox) {
                        const double* c0 = r0 + ox - 1;
                        const double* c1 = r1 + ox - 1;
                        const double* c2 = r2 + ox - 1;
                        orow[ox] += w00 * c0[0] + w01 * c0[1] + w02 * c0[2] +
                                    w10 * c1[0] + w11 * c1[1] + w12 * c1[2] +
                                    w20 * c2[0] + w21 * c2[1] + w22 * c2[2];
                    }
                } else {
                    for (std::size_t ox = 1; ox <= x_hi; ++ox) {
                        const double* c0 = r0 + 2 * ox - 1;
                        const double* c1 = r1 + 2 * ox - 1;
                        const double* c2 = r2 + 2 * ox - 1;
                        orow[ox] += w00 * c0[0] + w01 * c0[1] + w02 * c0[2] +
                                    w10 * c1[0] + w11 * c1[1] + w12 * c1[2] +
                                    w20 * c2[0] + w21 * c2[1] + w22 * c2[2];
                    }
                }
                // right edge columns with a clipped tap
                for (std::size_t ox = x_hi + 1; ox < ow; ++ox) {
                    std::size_t ix = ox * stride - 1;
                    double acc = w00 * r0[ix] + w10 * r1[ix] + w20 * r2[ix];
                    if (ix + 1 < iw) acc += w01 * r0[ix + 1] + w11 * r1[ix + 1] + w21 * r2[ix + 1];
                    orow[ox] += acc;
                }
            }
        }
    }
}

void conv2d_forward(const double* in, const double* ker, double* out, std::size_t ic,
                    std::size_t ih, std::size_t iw, std::size_t oc, std::size_t oh,
                    std::size_t ow, std::size_t k, std::size_t pad, std::size_t stride) {
    if (k == 3 && pad == 1 && iw >= 2 && ow >= 2) {
        conv2d_forward_3x3(in, ker, out, ic, ih, iw, oc, oh, ow, stride);
        return;
    }
    // accumulate one output plane at a time; the inner loop runs contiguously
    // over output x so it vectorizes
    std::ptrdiff_t p = static_cast<std::ptrdiff_t>(pad);
    std::ptrdiff_t ihs = static_cast<std::ptrdiff_t>(ih);
    std::ptrdiff_t iws = static_cast<std::ptrdiff_t>(iw);
    for (std::size_t o = 0; o < oc; ++o) {
        double* out_plane = out + o * oh * ow;
        std::fill(out_plane, out_plane + oh * ow, 0.0);
        for (std::size_t c = 0; c < ic; ++c) {
            const double* in_plane = in + c * ih * iw;
            const double* kc = ker + (o * ic + c) * k * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - p;
                    if (iy < 0 || iy >= ihs) continue;
                    const double* irow = in_plane + static_cast<std::size_t>(iy) * iw;
                    double* orow = out_plane + oy * ow;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        double wgt = kc[ky * k + kx];
                        if (wgt == 0.0) continue;
                        std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - p;
                        // valid ox range: 0 <= ox*stride + off < iw
                        std::ptrdiff_t lo = off < 0 ? (-off + static_cast<std::ptrdiff_t>(stride) - 1) /
                                                          static_cast<std::ptrdiff_t>(stride)
                                                    : 0;
                        std::ptrdiff_t hi = (iws - 1 - off) / static_cast<std::ptrdiff_t>(stride);
                        if (hi >= static_cast<std::ptrdiff_t>(ow)) hi = static_cast<std::ptrdiff_t>(ow) - 1;
                        if (stride == 1) {
                            const double* ir = irow + off;
                            for (std::ptrdiff_t ox = lo; ox <= hi; ++ox)
                                orow[ox] += wgt * ir[ox];
                        } else {
                            for (std::ptrdiff_t ox = lo; ox <= hi; ++ox)
                                orow[ox] += wgt * irow[ox * 2 + off];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride) {
    std::size_t oc, oh, ow, pad;
    conv2d_shapes(input, kernel, stride, oc, oh, ow, pad);
    std::size_t ic = input.shape[0], ih = input.shape[1], iw = input.shape[2];
    std::size_t k = kernel.shape[2];
    auto s = static_cast<std::size_t>(stride);

    Tensor out({oc, oh, ow});
    conv2d_forward(input.data.data(), kernel.data.data(), out.data.data(), ic, ih, iw, oc, oh,
                   ow, k, pad, s);

    Tape* tape = joint_tape(input, kernel);
    if (!tape) return out;

    bool ti = input.tracked(), tk = kernel.tracked();
    std::vector<int> parents;
    if (ti) parents.push_back(input.node);
    if (tk) parents.push_back(kernel.node);
    Tensor iv = input.detached(), kv = kernel.detached();
    bind_node(out, tape, parents, [ti, tk, iv, kv, ic, ih, iw, oc, oh, ow, k, pad, s](const Tensor& g) {
        std::vector<Tensor> grads;
        Tensor gi({ic, ih, iw});
        Tensor gk(kv.shape);
        std::ptrdiff_t p = static_cast<std::ptrdiff_t>(pad);
        for (std::size_t o = 0; o < oc; ++o) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
                std::ptrdiff_t base_y = static_cast<std::ptrdiff_t>(oy * s) - p;
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    std::ptrdiff_t base_x = static_cast<std::ptrdiff_t>(ox * s) - p;
                    double gv = g.data[(o * oh + oy) * ow + ox];
                    if (gv == 0.0) continue;
                    for (std::size_t c = 0; c < ic; ++c) {
                        const double* kc = kv.data.data() + (o * ic + c) * k * k;
                        const double* inc = iv.data.data() + c * ih * iw;
                        double* gic = gi.data.data() + c * ih * iw;
                        double* gkc = gk.data.data() + (o * ic + c) * k * k;
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            std::ptrdiff_t iy = base_y + static_cast<std::ptrdiff_t>(ky);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
                            std::size_t row = static_cast<std::size_t>(iy) * iw;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                std::ptrdiff_t ix = base_x + static_cast<std::ptrdiff_t>(kx);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
                                if (ti) gic[row + static_cast<std::size_t>(ix)] += gv * kc[ky * k + kx];
                                if (tk) gkc[ky * k + kx] += gv * inc[row + static_cast<std::size_t>(ix)];
                            }
                        }
                    }
                }
            }
        }
        if (ti) grads.push_back(std::move(gi));
        if (tk) grads.push_back(std::move(gk));
        return grads;
    });
    return out;
}

Tensor upsample2x(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("upsample2x: expected C x H x W, got " + shape_str(x.shape));
    std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
    Tensor out({c, 2 * h, 2 * w});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t xx = 0; xx < 2 * w; ++xx)
                out.data[(ch * 2 * h + y) * 2 * w + xx] = x.data[(ch * h + y / 2) * w + xx / 2];
    if (x.tracked()) {
        bind_node(out, x.tape, {x.node}, [c, h, w](const Tensor& g) {
            Tensor gx({c, h, w});
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < 2 * h; ++y)
                    for (std::size_t xx = 0; xx < 2 * w; ++xx)
                        gx.data[(ch * h + y / 2) * w + xx / 2] +=
                            g.data[(ch * 2 * h + y) * 2 * w + xx];
            return std::vector<Tensor>{std::move(gx)};
        });
    }
    return out;
}

namespace {

Tensor binary_ew(const char* name, const Tensor& a, const Tensor& b, int kind) {
    require_same_shape(name, a, b);
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) {
        switch (kind) {
            case 0: out.data[i] = a.data[i] + b.data[i]; break;
            case 1: out.data[i] = a.data[i] - b.data[i]; break;
            default: out.data[i] = a.data[i] * b.data[i]; break;
        }
    }
    Tape* tape = joint_tape(a, b);
    if (!tape) return out;
    bool ta = a.tracked(), tb = b.tracked();
    std::vector<int> parents;
    if (ta) parents.push_back(a.node);
    if (tb) parents.push_back(b.node);
    if (kind == 2) {
        Tensor av = a.detached(), bv = b.detached();
        bind_node(out, tape, parents, [ta, tb, av, bv](const Tensor& g) {
            std::vector<Tensor> grads;
            if (ta) {
                Tensor ga(g.shape);
                for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] = g.data[i] * bv.data[i];
                grads.push_back(std::move(ga));
            }
            if (tb) {
                Tensor gb(g.shape);
                for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] = g.data[i] * av.data[i];
                grads.push_back(std::move(gb));
            }
            return grads;
        });
    } else {
        bool negate_b = (kind == 1);
        bind_node(out, tape, parents, [ta, tb, negate_b](const Tensor& g) {
            std::vector<Tensor> grads;
            if (ta) grads.push_back(g);
            if (tb) {
                if (!negate_b) {
                    grads.push_back(g);
                } else {
                    Tensor gb(g.shape);
                    for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] = -g.data[i];
                    grads.push_back(std::move(gb));
                }
            }
            return grads;
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_ew("add", a, b, 0); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_ew("sub", a, b, 1); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_ew("mul", a, b, 2); }

Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * c;
    if (a.tracked()) {
        bind_node(out, a.tape, {a.node}, [c](const Tensor& g) {
            Tensor gx(g.shape);
            for (std::size_t i = 0; i < g.size(); ++i) gx.data[i] = g.data[i] * c;
            return std::vector<Tensor>{std::move(gx)};
        });
    }
    return out;
}

Tensor silu(const Tensor& x) {
    return unary_op(x, [](double v, double& y, double& d) {
        double sg = stable_sigmoid(v);
        y = v * sg;
        d = sg * (1.0 + v * (1.0 - sg));
    });
}

Tensor relu(const Tensor& x) {
    // subgradient at 0 taken as 0
    return unary_op(x, [](double v, double& y, double& d) {
        y = v > 0.0 ? v : 0.0;
        d = v > 0.0 ? 1.0 : 0.0;
    });
}

Tensor rsqrt(const Tensor& x, double eps) {
    return unary_op(x, [eps](double v, double& y, double& d) {
        double s = v + eps;
        if (!(s > 0.0)) throw DomainError("rsqrt: input + eps must be positive");
        y = 1.0 / std::sqrt(s);
        d = -0.5 * y / s;
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (x.tracked()) {
        auto shape = x.shape;
        bind_node(out, x.tape, {x.node}, [shape](const Tensor& g) {
            return std::vector<Tensor>{Tensor::full(shape, g.data[0])};
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw ContractError("mean of empty tensor");
    double acc = 0.0;
    for (double v : x.data) acc += v;
    double inv = 1.0 / static_cast<double>(x.size());
    Tensor out = Tensor::scalar(acc * inv);
    if (x.tracked()) {
        auto shape = x.shape;
        bind_node(out, x.tape, {x.node}, [shape, inv](const Tensor& g) {
            return std::vector<Tensor>{Tensor::full(shape, g.data[0] * inv)};
        });
    }
    return out;
}

Tensor gap2d(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("gap2d: expected C x H x W, got " + shape_str(x.shape));
    std::size_t c = x.shape[0], hw = x.shape[1] * x.shape[2];
    Tensor out({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += x.data[ch * hw + i];
        out.data[ch] = acc / static_cast<double>(hw);
    }
    if (x.tracked()) {
        std::size_t h = x.shape[1], w = x.shape[2];
        bind_node(out, x.tape, {x.node}, [c, h, w](const Tensor& g) {
            Tensor gx({c, h, w});
            double inv = 1.0 / static_cast<double>(h * w);
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < h * w; ++i) gx.data[ch * h * w + i] = g.data[ch] * inv;
            return std::vector<Tensor>{std::move(gx)};
        });
    }
    return out;
}

Tensor l2_normalize(const Tensor& v) {
    if (v.rank() != 1) throw ShapeError("l2_normalize: expected rank-1, got " + shape_str(v.shape));
    double sq = 0.0;
    for (double x : v.data) sq += x * x;
    double n = std::sqrt(sq);
    double s = n + 1e-12;
    Tensor out(v.shape);
    for (std::size_t i = 0; i < v.size(); ++i) out.data[i] = v.data[i] / s;
    if (v.tracked()) {
        Tensor vv = v.detached();
        bind_node(out, v.tape, {v.node}, [vv, n, s](const Tensor& g) {
            Tensor gx(g.shape);
            double dot = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) dot += g.data[i] * vv.data[i];
            double nn = std::max(n, 1e-300);
            for (std::size_t i = 0; i < g.size(); ++i)
                gx.data[i] = g.data[i] / s - vv.data[i] * dot / (s * s * nn);
            return std::vector<Tensor>{std::move(gx)};
        });
    }
    return out;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_channels: no inputs");
    std::size_t h = parts[0].shape.size() == 3 ? parts[0].shape[1] : 0;
    std::size_t w = parts[0].shape.size() == 3 ? parts[0].shape[2] : 0;
    std::size_t total_c = 0;
    Tape* tape = nullptr;
    for (const Tensor& p : parts) {
        if (p.rank() != 3 || p.shape[1] != h || p.shape[2] != w)
            throw ShapeError("concat_channels: incompatible part shape " + shape_str(p.shape));
        total_c += p.shape[0];
        if (p.tracked()) {
            if (tape && tape != p.tape)
                throw ContractError("concat_channels: parts tracked by different tapes");
            tape = p.tape;
        }
    }
    Tensor out({total_c, h, w});
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += p.size();
    }
    if (!tape) return out;

    std::vector<int> parents;
    struct Slice {
        std::size_t offset, channels;
    };
    std::vector<Slice> slices;
    std::size_t ch_off = 0;
    for (const Tensor& p : parts) {
        if (p.tracked()) {
            parents.push_back(p.node);
            slices.push_back({ch_off, p.shape[0]});
        }
        ch_off += p.shape[0];
    }
    bind_node(out, tape, parents, [slices, h, w](const Tensor& g) {
        std::vector<Tensor> grads;
        for (const auto& sl : slices) {
            Tensor gp({sl.channels, h, w});
            std::copy(g.data.begin() + static_cast<std::ptrdiff_t>(sl.offset * h * w),
                      g.data.begin() + static_cast<std::ptrdiff_t>((sl.offset + sl.channels) * h * w),
                      gp.data.begin());
            grads.push_back(std::move(gp));
        }
        return grads;
    });
    return out;
}

Tensor chw_to_nc(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("chw_to_nc: expected C x H x W, got " + shape_str(x.shape));
    std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
    Tensor out({h * w, c});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h * w; ++i) out.data[i * c + ch] = x.data[ch * h * w + i];
    if (x.tracked()) {
        bind_node(out, x.tape, {x.node}, [c, h, w](const Tensor& g) {
            Tensor gx({c, h, w});
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < h * w; ++i) gx.data[ch * h * w + i] = g.data[i * c + ch];
            return std::vector<Tensor>{std::move(gx)};
        });
    }
    return out;
}

Tensor nc_to_chw(const Tensor& x, std::size_t channels, std::size_t height, std::size_t width) {
    if (x.rank() != 2 || x.shape[0] != height * width || x.shape[1] != channels)
        throw ShapeError("nc_to_chw: got " + shape_str(x.shape) + " for " +
                         std::to_string(channels) + " x " + std::to_string(height) + " x " +
                         std::to_string(width));
    Tensor out({channels, height, width});
    for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t i = 0; i < height * width; ++i)
            out.data[ch * height * width + i] = x.data[i * channels + ch];
    if (x.tracked()) {
        bind_node(out, x.tape, {x.node}, [channels, height, width](const Tensor& g) {
            Tensor gx({height * width, channels});
            for (std::size_t ch = 0; ch < channels; ++ch)
                for (std::size_t i = 0; i < height * width; ++i)
                    gx.data[i * channels + ch] = g.data[ch * height * width + i];
            return std::vector<Tensor>{std::move(gx)};
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<std::size_t> new_shape) {
    std::size_t n = 1;
    for (std::size_t e : new_shape) n *= e;
    if (n != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " +
                         shape_str(new_shape));
    Tensor out(new_shape, x.data);
    if (x.tracked()) {
        auto old_shape = x.shape;
        bind_node(out, x.tape, {x.node}, [old_shape](const Tensor& g) {
            return std::vector<Tensor>{Tensor(old_shape, g.data)};
        });
    }
    return out;
}

Tensor broadcast_channels(const Tensor& per_channel, std::size_t height, std::size_t width) {
    if (per_channel.rank() != 1)
        throw ShapeError("broadcast_channels: expected rank-1, got " +
                         shape_str(per_channel.shape));
    std::size_t c = per_channel.shape[0];
    Tensor out({c, height, width});
    for (std::size_t ch = 0; ch < c; ++ch)
        std::fill(out.data.begin() + static_cast<std::ptrdiff_t>(ch * height * width),
                  out.data.begin() + static_cast<std::ptrdiff_t>((ch + 1) * height * width),
                  per_channel.data[ch]);
    if (per_channel.tracked()) {
        bind_node(out, per_channel.tape, {per_channel.node}, [c, height, width](const Tensor& g) {
            Tensor gx({c});
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (std::size_t i = 0; i < height * width; ++i)
                    acc += g.data[ch * height * width + i];
                gx.data[ch] = acc;
            }
            return std::vector<Tensor>{std::move(gx)};
        });
    }
    return out;
}

Tensor replicate_spatial(const Tensor& per_channel, std::size_t height, std::size_t width) {
    if (per_channel.rank() != 1)
        throw ShapeError("replicate_spatial: expected rank-1, got " + shape_str(per_channel.shape));
    if (per_channel.tracked())
        throw ContractError("replicate_spatial: input must be untracked");
    std::size_t c = per_channel.shape[0];
    Tensor out({c, height, width});
    for (std::size_t ch = 0; ch < c; ++ch)
        std::fill(out.data.begin() + static_cast<std::ptrdiff_t>(ch * height * width),
                  out.data.begin() + static_cast<std::ptrdiff_t>((ch + 1) * height * width),
                  per_channel.data[ch]);
    return out;
}

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& point,
                  double h, double inject_ad_error) {
    Tape tape;
    Tensor x = tape.leaf(point);
    Tensor loss = f(tape, x);
    if (loss.size() != 1)
        throw ContractError("grad_check: function must return a scalar");
    if (!std::isfinite(loss.item()))
        throw ContractError("grad_check: non-finite loss at the base point");
    Gradients g = tape.backward(loss);
    Tensor ad = g.wrt(x);
    if (inject_ad_error != 0.0 && ad.size() > 0)
        ad.data[0] += inject_ad_error * (1.0 + std::fabs(ad.data[0]));

    Tensor p = point.detached();
    double max_rel = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        double hi = h * (1.0 + std::fabs(point.data[i]));
        double orig = point.data[i];
        p.data[i] = orig + hi;
        Tape tp;
        double fp = f(tp, p).item();
        p.data[i] = orig - hi;
        Tape tm;
        double fm = f(tm, p).item();
        p.data[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw ContractError("grad_check: non-finite evaluation at coordinate " +
                                std::to_string(i));
        double cd = (fp - fm) / (2.0 * hi);
        double rel = std::fabs(ad.data[i] - cd) / std::max(1e-8, std::fabs(cd));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace misalign
