// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "misalign/pipeline.hpp"
#include "misalign/rng.hpp"

using namespace misalign;

namespace {

ModelDims tiny_dims() {
    ModelDims dm;
    dm.H = dm.W = 8;
    dm.h = dm.w = 2;
    dm.c = 2;
    dm.d = 4;
    dm.d_tau = 8;
    dm.L = 8;
    dm.base = 4;
    dm.T_d = 3;
    return dm;
}

Tensor random_image(std::uint64_t seed, std::size_t h, std::size_t w) {
    RngStream rng(seed, "test-image");
    Tensor img({3, h, w});
    for (auto& v : img.data) v = rng.uniform(0.05, 0.95);
    return img;
}

Tensor centered_mask(std::size_t h, std::size_t w) {
    Tensor m({h, w});
    for (std::size_t y = h / 4; y < 3 * h / 4; ++y)
        for (std::size_t x = w / 4; x < 3 * w / 4; ++x) m.data[y * w + x] = 1.0;
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace

TEST_CASE("init_weights is seeded and bounded") {
    ModelDims dm;
    ModelWeights a = init_weights(7, dm);
    ModelWeights b = init_weights(7, dm);
    ModelWeights c = init_weights(8, dm);
    bool all_equal = true, any_diff = false;
    for (const auto& [name, t] : a.tensors) {
        if (t.data != b.tensors.at(name).data) all_equal = false;
        if (t.data != c.tensors.at(name).data) any_diff = true;
        double bound = std::sqrt(6.0 / static_cast<double>(tensor_fan_in(t)));
        for (double v : t.data) {
            CHECK(std::fabs(v) <= bound);
            CHECK(std::isfinite(v));
        }
    }
    CHECK(all_equal);
    CHECK(any_diff);
}

TEST_CASE("weights container round-trips bit-exactly") {
    ModelWeights w = init_weights(99, tiny_dims());
    std::string path = "/tmp/misalign_test_weights.bin";
    w.save(path);
    ModelWeights r = ModelWeights::load(path);
    CHECK(r.seed == w.seed);
    CHECK(r.dims.H == w.dims.H);
    CHECK(r.tensors.size() == w.tensors.size());
    for (const auto& [name, t] : w.tensors) {
        const Tensor& rt = r.tensors.at(name);
        CHECK(rt.shape == t.shape);
        CHECK(rt.data == t.data);  // bit-exact
    }
    std::remove(path.c_str());
}

TEST_CASE("encode_text basics") {
    Pipeline pl(ModelDims{}, 3);
    PromptEmbedding empty = pl.encode_text("");
    CHECK(empty.valid == 0);
    for (double v : empty.mat.data) CHECK(v == 0.0);

    PromptEmbedding a1 = pl.encode_text("a bird in the sky");
    PromptEmbedding a2 = pl.encode_text("a bird in the sky");
    CHECK(a1.valid == a2.valid);
    CHECK(a1.mat.data == a2.mat.data);  // bit-identical

    PromptEmbedding b = pl.encode_text("remove the content");
    bool differs = a1.mat.data != b.mat.data;
    CHECK(differs);

    // rows past the valid count stay zero
    PromptEmbedding s = pl.encode_text("hi");
    CHECK(s.valid == 2);
    const ModelDims& dm = pl.dims();
    for (std::size_t i = s.valid; i < dm.L; ++i)
        for (std::size_t j = 0; j < dm.d_tau; ++j) CHECK(s.mat.data[i * dm.d_tau + j] == 0.0);
}

TEST_CASE("encode_image shape, determinism, smoothness") {
    Pipeline pl(ModelDims{}, 11);
    const ModelDims& dm = pl.dims();
    Tensor x = random_image(1, dm.H, dm.W);
    Tensor z = pl.encode_image(x);
    CHECK(z.shape == std::vector<std::size_t>{dm.c, dm.h, dm.w});

    Tensor zero({3, dm.H, dm.W});
    Tensor za = pl.encode_image(zero);
    Tensor zb = pl.encode_image(zero);
    CHECK(za.data == zb.data);

    // small input perturbation produces a small output change
    Tensor xp = x.detached();
    xp.data[17] += 1e-6;
    Tensor zp = pl.encode_image(xp);
    CHECK(max_abs_diff(z, zp) < 1e-2);

    CHECK_THROWS_AS(pl.encode_image(Tensor({3, 16, 16})), ShapeError);
    Tensor bad = x.detached();
    bad.data[0] = 1.5;
    CHECK_THROWS_AS(pl.encode_image(bad), ContractError);
}

TEST_CASE("decode_latent range and gradient") {
    Pipeline pl(tiny_dims(), 21);
    const ModelDims& dm = pl.dims();
    RngStream rng(5, "latent");
    Tensor z({dm.c, dm.h, dm.w});
    for (auto& v : z.data) v = rng.normal();

    Tensor img = pl.decode_latent(z);
    CHECK(img.shape == std::vector<std::size_t>{3, dm.H, dm.W});
    for (double v : img.data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    Tensor img2 = pl.decode_latent(z);
    CHECK(img.data == img2.data);

    auto f = [&](Tape&, const Tensor& zz) { return sum(pl.decode_latent(zz)); };
    CHECK(grad_check(f, z, 1e-5) < 1e-4);
}

TEST_CASE("cross_attention contracts and hand case") {
    // one valid token: every output row equals that token's value row
    RngStream rng(13, "attn");
    std::size_t n = 3, d = 4, dt = 6, L = 5;
    Tensor phi({n, d}), tau({L, dt}), wq({d, d}), wk({dt, d}), wv({dt, d});
    for (auto& v : phi.data) v = rng.uniform(-1, 1);
    for (auto& v : tau.data) v = rng.uniform(-1, 1);
    for (auto& v : wq.data) v = rng.uniform(-1, 1);
    for (auto& v : wk.data) v = rng.uniform(-1, 1);
    for (auto& v : wv.data) v = rng.uniform(-1, 1);

    Tensor one = cross_attention(phi, tau, 1, wq, wk, wv);
    Tensor tau0({1, dt});
    std::copy(tau.data.begin(), tau.data.begin() + static_cast<std::ptrdiff_t>(dt), tau0.data.begin());
    Tensor vrow = matmul(tau0, wv);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            CHECK(one.data[i * d + j] == doctest::Approx(vrow.data[j]).epsilon(1e-13));

    // zero key projection makes all keys identical: output = mean of value rows
    Tensor wk0({dt, d});
    Tensor avg = cross_attention(phi, tau, L, wq, wk0, wv);
    Tensor vals = matmul(tau, wv);
    for (std::size_t j = 0; j < d; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < L; ++i) m += vals.data[i * d + j];
        m /= static_cast<double>(L);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(avg.data[i * d + j] == doctest::Approx(m).epsilon(1e-12));
    }

    CHECK_THROWS_AS(cross_attention(phi, tau, 0, wq, wk, wv), ContractError);

    // d=1, two tokens with logits [0, ln 2]: output = (1/3) v1 + (2/3) v2
    Tensor z1({1, 1}, {1.0});
    Tensor wq1({1, 1}, {1.0});
    Tensor tau2({2, 2}, {1, 0, 0, 1});  // identity rows select Wk rows as keys
    Tensor wk1({2, 1}, {0.0, std::log(2.0)});
    Tensor wv1({2, 1}, {0.4, -0.8});
    Tensor out = cross_attention(z1, tau2, 2, wq1, wk1, wv1);
    double expect = (1.0 / 3.0) * 0.4 + (2.0 / 3.0) * (-0.8);
    CHECK(out.item() == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("denoiser forward: shapes, prompt sensitivity, probe, gradient") {
    Pipeline pl(tiny_dims(), 31);
    const ModelDims& dm = pl.dims();
    RngStream rng(6, "denoiser");
    Tensor z({dm.c, dm.h, dm.w});
    for (auto& v : z.data) v = rng.normal();

    PromptEmbedding ta = pl.encode_text("a bird flying");
    PromptEmbedding tb = pl.encode_text("beautiful flowers");
    AttnProbe probe;
    Tensor ea = pl.denoiser_forward(z, 999, ta, &probe);
    CHECK(ea.shape == std::vector<std::size_t>{dm.c, dm.h, dm.w});
    CHECK(probe.captured);
    CHECK(probe.phi.shape == std::vector<std::size_t>{(dm.h / 2) * (dm.w / 2), dm.d});

    Tensor eb = pl.denoiser_forward(z, 999, tb);
    CHECK(max_abs_diff(ea, eb) > 0.0);  // prompt changes the output

    Tensor bad({dm.c + 1, dm.h, dm.w});
    CHECK_THROWS_AS(pl.denoiser_forward(bad, 999, ta), ShapeError);

    auto f = [&](Tape&, const Tensor& zz) { return sum(pl.denoiser_forward(zz, 499, ta)); };
    CHECK(grad_check(f, z, 1e-5) < 1e-4);
}

TEST_CASE("attention layer invariants via probe hooks") {
    // single-token prompt: attention output rows are all the same value row
    Pipeline pl(tiny_dims(), 41);
    const ModelDims& dm = pl.dims();
    Tensor z({dm.c, dm.h, dm.w});
    AttnProbe probe;
    pl.denoiser_forward(z, 999, pl.encode_text("x"), &probe);
    REQUIRE(probe.captured);
    std::size_t n = probe.attn_out.shape[0], d = probe.attn_out.shape[1];
    for (std::size_t i = 1; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            CHECK(probe.attn_out.data[i * d + j] == probe.attn_out.data[j]);

    // identical keys average the value rows: zero the key projection
    ModelWeights ws = init_weights(41, tiny_dims());
    Tensor& wk = ws.tensors.at("den.attn.k.w");
    std::fill(wk.data.begin(), wk.data.end(), 0.0);
    Pipeline flat(ws);
    PromptEmbedding tau = flat.encode_text("several distinct tokens");
    AttnProbe p2;
    flat.denoiser_forward(z, 999, tau, &p2);
    Tensor tau_v({tau.valid, dm.d_tau});
    std::copy(tau.mat.data.begin(),
              tau.mat.data.begin() + static_cast<std::ptrdiff_t>(tau.valid * dm.d_tau),
              tau_v.data.begin());
    Tensor vals = matmul(tau_v, ws.at("den.attn.v.w"));
    for (std::size_t j = 0; j < dm.d; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < tau.valid; ++i) m += vals.data[i * dm.d + j];
        m /= static_cast<double>(tau.valid);
        for (std::size_t i = 0; i < p2.attn_out.shape[0]; ++i)
            CHECK(p2.attn_out.data[i * dm.d + j] == doctest::Approx(m).epsilon(1e-12));
    }
}

TEST_CASE("scheduler: recovery, identity, monotonicity") {
    Pipeline pl(ModelDims{}, 51);
    const SchedulerConfig& sc = pl.scheduler();
    sc.validate();

    // alpha_bar strictly decreasing over the schedule
    for (std::size_t t = 1; t < sc.alpha_bars.size(); ++t)
        CHECK(sc.alpha_bars[t] < sc.alpha_bars[t - 1]);
    CHECK(sc.alpha_bar(-1) == 1.0);
    CHECK_THROWS_AS(sc.alpha_bar(static_cast<int>(sc.alpha_bars.size())), ContractError);

    // construct z_t analytically from known z0 and noise; the step to -1
    // recovers z0 when eps_pred equals the true noise
    const ModelDims& dm = pl.dims();
    RngStream rng(8, "sched");
    Tensor z0({dm.c, dm.h, dm.w}), eps({dm.c, dm.h, dm.w});
    for (auto& v : z0.data) v = rng.normal();
    for (auto& v : eps.data) v = rng.normal();
    int t = 599;
    double ab = sc.alpha_bar(t);
    Tensor z_t = add(scale(z0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
    Tensor rec = pl.scheduler_step(z_t, eps, t, -1);
    CHECK(max_abs_diff(rec, z0) < 1e-10);

    Tensor same = pl.scheduler_step(z_t, eps, t, t);
    CHECK(same.data == z_t.data);

    CHECK_THROWS_AS(pl.scheduler_step(z_t, eps, 100, 200), ContractError);
}

TEST_CASE("run_inpaint: compositing, determinism, image-modality influence") {
    Pipeline pl(tiny_dims(), 61);
    const ModelDims& dm = pl.dims();
    Tensor x = random_image(2, dm.H, dm.W);
    Tensor mask = centered_mask(dm.H, dm.W);

    Tensor out1 = pl.run_inpaint(x, mask, "paint a pattern", 17);
    Tensor out2 = pl.run_inpaint(x, mask, "paint a pattern", 17);
    CHECK(out1.data == out2.data);  // bit-identical per seed

    // unmasked pixels equal the input exactly
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < dm.H * dm.W; ++i)
            if (mask.data[i] == 0.0)
                CHECK(out1.data[ch * dm.H * dm.W + i] == x.data[ch * dm.H * dm.W + i]);

    // a different input changes the masked region under the same prompt/seed
    Tensor y = random_image(3, dm.H, dm.W);
    Tensor outy = pl.run_inpaint(y, mask, "paint a pattern", 17);
    double l2 = 0.0;
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < dm.H * dm.W; ++i)
            if (mask.data[i] == 1.0) {
                double dd = outy.data[ch * dm.H * dm.W + i] - out1.data[ch * dm.H * dm.W + i];
                l2 += dd * dd;
            }
    CHECK(l2 > 0.0);

    Tensor badmask = mask.detached();
    badmask.data[0] = 0.5;
    CHECK_THROWS_AS(pl.run_inpaint(x, badmask, "p", 17), ContractError);
}

TEST_CASE("run_style: shape, range, determinism, endpoints") {
    Pipeline pl(tiny_dims(), 71);
    const ModelDims& dm = pl.dims();
    Tensor x = random_image(4, dm.H, dm.W);

    Tensor a = pl.run_style(x, "make it stripy", 0.8, 23);
    CHECK(a.shape == std::vector<std::size_t>{3, dm.H, dm.W});
    for (double v : a.data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    Tensor b = pl.run_style(x, "make it stripy", 0.8, 23);
    CHECK(a.data == b.data);

    // strength near zero runs exactly one step from the least-noisy timestep
    Tensor c = pl.run_style(x, "make it stripy", 1e-9, 23);
    CHECK(c.shape == a.shape);
    CHECK_THROWS_AS(pl.run_style(x, "p", 0.0, 23), ContractError);
    CHECK_THROWS_AS(pl.run_style(x, "p", 1.5, 23), ContractError);
}

TEST_CASE("full pipeline loss gradient matches finite differences at the 8x8 config") {
    Pipeline pl(tiny_dims(), 81);
    const ModelDims& dm = pl.dims();
    Tensor mask = centered_mask(dm.H, dm.W);
    Tensor mask3 = mask_to_channels(mask, 3);
    Tensor target = random_image(5, dm.H, dm.W);
    Tensor x = random_image(6, dm.H, dm.W);

    auto inpaint_loss = [&](Tape&, const Tensor& xx) {
        Tensor gen = pl.run_inpaint(xx, mask, "a toy target", 29);
        Tensor resid = mul(sub(gen, target), mask3);
        return sum(mul(resid, resid));
    };
    CHECK(grad_check(inpaint_loss, x, 1e-5) < 1e-4);

    auto style_loss = [&](Tape&, const Tensor& xx) {
        Tensor gen = pl.run_style(xx, "a toy target", 0.6, 29);
        Tensor resid = sub(gen, target);
        return sum(mul(resid, resid));
    };
    CHECK(grad_check(style_loss, x, 1e-5) < 1e-4);
}
