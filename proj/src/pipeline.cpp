// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#include "misalign/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "misalign/rng.hpp"
#include "misalign/serialize.hpp"

namespace misalign {

void ModelDims::validate() const {
    if (H != 4 * h || W != 4 * w)
        throw ContractError("dims: H, W must be 4h, 4w; got H=" + std::to_string(H) +
                            " h=" + std::to_string(h) + " W=" + std::to_string(W) +
                            " w=" + std::to_string(w));
    if (h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0)
        throw ContractError("dims: latent extents must be even and >= 2");
    if (c < 1 || d < 1 || d_tau < 1 || L < 1 || base < 1)
        throw ContractError("dims: channel and embedding extents must be >= 1");
    if (base % 2 != 0) throw ContractError("dims: base width must be even");
    if (T_train < 2 || T_d < 1 || T_d > T_train)
        throw ContractError("dims: need 2 <= T_train and 1 <= T_d <= T_train");
    if (t_start >= T_train || t_start + 1 < T_d)
        throw ContractError("dims: t_start must satisfy T_d - 1 <= t_start < T_train");
}

const Tensor& ModelWeights::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractError("missing weight tensor: " + name);
    return it->second;
}

std::size_t tensor_fan_in(const Tensor& t) {
    if (t.rank() == 4) return t.shape[1] * t.shape[2] * t.shape[3];
    if (t.rank() >= 1) return t.shape[0];
    return 1;
}

namespace {

Tensor draw_uniform(RngStream& rng, std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    double bound = std::sqrt(6.0 / static_cast<double>(tensor_fan_in(t)));
    for (auto& v : t.data) v = rng.uniform(-bound, bound);
    return t;
}

Tensor draw_gaussian(RngStream& rng, std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.normal();
    return t;
}

}  // namespace

ModelWeights init_weights(std::uint64_t seed, const ModelDims& dims) {
    dims.validate();
    ModelWeights w;
    w.dims = dims;
    w.seed = seed;
    RngStream rng(seed, "weights");

    const std::size_t b = dims.base, c = dims.c, d = dims.d, dt = dims.d_tau;
    // Draw order is fixed; changing it changes every model.
    const std::vector<std::pair<std::string, std::vector<std::size_t>>> plan = {
        {"enc.c1.w", {b, 3, 3, 3}},          {"enc.c1.b", {b}},
        {"enc.c2.w", {b, b, 3, 3}},          {"enc.c2.b", {b}},
        {"enc.proj.w", {c, b, 1, 1}},        {"enc.proj.b", {c}},
        {"dec.c1.w", {b, c, 3, 3}},          {"dec.c1.b", {b}},
        {"dec.c2.w", {b, b, 3, 3}},          {"dec.c2.b", {b}},
        {"dec.out.w", {3, b, 3, 3}},         {"dec.out.b", {3}},
        {"den.in_style.w", {b, c, 3, 3}},    {"den.in_style.b", {b}},
        {"den.in_inpaint.w", {b, 2 * c + 1, 3, 3}},
        {"den.in_inpaint.b", {b}},
        {"den.down.w", {b, b, 3, 3}},        {"den.down.b", {b}},
        {"den.cond2_style.w", {b, c, 3, 3}}, {"den.cond2_style.b", {b}},
        {"den.cond2_inpaint.w", {b, 2 * c + 1, 3, 3}},
        {"den.cond2_inpaint.b", {b}},
        {"den.glob.w", {b, b}},
        {"den.temb.w", {b, b}},              {"den.temb.b", {b}},
        {"den.attn.in.w", {b, d}},
        {"den.attn.q.w", {d, d}},
        {"den.attn.k.w", {dt, d}},
        {"den.attn.v.w", {dt, d}},
        {"den.attn.out.w", {d, b}},
        {"den.up.w", {b, b, 3, 3}},          {"den.up.b", {b}},
        {"den.out.w", {c, b, 3, 3}},         {"den.out.b", {c}},
        {"txt.embed", {256, dt}},
        {"txt.pos", {dims.L, dt}},
    };
    for (const auto& [name, shape] : plan) w.tensors.emplace(name, draw_uniform(rng, shape));
    return w;
}

void ModelWeights::save(const std::string& path) const {
    NamedTensors nt;
    nt.fields = {{"H", dims.H},       {"W", dims.W},   {"h", dims.h},
                 {"w", dims.w},       {"c", dims.c},   {"d", dims.d},
                 {"d_tau", dims.d_tau}, {"L", dims.L}, {"base", dims.base},
                 {"T_train", dims.T_train}, {"T_d", dims.T_d}, {"t_start", dims.t_start},
                 {"seed", seed}};
    for (const auto& [name, t] : tensors) nt.tensors.emplace_back(name, t);
    save_container(path, nt);
}

ModelWeights ModelWeights::load(const std::string& path) {
    NamedTensors nt = load_container(path);
    ModelWeights w;
    w.dims.H = nt.field("H");
    w.dims.W = nt.field("W");
    w.dims.h = nt.field("h");
    w.dims.w = nt.field("w");
    w.dims.c = nt.field("c");
    w.dims.d = nt.field("d");
    w.dims.d_tau = nt.field("d_tau");
    w.dims.L = nt.field("L");
    w.dims.base = nt.field("base");
    w.dims.T_train = nt.field("T_train");
    w.dims.T_d = nt.field("T_d");
    w.dims.t_start = nt.field("t_start");
    w.seed = nt.field("seed");
    w.dims.validate();
    for (const auto& [name, t] : nt.tensors) w.tensors.emplace(name, t);
    return w;
}

SchedulerConfig SchedulerConfig::make(std::size_t t_train, std::size_t t_d, std::size_t t_start) {
    SchedulerConfig sc;
    sc.betas.resize(t_train);
    sc.alpha_bars.resize(t_train);
    const double beta_lo = 1e-4, beta_hi = 0.02;
    double prod = 1.0;
    for (std::size_t t = 0; t < t_train; ++t) {
        double frac = static_cast<double>(t) / static_cast<double>(t_train - 1);
        sc.betas[t] = beta_lo + (beta_hi - beta_lo) * frac;
        prod *= 1.0 - sc.betas[t];
        sc.alpha_bars[t] = prod;
    }
    std::size_t gap = (t_start + 1) / t_d;
    sc.timesteps.resize(t_d);
    for (std::size_t k = 0; k < t_d; ++k)
        sc.timesteps[k] = static_cast<int>(t_start - k * gap);
    return sc;
}

double SchedulerConfig::alpha_bar(int t) const {
    if (t == -1) return 1.0;
    if (t < 0 || static_cast<std::size_t>(t) >= alpha_bars.size())
        throw ContractError("timestep out of range: " + std::to_string(t));
    return alpha_bars[static_cast<std::size_t>(t)];
}

int SchedulerConfig::next_timestep(std::size_t index) const {
    if (index >= timesteps.size()) throw ContractError("sampling index out of range");
    return index + 1 < timesteps.size() ? timesteps[index + 1] : -1;
}

void SchedulerConfig::validate() const {
    double prev = 1.0;
    for (double ab : alpha_bars) {
        if (!(ab > 0.0 && ab < 1.0 && ab < prev))
            throw ContractError("alpha_bar schedule must be strictly decreasing in (0,1)");
        prev = ab;
    }
    for (std::size_t k = 1; k < timesteps.size(); ++k)
        if (timesteps[k] >= timesteps[k - 1])
            throw ContractError("sampling timesteps must descend");
}

void require_binary_mask(const Tensor& mask) {
    if (mask.rank() != 2)
        throw ShapeError("mask must be H x W, got " + shape_str(mask.shape));
    for (double v : mask.data)
        if (v != 0.0 && v != 1.0)
            throw ContractError("mask entries must be exactly 0 or 1");
}

Tensor mask_to_channels(const Tensor& mask, std::size_t channels) {
    std::size_t hw = mask.size();
    Tensor out({channels, mask.shape[0], mask.shape[1]});
    for (std::size_t ch = 0; ch < channels; ++ch)
        std::copy(mask.data.begin(), mask.data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(ch * hw));
    return out;
}

void require_image_range(const Tensor& x, const char* what) {
    for (double v : x.data)
        if (!(v >= 0.0 && v <= 1.0))
            throw ContractError(std::string(what) + ": pixel values must lie in [0, 1]");
}

Tensor cross_attention(const Tensor& phi, const Tensor& tau, std::size_t valid, const Tensor& wq,
                       const Tensor& wk, const Tensor& wv) {
    if (valid == 0)
        throw ContractError("cross_attention: zero valid tokens; pass a pad token");
    if (tau.tracked() || wq.tracked() || wk.tracked() || wv.tracked())
        throw ContractError("cross_attention: prompt and projections must be untracked");
    if (phi.rank() != 2 || phi.shape[1] != wq.shape[0])
        throw ShapeError("cross_attention: phi " + shape_str(phi.shape) + " vs Wq " +
                         shape_str(wq.shape));
    if (valid > tau.shape[0])
        throw ContractError("cross_attention: valid token count exceeds embedding rows");

    // keys/values over the first `valid` rows only
    Tensor tau_v({valid, tau.shape[1]});
    std::copy(tau.data.begin(), tau.data.begin() + static_cast<std::ptrdiff_t>(valid * tau.shape[1]),
              tau_v.data.begin());
    Tensor keys = matmul(tau_v, wk);    // valid x d
    Tensor vals = matmul(tau_v, wv);    // valid x d
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(wq.shape[1]));

    Tensor q = matmul(phi, wq);                                  // N x d
    Tensor scores = scale(matmul(q, transpose(keys)), inv_sqrt_d);  // N x valid
    return matmul(softmax_rows(scores), vals);                   // N x d
}

Tensor sinusoidal_time_embedding(int t, std::size_t dim) {
    Tensor emb({dim});
    std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        double denom = half > 1 ? static_cast<double>(half - 1) : 1.0;
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / denom);
        emb.data[i] = std::sin(t * freq);
        emb.data[half + i] = std::cos(t * freq);
    }
    return emb;
}

Pipeline::Pipeline(ModelDims dims, std::uint64_t weight_seed)
    : weights_(init_weights(weight_seed, dims)),
      scheduler_(SchedulerConfig::make(dims.T_train, dims.T_d, dims.t_start)) {}

Pipeline::Pipeline(ModelWeights weights)
    : weights_(std::move(weights)),
      scheduler_(SchedulerConfig::make(weights_.dims.T_train, weights_.dims.T_d,
                                       weights_.dims.t_start)) {}

PromptEmbedding Pipeline::encode_text(const std::string& text) const {
    const ModelDims& dm = weights_.dims;
    const Tensor& table = weights_.at("txt.embed");
    const Tensor& pos = weights_.at("txt.pos");
    PromptEmbedding out;
    out.mat = Tensor({dm.L, dm.d_tau});
    out.valid = std::min(text.size(), dm.L);
    for (std::size_t i = 0; i < out.valid; ++i) {
        unsigned char byte = static_cast<unsigned char>(text[i]);
        if (byte >= 'A' && byte <= 'Z') byte = static_cast<unsigned char>(byte - 'A' + 'a');
        std::size_t bucket =
            static_cast<std::size_t>(fnv1a64(std::string_view(reinterpret_cast<char*>(&byte), 1)) & 0xFF);
        for (std::size_t j = 0; j < dm.d_tau; ++j)
            out.mat.data[i * dm.d_tau + j] =
                table.data[bucket * dm.d_tau + j] + pos.data[i * dm.d_tau + j];
    }
    return out;
}

Tensor Pipeline::conv_bias(const Tensor& x, const std::string& stem, int stride) const {
    Tensor y = conv2d(x, weights_.at(stem + ".w"), stride);
    Tensor b = replicate_spatial(weights_.at(stem + ".b"), y.shape[1], y.shape[2]);
    return add(y, b);
}

namespace {

// Per-channel standardization over spatial positions. Keeps the random
// feature stack well-scaled so gradients stay usable through the sampling
// recursion.
Tensor channel_norm(const Tensor& f) {
    std::size_t h = f.shape[1], w = f.shape[2];
    Tensor m = gap2d(f);
    Tensor centered = sub(f, broadcast_channels(m, h, w));
    Tensor var = gap2d(mul(centered, centered));
    return mul(centered, broadcast_channels(rsqrt(var, 1e-8), h, w));
}

}  // namespace

Tensor Pipeline::encode_image(const Tensor& x) const {
    const ModelDims& dm = weights_.dims;
    if (x.shape != std::vector<std::size_t>{3, dm.H, dm.W})
        throw ShapeError("encode_image: expected [3, " + std::to_string(dm.H) + ", " +
                         std::to_string(dm.W) + "], got " + shape_str(x.shape));
    require_image_range(x, "encode_image");
    Tensor f1 = channel_norm(silu(conv_bias(x, "enc.c1", 2)));   // base x H/2 x W/2
    Tensor f2 = channel_norm(silu(conv_bias(f1, "enc.c2", 2)));  // base x h x w
    return conv_bias(f2, "enc.proj", 1);                         // c x h x w
}

Tensor Pipeline::decode_latent(const Tensor& z) const {
    const ModelDims& dm = weights_.dims;
    if (z.shape != std::vector<std::size_t>{dm.c, dm.h, dm.w})
        throw ShapeError("decode_latent: expected [" + std::to_string(dm.c) + ", " +
                         std::to_string(dm.h) + ", " + std::to_string(dm.w) + "], got " +
                         shape_str(z.shape));
    Tensor u1 = channel_norm(silu(conv_bias(upsample2x(z), "dec.c1", 1)));   // base x 2h x 2w
    Tensor u2 = channel_norm(silu(conv_bias(upsample2x(u1), "dec.c2", 1)));  // base x H x W
    return sigmoid(conv_bias(u2, "dec.out", 1));                             // 3 x H x W in (0,1)
}

Tensor Pipeline::denoiser_forward(const Tensor& z_in, int t, const PromptEmbedding& tau,
                                  AttnProbe* probe) const {
    const ModelDims& dm = weights_.dims;
    if (z_in.rank() != 3 || z_in.shape[1] != dm.h || z_in.shape[2] != dm.w)
        throw ShapeError("denoiser: expected latent extents " + std::to_string(dm.h) + " x " +
                         std::to_string(dm.w) + ", got " + shape_str(z_in.shape));
    std::string stem;
    if (z_in.shape[0] == dm.c)
        stem = "den.in_style";
    else if (z_in.shape[0] == 2 * dm.c + 1)
        stem = "den.in_inpaint";
    else
        throw ShapeError("denoiser: conditioning channels must be 0 or 1+c, got input " +
                         shape_str(z_in.shape));

    Tensor f_in = channel_norm(silu(conv_bias(z_in, stem, 1)));     // base x h x w
    Tensor f = channel_norm(silu(conv_bias(f_in, "den.down", 2)));  // base x h/2 x w/2
    std::size_t bh = dm.h / 2, bw = dm.w / 2;

    // conditioning reaches the bottleneck directly at its own scale
    std::string cond2 = z_in.shape[0] == dm.c ? "den.cond2_style" : "den.cond2_inpaint";
    f = add(f, channel_norm(silu(conv_bias(z_in, cond2, 2))));

    // global channel mixing: pooled features reach every position directly
    {
        Tensor g = reshape(gap2d(f), {1, dm.base});
        Tensor gm = reshape(matmul(g, weights_.at("den.glob.w")), {dm.base});
        f = add(f, broadcast_channels(gm, bh, bw));
    }

    // bottleneck: timestep embedding, then cross-attention with residual
    Tensor emb = sinusoidal_time_embedding(t, dm.base);
    Tensor temb({dm.base});
    {
        const Tensor& tw = weights_.at("den.temb.w");
        const Tensor& tb = weights_.at("den.temb.b");
        for (std::size_t j = 0; j < dm.base; ++j) {
            double acc = tb.data[j];
            for (std::size_t i = 0; i < dm.base; ++i)
                acc += emb.data[i] * tw.data[i * dm.base + j];
            double sg = 1.0 / (1.0 + std::exp(-acc));
            temb.data[j] = acc * sg;
        }
    }
    f = add(f, replicate_spatial(temb, bh, bw));

    Tensor phi = matmul(chw_to_nc(f), weights_.at("den.attn.in.w"));  // N x d
    Tensor attn = cross_attention(phi, tau.mat, tau.valid, weights_.at("den.attn.q.w"),
                                  weights_.at("den.attn.k.w"), weights_.at("den.attn.v.w"));
    if (probe) {
        probe->phi = phi.detached();
        probe->attn_out = attn.detached();
        probe->captured = true;
    }
    Tensor back = nc_to_chw(matmul(attn, weights_.at("den.attn.out.w")), dm.base, bh, bw);
    f = add(f, back);

    f = channel_norm(silu(conv_bias(upsample2x(f), "den.up", 1)));  // base x h x w
    f = add(f, f_in);                                               // skip from conv-in
    return conv_bias(f, "den.out", 1);                // c x h x w
}

Tensor Pipeline::scheduler_step(const Tensor& z_t, const Tensor& eps, int t_from, int t_to) const {
    if (!same_shape(z_t, eps))
        throw ShapeError("scheduler_step: latent " + shape_str(z_t.shape) + " vs eps " +
                         shape_str(eps.shape));
    if (t_to > t_from)
        throw ContractError("scheduler_step: t_to must not exceed t_from");
    double ab_f = scheduler_.alpha_bar(t_from);
    double ab_t = scheduler_.alpha_bar(t_to);
    if (t_to == t_from) return z_t;
    // z0_hat = (z_t - sqrt(1-ab_f) eps) / sqrt(ab_f); z_next = sqrt(ab_t) z0_hat + sqrt(1-ab_t) eps
    Tensor z0_hat = scale(sub(z_t, scale(eps, std::sqrt(1.0 - ab_f))), 1.0 / std::sqrt(ab_f));
    return add(scale(z0_hat, std::sqrt(ab_t)), scale(eps, std::sqrt(1.0 - ab_t)));
}

Tensor Pipeline::downsample_mask(const Tensor& mask) const {
    const ModelDims& dm = weights_.dims;
    std::size_t fy = dm.H / dm.h, fx = dm.W / dm.w;
    Tensor out({1, dm.h, dm.w});
    for (std::size_t y = 0; y < dm.h; ++y)
        for (std::size_t x = 0; x < dm.w; ++x) {
            std::size_t sy = std::min(dm.H - 1, y * fy + fy / 2);
            std::size_t sx = std::min(dm.W - 1, x * fx + fx / 2);
            out.data[y * dm.w + x] = mask.data[sy * dm.W + sx];
        }
    return out;
}

Tensor Pipeline::run_inpaint(const Tensor& x, const Tensor& mask, const std::string& prompt,
                             std::uint64_t seed, AttnProbe* probe) const {
    const ModelDims& dm = weights_.dims;
    require_binary_mask(mask);
    if (mask.shape != std::vector<std::size_t>{dm.H, dm.W})
        throw ShapeError("run_inpaint: mask " + shape_str(mask.shape) + " does not match image");
    PromptEmbedding tau = encode_text(prompt);

    Tensor keep3 = mask_to_channels(mask, 3);
    for (auto& v : keep3.data) v = 1.0 - v;
    Tensor x_keep = mul(x, keep3);
    Tensor z_masked = encode_image(x_keep);
    Tensor m_lat = downsample_mask(mask);

    RngStream noise(seed, "noise");
    Tensor eta = draw_gaussian(noise, {dm.c, dm.h, dm.w});  // frozen noise draw

    // latent-space keep mask: 1 where latents may change freely
    Tensor keep_lat({dm.c, dm.h, dm.w});
    for (std::size_t ch = 0; ch < dm.c; ++ch)
        for (std::size_t i = 0; i < dm.h * dm.w; ++i)
            keep_lat.data[ch * dm.h * dm.w + i] = 1.0 - m_lat.data[i];

    auto blend_known = [&](const Tensor& zz, int t) {
        // unmasked latent positions track the source latent noised to level t
        double ab = scheduler_.alpha_bar(t);
        Tensor known = add(scale(z_masked, std::sqrt(ab)), scale(eta, std::sqrt(1.0 - ab)));
        Tensor fill = mask_to_channels(Tensor({dm.h, dm.w}, std::vector<double>(
                                           m_lat.data.begin(), m_lat.data.end())), dm.c);
        return add(mul(zz, fill), mul(known, keep_lat));
    };

    int t0 = scheduler_.timesteps.front();
    Tensor z = blend_known(eta, t0);
    for (std::size_t k = 0; k < scheduler_.timesteps.size(); ++k) {
        int t = scheduler_.timesteps[k];
        Tensor z_in = concat_channels({z, m_lat, z_masked});
        Tensor eps = denoiser_forward(z_in, t, tau, probe);
        int t_next = scheduler_.next_timestep(k);
        z = scheduler_step(z, eps, t, t_next);
        if (t_next >= 0) z = blend_known(z, t_next);
    }
    Tensor decoded = decode_latent(z);
    // unmasked pixels are the input, bit-exact
    Tensor fill3 = mask_to_channels(mask, 3);
    return add(mul(x, keep3), mul(decoded, fill3));
}

Tensor Pipeline::run_style(const Tensor& x, const std::string& prompt, double strength,
                           std::uint64_t seed, AttnProbe* probe) const {
    const ModelDims& dm = weights_.dims;
    if (!(strength > 0.0 && strength <= 1.0))
        throw ContractError("run_style: strength must lie in (0, 1]");
    PromptEmbedding tau = encode_text(prompt);

    std::size_t t_d = scheduler_.timesteps.size();
    auto steps = static_cast<std::size_t>(
        std::min<long>(static_cast<long>(t_d),
                       std::max<long>(1, std::lround(strength * static_cast<double>(t_d)))));
    std::size_t start = t_d - steps;
    int t0 = scheduler_.timesteps[start];

    Tensor z_src = encode_image(x);
    RngStream noise(seed, "noise");
    Tensor eta = draw_gaussian(noise, {dm.c, dm.h, dm.w});
    double ab = scheduler_.alpha_bar(t0);
    Tensor z = add(scale(z_src, std::sqrt(ab)), scale(eta, std::sqrt(1.0 - ab)));

    for (std::size_t k = start; k < t_d; ++k) {
        int t = scheduler_.timesteps[k];
        Tensor eps = denoiser_forward(z, t, tau, probe);
        z = scheduler_step(z, eps, t, scheduler_.next_timestep(k));
    }
    return decode_latent(z);
}

}  // namespace misalign
