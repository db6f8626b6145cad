// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "misalign/tensor.hpp"

namespace misalign {

// Model geometry. Images are 3 x H x W in [0,1], latents c x h x w with
// H = 4h and W = 4w (two stride-2 encoder stages). d is the attention width,
// d_tau the text embedding width, L the token capacity, base the convolution
// channel width. T_train is the noise schedule length, T_d the number of
// sampling steps.
struct ModelDims {
    std::size_t H = 32, W = 32;
    std::size_t h = 8, w = 8;
    std::size_t c = 16;
    std::size_t d = 16;
    std::size_t d_tau = 32;
    std::size_t L = 16;
    std::size_t base = 40;
    std::size_t T_train = 1000;
    std::size_t T_d = 5;
    // First sampling timestep. With untrained weights the predicted clean
    // latent scales like 1/sqrt(alpha_bar(t_start)); starting mid-schedule
    // keeps decode inputs in a usable range.
    std::size_t t_start = 399;

    void validate() const;
};

// All parameters of the toy encoder/decoder/denoiser/text encoder as named
// tensors, initialized fan-in-scaled uniform from the "weights" substream of
// `seed`. Immutable after construction; safe to share read-only.
struct ModelWeights {
    ModelDims dims;
    std::uint64_t seed = 0;
    std::map<std::string, Tensor> tensors;

    const Tensor& at(const std::string& name) const;
    void save(const std::string& path) const;
    static ModelWeights load(const std::string& path);
};

ModelWeights init_weights(std::uint64_t seed, const ModelDims& dims);

// Fan-in used for the init bound of a named tensor: product of all extents
// past the first for conv kernels, leading extent otherwise.
std::size_t tensor_fan_in(const Tensor& t);

struct PromptEmbedding {
    Tensor mat;               // L x d_tau, rows past `valid` are zero
    std::size_t valid = 0;
};

// Linear beta schedule 1e-4 .. 0.02 over T_train steps with derived
// cumulative alpha products, plus the descending sampling subsequence.
// Timestep -1 is the clean endpoint with alpha_bar defined as exactly 1.
struct SchedulerConfig {
    std::vector<double> betas;
    std::vector<double> alpha_bars;
    std::vector<int> timesteps;  // length T_d, descending

    static SchedulerConfig make(std::size_t t_train, std::size_t t_d, std::size_t t_start);
    double alpha_bar(int t) const;
    int next_timestep(std::size_t index) const;  // timestep after timesteps[index]
    void validate() const;
};

// Captures the cross-attention layer's input and output rows during one
// denoiser call; for tests.
struct AttnProbe {
    Tensor phi;       // N x d rows fed to attention
    Tensor attn_out;  // N x d attention output
    bool captured = false;
};

// softmax((phi Wq)(tau_valid Wk)^T / sqrt(d)) . (tau_valid Wv), keys and
// values restricted to the first `valid` rows of tau. tau and the projection
// matrices must be untracked constants; phi may be tracked.
Tensor cross_attention(const Tensor& phi, const Tensor& tau, std::size_t valid, const Tensor& wq,
                       const Tensor& wk, const Tensor& wv);

Tensor sinusoidal_time_embedding(int t, std::size_t dim);

// The full differentiable pipeline: text encoder, image encoder, conditioned
// denoiser with one cross-attention bottleneck, decoder, and the
// deterministic few-step sampler. All forward entry points are differentiable
// with respect to a tracked image input; weights stay constant.
class Pipeline {
public:
    Pipeline(ModelDims dims, std::uint64_t weight_seed);
    explicit Pipeline(ModelWeights weights);

    const ModelDims& dims() const { return weights_.dims; }
    const ModelWeights& weights() const { return weights_; }
    const SchedulerConfig& scheduler() const { return scheduler_; }

    PromptEmbedding encode_text(const std::string& text) const;
    Tensor encode_image(const Tensor& x) const;     // 3 x H x W -> c x h x w
    Tensor decode_latent(const Tensor& z) const;    // c x h x w -> 3 x H x W in (0,1)
    // z_in carries c channels (style) or 2c+1 channels (inpainting: latent,
    // downsampled mask, masked-image latent).
    Tensor denoiser_forward(const Tensor& z_in, int t, const PromptEmbedding& tau,
                            AttnProbe* probe = nullptr) const;
    // Deterministic (eta = 0) update from t_from to t_to <= t_from.
    Tensor scheduler_step(const Tensor& z_t, const Tensor& eps, int t_from, int t_to) const;

    // Inpainting: regenerate the masked region under `prompt`, paste the
    // unmasked input back bit-exactly. Initial noise is a frozen function of
    // `seed`, so the whole map is deterministic and differentiable in x.
    Tensor run_inpaint(const Tensor& x, const Tensor& mask, const std::string& prompt,
                       std::uint64_t seed, AttnProbe* probe = nullptr) const;
    // Style transfer: noise the source latent to depth `strength`, denoise
    // under `prompt`, decode. Full-image generation, no compositing.
    Tensor run_style(const Tensor& x, const std::string& prompt, double strength,
                     std::uint64_t seed, AttnProbe* probe = nullptr) const;

    Tensor downsample_mask(const Tensor& mask) const;  // H x W -> 1 x h x w nearest

private:
    Tensor conv_bias(const Tensor& x, const std::string& stem, int stride) const;

    ModelWeights weights_;
    SchedulerConfig scheduler_;
};

// Mask helpers. Masks are H x W with entries exactly 0 or 1.
void require_binary_mask(const Tensor& mask);
Tensor mask_to_channels(const Tensor& mask, std::size_t channels);  // replicate over channels
void require_image_range(const Tensor& x, const char* what);

}  // namespace misalign
