// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "misalign/checker.hpp"
#include "misalign/pipeline.hpp"
#include "misalign/tensor.hpp"

namespace misalign {

enum class AttackTask { kInpaint, kStyle };

struct AttackConfig {
    double alpha = 1e-2;       // step size
    int iters = 300;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double lambda_sc = 0.0;    // weight on the bypass loss; 0 disables it
    AttackTask task = AttackTask::kInpaint;
    std::uint64_t seed = 0;    // pipeline noise seed
    int trace_every = 0;       // 0: every iteration up to 1000, then ceil(iters/1000)
    bool normalize_loss = false;   // divide the objective by the masked pixel count
    double linf_eps = 0.0;     // optional box projection radius around the source; 0 = off
    double strength = 0.8;     // style task noising depth

    void validate() const;
    int trace_cadence() const;
};

// Optimizer state over the pre-sigmoid iterate.
struct AttackState {
    Tensor x;   // pre-sigmoid image
    Tensor m;   // first moment
    Tensor v;   // second moment
    int t = 0;  // completed steps
    double best_loss = 0.0;
};

struct TraceRow {
    int iter;
    double objective;               // masked squared-residual objective
    double bypass;                  // weighted-in bypass loss value (0 when disabled)
    std::vector<double> cos_scores; // per-concept scores, when a checker is attached
};

struct AttackResult {
    Tensor adv_image;       // sigma(x_T), strictly inside (0,1)
    Tensor output_image;    // pipeline output for the adversarial image
    std::vector<TraceRow> trace;
    double best_loss = 0.0;           // best total loss seen
    double best_objective = 0.0;      // best masked objective seen
    double final_objective = 0.0;     // objective at sigma(x_T)
    double initial_masked_mse = 0.0;  // masked MSE at iteration 0
    double final_masked_mse = 0.0;
    double final_masked_psnr_db = 0.0;
    std::vector<double> final_scores;
    bool final_flagged = false;
    bool aborted = false;
    int abort_iteration = -1;  // iteration where a non-finite value appeared
};

// Masked squared-residual objective of the generated image against the
// target: sum over pixels and channels of ((pipeline(x) - x_tar) * mask)^2.
// The style task uses the all-ones mask. Taped when x is tracked.
Tensor loss_objective(const Pipeline& pipeline, const Tensor& x, const Tensor& mask,
                      const std::string& prompt, const Tensor& x_tar, const AttackConfig& cfg,
                      Tensor* generated = nullptr);

// Objective plus lambda_sc times the bypass loss when a checker is attached.
Tensor total_loss(const Pipeline& pipeline, const Tensor& x, const Tensor& mask,
                  const std::string& prompt, const Tensor& x_tar, const AttackConfig& cfg,
                  const CheckerModel* checker, const ConceptBank* bank,
                  Tensor* generated = nullptr);

// One Adam step with bias correction; mutates state in place.
void adam_update(AttackState& state, const Tensor& grad, const AttackConfig& cfg);

// Sigmoid-reparameterized Adam attack on the input image. The mask argument
// is ignored for the style task (full mask). A checker plus bank enables the
// bypass term when cfg.lambda_sc > 0; scores are traced whenever a checker is
// attached. Non-finite loss or gradient aborts with the last finite state.
AttackResult prema_attack(const Pipeline& pipeline, const Tensor& x, const Tensor& mask,
                          const std::string& prompt, const Tensor& x_tar,
                          const AttackConfig& cfg, const CheckerModel* checker = nullptr,
                          const ConceptBank* bank = nullptr);

double masked_mse(const Tensor& a, const Tensor& b, const Tensor& mask3);
double psnr_db(double mse);

std::string trace_csv(const std::vector<TraceRow>& trace);

}  // namespace misalign
