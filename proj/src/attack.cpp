// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#include "misalign/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace misalign {

void AttackConfig::validate() const {
    if (!(alpha > 0.0)) throw ContractError("attack: alpha must be positive");
    if (iters < 1) throw ContractError("attack: iteration count must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
        throw ContractError("attack: decay rates must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ContractError("attack: adam_eps must be positive");
    if (lambda_sc < 0.0) throw ContractError("attack: lambda_sc must be >= 0");
    if (linf_eps < 0.0) throw ContractError("attack: linf_eps must be >= 0");
    if (!(strength > 0.0 && strength <= 1.0))
        throw ContractError("attack: strength must lie in (0, 1]");
    if (trace_every < 0) throw ContractError("attack: trace_every must be >= 0");
}

int AttackConfig::trace_cadence() const {
    if (trace_every > 0) return trace_every;
    if (iters <= 1000) return 1;
    return (iters + 999) / 1000;
}

namespace {

Tensor full_mask(const Pipeline& pl) {
    return Tensor::full({pl.dims().H, pl.dims().W}, 1.0);
}

double masked_count(const Tensor& mask) {
    double n = 0.0;
    for (double v : mask.data) n += v;
    return n;
}

}  // namespace

double masked_mse(const Tensor& a, const Tensor& b, const Tensor& mask3) {
    double acc = 0.0, n = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (mask3.data[i] == 0.0) continue;
        double d = a.data[i] - b.data[i];
        acc += d * d;
        n += 1.0;
    }
    return n > 0.0 ? acc / n : 0.0;
}

double psnr_db(double mse) {
    if (mse <= 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

Tensor loss_objective(const Pipeline& pipeline, const Tensor& x, const Tensor& mask,
                      const std::string& prompt, const Tensor& x_tar, const AttackConfig& cfg,
                      Tensor* generated) {
    if (!same_shape(x, x_tar))
        throw ShapeError("loss_objective: image " + shape_str(x.shape) + " vs target " +
                         shape_str(x_tar.shape));
    Tensor m = cfg.task == AttackTask::kStyle ? full_mask(pipeline) : mask;
    require_binary_mask(m);
    Tensor gen = cfg.task == AttackTask::kStyle
                     ? pipeline.run_style(x, prompt, cfg.strength, cfg.seed)
                     : pipeline.run_inpaint(x, m, prompt, cfg.seed);
    if (generated) *generated = gen;
    Tensor resid = mul(sub(gen, x_tar), mask_to_channels(m, 3));
    Tensor j = sum(mul(resid, resid));
    if (cfg.normalize_loss) {
        double n = masked_count(m);
        if (n > 0.0) j = scale(j, 1.0 / n);
    }
    return j;
}

Tensor total_loss(const Pipeline& pipeline, const Tensor& x, const Tensor& mask,
                  const std::string& prompt, const Tensor& x_tar, const AttackConfig& cfg,
                  const CheckerModel* checker, const ConceptBank* bank, Tensor* generated) {
    Tensor gen;
    Tensor j = loss_objective(pipeline, x, mask, prompt, x_tar, cfg, &gen);
    if (generated) *generated = gen;
    // lambda 0 or no checker: the bypass branch is not built at all, so runs
    // with and without a checker attached are bit-identical
    if (!checker || !bank || bank->size() == 0 || cfg.lambda_sc == 0.0) return j;
    return add(j, scale(loss_sc(gen, *bank, *checker), cfg.lambda_sc));
}

void adam_update(AttackState& state, const Tensor& grad, const AttackConfig& cfg) {
    if (!same_shape(state.x, grad))
        throw ShapeError("adam_update: state " + shape_str(state.x.shape) + " vs grad " +
                         shape_str(grad.shape));
    if (!all_finite(grad)) throw ContractError("adam_update: non-finite gradient");
    state.t += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, state.t);
    double bc2 = 1.0 - std::pow(cfg.beta2, state.t);
    for (std::size_t i = 0; i < state.x.size(); ++i) {
        double g = grad.data[i];
        state.m.data[i] = cfg.beta1 * state.m.data[i] + (1.0 - cfg.beta1) * g;
        state.v.data[i] = cfg.beta2 * state.v.data[i] + (1.0 - cfg.beta2) * g * g;
        double m_hat = state.m.data[i] / bc1;
        double v_hat = state.v.data[i] / bc2;
        state.x.data[i] -= cfg.alpha * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
}

AttackResult prema_attack(const Pipeline& pipeline, const Tensor& x, const Tensor& mask,
                          const std::string& prompt, const Tensor& x_tar,
                          const AttackConfig& cfg, const CheckerModel* checker,
                          const ConceptBank* bank) {
    cfg.validate();
    if (prompt.empty()) throw ContractError("prema_attack: prompt must be nonempty");
    require_image_range(x, "prema_attack source");
    require_image_range(x_tar, "prema_attack target");
    Tensor m = cfg.task == AttackTask::kStyle ? full_mask(pipeline) : mask;
    require_binary_mask(m);
    Tensor mask3 = mask_to_channels(m, 3);

    const bool bypass_on = checker && bank && bank->size() > 0 && cfg.lambda_sc > 0.0;
    const bool score_on = checker && bank && bank->size() > 0;
    const int cadence = cfg.trace_cadence();

    AttackResult res;
    AttackState state;
    state.x = logit(x);  // x_0 = inverse sigmoid of the source
    state.m = Tensor(state.x.shape);
    state.v = Tensor(state.x.shape);
    state.best_loss = std::numeric_limits<double>::infinity();
    double best_objective = std::numeric_limits<double>::infinity();

    for (int t = 1; t <= cfg.iters; ++t) {
        Tape tape;
        Tensor xt = tape.leaf(state.x);
        Tensor img = sigmoid(xt);
        Tensor gen;
        Tensor j = loss_objective(pipeline, img, m, prompt, x_tar, cfg, &gen);
        Tensor loss = j;
        double bypass_val = 0.0;
        std::vector<double> scores;
        if (bypass_on) {
            Tensor lsc = loss_sc(gen, *bank, *checker);
            bypass_val = lsc.item();
            loss = add(j, scale(lsc, cfg.lambda_sc));
        }
        double j_val = j.item();
        double loss_val = loss.item();
        if (t == 1) res.initial_masked_mse = masked_mse(gen.detached(), x_tar, mask3);
        if (!std::isfinite(loss_val)) {
            res.aborted = true;
            res.abort_iteration = t;
            break;
        }
        if (score_on) {
            // scores do not feed the update; computed on the forward value
            CheckResult cr = check(checker->embed(gen.detached()), *bank);
            scores = cr.scores;
        }
        Gradients grads = tape.backward(loss);
        Tensor g = grads.wrt(xt);
        if (!all_finite(g)) {
            res.aborted = true;
            res.abort_iteration = t;
            break;
        }
        if ((t - 1) % cadence == 0 || t == cfg.iters)
            res.trace.push_back(TraceRow{t, j_val, cfg.lambda_sc * bypass_val, scores});
        state.best_loss = std::min(state.best_loss, loss_val);
        best_objective = std::min(best_objective, j_val);

        adam_update(state, g, cfg);
        if (cfg.linf_eps > 0.0) {
            // optional pixel-space box projection around the source image
            Tensor pixels = sigmoid(state.x);
            for (std::size_t i = 0; i < pixels.size(); ++i) {
                double lo = std::max(0.0, x.data[i] - cfg.linf_eps);
                double hi = std::min(1.0, x.data[i] + cfg.linf_eps);
                pixels.data[i] = std::clamp(pixels.data[i], lo, hi);
            }
            state.x = logit(pixels);
        }
    }

    res.adv_image = sigmoid(state.x);
    Tensor gen_final;
    Tensor j_final = loss_objective(pipeline, res.adv_image, m, prompt, x_tar, cfg, &gen_final);
    res.final_objective = j_final.item();
    res.output_image = gen_final;
    res.final_masked_mse = masked_mse(gen_final, x_tar, mask3);
    res.final_masked_psnr_db = psnr_db(res.final_masked_mse);
    res.best_objective = std::min(best_objective, res.final_objective);
    double final_total = res.final_objective;
    if (score_on) {
        CheckResult cr = check(checker->embed(gen_final), *bank);
        res.final_scores = cr.scores;
        res.final_flagged = cr.flagged;
        if (bypass_on)
            for (std::size_t i = 0; i < cr.scores.size(); ++i)
                final_total +=
                    cfg.lambda_sc * std::max(cr.scores[i] - bank->thresholds[i], 0.0);
    }
    res.best_loss = std::min(state.best_loss, final_total);
    return res;
}

std::string trace_csv(const std::vector<TraceRow>& trace) {
    std::ostringstream os;
    std::size_t ncos = trace.empty() ? 0 : trace.front().cos_scores.size();
    os << "iter,J,L_sc";
    for (std::size_t i = 1; i <= ncos; ++i) os << ",cos_" << i;
    os << "\n";
    char buf[64];
    for (const TraceRow& row : trace) {
        os << row.iter;
        std::snprintf(buf, sizeof buf, ",%.12g,%.12g", row.objective, row.bypass);
        os << buf;
        for (double s : row.cos_scores) {
            std::snprintf(buf, sizeof buf, ",%.12g", s);
            os << buf;
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace misalign
