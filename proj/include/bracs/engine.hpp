#pragma once

// Wires the closed-form steering math into the decoder hook point and runs
// the full decode loop: prefill once, fix the prompt-constant gradients,
// then per decode step and steered layer read the barrier, gate, and apply
// the minimum-norm correction before the Q/K/V projections.

#include <chrono>
#include <optional>
#include <stdexcept>
#include <vector>

#include "bracs/barrier.hpp"
#include "bracs/decode.hpp"
#include "bracs/model.hpp"
#include "bracs/steering.hpp"

namespace bracs {

class SteeringEngine : public SteeringHook {
  public:
    SteeringEngine(const SteeringConfig& config, const PrefillContext& ctx, bool capture = false)
        : config_(config), ctx_(ctx), capture_(capture) {}

    bool wants(int layer) const override {
        // Steered layers are observed in every mode; "off" only records h.
        return ctx_.find(layer) != nullptr;
    }

    bool capture_vectors() const override { return capture_; }

    void attention_input(int layer, Vector& xn, StepLayerRecord& rec) override {
        const auto* b = ctx_.find(layer);
        if (b == nullptr) return;
        const double h = barrier_value(b->grad, xn);
        rec.h = h;
        rec.violation = std::max(config_.tau - h, 0.0);

        switch (config_.mode) {
            case SteeringMode::off:
                break;
            case SteeringMode::regulated: {
                const Correction c = solve_correction(h, b->grad, config_.tau, config_.epsilon);
                rec.fired = c.fired;
                rec.theta_norm = c.lambda * std::sqrt(b->grad.norm_sq);
                if (c.fired && c.lambda != 0.0) axpy(xn, config_.alpha * c.lambda, b->grad.g);
                break;
            }
            case SteeringMode::continuous: {
                // Ungated: the same correction fires on every step, with sign.
                const double denom = b->grad.norm_sq + config_.epsilon;
                const double lambda = denom > 0.0 ? (config_.tau - h) / denom : 0.0;
                rec.fired = true;
                rec.theta_norm = std::abs(lambda) * std::sqrt(b->grad.norm_sq);
                if (lambda != 0.0) axpy(xn, config_.alpha * lambda, b->grad.g);
                break;
            }
            case SteeringMode::q_only: {
                // The update lands on the queries; record the decision here.
                rec.fired = rec.violation > 0.0;
                const double denom = b->query_grad_norm_sq + config_.epsilon;
                const double lambda = (rec.fired && denom > 0.0) ? rec.violation / denom : 0.0;
                rec.theta_norm = lambda * std::sqrt(b->query_grad_norm_sq);
                break;
            }
        }
    }

    void queries(int layer, std::vector<Vector>& q_heads, StepLayerRecord& rec) override {
        if (config_.mode != SteeringMode::q_only) return;
        const auto* b = ctx_.find(layer);
        if (b == nullptr || !rec.fired) return;
        const auto updates = q_only_correction(rec.h, b->query_grads, b->query_grad_norm_sq,
                                               config_.tau, config_.epsilon);
        for (std::size_t m = 0; m < q_heads.size(); ++m)
            axpy(q_heads[m], config_.alpha, updates[m]);
    }

  private:
    const SteeringConfig& config_;
    const PrefillContext& ctx_;
    bool capture_;
};

struct GenerateResult {
    std::vector<int> tokens;
    DecodeTrace trace;
};

// Full decode loop: the first token is sampled from the prefill logits (the
// prompt's last position, never steered); each later token runs one steered
// decode_step on the previous token's embedding. Stops at eos_id or max_new.
inline GenerateResult generate(const Model& model, const std::vector<int>& text_tokens,
                               const std::vector<Vector>& image_embeddings,
                               const SteeringConfig& steering, const SamplePolicy& policy,
                               int max_new = kDefaultMaxNewTokens, Rng* rng = nullptr,
                               std::optional<int> eos_id = std::nullopt, bool capture = false) {
    steering.validate(model.config.layers);
    GenerateResult result;
    if (max_new <= 0) return result;

    using clock = std::chrono::steady_clock;
    auto t0 = clock::now();
    PrefillResult pre = prefill(model, text_tokens, image_embeddings, steering.steered_layers);
    SteeringEngine engine(steering, pre.ctx, capture);

    StepRecord first = std::move(pre.last_record);
    first.token = sample(pre.last_logits, policy, rng);
    first.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    result.tokens.push_back(first.token);
    result.trace.steps.push_back(std::move(first));
    if (eos_id && result.tokens.back() == *eos_id) return result;

    for (int step = 1; step < max_new; ++step) {
        const int prev = result.tokens.back();
        const Vector x_in(model.embedding.row(prev), model.embedding.row(prev) + model.config.width);
        StepRecord rec;
        rec.step = step;
        t0 = clock::now();
        const Vector logits = decode_step(model, pre.cache, x_in, &engine, &rec);
        rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        rec.token = sample(logits, policy, rng);
        result.tokens.push_back(rec.token);
        result.trace.steps.push_back(std::move(rec));
        if (eos_id && result.tokens.back() == *eos_id) break;
    }
    return result;
}

}  // namespace bracs
