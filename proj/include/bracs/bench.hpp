#pragma once

// Decoding throughput and steering-overhead measurement. Wall-clock numbers
// use a monotonic clock, discard one warm-up run, and take the median over
// repeats; the per-layer overhead is measured by timing the hook itself,
// which is far less noisy than differencing whole-step times at toy scale.
// Runs are single-threaded by contract.

#include <algorithm>
#include <chrono>
#include <vector>

#include "bracs/engine.hpp"
#include "bracs/experiment.hpp"
#include "bracs/task.hpp"

namespace bracs {

struct BenchConfig {
    std::uint64_t seed = 1;
    int n_tokens = 50;
    int n_runs = 30;
    std::vector<int> scaling_set = {2, 4, 8, 16};
    int scaling_layers = 16;  // model depth for the scaling sweep
};

struct ThroughputResult {
    double unsteered_tok_s = 0.0;
    double steered_tok_s = 0.0;
    double ratio = 0.0;            // steered / unsteered
    double selfcheck_ratio = 0.0;  // off vs off, should be 1 within noise
    double resolved_tau = 0.0;

    struct ScalePoint {
        int n_steered = 0;
        double overhead_us_per_step = 0.0;
    };
    std::vector<ScalePoint> scaling;
    double slope_us_per_layer = 0.0;
    double intercept_us = 0.0;
    double r_squared = 0.0;

    // Per steered layer per step: the engine evaluates the barrier as one
    // length-d dot product (the image-key sum is aggregated at prefill) plus
    // an O(d) solve/apply. The equivalent full projection evaluated per step
    // would cost one d_m x d matrix-vector product per head.
    long barrier_flops_per_layer = 0;
    long matvec_flops_per_layer = 0;
};

namespace detail_bench {

struct TimingHook : SteeringHook {
    SteeringHook* inner;
    double total_ns = 0.0;
    explicit TimingHook(SteeringHook* h) : inner(h) {}
    bool wants(int layer) const override { return inner->wants(layer); }
    bool capture_vectors() const override { return inner->capture_vectors(); }
    void attention_input(int layer, Vector& xn, StepLayerRecord& rec) override {
        const auto t0 = std::chrono::steady_clock::now();
        inner->attention_input(layer, xn, rec);
        total_ns += std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now() - t0)
                        .count();
    }
    void queries(int layer, std::vector<Vector>& q, StepLayerRecord& rec) override {
        const auto t0 = std::chrono::steady_clock::now();
        inner->queries(layer, q, rec);
        total_ns += std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now() - t0)
                        .count();
    }
};

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// One timed decode pass: prefill excluded, n_tokens greedy steps measured.
// Returns (tokens/sec, mean hook microseconds per step).
inline std::pair<double, double> timed_decode(const SyntheticTask& task,
                                              const SteeringConfig& steering, int n_tokens) {
    const auto prompt = task.make_prompt(0);
    PrefillResult pre =
        prefill(task.model, prompt.text_tokens, prompt.image_embeddings, steering.steered_layers);
    SteeringEngine engine(steering, pre.ctx);
    TimingHook timed(&engine);
    SamplePolicy greedy;

    int token = sample(pre.last_logits, greedy);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < n_tokens; ++i) {
        const Vector x(task.model.embedding.row(token),
                       task.model.embedding.row(token) + task.model.config.width);
        const Vector logits = decode_step(task.model, pre.cache, x, &timed, nullptr);
        token = sample(logits, greedy);
    }
    const double sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {static_cast<double>(n_tokens) / sec,
            timed.total_ns / 1000.0 / static_cast<double>(n_tokens)};
}

inline double median_tok_s(const SyntheticTask& task, const SteeringConfig& steering,
                           const BenchConfig& cfg) {
    std::vector<double> rates;
    for (int r = 0; r < cfg.n_runs + 1; ++r) {
        const auto [tok_s, _] = timed_decode(task, steering, cfg.n_tokens);
        if (r > 0) rates.push_back(tok_s);  // first run is warm-up
    }
    return median(rates);
}

}  // namespace detail_bench

inline ThroughputResult throughput_bench(const BenchConfig& cfg = {},
                                         const TaskConfig& task_cfg = {}) {
    ThroughputResult result;

    // Default-config throughput ratio.
    SyntheticTask task = build_synthetic_task(cfg.seed, task_cfg);
    SteeringConfig off;
    off.mode = SteeringMode::off;
    off.steered_layers = {2, 3, 4};
    SteeringConfig reg = off;
    reg.mode = SteeringMode::regulated;
    reg.tau = calibrate_tau(task, reg.steered_layers);
    result.resolved_tau = reg.tau;

    const double off_a = detail_bench::median_tok_s(task, off, cfg);
    const double off_b = detail_bench::median_tok_s(task, off, cfg);
    const double steered = detail_bench::median_tok_s(task, reg, cfg);
    result.unsteered_tok_s = off_a;
    result.steered_tok_s = steered;
    result.ratio = steered / off_a;
    result.selfcheck_ratio = off_b / off_a;

    // Overhead scaling in |L_steer| on a deeper model.
    TaskConfig deep = task_cfg;
    deep.layers = cfg.scaling_layers;
    SyntheticTask deep_task = build_synthetic_task(cfg.seed, deep);
    for (int n_steered : cfg.scaling_set) {
        SteeringConfig steer;
        steer.mode = SteeringMode::regulated;
        steer.tau = 1e6;  // always-fire puts every layer on the full code path
        for (int l = 0; l < n_steered && l < deep.layers; ++l) steer.steered_layers.push_back(l);
        std::vector<double> overheads;
        for (int r = 0; r < cfg.n_runs + 1; ++r) {
            const auto [_, us] = detail_bench::timed_decode(deep_task, steer, cfg.n_tokens);
            if (r > 0) overheads.push_back(us);
        }
        result.scaling.push_back({n_steered, detail_bench::median(overheads)});
    }

    // Least-squares fit overhead ~ a + b * |L_steer|.
    const std::size_t n = result.scaling.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& p : result.scaling) {
        sx += p.n_steered;
        sy += p.overhead_us_per_step;
        sxx += static_cast<double>(p.n_steered) * p.n_steered;
        sxy += p.n_steered * p.overhead_us_per_step;
    }
    const double nn = static_cast<double>(n);
    const double denom = nn * sxx - sx * sx;
    result.slope_us_per_layer = (nn * sxy - sx * sy) / denom;
    result.intercept_us = (sy - result.slope_us_per_layer * sx) / nn;
    double ss_res = 0, ss_tot = 0;
    for (const auto& p : result.scaling) {
        const double fit = result.intercept_us + result.slope_us_per_layer * p.n_steered;
        ss_res += (p.overhead_us_per_step - fit) * (p.overhead_us_per_step - fit);
        ss_tot += (p.overhead_us_per_step - sy / nn) * (p.overhead_us_per_step - sy / nn);
    }
    result.r_squared = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;

    const int d = task.model.config.width;
    const int dm = task.model.config.head_width;
    const int heads = task.model.config.heads;
    result.barrier_flops_per_layer = 2L * d;
    result.matvec_flops_per_layer = 2L * heads * dm * d;
    return result;
}

}  // namespace bracs
