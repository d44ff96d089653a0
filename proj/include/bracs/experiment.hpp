#pragma once

// Experiment runner and analysis over decode traces: hallucination/recall
// metrics, barrier-bin analysis with Wilson intervals, gate selectivity
// statistics, and the hyperparameter ablation grids.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "bracs/engine.hpp"
#include "bracs/task.hpp"

namespace bracs {

struct ExperimentConfig {
    int n_prompts = 500;
    int max_new = 24;
    SamplePolicy policy;            // greedy by default
    std::uint64_t sample_seed = 7;  // stream seed for top_p sampling
    int threads = 0;                // 0 = hardware concurrency
};

struct Summary {
    int n_prompts = 0;
    long steps = 0;
    long object_tokens = 0;
    long hallucinated_tokens = 0;
    std::optional<double> hallucination_rate;  // undefined when no object tokens
    double object_recall = 0.0;
    double mean_fired_fraction = 0.0;      // over decode-step gate decisions
    double mean_fired_layers_per_step = 0.0;
    std::map<int, double> per_layer_firing;
    double resolved_tau = 0.0;
    double total_wall_ms = 0.0;
};

struct ExperimentResult {
    std::vector<DecodeTrace> traces;  // one per prompt, in prompt order
    Summary summary;
    SteeringConfig steering;
};

// Marks emitted tokens with the exact task-level label: an object token is
// hallucinated iff it is not in the prompt's object set.
inline void label_trace(DecodeTrace& trace, const SyntheticTask& task,
                        const SyntheticTask::Prompt& prompt) {
    for (auto& step : trace.steps) {
        step.is_object = task.is_object_token(step.token);
        if (step.is_object) {
            const bool grounded = std::binary_search(prompt.object_set.begin(),
                                                     prompt.object_set.end(), step.token);
            step.label = grounded ? 0 : 1;
        } else {
            step.label = -1;
        }
    }
}

// Fraction of hallucinated object instances over all mentioned instances;
// 0/0 is reported as undefined rather than zero.
inline std::optional<double> hallucination_rate(const std::vector<DecodeTrace>& traces) {
    long objects = 0, hallucinated = 0;
    for (const auto& t : traces)
        for (const auto& s : t.steps)
            if (s.is_object) {
                ++objects;
                if (s.label == 1) ++hallucinated;
            }
    if (objects == 0) return std::nullopt;
    return static_cast<double>(hallucinated) / static_cast<double>(objects);
}

// Instance-level recall: distinct in-image objects mentioned over all
// in-image objects, aggregated across prompts.
inline double object_recall(const std::vector<DecodeTrace>& traces,
                            const std::vector<SyntheticTask::Prompt>& prompts) {
    long mentioned = 0, total = 0;
    for (std::size_t i = 0; i < traces.size(); ++i) {
        std::set<int> seen;
        for (const auto& s : traces[i].steps)
            if (s.is_object && s.label == 0) seen.insert(s.token);
        mentioned += static_cast<long>(seen.size());
        total += static_cast<long>(prompts[i].object_set.size());
    }
    return total > 0 ? static_cast<double>(mentioned) / static_cast<double>(total) : 0.0;
}

// Gate decisions exist on decode steps only (step 0 comes from prefill).
inline bool counts_as_decision(const StepRecord& step) { return step.step >= 1; }

struct SelectivityStats {
    double fired_fraction = 0.0;
    double mean_fired_layers_per_step = 0.0;
    std::map<int, double> per_layer_rate;
};

inline SelectivityStats selectivity_stats(const std::vector<DecodeTrace>& traces) {
    SelectivityStats out;
    long decisions = 0, fired = 0, steps = 0;
    std::map<int, std::pair<long, long>> per_layer;  // layer -> (fired, total)
    for (const auto& t : traces)
        for (const auto& s : t.steps) {
            if (!counts_as_decision(s)) continue;
            ++steps;
            for (const auto& l : s.layers) {
                ++decisions;
                auto& p = per_layer[l.layer];
                ++p.second;
                if (l.fired) {
                    ++fired;
                    ++p.first;
                }
            }
        }
    if (decisions > 0) out.fired_fraction = static_cast<double>(fired) / decisions;
    if (steps > 0) out.mean_fired_layers_per_step = static_cast<double>(fired) / steps;
    for (const auto& [layer, p] : per_layer)
        out.per_layer_rate[layer] = p.second > 0 ? static_cast<double>(p.first) / p.second : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Wilson score interval and the barrier-bin analysis.

struct WilsonInterval {
    double lo = 0.0;
    double hi = 1.0;
};

inline WilsonInterval wilson_interval(long k, long n, double z = 1.96) {
    if (n < 1) throw std::invalid_argument("wilson_interval: n must be >= 1");
    if (k < 0 || k > n) throw std::invalid_argument("wilson_interval: k outside [0, n]");
    const double nn = static_cast<double>(n);
    const double p = static_cast<double>(k) / nn;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / nn;
    const double center = (p + z2 / (2.0 * nn)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
    WilsonInterval w;
    // Clamp against roundoff: the score interval always contains p itself.
    w.lo = std::min(std::max(0.0, center - half), p);
    w.hi = std::max(std::min(1.0, center + half), p);
    return w;
}

struct BinReport {
    struct Bin {
        long count = 0;
        long hallucinated = 0;
        double rate = 0.0;
        double lo = 0.0;
        double hi = 1.0;
        double barrier_lo = 0.0;  // min barrier value in the bin
        double barrier_hi = 0.0;
    };
    std::vector<Bin> bins;
};

// Mean barrier over steered layers at the step that emitted the token.
inline double step_barrier(const StepRecord& step) {
    if (step.layers.empty()) throw std::invalid_argument("step_barrier: no layer records");
    double sum = 0.0;
    for (const auto& l : step.layers) sum += l.h;
    return sum / static_cast<double>(step.layers.size());
}

inline double step_barrier_at_layer(const StepRecord& step, int layer) {
    for (const auto& l : step.layers)
        if (l.layer == layer) return l.h;
    throw std::invalid_argument("step_barrier_at_layer: layer not recorded");
}

// Sorts labeled object tokens by barrier value (stable, so ties keep trace
// order) and splits them into n_bins equal-count groups; the earliest bins
// absorb the remainder so counts differ by at most one.
inline BinReport bin_analysis(const std::vector<DecodeTrace>& traces, int n_bins = 9,
                              std::optional<int> at_layer = std::nullopt) {
    std::vector<std::pair<double, int>> tokens;  // (barrier, label)
    for (const auto& t : traces)
        for (const auto& s : t.steps)
            if (s.is_object && !s.layers.empty())
                tokens.emplace_back(
                    at_layer ? step_barrier_at_layer(s, *at_layer) : step_barrier(s), s.label);
    if (static_cast<int>(tokens.size()) < n_bins)
        throw std::invalid_argument("bin_analysis: need at least " + std::to_string(n_bins) +
                                    " labeled object tokens, have " +
                                    std::to_string(tokens.size()));
    std::stable_sort(tokens.begin(), tokens.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });

    BinReport report;
    const long n = static_cast<long>(tokens.size());
    const long base = n / n_bins;
    const long extra = n % n_bins;
    long start = 0;
    for (int b = 0; b < n_bins; ++b) {
        const long size = base + (b < extra ? 1 : 0);
        BinReport::Bin bin;
        bin.count = size;
        bin.barrier_lo = tokens[start].first;
        bin.barrier_hi = tokens[start + size - 1].first;
        for (long i = start; i < start + size; ++i)
            if (tokens[i].second == 1) ++bin.hallucinated;
        bin.rate = static_cast<double>(bin.hallucinated) / static_cast<double>(size);
        const WilsonInterval w = wilson_interval(bin.hallucinated, size);
        bin.lo = w.lo;
        bin.hi = w.hi;
        report.bins.push_back(bin);
        start += size;
    }
    return report;
}

// ---------------------------------------------------------------------------
// Threshold calibration: 30th percentile (nearest-rank) of the prefill-step
// barrier distribution over a fixed 32-prompt calibration batch.

inline double calibrate_tau(const SyntheticTask& task, const std::vector<int>& steered_layers,
                            int n_calib = 32, double percentile = 0.30) {
    std::vector<double> values;
    for (int i = 0; i < n_calib; ++i) {
        // Calibration prompts live in their own index range so experiment
        // prompts (indices from 0) stay untouched by threshold selection.
        const auto prompt = task.make_prompt(0x10000000ull + static_cast<std::uint64_t>(i));
        PrefillResult pre =
            prefill(task.model, prompt.text_tokens, prompt.image_embeddings, steered_layers);
        for (const auto& l : pre.last_record.layers) values.push_back(l.h);
    }
    if (values.empty()) throw std::invalid_argument("calibrate_tau: no barrier samples");
    std::sort(values.begin(), values.end());
    const std::size_t rank = static_cast<std::size_t>(
        std::ceil(percentile * static_cast<double>(values.size())));
    return values[rank == 0 ? 0 : rank - 1];
}

// ---------------------------------------------------------------------------
// Experiment runner. Prompts are independent, so they run on a small thread
// pool; every prompt owns its cache, trace, and sampling stream, and results
// land in prompt order regardless of scheduling.

inline ExperimentResult run_experiment(const SyntheticTask& task, const SteeringConfig& steering,
                                       const ExperimentConfig& experiment = {}) {
    if (experiment.n_prompts < 1)
        throw std::invalid_argument("run_experiment: n_prompts must be >= 1");
    steering.validate(task.model.config.layers);

    ExperimentResult result;
    result.steering = steering;
    result.traces.resize(experiment.n_prompts);
    std::vector<SyntheticTask::Prompt> prompts(experiment.n_prompts);

    const int wanted = experiment.threads > 0
                           ? experiment.threads
                           : static_cast<int>(std::thread::hardware_concurrency());
    const int n_threads = std::max(1, std::min(wanted, experiment.n_prompts));

    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::string error_message;
    std::mutex error_mutex;

    auto worker = [&]() {
        while (!failed.load()) {
            const int i = next.fetch_add(1);
            if (i >= experiment.n_prompts) break;
            try {
                prompts[i] = task.make_prompt(static_cast<std::uint64_t>(i));
                Rng sample_rng(experiment.sample_seed * 0x9E3779B97F4A7C15ull + i);
                GenerateResult gen =
                    generate(task.model, prompts[i].text_tokens, prompts[i].image_embeddings,
                             steering, experiment.policy, experiment.max_new, &sample_rng,
                             task.eos_id);
                label_trace(gen.trace, task, prompts[i]);
                result.traces[i] = std::move(gen.trace);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mutex);
                error_message = e.what();
                failed.store(true);
            }
        }
    };

    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failed.load()) throw std::runtime_error("run_experiment: " + error_message);

    Summary& s = result.summary;
    s.n_prompts = experiment.n_prompts;
    s.resolved_tau = steering.tau;
    for (const auto& t : result.traces) {
        s.steps += static_cast<long>(t.steps.size());
        for (const auto& step : t.steps) {
            s.total_wall_ms += step.wall_ms;
            if (step.is_object) {
                ++s.object_tokens;
                if (step.label == 1) ++s.hallucinated_tokens;
            }
        }
    }
    s.hallucination_rate = hallucination_rate(result.traces);
    s.object_recall = object_recall(result.traces, prompts);
    const SelectivityStats sel = selectivity_stats(result.traces);
    s.mean_fired_fraction = sel.fired_fraction;
    s.mean_fired_layers_per_step = sel.mean_fired_layers_per_step;
    s.per_layer_firing = sel.per_layer_rate;
    return result;
}

// ---------------------------------------------------------------------------
// Ablation grids: sweep one hyperparameter while the others stay at their
// defaults, plus the steering-mode comparison (off / regulated / continuous /
// q_only) that contains the injection-point ablation.

struct AblationRow {
    std::string parameter;
    std::string value;
    double hallucination_rate = 0.0;
    double object_recall = 0.0;
    double fired_fraction = 0.0;
    long object_tokens = 0;
};

struct AblationTable {
    std::string name;  // "alpha", "tau", "lower_layer", "mode"
    std::vector<AblationRow> rows;
};

struct AblationGrids {
    std::vector<double> alpha = {0.3, 0.5, 1.0, 1.25, 1.5};
    std::vector<double> tau_offsets = {-2.0, -1.0, 0.0, 1.0, 2.0};  // relative to default tau
    std::vector<int> lower_layers = {0, 1, 2, 3, 4};
    bool include_modes = true;
};

inline AblationRow make_row(const std::string& parameter, const std::string& value,
                            const ExperimentResult& r) {
    AblationRow row;
    row.parameter = parameter;
    row.value = value;
    row.hallucination_rate = r.summary.hallucination_rate.value_or(-1.0);
    row.object_recall = r.summary.object_recall;
    row.fired_fraction = r.summary.mean_fired_fraction;
    row.object_tokens = r.summary.object_tokens;
    return row;
}

inline std::vector<AblationTable> ablation_suite(const SyntheticTask& task,
                                                 const SteeringConfig& defaults,
                                                 const ExperimentConfig& experiment,
                                                 const AblationGrids& grids = {}) {
    std::vector<AblationTable> tables;

    {
        AblationTable t;
        t.name = "alpha";
        for (double a : grids.alpha) {
            SteeringConfig cfg = defaults;
            cfg.mode = SteeringMode::regulated;
            cfg.alpha = a;
            t.rows.push_back(make_row("alpha", format_double(a), run_experiment(task, cfg, experiment)));
        }
        tables.push_back(std::move(t));
    }
    {
        AblationTable t;
        t.name = "tau";
        for (double off : grids.tau_offsets) {
            SteeringConfig cfg = defaults;
            cfg.mode = SteeringMode::regulated;
            cfg.tau = defaults.tau + off;
            t.rows.push_back(
                make_row("tau", format_double(cfg.tau), run_experiment(task, cfg, experiment)));
        }
        tables.push_back(std::move(t));
    }
    {
        AblationTable t;
        t.name = "lower_layer";
        const int upper = defaults.steered_layers.empty() ? task.model.config.layers - 1
                                                          : defaults.steered_layers.back();
        for (int lower : grids.lower_layers) {
            if (lower > upper) continue;
            SteeringConfig cfg = defaults;
            cfg.mode = SteeringMode::regulated;
            cfg.steered_layers.clear();
            for (int l = lower; l <= upper; ++l) cfg.steered_layers.push_back(l);
            t.rows.push_back(make_row("lower_layer", std::to_string(lower),
                                      run_experiment(task, cfg, experiment)));
        }
        tables.push_back(std::move(t));
    }
    if (grids.include_modes) {
        AblationTable t;
        t.name = "mode";
        for (SteeringMode mode : {SteeringMode::off, SteeringMode::regulated,
                                  SteeringMode::continuous, SteeringMode::q_only}) {
            SteeringConfig cfg = defaults;
            cfg.mode = mode;
            t.rows.push_back(
                make_row("mode", to_string(mode), run_experiment(task, cfg, experiment)));
        }
        tables.push_back(std::move(t));
    }
    return tables;
}

}  // namespace bracs
