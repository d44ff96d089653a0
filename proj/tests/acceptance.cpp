// Acceptance suite: every verification criterion at its stated tolerance,
// one pass/fail line each. Exit code is the number of failed criteria.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bracs/bracs.hpp"

using namespace bracs;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
    void fail(const std::string& why) {
        pass = false;
        if (!detail.empty()) detail += "; ";
        detail += why;
    }
    void note(const std::string& what) {
        if (detail.empty()) detail = what;
    }
};

SteeringConfig make_steering(SteeringMode mode, double tau, double alpha = 1.0,
                             double epsilon = 1e-6) {
    SteeringConfig s;
    s.mode = mode;
    s.steered_layers = {2, 3, 4};
    s.tau = tau;
    s.alpha = alpha;
    s.epsilon = epsilon;
    return s;
}

// ---------------------------------------------------------------------------
// 1. KKT / minimum-norm correctness against the iterative QP solver.

Outcome criterion_kkt() {
    Outcome out;
    Rng rng(71);
    int compared = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        Vector gv = seeded_gaussian(rng, 64);
        BarrierGradient g{gv, dot(gv, gv), 0.0};
        const double h = rng.gaussian() * 3.0;
        const double tau = rng.gaussian() * 3.0;
        const Correction c = solve_correction(h, g, tau, 0.0);
        if (h >= tau) {
            if (c.theta != Vector(64, 0.0)) out.fail("theta not exactly zero at h >= tau");
            if (c.fired) out.fail("gate fired at h >= tau");
            continue;
        }
        ++compared;
        const Vector oracle = qp_oracle(h, gv, tau, 2000);
        const double scale = std::max(1.0, norm(oracle));
        for (int i = 0; i < 64; ++i)
            if (std::abs(c.theta[i] - oracle[i]) > 1e-8 * scale) {
                out.fail("oracle mismatch at trial " + std::to_string(trial));
                break;
            }
        if (c.lambda < 0.0) out.fail("negative multiplier");
        if (std::abs(c.lambda * (dot(gv, c.theta) - (tau - h))) >
            1e-10 * std::max(1.0, std::abs(tau - h)))
            out.fail("complementary slackness violated");
    }
    out.note(std::to_string(compared) + " active instances vs iterative oracle");
    return out;
}

// ---------------------------------------------------------------------------
// 2. Exact restoration: every fired step of a 500-prompt run lands on tau.

Outcome criterion_restoration() {
    Outcome out;
    SyntheticTask task = build_synthetic_task(1);
    SteeringConfig steer = make_steering(SteeringMode::regulated, 0.0, 1.0, 0.0);
    steer.tau = calibrate_tau(task, steer.steered_layers);

    long fired_checked = 0;
    double worst = 0.0;
    SamplePolicy greedy;
    for (int p = 0; p < 500; ++p) {
        const auto prompt = task.make_prompt(static_cast<std::uint64_t>(p));
        PrefillResult pre =
            prefill(task.model, prompt.text_tokens, prompt.image_embeddings, steer.steered_layers);
        SteeringEngine engine(steer, pre.ctx, /*capture=*/true);
        int token = sample(pre.last_logits, greedy);
        for (int t = 1; t < 24 && token != task.eos_id; ++t) {
            const Vector x(task.model.embedding.row(token),
                           task.model.embedding.row(token) + task.model.config.width);
            StepRecord rec;
            const Vector logits = decode_step(task.model, pre.cache, x, &engine, &rec);
            token = sample(logits, greedy);
            for (const auto& l : rec.layers) {
                if (!l.fired) continue;
                ++fired_checked;
                const auto* b = pre.ctx.find(l.layer);
                const double restored = barrier_value(b->grad, l.x_tilde);
                const double err = std::abs(restored - steer.tau) / std::abs(steer.tau);
                worst = std::max(worst, err);
            }
        }
    }
    if (fired_checked < 1000) out.fail("too few fired steps to be meaningful");
    if (worst > 1e-9) out.fail("restoration error " + format_double(worst));
    out.note(std::to_string(fired_checked) + " fired steps, worst rel err " +
             format_double(worst));
    return out;
}

// ---------------------------------------------------------------------------
// 3. Closed-form gradient vs finite differences; prompt-constancy.

Outcome criterion_gradient() {
    Outcome out;
    Rng rng(73);
    int instances = 0;
    double worst = 0.0;
    for (int model_idx = 0; model_idx < 10; ++model_idx) {
        ModelConfig mc;
        mc.layers = 2;
        mc.heads = 4;
        mc.width = 32;
        mc.head_width = 8;
        mc.ffn_width = 64;
        mc.vocab = 8;
        mc.max_seq = 16;
        mc.seed = 1000 + model_idx;
        const Model model = init_model(mc);
        for (int prompt_idx = 0; prompt_idx < 5; ++prompt_idx) {
            std::vector<Vector> images;
            const int n_img = 2 + prompt_idx;
            for (int i = 0; i < n_img; ++i) images.push_back(seeded_gaussian(rng, 32));
            PrefillResult pre = prefill(model, {0}, images, {0, 1});
            for (const auto& b : pre.ctx.barriers) {
                ++instances;
                const Vector x = seeded_gaussian(rng, 32);
                Vector fd(32);
                for (int i = 0; i < 32; ++i) {
                    Vector hi(x), lo(x);
                    hi[i] += 1e-6;
                    lo[i] -= 1e-6;
                    fd[i] = (barrier_direct(hi, model.layers[b.layer], pre.cache,
                                            pre.ctx.image_indices, b.layer) -
                             barrier_direct(lo, model.layers[b.layer], pre.cache,
                                            pre.ctx.image_indices, b.layer)) /
                            2e-6;
                }
                Vector diff(32);
                for (int i = 0; i < 32; ++i) diff[i] = fd[i] - b.grad.g[i];
                const double rel = norm(diff) / norm(b.grad.g);
                worst = std::max(worst, rel);
            }
        }
    }
    if (instances != 100) out.fail("expected 100 instances, got " + std::to_string(instances));
    if (worst > 1e-6) out.fail("finite-difference mismatch " + format_double(worst));

    // Prompt-constancy: the gradient recomputed from the live cache at decode
    // steps 1 and 50 is bit-identical to the prefill gradient.
    SyntheticTask task = build_synthetic_task(1);
    const auto prompt = task.make_prompt(0);
    const std::vector<int> steered = {2, 3, 4};
    PrefillResult pre =
        prefill(task.model, prompt.text_tokens, prompt.image_embeddings, steered);
    auto recompute = [&]() {
        std::vector<BarrierGradient> grads;
        for (int l : steered)
            grads.push_back(barrier_gradient(
                task.model.layers[l],
                aggregate_image_keys(pre.cache, pre.ctx.image_indices, l),
                pre.ctx.image_indices.size()));
        return grads;
    };
    std::vector<BarrierGradient> at_step1, at_step50;
    for (int t = 1; t <= 50; ++t) {
        const Vector x(task.model.embedding.row(0),
                       task.model.embedding.row(0) + task.model.config.width);
        decode_step(task.model, pre.cache, x, nullptr, nullptr);
        if (t == 1) at_step1 = recompute();
        if (t == 50) at_step50 = recompute();
    }
    for (std::size_t i = 0; i < steered.size(); ++i) {
        if (at_step1[i].g != pre.ctx.barriers[i].grad.g || at_step1[i].g != at_step50[i].g) {
            out.fail("gradient not bit-identical across decode steps");
            break;
        }
    }
    out.note("100 instances, worst vector rel err " + format_double(worst) +
             "; g bit-stable at steps 1 and 50");
    return out;
}

// ---------------------------------------------------------------------------
// 4. Cache consistency and hook locality.

Outcome criterion_cache() {
    Outcome out;
    SyntheticTask task = build_synthetic_task(2);
    SteeringConfig steer = make_steering(SteeringMode::regulated, 1e6, 1.0, 0.0);
    SamplePolicy greedy;

    long checked = 0;
    for (int p = 0; p < 20; ++p) {
        const auto prompt = task.make_prompt(static_cast<std::uint64_t>(p));
        PrefillResult pre =
            prefill(task.model, prompt.text_tokens, prompt.image_embeddings, steer.steered_layers);
        SteeringEngine engine(steer, pre.ctx, /*capture=*/true);
        int token = sample(pre.last_logits, greedy);
        for (int t = 1; t < 12; ++t) {
            const Vector x(task.model.embedding.row(token),
                           task.model.embedding.row(token) + task.model.config.width);
            StepRecord rec;
            const Vector logits = decode_step(task.model, pre.cache, x, &engine, &rec);
            token = sample(logits, greedy);
            const int pos = pre.cache.len - 1;
            for (const auto& l : rec.layers) {
                if (!l.fired || l.x_tilde.empty()) continue;
                for (int m = 0; m < task.model.config.heads; ++m) {
                    const Vector k = matvec(task.model.layers[l.layer].w_k[m], l.x_tilde);
                    const Vector v = matvec(task.model.layers[l.layer].w_v[m], l.x_tilde);
                    const double* ck = pre.cache.key(l.layer, pos, m);
                    const double* cv = pre.cache.value(l.layer, pos, m);
                    for (int i = 0; i < task.model.config.head_width; ++i) {
                        ++checked;
                        if (std::abs(k[i] - ck[i]) > 1e-12 || std::abs(v[i] - cv[i]) > 1e-12)
                            out.fail("cached K/V diverge from projections of x~");
                    }
                }
            }
        }
    }
    if (checked == 0) out.fail("no steered steps checked");

    // Hook locality: mode off is bit-identical to a hook-free engine.
    const auto prompt = task.make_prompt(99);
    SteeringConfig off = make_steering(SteeringMode::off, 0.0);
    PrefillResult a =
        prefill(task.model, prompt.text_tokens, prompt.image_embeddings, off.steered_layers);
    PrefillResult b =
        prefill(task.model, prompt.text_tokens, prompt.image_embeddings, off.steered_layers);
    SteeringEngine engine(off, a.ctx);
    for (int t = 0; t < 10; ++t) {
        const Vector x(task.model.embedding.row(3),
                       task.model.embedding.row(3) + task.model.config.width);
        StepRecord rec;
        const Vector la = decode_step(task.model, a.cache, x, &engine, &rec);
        const Vector lb = decode_step(task.model, b.cache, x, nullptr, nullptr);
        if (la != lb) out.fail("mode off not bit-identical to hook-free decode");
    }
    for (int l = 0; l < task.model.config.layers; ++l)
        if (a.cache.layers[l].keys != b.cache.layers[l].keys)
            out.fail("mode off perturbed the cache");
    out.note(std::to_string(checked) + " cached components verified");
    return out;
}

// ---------------------------------------------------------------------------
// 5. Selectivity: never-fire equivalence, always-fire continuous, monotone tau.

Outcome criterion_selectivity() {
    Outcome out;
    SyntheticTask task = build_synthetic_task(3);
    ExperimentConfig exp;
    exp.n_prompts = 100;
    exp.max_new = 24;

    const auto off = run_experiment(task, make_steering(SteeringMode::off, 0.0), exp);
    const auto never = run_experiment(task, make_steering(SteeringMode::regulated, -1e9), exp);
    for (std::size_t i = 0; i < off.traces.size(); ++i) {
        if (off.traces[i].steps.size() != never.traces[i].steps.size()) {
            out.fail("trace length mismatch under never-firing gate");
            continue;
        }
        for (std::size_t s = 0; s < off.traces[i].steps.size(); ++s)
            if (off.traces[i].steps[s].token != never.traces[i].steps[s].token)
                out.fail("token mismatch under never-firing gate");
    }

    const double tau0 = calibrate_tau(task, {2, 3, 4});
    const auto cont = run_experiment(task, make_steering(SteeringMode::continuous, tau0), exp);
    if (cont.summary.mean_fired_fraction != 1.0)
        out.fail("continuous fired fraction " +
                 format_double(cont.summary.mean_fired_fraction) + " != 1");

    double last = 2.0;
    std::vector<double> fractions;
    for (double offgrid : {2.0, 1.0, 0.0, -1.0, -2.0}) {  // descending tau
        const auto r =
            run_experiment(task, make_steering(SteeringMode::regulated, tau0 + offgrid), exp);
        fractions.push_back(r.summary.mean_fired_fraction);
        if (r.summary.mean_fired_fraction > last + 1e-12)
            out.fail("fired fraction increased as tau decreased");
        last = r.summary.mean_fired_fraction;
    }
    std::ostringstream frac;
    for (double f : fractions) frac << " " << format_double(f);
    out.note("fired fractions across descending tau grid:" + frac.str());
    return out;
}

// ---------------------------------------------------------------------------
// 6. Adaptivity: linear in the violation, inverse in the gradient scale.

Outcome criterion_adaptivity() {
    Outcome out;
    Rng rng(74);
    for (int trial = 0; trial < 50; ++trial) {
        Vector gv = seeded_gaussian(rng, 64);
        BarrierGradient g{gv, dot(gv, gv), 0.0};
        const double tau = 1.0;
        const double base = norm(solve_correction(tau - 1.0, g, tau, 0.0).theta);
        for (double v : {0.25, 0.5, 2.0, 4.0, 16.0}) {
            const double n = norm(solve_correction(tau - v, g, tau, 0.0).theta);
            if (std::abs(n - v * base) > 1e-10 * std::max(1.0, v * base))
                out.fail("norm not proportional to violation");
        }
        BarrierGradient g2{scaled(gv, 2.0), 4.0 * g.norm_sq, 0.0};
        const double halved = norm(solve_correction(tau - 1.0, g2, tau, 0.0).theta);
        if (std::abs(halved - 0.5 * base) > 1e-10 * std::max(1.0, base))
            out.fail("doubling g does not halve the correction");
    }
    out.note("50 random gradients, violations over two decades");
    return out;
}

// ---------------------------------------------------------------------------
// 7. Directional hallucination reduction with recall guardrail and x<=q.

struct SeedRuns {
    ExperimentResult off, reg, q;
};

Outcome criterion_reduction(std::vector<ExperimentResult>& off_runs_out) {
    Outcome out;
    long off_h = 0, off_n = 0, reg_h = 0, reg_n = 0, q_h = 0, q_n = 0;
    double off_recall = 0.0, reg_recall = 0.0;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        SyntheticTask task = build_synthetic_task(seed);
        ExperimentConfig exp;
        exp.n_prompts = 500;
        exp.max_new = 24;
        const double tau = calibrate_tau(task, {2, 3, 4});
        auto off = run_experiment(task, make_steering(SteeringMode::off, tau), exp);
        auto reg = run_experiment(task, make_steering(SteeringMode::regulated, tau), exp);
        auto q = run_experiment(task, make_steering(SteeringMode::q_only, tau), exp);
        off_h += off.summary.hallucinated_tokens;
        off_n += off.summary.object_tokens;
        reg_h += reg.summary.hallucinated_tokens;
        reg_n += reg.summary.object_tokens;
        q_h += q.summary.hallucinated_tokens;
        q_n += q.summary.object_tokens;
        off_recall += off.summary.object_recall / 3.0;
        reg_recall += reg.summary.object_recall / 3.0;
        off_runs_out.push_back(std::move(off));
    }
    const double r_off = double(off_h) / double(off_n);
    const double r_reg = double(reg_h) / double(reg_n);
    const double r_q = double(q_h) / double(q_n);
    if (r_reg > 0.8 * r_off)
        out.fail("relative reduction below 20%: off " + format_double(r_off) + " reg " +
                 format_double(r_reg));
    if (reg_recall < off_recall - 0.03)
        out.fail("recall dropped more than 3 points");
    if (r_reg > r_q)
        out.fail("x-steering rate " + format_double(r_reg) + " above q-steering " +
                 format_double(r_q));
    std::ostringstream os;
    os << "pooled rates: off " << format_double(r_off) << ", regulated " << format_double(r_reg)
       << " (-" << format_double(100.0 * (1.0 - r_reg / r_off)) << "%), q_only "
       << format_double(r_q) << "; recall " << format_double(off_recall) << " -> "
       << format_double(reg_recall);
    out.note(os.str());
    return out;
}

// ---------------------------------------------------------------------------
// 8. Barrier-bin ordering with non-overlapping Wilson intervals.

Outcome criterion_binning(const std::vector<ExperimentResult>& off_runs) {
    Outcome out;
    std::vector<DecodeTrace> pooled;
    for (const auto& r : off_runs)
        for (const auto& t : r.traces) pooled.push_back(t);
    if (pooled.empty()) {
        out.fail("no unsteered traces available");
        return out;
    }
    const BinReport bins = bin_analysis(pooled, 9);
    const auto& lo_bin = bins.bins.front();
    const auto& hi_bin = bins.bins.back();
    if (!(lo_bin.rate > hi_bin.rate)) out.fail("lowest bin rate not above highest");
    if (!(lo_bin.lo > hi_bin.hi)) out.fail("Wilson intervals overlap");
    out.note("bin1 " + format_double(lo_bin.rate) + " [" + format_double(lo_bin.lo) + "," +
             format_double(lo_bin.hi) + "] vs bin9 " + format_double(hi_bin.rate) + " [" +
             format_double(hi_bin.lo) + "," + format_double(hi_bin.hi) + "]");
    return out;
}

// ---------------------------------------------------------------------------
// 9. Complexity scaling and throughput ratio.

Outcome criterion_throughput() {
    Outcome out;
    const ThroughputResult r = throughput_bench();
    if (r.r_squared < 0.9)
        out.fail("overhead scaling R^2 " + format_double(r.r_squared) + " < 0.9");
    if (r.slope_us_per_layer <= 0.0) out.fail("overhead slope not positive");
    if (r.ratio < 0.6) out.fail("throughput ratio " + format_double(r.ratio) + " < 0.6");
    if (r.ratio > 1.05) out.fail("throughput ratio " + format_double(r.ratio) + " > 1.05");
    if (std::abs(r.selfcheck_ratio - 1.0) > 0.05)
        out.fail("off-vs-off selfcheck outside 5%: " + format_double(r.selfcheck_ratio));
    std::ostringstream os;
    os << "ratio " << format_double(r.ratio) << ", selfcheck "
       << format_double(r.selfcheck_ratio) << ", R^2 " << format_double(r.r_squared) << ", slope "
       << format_double(r.slope_us_per_layer) << " us/layer";
    out.note(os.str());
    return out;
}

// ---------------------------------------------------------------------------
// 10. Statistical plumbing: Wilson intervals and balanced bins.

Outcome criterion_stats() {
    Outcome out;
    Rng rng(75);
    for (int i = 0; i < 50; ++i) {
        const long n = 1 + static_cast<long>(rng.below(20000));
        const long k = static_cast<long>(rng.below(static_cast<std::uint64_t>(n) + 1));
        const double z = 1.96;
        const double p = double(k) / double(n);
        const double a = 1.0 + z * z / double(n);
        const double b = -(2.0 * p + z * z / double(n));
        const double c = p * p;
        const double disc = std::sqrt(b * b - 4.0 * a * c);
        const double lo = std::max(0.0, std::min((-b - disc) / (2.0 * a), p));
        const double hi = std::min(1.0, std::max((-b + disc) / (2.0 * a), p));
        const WilsonInterval w = wilson_interval(k, n);
        if (std::abs(w.lo - lo) > 1e-10 || std::abs(w.hi - hi) > 1e-10)
            out.fail("wilson mismatch at k=" + std::to_string(k) + " n=" + std::to_string(n));
    }
    for (int trial = 0; trial < 30; ++trial) {
        const int n = 9 + static_cast<int>(rng.below(1000));
        DecodeTrace t;
        for (int i = 0; i < n; ++i) {
            StepRecord s;
            s.step = i;
            s.token = 0;
            s.is_object = true;
            s.label = 0;
            StepLayerRecord l;
            l.layer = 0;
            l.h = rng.gaussian();
            s.layers.push_back(l);
            t.steps.push_back(std::move(s));
        }
        const BinReport bins = bin_analysis({t}, 9);
        long lo = 1L << 40, hi = 0;
        for (const auto& b : bins.bins) {
            lo = std::min(lo, b.count);
            hi = std::max(hi, b.count);
        }
        if (hi - lo > 1) out.fail("bin counts unbalanced");
    }
    out.note("50 Wilson pairs to 1e-10; 30 random bin splits balanced to +-1");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    auto wanted = [&](int id) { return only.empty() || only.count(id) > 0; };

    struct Row {
        int id;
        const char* name;
        double limit_s;
        Outcome outcome;
        double seconds = 0.0;
        bool ran = false;
    };
    std::vector<ExperimentResult> off_runs;
    std::vector<Row> rows = {
        {1, "KKT/minimum-norm correctness", 5.0, {}, 0.0, false},
        {2, "exact constraint restoration", 60.0, {}, 0.0, false},
        {3, "gradient correctness and prompt-constancy", 0.0, {}, 0.0, false},
        {4, "cache consistency and hook locality", 0.0, {}, 0.0, false},
        {5, "gate selectivity", 0.0, {}, 0.0, false},
        {6, "correction adaptivity", 0.0, {}, 0.0, false},
        {7, "directional hallucination reduction", 300.0, {}, 0.0, false},
        {8, "barrier-bin ordering with Wilson separation", 0.0, {}, 0.0, false},
        {9, "complexity scaling and throughput", 120.0, {}, 0.0, false},
        {10, "statistical plumbing", 0.0, {}, 0.0, false},
    };

    for (auto& row : rows) {
        if (!wanted(row.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        switch (row.id) {
            case 1: row.outcome = criterion_kkt(); break;
            case 2: row.outcome = criterion_restoration(); break;
            case 3: row.outcome = criterion_gradient(); break;
            case 4: row.outcome = criterion_cache(); break;
            case 5: row.outcome = criterion_selectivity(); break;
            case 6: row.outcome = criterion_adaptivity(); break;
            case 7: row.outcome = criterion_reduction(off_runs); break;
            case 8:
                if (off_runs.empty() && wanted(7)) {
                    row.outcome.fail("criterion 7 produced no unsteered traces");
                } else if (off_runs.empty()) {
                    // standalone invocation: build the unsteered runs here
                    std::vector<ExperimentResult> local;
                    Outcome tmp = criterion_reduction(local);
                    (void)tmp;
                    row.outcome = criterion_binning(local);
                    break;
                }
                row.outcome = criterion_binning(off_runs);
                break;
            case 9: row.outcome = criterion_throughput(); break;
            case 10: row.outcome = criterion_stats(); break;
        }
        row.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (row.limit_s > 0.0 && row.seconds > row.limit_s)
            row.outcome.fail("runtime " + format_double(row.seconds) + " s exceeds " +
                             format_double(row.limit_s) + " s");
        row.ran = true;
        std::printf("[%s] %2d. %s (%.1f s)%s%s\n", row.outcome.pass ? "PASS" : "FAIL", row.id,
                    row.name, row.seconds, row.outcome.detail.empty() ? "" : " -- ",
                    row.outcome.detail.c_str());
        std::fflush(stdout);
    }

    int failures = 0;
    for (const auto& row : rows)
        if (row.ran && !row.outcome.pass) ++failures;
    std::printf("%d criterion(s) failed\n", failures);
    return failures;
}
