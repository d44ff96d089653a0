// Command-line front end: selftest, decode, run, ablate, bench, analyze.
// Exit codes: 0 success, 1 configuration error, 2 numeric error, 3 I/O error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bracs/bracs.hpp"

namespace {

using namespace bracs;

RunConfig load_config(const std::string& path) {
    if (path.empty()) return RunConfig{};
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config parse error in " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

struct Overrides {
    std::optional<std::string> mode;
    std::optional<double> tau;
    std::optional<double> alpha;
    std::optional<std::uint64_t> seed;
    std::optional<int> n_prompts;
};

void apply_overrides(RunConfig& cfg, const Overrides& ov) {
    if (ov.mode) cfg.steering.mode = steering_mode_from_string(*ov.mode);
    if (ov.tau) {
        cfg.steering.tau = *ov.tau;
        cfg.tau_auto = false;
    }
    if (ov.alpha) cfg.steering.alpha = *ov.alpha;
    if (ov.seed) cfg.seed = *ov.seed;
    if (ov.n_prompts) cfg.experiment.n_prompts = *ov.n_prompts;
}

SyntheticTask prepare_task(RunConfig& cfg) {
    SyntheticTask task = build_synthetic_task(cfg.seed, cfg.task);
    if (cfg.tau_auto && cfg.steering.mode != SteeringMode::off)
        cfg.steering.tau = calibrate_tau(task, cfg.steering.steered_layers);
    cfg.steering.validate(task.model.config.layers);
    return task;
}

// ---------------------------------------------------------------------------

int cmd_selftest() {
    int failures = 0;
    auto check = [&](const char* name, bool ok) {
        std::printf("[%s] %s\n", ok ? "ok" : "FAIL", name);
        if (!ok) ++failures;
    };

    {  // closed-form QP vs iterative solver
        Rng rng(11);
        bool ok = true;
        for (int trial = 0; trial < 200 && ok; ++trial) {
            Vector gv = seeded_gaussian(rng, 64);
            BarrierGradient g{gv, dot(gv, gv), 0.0};
            const double h = rng.gaussian() * 3.0, tau = rng.gaussian() * 3.0;
            const Correction c = solve_correction(h, g, tau, 0.0);
            if (h >= tau) {
                ok = c.theta == Vector(64, 0.0);
                continue;
            }
            const Vector oracle = qp_oracle(h, gv, tau, 2000);
            for (int i = 0; i < 64; ++i)
                if (std::abs(c.theta[i] - oracle[i]) > 1e-8 * std::max(1.0, norm(oracle)))
                    ok = false;
            if (c.lambda < 0.0) ok = false;
            if (std::abs(c.lambda * (dot(gv, c.theta) - (tau - h))) > 1e-10) ok = false;
        }
        check("closed-form correction matches iterative QP solver (KKT certified)", ok);
    }
    {  // exact restoration
        Rng rng(12);
        bool ok = true;
        for (int trial = 0; trial < 200 && ok; ++trial) {
            Vector gv = seeded_gaussian(rng, 48);
            BarrierGradient g{gv, dot(gv, gv), 0.0};
            Vector x = seeded_gaussian(rng, 48);
            const double h = barrier_value(g, x);
            const double tau = h + 0.1 + std::abs(rng.gaussian());
            const Vector xs = apply_steering(x, solve_correction(h, g, tau, 0.0), 1.0);
            if (std::abs(barrier_value(g, xs) - tau) > 1e-9 * std::abs(tau)) ok = false;
        }
        check("steering restores the barrier to tau exactly (alpha=1, eps=0)", ok);
    }
    {  // closed-form gradient vs finite differences on a random decoder
        ModelConfig mc;
        mc.layers = 2;
        mc.heads = 4;
        mc.width = 32;
        mc.head_width = 8;
        mc.vocab = 8;
        mc.max_seq = 16;
        mc.seed = 3;
        Model model = init_model(mc);
        Rng rng(13);
        std::vector<Vector> images;
        for (int i = 0; i < 4; ++i) images.push_back(seeded_gaussian(rng, 32));
        PrefillResult pre = prefill(model, {0}, images, {0, 1});
        bool ok = true;
        for (const auto& b : pre.ctx.barriers) {
            Vector x = seeded_gaussian(rng, 32);
            for (int i = 0; i < 32 && ok; ++i) {
                Vector hi(x), lo(x);
                hi[i] += 1e-6;
                lo[i] -= 1e-6;
                const double fd =
                    (barrier_direct(hi, model.layers[b.layer], pre.cache, pre.ctx.image_indices,
                                    b.layer) -
                     barrier_direct(lo, model.layers[b.layer], pre.cache, pre.ctx.image_indices,
                                    b.layer)) /
                    2e-6;
                if (std::abs(b.grad.g[i] - fd) > 1e-6 * std::max(1e-12, std::abs(b.grad.g[i])))
                    ok = false;
            }
        }
        check("closed-form gradient matches central finite differences", ok);
    }
    {  // cache consistency under forced steering
        SyntheticTask task = build_synthetic_task(5);
        auto prompt = task.make_prompt(0);
        SteeringConfig steer;
        steer.mode = SteeringMode::regulated;
        steer.steered_layers = {2, 3, 4};
        steer.tau = 1e6;
        steer.epsilon = 0.0;
        PrefillResult pre =
            prefill(task.model, prompt.text_tokens, prompt.image_embeddings, steer.steered_layers);
        SteeringEngine engine(steer, pre.ctx, true);
        bool ok = true;
        for (int step = 0; step < 4 && ok; ++step) {
            Vector x(task.model.embedding.row(0),
                     task.model.embedding.row(0) + task.model.config.width);
            StepRecord rec;
            decode_step(task.model, pre.cache, x, &engine, &rec);
            const int pos = pre.cache.len - 1;
            for (const auto& l : rec.layers) {
                for (int m = 0; m < task.model.config.heads; ++m) {
                    const Vector k = matvec(task.model.layers[l.layer].w_k[m], l.x_tilde);
                    const double* ck = pre.cache.key(l.layer, pos, m);
                    for (int i = 0; i < task.model.config.head_width; ++i)
                        if (std::abs(k[i] - ck[i]) > 1e-12) ok = false;
                }
            }
        }
        check("cached K/V equal the projections of the steered input", ok);
    }
    {  // gate-off equivalence
        SyntheticTask task = build_synthetic_task(6);
        auto prompt = task.make_prompt(1);
        SteeringConfig off;
        off.mode = SteeringMode::off;
        off.steered_layers = {2, 3, 4};
        SteeringConfig never = off;
        never.mode = SteeringMode::regulated;
        never.tau = -1e9;
        SamplePolicy greedy;
        const auto a =
            generate(task.model, prompt.text_tokens, prompt.image_embeddings, off, greedy, 16);
        const auto b =
            generate(task.model, prompt.text_tokens, prompt.image_embeddings, never, greedy, 16);
        check("regulated gate below the barrier minimum is token-identical to off",
              a.tokens == b.tokens);
    }
    {  // Wilson interval vs quadratic-root evaluation
        bool ok = true;
        for (long n : {1L, 7L, 10L, 100L, 5000L}) {
            for (long k = 0; k <= n; k += std::max(1L, n / 7)) {
                const WilsonInterval w = wilson_interval(k, n);
                const double z = 1.96, p = double(k) / double(n);
                const double a = 1.0 + z * z / double(n);
                const double b = -(2.0 * p + z * z / double(n));
                const double c = p * p;
                const double disc = std::sqrt(b * b - 4.0 * a * c);
                const double lo = std::max(0.0, (-b - disc) / (2.0 * a));
                const double hi = std::min(1.0, (-b + disc) / (2.0 * a));
                if (std::abs(w.lo - lo) > 1e-10 || std::abs(w.hi - hi) > 1e-10) ok = false;
            }
        }
        check("wilson interval matches independent quadratic-root evaluation", ok);
    }

    std::printf("%s\n", failures == 0 ? "selftest: all checks passed"
                                      : "selftest: FAILURES detected");
    return failures == 0 ? 0 : 1;
}

int cmd_decode(RunConfig cfg, int prompt_index) {
    SyntheticTask task = prepare_task(cfg);
    const auto prompt = task.make_prompt(static_cast<std::uint64_t>(prompt_index));
    Rng sample_rng(cfg.experiment.sample_seed);
    GenerateResult gen = generate(task.model, prompt.text_tokens, prompt.image_embeddings,
                                  cfg.steering, cfg.experiment.policy, cfg.experiment.max_new,
                                  &sample_rng, task.eos_id);
    label_trace(gen.trace, task, prompt);

    std::printf("prompt %d | objects:", prompt_index);
    for (int v : prompt.object_order) std::printf(" %d", v);
    std::printf(" | prior set:");
    for (int v : task.prior_set) std::printf(" %d", v);
    std::printf("\nmode=%s tau=%s alpha=%s\n", to_string(cfg.steering.mode),
                format_double(cfg.steering.tau).c_str(),
                format_double(cfg.steering.alpha).c_str());
    std::printf("%5s %6s %12s %10s %7s %10s\n", "step", "token", "status", "barrier", "fired",
                "theta");
    for (const auto& s : gen.trace.steps) {
        int fired = 0;
        double theta = 0.0;
        for (const auto& l : s.layers) {
            if (l.fired) ++fired;
            theta += l.theta_norm;
        }
        const char* status = s.token == task.eos_id
                                 ? "eos"
                                 : (s.label == 1 ? "hallucinated"
                                                 : (s.label == 0 ? "grounded" : "-"));
        std::printf("%5d %6d %12s %10.4f %7d %10.4f\n", s.step, s.token, status,
                    s.layers.empty() ? 0.0 : step_barrier(s), fired, theta);
    }
    int hallucinated = 0, objects = 0;
    for (const auto& s : gen.trace.steps)
        if (s.is_object) {
            ++objects;
            hallucinated += s.label == 1;
        }
    std::printf("tokens=%zu object_tokens=%d hallucinated=%d\n", gen.tokens.size(), objects,
                hallucinated);
    return 0;
}

int cmd_run(RunConfig cfg, const std::string& out_dir) {
    SyntheticTask task = prepare_task(cfg);
    ExperimentResult result = run_experiment(task, cfg.steering, cfg.experiment);
    const ReportStatus status = emit_reports(result, out_dir, cfg.bins);
    if (status == ReportStatus::empty_input) {
        std::printf("no traces produced; nothing written\n");
        return 0;
    }
    std::cout << summary_to_json(result.summary, result.steering).dump(2) << "\n";
    std::printf("reports written to %s\n", out_dir.c_str());
    return 0;
}

int cmd_ablate(RunConfig cfg, const std::string& out_dir) {
    SyntheticTask task = prepare_task(cfg);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw io_error("cannot create output directory " + out_dir + ": " + ec.message());
    const auto tables = ablation_suite(task, cfg.steering, cfg.experiment);
    for (const auto& t : tables) {
        const std::string path = out_dir + "/ablation_" + t.name + ".csv";
        write_ablation_csv(t, path);
        std::printf("wrote %s\n", path.c_str());
    }
    return 0;
}

int cmd_bench(RunConfig cfg, const std::string& out_dir, bool quick) {
    BenchConfig bench;
    bench.seed = cfg.seed;
    if (quick) {
        bench.n_runs = 5;
        bench.n_tokens = 20;
    }
    const ThroughputResult r = throughput_bench(bench, cfg.task);
    std::printf("unsteered: %.1f tok/s\nsteered:   %.1f tok/s\nratio:     %.3f\n",
                r.unsteered_tok_s, r.steered_tok_s, r.ratio);
    std::printf("off-vs-off selfcheck ratio: %.3f\n", r.selfcheck_ratio);
    std::printf("overhead scaling (|L_steer| -> us/step):");
    for (const auto& p : r.scaling) std::printf(" %d->%.2f", p.n_steered, p.overhead_us_per_step);
    std::printf("\nlinear fit: %.3f us/layer + %.3f us, R^2 = %.4f\n", r.slope_us_per_layer,
                r.intercept_us, r.r_squared);
    std::printf("per steered layer per step: %ld flops (dot, key sums pre-aggregated); "
                "full projection equivalent: %ld flops\n",
                r.barrier_flops_per_layer, r.matvec_flops_per_layer);

    if (!out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(out_dir, ec);
        if (ec) throw io_error("cannot create output directory " + out_dir + ": " + ec.message());
        nlohmann::json j;
        j["schema_version"] = kSchemaVersion;
        j["unsteered_tok_s"] = r.unsteered_tok_s;
        j["steered_tok_s"] = r.steered_tok_s;
        j["ratio"] = r.ratio;
        j["selfcheck_ratio"] = r.selfcheck_ratio;
        j["resolved_tau"] = r.resolved_tau;
        j["scaling"] = nlohmann::json::array();
        for (const auto& p : r.scaling)
            j["scaling"].push_back(
                {{"n_steered", p.n_steered}, {"overhead_us_per_step", p.overhead_us_per_step}});
        j["slope_us_per_layer"] = r.slope_us_per_layer;
        j["intercept_us"] = r.intercept_us;
        j["r_squared"] = r.r_squared;
        j["barrier_flops_per_layer"] = r.barrier_flops_per_layer;
        j["matvec_flops_per_layer"] = r.matvec_flops_per_layer;
        auto out = open_for_write(out_dir + "/bench.json");
        out << j.dump(2) << "\n";
        write_bars_svg({{"unsteered", r.unsteered_tok_s}, {"steered", r.steered_tok_s}},
                       "Decoding throughput", "tok/s", out_dir + "/throughput.svg");
        std::printf("reports written to %s\n", out_dir.c_str());
    }
    return 0;
}

int cmd_analyze(const std::string& traces_path, const std::string& out_dir, int bins) {
    const auto traces = read_traces_csv(traces_path);
    const BinReport report = bin_analysis(traces, bins);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw io_error("cannot create output directory " + out_dir + ": " + ec.message());
    write_bins_csv(report, out_dir + "/bins.csv");
    write_bins_svg(report, out_dir + "/bins.svg");
    const SelectivityStats sel = selectivity_stats(traces);
    std::printf("%zu prompts, fired fraction %.4f, mean fired layers/step %.3f\n", traces.size(),
                sel.fired_fraction, sel.mean_fired_layers_per_step);
    for (std::size_t b = 0; b < report.bins.size(); ++b)
        std::printf("bin %zu: n=%ld rate=%.4f wilson=[%.4f, %.4f]\n", b + 1, report.bins[b].count,
                    report.bins[b].rate, report.bins[b].lo, report.bins[b].hi);
    std::printf("reports written to %s\n", out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"barrier-regulated adaptive closed-form steering workbench"};
    app.require_subcommand(1);

    std::string config_path, out_dir, traces_path;
    int prompt_index = 0, bins = 9;
    bool quick = false;
    Overrides ov;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON run config (defaults when omitted)");
        cmd->add_option("--mode", ov.mode, "steering mode: off|regulated|continuous|q_only");
        cmd->add_option("--tau", ov.tau, "barrier threshold (overrides calibration)");
        cmd->add_option("--alpha", ov.alpha, "steering strength");
        cmd->add_option("--seed", ov.seed, "task seed");
        cmd->add_option("--prompts", ov.n_prompts, "number of prompts");
    };

    CLI::App* selftest = app.add_subcommand("selftest", "run the oracle/invariant checks");
    (void)selftest;

    CLI::App* decode = app.add_subcommand("decode", "decode one prompt and print its trace");
    add_common(decode);
    decode->add_option("--prompt", prompt_index, "prompt index");

    CLI::App* run = app.add_subcommand("run", "full experiment from config");
    add_common(run);
    run->add_option("--out", out_dir, "output directory")->required();

    CLI::App* ablate = app.add_subcommand("ablate", "hyperparameter grid sweeps");
    add_common(ablate);
    ablate->add_option("--out", out_dir, "output directory")->required();

    CLI::App* bench = app.add_subcommand("bench", "throughput and overhead scaling");
    add_common(bench);
    bench->add_option("--out", out_dir, "output directory");
    bench->add_flag("--quick", quick, "fewer, shorter runs");

    CLI::App* analyze = app.add_subcommand("analyze", "traces.csv -> bin report + plots");
    analyze->add_option("--traces", traces_path, "traces.csv produced by run")->required();
    analyze->add_option("--out", out_dir, "output directory")->required();
    analyze->add_option("--bins", bins, "number of equal-count bins");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (app.got_subcommand("selftest")) return cmd_selftest();
        RunConfig cfg = load_config(config_path);
        apply_overrides(cfg, ov);
        if (app.got_subcommand("decode")) return cmd_decode(std::move(cfg), prompt_index);
        if (app.got_subcommand("run")) return cmd_run(std::move(cfg), out_dir);
        if (app.got_subcommand("ablate")) return cmd_ablate(std::move(cfg), out_dir);
        if (app.got_subcommand("bench")) return cmd_bench(std::move(cfg), out_dir, quick);
        if (app.got_subcommand("analyze")) return cmd_analyze(traces_path, out_dir, bins);
    } catch (const bracs::numeric_error& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 2;
    } catch (const bracs::io_error& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 3;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    }
    return 0;
}
