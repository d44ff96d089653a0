#pragma once

// Run configuration: one JSON document {model, task, steering, experiment}.
// Every field has a default; unknown fields are an error so a typo in a
// hyperparameter name fails loudly instead of silently running defaults.

#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "bracs/experiment.hpp"
#include "bracs/task.hpp"

namespace bracs {

struct RunConfig {
    std::uint64_t seed = 1;
    TaskConfig task;
    SteeringConfig steering;
    bool tau_auto = true;  // true until the config pins tau explicitly
    ExperimentConfig experiment;
    int bins = 9;

    RunConfig() {
        steering.mode = SteeringMode::regulated;
        steering.steered_layers = {2, 3, 4};
    }
};

namespace detail_config {

inline void expect_keys(const nlohmann::json& j, const std::string& section,
                        const std::set<std::string>& allowed) {
    if (!j.is_object())
        throw std::invalid_argument("config: section '" + section + "' must be an object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key))
            throw std::invalid_argument("config: unknown field '" + key + "' in section '" +
                                        section + "'");
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail_config

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using detail_config::expect_keys;
    using detail_config::read;

    RunConfig cfg;
    expect_keys(j, "(root)", {"seed", "model", "task", "steering", "experiment"});
    read(j, "seed", cfg.seed);

    if (j.contains("model")) {
        const auto& m = j.at("model");
        expect_keys(m, "model", {"layers", "heads", "width", "ffn_width", "max_seq"});
        read(m, "layers", cfg.task.layers);
        read(m, "heads", cfg.task.heads);
        read(m, "width", cfg.task.width);
        read(m, "ffn_width", cfg.task.ffn_width);
        read(m, "max_seq", cfg.task.max_seq);
    }
    if (j.contains("task")) {
        const auto& t = j.at("task");
        expect_keys(t, "task",
                    {"v_obj", "objects_per_image", "prior_size", "prior_bias", "drift_rate"});
        read(t, "v_obj", cfg.task.v_obj);
        read(t, "objects_per_image", cfg.task.objects_per_image);
        read(t, "prior_size", cfg.task.prior_size);
        read(t, "prior_bias", cfg.task.prior_bias);
        read(t, "drift_rate", cfg.task.drift_rate);
    }
    if (j.contains("steering")) {
        const auto& s = j.at("steering");
        expect_keys(s, "steering", {"mode", "tau", "alpha", "epsilon", "steered_layers"});
        if (s.contains("mode")) cfg.steering.mode = steering_mode_from_string(s.at("mode"));
        if (s.contains("tau") && !s.at("tau").is_null()) {
            cfg.steering.tau = s.at("tau").get<double>();
            cfg.tau_auto = false;
        }
        read(s, "alpha", cfg.steering.alpha);
        read(s, "epsilon", cfg.steering.epsilon);
        read(s, "steered_layers", cfg.steering.steered_layers);
    }
    if (j.contains("experiment")) {
        const auto& e = j.at("experiment");
        expect_keys(e, "experiment",
                    {"n_prompts", "max_new", "policy", "top_p", "temperature", "sample_seed",
                     "threads", "bins"});
        read(e, "n_prompts", cfg.experiment.n_prompts);
        read(e, "max_new", cfg.experiment.max_new);
        if (e.contains("policy")) {
            const std::string p = e.at("policy").get<std::string>();
            if (p == "greedy")
                cfg.experiment.policy.kind = SamplePolicy::Kind::greedy;
            else if (p == "top_p")
                cfg.experiment.policy.kind = SamplePolicy::Kind::top_p;
            else
                throw std::invalid_argument("config: unknown policy '" + p + "'");
        }
        read(e, "top_p", cfg.experiment.policy.top_p);
        read(e, "temperature", cfg.experiment.policy.temperature);
        read(e, "sample_seed", cfg.experiment.sample_seed);
        read(e, "threads", cfg.experiment.threads);
        read(e, "bins", cfg.bins);
    }

    cfg.task.validate();
    return cfg;
}

// The full default document; dumping it is the reference for every field.
inline nlohmann::json default_run_config_json() {
    RunConfig d;
    nlohmann::json j;
    j["seed"] = d.seed;
    j["model"] = {{"layers", d.task.layers},
                  {"heads", d.task.heads},
                  {"width", d.task.width},
                  {"ffn_width", d.task.ffn_width},
                  {"max_seq", d.task.max_seq}};
    j["task"] = {{"v_obj", d.task.v_obj},
                 {"objects_per_image", d.task.objects_per_image},
                 {"prior_size", d.task.prior_size},
                 {"prior_bias", d.task.prior_bias},
                 {"drift_rate", d.task.drift_rate}};
    j["steering"] = {{"mode", to_string(d.steering.mode)},
                     {"tau", nullptr},  // null selects prefill-percentile calibration
                     {"alpha", d.steering.alpha},
                     {"epsilon", d.steering.epsilon},
                     {"steered_layers", d.steering.steered_layers}};
    j["experiment"] = {{"n_prompts", d.experiment.n_prompts},
                       {"max_new", d.experiment.max_new},
                       {"policy", "greedy"},
                       {"top_p", d.experiment.policy.top_p},
                       {"temperature", d.experiment.policy.temperature},
                       {"sample_seed", d.experiment.sample_seed},
                       {"threads", d.experiment.threads},
                       {"bins", d.bins}};
    return j;
}

}  // namespace bracs
