#pragma once

// Synthetic grounding task. Builds a toy decoder whose weights realize, by
// construction, the phenomenon the steering engine targets:
//
//   * each prompt carries m image tokens, one per object, tagged by a shared
//     image direction; object identity lives in an orthonormal frame;
//   * first-layer keys pass image embeddings through, and the value/output
//     path routes attended image content onto the matching object logits;
//   * decode-step queries carry a global image probe that a positional drift
//     schedule rotates away from the image keys, so the grounding barrier
//     decays as generation proceeds;
//   * a slot selector cycles decode steps over image positions, so a
//     grounded step names that slot's object;
//   * the FFN adds a constant bias to a fixed "popular" subset of the object
//     vocabulary, which wins exactly when image attention has decayed: the
//     hallucination source;
//   * an EOS readout ramps with the step index and ends the caption.
//
// Every direction is orthogonal to the all-ones vector, so layer norm acts
// as a pure rescaling and the construction survives the pre-norm stack.
// Hallucination labels are exact: an emitted object token outside the
// prompt's object set is hallucinated, by definition.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "bracs/model.hpp"
#include "bracs/numeric.hpp"

namespace bracs {

struct TaskConfig {
    int v_obj = 32;            // object vocabulary size
    int objects_per_image = 8; // m: objects (and image tokens) per prompt
    int prior_size = 6;        // |P|: tokens favored by the constant bias
    double prior_bias = 0.45;  // strength of the popular-prior pathway
    double drift_rate = 0.10;  // radians per decode step of query rotation

    // Model dimensions for the task-aware decoder.
    int layers = 6;
    int heads = 4;
    int width = 64;
    int ffn_width = 128;
    int max_seq = 96;

    void validate() const {
        if (v_obj < 2) throw std::invalid_argument("TaskConfig: v_obj must be >= 2");
        if (objects_per_image < 1 || objects_per_image > v_obj)
            throw std::invalid_argument("TaskConfig: objects_per_image out of range");
        if (prior_size < 0 || prior_size > v_obj)
            throw std::invalid_argument("TaskConfig: prior_size out of range");
        if (drift_rate < 0.0) throw std::invalid_argument("TaskConfig: drift_rate must be >= 0");
        if (prior_bias < 0.0) throw std::invalid_argument("TaskConfig: prior_bias must be >= 0");
        const int head_width = width / heads;
        if (width % heads != 0) throw std::invalid_argument("TaskConfig: width % heads != 0");
        if (objects_per_image + 2 > head_width)
            throw std::invalid_argument("TaskConfig: head width too small for slot channels");
        if ((v_obj + heads - 1) / heads > head_width)
            throw std::invalid_argument("TaskConfig: head width too small for object routing");
        // Frame budget: objects + 2m slots + 9 special + >=1 filler, all
        // orthogonal to the all-ones direction.
        if (v_obj + 2 * objects_per_image + 10 > width)
            throw std::invalid_argument("TaskConfig: width too small for the direction frame");
    }
};

// Fixed construction scales. These are build constants of the synthetic
// geometry, not experiment knobs; the experiment-level knobs are prior_bias
// and drift_rate in TaskConfig.
struct TaskGeometry {
    double image_obj = 1.0;    // object content of an image embedding
    double image_tag = 1.0;    // shared image-tag content
    double slot_key = 2.0;     // per-position slot key content (image positions)
    double slot_self = 2.0;    // image-position self-lock (keeps prefill object content clean)
    double probe = 1.5;        // global image probe in decode-position rows
    double slot_query = 2.5;   // slot selector in decode-position rows (decays with drift)
    double anchor = 0.8;       // constant FFN trigger in decode-position rows
    double bos_query = 0.4;    // BOS-matching query content
    double bos_key = 1.0;      // BOS key content (BOS embedding)
    double emit = 0.6;         // repetition inhibition: emitted tokens carry -emit * obj dir
    double echo = 0.2;         // image-probe leak into the image-match key channel
    double yield_back = 1.2;   // corrected steps repel the constant BOS-channel query,
                               // handing their attention share back to the image
    double value_route = 1.0;  // object content -> head value channels
    double out_route = 0.3;    // head value channels -> readout frame
    double readout = 8.0;      // object logit readout
    double prior_readout = 3.0;
    double eos_readout = 6.0;
    double ffn_gate = 1.0;     // anchor detector gain in the FFN
    double readout_jitter = 0.15;  // per-object readout spread (margin diversity)
    double prior_jitter = 0.10;    // per-member prior readout spread
    double eos_slope = 0.2;    // EOS ramp per step past eos_start
    int eos_start = 13;
    int drift_offset = 2;      // schedule starts this many steps into the rotation
};

struct SyntheticTask {
    TaskConfig config;
    TaskGeometry geometry;
    std::uint64_t seed = 0;
    Model model;
    std::vector<int> prior_set;  // sorted token ids in P
    int bos_id = 0;
    int eos_id = 0;

    // Direction frame (rows of an orthonormal set, all orthogonal to 1).
    std::vector<Vector> obj_dirs;      // v_obj
    std::vector<Vector> slot_dirs;     // m (image-position keys)
    std::vector<Vector> slotsel_dirs;  // m (decode-step slot queries)
    Vector image_tag, qimg, drift, drift2, anchor, prior, eos, bos_key, bos_query;

    bool is_object_token(int token) const { return token >= 0 && token < config.v_obj; }
    bool in_prior(int token) const {
        return std::binary_search(prior_set.begin(), prior_set.end(), token);
    }

    struct Prompt {
        std::vector<int> object_set;           // sorted, size m
        std::vector<int> object_order;         // image slot order
        std::vector<Vector> image_embeddings;  // size m
        std::vector<int> text_tokens;          // {BOS}
    };

    // Deterministic per-index prompt: which objects are in the image and in
    // which slot order.
    Prompt make_prompt(std::uint64_t index) const {
        Rng rng(seed * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull * (index + 1));
        Prompt p;
        p.object_order = sample_distinct(rng, config.v_obj, config.objects_per_image);
        p.object_set = p.object_order;
        std::sort(p.object_set.begin(), p.object_set.end());
        for (int v : p.object_order) {
            Vector e = scaled(obj_dirs[v], geometry.image_obj);
            axpy(e, geometry.image_tag, image_tag);
            p.image_embeddings.push_back(std::move(e));
        }
        p.text_tokens = {bos_id};
        return p;
    }

    static std::vector<int> sample_distinct(Rng& rng, int population, int count) {
        std::vector<int> pool(population);
        for (int i = 0; i < population; ++i) pool[i] = i;
        std::vector<int> out;
        for (int i = 0; i < count; ++i) {
            const std::size_t j = i + rng.below(population - i);
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }
};

namespace detail {

// Orthonormal directions orthogonal to the all-ones vector, from seeded
// Gaussians via Gram-Schmidt.
inline std::vector<Vector> orthonormal_frame(Rng& rng, int count, int width) {
    std::vector<Vector> basis;
    Vector ones(width, 1.0 / std::sqrt(static_cast<double>(width)));
    basis.push_back(ones);  // excluded from the returned frame
    std::vector<Vector> frame;
    int guard = 0;
    while (static_cast<int>(frame.size()) < count) {
        if (++guard > count * 20)
            throw std::runtime_error("orthonormal_frame: failed to fill the frame");
        Vector v = seeded_gaussian(rng, width);
        for (const Vector& b : basis) axpy(v, -dot(v, b), b);
        const double n = norm(v);
        if (n < 1e-6) continue;
        for (double& x : v) x /= n;
        basis.push_back(v);
        frame.push_back(basis.back());
    }
    return frame;
}

inline void set_row(Matrix& m, std::size_t row, const Vector& v, double scale) {
    for (std::size_t c = 0; c < m.cols; ++c) m.at(row, c) = v[c] * scale;
}

inline void add_row(Matrix& m, std::size_t row, const Vector& v, double scale) {
    for (std::size_t c = 0; c < m.cols; ++c) m.at(row, c) += v[c] * scale;
}

inline void set_col(Matrix& m, std::size_t col, const Vector& v, double scale) {
    for (std::size_t r = 0; r < m.rows; ++r) m.at(r, col) = v[r] * scale;
}

}  // namespace detail

// Prompt round-trip: image "tokens" are raw embedding vectors plus the text
// token ids, which is everything a decode needs besides the model document.
inline nlohmann::json prompt_to_json(const SyntheticTask::Prompt& p) {
    nlohmann::json j;
    j["object_set"] = p.object_set;
    j["object_order"] = p.object_order;
    j["image_embeddings"] = p.image_embeddings;
    j["text_tokens"] = p.text_tokens;
    return j;
}

inline SyntheticTask::Prompt prompt_from_json(const nlohmann::json& j) {
    SyntheticTask::Prompt p;
    p.object_set = j.at("object_set").get<std::vector<int>>();
    p.object_order = j.at("object_order").get<std::vector<int>>();
    p.image_embeddings = j.at("image_embeddings").get<std::vector<Vector>>();
    p.text_tokens = j.at("text_tokens").get<std::vector<int>>();
    return p;
}

inline SyntheticTask build_synthetic_task(std::uint64_t seed, const TaskConfig& config = {},
                                          const TaskGeometry& geometry = {}) {
    config.validate();
    SyntheticTask task;
    task.config = config;
    task.geometry = geometry;
    task.seed = seed;

    const int d = config.width;
    const int heads = config.heads;
    const int hw = d / heads;
    const int m = config.objects_per_image;
    const int v_obj = config.v_obj;

    Rng rng(seed);
    const int n_special = 9;
    const int n_named = v_obj + 2 * m + n_special;
    const int n_fillers = std::min(d - 1 - n_named, 4);
    auto frame = detail::orthonormal_frame(rng, n_named + n_fillers, d);

    int at = 0;
    for (int v = 0; v < v_obj; ++v) task.obj_dirs.push_back(frame[at++]);
    for (int s = 0; s < m; ++s) task.slot_dirs.push_back(frame[at++]);
    for (int s = 0; s < m; ++s) task.slotsel_dirs.push_back(frame[at++]);
    task.image_tag = frame[at++];
    task.qimg = frame[at++];
    task.drift = frame[at++];
    task.drift2 = frame[at++];
    task.anchor = frame[at++];
    task.prior = frame[at++];
    task.eos = frame[at++];
    task.bos_key = frame[at++];
    task.bos_query = frame[at++];
    std::vector<Vector> fillers(frame.begin() + at, frame.end());

    // Popular-prior subset, fixed per task.
    Rng prior_rng(seed ^ 0xA24BAED4963EE407ull);
    task.prior_set = SyntheticTask::sample_distinct(prior_rng, v_obj, config.prior_size);
    std::sort(task.prior_set.begin(), task.prior_set.end());

    task.bos_id = v_obj;
    task.eos_id = v_obj + 1;

    // ---- model -----------------------------------------------------------
    Model& model = task.model;
    model.config.layers = config.layers;
    model.config.heads = heads;
    model.config.width = d;
    model.config.head_width = hw;
    model.config.ffn_width = config.ffn_width;
    model.config.vocab = v_obj + 2;
    model.config.max_seq = config.max_seq;
    model.config.seed = seed;
    model.config.validate();

    // Q/K head channels: 0 = global image match, 1..m = slot match,
    // m+1 = BOS match. V channels: object group (v % heads -> channel v/heads).
    LayerWeights lw;
    for (int head = 0; head < heads; ++head) {
        Matrix wq(hw, d), wk(hw, d), wv(hw, d);
        detail::set_row(wq, 0, task.qimg, 1.0);
        detail::set_row(wk, 0, task.image_tag, 1.0);
        detail::add_row(wk, 0, task.qimg, geometry.echo);
        for (int s = 0; s < m; ++s) {
            detail::set_row(wq, 1 + s, task.slotsel_dirs[s], 1.0);
            detail::set_row(wk, 1 + s, task.slot_dirs[s], 1.0);
        }
        detail::set_row(wq, m + 1, task.bos_query, 1.0);
        detail::set_row(wk, m + 1, task.bos_key, 1.0);
        // A corrected step carries extra image-probe content; reading it
        // negatively into the constant BOS key channel makes corrected steps
        // stop competing with the image for future attention. This is the
        // pathway that rewards a cache consistent with the correction.
        detail::add_row(wk, m + 1, task.qimg, -geometry.yield_back);
        for (int v = head; v < v_obj; v += heads)
            detail::set_row(wv, v / heads, task.obj_dirs[v], geometry.value_route);
        lw.w_q.push_back(std::move(wq));
        lw.w_k.push_back(std::move(wk));
        lw.w_v.push_back(std::move(wv));
    }
    lw.w_o = Matrix(d, static_cast<std::size_t>(heads) * hw);
    for (int v = 0; v < v_obj; ++v) {
        const std::size_t col = static_cast<std::size_t>(v % heads) * hw + v / heads;
        detail::set_col(lw.w_o, col, task.obj_dirs[v], geometry.out_route);
    }
    lw.w_ff1 = Matrix(config.ffn_width, d);
    detail::set_row(lw.w_ff1, 0, task.anchor, geometry.ffn_gate);
    lw.w_ff2 = Matrix(d, config.ffn_width);
    detail::set_col(lw.w_ff2, 0, task.prior, config.prior_bias);
    lw.norm1_gain.assign(d, 1.0);
    lw.norm2_gain.assign(d, 1.0);
    model.layers.assign(config.layers, lw);

    // Token embeddings: an emitted object token re-enters the stream as the
    // negative of its own readout direction, which suppresses immediate
    // repeats directly and, through the value path of later attention,
    // keeps already-mentioned objects inhibited. BOS carries the key the
    // constant BOS query matches.
    model.embedding = Matrix(model.config.vocab, d);
    for (int v = 0; v < v_obj; ++v)
        for (int i = 0; i < d; ++i) model.embedding.at(v, i) = -task.obj_dirs[v][i] * geometry.emit;
    for (int i = 0; i < d; ++i) model.embedding.at(task.bos_id, i) = task.bos_key[i] * geometry.bos_key;
    {
        const Vector& f = fillers[task.eos_id % fillers.size()];
        for (int i = 0; i < d; ++i) model.embedding.at(task.eos_id, i) = f[i] * geometry.emit;
    }

    // Positional rows. Image positions carry slot keys; the BOS position and
    // decode positions follow the drift schedule t = position - m.
    model.positional = Matrix(config.max_seq, d);
    for (int p = 0; p < config.max_seq; ++p) {
        Vector row(d, 0.0);
        if (p < m) {
            axpy(row, geometry.slot_key, task.slot_dirs[p]);
            // Self-lock: image positions attend to themselves during prefill,
            // so each image residual amplifies its own object and nothing else.
            axpy(row, geometry.slot_self, task.slotsel_dirs[p]);
        } else {
            const int t = p - m;
            const double angle =
                config.drift_rate * static_cast<double>(t + geometry.drift_offset);
            // The whole image-directed query rotates away: global probe and
            // slot selector decay together, which is what makes late steps
            // both weakly grounded and unselective.
            axpy(row, geometry.probe * std::cos(angle), task.qimg);
            axpy(row, geometry.probe * std::sin(angle), task.drift);
            axpy(row, geometry.slot_query * std::cos(angle), task.slotsel_dirs[t % m]);
            axpy(row, geometry.slot_query * std::sin(angle), task.drift2);
            axpy(row, geometry.anchor, task.anchor);
            axpy(row, geometry.bos_query, task.bos_query);
            if (t > geometry.eos_start)
                axpy(row, geometry.eos_slope * static_cast<double>(t - geometry.eos_start),
                     task.eos);
        }
        for (int i = 0; i < d; ++i) model.positional.at(p, i) = row[i];
    }

    // Readout head: object rows read the object frame (plus the prior
    // direction for P members); EOS reads the ramp. Per-token jitter spreads
    // the logit margins so ties and flips vary across objects and prompts.
    Rng jitter_rng(seed ^ 0x6C62272E07BB0142ull);
    model.output = Matrix(model.config.vocab, d);
    for (int v = 0; v < v_obj; ++v) {
        const double jr = 1.0 + geometry.readout_jitter * (2.0 * jitter_rng.uniform() - 1.0);
        detail::set_row(model.output, v, task.obj_dirs[v], geometry.readout * jr);
        if (task.in_prior(v)) {
            const double jp = 1.0 + geometry.prior_jitter * (2.0 * jitter_rng.uniform() - 1.0);
            detail::add_row(model.output, v, task.prior, geometry.prior_readout * jp);
        }
    }
    detail::set_row(model.output, task.eos_id, task.eos, geometry.eos_readout);
    model.final_norm_gain.assign(d, 1.0);

    return task;
}

}  // namespace bracs
