#pragma once

// Autoregressive forward passes for the toy decoder. Per layer:
//   norm -> (steering hook on the normed attention input) -> Q/K/V
//   -> append K/V to cache -> causal attention over cache -> output
//   projection -> residual add -> norm -> FFN (ReLU) -> residual add
// with logits from the readout head after a final norm. The hook sees the
// post-norm attention input, so a steered vector feeds Q, K, and V together
// and its keys/values are what the cache keeps.

#include <chrono>
#include <optional>
#include <stdexcept>
#include <vector>

#include "bracs/barrier.hpp"
#include "bracs/model.hpp"
#include "bracs/numeric.hpp"

namespace bracs {

// Raised when a forward pass produces non-finite values (CLI exit code 2).
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct StepLayerRecord {
    int layer = -1;
    double h = 0.0;
    bool fired = false;
    double theta_norm = 0.0;
    double violation = 0.0;
    Vector x_tilde;  // filled only when the hook requests vector capture
};

struct StepRecord {
    int step = -1;        // emission index; 0 is the prefill-produced token
    int token = -1;
    bool is_object = false;
    int label = -1;       // -1 unlabeled, 0 grounded, 1 hallucinated
    double wall_ms = 0.0;
    std::vector<StepLayerRecord> layers;
};

struct DecodeTrace {
    std::vector<StepRecord> steps;
};

// Per-layer intervention point. attention_input may rewrite the post-norm
// attention input in place; queries may rewrite the per-head queries
// (q-only ablation). Implementations fill the trace record either way.
struct SteeringHook {
    virtual ~SteeringHook() = default;
    virtual bool wants(int layer) const = 0;
    virtual void attention_input(int layer, Vector& xn, StepLayerRecord& rec) = 0;
    virtual void queries(int layer, std::vector<Vector>& q, StepLayerRecord& rec) = 0;
    virtual bool capture_vectors() const { return false; }
};

namespace detail {

inline void attend_and_update(const Model& model, int layer, KVCache& cache, Vector& x,
                              const std::vector<Vector>& q_heads, int n_positions) {
    const auto& lw = model.layers[layer];
    const int heads = model.config.heads;
    const int hw = model.config.head_width;
    const double inv_sqrt_dm = 1.0 / std::sqrt(static_cast<double>(hw));

    Vector concat(static_cast<std::size_t>(heads) * hw, 0.0);
    Vector scores(n_positions);
    for (int m = 0; m < heads; ++m) {
        for (int j = 0; j < n_positions; ++j) {
            const double* k = cache.key(layer, j, m);
            double s = 0.0;
            for (int i = 0; i < hw; ++i) s += q_heads[m][i] * k[i];
            scores[j] = s * inv_sqrt_dm;
        }
        const Vector attn = softmax(scores);
        double* out = concat.data() + static_cast<std::size_t>(m) * hw;
        for (int j = 0; j < n_positions; ++j) {
            const double* v = cache.value(layer, j, m);
            const double a = attn[j];
            for (int i = 0; i < hw; ++i) out[i] += a * v[i];
        }
    }
    const Vector attn_out = matvec(lw.w_o, concat);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += attn_out[i];
}

inline void ffn_update(const LayerWeights& lw, Vector& x) {
    Vector xn = layer_norm(x, lw.norm2_gain);
    Vector hidden = matvec(lw.w_ff1, xn);
    for (double& v : hidden) v = v > 0.0 ? v : 0.0;
    const Vector out = matvec(lw.w_ff2, hidden);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += out[i];
}

}  // namespace detail

// One forward pass for the token at position cache.len. x_in is the raw
// input embedding (positional row added here). Returns the logits; appends
// one K/V entry per layer and advances the shared cache length.
inline Vector decode_step(const Model& model, KVCache& cache, const Vector& x_in,
                          SteeringHook* hook = nullptr, StepRecord* rec = nullptr) {
    const int pos = cache.len;
    if (pos >= model.config.max_seq)
        throw std::invalid_argument("decode_step: sequence exceeds max_seq");
    if (static_cast<int>(x_in.size()) != model.config.width)
        throw std::invalid_argument("decode_step: input width mismatch");

    Vector x(x_in);
    const double* p = model.positional.row(pos);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += p[i];

    const int heads = model.config.heads;
    for (int layer = 0; layer < model.config.layers; ++layer) {
        const auto& lw = model.layers[layer];
        Vector xn = layer_norm(x, lw.norm1_gain);

        StepLayerRecord* lrec = nullptr;
        if (hook != nullptr && hook->wants(layer)) {
            if (rec != nullptr) {
                rec->layers.emplace_back();
                lrec = &rec->layers.back();
            }
            StepLayerRecord scratch;
            StepLayerRecord& r = lrec != nullptr ? *lrec : scratch;
            r.layer = layer;
            hook->attention_input(layer, xn, r);
            if (hook->capture_vectors() && lrec != nullptr) lrec->x_tilde = xn;
        }

        std::vector<Vector> q_heads(heads), k_heads(heads), v_heads(heads);
        for (int m = 0; m < heads; ++m) q_heads[m] = matvec(lw.w_q[m], xn);
        if (hook != nullptr && hook->wants(layer)) {
            StepLayerRecord scratch;
            hook->queries(layer, q_heads, lrec != nullptr ? *lrec : scratch);
        }
        for (int m = 0; m < heads; ++m) {
            k_heads[m] = matvec(lw.w_k[m], xn);
            v_heads[m] = matvec(lw.w_v[m], xn);
        }
        cache.append(layer, k_heads, v_heads);

        detail::attend_and_update(model, layer, cache, x, q_heads, pos + 1);
        detail::ffn_update(lw, x);
    }
    cache.len = pos + 1;

    const Vector xf = layer_norm(x, model.final_norm_gain);
    Vector logits = matvec(model.output, xf);
    if (!all_finite(logits)) throw numeric_error("decode_step: non-finite logits");
    return logits;
}

// Caption budget for open-ended decoding when the caller does not set one.
inline constexpr int kDefaultMaxNewTokens = 140;

struct PrefillResult {
    KVCache cache;
    PrefillContext ctx;
    Vector last_hidden;      // final-norm output at the last prompt position
    Vector last_logits;      // logits that produce the first sampled token
    StepRecord last_record;  // barrier readings at the last prompt position
};

// Runs the whole prompt (image embeddings first, then text tokens) through
// the decoder with causal attention, fills the cache, records which
// positions are image tokens, and fixes the per-steered-layer key sums and
// barrier gradients for the lifetime of the prompt. Prefill itself is never
// steered; barriers at the last prompt position are recorded for the trace.
inline PrefillResult prefill(const Model& model, const std::vector<int>& text_tokens,
                             const std::vector<Vector>& image_embeddings,
                             const std::vector<int>& steered_layers) {
    if (image_embeddings.empty())
        throw std::invalid_argument("prefill: image embeddings must be non-empty");
    const std::size_t prompt_len = image_embeddings.size() + text_tokens.size();
    if (prompt_len < 1) throw std::invalid_argument("prefill: empty prompt");
    if (prompt_len > static_cast<std::size_t>(model.config.max_seq))
        throw std::invalid_argument("prefill: prompt exceeds max_seq");
    for (const Vector& e : image_embeddings)
        if (static_cast<int>(e.size()) != model.config.width)
            throw std::invalid_argument("prefill: image embedding width mismatch");
    for (int t : text_tokens)
        if (t < 0 || t >= model.config.vocab)
            throw std::invalid_argument("prefill: text token outside vocabulary");

    PrefillResult result;
    result.cache = KVCache(model.config.layers, model.config.heads, model.config.head_width);
    for (std::size_t i = 0; i < image_embeddings.size(); ++i)
        result.ctx.image_indices.push_back(i);
    result.ctx.n_img = image_embeddings.size();

    const int heads = model.config.heads;
    bool barriers_ready = false;
    for (std::size_t p = 0; p < prompt_len; ++p) {
        const bool is_image = p < image_embeddings.size();
        // Image keys are all cached once the text part starts; that is the
        // earliest point the prompt-constant gradients can be fixed.
        if (!is_image && !barriers_ready) {
            for (int l : steered_layers)
                result.ctx.barriers.push_back(
                    make_layer_barrier(model.layers[l], result.cache, result.ctx.image_indices, l));
            barriers_ready = true;
        }

        Vector x = is_image ? image_embeddings[p]
                            : Vector(model.embedding.row(text_tokens[p - image_embeddings.size()]),
                                     model.embedding.row(text_tokens[p - image_embeddings.size()]) +
                                         model.config.width);
        const double* prow = model.positional.row(static_cast<int>(p));
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += prow[i];

        const bool last = p + 1 == prompt_len;
        for (int layer = 0; layer < model.config.layers; ++layer) {
            const auto& lw = model.layers[layer];
            Vector xn = layer_norm(x, lw.norm1_gain);
            if (last && barriers_ready) {
                if (const auto* b = result.ctx.find(layer)) {
                    StepLayerRecord r;
                    r.layer = layer;
                    r.h = barrier_value(b->grad, xn);
                    result.last_record.layers.push_back(std::move(r));
                }
            }
            std::vector<Vector> q_heads(heads), k_heads(heads), v_heads(heads);
            for (int m = 0; m < heads; ++m) {
                q_heads[m] = matvec(lw.w_q[m], xn);
                k_heads[m] = matvec(lw.w_k[m], xn);
                v_heads[m] = matvec(lw.w_v[m], xn);
            }
            result.cache.append(layer, k_heads, v_heads);
            detail::attend_and_update(model, layer, result.cache, x, q_heads,
                                      static_cast<int>(p) + 1);
            detail::ffn_update(lw, x);
        }
        result.cache.len = static_cast<int>(p) + 1;

        if (last) {
            result.last_hidden = layer_norm(x, model.final_norm_gain);
            result.last_logits = matvec(model.output, result.last_hidden);
            if (!all_finite(result.last_logits))
                throw numeric_error("prefill: non-finite logits");
        }
    }
    // Prompts with no text tokens still need the gradients fixed.
    if (!barriers_ready) {
        for (int l : steered_layers)
            result.ctx.barriers.push_back(
                make_layer_barrier(model.layers[l], result.cache, result.ctx.image_indices, l));
    }
    result.last_record.step = 0;
    return result;
}

// ---------------------------------------------------------------------------
// Sampling

struct SamplePolicy {
    enum class Kind { greedy, top_p };
    Kind kind = Kind::greedy;
    double top_p = 0.95;
    double temperature = 1.0;
};

// Greedy returns the smallest index among tied maxima. top_p renormalizes
// the smallest prefix of the probability-sorted distribution whose mass
// reaches p (ties broken by ascending index) and samples from it.
inline int sample(const Vector& logits, const SamplePolicy& policy, Rng* rng = nullptr) {
    if (logits.empty()) throw std::invalid_argument("sample: empty logits");
    if (!all_finite(logits)) throw numeric_error("sample: non-finite logits");

    if (policy.kind == SamplePolicy::Kind::greedy) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[best]) best = i;
        return static_cast<int>(best);
    }

    if (rng == nullptr) throw std::invalid_argument("sample: top_p requires an rng");
    if (policy.top_p <= 0.0 || policy.top_p > 1.0)
        throw std::invalid_argument("sample: top_p must be in (0, 1]");
    if (policy.temperature <= 0.0)
        throw std::invalid_argument("sample: temperature must be positive");

    Vector scaled_logits(logits);
    for (double& v : scaled_logits) v /= policy.temperature;
    const Vector probs = softmax(scaled_logits);

    std::vector<std::size_t> order(probs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });

    double mass = 0.0;
    std::size_t keep = order.size();
    for (std::size_t i = 0; i < order.size(); ++i) {
        mass += probs[order[i]];
        if (mass >= policy.top_p) {
            keep = i + 1;
            break;
        }
    }

    const double u = rng->uniform() * mass;
    double acc = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        acc += probs[order[i]];
        if (u <= acc) return static_cast<int>(order[i]);
    }
    return static_cast<int>(order[keep - 1]);
}

}  // namespace bracs
