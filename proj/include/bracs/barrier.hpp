#pragma once

// Visual-grounding barrier: mean pre-softmax attention from the current
// attention input to the cached image keys at one layer. The barrier is
// linear in the attention input, so its gradient is a constant per
// (prompt, layer) and the per-step cost collapses to one dot product.

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "bracs/model.hpp"
#include "bracs/numeric.hpp"

namespace bracs {

struct BarrierGradient {
    Vector g;             // length width
    double norm_sq = 0.0; // cached ||g||^2
    double offset = 0.0;  // reserved for backbones with Q-projection biases
};

// Per-head sums of cached image keys at one layer, in ascending index order.
inline std::vector<Vector> aggregate_image_keys(const KVCache& cache,
                                                const std::vector<std::size_t>& image_indices,
                                                int layer) {
    std::vector<Vector> sums(cache.heads, Vector(cache.head_width, 0.0));
    for (std::size_t idx : image_indices) {
        if (static_cast<int>(idx) >= cache.len)
            throw std::out_of_range("aggregate_image_keys: image index beyond cache length");
        for (int m = 0; m < cache.heads; ++m) {
            const double* k = cache.key(layer, static_cast<int>(idx), m);
            for (int i = 0; i < cache.head_width; ++i) sums[m][i] += k[i];
        }
    }
    return sums;
}

// g = 1/(H * n_img * sqrt(d_m)) * sum_m W_Q^(m)^T S_m. Constant for the
// lifetime of one prompt; no backward pass anywhere.
inline BarrierGradient barrier_gradient(const LayerWeights& weights,
                                        const std::vector<Vector>& key_sums,
                                        std::size_t n_img) {
    if (n_img == 0) throw std::invalid_argument("barrier_gradient: zero image tokens");
    if (weights.w_q.empty() || weights.w_q.size() != key_sums.size())
        throw std::invalid_argument("barrier_gradient: head count mismatch");
    const std::size_t heads = weights.w_q.size();
    const std::size_t head_width = weights.w_q[0].rows;
    const std::size_t width = weights.w_q[0].cols;
    const double scale =
        1.0 / (static_cast<double>(heads) * static_cast<double>(n_img) *
               std::sqrt(static_cast<double>(head_width)));
    BarrierGradient grad;
    grad.g.assign(width, 0.0);
    for (std::size_t m = 0; m < heads; ++m)
        add_matvec_transposed(grad.g, weights.w_q[m], key_sums[m], scale);
    grad.norm_sq = dot(grad.g, grad.g);
    return grad;
}

inline double barrier_value(const BarrierGradient& grad, const Vector& x) {
    return dot(grad.g, x) + grad.offset;
}

// Literal double sum over heads and image tokens; the slow reference path
// used to cross-check barrier_value and as the finite-difference target.
inline double barrier_direct(const Vector& x, const LayerWeights& weights, const KVCache& cache,
                             const std::vector<std::size_t>& image_indices, int layer) {
    if (image_indices.empty()) throw std::invalid_argument("barrier_direct: zero image tokens");
    const std::size_t heads = weights.w_q.size();
    const double inv_sqrt_dm = 1.0 / std::sqrt(static_cast<double>(weights.w_q[0].rows));
    double acc = 0.0;
    for (std::size_t m = 0; m < heads; ++m) {
        const Vector q = matvec(weights.w_q[m], x);
        for (std::size_t idx : image_indices) {
            const double* k = cache.key(layer, static_cast<int>(idx), static_cast<int>(m));
            double s = 0.0;
            for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * k[i];
            acc += s * inv_sqrt_dm;
        }
    }
    return acc / (static_cast<double>(heads) * static_cast<double>(image_indices.size()));
}

// Everything the steering engine needs per steered layer, fixed at prefill:
// image indices, per-head key sums, the constant barrier gradient, and the
// query-space gradient used by the q-only ablation.
struct PrefillContext {
    std::vector<std::size_t> image_indices;
    std::size_t n_img = 0;

    struct LayerBarrier {
        int layer = -1;
        std::vector<Vector> key_sums;     // per head, length head_width
        BarrierGradient grad;             // in attention-input space
        std::vector<Vector> query_grads;  // per head: S_m / (H * n_img * sqrt(d_m))
        double query_grad_norm_sq = 0.0;
    };
    std::vector<LayerBarrier> barriers;  // one entry per steered layer, ascending

    const LayerBarrier* find(int layer) const {
        for (const auto& b : barriers)
            if (b.layer == layer) return &b;
        return nullptr;
    }
};

inline PrefillContext::LayerBarrier make_layer_barrier(const LayerWeights& weights,
                                                       const KVCache& cache,
                                                       const std::vector<std::size_t>& image_indices,
                                                       int layer) {
    PrefillContext::LayerBarrier b;
    b.layer = layer;
    b.key_sums = aggregate_image_keys(cache, image_indices, layer);
    b.grad = barrier_gradient(weights, b.key_sums, image_indices.size());
    const double scale = 1.0 / (static_cast<double>(b.key_sums.size()) *
                                static_cast<double>(image_indices.size()) *
                                std::sqrt(static_cast<double>(cache.head_width)));
    b.query_grads.reserve(b.key_sums.size());
    for (const Vector& s : b.key_sums) {
        b.query_grads.push_back(scaled(s, scale));
        b.query_grad_norm_sq += norm_sq(b.query_grads.back());
    }
    return b;
}

}  // namespace bracs
