#pragma once

// Toy pre-norm decoder data model: configuration, per-layer projection
// weights, token/positional embeddings, and the append-only KV cache.
// Weights are plain dense matrices; no biases on Q/K/V so the grounding
// barrier stays exactly linear in the attention input.

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "bracs/numeric.hpp"

namespace bracs {

struct ModelConfig {
    int layers = 6;           // L
    int heads = 4;            // H
    int width = 64;           // d
    int head_width = 16;      // d_m = d / H
    int ffn_width = 256;      // d_ff
    int vocab = 40;           // V
    int max_seq = 256;
    std::uint64_t seed = 1;

    void validate() const {
        if (layers < 1) throw std::invalid_argument("ModelConfig: layers must be >= 1");
        if (heads < 1) throw std::invalid_argument("ModelConfig: heads must be >= 1");
        if (max_seq < 2) throw std::invalid_argument("ModelConfig: max_seq must be >= 2");
        if (width != heads * head_width)
            throw std::invalid_argument("ModelConfig: width must equal heads * head_width");
        if (ffn_width < 1) throw std::invalid_argument("ModelConfig: ffn_width must be >= 1");
        if (vocab < 2) throw std::invalid_argument("ModelConfig: vocab must be >= 2");
    }
};

struct LayerWeights {
    std::vector<Matrix> w_q;  // per head, head_width x width
    std::vector<Matrix> w_k;
    std::vector<Matrix> w_v;
    Matrix w_o;               // width x (heads * head_width)
    Matrix w_ff1;             // ffn_width x width
    Matrix w_ff2;             // width x ffn_width
    Vector norm1_gain;        // width
    Vector norm2_gain;        // width
};

struct Model {
    ModelConfig config;
    std::vector<LayerWeights> layers;
    Matrix embedding;    // vocab x width; image tokens bypass this table
    Matrix positional;   // max_seq x width, additive
    Matrix output;       // vocab x width readout head
    Vector final_norm_gain;
};

// Growable per-layer, per-head key/value store. One shared length across all
// layers; entries are append-only and never rewritten.
struct KVCache {
    int heads = 0;
    int head_width = 0;
    int len = 0;
    struct LayerKV {
        std::vector<double> keys;    // len * heads * head_width, position-major
        std::vector<double> values;
    };
    std::vector<LayerKV> layers;

    KVCache() = default;
    KVCache(int n_layers, int n_heads, int d_head)
        : heads(n_heads), head_width(d_head), layers(n_layers) {}

    const double* key(int layer, int pos, int head) const {
        return layers[layer].keys.data() + (static_cast<std::size_t>(pos) * heads + head) * head_width;
    }
    const double* value(int layer, int pos, int head) const {
        return layers[layer].values.data() + (static_cast<std::size_t>(pos) * heads + head) * head_width;
    }

    // Appends one position's K/V at a layer; all layers must be appended once
    // per step so the shared length stays consistent.
    void append(int layer, const std::vector<Vector>& k_heads, const std::vector<Vector>& v_heads) {
        auto& l = layers[layer];
        for (const Vector& k : k_heads) l.keys.insert(l.keys.end(), k.begin(), k.end());
        for (const Vector& v : v_heads) l.values.insert(l.values.end(), v.begin(), v.end());
    }
};

inline Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = rng.gaussian() * scale;
    return m;
}

// Deterministic synthetic weights: Gaussian entries scaled by 1/sqrt(width).
inline Model init_model(const ModelConfig& config) {
    config.validate();
    Model model;
    model.config = config;
    Rng rng(config.seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(config.width));
    const auto w = static_cast<std::size_t>(config.width);
    const auto hw = static_cast<std::size_t>(config.head_width);
    const auto ff = static_cast<std::size_t>(config.ffn_width);

    model.layers.resize(config.layers);
    for (auto& lw : model.layers) {
        lw.w_q.reserve(config.heads);
        lw.w_k.reserve(config.heads);
        lw.w_v.reserve(config.heads);
        for (int m = 0; m < config.heads; ++m) {
            lw.w_q.push_back(gaussian_matrix(rng, hw, w, scale));
            lw.w_k.push_back(gaussian_matrix(rng, hw, w, scale));
            lw.w_v.push_back(gaussian_matrix(rng, hw, w, scale));
        }
        lw.w_o = gaussian_matrix(rng, w, hw * static_cast<std::size_t>(config.heads), scale);
        lw.w_ff1 = gaussian_matrix(rng, ff, w, scale);
        lw.w_ff2 = gaussian_matrix(rng, w, ff, scale);
        lw.norm1_gain.assign(w, 1.0);
        lw.norm2_gain.assign(w, 1.0);
    }
    model.embedding = gaussian_matrix(rng, static_cast<std::size_t>(config.vocab), w, scale);
    model.positional = gaussian_matrix(rng, static_cast<std::size_t>(config.max_seq), w, scale);
    model.output = gaussian_matrix(rng, static_cast<std::size_t>(config.vocab), w, scale);
    model.final_norm_gain.assign(w, 1.0);
    return model;
}

// ---------------------------------------------------------------------------
// JSON serialization: one document {config, weights, embeddings}. Doubles
// round-trip exactly (shortest-representation printing).

inline nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < m.rows; ++r)
        rows.push_back(std::vector<double>(m.row(r), m.row(r) + m.cols));
    return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    Matrix m;
    m.rows = j.size();
    m.cols = m.rows > 0 ? j.at(0).size() : 0;
    m.data.reserve(m.rows * m.cols);
    for (const auto& row : j) {
        if (row.size() != m.cols) throw std::invalid_argument("matrix_from_json: ragged rows");
        for (const auto& v : row) m.data.push_back(v.get<double>());
    }
    return m;
}

inline nlohmann::json model_to_json(const Model& model) {
    nlohmann::json j;
    j["config"] = {{"layers", model.config.layers},   {"heads", model.config.heads},
                   {"width", model.config.width},     {"head_width", model.config.head_width},
                   {"ffn_width", model.config.ffn_width}, {"vocab", model.config.vocab},
                   {"max_seq", model.config.max_seq}, {"seed", model.config.seed}};
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& lw : model.layers) {
        nlohmann::json l;
        for (const auto& m : lw.w_q) l["w_q"].push_back(matrix_to_json(m));
        for (const auto& m : lw.w_k) l["w_k"].push_back(matrix_to_json(m));
        for (const auto& m : lw.w_v) l["w_v"].push_back(matrix_to_json(m));
        l["w_o"] = matrix_to_json(lw.w_o);
        l["w_ff1"] = matrix_to_json(lw.w_ff1);
        l["w_ff2"] = matrix_to_json(lw.w_ff2);
        l["norm1_gain"] = lw.norm1_gain;
        l["norm2_gain"] = lw.norm2_gain;
        layers.push_back(std::move(l));
    }
    j["weights"] = std::move(layers);
    j["embeddings"] = {{"token", matrix_to_json(model.embedding)},
                       {"positional", matrix_to_json(model.positional)},
                       {"output", matrix_to_json(model.output)},
                       {"final_norm_gain", model.final_norm_gain}};
    return j;
}

inline Model model_from_json(const nlohmann::json& j) {
    Model model;
    const auto& c = j.at("config");
    model.config.layers = c.at("layers").get<int>();
    model.config.heads = c.at("heads").get<int>();
    model.config.width = c.at("width").get<int>();
    model.config.head_width = c.at("head_width").get<int>();
    model.config.ffn_width = c.at("ffn_width").get<int>();
    model.config.vocab = c.at("vocab").get<int>();
    model.config.max_seq = c.at("max_seq").get<int>();
    model.config.seed = c.at("seed").get<std::uint64_t>();
    model.config.validate();
    for (const auto& l : j.at("weights")) {
        LayerWeights lw;
        for (const auto& m : l.at("w_q")) lw.w_q.push_back(matrix_from_json(m));
        for (const auto& m : l.at("w_k")) lw.w_k.push_back(matrix_from_json(m));
        for (const auto& m : l.at("w_v")) lw.w_v.push_back(matrix_from_json(m));
        lw.w_o = matrix_from_json(l.at("w_o"));
        lw.w_ff1 = matrix_from_json(l.at("w_ff1"));
        lw.w_ff2 = matrix_from_json(l.at("w_ff2"));
        lw.norm1_gain = l.at("norm1_gain").get<Vector>();
        lw.norm2_gain = l.at("norm2_gain").get<Vector>();
        model.layers.push_back(std::move(lw));
    }
    const auto& e = j.at("embeddings");
    model.embedding = matrix_from_json(e.at("token"));
    model.positional = matrix_from_json(e.at("positional"));
    model.output = matrix_from_json(e.at("output"));
    model.final_norm_gain = e.at("final_norm_gain").get<Vector>();
    if (static_cast<int>(model.layers.size()) != model.config.layers)
        throw std::invalid_argument("model_from_json: layer count mismatch");
    return model;
}

inline void save_model(const Model& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_model: cannot open " + path);
    out << model_to_json(model).dump(1);
    if (!out) throw std::runtime_error("save_model: write failed for " + path);
}

inline Model load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_model: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return model_from_json(j);
}

}  // namespace bracs
