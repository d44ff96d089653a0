#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "bracs/model.hpp"

using namespace bracs;

TEST_CASE("init_model: determinism") {
    ModelConfig cfg;
    cfg.seed = 42;
    Model a = init_model(cfg);
    Model b = init_model(cfg);
    CHECK(a.layers[0].w_q[0].data == b.layers[0].w_q[0].data);
    CHECK(a.embedding.data == b.embedding.data);
    CHECK(a.positional.data == b.positional.data);
    CHECK(a.output.data == b.output.data);

    cfg.seed = 43;
    Model c = init_model(cfg);
    CHECK(a.layers[0].w_q[0].data != c.layers[0].w_q[0].data);
}

TEST_CASE("init_model: shapes follow the config") {
    ModelConfig cfg;
    cfg.width = 64;
    cfg.heads = 4;
    cfg.head_width = 16;
    Model m = init_model(cfg);
    REQUIRE(static_cast<int>(m.layers.size()) == cfg.layers);
    for (const auto& lw : m.layers) {
        REQUIRE(static_cast<int>(lw.w_q.size()) == cfg.heads);
        for (const auto& w : lw.w_q) {
            CHECK(w.rows == 16);
            CHECK(w.cols == 64);
        }
        CHECK(lw.w_o.rows == 64);
        CHECK(lw.w_o.cols == 64);
        CHECK(lw.w_ff1.rows == static_cast<std::size_t>(cfg.ffn_width));
        CHECK(lw.w_ff2.cols == static_cast<std::size_t>(cfg.ffn_width));
    }
    CHECK(m.embedding.rows == static_cast<std::size_t>(cfg.vocab));
    CHECK(m.positional.rows == static_cast<std::size_t>(cfg.max_seq));
}

TEST_CASE("init_model: weight entry variance is about 1/width") {
    ModelConfig cfg;
    cfg.width = 64;
    Model m = init_model(cfg);
    double sum = 0.0, sum2 = 0.0;
    std::size_t n = 0;
    for (const auto& lw : m.layers) {
        for (const auto& w : lw.w_q)
            for (double v : w.data) {
                sum += v;
                sum2 += v * v;
                ++n;
                if (n >= 10000) break;
            }
    }
    REQUIRE(n >= 10000);
    const double mean = sum / static_cast<double>(n);
    const double var = sum2 / static_cast<double>(n) - mean * mean;
    CHECK(var == Catch::Approx(1.0 / 64.0).epsilon(0.2));
}

TEST_CASE("ModelConfig validation") {
    ModelConfig cfg;
    cfg.width = 65;  // not heads * head_width
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = ModelConfig{};
    cfg.layers = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = ModelConfig{};
    cfg.max_seq = 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("model JSON round-trip is bit-exact") {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.vocab = 9;
    cfg.max_seq = 8;
    cfg.seed = 7;
    Model m = init_model(cfg);

    const std::string path = "test_model_roundtrip.json";
    save_model(m, path);
    Model r = load_model(path);
    std::remove(path.c_str());

    CHECK(r.config.layers == m.config.layers);
    CHECK(r.config.seed == m.config.seed);
    REQUIRE(r.layers.size() == m.layers.size());
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        for (std::size_t h = 0; h < m.layers[l].w_q.size(); ++h) {
            CHECK(r.layers[l].w_q[h].data == m.layers[l].w_q[h].data);
            CHECK(r.layers[l].w_k[h].data == m.layers[l].w_k[h].data);
            CHECK(r.layers[l].w_v[h].data == m.layers[l].w_v[h].data);
        }
        CHECK(r.layers[l].w_o.data == m.layers[l].w_o.data);
        CHECK(r.layers[l].w_ff1.data == m.layers[l].w_ff1.data);
        CHECK(r.layers[l].w_ff2.data == m.layers[l].w_ff2.data);
        CHECK(r.layers[l].norm1_gain == m.layers[l].norm1_gain);
    }
    CHECK(r.embedding.data == m.embedding.data);
    CHECK(r.positional.data == m.positional.data);
    CHECK(r.output.data == m.output.data);
}

TEST_CASE("KVCache indexing and append") {
    KVCache cache(2, 2, 3);
    std::vector<Vector> k = {{1, 2, 3}, {4, 5, 6}};
    std::vector<Vector> v = {{7, 8, 9}, {10, 11, 12}};
    cache.append(0, k, v);
    cache.append(1, k, v);
    cache.len = 1;
    CHECK(cache.key(0, 0, 0)[0] == 1.0);
    CHECK(cache.key(0, 0, 1)[2] == 6.0);
    CHECK(cache.value(1, 0, 1)[0] == 10.0);
}
