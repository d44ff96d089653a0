#pragma once

// Dense 64-bit numeric kernel shared by every module: vectors, row-major
// matrices, reductions, normalization, and a seeded deterministic RNG.
// Sizes here are desk-scale (d <= 256), so everything is plain loops.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bracs {

// Shortest round-trip decimal text for a double; locale-free, so emitted
// files are byte-stable across runs and machines.
inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) return "nan";
    return std::string(buf, end);
}

using Vector = std::vector<double>;

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    const double* row(std::size_t r) const { return data.data() + r * cols; }
    double* row(std::size_t r) { return data.data() + r * cols; }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
        return m;
    }
};

inline bool all_finite(const Vector& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool all_finite(const Matrix& m) {
    for (double x : m.data)
        if (!std::isfinite(x)) return false;
    return true;
}

inline double dot(const Vector& a, const Vector& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("dot: length mismatch (" + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()) + ")");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline Vector matvec(const Matrix& m, const Vector& x) {
    if (m.cols != x.size())
        throw std::invalid_argument("matvec: shape mismatch (" + std::to_string(m.rows) + "x" +
                                    std::to_string(m.cols) + " vs " + std::to_string(x.size()) + ")");
    Vector y(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* mr = m.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < m.cols; ++c) s += mr[c] * x[c];
        y[r] = s;
    }
    return y;
}

// y += a * M^T h, where h lives in the row space of M. Used for pulling
// head-space vectors back into model space without materializing M^T.
inline void add_matvec_transposed(Vector& y, const Matrix& m, const Vector& h, double a = 1.0) {
    if (m.rows != h.size() || m.cols != y.size())
        throw std::invalid_argument("add_matvec_transposed: shape mismatch");
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* mr = m.row(r);
        const double ah = a * h[r];
        if (ah == 0.0) continue;
        for (std::size_t c = 0; c < m.cols; ++c) y[c] += ah * mr[c];
    }
}

inline double norm_sq(const Vector& v) { return dot(v, v); }
inline double norm(const Vector& v) { return std::sqrt(norm_sq(v)); }

inline void axpy(Vector& y, double a, const Vector& x) {
    if (y.size() != x.size()) throw std::invalid_argument("axpy: length mismatch");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

inline Vector scaled(const Vector& v, double a) {
    Vector out(v);
    for (double& x : out) x *= a;
    return out;
}

// Max-shifted softmax; output is a probability simplex point for any finite input.
inline Vector softmax(const Vector& v) {
    if (v.empty()) throw std::invalid_argument("softmax: empty input");
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    Vector out(v.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        sum += out[i];
    }
    for (double& x : out) x /= sum;
    return out;
}

constexpr double kLayerNormEps = 1e-5;

// Zero-mean, unit-variance (population variance + 1e-5 floor), then gain.
inline Vector layer_norm(const Vector& x, const Vector& gain) {
    if (x.size() != gain.size())
        throw std::invalid_argument("layer_norm: gain length mismatch");
    if (x.empty()) throw std::invalid_argument("layer_norm: empty input");
    const double n = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    Vector out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * gain[i];
    return out;
}

// splitmix64: 64-bit integer-state generator with fixed published constants.
// Same seed gives a bit-identical stream on every platform.
struct Rng {
    std::uint64_t state;
    bool has_spare = false;
    double spare = 0.0;

    explicit Rng(std::uint64_t seed) : state(seed) {}

    std::uint64_t next_u64() {
        state += 0x9E3779B97F4A7C15ull;
        std::uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform on (0,1): 53 mantissa bits, offset by half an ulp so 0 is excluded.
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller on two uniform draws; the second value
    // of each pair is cached so the stream consumes exactly one pair per two draws.
    double gaussian() {
        if (has_spare) {
            has_spare = false;
            return spare;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare = r * std::sin(a);
        has_spare = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n) by rejection, bias-free.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }
};

inline Vector seeded_gaussian(Rng& rng, std::size_t n) {
    if (n == 0) throw std::invalid_argument("seeded_gaussian: n must be positive");
    Vector out(n);
    for (double& x : out) x = rng.gaussian();
    return out;
}

}  // namespace bracs
