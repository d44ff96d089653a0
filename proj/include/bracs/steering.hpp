#pragma once

// Closed-form minimum-norm steering. The correction is the exact solution of
//
//   min 0.5 * ||theta||^2   s.t.   h + <g, theta> >= tau
//
// which a single KKT system solves in closed form: theta = lambda * g with
// lambda = (tau - h)_+ / (||g||^2 + epsilon). Also provides an independent
// iterative solver for cross-checking, the steering application step, and
// the query-space variant used by the injection-point ablation.

#include <algorithm>
#include <cstddef>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "bracs/barrier.hpp"
#include "bracs/numeric.hpp"

namespace bracs {

enum class SteeringMode { off, regulated, continuous, q_only };

inline const char* to_string(SteeringMode m) {
    switch (m) {
        case SteeringMode::off: return "off";
        case SteeringMode::regulated: return "regulated";
        case SteeringMode::continuous: return "continuous";
        case SteeringMode::q_only: return "q_only";
    }
    return "?";
}

inline SteeringMode steering_mode_from_string(const std::string& s) {
    if (s == "off") return SteeringMode::off;
    if (s == "regulated") return SteeringMode::regulated;
    if (s == "continuous") return SteeringMode::continuous;
    if (s == "q_only") return SteeringMode::q_only;
    throw std::invalid_argument("unknown steering mode: " + s);
}

struct SteeringConfig {
    double tau = 0.0;
    double alpha = 1.0;
    double epsilon = 1e-6;
    std::vector<int> steered_layers;
    SteeringMode mode = SteeringMode::regulated;

    void validate(int n_layers) const {
        if (mode != SteeringMode::off && alpha <= 0.0)
            throw std::invalid_argument("SteeringConfig: alpha must be > 0 when steering");
        // epsilon = 0 is allowed so exactness runs can disable the floor.
        if (epsilon < 0.0) throw std::invalid_argument("SteeringConfig: epsilon must be >= 0");
        std::set<int> seen;
        for (int l : steered_layers) {
            if (l < 0 || l >= n_layers)
                throw std::invalid_argument("SteeringConfig: steered layer " + std::to_string(l) +
                                            " outside [0, " + std::to_string(n_layers) + ")");
            if (!seen.insert(l).second)
                throw std::invalid_argument("SteeringConfig: duplicate steered layer");
        }
    }
};

struct Correction {
    Vector theta;            // minimum-norm update, parallel to g
    double violation = 0.0;  // (tau - h)_+
    double lambda = 0.0;     // KKT multiplier
    bool fired = false;      // violation > 0
};

// Closed-form solve. g = 0 with h < tau yields theta = 0 through the epsilon
// floor (or directly when epsilon is 0 too), never a division blow-up.
inline Correction solve_correction(double h, const BarrierGradient& g, double tau, double epsilon) {
    if (epsilon < 0.0) throw std::invalid_argument("solve_correction: epsilon must be >= 0");
    Correction c;
    c.violation = std::max(tau - h, 0.0);
    c.fired = c.violation > 0.0;
    const double denom = g.norm_sq + epsilon;
    c.lambda = (c.fired && denom > 0.0) ? c.violation / denom : 0.0;
    if (c.fired && c.lambda != 0.0) {
        c.theta = scaled(g.g, c.lambda);
    } else {
        c.theta.assign(g.g.size(), 0.0);
    }
    return c;
}

// Ungated variant: same scaling but signed, so steps above the threshold are
// pushed back down toward tau. Used by the continuous-steering ablation.
inline Vector continuous_correction(double h, const BarrierGradient& g, double tau, double epsilon) {
    const double denom = g.norm_sq + epsilon;
    const double lambda = denom > 0.0 ? (tau - h) / denom : 0.0;
    return scaled(g.g, lambda);
}

// Independent numerical solver for the same QP: projected gradient descent
// on 0.5*||theta||^2 over the halfspace {theta : <g, theta> >= tau - h},
// started away from the optimum. Reports the infeasible direction (g = 0
// with h < tau) instead of silently returning a point.
inline Vector qp_oracle(double h, const Vector& g, double tau, int iterations = 10000) {
    const std::size_t n = g.size();
    if (h >= tau) return Vector(n, 0.0);  // origin already feasible
    const double gg = dot(g, g);
    if (gg == 0.0) throw std::domain_error("qp_oracle: infeasible (zero gradient, h < tau)");
    const double c = tau - h;
    // Deterministic non-zero start so the iteration does real work.
    Vector theta(n);
    for (std::size_t i = 0; i < n; ++i) theta[i] = (i % 2 == 0) ? 1.0 : -0.5;
    const double step = 0.5;
    for (int it = 0; it < iterations; ++it) {
        for (double& t : theta) t -= step * t;  // gradient of 0.5*||theta||^2
        const double slack = c - dot(g, theta);
        if (slack > 0.0) axpy(theta, slack / gg, g);  // project back onto halfspace
    }
    return theta;
}

// x_tilde = x + alpha * theta.
inline Vector apply_steering(const Vector& x, const Correction& c, double alpha) {
    if (x.size() != c.theta.size())
        throw std::invalid_argument("apply_steering: dimension mismatch");
    if (alpha == 0.0 || !c.fired) return x;
    Vector out(x);
    axpy(out, alpha, c.theta);
    return out;
}

// Query-space analogue for the q-only ablation: the barrier is linear in the
// concatenated per-head queries with gradient blocks grad_m, so the same
// single-constraint QP solved in query space gives per-head updates that are
// added to q_m only; keys and values stay uncorrected by contract.
inline std::vector<Vector> q_only_correction(double h, const std::vector<Vector>& query_grads,
                                             double query_grad_norm_sq, double tau,
                                             double epsilon) {
    const double violation = std::max(tau - h, 0.0);
    std::vector<Vector> updates;
    updates.reserve(query_grads.size());
    const double denom = query_grad_norm_sq + epsilon;
    const double lambda = (violation > 0.0 && denom > 0.0) ? violation / denom : 0.0;
    for (const Vector& gm : query_grads) updates.push_back(scaled(gm, lambda));
    return updates;
}

}  // namespace bracs
