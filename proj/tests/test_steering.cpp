#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bracs/steering.hpp"

using namespace bracs;

namespace {

BarrierGradient make_grad(Vector g) {
    BarrierGradient b;
    b.norm_sq = dot(g, g);
    b.g = std::move(g);
    return b;
}

// Textbook projection of the origin onto {theta : <g,theta> >= c}, derived
// in the test from scratch: if c <= 0 the origin is feasible, otherwise the
// projection lies on the hyperplane and equals (c / <g,g>) * g.
Vector halfspace_projection(double h, const Vector& g, double tau) {
    const double c = tau - h;
    if (c <= 0.0) return Vector(g.size(), 0.0);
    return scaled(g, c / dot(g, g));
}

}  // namespace

TEST_CASE("solve_correction: boundary, hand case, zero gradient") {
    auto g = make_grad({2.0, 0.0});

    // h == tau: constraint inactive, theta = 0 exactly.
    Correction c0 = solve_correction(5.0, g, 5.0, 0.0);
    CHECK_FALSE(c0.fired);
    CHECK(c0.theta == Vector{0.0, 0.0});
    CHECK(c0.lambda == 0.0);

    // h = tau - 1, g = (2,0), eps = 0: lambda = 1/4, theta = (0.5, 0).
    Correction c1 = solve_correction(4.0, g, 5.0, 0.0);
    CHECK(c1.fired);
    CHECK(c1.lambda == Catch::Approx(0.25).margin(1e-15));
    CHECK(c1.theta[0] == Catch::Approx(0.5).margin(1e-15));
    CHECK(c1.theta[1] == 0.0);
    CHECK(dot(g.g, c1.theta) == Catch::Approx(1.0).margin(1e-12));

    // Zero gradient with violation: fired, zero direction via the eps floor.
    auto gz = make_grad({0.0, 0.0, 0.0});
    Correction c2 = solve_correction(0.0, gz, 5.0, 1e-6);
    CHECK(c2.fired);
    CHECK(c2.theta == Vector(3, 0.0));

    // Same but with eps = 0 as well: still no blow-up.
    Correction c3 = solve_correction(0.0, gz, 5.0, 0.0);
    CHECK(c3.theta == Vector(3, 0.0));

    CHECK_THROWS_AS(solve_correction(0.0, g, 5.0, -1.0), std::invalid_argument);
}

TEST_CASE("qp_oracle: feasible origin, infeasibility, convergence") {
    Vector g = {1.0, 2.0};
    CHECK(qp_oracle(6.0, g, 5.0) == Vector{0.0, 0.0});
    CHECK_THROWS_AS(qp_oracle(0.0, Vector{0.0, 0.0}, 5.0), std::domain_error);

    // Projected gradient descent converges to the test-derived projection.
    Rng rng(555);
    for (int trial = 0; trial < 20; ++trial) {
        Vector gr = seeded_gaussian(rng, 16);
        const double h = rng.gaussian();
        const double tau = h + std::abs(rng.gaussian()) + 0.1;
        Vector iterative = qp_oracle(h, gr, tau, 10000);
        Vector direct = halfspace_projection(h, gr, tau);
        for (std::size_t i = 0; i < gr.size(); ++i)
            CHECK(std::abs(iterative[i] - direct[i]) <=
                  1e-6 * std::max(1.0, std::abs(direct[i])));
    }
}

TEST_CASE("solve_correction matches qp_oracle on 1000 random instances (d=64)") {
    Rng rng(101);
    for (int trial = 0; trial < 1000; ++trial) {
        Vector gv = seeded_gaussian(rng, 64);
        auto g = make_grad(gv);
        const double h = rng.gaussian() * 3.0;
        const double tau = rng.gaussian() * 3.0;
        Correction c = solve_correction(h, g, tau, 0.0);
        if (h >= tau) {
            CHECK(c.theta == Vector(64, 0.0));
            continue;
        }
        Vector oracle = qp_oracle(h, gv, tau, 2000);
        const double scale = std::max(1.0, norm(oracle));
        for (int i = 0; i < 64; ++i)
            CHECK(std::abs(c.theta[i] - oracle[i]) <= 1e-8 * scale);
    }
}

TEST_CASE("apply_steering: zero strength, closed gate, exact restoration") {
    Rng rng(2020);
    Vector x = seeded_gaussian(rng, 32);
    auto g = make_grad(seeded_gaussian(rng, 32));
    const double h = barrier_value(g, x);
    const double tau = h + 2.5;

    Correction c = solve_correction(h, g, tau, 0.0);
    REQUIRE(c.fired);

    CHECK(apply_steering(x, c, 0.0) == x);  // alpha = 0 is bitwise identity

    Correction closed = solve_correction(h, g, h - 1.0, 0.0);  // h above tau
    CHECK(apply_steering(x, closed, 1.0) == x);  // unfired gate is bitwise identity

    Vector steered = apply_steering(x, c, 1.0);
    CHECK(barrier_value(g, steered) == Catch::Approx(tau).epsilon(1e-9));

    CHECK_THROWS_AS(apply_steering(Vector(3, 0.0), c, 1.0), std::invalid_argument);
}

TEST_CASE("minimum-norm property against perturbed feasible points") {
    Rng rng(303);
    for (int trial = 0; trial < 200; ++trial) {
        Vector gv = seeded_gaussian(rng, 24);
        auto g = make_grad(gv);
        const double h = -1.0 - std::abs(rng.gaussian());
        const double tau = 1.0 + std::abs(rng.gaussian());
        Correction c = solve_correction(h, g, tau, 0.0);
        REQUIRE(c.fired);
        // Random feasible point: theta* plus any perturbation kept feasible.
        Vector other(c.theta);
        Vector noise = seeded_gaussian(rng, 24);
        axpy(other, 0.5, noise);
        const double slack = (tau - h) - dot(gv, other);
        if (slack > 0.0) axpy(other, slack / g.norm_sq, gv);
        CHECK(norm(c.theta) <= norm(other) + 1e-10);
    }
}

TEST_CASE("adaptivity: norm proportional to violation, inverse in gradient scale") {
    Rng rng(404);
    Vector gv = seeded_gaussian(rng, 48);
    auto g = make_grad(gv);
    const double tau = 2.0;

    // ||theta*|| = violation / ||g|| exactly (eps = 0): linear in violation.
    const double v1 = 0.5, v2 = 1.7;
    Correction a = solve_correction(tau - v1, g, tau, 0.0);
    Correction b = solve_correction(tau - v2, g, tau, 0.0);
    const double ratio = norm(b.theta) / norm(a.theta);
    CHECK(std::abs(ratio - v2 / v1) <= 1e-10 * (v2 / v1));

    // Doubling g halves the norm at fixed violation.
    auto g2 = make_grad(scaled(gv, 2.0));
    Correction d = solve_correction(tau - v1, g2, tau, 0.0);
    CHECK(norm(d.theta) == Catch::Approx(0.5 * norm(a.theta)).epsilon(1e-12));
}

TEST_CASE("KKT certificate: nonnegative multiplier, complementary slackness") {
    Rng rng(505);
    for (int trial = 0; trial < 500; ++trial) {
        Vector gv = seeded_gaussian(rng, 32);
        auto g = make_grad(gv);
        const double h = rng.gaussian() * 4.0;
        const double tau = rng.gaussian() * 4.0;
        Correction c = solve_correction(h, g, tau, 0.0);
        CHECK(c.lambda >= 0.0);
        const double slackness = c.lambda * (dot(gv, c.theta) - (tau - h));
        CHECK(std::abs(slackness) <= 1e-10 * std::max(1.0, std::abs(tau - h)));
        CHECK(c.fired == (c.violation > 0.0));
        // theta is parallel to g: residual after projecting onto g is ~0.
        if (c.fired && g.norm_sq > 0.0) {
            Vector resid(c.theta);
            axpy(resid, -dot(c.theta, gv) / g.norm_sq, gv);
            CHECK(norm(resid) <= 1e-12 * std::max(norm(c.theta), 1e-300));
        }
    }
}

TEST_CASE("continuous_correction pushes h toward tau from both sides") {
    Rng rng(606);
    Vector gv = seeded_gaussian(rng, 16);
    auto g = make_grad(gv);

    // h above tau: negative alignment with g (drives h down).
    Vector down = continuous_correction(5.0, g, 2.0, 0.0);
    CHECK(dot(down, gv) < 0.0);
    // h below tau: positive alignment.
    Vector up = continuous_correction(-1.0, g, 2.0, 0.0);
    CHECK(dot(up, gv) > 0.0);
    // Exact restoration with eps = 0, from either side.
    Vector x = seeded_gaussian(rng, 16);
    Vector xs(x);
    axpy(xs, 1.0, continuous_correction(barrier_value(g, x), g, 2.0, 0.0));
    CHECK(barrier_value(g, xs) == Catch::Approx(2.0).margin(1e-9));
}

TEST_CASE("q_only_correction: closed gate, single-head degeneracy, restoration") {
    Rng rng(707);
    std::vector<Vector> grads = {seeded_gaussian(rng, 8), seeded_gaussian(rng, 8)};
    double gnorm2 = 0.0;
    for (const auto& gm : grads) gnorm2 += norm_sq(gm);

    // h >= tau: all updates are zero.
    auto zero = q_only_correction(3.0, grads, gnorm2, 3.0, 0.0);
    for (const auto& u : zero) CHECK(u == Vector(8, 0.0));

    // Single head reduces to solve_correction in query space.
    std::vector<Vector> one = {grads[0]};
    auto upd = q_only_correction(0.0, one, norm_sq(grads[0]), 1.5, 0.0);
    auto ref = solve_correction(0.0, make_grad(grads[0]), 1.5, 0.0);
    REQUIRE(upd.size() == 1);
    for (int i = 0; i < 8; ++i)
        CHECK(upd[0][i] == Catch::Approx(ref.theta[i]).margin(1e-14));

    // After applying, the barrier recomputed from queries lands on tau:
    // h' = h + sum_m <grad_m, theta_m> == tau with eps = 0.
    const double h = -0.75, tau = 2.0;
    auto updates = q_only_correction(h, grads, gnorm2, tau, 0.0);
    double lifted = h;
    for (std::size_t m = 0; m < grads.size(); ++m) lifted += dot(grads[m], updates[m]);
    CHECK(lifted == Catch::Approx(tau).epsilon(1e-9));
}

TEST_CASE("SteeringConfig validation") {
    SteeringConfig cfg;
    cfg.steered_layers = {0, 1, 2};
    cfg.validate(6);

    cfg.steered_layers = {7};
    CHECK_THROWS_AS(cfg.validate(6), std::invalid_argument);
    cfg.steered_layers = {1, 1};
    CHECK_THROWS_AS(cfg.validate(6), std::invalid_argument);
    cfg.steered_layers = {1};
    cfg.alpha = 0.0;
    CHECK_THROWS_AS(cfg.validate(6), std::invalid_argument);
    cfg.mode = SteeringMode::off;
    cfg.validate(6);  // alpha unchecked when off
    cfg.alpha = 1.0;
    cfg.epsilon = -1e-9;
    CHECK_THROWS_AS(cfg.validate(6), std::invalid_argument);
    cfg.epsilon = 0.0;
    cfg.validate(6);  // zero floor allowed for exactness runs
}
