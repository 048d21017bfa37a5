#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "spf/dtft_engine.hpp"
#include "test_helpers.hpp"

using namespace spf;
using C = std::complex<double>;

using testing::max_diff;
using testing::rollout_dtft;

TEST_CASE("single-state field matches the closed form") {
    Matrix emb(1, 1);
    emb << 1.0;
    const TabularMdp mdp(1, 1, {1.0}, Vector::Zero(1), Vector::Ones(1), 0.5, emb);
    const DtftConfig cfg{8, 1, 0.5, false};
    const auto res = solve_dtft_fixed_point(mdp, TabularPolicy::uniform(1, 1), cfg, 1e-14);
    REQUIRE(res.converged);
    for (std::size_t k = 0; k < 8; ++k) {
        const C expected = 1.0 / (1.0 - 0.5 * std::polar(1.0, -cfg.omega(k)));
        CHECK(std::abs(res.field.at(0, 0)(k, 0) - expected) < 1e-9);
    }
    CHECK(res.field.at(0, 0)(0, 0).real() == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("deterministic 3-cycle matches the rollout oracle") {
    Matrix emb(3, 2);
    emb << 1.0, 0.0, -0.5, std::sqrt(3.0) / 2, -0.5, -std::sqrt(3.0) / 2;
    const TabularMdp mdp = testing::cycle_mdp(3, 0.9, emb);
    const TabularPolicy pol = TabularPolicy::uniform(3, 1);
    const DtftConfig cfg{16, 2, 0.9, false};
    const auto res = solve_dtft_fixed_point(mdp, pol, cfg, 1e-13);
    REQUIRE(res.converged);
    for (std::size_t s = 0; s < 3; ++s) CHECK(max_diff(res.field.at(s, 0), rollout_dtft(mdp, pol, s, 0, 16)) < 1e-8);
}

TEST_CASE("random 5-state fixed points have tiny Bellman residual and match rollouts") {
    Rng rng(2024);
    for (int i = 0; i < 20; ++i) {
        const TabularMdp mdp = testing::dense_mdp(5, 2, 0.9, rng, 2);
        const TabularPolicy pol = random_policy(5, 2, rng);
        const DtftConfig cfg{8, 2, 0.9, false};
        const auto res = solve_dtft_fixed_point(mdp, pol, cfg, 1e-12);
        REQUIRE(res.converged);
        CHECK(res.bellman_residual <= 1e-9);
        CHECK(max_diff(res.field.at(1, 1), rollout_dtft(mdp, pol, 1, 1, 8)) < 1e-8);
    }
}

TEST_CASE("half-spectrum solve equals the full solve on the stored bins") {
    Rng rng(6);
    const TabularMdp mdp = testing::dense_mdp(4, 2, 0.8, rng, 3);
    const TabularPolicy pol = random_policy(4, 2, rng);
    const auto full = solve_dtft_fixed_point(mdp, pol, DtftConfig{12, 3, 0.8, false}, 1e-13);
    const auto half = solve_dtft_fixed_point(mdp, pol, DtftConfig{12, 3, 0.8, true}, 1e-13);
    CHECK(half.field.at(0, 0).rows == 7);
    CHECK(field_distance(expand_half_spectrum(half.field), full.field) < 1e-10);
    CHECK(max_diff(halve_spectrum(full.field.at(2, 1)), half.field.at(2, 1)) < 1e-10);
}

TEST_CASE("Bellman operator is a gamma contraction") {
    Rng rng(13);
    const double gammas[] = {0.5, 0.9, 0.99};
    for (int i = 0; i < 30; ++i) {
        const double g = gammas[i % 3];
        const TabularMdp mdp = testing::dense_mdp(4, 2, g, rng, 2);
        const TabularPolicy pol = random_policy(4, 2, rng);
        const DtftConfig cfg{8, 2, g, i % 2 == 0};
        DtftField f1 = DtftField::zeros(cfg, 4, 2), f2 = DtftField::zeros(cfg, 4, 2);
        for (auto* f : {&f1, &f2})
            for (auto& m : f->entries)
                for (auto& v : m.values) v = C(rng.normal(), rng.normal());
        const auto c = contraction_check(f1, f2, mdp, pol);
        CHECK(c.lhs <= c.rhs + 1e-12);
    }
}

TEST_CASE("iteration count respects the a priori bound") {
    Rng rng(3);
    const TabularMdp mdp = testing::dense_mdp(3, 2, 0.9, rng);
    const TabularPolicy pol = random_policy(3, 2, rng);
    const DtftConfig cfg{8, 3, 0.9, true};
    const auto res = solve_dtft_fixed_point(mdp, pol, cfg, 1e-10);
    const DtftField one = apply_bellman_dtft(DtftField::zeros(cfg, 3, 2), mdp, pol);
    CHECK(res.iterations <= a_priori_iterations(0.9, 1e-10, field_norm(one)) + 1);
    const auto capped = solve_dtft_fixed_point(mdp, pol, cfg, 1e-10, 1);
    CHECK_FALSE(capped.converged);
}

TEST_CASE("sequence DTFT of a geometric sequence") {
    Matrix seq = Matrix::Ones(400, 1);
    const auto out = dtft_of_sequence(seq, 0.5, 4, false);
    CHECK(std::abs(out.spectrum(0, 0) - 2.0) < 1e-12);
    CHECK(std::abs(out.spectrum(2, 0) - 1.0 / 1.5) < 1e-12);
}

TEST_CASE("inverse transform recovers expected future embeddings up to aliasing") {
    const double g = 0.9;
    const std::size_t L = 32;
    Matrix emb(4, 1);
    emb << 1.0, 2.0, -1.0, 0.5;
    const TabularMdp mdp = testing::cycle_mdp(4, g, emb);
    const TabularPolicy pol = TabularPolicy::uniform(4, 1);
    const auto res = solve_dtft_fixed_point(mdp, pol, DtftConfig{L, 1, g, true}, 1e-13);
    const double bound = aliasing_bound(g, L, 2.0);
    for (std::size_t s = 0; s < 4; ++s)
        for (std::size_t k = 1; k <= 5; ++k) {
            const auto rec = recover_state(res.field, s, 0, k);
            const double truth = emb((s + k) % 4, 0);
            CHECK(std::abs(rec.state(0) - truth) <= bound + 1e-8);
            CHECK_FALSE(rec.aliased);
        }
    CHECK(recover_state(res.field, 0, 0, L + 1).aliased);
}

TEST_CASE("strict half-spectrum expansion rejects complex edge bins") {
    DtftMatrix half(3, 1);
    half(0, 0) = C(1.0, 0.5);
    CHECK_THROWS_AS(expand_half_spectrum(half, true), std::invalid_argument);
    CHECK_NOTHROW(expand_half_spectrum(half, false));
    CHECK_THROWS_AS(DtftConfig({7, 1, 0.9, true}).validate(), std::invalid_argument);
}
