#include <doctest.h>

#include <algorithm>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "spf/spectral_analysis.hpp"
#include "test_helpers.hpp"

using namespace spf;

namespace {

Matrix cycle_chain(std::size_t n) {
    Matrix m = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t s = 0; s < n; ++s) m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>((s + 1) % n)) = 1.0;
    return m;
}

}  // namespace

using testing::block_2_3;
using testing::periodic_chain;

TEST_CASE("3-cycle has period 3 by graph, eigenvalues and evolution") {
    const Matrix m = cycle_chain(3);
    const auto dec = decompose(m);
    REQUIRE(dec.recurrent_classes.size() == 1);
    const PeriodReport rep = asymptotic_period(m, dec);
    CHECK(rep.global_period == 3);
    REQUIRE(rep.eigen_counts.has_value());
    CHECK((*rep.eigen_counts)[0] == 3);
    Vector mu = Vector::Zero(3);
    mu(0) = 1.0;
    const auto evo = distribution_evolution(m, mu, 30);
    CHECK(detect_empirical_period(std::span(evo).last(12), 1e-12) == 3);
}

TEST_CASE("lcm(2,3) block is detected as period 6") {
    const Matrix m = block_2_3();
    const auto dec = decompose(m);
    CHECK(dec.recurrent_classes.size() == 2);
    CHECK(dec.transient_states == std::vector<std::size_t>{5});
    const PeriodReport rep = asymptotic_period(m, dec);
    CHECK(rep.global_period == 6);
    Vector mu = Vector::Zero(6);
    mu(5) = 1.0;
    const auto evo = distribution_evolution(m, mu, 200);
    CHECK(detect_empirical_period(std::span(evo).last(60), 1e-6) == 6);
}

TEST_CASE("aperiodic chain settles to period 1") {
    Rng rng(4);
    const TabularMdp mdp = testing::dense_mdp(5, 1, 0.9, rng);
    const Matrix m = induced_chain(mdp, TabularPolicy::uniform(5, 1));
    const auto rep = asymptotic_period(m, decompose(m));
    CHECK(rep.global_period == 1);
    const auto evo = distribution_evolution(m, mdp.initial_dist(), 400);
    CHECK(detect_empirical_period(std::span(evo).last(40), 1e-9) == 1);
}

TEST_CASE("empirical detection fails on a transient tail") {
    const Matrix m = block_2_3();
    Vector mu = Vector::Zero(6);
    mu(5) = 1.0;
    const auto evo = distribution_evolution(m, mu, 3);
    CHECK_THROWS_AS(detect_empirical_period(std::span(evo), 1e-9), NoPeriodDetected);
}

TEST_CASE("eigenvalues agree with Eigen's solver") {
    Rng rng(31);
    for (int i = 0; i < 20; ++i) {
        const std::size_t n = 2 + rng.index(9);
        Matrix a(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        for (Eigen::Index k = 0; k < a.size(); ++k) a(k) = rng.normal();
        auto ours = eigenvalues(a);
        Eigen::EigenSolver<Matrix> es(a, false);
        std::vector<std::complex<double>> ref(es.eigenvalues().data(), es.eigenvalues().data() + n);
        auto key = [](std::complex<double> z) { return std::make_pair(std::round(z.real() * 1e6), z.imag()); };
        std::sort(ours.begin(), ours.end(), [&](auto x, auto y) { return key(x) < key(y); });
        std::sort(ref.begin(), ref.end(), [&](auto x, auto y) { return key(x) < key(y); });
        for (std::size_t k = 0; k < n; ++k) CHECK(std::abs(ours[k] - ref[k]) < 1e-8);
    }
}

TEST_CASE("graph period equals the modulus-one eigencount on random irreducible chains") {
    Rng rng(77);
    for (int i = 0; i < 50; ++i) {
        const std::size_t p = 1 + rng.index(4);
        const std::size_t n = p * (1 + rng.index(3));
        const Matrix m = periodic_chain(n, p, rng);
        const auto dec = decompose(m);
        REQUIRE(dec.recurrent_classes.size() == 1);
        const auto& cls = dec.recurrent_classes[0];
        CHECK(class_period(m, cls) == modulus_one_eigencount(submatrix(m, cls)));
        CHECK(class_period(m, cls) == p);
    }
}

TEST_CASE("stochasticity is enforced") {
    Matrix m = cycle_chain(3);
    m(0, 1) = 0.9;
    CHECK_THROWS_AS(check_stochastic(m), std::invalid_argument);
}

TEST_CASE("observed period divides the global period and equals it for generic starts") {
    const Matrix m = testing::block_2_3();
    // Stationary start: uniform over each cycle, any split between the classes.
    Vector stationary = Vector::Zero(6);
    stationary.head(2).setConstant(0.3 / 2);
    stationary.segment(2, 3).setConstant(0.7 / 3);
    const auto still = distribution_evolution(m, stationary, 120);
    CHECK(detect_empirical_period(std::span(still).last(60), 1e-12) == 1);
    Rng rng(12);
    for (int i = 0; i < 10; ++i) {
        Vector mu(6);
        for (Eigen::Index s = 0; s < 6; ++s) mu(s) = rng.uniform();
        mu /= mu.sum();
        const auto evo = distribution_evolution(m, mu, 120);
        const std::size_t p = detect_empirical_period(std::span(evo).last(60), 1e-9);
        CHECK(6 % p == 0);
        CHECK(p == 6);
    }
}
