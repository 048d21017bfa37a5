#include <doctest.h>

#include <cmath>
#include <functional>

#include "spf/bounds_lab.hpp"
#include "test_helpers.hpp"

using namespace spf;

namespace {

// Oracle: enumerate every state path of length T+1 and sum |P1 - P2|.
double brute_force_l1(const TabularMdp& mdp, const TabularPolicy& pi1, const TabularPolicy& pi2, std::size_t T) {
    const Matrix c1 = induced_chain(mdp, pi1), c2 = induced_chain(mdp, pi2);
    const std::size_t S = mdp.n_states();
    double total = 0.0;
    std::function<void(std::size_t, std::size_t, double, double)> walk = [&](std::size_t depth, std::size_t s,
                                                                            double p1, double p2) {
        if (depth == T) {
            total += std::abs(p1 - p2);
            return;
        }
        for (std::size_t t = 0; t < S; ++t)
            walk(depth + 1, t, p1 * c1(Eigen::Index(s), Eigen::Index(t)), p2 * c2(Eigen::Index(s), Eigen::Index(t)));
    };
    for (std::size_t s = 0; s < S; ++s) walk(0, s, mdp.initial_dist()(Eigen::Index(s)), mdp.initial_dist()(Eigen::Index(s)));
    return total;
}

}  // namespace

TEST_CASE("truncated sequence distance matches enumeration") {
    Rng rng(10);
    for (int i = 0; i < 10; ++i) {
        const TabularMdp mdp = testing::dense_mdp(3, 2, 0.9, rng);
        const TabularPolicy a = random_policy(3, 2, rng), b = random_policy(3, 2, rng);
        CHECK(std::abs(truncated_seqdist_l1(mdp, a, b, 4) - brute_force_l1(mdp, a, b, 4)) < 1e-12);
    }
}

TEST_CASE("sequence distance edge cases") {
    Rng rng(1);
    const TabularMdp mdp = testing::dense_mdp(3, 2, 0.9, rng);
    const TabularPolicy a = random_policy(3, 2, rng);
    CHECK(truncated_seqdist_l1(mdp, a, a, 6) == doctest::Approx(0.0));
    // Action 0 goes to state 1, action 1 to state 2; both absorbing.
    std::vector<double> p = {0, 1, 0, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 1};
    Vector mu(3);
    mu << 1, 0, 0;
    const TabularMdp split = TabularMdp::with_onehot(3, 2, p, Vector::Zero(3), mu, 0.9);
    const std::vector<std::size_t> left = {0, 0, 0}, right = {1, 1, 1};
    CHECK(truncated_seqdist_l1(split, TabularPolicy::deterministic(left, 2), TabularPolicy::deterministic(right, 2),
                               5) == doctest::Approx(2.0));
    const TabularMdp big = testing::dense_mdp(10, 2, 0.9, rng);
    CHECK_THROWS_AS(truncated_seqdist_l1(big, random_policy(10, 2, rng), random_policy(10, 2, rng), 7), BudgetExceeded);
}

TEST_CASE("truncated sequence bound holds on random instances") {
    Rng rng(100);
    const double gammas[] = {0.8, 0.9, 0.95};
    for (int i = 0; i < 100; ++i) {
        const auto inst = theorem1_instance(3, 2, gammas[i % 3], rng);
        const auto r = verify_theorem1(inst.mdp, inst.pi1, inst.pi2, 8);
        CHECK(r.holds);
        CHECK(r.rhs - r.lhs >= 0.0);
    }
}

TEST_CASE("identical policies leave only the tail term") {
    Rng rng(2);
    const auto inst = theorem1_instance(3, 2, 0.9, rng);
    const auto r = verify_theorem1(inst.mdp, inst.pi1, inst.pi1, 8);
    CHECK(r.lhs == doctest::Approx(0.0));
    CHECK(r.rhs == doctest::Approx(r.tail));
}

TEST_CASE("a zero-reward region makes the truncated bound loose") {
    // State 0 moves to 1 or 2 depending on the action; both are absorbing and unrewarded.
    std::vector<double> p = {0, 1, 0, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 1};
    Vector mu(3), r(3);
    mu << 1, 0, 0;
    r << 1, 0, 0;
    const TabularMdp mdp = TabularMdp::with_onehot(3, 2, p, r, mu, 0.9);
    const std::vector<std::size_t> left = {0, 0, 0}, right = {1, 1, 1};
    const auto res = verify_theorem1(mdp, TabularPolicy::deterministic(left, 2), TabularPolicy::deterministic(right, 2), 6);
    CHECK(res.lhs == doctest::Approx(0.0));
    CHECK(res.rhs > 1.0);
}

TEST_CASE("truncated bound right-hand side does not grow with T while the L1 term is fixed") {
    const std::vector<double> p = {0, 1, 0, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 1};
    Vector mu(3), r(3);
    mu << 1, 0, 0;
    r << 0, 1, -1;
    const TabularMdp mdp = TabularMdp::with_onehot(3, 2, p, r, mu, 0.9);
    const std::vector<std::size_t> left = {0, 0, 0}, right = {1, 1, 1};
    const auto pi1 = TabularPolicy::deterministic(left, 2), pi2 = TabularPolicy::deterministic(right, 2);
    for (std::size_t T = 1; T < 10; ++T) {
        const auto a = verify_theorem1(mdp, pi1, pi2, T), b = verify_theorem1(mdp, pi1, pi2, T + 1);
        if (std::abs(a.l1 - b.l1) < 1e-15) CHECK(b.rhs <= a.rhs + 1e-12);
    }
}

TEST_CASE("moment sequences match Monte Carlo estimates") {
    Rng rng(55);
    const TabularMdp mdp = testing::dense_mdp(4, 2, 0.9, rng, 2);
    const TabularPolicy pol = random_policy(4, 2, rng);
    const Matrix m2 = moment_sequence(mdp, pol, 2, 6);
    const std::size_t n = 20000;
    Matrix sum = Matrix::Zero(6, 2), sum2 = Matrix::Zero(6, 2);
    Rng sampler(7);
    for (std::size_t i = 0; i < n; ++i) {
        const Trajectory tr = sample_trajectory(mdp, pol, 5, sampler);
        for (Eigen::Index t = 0; t < 6; ++t) {
            const auto x = mdp.embedding().row(Eigen::Index(tr.states[std::size_t(t)])).array().square().matrix();
            sum.row(t) += x;
            sum2.row(t) += x.array().square().matrix();
        }
    }
    for (Eigen::Index t = 0; t < 6; ++t)
        for (Eigen::Index d = 0; d < 2; ++d) {
            const double mean = sum(t, d) / n;
            const double se = std::sqrt(std::max(sum2(t, d) / n - mean * mean, 0.0) / n);
            CHECK(std::abs(mean - m2(t, d)) <= 3.0 * se + 1e-12);
        }
}

TEST_CASE("spectral bound holds on certified instances, with per-power terms") {
    Rng rng(9);
    std::size_t certified = 0;
    for (int i = 0; i < 24; ++i) {
        const auto inst = theorem3_instance(4, 2, 2, 1 + std::size_t(i % 2), i % 2 ? 0.9 : 0.5, rng);
        const auto r = verify_theorem3(inst.mdp, inst.pi1, inst.pi2, inst.reward, 300, 2048);
        CHECK(r.verdict != "violated");
        if (r.decay_certified) {
            ++certified;
            CHECK(r.holds);
            CHECK(r.terms.size() == inst.reward.degree());
            for (const auto& t : r.terms) CHECK(t.grid_max > 0.0);
        }
    }
    CHECK(certified >= 20);
}

TEST_CASE("identical policies give a zero spectral bound") {
    Rng rng(4);
    const auto inst = theorem3_instance(4, 2, 2, 2, 0.9, rng);
    const auto r = verify_theorem3(inst.mdp, inst.pi1, inst.pi1, inst.reward, 200);
    CHECK(r.lhs == doctest::Approx(0.0));
    CHECK(r.rhs == doctest::Approx(0.0));
    CHECK(r.verdict == "holds");
}

TEST_CASE("an oscillating moment difference is reported inapplicable") {
    const auto inst = undecaying_instance(0.9);
    const auto r = verify_theorem3(inst.mdp, inst.pi1, inst.pi2, inst.reward, 200);
    CHECK_FALSE(r.decay_certified);
    CHECK(r.verdict == "inapplicable");
}

TEST_CASE("decay fit recovers a geometric rate") {
    Matrix d(100, 1);
    for (Eigen::Index t = 0; t < 100; ++t) d(t, 0) = 3.0 * std::pow(0.7, double(t)) * (t % 2 ? -1 : 1);
    const DecayFit fit = fit_decay(d);
    CHECK(fit.certified);
    CHECK(fit.rho == doctest::Approx(0.7).epsilon(1e-3));
    CHECK(fit.tail_sum >= 0.0);
}

TEST_CASE("polynomial rewards validate") {
    PolynomialReward r;
    CHECK_THROWS_AS(r.validate(), std::invalid_argument);
    r.coefficients = {Vector::Zero(2), Vector::Ones(2)};
    CHECK_NOTHROW(r.validate());
    Vector s(2);
    s << 2.0, -1.0;
    CHECK(r.evaluate(s) == doctest::Approx(1.0));
    r.coefficients.push_back(Vector::Ones(3));
    CHECK_THROWS_AS(r.validate(), std::invalid_argument);
}
