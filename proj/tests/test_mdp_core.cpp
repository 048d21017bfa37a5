#include <doctest.h>

#include <cmath>

#include "spf/mdp_core.hpp"
#include "test_helpers.hpp"

using namespace spf;

TEST_CASE("TabularMdp validates its inputs") {
    Vector r = Vector::Zero(2), mu(2);
    mu << 1.0, 0.0;
    std::vector<double> ok = {0.0, 1.0, 1.0, 0.0};
    CHECK_NOTHROW(TabularMdp::with_onehot(2, 1, ok, r, mu, 0.9));
    std::vector<double> bad_row = {0.5, 0.4, 1.0, 0.0};
    CHECK_THROWS_AS(TabularMdp::with_onehot(2, 1, bad_row, r, mu, 0.9), std::invalid_argument);
    std::vector<double> negative = {-0.1, 1.1, 1.0, 0.0};
    CHECK_THROWS_AS(TabularMdp::with_onehot(2, 1, negative, r, mu, 0.9), std::invalid_argument);
    CHECK_THROWS_AS(TabularMdp::with_onehot(2, 1, ok, r, mu, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(TabularMdp::with_onehot(2, 1, {0.0, 1.0}, r, mu, 0.9), std::invalid_argument);
    Vector bad_mu(2);
    bad_mu << 0.7, 0.7;
    CHECK_THROWS_AS(TabularMdp::with_onehot(2, 1, ok, r, bad_mu, 0.9), std::invalid_argument);
    CHECK_THROWS_AS(TabularPolicy(Matrix::Constant(2, 2, 0.6)), std::invalid_argument);
}

TEST_CASE("induced chain rows are probability vectors") {
    Rng rng(11);
    for (int i = 0; i < 10; ++i) {
        const TabularMdp mdp = testing::dense_mdp(5, 3, 0.9, rng);
        const TabularPolicy pol = random_policy(5, 3, rng);
        const Matrix chain = induced_chain(mdp, pol);
        for (Eigen::Index s = 0; s < chain.rows(); ++s) {
            CHECK(chain.row(s).sum() == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(chain.row(s).minCoeff() >= 0.0);
        }
    }
}

TEST_CASE("state values match value iteration") {
    Rng rng(5);
    const TabularMdp mdp = testing::dense_mdp(6, 2, 0.95, rng);
    const TabularPolicy pol = random_policy(6, 2, rng);
    const Matrix chain = induced_chain(mdp, pol);
    Vector v = Vector::Zero(6);
    for (int it = 0; it < 2000; ++it) v = mdp.reward() + mdp.gamma() * chain * v;
    const Vector exact = state_values(mdp, pol);
    CHECK((exact - v).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("discounted state distribution sums to one and matches the series") {
    Rng rng(8);
    const TabularMdp mdp = testing::dense_mdp(4, 2, 0.8, rng);
    const TabularPolicy pol = random_policy(4, 2, rng);
    const Vector d = discounted_state_distribution(mdp, pol);
    CHECK(d.sum() == doctest::Approx(1.0));
    const Matrix chain = induced_chain(mdp, pol);
    Vector p = mdp.initial_dist(), series = Vector::Zero(4);
    double w = 1.0 - mdp.gamma();
    for (int t = 0; t < 300; ++t, w *= mdp.gamma()) {
        series += w * p;
        p = chain.transpose() * p;
    }
    CHECK((d - series).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("policy performance agrees with Monte Carlo returns") {
    Rng rng(21);
    const TabularMdp mdp = testing::dense_mdp(4, 2, 0.9, rng);
    const TabularPolicy pol = random_policy(4, 2, rng);
    const double exact = policy_performance(mdp, pol);
    const std::size_t n = 4000, horizon = 200;
    double sum = 0.0, sum2 = 0.0;
    Rng sampler(99);
    for (std::size_t i = 0; i < n; ++i) {
        const Trajectory tr = sample_trajectory(mdp, pol, horizon, sampler);
        double g = 0.0, w = 1.0;
        for (double r : tr.rewards) {
            g += w * r;
            w *= mdp.gamma();
        }
        sum += g;
        sum2 += g * g;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum2 / n - mean * mean) / n);
    CHECK(std::abs(mean - exact) < 4.0 * se + 1e-9);
}

TEST_CASE("trajectories are reproducible from the seed") {
    Rng rng(3);
    const TabularMdp mdp = testing::dense_mdp(5, 2, 0.9, rng);
    const TabularPolicy pol = random_policy(5, 2, rng);
    const Trajectory a = sample_trajectory(mdp, pol, 50, 17);
    const Trajectory b = sample_trajectory(mdp, pol, 50, 17);
    CHECK(a.states == b.states);
    CHECK(a.actions == b.actions);
    CHECK(a.states.size() == a.actions.size() + 1);
}

TEST_CASE("mdp_from_config builds the documented layout") {
    const auto root = config::parse(R"(
[mdp]
n_states = 2
n_actions = 1
transition = [0.0, 1.0, 1.0, 0.0]
reward = [1.0, 0.0]
initial_dist = [1.0, 0.0]
gamma = 0.5
[policy]
actions = [0, 0]
)");
    const TabularMdp mdp = mdp_from_config(root);
    CHECK(mdp.p(0, 0, 1) == 1.0);
    CHECK(mdp.dim() == 2);
    const TabularPolicy pol = policy_from_config(root, mdp);
    // V(0) = 1 + 0.25 + ... = 4/3.
    CHECK(policy_performance(mdp, pol) == doctest::Approx(4.0 / 3.0));
    const auto bad = config::parse("[mdp]\nn_states = 2\nn_actions = 1\ntransition = [1.0]\n");
    CHECK_THROWS_AS(mdp_from_config(bad), config::ConfigError);
}
