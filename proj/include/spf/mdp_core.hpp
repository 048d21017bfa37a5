#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "spf/config.hpp"
#include "spf/rng.hpp"

namespace spf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Tolerance used when validating probability vectors.
inline constexpr double kProbTol = 1e-12;

/// Finite MDP with state-only rewards and a state embedding into R^D.
///
/// Transition storage is row-major over (s, a, s'). Chains derived from an
/// MDP use the row convention everywhere: chain(s, s') = Pr[s' | s].
class TabularMdp {
public:
    /// Throws std::invalid_argument when any invariant fails. `r_max`
    /// defaults to max |reward|; an explicit value must dominate it.
    TabularMdp(std::size_t n_states, std::size_t n_actions, std::vector<double> transition, Vector reward,
               Vector initial_dist, double gamma, Matrix embedding, std::optional<double> r_max = std::nullopt);

    /// Same as above with a one-hot embedding (D = n_states).
    static TabularMdp with_onehot(std::size_t n_states, std::size_t n_actions, std::vector<double> transition,
                                  Vector reward, Vector initial_dist, double gamma);

    std::size_t n_states() const { return n_states_; }
    std::size_t n_actions() const { return n_actions_; }
    std::size_t dim() const { return static_cast<std::size_t>(embedding_.cols()); }
    double gamma() const { return gamma_; }
    double r_max() const { return r_max_; }

    double p(std::size_t s, std::size_t a, std::size_t next) const {
        return transition_[(s * n_actions_ + a) * n_states_ + next];
    }
    std::span<const double> next_dist(std::size_t s, std::size_t a) const {
        return {transition_.data() + (s * n_actions_ + a) * n_states_, n_states_};
    }
    const std::vector<double>& transition() const { return transition_; }
    const Vector& reward() const { return reward_; }
    const Vector& initial_dist() const { return initial_dist_; }
    /// n_states x D; row s is the vector representation of state s.
    const Matrix& embedding() const { return embedding_; }

    TabularMdp with_reward(Vector reward, std::optional<double> r_max = std::nullopt) const;
    TabularMdp with_gamma(double gamma) const;
    TabularMdp with_embedding(Matrix embedding) const;
    TabularMdp with_initial_dist(Vector initial_dist) const;

private:
    std::size_t n_states_;
    std::size_t n_actions_;
    std::vector<double> transition_;
    Vector reward_;
    Vector initial_dist_;
    double gamma_;
    Matrix embedding_;
    double r_max_;
};

/// Stochastic policy pi(a|s) stored as an n_states x n_actions matrix.
class TabularPolicy {
public:
    explicit TabularPolicy(Matrix probs);

    static TabularPolicy uniform(std::size_t n_states, std::size_t n_actions);
    static TabularPolicy deterministic(std::span<const std::size_t> actions, std::size_t n_actions);

    std::size_t n_states() const { return static_cast<std::size_t>(probs_.rows()); }
    std::size_t n_actions() const { return static_cast<std::size_t>(probs_.cols()); }
    double operator()(std::size_t s, std::size_t a) const { return probs_(s, a); }
    const Matrix& probs() const { return probs_; }
    /// Most likely action in state s (lowest index on ties).
    std::size_t greedy(std::size_t s) const;

private:
    Matrix probs_;
};

/// A sampled trajectory. states has one more entry than actions: states[t+1]
/// is the successor of (states[t], actions[t]) and rewards[t] = R(states[t]).
struct Trajectory {
    std::vector<std::size_t> states;
    std::vector<std::size_t> actions;
    std::vector<double> rewards;
};

/// chain(s, s') = sum_a pi(a|s) P(s'|s,a). Throws on dimension mismatch.
Matrix induced_chain(const TabularMdp& mdp, const TabularPolicy& policy);

/// d(s) = (1 - gamma) sum_t gamma^t Pr[s_t = s], solved as (I - gamma M^T) d = (1 - gamma) mu.
Vector discounted_state_distribution(const TabularMdp& mdp, const TabularPolicy& policy);

/// V = (I - gamma M)^{-1} R for state-only rewards.
Vector state_values(const TabularMdp& mdp, const TabularPolicy& policy);

/// J(pi) = <mu, V>. Cross-checks J = <d, R> / (1 - gamma) and throws
/// std::logic_error if the two routes disagree by more than 1e-9 (scaled).
double policy_performance(const TabularMdp& mdp, const TabularPolicy& policy);

Trajectory sample_trajectory(const TabularMdp& mdp, const TabularPolicy& policy, std::size_t horizon,
                             std::uint64_t seed);
Trajectory sample_trajectory(const TabularMdp& mdp, const TabularPolicy& policy, std::size_t horizon, Rng& rng);

/// Stationary distribution of an irreducible chain (left eigenvector for 1).
Vector stationary_distribution(const Matrix& chain);

struct RandomMdpOptions {
    double gamma = 0.9;
    /// Probability that an individual (s, a, s') entry is kept in the support.
    double density = 1.0;
    double reward_scale = 1.0;
    std::size_t embedding_dim = 0;  ///< 0 selects a one-hot embedding
};

TabularMdp random_mdp(std::size_t n_states, std::size_t n_actions, const RandomMdpOptions& options, Rng& rng);
TabularPolicy random_policy(std::size_t n_states, std::size_t n_actions, Rng& rng);

/// Builds an MDP from the `[mdp]` table of a config document:
///   n_states, n_actions   integers
///   transition            n_states*n_actions*n_states numbers, (s, a, s') row-major
///   reward                n_states numbers
///   initial_dist          n_states numbers
///   gamma                 number in [0, 1)
///   embedding             "onehot" (default) or an n_states*D array (nested rows allowed)
///   r_max                 optional number
/// Policies come from `[policy]`: probs = n_states*n_actions numbers, or
/// actions = per-state action indices, or kind = "uniform".
TabularMdp mdp_from_config(const config::Table& root, const std::string& section = "mdp");
TabularPolicy policy_from_config(const config::Table& root, const TabularMdp& mdp,
                                 const std::string& section = "policy");

}  // namespace spf
