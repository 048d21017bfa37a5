#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "spf/mdp_core.hpp"
#include "spf/rng.hpp"

namespace spf {

/// Largest number of length-(T+1) state paths truncated_seqdist_l1 accepts.
inline constexpr double kPathBudget = 1e7;
/// Degree and dimension caps for polynomial rewards.
inline constexpr std::size_t kMaxRewardDegree = 4;
inline constexpr std::size_t kMaxRewardDim = 4;

class BudgetExceeded : public std::invalid_argument {
public:
    BudgetExceeded(double required, double budget);
    double required() const { return required_; }

private:
    double required_;
};

/// Exact L1 distance between the laws of (s_0, ..., s_T) under two policies.
/// Walks the prefix tree depth first; a branch where one policy has zero
/// prefix mass contributes the other's mass without further expansion.
double truncated_seqdist_l1(const TabularMdp& mdp, const TabularPolicy& pi1, const TabularPolicy& pi2,
                            std::size_t horizon);

struct Theorem1Result {
    double lhs = 0.0;   ///< |J(pi1) - J(pi2)|
    double l1 = 0.0;    ///< truncated sequence-distribution distance
    double tail = 0.0;  ///< 2 R_max gamma^(T+1) / (1 - gamma)
    double rhs = 0.0;   ///< R_max / (1 - gamma) * l1 + tail
    bool holds = false; ///< lhs <= rhs + 1e-10
};

Theorem1Result verify_theorem1(const TabularMdp& mdp, const TabularPolicy& pi1, const TabularPolicy& pi2,
                               std::size_t horizon);

/// R(s) = sum_k <c_k, s^k> with elementwise powers of the state embedding.
struct PolynomialReward {
    std::vector<Vector> coefficients;  ///< c_0 .. c_n, each of length D

    std::size_t degree() const { return coefficients.empty() ? 0 : coefficients.size() - 1; }
    std::size_t dim() const { return coefficients.empty() ? 0 : static_cast<std::size_t>(coefficients[0].size()); }
    double evaluate(const Vector& s) const;
    /// Throws std::invalid_argument for degree 0, degree > 4, D > 4 or ragged coefficients.
    void validate() const;
    /// Reward of every state of `mdp`; throws if D differs from the embedding
    /// dimension or if some |R(s)| exceeds r_max (when r_max > 0).
    Vector state_rewards(const TabularMdp& mdp, double r_max = 0.0) const;
};

/// N x D matrix; row t is sum_s p_t(s) embedding(s)^k, p_t = distribution at time t.
Matrix moment_sequence(const TabularMdp& mdp, const TabularPolicy& policy, std::size_t power, std::size_t horizon);

struct DecayFit {
    bool certified = false;
    double rho = 0.0;
    double c = 0.0;
    double tail_sum = 0.0;  ///< C rho^N / (1 - rho): bound on sum_{t >= N} |delta_t|
};

/// Fits |delta_t| <= C rho^t over the second half of the rows of `diff`
/// (sup over columns). Certified when rho < 1; an identically zero tail
/// certifies with zero tail sum. Entries at or below `noise_floor` count as
/// rounding residue; 0 selects 64 eps max(1, max |diff|).
DecayFit fit_decay(const Matrix& diff, double noise_floor = 0.0);

struct Theorem3Term {
    std::size_t power = 0;
    double coef_norm = 0.0;    ///< ||c_k||_2
    double grid_max = 0.0;     ///< max over dims and M bins of |DFT of delta|
    double grid_slack = 0.0;   ///< N * dw * max_i ||delta_i||_1
    double tail = 0.0;         ///< certified tail sum
    DecayFit decay;
};

struct Theorem3Result {
    double lhs = 0.0;
    double rhs = 0.0;        ///< upper estimate of the bound (grid max + slack + tail)
    double rhs_lower = 0.0;  ///< the same with grid max - tail and no slack; the exact bound lies in between
    bool holds = false;
    bool decay_certified = false;
    std::string verdict;     ///< "holds", "violated" or "inapplicable"
    std::vector<Theorem3Term> terms;
};

Theorem3Result verify_theorem3(const TabularMdp& mdp, const TabularPolicy& pi1, const TabularPolicy& pi2,
                               const PolynomialReward& reward, std::size_t horizon, std::size_t dft_size = 4096,
                               double tolerance = 1e-10);

/// A pair of policies on one MDP, with a polynomial reward for spectral bound checks
/// (empty coefficients for instances that only check the truncated bound).
struct BoundsInstance {
    std::string name;
    TabularMdp mdp;
    TabularPolicy pi1;
    TabularPolicy pi2;
    PolynomialReward reward;
};

/// Dense random MDP with one-hot embedding and two random stochastic policies.
BoundsInstance theorem1_instance(std::size_t n_states, std::size_t n_actions, double gamma, Rng& rng);

/// Random MDP whose action kernels are doubly stochastic and primitive, with a
/// Gaussian `dim`-dimensional embedding, a point-mass start, two random
/// state-independent policies and random reward coefficients of the given
/// degree. Both induced chains have the uniform stationary distribution, so
/// the moment differences are pure transients and decay geometrically.
BoundsInstance theorem3_instance(std::size_t n_states, std::size_t n_actions, std::size_t dim, std::size_t degree,
                                 double gamma, Rng& rng);

/// Two states, action 0 swaps and action 1 stays; pi1 always swaps and pi2
/// always stays, so the moment difference oscillates forever.
BoundsInstance undecaying_instance(double gamma);

}  // namespace spf
