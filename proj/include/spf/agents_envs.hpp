#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "spf/config.hpp"
#include "spf/mdp_core.hpp"
#include "spf/rng.hpp"
#include "spf/tensor_nn.hpp"

namespace spf {

struct ActionSpace {
    bool discrete = true;
    std::size_t n = 1;  ///< action count (discrete) or dimension (continuous)
    double low = -1.0;
    double high = 1.0;

    /// Width of the action vector fed to networks: n for both kinds
    /// (discrete actions are one-hot encoded).
    std::size_t input_width() const { return n; }
};

struct StepResult {
    Vector observation;
    double reward = 0.0;
    bool done = false;
    bool clipped = false;  ///< the action was outside the box and got clipped
};

/// Environment with vector observations. Discrete actions are passed as a
/// one-element vector holding the index.
class Env {
public:
    virtual ~Env() = default;

    virtual std::string kind() const = 0;
    virtual std::size_t state_dim() const = 0;
    virtual ActionSpace action_space() const = 0;
    virtual std::size_t horizon() const = 0;

    virtual Vector reset(Rng& rng) = 0;
    virtual StepResult step(const Vector& action, Rng& rng) = 0;
    virtual Vector observation() const = 0;
    /// State index for tabular environments, nullopt otherwise.
    virtual std::optional<std::size_t> state_index() const { return std::nullopt; }
    std::size_t steps_taken() const { return t_; }

    /// Opaque snapshot of the internal state, for exact resume.
    virtual std::vector<double> save_state() const = 0;
    virtual void load_state(const std::vector<double>& state) = 0;
    virtual std::unique_ptr<Env> clone() const = 0;

    std::size_t clip_count() const { return clip_count_; }

protected:
    std::size_t t_ = 0;
    std::size_t clip_count_ = 0;
};

/// Samples transitions of a TabularMdp; observation = embedding row of the
/// current state, reward = R(current state).
class TabularEnv : public Env {
public:
    TabularEnv(TabularMdp mdp, std::size_t horizon, std::string kind = "tabular_from_mdp");

    std::string kind() const override { return kind_; }
    std::size_t state_dim() const override { return mdp_.dim(); }
    ActionSpace action_space() const override { return {true, mdp_.n_actions(), 0.0, 0.0}; }
    std::size_t horizon() const override { return horizon_; }

    Vector reset(Rng& rng) override;
    StepResult step(const Vector& action, Rng& rng) override;
    Vector observation() const override;
    std::optional<std::size_t> state_index() const override { return state_; }

    std::vector<double> save_state() const override;
    void load_state(const std::vector<double>& state) override;
    std::unique_ptr<Env> clone() const override { return std::make_unique<TabularEnv>(*this); }

    const TabularMdp& mdp() const { return mdp_; }
    /// Puts the environment in state s at time 0.
    void set_state(std::size_t s);

private:
    TabularMdp mdp_;
    std::size_t horizon_;
    std::string kind_;
    std::size_t state_ = 0;
};

struct CycleWalkOptions {
    std::size_t period = 3;
    std::size_t n_actions = 2;
    /// Autonomous: every action advances. Otherwise action 0 advances and
    /// any other action stays put.
    bool autonomous = true;
    /// "onehot" or "scalar" (state s observed as the real number s).
    std::string embedding = "onehot";
    double gamma = 0.99;
    std::size_t start_state = 0;
};

TabularMdp cycle_walk_mdp(const CycleWalkOptions& options);

enum class Integrator { semi_implicit_euler, verlet };

struct PendulumOptions {
    double g = 10.0;
    double l = 1.0;
    double m = 1.0;
    double dt = 0.05;
    double max_torque = 2.0;
    double max_speed = 8.0;
    double damping = 0.0;  ///< viscous term -damping * theta_dot added to the acceleration
    Integrator integrator = Integrator::semi_implicit_euler;
    std::size_t substeps = 1;  ///< integrator substeps per dt
    bool clip_speed = true;
    std::size_t horizon = 200;
};

/// Inverted pendulum (swing-up). theta = 0 is upright. Observation is
/// (cos theta, sin theta, theta_dot); the reward for a step is computed on the
/// pre-step state: -(wrap(theta)^2 + 0.1 theta_dot^2 + 0.001 u^2).
class PendulumEnv : public Env {
public:
    explicit PendulumEnv(PendulumOptions options = {});

    std::string kind() const override { return "pendulum"; }
    std::size_t state_dim() const override { return 3; }
    ActionSpace action_space() const override { return {false, 1, -opt_.max_torque, opt_.max_torque}; }
    std::size_t horizon() const override { return opt_.horizon; }

    Vector reset(Rng& rng) override;
    StepResult step(const Vector& action, Rng& rng) override;
    Vector observation() const override;

    std::vector<double> save_state() const override { return {theta_, theta_dot_, static_cast<double>(t_)}; }
    void load_state(const std::vector<double>& state) override;
    std::unique_ptr<Env> clone() const override { return std::make_unique<PendulumEnv>(*this); }

    void set_state(double theta, double theta_dot);
    double theta() const { return theta_; }
    double theta_dot() const { return theta_dot_; }
    /// Rod energy with theta = 0 upright: (m l^2 / 6) theta_dot^2 + (m g l / 2) cos theta.
    double energy() const;
    const PendulumOptions& options() const { return opt_; }

private:
    double acceleration(double theta, double theta_dot, double u) const;

    PendulumOptions opt_;
    double theta_ = 0.0;
    double theta_dot_ = 0.0;
};

double wrap_angle(double theta);

/// Builds an environment from the `[env]` table: kind = "tabular_from_mdp"
/// (uses `[mdp]`), "cycle_walk" or "pendulum".
std::unique_ptr<Env> env_from_config(const config::Table& root);

/// Detached representations handed to an agent update. Rows are batch items.
struct RepBatch {
    Matrix s_bar;       ///< phi_s(s)
    Matrix z;           ///< phi_sa(phi_s(s), a)
    Matrix s_bar_next;  ///< phi_s(s')
    Matrix actions;     ///< raw actions (discrete: one column holding the index)
    Vector rewards;
    Vector dones;
    std::vector<std::size_t> states;       ///< tabular indices, empty otherwise
    std::vector<std::size_t> next_states;
    /// Encodes (s_bar rows, action rows) into detached z rows.
    std::function<Matrix(const Matrix&, const Matrix&)> encode_sa;
};

struct AgentStats {
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    double entropy = 0.0;
};

struct AgentObs {
    Vector observation;
    Vector s_bar;
    std::optional<std::size_t> state;
};

class Agent {
public:
    virtual ~Agent() = default;
    virtual std::string kind() const = 0;
    /// Behaviour action (exploration when `explore`).
    virtual Vector act(const AgentObs& obs, Rng& rng, bool explore) = 0;
    /// Deterministic action used on the bootstrap side of the auxiliary target.
    virtual Vector policy_action(const AgentObs& obs) const = 0;
    /// Batched policy_action: one row per entry of s_bar (and of `states` for tabular agents).
    virtual Matrix policy_actions(const Matrix& s_bar, const std::vector<std::size_t>& states) const = 0;
    virtual AgentStats update(const RepBatch& batch, Rng& rng) = 0;
    /// Every learnable quantity, for checkpoints and snapshots.
    virtual nn::ParamTree& params() = 0;
    virtual std::unique_ptr<Agent> clone() const = 0;
    /// Full learning state (parameters and optimiser moments).
    virtual void save(nn::Checkpoint& ckpt, const std::string& prefix) const;
    virtual void load(const nn::Checkpoint& ckpt, const std::string& prefix);
};

struct TabularQOptions {
    std::size_t n_states = 0;
    std::size_t n_actions = 0;
    double lr = 0.1;
    double gamma = 0.99;
    double epsilon = 0.1;
    /// Optional initial greedy action per state (Q starts at 1 there, 0 elsewhere).
    std::vector<std::size_t> initial_greedy;
};

/// Tabular Q-learning keyed by the environment's state index.
class TabularQAgent : public Agent {
public:
    explicit TabularQAgent(TabularQOptions options);

    std::string kind() const override { return "tabular_q"; }
    Vector act(const AgentObs& obs, Rng& rng, bool explore) override;
    Vector policy_action(const AgentObs& obs) const override;
    Matrix policy_actions(const Matrix& s_bar, const std::vector<std::size_t>& states) const override;
    AgentStats update(const RepBatch& batch, Rng& rng) override;
    nn::ParamTree& params() override { return params_; }
    std::unique_ptr<Agent> clone() const override { return std::make_unique<TabularQAgent>(*this); }

    /// One Q-learning step; returns the TD error.
    double update_transition(std::size_t s, std::size_t a, double r, std::size_t next, bool terminal);
    double q(std::size_t s, std::size_t a) const;
    std::size_t greedy(std::size_t s) const;
    const TabularQOptions& options() const { return opt_; }

private:
    TabularQOptions opt_;
    nn::ParamTree params_;  ///< "q": n_states x n_actions
};

struct ActorCriticOptions {
    std::size_t rep_dim = 0;   ///< width of s_bar
    std::size_t z_dim = 0;     ///< width of z
    std::size_t action_dim = 1;
    double action_low = -1.0;
    double action_high = 1.0;
    std::vector<std::size_t> actor_hidden = {64, 64};
    std::vector<std::size_t> critic_hidden = {128, 128};
    double actor_lr = 3e-4;
    double critic_lr = 3e-4;
    double gamma = 0.99;
    double critic_tau = 0.005;
    std::size_t action_samples = 8;  ///< actions sampled per state for the advantage estimate
    double entropy_coef = 0.0;
    double init_log_std = 0.0;
    double min_log_std = -5.0;
    double max_log_std = 1.0;
};

/// Gaussian policy on s_bar with a tanh-squashed mean, and a Q critic on z.
/// The critic takes one TD step against an EMA target critic; the actor
/// takes one score-function step weighted by advantages of sampled actions
/// relative to their per-state mean Q.
class GaussianActorCritic : public Agent {
public:
    GaussianActorCritic(ActorCriticOptions options, Rng& init_rng);

    std::string kind() const override { return "gaussian_actor_critic"; }
    Vector act(const AgentObs& obs, Rng& rng, bool explore) override;
    Vector policy_action(const AgentObs& obs) const override;
    Matrix policy_actions(const Matrix& s_bar, const std::vector<std::size_t>& states) const override;
    AgentStats update(const RepBatch& batch, Rng& rng) override;
    nn::ParamTree& params() override { return params_; }
    std::unique_ptr<Agent> clone() const override { return std::make_unique<GaussianActorCritic>(*this); }
    void save(nn::Checkpoint& ckpt, const std::string& prefix) const override;
    void load(const nn::Checkpoint& ckpt, const std::string& prefix) override;

    /// Policy mean for each row of s_bar (B x action_dim).
    Matrix mean_actions(const Matrix& s_bar) const;
    Vector log_std() const;
    /// Differential entropy of the (unsquashed) Gaussian.
    double entropy() const;
    /// Q(z) for each row.
    Vector critic_values(const Matrix& z, bool target = false) const;
    const ActorCriticOptions& options() const { return opt_; }

    /// Mean squared TD error of the online critic on z against fixed targets y.
    nn::Var critic_loss(nn::Tape& tape, nn::Var z, const Vector& y);
    /// -mean(adv * log pi(sample | s_rep)) - entropy_coef * sum(log_std).
    nn::Var actor_loss(nn::Tape& tape, nn::Var s_rep, const Matrix& samples, const Vector& adv);

    nn::AdamState& actor_adam() { return actor_adam_; }
    nn::AdamState& critic_adam() { return critic_adam_; }

private:
    ActorCriticOptions opt_;
    nn::LayerStack actor_stack_;
    nn::LayerStack critic_stack_;
    nn::ParamTree params_;  ///< actor/..., log_std, critic/..., critic_target/...
    nn::AdamState actor_adam_;
    nn::AdamState critic_adam_;
};

/// Builds the agent named in `[agent]` for `env`. Representation widths
/// come from the caller; for tabular_q they are ignored.
std::unique_ptr<Agent> agent_from_config(const config::Table& root, const Env& env, std::size_t rep_dim,
                                         std::size_t z_dim, double gamma, Rng& init_rng);

struct BaselineStats {
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> returns;
};

/// Uniform-random policy returns over `episodes` episodes of `env`.
BaselineStats random_policy_baseline(const Env& env, std::size_t episodes, std::uint64_t seed);

}  // namespace spf
