#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "spf/agents_envs.hpp"
#include "spf/config.hpp"
#include "spf/dtft_engine.hpp"
#include "spf/mdp_core.hpp"
#include "spf/rng.hpp"
#include "spf/tensor_nn.hpp"

namespace spf {

enum class Distance { one_minus_cosine, squared_error };

/// Three-term auxiliary loss: the lowest k_lo and highest k_hi stored bins are
/// compared raw; the bins in between go through the projection first (or are
/// compared raw too when use_projection is false).
struct FreqlossConfig {
    std::size_t k_lo = 8;
    std::size_t k_hi = 8;
    Distance distance = Distance::one_minus_cosine;
    double w_lo = 1.0;
    double w_mid = 1.0;
    double w_hi = 1.0;
    bool use_projection = true;
    double eps = 1e-8;

    /// Throws std::invalid_argument unless k_lo + k_hi < stored_bins and all weights are positive.
    void validate(std::size_t stored_bins) const;
};

enum class EncoderKind {
    densenet,     ///< MLP-DenseNet encoders for both phi_s and phi_sa
    identity,     ///< s_bar = s, z = [s || a]
    onehot_pair,  ///< s_bar = s, z = flatten(s a^T); for one-hot tabular inputs
};

struct SpfNetConfig {
    std::size_t state_dim = 1;     ///< D, also the embedding width of S-tilde
    std::size_t action_width = 1;  ///< network action input (one-hot width for discrete actions)
    bool discrete_actions = false;
    std::size_t L = 128;
    double gamma = 0.99;
    EncoderKind encoder = EncoderKind::densenet;
    std::size_t encoder_blocks = 4;
    std::size_t encoder_growth = 16;
    nn::Activation encoder_activation = nn::Activation::swish;
    std::vector<std::size_t> predictor_hidden = {128};
    nn::Activation predictor_activation = nn::Activation::relu;
    bool zero_init_heads = false;
    std::vector<std::size_t> projection_hidden = {128};
    std::size_t projection_dim = 128;
    bool projection2_identity = false;
    std::vector<std::size_t> projection2_hidden = {128};
    FreqlossConfig freqloss;

    std::size_t stored_bins() const { return L / 2 + 1; }
    void validate() const;
};

/// Online and target copies of phi_s, phi_sa, the two-headed predictor, the
/// projection psi and projection2. Parameter names are
/// "encoder_s/...", "encoder_sa/...", "predictor/trunk/...",
/// "predictor/head_re/...", "predictor/head_im/...", "projection/...", "projection2/...".
class SpfNetworks {
public:
    SpfNetworks(SpfNetConfig config, Rng& init_rng);

    const SpfNetConfig& config() const { return cfg_; }
    std::size_t rep_dim() const { return rep_dim_; }
    std::size_t z_dim() const { return z_dim_; }
    std::size_t head_width() const { return cfg_.stored_bins() * cfg_.state_dim; }
    std::size_t mid_width() const;

    nn::ParamTree online;
    nn::ParamTree target;

    nn::ParamTree& tree(bool use_target) { return use_target ? target : online; }

    struct Outputs {
        nn::Var s_bar;
        nn::Var z;
        nn::Var re;  ///< B x head_width, bin-major (bin k occupies columns k*D .. k*D + D - 1)
        nn::Var im;
    };

    nn::Var encode_state(nn::ParamTree& params, nn::Tape& tape, nn::Var obs, bool trainable);
    nn::Var encode_pair(nn::ParamTree& params, nn::Tape& tape, nn::Var s_bar, nn::Var action, bool trainable);
    Outputs forward(nn::ParamTree& params, nn::Tape& tape, nn::Var obs, nn::Var action, bool trainable);
    nn::Var project(nn::ParamTree& params, nn::Tape& tape, nn::Var mid, bool trainable);
    nn::Var project2(nn::ParamTree& params, nn::Tape& tape, nn::Var x, bool trainable);

    /// Value-only helpers (no gradient tracking).
    Matrix state_rep(const Matrix& obs, bool use_target = false);
    Matrix pair_rep(const Matrix& s_bar, const Matrix& action_in, bool use_target = false);
    /// Raw actions -> network action input (one-hot for discrete actions).
    Matrix action_input(const Matrix& raw_actions) const;

private:
    SpfNetConfig cfg_;
    nn::LayerStack enc_s_;
    nn::LayerStack enc_sa_;
    nn::LayerStack trunk_;
    nn::LayerStack head_;
    nn::LayerStack proj_;
    nn::LayerStack proj2_;
    std::size_t rep_dim_ = 0;
    std::size_t z_dim_ = 0;
};

struct DtftPrediction {
    Matrix re;  ///< stored_bins x D
    Matrix im;

    /// As a DtftMatrix over the stored bins.
    DtftMatrix to_dtft() const;
};

/// Prediction for one (state observation, raw action).
DtftPrediction predict_dtft(SpfNetworks& nets, bool use_target, const Vector& observation, const Vector& raw_action);

struct TdTarget {
    Matrix re;  ///< B x head_width
    Matrix im;
};

/// S-tilde + Gamma F-hat split into real and imaginary parts, with F-hat from
/// the target networks at (next_obs, next_action). S-tilde repeats the raw
/// next observation in every bin. Throws if L differs from the network's L.
TdTarget build_td_target(SpfNetworks& nets, const Matrix& next_obs, const Matrix& next_raw_actions, double gamma,
                         std::size_t L);

struct FreqlossTerms {
    nn::Var total;
    double lo = 0.0;
    double mid = 0.0;
    double hi = 0.0;
};

/// Adds the freqloss graph to `tape`. The target-side projection runs on the
/// target parameters and is detached; projection2 is applied online only.
FreqlossTerms freqloss(nn::Var pred_re, nn::Var pred_im, const Matrix& target_re, const Matrix& target_im,
                       SpfNetworks& nets, const FreqlossConfig& cfg, nn::Tape& tape);

struct ReplayBatch {
    Matrix obs;
    Matrix actions;  ///< raw actions (discrete: index in column 0)
    Matrix next_obs;
    Vector rewards;
    Vector terminals;
    std::vector<std::size_t> states;  ///< tabular indices, empty for continuous envs
    std::vector<std::size_t> next_states;
};

/// Fixed-capacity ring buffer of (s, a, s', r) with optional tabular indices.
class ReplayBuffer {
public:
    ReplayBuffer(std::size_t capacity, std::size_t obs_dim, std::size_t action_dim);

    void add(const Vector& obs, const Vector& action, const Vector& next_obs, double reward, bool terminal,
             std::optional<std::size_t> state = std::nullopt, std::optional<std::size_t> next_state = std::nullopt);
    std::size_t size() const { return size_; }
    std::size_t capacity() const { return capacity_; }
    /// Uniform sample with replacement over the filled slots.
    ReplayBatch sample(std::size_t n, Rng& rng) const;

    void save(nn::Checkpoint& ckpt, const std::string& prefix) const;
    void load(const nn::Checkpoint& ckpt, const std::string& prefix);

private:
    std::size_t capacity_;
    std::size_t obs_dim_;
    std::size_t action_dim_;
    std::size_t size_ = 0;
    std::size_t next_ = 0;
    Matrix obs_, actions_, next_obs_;
    Vector rewards_, terminals_, states_, next_states_;  ///< indices stored as doubles, -1 when absent
};

/// Supplies the deterministic bootstrap action for each next state of a batch.
using BootstrapPolicy = std::function<Matrix(const ReplayBatch& batch, const Matrix& s_bar_next)>;

struct AuxStepResult {
    bool performed = false;
    double loss = 0.0;
    double lo = 0.0;
    double mid = 0.0;
    double hi = 0.0;
};

/// One Adam step on L_pred over the online tree. Skips (performed = false)
/// when the buffer holds fewer than batch_size transitions.
AuxStepResult auxiliary_step(SpfNetworks& nets, const ReplayBuffer& buffer, std::size_t batch_size,
                             nn::AdamState& adam, const nn::AdamConfig& adam_cfg, Rng& rng,
                             const BootstrapPolicy& policy);

/// Same loss on a given batch; used by auxiliary_step and the gradient checks.
AuxStepResult auxiliary_loss_and_grad(SpfNetworks& nets, const ReplayBatch& batch, const BootstrapPolicy& policy,
                                      nn::Tape& tape);

/// EMA of every target tensor when interval > 0 and step % interval == 0.
/// Returns whether an update happened.
bool target_sync(SpfNetworks& nets, double tau, std::uint64_t step, std::uint64_t interval);

struct GradientRouting {
    double max_encoder_grad_from_rl = 0.0;  ///< must be exactly 0
    double max_target_grad_from_aux = 0.0;  ///< must be exactly 0
    double max_online_grad_from_aux = 0.0;  ///< sanity: nonzero
    double max_rl_head_grad = 0.0;          ///< sanity: nonzero
};

/// Builds the RL losses of `agent` on representations detached from the
/// online encoders (same tape), and the auxiliary loss against the target
/// networks, then reports the largest gradient magnitudes reaching each group.
GradientRouting inspect_gradient_routing(SpfNetworks& nets, GaussianActorCritic& agent, const ReplayBatch& batch,
                                         Rng& rng);

struct TrainConfig {
    std::string profile = "desk";
    double gamma = 0.99;
    std::size_t total_steps = 20000;
    std::size_t pretrain_steps = 1000;
    std::size_t batch_size = 64;
    std::size_t buffer_capacity = 20000;
    std::size_t target_interval = 200;
    double tau = 0.01;
    nn::AdamConfig aux_adam{3e-4};
    bool aux_updates = true;
    bool agent_updates = true;
    std::size_t eval_episodes = 10;
    std::size_t eval_interval = 0;  ///< 0: evaluate only at the end
    std::size_t log_interval = 1;
    std::size_t checkpoint_interval = 0;
    std::size_t threads = 1;
    std::uint64_t seed = 0;
    SpfNetConfig net;
};

/// Resolves the `[train]`, `[net]` and `[freqloss]` tables for `profile`
/// ("desk" or "paper") on top of the profile defaults. Needs the env for the
/// state and action widths.
TrainConfig train_config_from(const config::Table& root, const std::string& profile, const Env& env);

struct MetricRow {
    std::uint64_t step = 0;
    bool aux_performed = false;  ///< false while the buffer is below one batch
    double loss = 0.0;
    double lo = 0.0;
    double mid = 0.0;
    double hi = 0.0;
    std::optional<double> episodic_return;
};

struct TrainRun {
    std::vector<MetricRow> metrics;
    std::vector<double> episode_returns;
    std::vector<double> eval_returns;  ///< every evaluation episode in order
    std::vector<std::uint64_t> eval_steps;  ///< training step of each entry of eval_returns
    std::vector<double> entropy_trace; ///< policy entropy after each agent update batch, when available
    std::uint64_t steps_done = 0;
};

/// Training loop with pretraining. Owns the env, agent, networks, buffer,
/// optimiser and all random streams so that a checkpoint captures the whole
/// state and resuming reproduces an uninterrupted run exactly.
class Trainer {
public:
    Trainer(TrainConfig cfg, std::unique_ptr<Env> env, std::unique_ptr<Agent> agent, std::unique_ptr<SpfNetworks> nets);

    /// Runs until `steps_done == until` (clamped to total_steps). Metric rows
    /// for the new steps are appended to run().
    void run_until(std::uint64_t until);
    void run() { run_until(cfg_.total_steps); }
    /// Evaluates the current policy for `episodes` episodes (parallel, snapshot based).
    std::vector<double> evaluate(std::size_t episodes, std::uint64_t seed_offset);

    void save(const std::string& base_path) const;
    void load(const std::string& base_path);

    const TrainRun& trace() const { return run_; }
    const TrainConfig& config() const { return cfg_; }
    SpfNetworks& nets() { return *nets_; }
    Agent& agent() { return *agent_; }
    Env& env() { return *env_; }
    /// Called after every step (for periodic checkpoints from the CLI).
    std::function<void(Trainer&, std::uint64_t)> on_step;

private:
    AgentObs observe(const Vector& obs, std::optional<std::size_t> state);
    Matrix bootstrap_actions(const ReplayBatch& batch, const Matrix& s_bar_next) const;

    TrainConfig cfg_;
    std::unique_ptr<Env> env_;
    std::unique_ptr<Agent> agent_;
    std::unique_ptr<SpfNetworks> nets_;
    ReplayBuffer buffer_;
    nn::AdamState aux_adam_;
    Rng env_rng_;
    Rng agent_rng_;
    Rng sample_rng_;
    Vector obs_;
    double episode_return_ = 0.0;
    bool episode_open_ = false;
    TrainRun run_;
};

/// Env, agent and networks from a training config, seeded from cfg.seed.
std::unique_ptr<Trainer> make_trainer(const config::Table& root, const std::string& profile, std::uint64_t seed);

/// Tabular convergence harness: deterministic MDP, fixed deterministic
/// policy, one-hot pair encoder and linear predictor, trained by the regular
/// loop with a frozen Q agent; compared against the exact fixed point.
struct HarnessConfig {
    std::size_t n_states = 4;
    std::size_t n_actions = 2;
    double gamma = 0.9;
    std::size_t L = 16;
    Distance distance = Distance::squared_error;
    std::size_t updates = 20000;
    std::size_t batch_size = 32;
    double lr = 1e-2;
    /// Large eps turns Adam into plain gradient descent near the fixed point,
    /// which removes the sign-step jitter that otherwise floors the error at about lr.
    double adam_eps = 1e-2;
    double tau = 1.0;
    std::size_t target_interval = 100;
    std::uint64_t seed = 1;
};

struct HarnessResult {
    double sup_error = 0.0;          ///< field-norm distance to the exact field
    double directional_error = 0.0;  ///< max over (s, a) of || F/|F| - F*/|F*| ||
    /// Same, per compared vector of the loss (each band of the real and imaginary parts).
    double band_directional_error = 0.0;
    double first_loss = 0.0;
    double last_loss = 0.0;
    std::vector<double> loss_trace;
};

/// The MDP used by the harness: next state (s + a + 1) mod n_states, one-hot embedding.
TabularMdp harness_mdp(const HarnessConfig& cfg);
std::vector<std::size_t> harness_policy(const HarnessConfig& cfg);
HarnessResult run_tabular_harness(const HarnessConfig& cfg);

}  // namespace spf
