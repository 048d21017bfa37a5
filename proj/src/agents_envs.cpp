#include "spf/agents_envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace spf {

using config::ConfigError;

// ---- Tabular environments ---------------------------------------------------

TabularEnv::TabularEnv(TabularMdp mdp, std::size_t horizon, std::string kind)
    : mdp_(std::move(mdp)), horizon_(horizon), kind_(std::move(kind)) {
    if (horizon_ == 0) throw std::invalid_argument("TabularEnv: horizon must be >= 1");
}

Vector TabularEnv::reset(Rng& rng) {
    const Vector& mu = mdp_.initial_dist();
    state_ = rng.categorical(std::span<const double>(mu.data(), static_cast<std::size_t>(mu.size())));
    t_ = 0;
    return observation();
}

void TabularEnv::set_state(std::size_t s) {
    if (s >= mdp_.n_states()) throw std::invalid_argument("TabularEnv::set_state: state out of range");
    state_ = s;
    t_ = 0;
}

StepResult TabularEnv::step(const Vector& action, Rng& rng) {
    if (action.size() != 1) throw std::invalid_argument("TabularEnv::step: expected a one-element action");
    StepResult r;
    double raw = std::round(action(0));
    const double hi = static_cast<double>(mdp_.n_actions() - 1);
    if (raw < 0.0 || raw > hi) {
        raw = std::clamp(raw, 0.0, hi);
        r.clipped = true;
        ++clip_count_;
    }
    const auto a = static_cast<std::size_t>(raw);
    r.reward = mdp_.reward()(static_cast<Eigen::Index>(state_));
    state_ = rng.categorical(mdp_.next_dist(state_, a));
    ++t_;
    r.observation = observation();
    r.done = t_ >= horizon_;
    return r;
}

Vector TabularEnv::observation() const { return mdp_.embedding().row(static_cast<Eigen::Index>(state_)).transpose(); }

std::vector<double> TabularEnv::save_state() const {
    return {static_cast<double>(state_), static_cast<double>(t_)};
}

void TabularEnv::load_state(const std::vector<double>& state) {
    if (state.size() != 2) throw std::invalid_argument("TabularEnv::load_state: bad snapshot");
    state_ = static_cast<std::size_t>(state[0]);
    t_ = static_cast<std::size_t>(state[1]);
}

TabularMdp cycle_walk_mdp(const CycleWalkOptions& o) {
    if (o.period < 1) throw std::invalid_argument("cycle_walk: period must be >= 1");
    if (o.n_actions < 1) throw std::invalid_argument("cycle_walk: n_actions must be >= 1");
    if (o.start_state >= o.period) throw std::invalid_argument("cycle_walk: start_state out of range");
    const std::size_t S = o.period, A = o.n_actions;
    std::vector<double> p(S * A * S, 0.0);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) {
            const std::size_t next = (o.autonomous || a == 0) ? (s + 1) % S : s;
            p[(s * A + a) * S + next] = 1.0;
        }
    Matrix emb;
    if (o.embedding == "onehot") {
        emb = Matrix::Identity(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(S));
    } else if (o.embedding == "scalar") {
        emb.resize(static_cast<Eigen::Index>(S), 1);
        for (std::size_t s = 0; s < S; ++s) emb(static_cast<Eigen::Index>(s), 0) = static_cast<double>(s);
    } else {
        throw std::invalid_argument("cycle_walk: embedding must be \"onehot\" or \"scalar\"");
    }
    Vector mu = Vector::Zero(static_cast<Eigen::Index>(S));
    mu(static_cast<Eigen::Index>(o.start_state)) = 1.0;
    return TabularMdp(S, A, std::move(p), Vector::Zero(static_cast<Eigen::Index>(S)), mu, o.gamma, emb);
}

// ---- Pendulum ---------------------------------------------------------------

double wrap_angle(double theta) {
    const double two_pi = 2.0 * std::numbers::pi;
    double w = std::fmod(theta + std::numbers::pi, two_pi);
    if (w < 0.0) w += two_pi;
    return w - std::numbers::pi;
}

PendulumEnv::PendulumEnv(PendulumOptions options) : opt_(options) {
    if (!(opt_.dt > 0.0) || !(opt_.l > 0.0) || !(opt_.m > 0.0))
        throw std::invalid_argument("PendulumEnv: dt, l and m must be positive");
    if (opt_.substeps == 0) throw std::invalid_argument("PendulumEnv: substeps must be >= 1");
    if (opt_.horizon == 0) throw std::invalid_argument("PendulumEnv: horizon must be >= 1");
}

Vector PendulumEnv::reset(Rng& rng) {
    theta_ = rng.uniform(-std::numbers::pi, std::numbers::pi);
    theta_dot_ = rng.uniform(-1.0, 1.0);
    t_ = 0;
    return observation();
}

void PendulumEnv::set_state(double theta, double theta_dot) {
    theta_ = theta;
    theta_dot_ = theta_dot;
    t_ = 0;
}

void PendulumEnv::load_state(const std::vector<double>& state) {
    if (state.size() != 3) throw std::invalid_argument("PendulumEnv::load_state: bad snapshot");
    theta_ = state[0];
    theta_dot_ = state[1];
    t_ = static_cast<std::size_t>(state[2]);
}

Vector PendulumEnv::observation() const {
    Vector o(3);
    o << std::cos(theta_), std::sin(theta_), theta_dot_;
    return o;
}

double PendulumEnv::energy() const {
    return opt_.m * opt_.l * opt_.l / 6.0 * theta_dot_ * theta_dot_ +
           opt_.m * opt_.g * opt_.l / 2.0 * std::cos(theta_);
}

double PendulumEnv::acceleration(double theta, double theta_dot, double u) const {
    // -(3g / 2l) sin(theta + pi) == (3g / 2l) sin(theta)
    return 3.0 * opt_.g / (2.0 * opt_.l) * std::sin(theta) + 3.0 / (opt_.m * opt_.l * opt_.l) * u -
           opt_.damping * theta_dot;
}

StepResult PendulumEnv::step(const Vector& action, Rng&) {
    if (action.size() != 1) throw std::invalid_argument("PendulumEnv::step: expected a one-element action");
    StepResult r;
    double u = action(0);
    if (!std::isfinite(u)) throw std::invalid_argument("PendulumEnv::step: non-finite action");
    if (u < -opt_.max_torque || u > opt_.max_torque) {
        u = std::clamp(u, -opt_.max_torque, opt_.max_torque);
        r.clipped = true;
        ++clip_count_;
    }
    const double th = wrap_angle(theta_);
    r.reward = -(th * th + 0.1 * theta_dot_ * theta_dot_ + 0.001 * u * u);

    const double h = opt_.dt / static_cast<double>(opt_.substeps);
    for (std::size_t i = 0; i < opt_.substeps; ++i) {
        if (opt_.integrator == Integrator::semi_implicit_euler) {
            theta_dot_ += acceleration(theta_, theta_dot_, u) * h;
            if (opt_.clip_speed) theta_dot_ = std::clamp(theta_dot_, -opt_.max_speed, opt_.max_speed);
            theta_ += theta_dot_ * h;
        } else {
            // Velocity Verlet; the damping term uses the half-step velocity.
            const double half = theta_dot_ + 0.5 * h * acceleration(theta_, theta_dot_, u);
            theta_ += h * half;
            theta_dot_ = half + 0.5 * h * acceleration(theta_, half, u);
            if (opt_.clip_speed) theta_dot_ = std::clamp(theta_dot_, -opt_.max_speed, opt_.max_speed);
        }
    }
    ++t_;
    r.observation = observation();
    r.done = t_ >= opt_.horizon;
    return r;
}

// ---- Config -------------------------------------------------------------------

std::unique_ptr<Env> env_from_config(const config::Table& root) {
    const std::string kind = config::get_string(root, "env.kind", "pendulum");
    if (kind == "pendulum") {
        PendulumOptions o;
        o.g = config::get_number(root, "env.g", o.g);
        o.l = config::get_number(root, "env.l", o.l);
        o.m = config::get_number(root, "env.m", o.m);
        o.dt = config::get_number(root, "env.dt", o.dt);
        o.max_torque = config::get_number(root, "env.max_torque", o.max_torque);
        o.max_speed = config::get_number(root, "env.max_speed", o.max_speed);
        o.damping = config::get_number(root, "env.damping", o.damping);
        o.substeps = config::get_count(root, "env.substeps", o.substeps);
        o.clip_speed = config::get_bool(root, "env.clip_speed", o.clip_speed);
        o.horizon = config::get_count(root, "env.horizon", o.horizon);
        const std::string integ = config::get_string(root, "env.integrator", "euler");
        if (integ == "euler")
            o.integrator = Integrator::semi_implicit_euler;
        else if (integ == "verlet")
            o.integrator = Integrator::verlet;
        else
            throw ConfigError("integrator must be \"euler\" or \"verlet\"", config::lookup(root, "env.integrator")->line,
                              "env.integrator");
        try {
            return std::make_unique<PendulumEnv>(o);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what(), 0, "env");
        }
    }
    const double gamma = config::get_number(root, "train.gamma", 0.99);
    const std::size_t horizon = config::get_count(root, "env.horizon", 200);
    try {
        if (kind == "cycle_walk") {
            CycleWalkOptions o;
            o.period = config::get_count(root, "env.period", o.period);
            o.n_actions = config::get_count(root, "env.n_actions", o.n_actions);
            o.autonomous = config::get_bool(root, "env.autonomous", o.autonomous);
            o.embedding = config::get_string(root, "env.embedding", o.embedding);
            o.start_state = config::get_count(root, "env.start_state", o.start_state);
            o.gamma = gamma;
            return std::make_unique<TabularEnv>(cycle_walk_mdp(o), horizon, "cycle_walk");
        }
        if (kind == "tabular_from_mdp") {
            TabularMdp mdp = mdp_from_config(root, "mdp");
            if (config::lookup(root, "train.gamma") && mdp.gamma() != gamma)
                throw ConfigError("mdp.gamma differs from train.gamma; the discount has a single source", 0,
                                  "mdp.gamma");
            return std::make_unique<TabularEnv>(std::move(mdp), horizon);
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what(), 0, "env");
    }
    const config::Value* v = config::lookup(root, "env.kind");
    throw ConfigError("unknown env kind '" + kind + "'", v ? v->line : 0, "env.kind");
}

// ---- Agents -------------------------------------------------------------------

void Agent::save(nn::Checkpoint& ckpt, const std::string& prefix) const {
    ckpt.add_tree(prefix, const_cast<Agent*>(this)->params());
}

void Agent::load(const nn::Checkpoint& ckpt, const std::string& prefix) { ckpt.load_tree(prefix, params()); }

namespace {

void save_adam(nn::Checkpoint& ckpt, const std::string& prefix, const nn::AdamState& st) {
    ckpt.add_tree(prefix + "m/", st.m);
    ckpt.add_tree(prefix + "v/", st.v);
    ckpt.tensors.emplace_back(prefix + "step", nn::Tensor({1}, static_cast<double>(st.step)));
}

void load_adam(const nn::Checkpoint& ckpt, const std::string& prefix, nn::AdamState& st) {
    ckpt.load_tree(prefix + "m/", st.m);
    ckpt.load_tree(prefix + "v/", st.v);
    st.step = static_cast<std::uint64_t>(ckpt.get(prefix + "step").data.at(0));
}

}  // namespace

// ---- Tabular Q ----------------------------------------------------------------

TabularQAgent::TabularQAgent(TabularQOptions options) : opt_(std::move(options)) {
    if (opt_.n_states == 0 || opt_.n_actions == 0) throw std::invalid_argument("TabularQAgent: empty table");
    if (opt_.lr < 0.0) throw std::invalid_argument("TabularQAgent: lr must be >= 0");
    nn::Tensor q({opt_.n_states, opt_.n_actions});
    if (!opt_.initial_greedy.empty()) {
        if (opt_.initial_greedy.size() != opt_.n_states)
            throw std::invalid_argument("TabularQAgent: initial_greedy needs one action per state");
        for (std::size_t s = 0; s < opt_.n_states; ++s) {
            if (opt_.initial_greedy[s] >= opt_.n_actions)
                throw std::invalid_argument("TabularQAgent: initial_greedy action out of range");
            q.data[s * opt_.n_actions + opt_.initial_greedy[s]] = 1.0;
        }
    }
    params_.add("q", std::move(q));
}

double TabularQAgent::q(std::size_t s, std::size_t a) const { return params_.at("q").data[s * opt_.n_actions + a]; }

std::size_t TabularQAgent::greedy(std::size_t s) const {
    const auto& d = params_.at("q").data;
    const auto first = d.begin() + static_cast<std::ptrdiff_t>(s * opt_.n_actions);
    return static_cast<std::size_t>(std::max_element(first, first + static_cast<std::ptrdiff_t>(opt_.n_actions)) - first);
}

Vector TabularQAgent::act(const AgentObs& obs, Rng& rng, bool explore) {
    if (!obs.state) throw std::invalid_argument("TabularQAgent: needs a tabular state index");
    Vector a(1);
    if (explore && rng.uniform() < opt_.epsilon)
        a(0) = static_cast<double>(rng.index(opt_.n_actions));
    else
        a(0) = static_cast<double>(greedy(*obs.state));
    return a;
}

Vector TabularQAgent::policy_action(const AgentObs& obs) const {
    if (!obs.state) throw std::invalid_argument("TabularQAgent: needs a tabular state index");
    Vector a(1);
    a(0) = static_cast<double>(greedy(*obs.state));
    return a;
}

Matrix TabularQAgent::policy_actions(const Matrix&, const std::vector<std::size_t>& states) const {
    Matrix out(static_cast<Eigen::Index>(states.size()), 1);
    for (std::size_t i = 0; i < states.size(); ++i)
        out(static_cast<Eigen::Index>(i), 0) = static_cast<double>(greedy(states[i]));
    return out;
}

double TabularQAgent::update_transition(std::size_t s, std::size_t a, double r, std::size_t next, bool terminal) {
    auto& d = params_.at("q").data;
    double best = 0.0;
    if (!terminal) best = q(next, greedy(next));
    const double td = r + (terminal ? 0.0 : opt_.gamma * best) - d[s * opt_.n_actions + a];
    d[s * opt_.n_actions + a] += opt_.lr * td;
    return td;
}

AgentStats TabularQAgent::update(const RepBatch& batch, Rng&) {
    if (batch.states.size() != static_cast<std::size_t>(batch.rewards.size()) ||
        batch.next_states.size() != batch.states.size())
        throw std::invalid_argument("TabularQAgent::update: batch lacks tabular state indices");
    AgentStats stats;
    for (std::size_t i = 0; i < batch.states.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const double td = update_transition(batch.states[i], static_cast<std::size_t>(batch.actions(ii, 0)),
                                            batch.rewards(ii), batch.next_states[i], batch.dones(ii) > 0.5);
        stats.critic_loss += td * td;
    }
    if (!batch.states.empty()) stats.critic_loss /= static_cast<double>(batch.states.size());
    return stats;
}

// ---- Gaussian actor-critic ----------------------------------------------------

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

Matrix clip_rows(Matrix a, double lo, double hi) { return a.cwiseMax(lo).cwiseMin(hi); }

}  // namespace

GaussianActorCritic::GaussianActorCritic(ActorCriticOptions options, Rng& init_rng) : opt_(std::move(options)) {
    if (opt_.rep_dim == 0 || opt_.z_dim == 0 || opt_.action_dim == 0)
        throw std::invalid_argument("GaussianActorCritic: widths must be positive");
    if (!(opt_.action_high > opt_.action_low)) throw std::invalid_argument("GaussianActorCritic: empty action box");
    if (opt_.action_samples < 2) throw std::invalid_argument("GaussianActorCritic: action_samples must be >= 2");
    actor_stack_ = nn::mlp_stack(opt_.rep_dim, opt_.actor_hidden, opt_.action_dim, nn::Activation::relu);
    critic_stack_ = nn::mlp_stack(opt_.z_dim, opt_.critic_hidden, 1, nn::Activation::relu);
    nn::init_stack(actor_stack_, "actor", params_, init_rng);
    nn::init_stack(critic_stack_, "critic", params_, init_rng);
    nn::ParamTree target;
    // Same initial values: copy the online critic under the target prefix.
    for (const auto& [name, t] : params_)
        if (name.starts_with("critic/")) target.add("critic_target/" + name.substr(7), t);
    for (auto& [name, t] : target) params_.add(name, t);
    params_.add("log_std", nn::Tensor({1, opt_.action_dim}, opt_.init_log_std));
    actor_adam_ = nn::adam_init(params_, "actor/");
    {
        nn::AdamState ls = nn::adam_init(params_, "log_std");
        for (auto& [name, t] : ls.m) actor_adam_.m.add(name, t);
        for (auto& [name, t] : ls.v) actor_adam_.v.add(name, t);
    }
    critic_adam_ = nn::adam_init(params_, "critic/");
}

Vector GaussianActorCritic::log_std() const {
    return params_.at("log_std").to_matrix().row(0).transpose().cwiseMax(opt_.min_log_std).cwiseMin(opt_.max_log_std);
}

double GaussianActorCritic::entropy() const {
    const Vector ls = log_std();
    return ls.sum() + static_cast<double>(ls.size()) * (kLogSqrt2Pi + 0.5);
}

Matrix GaussianActorCritic::mean_actions(const Matrix& s_bar) const {
    nn::Tape tape;
    auto& params = const_cast<nn::ParamTree&>(params_);
    nn::Var u = nn::forward(actor_stack_, "actor", params, tape.constant(s_bar), tape, false);
    const double mid = 0.5 * (opt_.action_high + opt_.action_low);
    const double half = 0.5 * (opt_.action_high - opt_.action_low);
    return (u.value().array().tanh() * half + mid).matrix();
}

Vector GaussianActorCritic::critic_values(const Matrix& z, bool target) const {
    nn::Tape tape;
    auto& params = const_cast<nn::ParamTree&>(params_);
    nn::Var q = nn::forward(critic_stack_, target ? "critic_target" : "critic", params, tape.constant(z), tape, false);
    return q.value().col(0);
}

Vector GaussianActorCritic::act(const AgentObs& obs, Rng& rng, bool explore) {
    Matrix row = obs.s_bar.transpose();
    Vector a = mean_actions(row).row(0).transpose();
    if (explore) {
        const Vector ls = log_std();
        for (Eigen::Index i = 0; i < a.size(); ++i) a(i) += std::exp(ls(i)) * rng.normal();
    }
    return a.cwiseMax(opt_.action_low).cwiseMin(opt_.action_high);
}

Vector GaussianActorCritic::policy_action(const AgentObs& obs) const {
    Matrix row = obs.s_bar.transpose();
    return mean_actions(row).row(0).transpose();
}

Matrix GaussianActorCritic::policy_actions(const Matrix& s_bar, const std::vector<std::size_t>&) const {
    return mean_actions(s_bar);
}

void GaussianActorCritic::save(nn::Checkpoint& ckpt, const std::string& prefix) const {
    ckpt.add_tree(prefix, params_);
    save_adam(ckpt, prefix + "adam_actor/", actor_adam_);
    save_adam(ckpt, prefix + "adam_critic/", critic_adam_);
}

void GaussianActorCritic::load(const nn::Checkpoint& ckpt, const std::string& prefix) {
    nn::Checkpoint own;
    // Only the parameter entries live directly under prefix; moments sit in adam_* subtrees.
    for (const auto& [name, t] : ckpt.tensors)
        if (name.starts_with(prefix) && !name.starts_with(prefix + "adam_")) own.tensors.emplace_back(name, t);
    own.load_tree(prefix, params_);
    load_adam(ckpt, prefix + "adam_actor/", actor_adam_);
    load_adam(ckpt, prefix + "adam_critic/", critic_adam_);
}

AgentStats GaussianActorCritic::update(const RepBatch& batch, Rng& rng) {
    AgentStats stats;
    const Eigen::Index B = batch.s_bar.rows();
    if (B == 0) return stats;
    if (!batch.encode_sa) throw std::invalid_argument("GaussianActorCritic::update: encode_sa is required");
    const Vector ls = log_std();
    const auto A = static_cast<Eigen::Index>(opt_.action_dim);

    // Critic: one TD step toward r + gamma * Q_target(z(s', a')), a' ~ pi(.|s').
    {
        Matrix next_actions = mean_actions(batch.s_bar_next);
        for (Eigen::Index i = 0; i < B; ++i)
            for (Eigen::Index d = 0; d < A; ++d) next_actions(i, d) += std::exp(ls(d)) * rng.normal();
        next_actions = clip_rows(next_actions, opt_.action_low, opt_.action_high);
        const Vector q_next = critic_values(batch.encode_sa(batch.s_bar_next, next_actions), true);
        const Vector y =
            batch.rewards.array() + opt_.gamma * (1.0 - batch.dones.array()) * q_next.array();
        nn::Tape tape;
        params_.zero_grad();
        nn::Var loss = critic_loss(tape, tape.constant(batch.z), y);
        tape.backward(loss);
        stats.critic_loss = loss.value()(0, 0);
        nn::adam_step(params_, critic_adam_, nn::AdamConfig{opt_.critic_lr});
    }

    // Actor: advantage-weighted score function over K sampled actions per state.
    {
        const auto K = static_cast<Eigen::Index>(opt_.action_samples);
        Matrix s_rep(B * K, batch.s_bar.cols());
        for (Eigen::Index i = 0; i < B; ++i)
            for (Eigen::Index k = 0; k < K; ++k) s_rep.row(i * K + k) = batch.s_bar.row(i);
        const Matrix means = mean_actions(s_rep);
        Matrix samples(B * K, A);
        for (Eigen::Index r = 0; r < B * K; ++r)
            for (Eigen::Index d = 0; d < A; ++d) samples(r, d) = means(r, d) + std::exp(ls(d)) * rng.normal();
        const Vector q = critic_values(batch.encode_sa(s_rep, clip_rows(samples, opt_.action_low, opt_.action_high)));
        Vector adv(B * K);
        for (Eigen::Index i = 0; i < B; ++i) {
            const double base = q.segment(i * K, K).mean();
            adv.segment(i * K, K) = q.segment(i * K, K).array() - base;
        }
        const double sd = std::sqrt(adv.squaredNorm() / static_cast<double>(adv.size()));
        adv /= (sd + 1e-8);

        nn::Tape tape;
        params_.zero_grad();
        nn::Var loss = actor_loss(tape, tape.constant(s_rep), samples, adv);
        tape.backward(loss);
        stats.actor_loss = loss.value()(0, 0);
        nn::adam_step(params_, actor_adam_, nn::AdamConfig{opt_.actor_lr});
        auto& raw = params_.at("log_std").data;
        for (auto& v : raw) v = std::clamp(v, opt_.min_log_std, opt_.max_log_std);
    }

    // Soft update of the target critic.
    for (auto& [name, t] : params_) {
        if (!name.starts_with("critic/")) continue;
        auto& dst = params_.at("critic_target/" + name.substr(7)).data;
        for (std::size_t i = 0; i < dst.size(); ++i)
            dst[i] = opt_.critic_tau * t.data[i] + (1.0 - opt_.critic_tau) * dst[i];
    }
    stats.entropy = entropy();
    return stats;
}

nn::Var GaussianActorCritic::critic_loss(nn::Tape& tape, nn::Var z, const Vector& y) {
    nn::Var q = nn::forward(critic_stack_, "critic", params_, z, tape);
    return nn::mean(nn::square(nn::sub(q, tape.constant(y))));
}

nn::Var GaussianActorCritic::actor_loss(nn::Tape& tape, nn::Var s_rep, const Matrix& samples, const Vector& adv) {
    const Eigen::Index n = s_rep.rows();
    nn::Var u = nn::forward(actor_stack_, "actor", params_, s_rep, tape);
    const double mid = 0.5 * (opt_.action_high + opt_.action_low);
    const double half = 0.5 * (opt_.action_high - opt_.action_low);
    nn::Var mean = nn::add_scalar(nn::scale(nn::tanh(u), half), mid);
    nn::Var log_std = tape.param(params_, "log_std");
    nn::Var diff = nn::sub(tape.constant(samples), mean);
    nn::Var inv_var = nn::exp(nn::scale(log_std, -2.0));
    // log pi = -0.5 sum (a - mu)^2 / sigma^2 - sum log sigma (+ const)
    nn::Var quad = nn::scale(nn::row_sum(nn::mul_row(nn::square(diff), inv_var)), -0.5);
    nn::Var ones = tape.constant(Matrix::Ones(n, 1));
    nn::Var logp = nn::sub(quad, nn::matmul(ones, nn::sum(log_std)));
    nn::Var pg = nn::scale(nn::mean(nn::mul_col(logp, tape.constant(adv))), -1.0);
    return nn::sub(pg, nn::scale(nn::sum(log_std), opt_.entropy_coef));
}

std::unique_ptr<Agent> agent_from_config(const config::Table& root, const Env& env, std::size_t rep_dim,
                                         std::size_t z_dim, double gamma, Rng& init_rng) {
    const ActionSpace space = env.action_space();
    const std::string kind =
        config::get_string(root, "agent.kind", space.discrete ? "tabular_q" : "gaussian_actor_critic");
    if (config::lookup(root, "agent.gamma") && config::get_number(root, "agent.gamma") != gamma)
        throw ConfigError("agent.gamma differs from train.gamma; the discount has a single source",
                          config::lookup(root, "agent.gamma")->line, "agent.gamma");
    if (kind == "tabular_q") {
        const auto* tab = dynamic_cast<const TabularEnv*>(&env);
        if (tab == nullptr) throw ConfigError("tabular_q needs a tabular environment", 0, "agent.kind");
        TabularQOptions o;
        o.n_states = tab->mdp().n_states();
        o.n_actions = tab->mdp().n_actions();
        o.gamma = gamma;
        o.lr = config::get_number(root, "agent.lr", o.lr);
        o.epsilon = config::get_number(root, "agent.epsilon", o.epsilon);
        if (config::lookup(root, "agent.initial_greedy"))
            for (auto v : config::get_ints(root, "agent.initial_greedy")) {
                if (v < 0) throw ConfigError("negative action index", 0, "agent.initial_greedy");
                o.initial_greedy.push_back(static_cast<std::size_t>(v));
            }
        try {
            return std::make_unique<TabularQAgent>(o);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what(), 0, "agent");
        }
    }
    if (kind == "gaussian_actor_critic") {
        if (space.discrete) throw ConfigError("gaussian_actor_critic needs a continuous action space", 0, "agent.kind");
        ActorCriticOptions o;
        o.rep_dim = rep_dim;
        o.z_dim = z_dim;
        o.action_dim = space.n;
        o.action_low = space.low;
        o.action_high = space.high;
        o.gamma = gamma;
        o.actor_lr = config::get_number(root, "agent.actor_lr", o.actor_lr);
        o.critic_lr = config::get_number(root, "agent.critic_lr", o.critic_lr);
        o.critic_tau = config::get_number(root, "agent.critic_tau", o.critic_tau);
        o.action_samples = config::get_count(root, "agent.action_samples", o.action_samples);
        o.entropy_coef = config::get_number(root, "agent.entropy_coef", o.entropy_coef);
        o.init_log_std = config::get_number(root, "agent.init_log_std", o.init_log_std);
        o.min_log_std = config::get_number(root, "agent.min_log_std", o.min_log_std);
        o.max_log_std = config::get_number(root, "agent.max_log_std", o.max_log_std);
        auto sizes = [&](const char* key, std::vector<std::size_t> fallback) {
            if (!config::lookup(root, key)) return fallback;
            std::vector<std::size_t> out;
            for (auto v : config::get_ints(root, key)) {
                if (v <= 0) throw ConfigError("layer sizes must be positive", config::lookup(root, key)->line, key);
                out.push_back(static_cast<std::size_t>(v));
            }
            return out;
        };
        o.actor_hidden = sizes("agent.actor_hidden", o.actor_hidden);
        o.critic_hidden = sizes("agent.critic_hidden", o.critic_hidden);
        try {
            return std::make_unique<GaussianActorCritic>(o, init_rng);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what(), 0, "agent");
        }
    }
    const config::Value* v = config::lookup(root, "agent.kind");
    throw ConfigError("unknown agent kind '" + kind + "'", v ? v->line : 0, "agent.kind");
}

BaselineStats random_policy_baseline(const Env& env, std::size_t episodes, std::uint64_t seed) {
    BaselineStats out;
    Rng rng(seed, 0x5eed);
    auto e = env.clone();
    const ActionSpace space = e->action_space();
    for (std::size_t ep = 0; ep < episodes; ++ep) {
        e->reset(rng);
        double total = 0.0;
        bool done = false;
        while (!done) {
            Vector a(space.discrete ? 1 : static_cast<Eigen::Index>(space.n));
            for (Eigen::Index i = 0; i < a.size(); ++i)
                a(i) = space.discrete ? static_cast<double>(rng.index(space.n)) : rng.uniform(space.low, space.high);
            const StepResult r = e->step(a, rng);
            total += r.reward;
            done = r.done;
        }
        out.returns.push_back(total);
    }
    if (!out.returns.empty()) {
        out.mean = std::accumulate(out.returns.begin(), out.returns.end(), 0.0) / static_cast<double>(episodes);
        double var = 0.0;
        for (double r : out.returns) var += (r - out.mean) * (r - out.mean);
        out.stddev = episodes > 1 ? std::sqrt(var / static_cast<double>(episodes - 1)) : 0.0;
    }
    return out;
}

}  // namespace spf
