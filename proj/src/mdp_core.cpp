#include "spf/mdp_core.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace spf {

namespace {

void check_distribution(std::span<const double> p, const std::string& what) {
    double total = 0.0;
    for (double v : p) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument(what + ": negative or non-finite entry");
        total += v;
    }
    if (std::abs(total - 1.0) > kProbTol) throw std::invalid_argument(what + ": does not sum to 1");
}

}  // namespace

TabularMdp::TabularMdp(std::size_t n_states, std::size_t n_actions, std::vector<double> transition, Vector reward,
                       Vector initial_dist, double gamma, Matrix embedding, std::optional<double> r_max)
    : n_states_(n_states),
      n_actions_(n_actions),
      transition_(std::move(transition)),
      reward_(std::move(reward)),
      initial_dist_(std::move(initial_dist)),
      gamma_(gamma),
      embedding_(std::move(embedding)) {
    if (n_states == 0 || n_actions == 0) throw std::invalid_argument("TabularMdp: empty state or action set");
    if (transition_.size() != n_states * n_actions * n_states)
        throw std::invalid_argument("TabularMdp: transition has " + std::to_string(transition_.size()) +
                                    " entries, expected " + std::to_string(n_states * n_actions * n_states));
    if (static_cast<std::size_t>(reward_.size()) != n_states)
        throw std::invalid_argument("TabularMdp: reward length mismatch");
    if (static_cast<std::size_t>(initial_dist_.size()) != n_states)
        throw std::invalid_argument("TabularMdp: initial_dist length mismatch");
    if (static_cast<std::size_t>(embedding_.rows()) != n_states || embedding_.cols() == 0)
        throw std::invalid_argument("TabularMdp: embedding must have n_states rows and D >= 1 columns");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("TabularMdp: gamma must lie in [0, 1)");
    for (std::size_t s = 0; s < n_states; ++s)
        for (std::size_t a = 0; a < n_actions; ++a)
            check_distribution(next_dist(s, a),
                               "TabularMdp: transition(" + std::to_string(s) + "," + std::to_string(a) + ",.)");
    check_distribution({initial_dist_.data(), n_states}, "TabularMdp: initial_dist");
    if (!reward_.allFinite() || !embedding_.allFinite())
        throw std::invalid_argument("TabularMdp: non-finite reward or embedding");
    const double observed = reward_.cwiseAbs().maxCoeff();
    r_max_ = r_max.value_or(observed);
    if (r_max_ < observed) throw std::invalid_argument("TabularMdp: r_max is smaller than max |reward|");
}

TabularMdp TabularMdp::with_onehot(std::size_t n_states, std::size_t n_actions, std::vector<double> transition,
                                   Vector reward, Vector initial_dist, double gamma) {
    return TabularMdp(n_states, n_actions, std::move(transition), std::move(reward), std::move(initial_dist), gamma,
                      Matrix::Identity(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_states)));
}

TabularMdp TabularMdp::with_reward(Vector reward, std::optional<double> r_max) const {
    return TabularMdp(n_states_, n_actions_, transition_, std::move(reward), initial_dist_, gamma_, embedding_, r_max);
}

TabularMdp TabularMdp::with_gamma(double gamma) const {
    return TabularMdp(n_states_, n_actions_, transition_, reward_, initial_dist_, gamma, embedding_, r_max_);
}

TabularMdp TabularMdp::with_embedding(Matrix embedding) const {
    return TabularMdp(n_states_, n_actions_, transition_, reward_, initial_dist_, gamma_, std::move(embedding),
                      r_max_);
}

TabularMdp TabularMdp::with_initial_dist(Vector initial_dist) const {
    return TabularMdp(n_states_, n_actions_, transition_, reward_, std::move(initial_dist), gamma_, embedding_,
                      r_max_);
}

TabularPolicy::TabularPolicy(Matrix probs) : probs_(std::move(probs)) {
    if (probs_.rows() == 0 || probs_.cols() == 0) throw std::invalid_argument("TabularPolicy: empty matrix");
    for (Eigen::Index s = 0; s < probs_.rows(); ++s) {
        Vector row = probs_.row(s).transpose();
        check_distribution({row.data(), static_cast<std::size_t>(row.size())},
                           "TabularPolicy: row " + std::to_string(s));
    }
}

TabularPolicy TabularPolicy::uniform(std::size_t n_states, std::size_t n_actions) {
    return TabularPolicy(Matrix::Constant(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_actions),
                                          1.0 / static_cast<double>(n_actions)));
}

TabularPolicy TabularPolicy::deterministic(std::span<const std::size_t> actions, std::size_t n_actions) {
    Matrix probs = Matrix::Zero(static_cast<Eigen::Index>(actions.size()), static_cast<Eigen::Index>(n_actions));
    for (std::size_t s = 0; s < actions.size(); ++s) {
        if (actions[s] >= n_actions) throw std::invalid_argument("TabularPolicy: action index out of range");
        probs(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(actions[s])) = 1.0;
    }
    return TabularPolicy(std::move(probs));
}

std::size_t TabularPolicy::greedy(std::size_t s) const {
    Eigen::Index best = 0;
    probs_.row(static_cast<Eigen::Index>(s)).maxCoeff(&best);
    return static_cast<std::size_t>(best);
}

static void check_compatible(const TabularMdp& mdp, const TabularPolicy& policy) {
    if (policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions())
        throw std::invalid_argument("policy shape " + std::to_string(policy.n_states()) + "x" +
                                    std::to_string(policy.n_actions()) + " does not match MDP " +
                                    std::to_string(mdp.n_states()) + "x" + std::to_string(mdp.n_actions()));
}

Matrix induced_chain(const TabularMdp& mdp, const TabularPolicy& policy) {
    check_compatible(mdp, policy);
    const auto n = static_cast<Eigen::Index>(mdp.n_states());
    Matrix chain = Matrix::Zero(n, n);
    for (std::size_t s = 0; s < mdp.n_states(); ++s)
        for (std::size_t a = 0; a < mdp.n_actions(); ++a) {
            const double w = policy(s, a);
            if (w == 0.0) continue;
            auto next = mdp.next_dist(s, a);
            for (std::size_t t = 0; t < mdp.n_states(); ++t)
                chain(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t)) += w * next[t];
        }
    return chain;
}

Vector discounted_state_distribution(const TabularMdp& mdp, const TabularPolicy& policy) {
    const Matrix chain = induced_chain(mdp, policy);
    const auto n = chain.rows();
    const Matrix system = Matrix::Identity(n, n) - mdp.gamma() * chain.transpose();
    Vector d = system.partialPivLu().solve((1.0 - mdp.gamma()) * mdp.initial_dist());
    if (!d.allFinite()) throw std::logic_error("discounted_state_distribution: linear solve failed");
    return d;
}

Vector state_values(const TabularMdp& mdp, const TabularPolicy& policy) {
    const Matrix chain = induced_chain(mdp, policy);
    const auto n = chain.rows();
    const Matrix system = Matrix::Identity(n, n) - mdp.gamma() * chain;
    return system.partialPivLu().solve(mdp.reward());
}

double policy_performance(const TabularMdp& mdp, const TabularPolicy& policy) {
    const double direct = mdp.initial_dist().dot(state_values(mdp, policy));
    const double via_occupancy = discounted_state_distribution(mdp, policy).dot(mdp.reward()) / (1.0 - mdp.gamma());
    const double scale = std::max(1.0, std::abs(direct));
    if (std::abs(direct - via_occupancy) > 1e-9 * scale)
        throw std::logic_error("policy_performance: occupancy identity violated");
    return direct;
}

Trajectory sample_trajectory(const TabularMdp& mdp, const TabularPolicy& policy, std::size_t horizon,
                             std::uint64_t seed) {
    Rng rng(seed);
    return sample_trajectory(mdp, policy, horizon, rng);
}

Trajectory sample_trajectory(const TabularMdp& mdp, const TabularPolicy& policy, std::size_t horizon, Rng& rng) {
    check_compatible(mdp, policy);
    if (horizon == 0) throw std::invalid_argument("sample_trajectory: horizon must be >= 1");
    Trajectory traj;
    traj.states.reserve(horizon + 1);
    traj.actions.reserve(horizon);
    traj.rewards.reserve(horizon);
    const Vector& mu = mdp.initial_dist();
    std::size_t s = rng.categorical({mu.data(), static_cast<std::size_t>(mu.size())});
    traj.states.push_back(s);
    std::vector<double> row(mdp.n_actions());
    for (std::size_t t = 0; t < horizon; ++t) {
        for (std::size_t a = 0; a < mdp.n_actions(); ++a) row[a] = policy(s, a);
        const std::size_t a = rng.categorical(row);
        traj.actions.push_back(a);
        traj.rewards.push_back(mdp.reward()(static_cast<Eigen::Index>(s)));
        s = rng.categorical(mdp.next_dist(s, a));
        traj.states.push_back(s);
    }
    return traj;
}

Vector stationary_distribution(const Matrix& chain) {
    const auto n = chain.rows();
    Matrix system(n + 1, n);
    system.topRows(n) = chain.transpose() - Matrix::Identity(n, n);
    system.row(n).setOnes();
    Vector rhs = Vector::Zero(n + 1);
    rhs(n) = 1.0;
    return system.colPivHouseholderQr().solve(rhs);
}

TabularMdp random_mdp(std::size_t n_states, std::size_t n_actions, const RandomMdpOptions& options, Rng& rng) {
    std::vector<double> transition(n_states * n_actions * n_states, 0.0);
    for (std::size_t sa = 0; sa < n_states * n_actions; ++sa) {
        double* row = transition.data() + sa * n_states;
        double total = 0.0;
        for (std::size_t t = 0; t < n_states; ++t) {
            if (options.density < 1.0 && rng.uniform() >= options.density) continue;
            row[t] = rng.uniform(0.05, 1.0);
            total += row[t];
        }
        if (total == 0.0) {
            const std::size_t t = rng.index(n_states);
            row[t] = 1.0;
            total = 1.0;
        }
        for (std::size_t t = 0; t < n_states; ++t) row[t] /= total;
    }
    const auto n = static_cast<Eigen::Index>(n_states);
    Vector reward(n);
    for (Eigen::Index s = 0; s < n; ++s) reward(s) = options.reward_scale * rng.uniform(-1.0, 1.0);
    Vector mu(n);
    for (Eigen::Index s = 0; s < n; ++s) mu(s) = rng.uniform(0.05, 1.0);
    mu /= mu.sum();
    Matrix embedding;
    if (options.embedding_dim == 0) {
        embedding = Matrix::Identity(n, n);
    } else {
        embedding.resize(n, static_cast<Eigen::Index>(options.embedding_dim));
        for (Eigen::Index i = 0; i < embedding.size(); ++i) embedding.data()[i] = rng.normal();
    }
    return TabularMdp(n_states, n_actions, std::move(transition), std::move(reward), std::move(mu), options.gamma,
                      std::move(embedding));
}

TabularPolicy random_policy(std::size_t n_states, std::size_t n_actions, Rng& rng) {
    Matrix probs(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_actions));
    for (Eigen::Index s = 0; s < probs.rows(); ++s) {
        for (Eigen::Index a = 0; a < probs.cols(); ++a) probs(s, a) = rng.uniform(0.05, 1.0);
        probs.row(s) /= probs.row(s).sum();
    }
    return TabularPolicy(std::move(probs));
}

namespace {

Vector to_vector(const std::vector<double>& v) {
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::size_t positive_count(const config::Table& root, const std::string& path) {
    const auto v = config::get_int(root, path);
    if (v <= 0) throw config::ConfigError("must be a positive integer", config::lookup(root, path)->line, path);
    return static_cast<std::size_t>(v);
}

// Wraps model validation errors with the section name so the CLI can report them as config errors.
template <class F>
auto as_config_error(const std::string& section, F&& body) {
    try {
        return body();
    } catch (const std::invalid_argument& e) {
        throw config::ConfigError(e.what(), 0, section);
    }
}

}  // namespace

TabularMdp mdp_from_config(const config::Table& root, const std::string& section) {
    const std::string p = section + ".";
    const std::size_t n_states = positive_count(root, p + "n_states");
    const std::size_t n_actions = positive_count(root, p + "n_actions");
    std::vector<double> transition = config::get_numbers(root, p + "transition");
    if (transition.size() != n_states * n_actions * n_states)
        throw config::ConfigError("expected " + std::to_string(n_states * n_actions * n_states) + " entries, got " +
                                      std::to_string(transition.size()),
                                  config::lookup(root, p + "transition")->line, p + "transition");
    std::vector<double> reward = config::get_numbers(root, p + "reward");
    std::vector<double> initial = config::get_numbers(root, p + "initial_dist");
    const double gamma = config::get_number(root, p + "gamma");
    Matrix embedding;
    const config::Value* emb = config::lookup(root, p + "embedding");
    if (!emb || std::holds_alternative<std::string>(emb->data)) {
        const std::string kind = emb ? std::get<std::string>(emb->data) : "onehot";
        if (kind != "onehot") throw config::ConfigError("unknown embedding kind '" + kind + "'", emb->line, p + "embedding");
        embedding = Matrix::Identity(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_states));
    } else {
        std::vector<double> flat = config::get_numbers(root, p + "embedding");
        if (flat.empty() || flat.size() % n_states != 0)
            throw config::ConfigError("embedding size must be a multiple of n_states", emb->line, p + "embedding");
        const auto d = static_cast<Eigen::Index>(flat.size() / n_states);
        embedding.resize(static_cast<Eigen::Index>(n_states), d);
        for (std::size_t s = 0; s < n_states; ++s)
            for (Eigen::Index k = 0; k < d; ++k)
                embedding(static_cast<Eigen::Index>(s), k) = flat[s * static_cast<std::size_t>(d) + static_cast<std::size_t>(k)];
    }
    std::optional<double> r_max;
    if (config::lookup(root, p + "r_max")) r_max = config::get_number(root, p + "r_max");
    return as_config_error(section, [&] {
        return TabularMdp(n_states, n_actions, std::move(transition), to_vector(reward), to_vector(initial), gamma,
                          std::move(embedding), r_max);
    });
}

TabularPolicy policy_from_config(const config::Table& root, const TabularMdp& mdp, const std::string& section) {
    const std::string p = section + ".";
    const std::size_t n = mdp.n_states();
    const std::size_t m = mdp.n_actions();
    if (config::lookup(root, p + "probs")) {
        std::vector<double> flat = config::get_numbers(root, p + "probs");
        if (flat.size() != n * m)
            throw config::ConfigError("expected " + std::to_string(n * m) + " entries", config::lookup(root, p + "probs")->line,
                                      p + "probs");
        Matrix probs(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t a = 0; a < m; ++a) probs(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = flat[s * m + a];
        return as_config_error(section, [&] { return TabularPolicy(std::move(probs)); });
    }
    if (config::lookup(root, p + "actions")) {
        std::vector<std::int64_t> raw = config::get_ints(root, p + "actions");
        if (raw.size() != n)
            throw config::ConfigError("expected one action per state", config::lookup(root, p + "actions")->line, p + "actions");
        std::vector<std::size_t> actions;
        for (auto a : raw) {
            if (a < 0) throw config::ConfigError("negative action index", config::lookup(root, p + "actions")->line, p + "actions");
            actions.push_back(static_cast<std::size_t>(a));
        }
        return as_config_error(section, [&] { return TabularPolicy::deterministic(actions, m); });
    }
    const std::string kind = config::get_string(root, p + "kind", "uniform");
    if (kind != "uniform") throw config::ConfigError("unknown policy kind '" + kind + "'", 0, p + "kind");
    return TabularPolicy::uniform(n, m);
}

}  // namespace spf
