#include "spf/spf_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "spf/io.hpp"

namespace spf {

using config::ConfigError;
using nn::Tape;
using nn::Var;

void FreqlossConfig::validate(std::size_t stored_bins) const {
    if (k_lo + k_hi >= stored_bins)
        throw std::invalid_argument("FreqlossConfig: k_lo + k_hi must be below the stored bin count");
    if (!(w_lo > 0.0) || !(w_mid > 0.0) || !(w_hi > 0.0))
        throw std::invalid_argument("FreqlossConfig: weights must be positive");
    if (!(eps > 0.0)) throw std::invalid_argument("FreqlossConfig: eps must be positive");
}

void SpfNetConfig::validate() const {
    DtftConfig{L, state_dim, gamma, true}.validate();
    if (action_width == 0) throw std::invalid_argument("SpfNetConfig: action_width must be positive");
    freqloss.validate(stored_bins());
    if (encoder == EncoderKind::densenet && (encoder_blocks == 0 || encoder_growth == 0))
        throw std::invalid_argument("SpfNetConfig: densenet encoder needs blocks and growth");
    if (freqloss.use_projection && projection_dim == 0)
        throw std::invalid_argument("SpfNetConfig: projection_dim must be positive");
    for (auto h : predictor_hidden)
        if (h == 0) throw std::invalid_argument("SpfNetConfig: zero-width predictor layer");
}

// ---- networks -----------------------------------------------------------------

SpfNetworks::SpfNetworks(SpfNetConfig config, Rng& init_rng) : cfg_(std::move(config)) {
    cfg_.validate();
    const std::size_t D = cfg_.state_dim;
    const std::size_t A = cfg_.action_width;
    switch (cfg_.encoder) {
        case EncoderKind::densenet:
            enc_s_ = nn::densenet_stack(D, cfg_.encoder_blocks, cfg_.encoder_growth, cfg_.encoder_activation);
            rep_dim_ = enc_s_.back().output_width();
            enc_sa_ = nn::densenet_stack(rep_dim_ + A, cfg_.encoder_blocks, cfg_.encoder_growth,
                                         cfg_.encoder_activation);
            z_dim_ = enc_sa_.back().output_width();
            break;
        case EncoderKind::identity:
            rep_dim_ = D;
            z_dim_ = D + A;
            break;
        case EncoderKind::onehot_pair:
            rep_dim_ = D;
            z_dim_ = D * A;
            break;
    }
    std::size_t width = z_dim_;
    for (auto h : cfg_.predictor_hidden) {
        trunk_.push_back(nn::LayerSpec::dense(width, h, cfg_.predictor_activation));
        width = h;
    }
    head_ = {nn::LayerSpec::dense(width, head_width())};
    if (cfg_.freqloss.use_projection) {
        proj_ = nn::mlp_stack(mid_width(), cfg_.projection_hidden, cfg_.projection_dim, nn::Activation::relu);
        if (!cfg_.projection2_identity)
            proj2_ = nn::mlp_stack(cfg_.projection_dim, cfg_.projection2_hidden, cfg_.projection_dim,
                                   nn::Activation::relu);
    }

    const nn::DenseInit head_init = cfg_.zero_init_heads ? nn::DenseInit::zeros : nn::DenseInit::uniform;
    nn::init_stack(enc_s_, "encoder_s", online, init_rng);
    nn::init_stack(enc_sa_, "encoder_sa", online, init_rng);
    nn::init_stack(trunk_, "predictor/trunk", online, init_rng);
    nn::init_stack(head_, "predictor/head_re", online, init_rng, head_init);
    nn::init_stack(head_, "predictor/head_im", online, init_rng, head_init);
    nn::init_stack(proj_, "projection", online, init_rng);
    nn::init_stack(proj2_, "projection2", online, init_rng);
    target = online;
}

std::size_t SpfNetworks::mid_width() const {
    return (cfg_.stored_bins() - cfg_.freqloss.k_lo - cfg_.freqloss.k_hi) * cfg_.state_dim;
}

Var SpfNetworks::encode_state(nn::ParamTree& params, Tape& tape, Var obs, bool trainable) {
    if (obs.cols() != static_cast<Eigen::Index>(cfg_.state_dim))
        throw std::invalid_argument("SpfNetworks: observation width mismatch");
    if (enc_s_.empty()) return obs;
    return nn::forward(enc_s_, "encoder_s", params, obs, tape, trainable);
}

Var SpfNetworks::encode_pair(nn::ParamTree& params, Tape& tape, Var s_bar, Var action, bool trainable) {
    if (action.cols() != static_cast<Eigen::Index>(cfg_.action_width) || action.rows() != s_bar.rows())
        throw std::invalid_argument("SpfNetworks: action input shape mismatch");
    switch (cfg_.encoder) {
        case EncoderKind::densenet:
            return nn::forward(enc_sa_, "encoder_sa", params, nn::concat_cols(s_bar, action), tape, trainable);
        case EncoderKind::identity:
            return nn::concat_cols(s_bar, action);
        case EncoderKind::onehot_pair: {
            // No parameters upstream, so the outer product enters as a constant.
            const Matrix& s = s_bar.value();
            const Matrix& a = action.value();
            const Eigen::Index A = a.cols();
            Matrix z(s.rows(), s.cols() * A);
            for (Eigen::Index r = 0; r < s.rows(); ++r)
                for (Eigen::Index i = 0; i < s.cols(); ++i)
                    for (Eigen::Index j = 0; j < A; ++j) z(r, i * A + j) = s(r, i) * a(r, j);
            return tape.constant(std::move(z));
        }
    }
    throw std::invalid_argument("SpfNetworks: unknown encoder kind");
}

SpfNetworks::Outputs SpfNetworks::forward(nn::ParamTree& params, Tape& tape, Var obs, Var action, bool trainable) {
    Outputs out;
    out.s_bar = encode_state(params, tape, obs, trainable);
    out.z = encode_pair(params, tape, out.s_bar, action, trainable);
    Var h = trunk_.empty() ? out.z : nn::forward(trunk_, "predictor/trunk", params, out.z, tape, trainable);
    out.re = nn::forward(head_, "predictor/head_re", params, h, tape, trainable);
    out.im = nn::forward(head_, "predictor/head_im", params, h, tape, trainable);
    return out;
}

Var SpfNetworks::project(nn::ParamTree& params, Tape& tape, Var mid, bool trainable) {
    if (proj_.empty()) return mid;
    return nn::forward(proj_, "projection", params, mid, tape, trainable);
}

Var SpfNetworks::project2(nn::ParamTree& params, Tape& tape, Var x, bool trainable) {
    if (proj2_.empty()) return x;
    return nn::forward(proj2_, "projection2", params, x, tape, trainable);
}

Matrix SpfNetworks::state_rep(const Matrix& obs, bool use_target) {
    Tape tape;
    return encode_state(tree(use_target), tape, tape.constant(obs), false).value();
}

Matrix SpfNetworks::pair_rep(const Matrix& s_bar, const Matrix& action_in, bool use_target) {
    Tape tape;
    return encode_pair(tree(use_target), tape, tape.constant(s_bar), tape.constant(action_in), false).value();
}

Matrix SpfNetworks::action_input(const Matrix& raw_actions) const {
    if (!cfg_.discrete_actions) {
        if (raw_actions.cols() != static_cast<Eigen::Index>(cfg_.action_width))
            throw std::invalid_argument("SpfNetworks: continuous action width mismatch");
        return raw_actions;
    }
    if (raw_actions.cols() != 1) throw std::invalid_argument("SpfNetworks: discrete actions need one column");
    Matrix out = Matrix::Zero(raw_actions.rows(), static_cast<Eigen::Index>(cfg_.action_width));
    for (Eigen::Index r = 0; r < raw_actions.rows(); ++r) {
        const double v = raw_actions(r, 0);
        if (!(v >= 0.0) || v >= static_cast<double>(cfg_.action_width) || v != std::floor(v))
            throw std::invalid_argument("SpfNetworks: discrete action index out of range");
        out(r, static_cast<Eigen::Index>(v)) = 1.0;
    }
    return out;
}

DtftMatrix DtftPrediction::to_dtft() const {
    DtftMatrix m(static_cast<std::size_t>(re.rows()), static_cast<std::size_t>(re.cols()));
    for (Eigen::Index k = 0; k < re.rows(); ++k)
        for (Eigen::Index d = 0; d < re.cols(); ++d)
            m(static_cast<std::size_t>(k), static_cast<std::size_t>(d)) = Complex(re(k, d), im(k, d));
    return m;
}

namespace {

Matrix unflatten(const Matrix& row, std::size_t bins, std::size_t D) {
    Matrix out(static_cast<Eigen::Index>(bins), static_cast<Eigen::Index>(D));
    for (std::size_t k = 0; k < bins; ++k)
        for (std::size_t d = 0; d < D; ++d)
            out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d)) =
                row(0, static_cast<Eigen::Index>(k * D + d));
    return out;
}

// Real and imaginary parts of Gamma repeated over the D columns of each bin.
std::pair<Matrix, Matrix> gamma_rows(std::size_t L, std::size_t D, double gamma) {
    const GammaDiagonal g(DtftConfig{L, D, gamma, true});
    Matrix re(1, static_cast<Eigen::Index>(g.size() * D));
    Matrix im(1, re.cols());
    for (std::size_t k = 0; k < g.size(); ++k)
        for (std::size_t d = 0; d < D; ++d) {
            re(0, static_cast<Eigen::Index>(k * D + d)) = g.re(k);
            im(0, static_cast<Eigen::Index>(k * D + d)) = g.im(k);
        }
    return {re, im};
}

TdTarget combine_target(const Matrix& next_obs, const Matrix& f_re, const Matrix& f_im, std::size_t L,
                        std::size_t D, double gamma) {
    const auto [g_re, g_im] = gamma_rows(L, D, gamma);
    const Eigen::Index B = next_obs.rows();
    const Eigen::Index W = f_re.cols();
    TdTarget t{Matrix(B, W), Matrix(B, W)};
    for (Eigen::Index r = 0; r < B; ++r)
        for (Eigen::Index c = 0; c < W; ++c) {
            const double s = next_obs(r, c % static_cast<Eigen::Index>(D));
            t.re(r, c) = s + g_re(0, c) * f_re(r, c) - g_im(0, c) * f_im(r, c);
            t.im(r, c) = g_im(0, c) * f_re(r, c) + g_re(0, c) * f_im(r, c);
        }
    return t;
}

}  // namespace

DtftPrediction predict_dtft(SpfNetworks& nets, bool use_target, const Vector& observation, const Vector& raw_action) {
    const auto& cfg = nets.config();
    if (observation.size() != static_cast<Eigen::Index>(cfg.state_dim))
        throw std::invalid_argument("predict_dtft: observation width mismatch");
    Tape tape;
    Matrix obs = observation.transpose();
    Matrix act = nets.action_input(raw_action.transpose());
    auto out = nets.forward(nets.tree(use_target), tape, tape.constant(obs), tape.constant(act), false);
    return {unflatten(out.re.value(), cfg.stored_bins(), cfg.state_dim),
            unflatten(out.im.value(), cfg.stored_bins(), cfg.state_dim)};
}

TdTarget build_td_target(SpfNetworks& nets, const Matrix& next_obs, const Matrix& next_raw_actions, double gamma,
                         std::size_t L) {
    const auto& cfg = nets.config();
    if (L != cfg.L) throw std::invalid_argument("build_td_target: L differs from the network configuration");
    if (next_obs.rows() != next_raw_actions.rows())
        throw std::invalid_argument("build_td_target: batch size mismatch");
    Tape tape;
    auto out = nets.forward(nets.target, tape, tape.constant(next_obs),
                            tape.constant(nets.action_input(next_raw_actions)), false);
    return combine_target(next_obs, out.re.value(), out.im.value(), L, cfg.state_dim, gamma);
}

// ---- freqloss -------------------------------------------------------------------

namespace {

Var distance_term(Var x, Var y, const FreqlossConfig& cfg) {
    Var per_row = cfg.distance == Distance::one_minus_cosine ? nn::cosine_distance(x, y, cfg.eps)
                                                             : nn::squared_error(x, y);
    return nn::mean(per_row);
}

}  // namespace

FreqlossTerms freqloss(Var pred_re, Var pred_im, const Matrix& target_re, const Matrix& target_im,
                       SpfNetworks& nets, const FreqlossConfig& cfg, Tape& tape) {
    const auto& ncfg = nets.config();
    const Eigen::Index W = static_cast<Eigen::Index>(nets.head_width());
    if (pred_re.cols() != W || pred_im.cols() != W || target_re.cols() != W || target_im.cols() != W ||
        pred_re.rows() != target_re.rows() || pred_im.rows() != target_im.rows() ||
        pred_re.rows() != pred_im.rows())
        throw std::invalid_argument("freqloss: shape mismatch");
    cfg.validate(ncfg.stored_bins());
    if (cfg.use_projection && cfg.k_lo + cfg.k_hi != ncfg.freqloss.k_lo + ncfg.freqloss.k_hi)
        throw std::invalid_argument("freqloss: projection width does not match the middle band");
    const auto D = static_cast<Eigen::Index>(ncfg.state_dim);
    const Eigen::Index lo_w = static_cast<Eigen::Index>(cfg.k_lo) * D;
    const Eigen::Index hi_w = static_cast<Eigen::Index>(cfg.k_hi) * D;
    const Eigen::Index mid_w = W - lo_w - hi_w;

    Var lo_total, mid_total, hi_total;
    bool first = true;
    for (int part = 0; part < 2; ++part) {
        Var pred = part == 0 ? pred_re : pred_im;
        Var targ = tape.constant(part == 0 ? target_re : target_im);
        Var lo = distance_term(nn::slice_cols(pred, 0, lo_w), nn::slice_cols(targ, 0, lo_w), cfg);
        Var hi = distance_term(nn::slice_cols(pred, W - hi_w, hi_w), nn::slice_cols(targ, W - hi_w, hi_w), cfg);
        Var p_mid = nn::slice_cols(pred, lo_w, mid_w);
        Var t_mid = nn::slice_cols(targ, lo_w, mid_w);
        Var mid;
        if (cfg.use_projection) {
            Var online = nets.project2(nets.online, tape, nets.project(nets.online, tape, p_mid, true), true);
            Var target = nn::detach(nets.project(nets.target, tape, t_mid, true));
            mid = distance_term(online, target, cfg);
        } else {
            mid = distance_term(p_mid, t_mid, cfg);
        }
        if (first) {
            lo_total = lo;
            mid_total = mid;
            hi_total = hi;
            first = false;
        } else {
            lo_total = nn::add(lo_total, lo);
            mid_total = nn::add(mid_total, mid);
            hi_total = nn::add(hi_total, hi);
        }
    }
    FreqlossTerms terms;
    terms.lo = lo_total.value()(0, 0);
    terms.mid = mid_total.value()(0, 0);
    terms.hi = hi_total.value()(0, 0);
    terms.total = nn::add(nn::add(nn::scale(lo_total, cfg.w_lo), nn::scale(mid_total, cfg.w_mid)),
                          nn::scale(hi_total, cfg.w_hi));
    return terms;
}

// ---- replay buffer ------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::size_t obs_dim, std::size_t action_dim)
    : capacity_(capacity), obs_dim_(obs_dim), action_dim_(action_dim) {
    if (capacity == 0 || obs_dim == 0 || action_dim == 0)
        throw std::invalid_argument("ReplayBuffer: capacity and widths must be positive");
    const auto C = static_cast<Eigen::Index>(capacity);
    obs_.resize(C, static_cast<Eigen::Index>(obs_dim));
    next_obs_.resize(C, static_cast<Eigen::Index>(obs_dim));
    actions_.resize(C, static_cast<Eigen::Index>(action_dim));
    rewards_.resize(C);
    terminals_.resize(C);
    states_.resize(C);
    next_states_.resize(C);
}

void ReplayBuffer::add(const Vector& obs, const Vector& action, const Vector& next_obs, double reward, bool terminal,
                       std::optional<std::size_t> state, std::optional<std::size_t> next_state) {
    if (obs.size() != static_cast<Eigen::Index>(obs_dim_) || next_obs.size() != obs.size() ||
        action.size() != static_cast<Eigen::Index>(action_dim_))
        throw std::invalid_argument("ReplayBuffer::add: shape mismatch");
    const auto i = static_cast<Eigen::Index>(next_);
    obs_.row(i) = obs.transpose();
    actions_.row(i) = action.transpose();
    next_obs_.row(i) = next_obs.transpose();
    rewards_(i) = reward;
    terminals_(i) = terminal ? 1.0 : 0.0;
    states_(i) = state ? static_cast<double>(*state) : -1.0;
    next_states_(i) = next_state ? static_cast<double>(*next_state) : -1.0;
    next_ = (next_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
}

ReplayBatch ReplayBuffer::sample(std::size_t n, Rng& rng) const {
    if (size_ == 0) throw std::invalid_argument("ReplayBuffer::sample: buffer is empty");
    const auto N = static_cast<Eigen::Index>(n);
    ReplayBatch b;
    b.obs.resize(N, obs_.cols());
    b.actions.resize(N, actions_.cols());
    b.next_obs.resize(N, obs_.cols());
    b.rewards.resize(N);
    b.terminals.resize(N);
    bool indexed = true;
    std::vector<Eigen::Index> picks(n);
    for (std::size_t j = 0; j < n; ++j) {
        picks[j] = static_cast<Eigen::Index>(rng.index(size_));
        if (states_(picks[j]) < 0.0 || next_states_(picks[j]) < 0.0) indexed = false;
    }
    for (std::size_t j = 0; j < n; ++j) {
        const auto r = static_cast<Eigen::Index>(j);
        const Eigen::Index i = picks[j];
        b.obs.row(r) = obs_.row(i);
        b.actions.row(r) = actions_.row(i);
        b.next_obs.row(r) = next_obs_.row(i);
        b.rewards(r) = rewards_(i);
        b.terminals(r) = terminals_(i);
        if (indexed) {
            b.states.push_back(static_cast<std::size_t>(states_(i)));
            b.next_states.push_back(static_cast<std::size_t>(next_states_(i)));
        }
    }
    return b;
}

void ReplayBuffer::save(nn::Checkpoint& ckpt, const std::string& prefix) const {
    const auto n = static_cast<Eigen::Index>(size_);
    auto put = [&](const std::string& name, const Matrix& m) { ckpt.tensors.emplace_back(prefix + name, nn::Tensor::from_matrix(m)); };
    Matrix meta(1, 3);
    meta << static_cast<double>(size_), static_cast<double>(next_), static_cast<double>(capacity_);
    put("meta", meta);
    if (n == 0) return;
    put("obs", obs_.topRows(n));
    put("actions", actions_.topRows(n));
    put("next_obs", next_obs_.topRows(n));
    put("rewards", rewards_.head(n).transpose());
    put("terminals", terminals_.head(n).transpose());
    put("states", states_.head(n).transpose());
    put("next_states", next_states_.head(n).transpose());
}

void ReplayBuffer::load(const nn::Checkpoint& ckpt, const std::string& prefix) {
    const Matrix meta = ckpt.get(prefix + "meta").to_matrix();
    if (meta.size() != 3 || static_cast<std::size_t>(meta(0, 2)) != capacity_)
        throw std::invalid_argument("ReplayBuffer::load: capacity mismatch");
    const auto size = static_cast<std::size_t>(meta(0, 0));
    const auto next = static_cast<std::size_t>(meta(0, 1));
    if (size > capacity_ || next >= capacity_) throw std::invalid_argument("ReplayBuffer::load: corrupt metadata");
    const auto n = static_cast<Eigen::Index>(size);
    if (n > 0) {
        auto get = [&](const std::string& name, Eigen::Index cols) {
            Matrix m = ckpt.get(prefix + name).to_matrix();
            if (m.rows() * m.cols() != n * cols) throw std::invalid_argument("ReplayBuffer::load: shape mismatch");
            m.resize(n, cols);
            return m;
        };
        // to_matrix keeps row-major order for 2-D tensors; vectors come back as 1 x n rows.
        obs_.topRows(n) = ckpt.get(prefix + "obs").to_matrix();
        actions_.topRows(n) = ckpt.get(prefix + "actions").to_matrix();
        next_obs_.topRows(n) = ckpt.get(prefix + "next_obs").to_matrix();
        rewards_.head(n) = get("rewards", 1).col(0);
        terminals_.head(n) = get("terminals", 1).col(0);
        states_.head(n) = get("states", 1).col(0);
        next_states_.head(n) = get("next_states", 1).col(0);
    }
    size_ = size;
    next_ = next;
}

// ---- auxiliary update -----------------------------------------------------------------

AuxStepResult auxiliary_loss_and_grad(SpfNetworks& nets, const ReplayBatch& batch, const BootstrapPolicy& policy,
                                      Tape& tape) {
    const auto& cfg = nets.config();
    nets.online.zero_grad();
    nets.target.zero_grad();
    auto online = nets.forward(nets.online, tape, tape.constant(batch.obs),
                               tape.constant(nets.action_input(batch.actions)), true);

    const Matrix s_bar_next = nets.state_rep(batch.next_obs, false);
    const Matrix next_actions = policy(batch, s_bar_next);
    // Target networks are bound (not frozen) and then detached, so a
    // gradient inspection sees exact zeros rather than absent entries.
    auto boot = nets.forward(nets.target, tape, tape.constant(batch.next_obs),
                             tape.constant(nets.action_input(next_actions)), true);
    const Matrix f_re = nn::detach(boot.re).value();
    const Matrix f_im = nn::detach(boot.im).value();
    const TdTarget y = combine_target(batch.next_obs, f_re, f_im, cfg.L, cfg.state_dim, cfg.gamma);

    FreqlossTerms terms = freqloss(online.re, online.im, y.re, y.im, nets, cfg.freqloss, tape);
    tape.backward(terms.total);
    AuxStepResult r;
    r.performed = true;
    r.loss = terms.total.value()(0, 0);
    r.lo = terms.lo;
    r.mid = terms.mid;
    r.hi = terms.hi;
    return r;
}

AuxStepResult auxiliary_step(SpfNetworks& nets, const ReplayBuffer& buffer, std::size_t batch_size,
                             nn::AdamState& adam, const nn::AdamConfig& adam_cfg, Rng& rng,
                             const BootstrapPolicy& policy) {
    if (batch_size == 0 || buffer.size() < batch_size) return {};
    const ReplayBatch batch = buffer.sample(batch_size, rng);
    Tape tape;
    AuxStepResult r = auxiliary_loss_and_grad(nets, batch, policy, tape);
    nn::adam_step(nets.online, adam, adam_cfg);
    return r;
}

bool target_sync(SpfNetworks& nets, double tau, std::uint64_t step, std::uint64_t interval) {
    if (interval == 0 || step % interval != 0) return false;
    nn::ema_update(nets.online, nets.target, tau);
    return true;
}

namespace {

double max_abs_grad(const nn::ParamTree& tree, const std::string& prefix) {
    double m = 0.0;
    for (const auto& [name, t] : tree) {
        if (!name.starts_with(prefix)) continue;
        for (double g : t.grad) m = std::max(m, std::abs(g));
    }
    return m;
}

}  // namespace

GradientRouting inspect_gradient_routing(SpfNetworks& nets, GaussianActorCritic& agent, const ReplayBatch& batch,
                                         Rng& rng) {
    GradientRouting out;
    // RL losses on representations produced by the trainable online encoders.
    {
        nets.online.zero_grad();
        agent.params().zero_grad();
        Tape tape;
        Var s_bar = nets.encode_state(nets.online, tape, tape.constant(batch.obs), true);
        Var z = nets.encode_pair(nets.online, tape, s_bar, tape.constant(nets.action_input(batch.actions)), true);
        const Eigen::Index B = batch.obs.rows();
        const Matrix means = agent.mean_actions(s_bar.value());
        Matrix samples = means;
        for (Eigen::Index i = 0; i < samples.size(); ++i) samples(i) += rng.normal();
        Vector adv(B);
        for (Eigen::Index i = 0; i < B; ++i) adv(i) = rng.normal();
        Var critic = agent.critic_loss(tape, nn::detach(z), batch.rewards);
        Var actor = agent.actor_loss(tape, nn::detach(s_bar), samples, adv);
        tape.backward(nn::add(critic, actor));
        out.max_encoder_grad_from_rl =
            std::max(max_abs_grad(nets.online, "encoder_s/"), max_abs_grad(nets.online, "encoder_sa/"));
        out.max_rl_head_grad =
            std::max(max_abs_grad(agent.params(), "actor/"), max_abs_grad(agent.params(), "critic/"));
        agent.params().zero_grad();
    }
    // Auxiliary loss against the target networks.
    {
        Tape tape;
        const GaussianActorCritic& a = agent;
        BootstrapPolicy policy = [&a](const ReplayBatch&, const Matrix& s_bar_next) {
            return a.mean_actions(s_bar_next);
        };
        auxiliary_loss_and_grad(nets, batch, policy, tape);
        out.max_target_grad_from_aux = max_abs_grad(nets.target, "");
        out.max_online_grad_from_aux = max_abs_grad(nets.online, "");
        nets.online.zero_grad();
        nets.target.zero_grad();
    }
    return out;
}

// ---- configuration --------------------------------------------------------------------------

namespace {

TrainConfig profile_defaults(const std::string& profile) {
    TrainConfig c;
    c.profile = profile;
    if (profile == "desk") return c;
    if (profile == "paper") {
        c.pretrain_steps = 10000;
        c.batch_size = 256;
        c.buffer_capacity = 100000;
        c.target_interval = 1000;
        c.net.encoder_blocks = 6;
        c.net.encoder_growth = 40;
        c.net.predictor_hidden = {1024};
        c.net.projection_hidden = {512};
        c.net.projection_dim = 512;
        c.net.projection2_hidden = {512};
        return c;
    }
    throw ConfigError("unknown profile '" + profile + "' (expected desk or paper)", 0, "profile");
}

std::vector<std::size_t> get_sizes(const config::Table& root, const std::string& path,
                                   std::vector<std::size_t> fallback) {
    const config::Value* v = config::lookup(root, path);
    if (!v) return fallback;
    std::vector<std::size_t> out;
    for (auto n : config::get_ints(root, path)) {
        if (n <= 0) throw ConfigError("layer sizes must be positive", v->line, path);
        out.push_back(static_cast<std::size_t>(n));
    }
    return out;
}

Distance parse_distance(const std::string& s, int line) {
    if (s == "cosine" || s == "one_minus_cosine") return Distance::one_minus_cosine;
    if (s == "squared" || s == "squared_error") return Distance::squared_error;
    throw ConfigError("unknown distance '" + s + "'", line, "freqloss.distance");
}

EncoderKind parse_encoder(const std::string& s, int line) {
    if (s == "densenet") return EncoderKind::densenet;
    if (s == "identity") return EncoderKind::identity;
    if (s == "onehot_pair") return EncoderKind::onehot_pair;
    throw ConfigError("unknown encoder '" + s + "'", line, "net.encoder");
}

int line_of(const config::Table& root, const std::string& path) {
    const config::Value* v = config::lookup(root, path);
    return v ? v->line : 0;
}

nn::Activation activation_at(const config::Table& root, const std::string& path, nn::Activation fallback) {
    if (!config::lookup(root, path)) return fallback;
    try {
        return nn::parse_activation(config::get_string(root, path));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what(), line_of(root, path), path);
    }
}

}  // namespace

TrainConfig train_config_from(const config::Table& root, const std::string& profile, const Env& env) {
    TrainConfig c = profile_defaults(profile);
    using config::get_bool;
    using config::get_count;
    using config::get_number;
    c.gamma = get_number(root, "train.gamma", c.gamma);
    c.total_steps = get_count(root, "train.total_steps", c.total_steps);
    c.pretrain_steps = get_count(root, "train.pretrain_steps", c.pretrain_steps);
    c.batch_size = get_count(root, "train.batch_size", c.batch_size);
    c.buffer_capacity = get_count(root, "train.buffer_capacity", c.buffer_capacity);
    c.target_interval = get_count(root, "train.target_interval", c.target_interval);
    c.tau = get_number(root, "train.tau", c.tau);
    c.aux_adam.lr = get_number(root, "train.lr", c.aux_adam.lr);
    c.aux_adam.eps = get_number(root, "train.adam_eps", c.aux_adam.eps);
    c.aux_updates = get_bool(root, "train.aux_updates", c.aux_updates);
    c.agent_updates = get_bool(root, "train.agent_updates", c.agent_updates);
    c.eval_episodes = get_count(root, "train.eval_episodes", c.eval_episodes);
    c.eval_interval = get_count(root, "train.eval_interval", c.eval_interval);
    c.log_interval = get_count(root, "train.log_interval", c.log_interval);
    c.checkpoint_interval = get_count(root, "train.checkpoint_interval", c.checkpoint_interval);
    c.seed = static_cast<std::uint64_t>(get_count(root, "train.seed", 0));
    c.threads = worker_count();
    if (c.batch_size == 0) throw ConfigError("batch_size must be positive", line_of(root, "train.batch_size"), "train.batch_size");
    if (c.buffer_capacity < c.batch_size)
        throw ConfigError("buffer_capacity must be at least batch_size", line_of(root, "train.buffer_capacity"),
                          "train.buffer_capacity");
    if (!(c.tau >= 0.0 && c.tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]", line_of(root, "train.tau"), "train.tau");
    if (!(c.aux_adam.lr >= 0.0)) throw ConfigError("lr must be non-negative", line_of(root, "train.lr"), "train.lr");
    if (!(c.aux_adam.eps > 0.0))
        throw ConfigError("adam_eps must be positive", line_of(root, "train.adam_eps"), "train.adam_eps");
    if (c.log_interval == 0) c.log_interval = 1;

    SpfNetConfig& n = c.net;
    const ActionSpace space = env.action_space();
    n.state_dim = env.state_dim();
    n.action_width = space.input_width();
    n.discrete_actions = space.discrete;
    n.gamma = c.gamma;
    n.L = get_count(root, "net.L", n.L);
    if (config::lookup(root, "net.encoder"))
        n.encoder = parse_encoder(config::get_string(root, "net.encoder"), line_of(root, "net.encoder"));
    n.encoder_blocks = get_count(root, "net.encoder_blocks", n.encoder_blocks);
    n.encoder_growth = get_count(root, "net.encoder_growth", n.encoder_growth);
    n.encoder_activation = activation_at(root, "net.encoder_activation", n.encoder_activation);
    n.predictor_hidden = get_sizes(root, "net.predictor_hidden", n.predictor_hidden);
    if (config::lookup(root, "net.predictor_hidden") && config::get_ints(root, "net.predictor_hidden").empty())
        n.predictor_hidden.clear();
    n.predictor_activation = activation_at(root, "net.predictor_activation", n.predictor_activation);
    n.zero_init_heads = get_bool(root, "net.zero_init_heads", n.zero_init_heads);
    n.projection_hidden = get_sizes(root, "net.projection_hidden", n.projection_hidden);
    n.projection_dim = get_count(root, "net.projection_dim", n.projection_dim);
    const std::string p2 = config::get_string(root, "net.projection2", "mlp");
    if (p2 != "mlp" && p2 != "identity")
        throw ConfigError("projection2 must be mlp or identity", line_of(root, "net.projection2"), "net.projection2");
    n.projection2_identity = p2 == "identity";
    n.projection2_hidden = get_sizes(root, "net.projection2_hidden", n.projection2_hidden);

    FreqlossConfig& f = n.freqloss;
    f.k_lo = get_count(root, "freqloss.k_lo", f.k_lo);
    f.k_hi = get_count(root, "freqloss.k_hi", f.k_hi);
    if (config::lookup(root, "freqloss.distance"))
        f.distance = parse_distance(config::get_string(root, "freqloss.distance"), line_of(root, "freqloss.distance"));
    f.w_lo = get_number(root, "freqloss.w_lo", f.w_lo);
    f.w_mid = get_number(root, "freqloss.w_mid", f.w_mid);
    f.w_hi = get_number(root, "freqloss.w_hi", f.w_hi);
    f.use_projection = get_bool(root, "freqloss.use_projection", f.use_projection);
    try {
        n.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what(), 0, "net");
    }
    return c;
}

// ---- trainer ---------------------------------------------------------------------------------

namespace {

std::size_t raw_action_width(const ActionSpace& space) { return space.discrete ? 1 : space.n; }

Vector random_action(const ActionSpace& space, Rng& rng) {
    if (space.discrete) {
        Vector a(1);
        a(0) = static_cast<double>(rng.index(space.n));
        return a;
    }
    Vector a(static_cast<Eigen::Index>(space.n));
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = rng.uniform(space.low, space.high);
    return a;
}

constexpr std::uint64_t kEnvStream = 1;
constexpr std::uint64_t kAgentStream = 2;
constexpr std::uint64_t kSampleStream = 3;
constexpr std::uint64_t kNetInitStream = 4;
constexpr std::uint64_t kAgentInitStream = 5;
constexpr std::uint64_t kEvalStream = 1000;

}  // namespace

Trainer::Trainer(TrainConfig cfg, std::unique_ptr<Env> env, std::unique_ptr<Agent> agent,
                 std::unique_ptr<SpfNetworks> nets)
    : cfg_(std::move(cfg)),
      env_(std::move(env)),
      agent_(std::move(agent)),
      nets_(std::move(nets)),
      buffer_(cfg_.buffer_capacity, env_ ? env_->state_dim() : 1,
              env_ ? raw_action_width(env_->action_space()) : 1),
      env_rng_(cfg_.seed, kEnvStream),
      agent_rng_(cfg_.seed, kAgentStream),
      sample_rng_(cfg_.seed, kSampleStream) {
    if (!env_ || !agent_ || !nets_) throw std::invalid_argument("Trainer: env, agent and networks are required");
    if (nets_->config().state_dim != env_->state_dim())
        throw std::invalid_argument("Trainer: network state width differs from the environment");
    aux_adam_ = nn::adam_init(nets_->online);
}

AgentObs Trainer::observe(const Vector& obs, std::optional<std::size_t> state) {
    AgentObs o;
    o.observation = obs;
    o.s_bar = nets_->state_rep(obs.transpose()).row(0).transpose();
    o.state = state;
    return o;
}

Matrix Trainer::bootstrap_actions(const ReplayBatch& batch, const Matrix& s_bar_next) const {
    return agent_->policy_actions(s_bar_next, batch.next_states);
}

void Trainer::run_until(std::uint64_t until) {
    until = std::min<std::uint64_t>(until, cfg_.total_steps);
    const ActionSpace space = env_->action_space();
    const BootstrapPolicy policy = [this](const ReplayBatch& b, const Matrix& s) { return bootstrap_actions(b, s); };
    while (run_.steps_done < until) {
        if (!episode_open_) {
            obs_ = env_->reset(env_rng_);
            episode_return_ = 0.0;
            episode_open_ = true;
        }
        const bool pretrain = run_.steps_done < cfg_.pretrain_steps;
        const auto state = env_->state_index();
        const Vector action = pretrain ? random_action(space, agent_rng_) : agent_->act(observe(obs_, state), agent_rng_, true);
        const StepResult res = env_->step(action, env_rng_);
        // Time-limit ends are not terminal: the bootstrap stays on.
        buffer_.add(obs_, action, res.observation, res.reward, false, state, env_->state_index());
        episode_return_ += res.reward;
        obs_ = res.observation;

        AuxStepResult aux;
        if (cfg_.aux_updates)
            aux = auxiliary_step(*nets_, buffer_, cfg_.batch_size, aux_adam_, cfg_.aux_adam, sample_rng_, policy);

        if (!pretrain && cfg_.agent_updates && buffer_.size() >= cfg_.batch_size) {
            const ReplayBatch b = buffer_.sample(cfg_.batch_size, sample_rng_);
            RepBatch rb;
            rb.s_bar = nets_->state_rep(b.obs);
            rb.z = nets_->pair_rep(rb.s_bar, nets_->action_input(b.actions));
            rb.s_bar_next = nets_->state_rep(b.next_obs);
            rb.actions = b.actions;
            rb.rewards = b.rewards;
            rb.dones = b.terminals;
            rb.states = b.states;
            rb.next_states = b.next_states;
            SpfNetworks* nets = nets_.get();
            rb.encode_sa = [nets](const Matrix& s, const Matrix& a) { return nets->pair_rep(s, nets->action_input(a)); };
            const AgentStats st = agent_->update(rb, agent_rng_);
            if (agent_->kind() == "gaussian_actor_critic") run_.entropy_trace.push_back(st.entropy);
        }

        ++run_.steps_done;
        target_sync(*nets_, cfg_.tau, run_.steps_done, cfg_.target_interval);

        MetricRow row;
        row.step = run_.steps_done;
        row.aux_performed = aux.performed;
        row.loss = aux.loss;
        row.lo = aux.lo;
        row.mid = aux.mid;
        row.hi = aux.hi;
        if (res.done) {
            row.episodic_return = episode_return_;
            run_.episode_returns.push_back(episode_return_);
            episode_open_ = false;
        }
        if (row.episodic_return || run_.steps_done % cfg_.log_interval == 0) run_.metrics.push_back(row);

        if (cfg_.eval_interval > 0 && run_.steps_done % cfg_.eval_interval == 0 && cfg_.eval_episodes > 0) {
            auto r = evaluate(cfg_.eval_episodes, run_.steps_done);
            run_.eval_returns.insert(run_.eval_returns.end(), r.begin(), r.end());
            run_.eval_steps.insert(run_.eval_steps.end(), r.size(), run_.steps_done);
        }
        if (on_step) on_step(*this, run_.steps_done);
    }
}

std::vector<double> Trainer::evaluate(std::size_t episodes, std::uint64_t seed_offset) {
    std::vector<double> returns(episodes, 0.0);
    if (episodes == 0) return returns;
    const std::size_t workers = std::max<std::size_t>(1, std::min(cfg_.threads, episodes));
    auto job = [&](std::size_t w) {
        // Each worker owns deep copies; results depend only on the episode index.
        std::unique_ptr<Agent> agent = agent_->clone();
        SpfNetworks nets = *nets_;
        std::unique_ptr<Env> env = env_->clone();
        for (std::size_t e = w; e < episodes; e += workers) {
            Rng rng(cfg_.seed ^ (seed_offset * 0x9E3779B97F4A7C15ULL), kEvalStream + e);
            Vector obs = env->reset(rng);
            double total = 0.0;
            for (std::size_t t = 0; t < env->horizon(); ++t) {
                AgentObs o;
                o.observation = obs;
                o.s_bar = nets.state_rep(obs.transpose()).row(0).transpose();
                o.state = env->state_index();
                const StepResult r = env->step(agent->policy_action(o), rng);
                total += r.reward;
                obs = r.observation;
                if (r.done) break;
            }
            returns[e] = total;
        }
    };
    if (workers == 1) {
        job(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(job, w);
        for (auto& t : pool) t.join();
    }
    return returns;
}

void Trainer::save(const std::string& base_path) const {
    nn::Checkpoint ckpt;
    ckpt.step = run_.steps_done;
    ckpt.add_tree("online/", nets_->online);
    ckpt.add_tree("target/", nets_->target);
    ckpt.add_tree("aux_adam/m/", aux_adam_.m);
    ckpt.add_tree("aux_adam/v/", aux_adam_.v);
    agent_->save(ckpt, "agent/");
    buffer_.save(ckpt, "buffer/");
    const std::vector<double> env_state = env_->save_state();
    nn::Tensor es({env_state.size()});
    es.data = env_state;
    ckpt.tensors.emplace_back("env/state", es);
    nn::Tensor ob({static_cast<std::size_t>(obs_.size())});
    for (Eigen::Index i = 0; i < obs_.size(); ++i) ob.data[static_cast<std::size_t>(i)] = obs_(i);
    ckpt.tensors.emplace_back("trainer/obs", ob);
    ckpt.tensors.emplace_back("trainer/episode_return", nn::Tensor({1}, episode_return_));

    nlohmann::json meta;
    meta["profile"] = cfg_.profile;
    meta["seed"] = cfg_.seed;
    meta["steps_done"] = run_.steps_done;
    meta["episode_open"] = episode_open_;
    meta["aux_adam_step"] = aux_adam_.step;
    auto rng_json = [](const Rng& r) { return nlohmann::json{{"key", r.key()}, {"counter", r.counter()}}; };
    meta["rng"] = {{"env", rng_json(env_rng_)}, {"agent", rng_json(agent_rng_)}, {"sample", rng_json(sample_rng_)}};
    ckpt.meta_json = meta.dump();
    nn::save_checkpoint(ckpt, base_path);
}

void Trainer::load(const std::string& base_path) {
    const nn::Checkpoint ckpt = nn::load_checkpoint(base_path);
    const auto meta = nlohmann::json::parse(ckpt.meta_json);
    if (meta.at("seed").get<std::uint64_t>() != cfg_.seed)
        throw std::invalid_argument("Trainer::load: checkpoint seed differs from the configured seed");
    ckpt.load_tree("online/", nets_->online);
    ckpt.load_tree("target/", nets_->target);
    ckpt.load_tree("aux_adam/m/", aux_adam_.m);
    ckpt.load_tree("aux_adam/v/", aux_adam_.v);
    aux_adam_.step = meta.at("aux_adam_step").get<std::uint64_t>();
    agent_->load(ckpt, "agent/");
    buffer_.load(ckpt, "buffer/");
    env_->load_state(ckpt.get("env/state").data);
    const auto& ob = ckpt.get("trainer/obs").data;
    obs_ = Eigen::Map<const Vector>(ob.data(), static_cast<Eigen::Index>(ob.size()));
    episode_return_ = ckpt.get("trainer/episode_return").data.at(0);
    episode_open_ = meta.at("episode_open").get<bool>();
    auto rng_from = [](const nlohmann::json& j) {
        return Rng::from_state(j.at("key").get<std::uint64_t>(), j.at("counter").get<std::uint64_t>());
    };
    env_rng_ = rng_from(meta.at("rng").at("env"));
    agent_rng_ = rng_from(meta.at("rng").at("agent"));
    sample_rng_ = rng_from(meta.at("rng").at("sample"));
    run_ = TrainRun{};
    run_.steps_done = meta.at("steps_done").get<std::uint64_t>();
}

std::unique_ptr<Trainer> make_trainer(const config::Table& root, const std::string& profile, std::uint64_t seed) {
    std::unique_ptr<Env> env = env_from_config(root);
    TrainConfig cfg = train_config_from(root, profile, *env);
    cfg.seed = seed;
    Rng net_rng(seed, kNetInitStream);
    auto nets = std::make_unique<SpfNetworks>(cfg.net, net_rng);
    Rng agent_rng(seed, kAgentInitStream);
    std::unique_ptr<Agent> agent = agent_from_config(root, *env, nets->rep_dim(), nets->z_dim(), cfg.gamma, agent_rng);
    return std::make_unique<Trainer>(std::move(cfg), std::move(env), std::move(agent), std::move(nets));
}

// ---- tabular harness ------------------------------------------------------------------------

TabularMdp harness_mdp(const HarnessConfig& cfg) {
    const std::size_t S = cfg.n_states;
    const std::size_t A = cfg.n_actions;
    if (S < 2 || A < 1) throw std::invalid_argument("harness_mdp: need at least 2 states and 1 action");
    std::vector<double> p(S * A * S, 0.0);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) p[(s * A + a) * S + (s + a + 1) % S] = 1.0;
    return TabularMdp(S, A, std::move(p), Vector::Zero(static_cast<Eigen::Index>(S)),
                      Vector::Constant(static_cast<Eigen::Index>(S), 1.0 / static_cast<double>(S)), cfg.gamma,
                      Matrix::Identity(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(S)));
}

std::vector<std::size_t> harness_policy(const HarnessConfig& cfg) {
    std::vector<std::size_t> pol(cfg.n_states);
    for (std::size_t s = 0; s < cfg.n_states; ++s) pol[s] = (s * 7 + 3) % cfg.n_actions;
    return pol;
}

HarnessResult run_tabular_harness(const HarnessConfig& cfg) {
    const TabularMdp mdp = harness_mdp(cfg);
    const std::vector<std::size_t> greedy = harness_policy(cfg);
    const std::size_t S = cfg.n_states;
    const std::size_t A = cfg.n_actions;

    TrainConfig tc;
    tc.profile = "harness";
    tc.gamma = cfg.gamma;
    tc.total_steps = cfg.updates + cfg.batch_size - 1;
    tc.pretrain_steps = tc.total_steps;  // behaviour stays uniform random throughout
    tc.batch_size = cfg.batch_size;
    tc.buffer_capacity = std::max<std::size_t>(cfg.batch_size, 1000);
    tc.target_interval = cfg.target_interval;
    tc.tau = cfg.tau;
    tc.aux_adam.lr = cfg.lr;
    tc.aux_adam.eps = cfg.adam_eps;
    tc.agent_updates = false;
    tc.eval_episodes = 0;
    tc.seed = cfg.seed;
    tc.net.state_dim = S;
    tc.net.action_width = A;
    tc.net.discrete_actions = true;
    tc.net.L = cfg.L;
    tc.net.gamma = cfg.gamma;
    tc.net.encoder = EncoderKind::onehot_pair;
    tc.net.predictor_hidden.clear();
    tc.net.zero_init_heads = true;
    tc.net.freqloss.use_projection = false;
    tc.net.freqloss.distance = cfg.distance;
    tc.net.freqloss.k_lo = std::min<std::size_t>(2, cfg.L / 4);
    tc.net.freqloss.k_hi = tc.net.freqloss.k_lo;

    TabularQOptions qo;
    qo.n_states = S;
    qo.n_actions = A;
    qo.lr = 0.0;
    qo.gamma = cfg.gamma;
    qo.epsilon = 1.0;
    qo.initial_greedy = greedy;

    Rng init(cfg.seed, kNetInitStream);
    auto nets = std::make_unique<SpfNetworks>(tc.net, init);
    SpfNetworks* net_ptr = nets.get();
    Trainer trainer(tc, std::make_unique<TabularEnv>(mdp, 50), std::make_unique<TabularQAgent>(qo), std::move(nets));
    trainer.run();

    HarnessResult out;
    for (const auto& row : trainer.trace().metrics)
        if (row.loss != 0.0 || !out.loss_trace.empty()) out.loss_trace.push_back(row.loss);
    if (!out.loss_trace.empty()) {
        out.first_loss = out.loss_trace.front();
        out.last_loss = out.loss_trace.back();
    }

    TabularPolicy pol = TabularPolicy::deterministic(greedy, A);
    const DtftConfig dc{cfg.L, S, cfg.gamma, true};
    const auto exact = solve_dtft_fixed_point(mdp, pol, dc);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) {
            Vector obs = mdp.embedding().row(static_cast<Eigen::Index>(s)).transpose();
            Vector act(1);
            act(0) = static_cast<double>(a);
            const DtftMatrix pred = predict_dtft(*net_ptr, false, obs, act).to_dtft();
            const DtftMatrix& ref = exact.field.at(s, a);
            double pn = 0.0, rn = 0.0;
            for (std::size_t i = 0; i < pred.values.size(); ++i) {
                pn += std::norm(pred.values[i]);
                rn += std::norm(ref.values[i]);
            }
            for (std::size_t k = 0; k < pred.rows; ++k) {
                double e = 0.0;
                for (std::size_t d = 0; d < pred.cols; ++d) e += std::norm(pred(k, d) - ref(k, d));
                out.sup_error = std::max(out.sup_error, std::sqrt(e));
            }
            pn = std::sqrt(pn);
            rn = std::sqrt(rn);
            double dir = 0.0;
            for (std::size_t i = 0; i < pred.values.size(); ++i)
                dir += std::norm(pred.values[i] / std::max(pn, 1e-300) - ref.values[i] / rn);
            out.directional_error = std::max(out.directional_error, std::sqrt(dir));

            const std::size_t k_lo = tc.net.freqloss.k_lo;
            const std::size_t k_hi = tc.net.freqloss.k_hi;
            const std::size_t bands[4] = {0, k_lo, pred.rows - k_hi, pred.rows};
            for (int part = 0; part < 2; ++part)
                for (int b = 0; b < 3; ++b) {
                    auto pick = [part](const Complex& c) { return part == 0 ? c.real() : c.imag(); };
                    double p2 = 0.0, r2 = 0.0;
                    for (std::size_t k = bands[b]; k < bands[b + 1]; ++k)
                        for (std::size_t d = 0; d < pred.cols; ++d) {
                            p2 += pick(pred(k, d)) * pick(pred(k, d));
                            r2 += pick(ref(k, d)) * pick(ref(k, d));
                        }
                    // Bands that are identically zero in the exact field (imaginary part at bin 0) carry no direction.
                    if (r2 < 1e-24) continue;
                    double e = 0.0;
                    for (std::size_t k = bands[b]; k < bands[b + 1]; ++k)
                        for (std::size_t d = 0; d < pred.cols; ++d) {
                            const double u = p2 > 0.0 ? pick(pred(k, d)) / std::sqrt(p2) : 0.0;
                            const double v = pick(ref(k, d)) / std::sqrt(r2);
                            e += (u - v) * (u - v);
                        }
                    out.band_directional_error = std::max(out.band_directional_error, std::sqrt(e));
                }
        }
    return out;
}

}  // namespace spf
