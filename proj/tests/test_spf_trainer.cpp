#include <doctest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>

#include "spf/config.hpp"
#include "spf/spf_trainer.hpp"

using namespace spf;
using C = std::complex<double>;

namespace {

SpfNetConfig small_net(std::size_t D, std::size_t A, bool discrete, std::size_t L = 16) {
    SpfNetConfig c;
    c.state_dim = D;
    c.action_width = A;
    c.discrete_actions = discrete;
    c.L = L;
    c.gamma = 0.9;
    c.encoder_blocks = 2;
    c.encoder_growth = 4;
    c.predictor_hidden = {12};
    c.projection_hidden = {6};
    c.projection_dim = 5;
    c.projection2_hidden = {6};
    c.freqloss.k_lo = 2;
    c.freqloss.k_hi = 2;
    return c;
}

ReplayBatch random_batch(std::size_t B, std::size_t D, Rng& rng) {
    ReplayBatch b;
    b.obs = Matrix::NullaryExpr(Eigen::Index(B), Eigen::Index(D), [&] { return rng.normal(); });
    b.next_obs = Matrix::NullaryExpr(Eigen::Index(B), Eigen::Index(D), [&] { return rng.normal(); });
    b.actions = Matrix::NullaryExpr(Eigen::Index(B), 1, [&] { return rng.uniform(-1.0, 1.0); });
    b.rewards = Vector::Zero(Eigen::Index(B));
    b.terminals = Vector::Zero(Eigen::Index(B));
    return b;
}

double naive_distance(const Matrix& x, const Matrix& y, Distance d) {
    double total = 0.0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        if (d == Distance::squared_error)
            total += (x.row(r) - y.row(r)).squaredNorm();
        else
            total += 1.0 - x.row(r).dot(y.row(r)) / (x.row(r).norm() * y.row(r).norm() + 1e-8);
    }
    return total / double(x.rows());
}

const char* kTinyPendulum = R"(
[env]
kind = "pendulum"
horizon = 40
[train]
gamma = 0.9
total_steps = 120
pretrain_steps = 30
batch_size = 8
buffer_capacity = 200
target_interval = 10
tau = 0.5
eval_episodes = 2
eval_interval = 60
seed = 3
[net]
L = 8
encoder_blocks = 2
encoder_growth = 4
predictor_hidden = [8]
projection_hidden = [4]
projection_dim = 4
projection2_hidden = [4]
[freqloss]
k_lo = 1
k_hi = 1
[agent]
kind = "gaussian_actor_critic"
actor_hidden = [8]
critic_hidden = [8]
)";

}  // namespace

TEST_CASE("TD target equals S-tilde plus Gamma times the target prediction") {
    Rng rng(1);
    SpfNetworks nets(small_net(3, 1, false), rng);
    const ReplayBatch b = random_batch(4, 3, rng);
    const TdTarget t = build_td_target(nets, b.next_obs, b.actions, 0.9, 16);
    for (Eigen::Index i = 0; i < 4; ++i) {
        const auto p = predict_dtft(nets, true, b.next_obs.row(i).transpose(), b.actions.row(i).transpose());
        for (std::size_t k = 0; k < 9; ++k)
            for (std::size_t d = 0; d < 3; ++d) {
                const C f(p.re(Eigen::Index(k), Eigen::Index(d)), p.im(Eigen::Index(k), Eigen::Index(d)));
                const C expected = b.next_obs(i, Eigen::Index(d)) + 0.9 * std::polar(1.0, -2.0 * std::numbers::pi * double(k) / 16.0) * f;
                const Eigen::Index col = Eigen::Index(k * 3 + d);
                CHECK(std::abs(C(t.re(i, col), t.im(i, col)) - expected) < 1e-12);
            }
    }
    CHECK_THROWS_AS(build_td_target(nets, b.next_obs, b.actions, 0.9, 32), std::invalid_argument);
}

TEST_CASE("freqloss matches a direct band-by-band computation") {
    for (Distance dist : {Distance::one_minus_cosine, Distance::squared_error}) {
        for (bool project : {true, false}) {
            Rng rng(2);
            SpfNetConfig cfg = small_net(2, 1, false);
            cfg.freqloss.distance = dist;
            cfg.freqloss.use_projection = project;
            cfg.freqloss.w_lo = 0.5;
            cfg.freqloss.w_hi = 2.0;
            SpfNetworks nets(cfg, rng);
            const Eigen::Index W = Eigen::Index(nets.head_width());
            const Matrix pr = Matrix::Random(5, W), pi = Matrix::Random(5, W);
            const Matrix tr = Matrix::Random(5, W), ti = Matrix::Random(5, W);
            nn::Tape tape;
            const auto terms = freqloss(tape.constant(pr), tape.constant(pi), tr, ti, nets, cfg.freqloss, tape);

            const Eigen::Index lo = 4, hi = 4, mid = W - 8;
            double exp_lo = 0, exp_mid = 0, exp_hi = 0;
            for (const auto& [p, t] : {std::pair{pr, tr}, std::pair{pi, ti}}) {
                exp_lo += naive_distance(p.leftCols(lo), t.leftCols(lo), dist);
                exp_hi += naive_distance(p.rightCols(hi), t.rightCols(hi), dist);
                Matrix pm = p.middleCols(lo, mid), tm = t.middleCols(lo, mid);
                if (project) {
                    nn::Tape pt;
                    pm = nets.project2(nets.online, pt, nets.project(nets.online, pt, pt.constant(pm), false), false).value();
                    tm = nets.project(nets.target, pt, pt.constant(tm), false).value();
                }
                exp_mid += naive_distance(pm, tm, dist);
            }
            CHECK(terms.lo == doctest::Approx(exp_lo).epsilon(1e-12));
            CHECK(terms.mid == doctest::Approx(exp_mid).epsilon(1e-12));
            CHECK(terms.hi == doctest::Approx(exp_hi).epsilon(1e-12));
            CHECK(tape.value(terms.total)(0, 0) == doctest::Approx(0.5 * exp_lo + exp_mid + 2.0 * exp_hi).epsilon(1e-12));
        }
    }
}

TEST_CASE("band widths are validated") {
    FreqlossConfig f;
    f.k_lo = 5;
    f.k_hi = 4;
    CHECK_THROWS_AS(f.validate(9), std::invalid_argument);
    f.k_lo = 4;
    CHECK_NOTHROW(f.validate(9));
    f.w_mid = 0.0;
    CHECK_THROWS_AS(f.validate(9), std::invalid_argument);
}

TEST_CASE("RL losses never reach the encoders and the aux loss never reaches the targets") {
    Rng rng(3);
    SpfNetworks nets(small_net(3, 1, false), rng);
    ActorCriticOptions o;
    o.rep_dim = nets.rep_dim();
    o.z_dim = nets.z_dim();
    o.actor_hidden = {8};
    o.critic_hidden = {8};
    GaussianActorCritic agent(o, rng);
    const ReplayBatch batch = random_batch(6, 3, rng);
    const GradientRouting g = inspect_gradient_routing(nets, agent, batch, rng);
    CHECK(g.max_encoder_grad_from_rl == 0.0);
    CHECK(g.max_target_grad_from_aux == 0.0);
    CHECK(g.max_online_grad_from_aux > 0.0);
    CHECK(g.max_rl_head_grad > 0.0);
}

TEST_CASE("target sync follows the interval and tau") {
    Rng rng(4);
    SpfNetworks nets(small_net(2, 1, false), rng);
    for (auto& [name, t] : nets.online)
        for (double& v : t.data) v += 1.0;
    const nn::ParamTree before = nets.target;
    CHECK_FALSE(target_sync(nets, 0.25, 3, 2));
    CHECK(target_sync(nets, 0.25, 4, 2));
    for (const auto& [name, t] : nets.target)
        for (std::size_t i = 0; i < t.data.size(); ++i)
            CHECK(t.data[i] == doctest::Approx(0.75 * before.at(name).data[i] + 0.25 * nets.online.at(name).data[i]));
}

TEST_CASE("replay buffer wraps and round-trips through a checkpoint") {
    ReplayBuffer buf(3, 2, 1);
    for (int i = 0; i < 5; ++i)
        buf.add(Vector::Constant(2, i), Vector::Constant(1, i), Vector::Constant(2, i + 1), i, false, std::size_t(i),
                std::size_t(i + 1));
    CHECK(buf.size() == 3);
    Rng rng(0);
    const ReplayBatch b = buf.sample(50, rng);
    CHECK(b.obs.minCoeff() >= 2.0);
    CHECK(b.states.size() == 50);
    nn::Checkpoint ckpt;
    buf.save(ckpt, "buf/");
    ReplayBuffer other(3, 2, 1);
    other.load(ckpt, "buf/");
    Rng r1(9), r2(9);
    CHECK(buf.sample(10, r1).obs == other.sample(10, r2).obs);
    ReplayBuffer empty(3, 2, 1);
    CHECK_THROWS_AS(empty.sample(1, rng), std::invalid_argument);
}

TEST_CASE("tabular harness converges to the exact field under squared error") {
    HarnessConfig cfg;
    const HarnessResult r = run_tabular_harness(cfg);
    CHECK(r.sup_error < 1e-3);
    CHECK(r.last_loss < r.first_loss);
}

TEST_CASE("profiles and training keys resolve") {
    const auto root = config::parse(kTinyPendulum);
    auto trainer = make_trainer(root, "desk", 3);
    CHECK(trainer->config().net.L == 8);
    CHECK(trainer->config().batch_size == 8);
    auto paper = make_trainer(config::parse("[env]\nkind = \"pendulum\"\n"), "paper", 0);
    CHECK(paper->config().net.projection_dim == 512);
    CHECK_THROWS_AS(make_trainer(root, "huge", 0), config::ConfigError);
    CHECK_THROWS_AS(make_trainer(config::parse("[env]\nkind = \"pendulum\"\n[freqloss]\ndistance = \"l1\"\n"), "desk", 0),
                    config::ConfigError);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
    const auto root = config::parse(kTinyPendulum);
    auto full = make_trainer(root, "desk", 3);
    full->run();

    const auto path = (std::filesystem::temp_directory_path() / "spf_resume_test").string();
    auto first = make_trainer(root, "desk", 3);
    first->run_until(70);
    first->save(path);
    auto second = make_trainer(root, "desk", 3);
    second->load(path);
    second->run();

    const auto& a = full->trace();
    const auto& b = second->trace();
    REQUIRE(b.metrics.size() <= a.metrics.size());
    const std::size_t offset = a.metrics.size() - b.metrics.size();
    for (std::size_t i = 0; i < b.metrics.size(); ++i) {
        CHECK(a.metrics[offset + i].step == b.metrics[i].step);
        CHECK(std::abs(a.metrics[offset + i].loss - b.metrics[i].loss) <= 1e-9);
    }
    CHECK(b.eval_returns == std::vector<double>(a.eval_returns.end() - long(b.eval_returns.size()), a.eval_returns.end()));
    for (const auto& [name, t] : full->nets().online) CHECK(second->nets().online.at(name).data == t.data);
    std::filesystem::remove(path + ".json");
    std::filesystem::remove(path + ".bin");
}
